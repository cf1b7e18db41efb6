"""
Owner fingerprint binding and ownership verification over a local
hash-chained NDJSON ledger.

Each record line is compact JSON; a record's digest is the SHA-256 of its
exact line bytes (newline excluded) and the next record carries it as
`prev_digest`. `<ledger>.head` anchors the last seq and digest so edits to
the final record are caught as well. The head is written after the record,
so a head exactly one record behind, pointing at the last record's
predecessor, is an interrupted append; the next append re-anchors it.
"""
from __future__ import annotations
import hashlib, json, os, threading
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from . import config
from .errors import ClockSkewError, CorruptionError, InvalidInputError
from .logger import get_logger
from .media import TriggerSet
from .phash import PerceptualHash, RgbImage, image_phash, xor
from .schema import LEDGER_RECORD_SCHEMA, is_valid

log = get_logger("ledger")


@dataclass(frozen=True)
class LedgerRecord:
    seq: int
    timestamp: str
    owner_id: str
    p_hex: str
    prev_digest: str
    note: str = ""

    @property
    def p(self) -> PerceptualHash:
        return PerceptualHash.from_hex(self.p_hex)

    def to_line(self) -> bytes:
        return json.dumps(asdict(self), separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    @classmethod
    def from_line(cls, line: bytes) -> "LedgerRecord":
        obj = json.loads(line.decode("utf-8"))
        if not is_valid(obj, LEDGER_RECORD_SCHEMA):
            raise ValueError("record does not match the ledger schema")
        return cls(**obj)


@dataclass(frozen=True)
class ChainStatus:
    ok: bool
    first_bad_seq: Optional[int] = None
    length: int = 0
    head_behind: bool = False


def digest(line: bytes) -> str:
    return hashlib.sha256(line).hexdigest()


def _format_ts(now: datetime) -> str:
    return now.astimezone(timezone.utc).strftime(config.LEDGER_TIME_FMT)


def _parse_ts(text: str) -> datetime:
    return datetime.strptime(text, config.LEDGER_TIME_FMT).replace(tzinfo=timezone.utc)


class Ledger:
    """Single-writer append-only store; readers work on one read of the file."""

    def __init__(self, path):
        self.path = Path(path)
        self.head_path = self.path.with_name(self.path.name + ".head")
        self._lock = threading.Lock()

    # Reading

    def _snapshot(self) -> Tuple[List[bytes], Optional[dict]]:
        lines: List[bytes] = []
        if self.path.exists():
            data = self.path.read_bytes()
            lines = data.split(b"\n")
            if lines and lines[-1] == b"":
                lines.pop()
        head = None
        if self.head_path.exists():
            try:
                head = json.loads(self.head_path.read_text(encoding="utf-8"))
            except ValueError:
                head = {}
            if not isinstance(head, dict):
                head = {}
        return lines, head

    @staticmethod
    def _check(lines: Sequence[bytes], head: Optional[dict]) -> Tuple[ChainStatus, List[LedgerRecord]]:
        """Walk the chain over the raw line bytes.

        A record whose own prev_digest disagrees with the previous line is bad
        at its seq. A record that is unreadable or misnumbered is vouched for
        by the next record's prev_digest, so the break shows at seq + 1; the
        last record is vouched for by the head.
        """
        n = len(lines)
        prev = config.GENESIS_DIGEST
        recs: List[LedgerRecord] = []
        damaged: Optional[int] = None
        for i, line in enumerate(lines):
            seq = i + 1
            try:
                rec = LedgerRecord.from_line(line)
            except (ValueError, TypeError):
                rec = None
            if rec is not None and rec.prev_digest != prev:
                return ChainStatus(False, seq, n), recs
            if rec is None or rec.seq != seq:
                if seq == n:
                    return ChainStatus(False, seq, n), recs
                damaged = damaged or seq
            else:
                recs.append(rec)
            prev = digest(line)
        if damaged is not None:
            return ChainStatus(False, damaged, n), recs
        if not lines:
            return ChainStatus(True, None, 0), recs
        if head is None and n == 1:
            return ChainStatus(True, None, n, head_behind=True), recs
        head_seq = (head or {}).get("seq")
        if not isinstance(head_seq, int) or head_seq < 1:
            return ChainStatus(False, n, n), recs
        # an append that stopped between the record and the head
        if head_seq == n - 1 and head.get("digest") == recs[-1].prev_digest:
            return ChainStatus(True, None, n, head_behind=True), recs
        if head_seq != n:
            return ChainStatus(False, min(head_seq, n) + 1, n), recs
        if head.get("digest") != prev:
            return ChainStatus(False, n, n), recs
        return ChainStatus(True, None, n), recs

    def verify_chain(self) -> ChainStatus:
        status, _ = self._check(*self._snapshot())
        return status

    def records(self) -> List[LedgerRecord]:
        status, recs = self._check(*self._snapshot())
        if not status.ok:
            raise CorruptionError(f"ledger {self.path} breaks at seq {status.first_bad_seq}",
                                  status.first_bad_seq)
        return recs

    def __len__(self):
        return len(self.records())

    # Writing

    def _write_head(self, seq: int, last_digest: str):
        tmp = self.head_path.with_name(self.head_path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({"seq": seq, "digest": last_digest}, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.head_path)

    def append(self, owner_id: str, p: PerceptualHash, note: str = "",
               now: Optional[datetime] = None) -> LedgerRecord:
        with self._lock:
            lines, head = self._snapshot()
            status, recs = self._check(lines, head)
            if not status.ok:
                raise CorruptionError(
                    f"refusing to append: ledger {self.path} breaks at seq {status.first_bad_seq}",
                    status.first_bad_seq)
            if status.head_behind:
                log.warning("ledger %s head lags its last record after an interrupted append; re-anchoring",
                            self.path)
            now = now or datetime.now(timezone.utc)
            if now.tzinfo is None:
                raise InvalidInputError("ledger timestamps need a timezone-aware clock")
            ts = _format_ts(now)
            if recs and _parse_ts(ts) < _parse_ts(recs[-1].timestamp):
                raise ClockSkewError(
                    f"clock reads {ts}, earlier than record {recs[-1].seq} at {recs[-1].timestamp}")
            prev = digest(lines[-1]) if lines else config.GENESIS_DIGEST
            rec = LedgerRecord(len(recs) + 1, ts, owner_id, p.hex(), prev, note)
            line = rec.to_line()
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "ab") as fh:
                fh.write(line + b"\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._write_head(rec.seq, digest(line))
            log.debug("ledger append seq=%d owner=%s", rec.seq, owner_id)
            return rec


# Operations

def fingerprint_bind(trigger_img: RgbImage, owner_fp_img: RgbImage) -> PerceptualHash:
    return xor(image_phash(trigger_img), image_phash(owner_fp_img))


def append(store: Ledger, owner_id: str, p: PerceptualHash, note: str = "",
           now: Optional[datetime] = None) -> LedgerRecord:
    return store.append(owner_id, p, note, now=now)


def verify_chain(store: Ledger) -> ChainStatus:
    return store.verify_chain()


def records(store: Ledger) -> List[LedgerRecord]:
    return store.records()


def verify_ownership(store: Ledger, trigger_img: RgbImage, owner_fp_img: RgbImage) -> Optional[LedgerRecord]:
    """Earliest record whose stored P equals the recomputed binding, or None."""
    wanted = fingerprint_bind(trigger_img, owner_fp_img).hex()
    for rec in store.records():
        if rec.p_hex == wanted:
            return rec
    return None


def claim_trigger_set(store: Ledger, owner_id: str, triggers: TriggerSet, owner_fp_img: RgbImage,
                      note: str = "", now: Optional[datetime] = None) -> List[LedgerRecord]:
    out = []
    for i, img in enumerate(triggers.images):
        tag = f"trigger={i} label={triggers.label} user={triggers.user_id}"
        out.append(store.append(owner_id, fingerprint_bind(img, owner_fp_img),
                                f"{note} {tag}".strip(), now=now))
    log.info("claimed %d triggers of %s for %s", len(out), triggers.user_id, owner_id)
    return out
