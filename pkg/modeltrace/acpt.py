"""
Active protection: the authorization control center.

A request is served by the true model only when some user's detector
accepts the submitted key image AND the validator finds
I = m1 XOR pHash(key image) enrolled for that same user, where m1 is the
64-bit big-endian value of the 8-character encrypted username. Every other
request gets a uniformly random class from a seeded stream.
"""
from __future__ import annotations
import hashlib, json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import confusion_matrix

from . import config, tinynn
from .errors import CollisionError, FormatError, InvalidInputError
from .logger import RunLogger, get_logger
from .media import images_to_inputs, load_pnm, save_pnm
from .phash import RgbImage, image_phash
from .schema import IDENTITY_ENTRY_SCHEMA, ValidationError, decode_and_validate
from .tinynn import LabeledDataset, LayerSpec, ModelSnapshot, TrainConfig

log = get_logger("acpt")


# Credentials

@dataclass(frozen=True)
class Credential:
    username: str
    encrypted_username: str
    k1: Tuple[int, ...]

    def __post_init__(self):
        k1 = tuple(int(i) for i in self.k1)
        object.__setattr__(self, "k1", k1)
        if len(k1) != config.CREDENTIAL_LEN or len(set(k1)) != len(k1):
            raise InvalidInputError(f"k1 needs {config.CREDENTIAL_LEN} distinct indices, got {k1}")
        if any(not 0 <= i < 64 for i in k1):
            raise InvalidInputError(f"k1 indices must lie in [0, 63], got {k1}")
        enc = self.encrypted_username
        if len(enc) != config.CREDENTIAL_LEN or any(c not in config.HASH_ALPHABET for c in enc):
            raise InvalidInputError(f"encrypted username must be {config.CREDENTIAL_LEN} hex chars: {enc!r}")

    def to_text(self) -> str:
        return f"{self.encrypted_username} {','.join(str(i) for i in self.k1)}"


def parse_k1(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError:
        raise InvalidInputError(f"k1 must be comma-separated integers, got {text!r}")


def random_k1(seed: Optional[int] = None) -> Tuple[int, ...]:
    rng = np.random.default_rng(seed)
    return tuple(int(i) for i in rng.choice(64, size=config.CREDENTIAL_LEN, replace=False))


def make_credential(username: str, owner_fp: str, k1: Sequence[int]) -> Credential:
    """m = sha256(owner_fp + "_" + username) as 64 hex chars; keep the chars at positions k1."""
    try:
        material = f"{owner_fp}{config.CREDENTIAL_SEP}{username}".encode("ascii")
    except UnicodeEncodeError:
        raise InvalidInputError("owner fingerprint and username must be ASCII")
    m = hashlib.sha256(material).hexdigest()
    k1 = tuple(int(i) for i in k1)
    if len(k1) != config.CREDENTIAL_LEN or len(set(k1)) != len(k1) or any(not 0 <= i < 64 for i in k1):
        raise InvalidInputError(f"k1 needs {config.CREDENTIAL_LEN} distinct indices in [0, 63], got {k1}")
    return Credential(username, "".join(m[i] for i in k1), k1)


def credential_value(encrypted_username: str) -> int:
    """m1: the 8 ASCII bytes as one big-endian 64-bit integer."""
    if len(encrypted_username) != config.CREDENTIAL_LEN:
        raise InvalidInputError(
            f"credential must be {config.CREDENTIAL_LEN} characters, got {len(encrypted_username)}")
    try:
        raw = encrypted_username.encode("ascii")
    except UnicodeEncodeError:
        raise InvalidInputError("credential must be ASCII")
    return int.from_bytes(raw, "big")


def verification_value(encrypted_username: str, key_image: RgbImage) -> int:
    return credential_value(encrypted_username) ^ image_phash(key_image).value


# Identity base Q

@dataclass(frozen=True)
class IdentityBase:
    entries: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))

    def __len__(self):
        return len(self.entries)

    def __contains__(self, value: int):
        return value in self.entries

    def lookup(self, value: int) -> Optional[str]:
        return self.entries.get(value)

    def with_entry(self, value: int, user_id: str) -> "IdentityBase":
        if value in self.entries:
            raise CollisionError(self.entries[value], user_id)
        return IdentityBase({**self.entries, value: user_id})


@dataclass(frozen=True)
class ValidationOutcome:
    accepted: bool
    user_id: Optional[str] = None

    def __bool__(self):
        return self.accepted

    def __str__(self):
        return f"yes({self.user_id})" if self.accepted else "no"


def enroll(base: IdentityBase, credential: Credential, key_image: RgbImage, user_id: str) -> IdentityBase:
    value = verification_value(credential.encrypted_username, key_image)
    log.debug("enrolled %s", user_id)
    return base.with_entry(value, user_id)


def validate(base: IdentityBase, encrypted_username: str, key_image: RgbImage) -> ValidationOutcome:
    user = base.lookup(verification_value(encrypted_username, key_image))
    return ValidationOutcome(user is not None, user)


def save_identity_base(base: IdentityBase, path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"user_id": u, "i_hex": f"{v:016x}"}, separators=(",", ":"))
             for v, u in sorted(base.entries.items())]
    p.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_identity_base(path) -> IdentityBase:
    base = IdentityBase()
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = decode_and_validate(line, IDENTITY_ENTRY_SCHEMA)
        except (ValueError, ValidationError) as e:
            raise FormatError(f"{path}:{n}: bad identity entry ({e})")
        base = base.with_entry(int(obj["i_hex"], 16), obj["user_id"])
    return base


# Detector

def _same_size(images: Sequence[RgbImage]) -> bool:
    return len({(im.width, im.height) for im in images}) <= 1


def train_detector(key_images: Sequence[RgbImage], other_images: Sequence[RgbImage], cfg: TrainConfig,
                   input_shape: Sequence[int] = config.DETECTOR_SHAPE,
                   layers: Optional[Sequence[LayerSpec]] = None,
                   log_run: Optional[RunLogger] = None) -> ModelSnapshot:
    """Binary classifier: class 1 = the user's key class, class 0 = anything else."""
    if not key_images or not other_images:
        raise InvalidInputError("detector training needs key and other images")
    if not _same_size(list(key_images) + list(other_images)):
        raise InvalidInputError("detector training images must share one size")
    x = images_to_inputs(list(key_images) + list(other_images), input_shape)
    y = np.concatenate([np.ones(len(key_images), dtype=np.int64), np.zeros(len(other_images), dtype=np.int64)])
    layers = tuple(layers) if layers is not None else tinynn.desk_architecture(2)
    model = tinynn.init_model(layers, input_shape, 2, seed=cfg.seed)
    return tinynn.train(model, LabeledDataset(x, y, 2), cfg, log_run=log_run)


def key_probability(detector: ModelSnapshot, image: RgbImage) -> float:
    x = images_to_inputs([image], detector.input_shape)[0]
    return float(tinynn.forward(detector, x)[1])


def detector_accepts(detector: ModelSnapshot, image: RgbImage) -> bool:
    return key_probability(detector, image) > config.DETECTOR_THRESHOLD


@dataclass(frozen=True)
class UserKeyBundle:
    user_id: str
    key_images: Tuple[RgbImage, ...]
    detector: ModelSnapshot
    credential: Credential

    def __post_init__(self):
        if self.detector.num_classes != 2:
            raise InvalidInputError(f"detector of {self.user_id!r} must have 2 classes")
        object.__setattr__(self, "key_images", tuple(self.key_images))


def save_bundle(bundle: UserKeyBundle, out_dir) -> Path:
    out = Path(out_dir)
    (out / "keys").mkdir(parents=True, exist_ok=True)
    tinynn.save(bundle.detector, out / "detector.tnn")
    cred = bundle.credential
    (out / "credential.txt").write_text(
        f"user_id={bundle.user_id}\nusername={cred.username}\n{cred.to_text()}\n", encoding="utf-8")
    for i, img in enumerate(bundle.key_images):
        save_pnm(img, out / "keys" / f"{i:04d}.ppm")
    return out


def load_bundle(path) -> UserKeyBundle:
    root = Path(path)
    lines = (root / "credential.txt").read_text(encoding="utf-8").splitlines()
    try:
        user_id = lines[0].split("=", 1)[1]
        username = lines[1].split("=", 1)[1]
        enc, k1_text = lines[2].split()
    except (IndexError, ValueError):
        raise FormatError(f"malformed credential file in {root}")
    keys = tuple(load_pnm(p) for p in sorted((root / "keys").glob("*.ppm")))
    return UserKeyBundle(user_id, keys, tinynn.load(root / "detector.tnn"),
                         Credential(username, enc, parse_k1(k1_text)))


# Authorization

def derive_seed(service_seed: int, context: str) -> int:
    """Per-request random stream key: first 8 bytes of sha256("<seed>:<context>")."""
    return int.from_bytes(hashlib.sha256(f"{service_seed}:{context}".encode("utf-8")).digest()[:8], "big")


def _query_input(model: ModelSnapshot, query) -> np.ndarray:
    c, h, w = model.input_shape
    if isinstance(query, RgbImage):
        if (query.height, query.width) != (h, w):
            raise InvalidInputError(f"query image is {query.height}x{query.width}, model expects {h}x{w}")
        return images_to_inputs([query], model.input_shape)[0]
    arr = np.asarray(query, dtype=np.float32)
    if arr.shape != tuple(model.input_shape):
        raise InvalidInputError(f"query shape {arr.shape} does not match model input {model.input_shape}")
    return arr


@dataclass(frozen=True)
class ControlCenter:
    """Immutable deployment state: detectors, identity base and the true model."""
    bundles: Tuple[UserKeyBundle, ...]
    identity_base: IdentityBase
    true_model: ModelSnapshot

    def __post_init__(self):
        object.__setattr__(self, "bundles", tuple(self.bundles))

    def is_authorized(self, encrypted_username: str, key_image: RgbImage) -> bool:
        outcome = validate(self.identity_base, encrypted_username, key_image)
        if not outcome:
            return False
        return any(b.user_id == outcome.user_id and detector_accepts(b.detector, key_image)
                   for b in self.bundles)

    def authorize(self, encrypted_username: str, key_image: RgbImage, query,
                  rng_seed: Optional[int] = None) -> int:
        x = _query_input(self.true_model, query)
        fake = int(np.random.default_rng(rng_seed).integers(0, self.true_model.num_classes))
        if self.is_authorized(encrypted_username, key_image):
            return int(tinynn.predict(self.true_model, x))
        return fake


def authorize(bundles: Sequence[UserKeyBundle], identity_base: IdentityBase, encrypted_username: str,
              key_image: RgbImage, query_image, true_model: ModelSnapshot,
              rng_seed: Optional[int] = None) -> int:
    return ControlCenter(tuple(bundles), identity_base, true_model).authorize(
        encrypted_username, key_image, query_image, rng_seed)


# Traceability

Oracle = Callable[[str, RgbImage, np.ndarray, int], int]


@dataclass
class AcptTraceReport:
    per_user_accuracy: Dict[str, float]
    verdict: str
    confusion: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def traced(self) -> bool:
        return self.verdict != config.ACPT_INCONCLUSIVE

    def to_text(self) -> str:
        lines = [f"verdict={self.verdict}"]
        lines += [f"key-{u}={a:.4f}" for u, a in self.per_user_accuracy.items()]
        return "\n".join(lines)

    def to_records(self) -> List[dict]:
        return [{"user_id": u, "accuracy": a, "verdict": self.verdict, "is_leaker": u == self.verdict}
                for u, a in self.per_user_accuracy.items()]


def acpt_verdict(accuracies: Mapping[str, float]) -> str:
    hits = [u for u, a in accuracies.items() if a >= config.ACPT_ACCEPT]
    if len(hits) == 1 and all(a <= config.ACPT_REJECT for u, a in accuracies.items() if u != hits[0]):
        return hits[0]
    return config.ACPT_INCONCLUSIVE


def trace_acpt(suspect: Union[ControlCenter, Oracle], probes: Mapping[str, Tuple[str, RgbImage]],
               test: LabeledDataset, seed: int = 0) -> AcptTraceReport:
    """
    Authorize every test item once per user probe (credential, key image) and
    name the user whose probe unlocks the suspect. `suspect` is an in-process
    ControlCenter or any callable (credential, key_image, query, seed) -> class.
    """
    if len(probes) < 2:
        raise InvalidInputError("ACPT tracing needs at least two user probes")
    if isinstance(suspect, ControlCenter):
        center = suspect
        oracle: Oracle = lambda cred, key, q, s: center.authorize(cred, key, q, s)
    else:
        oracle = suspect
    classes = list(range(test.num_classes))
    accuracies, confusion = {}, {}
    for user, (cred, key) in probes.items():
        preds = np.array([oracle(cred, key, test.inputs[i], derive_seed(seed, f"{user}:{i}"))
                          for i in range(len(test))], dtype=np.int64)
        accuracies[user] = float(np.mean(preds == test.labels)) if len(test) else 0.0
        confusion[user] = confusion_matrix(test.labels, preds, labels=classes)
        log.info("probe %s: accuracy %.3f", user, accuracies[user])
    return AcptTraceReport(accuracies, acpt_verdict(accuracies), confusion)
