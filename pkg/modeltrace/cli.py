"""
Operator commands. Each subcommand maps onto one chain of module operations;
reports go to the console (rich) and to a RunLogger NDJSON record.

Exit codes: 0 success, 1 domain failure (untraceable, broken chain, ...),
2 usage error.
"""
from __future__ import annotations
import argparse, json, time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from . import acpt, config, gateway, ledger, media, pcpt, synth, tinynn
from .errors import CorruptionError, InvalidInputError, ModelTraceError
from .logger import RunLogger, get_logger, setup_logging
from .phash import PerceptualHash, image_phash
from .schema import MANIFEST_SCHEMA, ValidationError, validator

log = get_logger("cli")


# Workspace

@dataclass
class WorkspaceManifest:
    root: Path
    seed: int = 0
    theta1: float = config.THETA1
    theta2: float = config.THETA2
    fraction: float = config.FINETUNE_FRACTION
    epochs: int = config.EMBED_EPOCHS
    num_classes: int = config.NUM_CLASSES
    paths: Dict = field(default_factory=dict)

    @classmethod
    def load(cls, root) -> "WorkspaceManifest":
        root = Path(root)
        path = root / config.MANIFEST_NAME
        if not path.exists():
            return cls(root)
        obj = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        try:
            validator(MANIFEST_SCHEMA).validate(obj)
        except ValidationError as e:
            raise InvalidInputError(f"{path}: {e.message}")
        return cls(root, **obj)

    def path(self, key: str, user: Optional[str] = None, must_exist: bool = True) -> Path:
        value = self.paths.get(key)
        if isinstance(value, dict):
            value = value.get(user) if user else None
        if value is None:
            what = f"{key}[{user}]" if user else key
            raise InvalidInputError(f"no {what} path given and none in {config.MANIFEST_NAME}")
        p = Path(value)
        p = p if p.is_absolute() else self.root / p
        if must_exist and not p.exists():
            raise InvalidInputError(f"{p} does not exist")
        return p

    def users(self, key: str) -> List[str]:
        value = self.paths.get(key)
        return list(value) if isinstance(value, dict) else []


@dataclass
class Context:
    args: argparse.Namespace
    ws: WorkspaceManifest
    run: RunLogger
    console: Console

    @property
    def seed(self) -> int:
        s = getattr(self.args, "seed", None)
        return self.ws.seed if s is None else s

    @property
    def progress(self) -> bool:
        return getattr(self.args, "verbose", 0) > 0

    def pick(self, value, key: str, user: Optional[str] = None, must_exist: bool = True) -> Path:
        if value is not None:
            p = Path(value)
            if must_exist and not p.exists():
                raise InvalidInputError(f"{p} does not exist")
            return p
        return self.ws.path(key, user, must_exist)


def _dataset(ctx: Context, split: str) -> tinynn.LabeledDataset:
    images = ctx.pick(getattr(ctx.args, f"{split}_images", None), f"{split}_images")
    labels = ctx.pick(getattr(ctx.args, f"{split}_labels", None), f"{split}_labels")
    return tinynn.load_idx(images, labels, ctx.ws.num_classes)


def _maybe_test(ctx: Context) -> Optional[tinynn.LabeledDataset]:
    if getattr(ctx.args, "test_images", None) is None and "test_images" not in ctx.ws.paths:
        return None
    return _dataset(ctx, "test")


def _trigger_sets(ctx: Context) -> List[media.TriggerSet]:
    dirs = ctx.args.triggers or [ctx.ws.path("triggers", u) for u in ctx.ws.users("triggers")]
    if not dirs:
        raise InvalidInputError("no trigger sets given (--triggers) and none in the manifest")
    return [media.load_trigger_set(d) for d in dirs]


def _thresholds(ctx: Context) -> pcpt.TraceThresholds:
    t1 = ctx.args.theta1 if ctx.args.theta1 is not None else ctx.ws.theta1
    t2 = ctx.args.theta2 if ctx.args.theta2 is not None else ctx.ws.theta2
    return pcpt.TraceThresholds(t1, t2)


def _images(path) -> List:
    p = Path(path)
    return list(media.load_frame_dir(p).frames) if p.is_dir() else [media.load_pnm(p)]


def _report(ctx: Context, report, op: str) -> int:
    style = "green" if report.traced else "red"
    for line in report.to_text().splitlines():
        ctx.console.print(f"[{style}]{line}[/{style}]" if line.startswith("verdict=") else line)
    ctx.run.event(op=op, verdict=report.verdict, records=report.to_records())
    return 0 if report.traced else 1


# PCPT stages

def cmd_phash(ctx: Context) -> int:
    for path in ctx.args.images:
        h = image_phash(media.load_pnm(path))
        ctx.console.print(f"{h.hex()}  {path}")
        ctx.run.event(op="phash", path=str(path), hash=h.hex())
    return 0


def cmd_frames_select(ctx: Context) -> int:
    a = ctx.args
    src = Path(a.source)
    seq = media.load_frame_dir(src) if src.is_dir() else media.load_y4m(src)
    label = a.label if a.label is not None else ctx.ws.num_classes
    ts = media.select_triggers(seq, a.count, a.d_min, a.user, label)
    out = ctx.pick(a.out, "triggers", a.user, must_exist=False)
    media.export_trigger_set(ts, out)
    ctx.console.print(f"selected {len(ts)} triggers for {ts.user_id} "
                      f"(min distance {ts.min_distance}, label {ts.label}) -> {out}")
    ctx.run.event(op="frames_select", user_id=ts.user_id, count=len(ts), min_distance=ts.min_distance,
                  hashes=[h.hex() for h in ts.hashes], out=str(out))
    return 0


def cmd_train_base(ctx: Context) -> int:
    a = ctx.args
    data = _dataset(ctx, "train")
    model = tinynn.init_model(tinynn.desk_architecture(data.num_classes), data.input_shape,
                              data.num_classes, seed=ctx.seed)
    cfg = tinynn.TrainConfig(epochs=a.epochs or ctx.ws.epochs, seed=ctx.seed)
    model = tinynn.train(model, data, cfg, log_run=ctx.run, progress=ctx.progress)
    out = ctx.pick(a.out, "base_model", must_exist=False)
    tinynn.save(model, out)
    test = _maybe_test(ctx)
    acc = tinynn.evaluate(model, test) if test is not None else None
    ctx.console.print(f"base model -> {out}" + (f"  (test accuracy {acc:.4f})" if acc is not None else ""))
    ctx.run.event(op="train_base", out=str(out), test_accuracy=acc, parameters=model.parameter_count)
    return 0


def cmd_embed(ctx: Context) -> int:
    a = ctx.args
    base = tinynn.load(ctx.pick(a.model, "base_model"))
    triggers = media.load_trigger_set(ctx.pick(a.triggers, "triggers", a.user))
    data = _dataset(ctx, "train")
    cfg = tinynn.TrainConfig(epochs=a.epochs or ctx.ws.epochs, seed=ctx.seed)
    fraction = a.fraction if a.fraction is not None else ctx.ws.fraction
    res = pcpt.embed_watermark(base, data, triggers, cfg, fraction, log_run=ctx.run, progress=ctx.progress)
    out = ctx.pick(a.out, "models", triggers.user_id, must_exist=False)
    tinynn.save(res.model, out)
    ctx.console.print(f"watermarked model for {triggers.user_id} -> {out}  "
                      f"(T-{triggers.user_id}={res.trigger_accuracy:.4f}, fine-tune set {res.finetune_size})")
    return 0


def cmd_trace(ctx: Context) -> int:
    model = tinynn.load(ctx.pick(ctx.args.model, "models", ctx.args.user))
    report = pcpt.trace(model, _trigger_sets(ctx), _thresholds(ctx), test=_maybe_test(ctx))
    return _report(ctx, report, "trace")


def cmd_fidelity(ctx: Context) -> int:
    a = ctx.args
    base = tinynn.load(ctx.pick(a.base, "base_model"))
    model = tinynn.load(ctx.pick(a.model, "models", a.user))
    rep = pcpt.fidelity_report(base, model, _dataset(ctx, "test"))
    ctx.console.print(f"base accuracy        {rep.base_accuracy:.4f}")
    ctx.console.print(f"watermarked accuracy {rep.watermarked_accuracy:.4f}")
    ctx.console.print(f"delta                {rep.delta:+.4f}")
    ctx.console.print(f"additional class     {rep.additional_class_rate:.4f}")
    ctx.run.event(op="fidelity", **asdict(rep), delta=rep.delta)
    return 0


def cmd_attack_finetune(ctx: Context) -> int:
    a = ctx.args
    model = tinynn.load(ctx.pick(a.model, "models", a.user))
    cfg = tinynn.TrainConfig(epochs=a.epochs, seed=ctx.seed)
    res = pcpt.finetune_attack(model, _dataset(ctx, "test"), a.epochs, cfg, _trigger_sets(ctx),
                               _thresholds(ctx), log_run=ctx.run)
    if a.out:
        tinynn.save(res.model, a.out)
    return _report(ctx, res.report, "attack_finetune")


def cmd_attack_prune(ctx: Context) -> int:
    a = ctx.args
    model = tinynn.load(ctx.pick(a.model, "models", a.user))
    rates = a.rate or list(config.PRUNE_RATES)
    rows = pcpt.prune_sweep(model, rates, _trigger_sets(ctx), _dataset(ctx, "test"), _thresholds(ctx))
    table = Table(title="global magnitude pruning")
    table.add_column("rate", justify="right")
    table.add_column("T-Original", justify="right")
    users = list(rows[0].trigger_accuracy) if rows else []
    for u in users:
        table.add_column(f"T-{u}", justify="right")
    table.add_column("verdict")
    for row in rows:
        table.add_row(f"{row.rate:.2f}", f"{row.original_accuracy:.4f}",
                      *[f"{row.trigger_accuracy[u]:.4f}" for u in users], row.verdict)
        ctx.run.event(op="attack_prune", **row.to_record())
    ctx.console.print(table)
    if a.plot:
        pcpt.plot_prune_sweep(rows, a.plot)
    if len(rows) == 1:
        return 0 if rows[0].verdict != config.TRACE_FAILURE else 1
    return 0


# Ledger

def _ledger(ctx: Context) -> ledger.Ledger:
    return ledger.Ledger(ctx.pick(ctx.args.ledger, "ledger", must_exist=False))


def _print_record(ctx: Context, rec: ledger.LedgerRecord):
    ctx.console.print(json.dumps(asdict(rec)), markup=False)


def cmd_ledger_append(ctx: Context) -> int:
    a = ctx.args
    if a.p:
        p = PerceptualHash.from_hex(a.p)
    elif a.trigger and a.owner_fp:
        p = ledger.fingerprint_bind(media.load_pnm(a.trigger), media.load_pnm(a.owner_fp))
    else:
        raise InvalidInputError("give --p HEX or both --trigger and --owner-fp")
    rec = _ledger(ctx).append(a.owner, p, a.note)
    _print_record(ctx, rec)
    ctx.run.event(op="ledger_append", **asdict(rec))
    return 0


def cmd_ledger_verify(ctx: Context) -> int:
    store = _ledger(ctx)
    status = store.verify_chain()
    if status.ok:
        ctx.console.print(f"ok ({status.length} records)")
    else:
        ctx.console.print(f"[red]chain broken[/red] first-bad-seq={status.first_bad_seq}")
    ctx.run.event(op="ledger_verify", path=str(store.path), ok=status.ok,
                  first_bad_seq=status.first_bad_seq, length=status.length)
    return 0 if status.ok else 1


def cmd_ledger_claim(ctx: Context) -> int:
    a = ctx.args
    triggers = media.load_trigger_set(ctx.pick(a.triggers, "triggers", a.user))
    recs = ledger.claim_trigger_set(_ledger(ctx), a.owner, triggers, media.load_pnm(a.owner_fp), a.note)
    ctx.console.print(f"claimed {len(recs)} triggers of {triggers.user_id} (seq {recs[0].seq}..{recs[-1].seq})")
    ctx.run.event(op="ledger_claim", owner_id=a.owner, user_id=triggers.user_id,
                  seqs=[r.seq for r in recs])
    return 0


def cmd_ledger_owner(ctx: Context) -> int:
    a = ctx.args
    rec = ledger.verify_ownership(_ledger(ctx), media.load_pnm(a.trigger), media.load_pnm(a.owner_fp))
    ctx.run.event(op="ledger_owner", found=rec is not None, record=asdict(rec) if rec else None)
    if rec is None:
        ctx.console.print("[red]no matching claim[/red]")
        return 1
    _print_record(ctx, rec)
    return 0


# ACPT

def _k1(ctx: Context):
    return acpt.parse_k1(ctx.args.k1) if ctx.args.k1 else acpt.random_k1(ctx.seed)


def cmd_acpt_credential(ctx: Context) -> int:
    cred = acpt.make_credential(ctx.args.username, ctx.args.owner_fp, _k1(ctx))
    ctx.console.print(cred.to_text())
    ctx.run.event(op="acpt_credential", username=cred.username, k1=list(cred.k1))
    return 0


def cmd_acpt_detector_train(ctx: Context) -> int:
    a = ctx.args
    keys = _images(a.keys)
    others = [img for d in a.others for img in _images(d)]
    cfg = tinynn.TrainConfig(epochs=a.epochs, seed=ctx.seed)
    det = acpt.train_detector(keys, others, cfg, log_run=ctx.run)
    tinynn.save(det, a.out)
    hits = sum(acpt.detector_accepts(det, k) for k in keys)
    misses = sum(acpt.detector_accepts(det, o) for o in others)
    ctx.console.print(f"detector -> {a.out}  (accepts {hits}/{len(keys)} keys, {misses}/{len(others)} others)")
    ctx.run.event(op="acpt_detector_train", out=str(a.out), key_hits=hits, other_hits=misses)
    return 0


def cmd_acpt_enroll(ctx: Context) -> int:
    a = ctx.args
    cred = acpt.make_credential(a.username, a.owner_fp, _k1(ctx))
    key = media.load_pnm(a.key)
    ident_path = ctx.pick(a.identity, "identity_base", must_exist=False)
    base = acpt.load_identity_base(ident_path) if ident_path.exists() else acpt.IdentityBase()
    base = acpt.enroll(base, cred, key, a.user)
    keys = tuple(_images(a.keys)) if a.keys else (key,)
    bundle = acpt.UserKeyBundle(a.user, keys, tinynn.load(a.detector), cred)
    out = ctx.pick(a.bundle_out, "bundles", a.user, must_exist=False)
    acpt.save_bundle(bundle, out)
    acpt.save_identity_base(base, ident_path)
    ctx.console.print(f"enrolled {a.user}: credential {cred.to_text()} ({len(base)} identities)")
    ctx.run.event(op="acpt_enroll", user_id=a.user, bundle=str(out), identities=len(base))
    return 0


def _control_center(ctx: Context) -> acpt.ControlCenter:
    a = ctx.args
    dirs = a.bundle or [ctx.ws.path("bundles", u) for u in ctx.ws.users("bundles")]
    if not dirs:
        raise InvalidInputError("no key bundles given (--bundle) and none in the manifest")
    bundles = [acpt.load_bundle(d) for d in dirs]
    base = acpt.load_identity_base(ctx.pick(a.identity, "identity_base"))
    return acpt.ControlCenter(tuple(bundles), base, tinynn.load(ctx.pick(a.model, "base_model")))


def _parse_probe(text: str):
    user, sep, rest = text.partition("=")
    cred, sep2, path = rest.partition(":")
    if not (sep and sep2 and user and path):
        raise InvalidInputError(f"probe must look like USER=CREDENTIAL:KEY_IMAGE, got {text!r}")
    return user, (cred, media.load_pnm(path))


def cmd_acpt_trace(ctx: Context) -> int:
    a = ctx.args
    if a.probe:
        probes = dict(_parse_probe(p) for p in a.probe)
    else:
        probes = {}
        for u in ctx.ws.users("bundles"):
            b = acpt.load_bundle(ctx.ws.path("bundles", u))
            probes[u] = (b.credential.encrypted_username, b.key_images[0])
    suspect = gateway.remote_oracle(a.remote, a.timeout) if a.remote else _control_center(ctx)
    report = acpt.trace_acpt(suspect, probes, _dataset(ctx, "test"), seed=ctx.seed)
    return _report(ctx, report, "acpt_trace")


def cmd_serve(ctx: Context) -> int:
    a = ctx.args
    center = _control_center(ctx)
    service_seed = None if a.entropy else ctx.seed
    handle = gateway.serve(a.bind, center, service_seed)
    ctx.console.print(f"serving on {handle.address} ({len(center.bundles)} users)")
    ctx.run.event(op="serve", address=handle.address, users=len(center.bundles))
    deadline = time.monotonic() + a.duration if a.duration else None
    try:
        while handle.thread.is_alive():
            if deadline is not None and time.monotonic() >= deadline:
                break
            handle.thread.join(timeout=0.5)
    except KeyboardInterrupt:
        pass
    finally:
        handle.close()
    return 0


# Metrics / fixtures

def cmd_metrics_ssim(ctx: Context) -> int:
    a = ctx.args
    value = media.mean_ssim(_images(a.candidate), _images(a.reference))
    ctx.console.print(f"ssim {value:.6f}")
    ctx.run.event(op="metrics_ssim", candidate=str(a.candidate), reference=str(a.reference), ssim=value)
    return 0


def cmd_metrics_mse(ctx: Context) -> int:
    a = ctx.args
    value = media.mse(media.load_pnm(a.candidate), media.load_pnm(a.reference))
    ctx.console.print(f"mse {value:.6f}")
    ctx.run.event(op="metrics_mse", candidate=str(a.candidate), reference=str(a.reference), mse=value)
    return 0


def cmd_synth(ctx: Context) -> int:
    a = ctx.args
    out = Path(a.out) if a.out else ctx.ws.root
    manifest = synth.write_workspace(out, a.n_train, a.n_test, a.frames, a.keys, seed=ctx.seed)
    ctx.console.print(f"desk workspace -> {manifest}")
    ctx.run.event(op="synth", manifest=str(manifest))
    return 0


# Parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    common.add_argument("--workspace", type=Path, default=argparse.SUPPRESS,
                        help=f"workspace root (env {config.WORKSPACE_ENV})")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)

    data = argparse.ArgumentParser(add_help=False)
    for split in ("train", "test"):
        data.add_argument(f"--{split}-images", type=Path)
        data.add_argument(f"--{split}-labels", type=Path)

    trace_opts = argparse.ArgumentParser(add_help=False)
    trace_opts.add_argument("--model", type=Path)
    trace_opts.add_argument("--user", help="pick the model path from the manifest")
    trace_opts.add_argument("--triggers", type=Path, nargs="+")
    trace_opts.add_argument("--theta1", type=float)
    trace_opts.add_argument("--theta2", type=float)

    p = argparse.ArgumentParser(prog="modeltrace", parents=[common],
                                description="Copyright protection and leak tracing for small DNNs.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(parent, name, func, *, full=None, parents=(), **kw):
        sp = parent.add_parser(name, parents=[common, *parents], **kw)
        sp.set_defaults(func=func, op_name=full or name)
        return sp

    sp = add(sub, "phash", cmd_phash, help="DCT perceptual hash of PGM/PPM images")
    sp.add_argument("images", nargs="+", type=Path)

    frames = sub.add_parser("frames", help="trigger selection from a key video").add_subparsers(
        dest="frames_cmd", required=True)
    sp = add(frames, "select", cmd_frames_select, full="frames select")
    sp.add_argument("source", type=Path, help=".y4m file or directory of PGM/PPM frames")
    sp.add_argument("--count", "-L", type=int, required=True)
    sp.add_argument("--d-min", type=int, default=config.DEFAULT_D_MIN)
    sp.add_argument("--user", required=True)
    sp.add_argument("--label", type=int)
    sp.add_argument("--out", type=Path)

    sp = add(sub, "train-base", cmd_train_base, parents=[data])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", type=Path)

    sp = add(sub, "embed", cmd_embed, parents=[data])
    sp.add_argument("--model", type=Path, help="base model (default: manifest base_model)")
    sp.add_argument("--user")
    sp.add_argument("--triggers", type=Path)
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", type=Path)

    add(sub, "trace", cmd_trace, parents=[data, trace_opts])

    sp = add(sub, "fidelity", cmd_fidelity, parents=[data])
    sp.add_argument("--base", type=Path)
    sp.add_argument("--model", type=Path)
    sp.add_argument("--user")

    attack = sub.add_parser("attack", help="robustness protocols").add_subparsers(
        dest="attack_cmd", required=True)
    sp = add(attack, "finetune", cmd_attack_finetune, full="attack finetune", parents=[data, trace_opts])
    sp.add_argument("--epochs", type=int, default=config.ATTACK_EPOCHS)
    sp.add_argument("--out", type=Path)
    sp = add(attack, "prune", cmd_attack_prune, full="attack prune", parents=[data, trace_opts])
    sp.add_argument("--rate", type=float, action="append")
    sp.add_argument("--plot", type=Path)

    led = sub.add_parser("ledger", help="hash-chained ownership ledger").add_subparsers(
        dest="ledger_cmd", required=True)
    lopts = argparse.ArgumentParser(add_help=False)
    lopts.add_argument("--ledger", type=Path)
    sp = add(led, "append", cmd_ledger_append, full="ledger append", parents=[lopts])
    sp.add_argument("--owner", required=True)
    sp.add_argument("--p", help="16 hex chars")
    sp.add_argument("--trigger", type=Path)
    sp.add_argument("--owner-fp", type=Path)
    sp.add_argument("--note", default="")
    add(led, "verify", cmd_ledger_verify, full="ledger verify", parents=[lopts])
    sp = add(led, "claim", cmd_ledger_claim, full="ledger claim", parents=[lopts])
    sp.add_argument("--owner", required=True)
    sp.add_argument("--owner-fp", type=Path, required=True)
    sp.add_argument("--triggers", type=Path)
    sp.add_argument("--user")
    sp.add_argument("--note", default="")
    sp = add(led, "owner", cmd_ledger_owner, full="ledger owner", parents=[lopts])
    sp.add_argument("--trigger", type=Path, required=True)
    sp.add_argument("--owner-fp", type=Path, required=True)

    ac = sub.add_parser("acpt", help="authorization control").add_subparsers(dest="acpt_cmd", required=True)
    sp = add(ac, "credential", cmd_acpt_credential, full="acpt credential")
    sp.add_argument("--username", required=True)
    sp.add_argument("--owner-fp", required=True, help="owner fingerprint string, e.g. HN")
    sp.add_argument("--k1", help="8 comma-separated indices in [0, 63] (default: random from --seed)")
    sp = add(ac, "detector-train", cmd_acpt_detector_train, full="acpt detector-train")
    sp.add_argument("--keys", type=Path, required=True)
    sp.add_argument("--others", type=Path, nargs="+", required=True)
    sp.add_argument("--epochs", type=int, default=config.DETECTOR_EPOCHS)
    sp.add_argument("--out", type=Path, required=True)
    sp = add(ac, "enroll", cmd_acpt_enroll, full="acpt enroll")
    sp.add_argument("--user", required=True)
    sp.add_argument("--username", required=True)
    sp.add_argument("--owner-fp", required=True)
    sp.add_argument("--k1")
    sp.add_argument("--key", type=Path, required=True, help="key image used for the identity value")
    sp.add_argument("--keys", type=Path, help="key images kept in the bundle")
    sp.add_argument("--detector", type=Path, required=True)
    sp.add_argument("--identity", type=Path)
    sp.add_argument("--bundle-out", type=Path)

    deploy = argparse.ArgumentParser(add_help=False)
    deploy.add_argument("--model", type=Path, help="true model (default: manifest base_model)")
    deploy.add_argument("--bundle", type=Path, action="append")
    deploy.add_argument("--identity", type=Path)

    sp = add(ac, "trace", cmd_acpt_trace, full="acpt trace", parents=[data, deploy])
    sp.add_argument("--probe", action="append", help="USER=CREDENTIAL:KEY_IMAGE")
    sp.add_argument("--remote", help="probe a running gateway at host:port")
    sp.add_argument("--timeout", type=float, default=config.CLIENT_TIMEOUT_S)

    sp = add(sub, "serve", cmd_serve, parents=[deploy])
    sp.add_argument("--bind", default=config.DEFAULT_BIND)
    sp.add_argument("--entropy", action="store_true", help="unseeded fallback classes")
    sp.add_argument("--duration", type=float, help="stop after this many seconds")

    met = sub.add_parser("metrics", help="image quality metrics").add_subparsers(
        dest="metrics_cmd", required=True)
    for name, func in (("ssim", cmd_metrics_ssim), ("mse", cmd_metrics_mse)):
        sp = add(met, name, func, full=f"metrics {name}")
        sp.add_argument("candidate", type=Path)
        sp.add_argument("reference", type=Path)

    sp = add(sub, "synth", cmd_synth, help="write a desk-scale fixture workspace")
    sp.add_argument("--out", type=Path)
    sp.add_argument("--n-train", type=int, default=2000)
    sp.add_argument("--n-test", type=int, default=500)
    sp.add_argument("--frames", type=int, default=200)
    sp.add_argument("--keys", type=int, default=100)
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    setup_logging(getattr(args, "verbose", 0))
    console = Console(highlight=False, soft_wrap=True)
    root = Path(getattr(args, "workspace", config.WORKSPACE_ROOT))
    try:
        ws = WorkspaceManifest.load(root)
        with RunLogger(name=args.op_name.replace(" ", "_"), log_dir=str(root / "logs")) as run_log:
            code = args.func(Context(args, ws, run_log, console))
            run_log.event(op="exit", command=args.op_name, code=code)
            return code
    except CorruptionError as e:
        console.print(f"[red]error:[/red] {escape(str(e))} (first-bad-seq={e.first_bad_seq})")
        return 1
    except (ModelTraceError, OSError) as e:
        console.print(f"[red]error:[/red] {escape(str(e))}")
        return 1


def main():
    raise SystemExit(run())
