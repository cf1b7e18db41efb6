"""
Passive protection: per-user watermarks embedded as an additional output
class, threshold-based leak tracing, fidelity, and the robustness protocols
(fine-tuning attack, global pruning sweep).
"""
from __future__ import annotations
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import config
from .errors import InvalidInputError
from .logger import RunLogger, get_logger
from .media import TriggerSet, images_to_inputs
from .tinynn import (
    LabeledDataset, ModelSnapshot, TrainConfig, evaluate, extend_output_class,
    global_magnitude_prune, predict, train,
)

log = get_logger("pcpt")


@dataclass(frozen=True)
class TraceThresholds:
    theta1: float = config.THETA1
    theta2: float = config.THETA2

    def __post_init__(self):
        if not (0.0 <= self.theta1 <= 1.0 and 0.0 <= self.theta2 <= 1.0):
            raise InvalidInputError("thresholds are accuracies in [0, 1]")
        if not self.theta2 < self.theta1:
            raise InvalidInputError(f"theta2 ({self.theta2}) must be below theta1 ({self.theta1})")


@dataclass
class TraceReport:
    per_user_trigger_accuracy: Dict[str, float]
    verdict: str
    original_task_accuracy: Optional[float] = None
    thresholds: TraceThresholds = field(default_factory=TraceThresholds)

    @property
    def traced(self) -> bool:
        return self.verdict != config.TRACE_FAILURE

    def to_text(self) -> str:
        lines = [f"verdict={self.verdict}",
                 f"theta1={self.thresholds.theta1}",
                 f"theta2={self.thresholds.theta2}"]
        lines += [f"T-{user}={acc:.4f}" for user, acc in self.per_user_trigger_accuracy.items()]
        if self.original_task_accuracy is not None:
            lines.append(f"T-Original={self.original_task_accuracy:.4f}")
        return "\n".join(lines)

    def to_records(self) -> List[dict]:
        return [
            {"user_id": user, "trigger_accuracy": acc, "verdict": self.verdict,
             "is_source": user == self.verdict}
            for user, acc in self.per_user_trigger_accuracy.items()
        ]


@dataclass
class EmbedResult:
    model: ModelSnapshot
    trigger_accuracy: float
    finetune_size: int


@dataclass
class FidelityReport:
    base_accuracy: float
    watermarked_accuracy: float
    additional_class_rate: float

    @property
    def delta(self) -> float:
        return self.base_accuracy - self.watermarked_accuracy


@dataclass
class AttackResult:
    model: ModelSnapshot
    report: TraceReport


@dataclass
class PruneRow:
    rate: float
    original_accuracy: float
    trigger_accuracy: Dict[str, float]
    verdict: str

    def to_record(self) -> dict:
        return {"rate": self.rate, "T-Original": self.original_accuracy,
                **{f"T-{u}": a for u, a in self.trigger_accuracy.items()}, "verdict": self.verdict}


# Embedding

def build_finetune_set(data: LabeledDataset, triggers: TriggerSet,
                       fraction: float = config.FINETUNE_FRACTION, seed: int = 0) -> LabeledDataset:
    if not 0.0 < fraction <= 1.0:
        raise InvalidInputError(f"fraction must lie in (0, 1], got {fraction}")
    if triggers.label != data.num_classes:
        raise InvalidInputError(
            f"trigger label {triggers.label} is not the additional class {data.num_classes}")
    n = len(data)
    k = min(n, math.ceil(round(fraction * n, 9)))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    trig = images_to_inputs(triggers.images, data.input_shape)
    inputs = np.concatenate([data.inputs[idx], trig])
    labels = np.concatenate([data.labels[idx], np.full(len(trig), triggers.label, dtype=np.int64)])
    return LabeledDataset(inputs, labels, data.num_classes + 1)


def trigger_accuracy(model: ModelSnapshot, triggers: TriggerSet) -> float:
    """Share of trigger images labelled with the additional class; 0 if the class does not exist."""
    if model.num_classes == triggers.label:
        return 0.0
    if model.num_classes != triggers.label + 1:
        raise InvalidInputError(
            f"model has {model.num_classes} classes; triggers of {triggers.user_id!r} "
            f"expect {triggers.label + 1}")
    pred = predict(model, images_to_inputs(triggers.images, model.input_shape))
    return float(np.mean(pred == triggers.label))


def embed_watermark(base: ModelSnapshot, data: LabeledDataset, triggers: TriggerSet, cfg: TrainConfig,
                    fraction: float = config.FINETUNE_FRACTION, history: Optional[List[float]] = None,
                    log_run: Optional[RunLogger] = None, progress: bool = False) -> EmbedResult:
    if base.num_classes != data.num_classes:
        raise InvalidInputError(f"model has {base.num_classes} classes, data {data.num_classes}")
    extended = extend_output_class(base)
    ft = build_finetune_set(data, triggers, fraction, cfg.seed)
    model = train(extended, ft, cfg, history=history, log_run=log_run, progress=progress)
    acc = trigger_accuracy(model, triggers)
    log.info("embedded watermark for %s: trigger accuracy %.3f", triggers.user_id, acc)
    if log_run is not None:
        log_run.event(op="embed", user_id=triggers.user_id, trigger_accuracy=acc, finetune_size=len(ft))
    return EmbedResult(model=model, trigger_accuracy=acc, finetune_size=len(ft))


# Traceability

def decide_verdict(accuracies: Mapping[str, float], thresholds: TraceThresholds) -> str:
    winners = [u for u, a in accuracies.items() if a > thresholds.theta1]
    if len(winners) != 1:
        return config.TRACE_FAILURE
    source = winners[0]
    if all(a < thresholds.theta2 for u, a in accuracies.items() if u != source):
        return source
    return config.TRACE_FAILURE


def trace(suspect: ModelSnapshot, trigger_sets: Sequence[TriggerSet],
          thresholds: TraceThresholds = TraceThresholds(),
          test: Optional[LabeledDataset] = None) -> TraceReport:
    if not trigger_sets:
        raise InvalidInputError("tracing needs at least one trigger set")
    users = [ts.user_id for ts in trigger_sets]
    if len(set(users)) != len(users):
        raise InvalidInputError(f"duplicate user ids among trigger sets: {users}")
    accuracies = {ts.user_id: trigger_accuracy(suspect, ts) for ts in trigger_sets}
    original = evaluate(suspect, test) if test is not None else None
    return TraceReport(accuracies, decide_verdict(accuracies, thresholds), original, thresholds)


def fidelity_report(base: ModelSnapshot, watermarked: ModelSnapshot, test: LabeledDataset) -> FidelityReport:
    if base.input_shape != watermarked.input_shape:
        raise InvalidInputError("base and watermarked models take different inputs")
    n = base.num_classes
    base_acc = evaluate(base, test, classes=n)
    wm_acc = evaluate(watermarked, test, classes=n)
    extra = 0.0
    if watermarked.num_classes > n and len(test):
        extra = float(np.mean(predict(watermarked, test.inputs) >= n))
    return FidelityReport(base_acc, wm_acc, extra)


# Robustness

def split_half(data: LabeledDataset, seed: int):
    perm = np.random.default_rng(seed).permutation(len(data))
    half = len(data) // 2
    return perm[:half], perm[half:]


def finetune_attack(model: ModelSnapshot, test: LabeledDataset, epochs: int, cfg: TrainConfig,
                    trigger_sets: Sequence[TriggerSet],
                    thresholds: TraceThresholds = TraceThresholds(),
                    log_run: Optional[RunLogger] = None) -> AttackResult:
    """Fine-tune on the first half of `test` with original labels; evaluate on the second half."""
    if epochs < 1:
        raise InvalidInputError(f"attack epochs must be >= 1, got {epochs}")
    attack_idx, held_idx = split_half(test, cfg.seed)
    # the attacker only knows the original label space, the model keeps its extra output
    attack_set = LabeledDataset(test.inputs[attack_idx], test.labels[attack_idx], model.num_classes)
    attacked = train(model, attack_set, replace(cfg, epochs=epochs), log_run=log_run)
    report = trace(attacked, trigger_sets, thresholds, test=test.subset(held_idx))
    if log_run is not None:
        log_run.event(op="finetune_attack", epochs=epochs, verdict=report.verdict,
                      accuracies=report.per_user_trigger_accuracy)
    return AttackResult(attacked, report)


def prune_sweep(model: ModelSnapshot, rates: Sequence[float], trigger_sets: Sequence[TriggerSet],
                test: LabeledDataset, thresholds: TraceThresholds = TraceThresholds()) -> List[PruneRow]:
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise InvalidInputError(f"prune rates must lie in [0, 1]: {list(rates)}")
    rows = []
    for rate in sorted(rates):
        pruned = global_magnitude_prune(model, rate)
        rep = trace(pruned, trigger_sets, thresholds, test=test)
        rows.append(PruneRow(rate, rep.original_task_accuracy, rep.per_user_trigger_accuracy, rep.verdict))
        log.info("prune rate %.2f: T-Original %.3f %s", rate, rep.original_task_accuracy,
                 rep.per_user_trigger_accuracy)
    return rows


def plot_prune_sweep(rows: Sequence[PruneRow], path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rates = [r.rate for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rates, [r.original_accuracy for r in rows], marker="o", label="T-Original")
    for user in (rows[0].trigger_accuracy if rows else {}):
        ax.plot(rates, [r.trigger_accuracy[user] for r in rows], marker="s", label=f"T-{user}")
    ax.set_xlabel("pruning rate")
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
