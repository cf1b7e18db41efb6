import numpy as np
import pytest

from modeltrace import config, pcpt, tinynn
from modeltrace.errors import InvalidInputError
from modeltrace.media import TriggerSet
from modeltrace.pcpt import TraceThresholds
from modeltrace.tinynn import TrainConfig

from conftest import NUM_CLASSES, TRIGGERS_PER_USER

FAIL = config.TRACE_FAILURE


# Fine-tune set

def test_finetune_set_size_and_labels(train_data, alice_triggers):
    ft = pcpt.build_finetune_set(train_data, alice_triggers, fraction=0.1, seed=3)
    assert len(ft) == 100 + TRIGGERS_PER_USER
    assert ft.num_classes == NUM_CLASSES + 1
    assert np.all(ft.labels[-TRIGGERS_PER_USER:] == NUM_CLASSES)
    assert np.all(ft.labels[:-TRIGGERS_PER_USER] < NUM_CLASSES)
    again = pcpt.build_finetune_set(train_data, alice_triggers, fraction=0.1, seed=3)
    np.testing.assert_array_equal(again.inputs, ft.inputs)


def test_finetune_set_rounds_up(train_data, alice_triggers):
    ft = pcpt.build_finetune_set(train_data.subset(range(25)), alice_triggers, fraction=0.1)
    assert len(ft) == 3 + TRIGGERS_PER_USER


def test_finetune_set_rejections(train_data, alice_triggers):
    with pytest.raises(InvalidInputError):
        pcpt.build_finetune_set(train_data, alice_triggers, fraction=0.0)
    wrong = TriggerSet("Alice", alice_triggers.images, label=3)
    with pytest.raises(InvalidInputError):
        pcpt.build_finetune_set(train_data, wrong)


# Effectiveness, false positives, fidelity

def test_each_watermark_traces_to_its_owner(alice_model, bob_model, alice_triggers, bob_triggers):
    sets = [alice_triggers, bob_triggers]
    alice_report = pcpt.trace(alice_model, sets)
    assert alice_report.verdict == "Alice"
    assert alice_report.per_user_trigger_accuracy["Alice"] > config.THETA1
    assert alice_report.per_user_trigger_accuracy["Bob"] < config.THETA2
    assert pcpt.trace(bob_model, sets).verdict == "Bob"


def test_embed_reports_trigger_accuracy(base_model, train_data, alice_triggers):
    history = []
    result = pcpt.embed_watermark(base_model, train_data, alice_triggers, TrainConfig(epochs=2, seed=1),
                                  history=history)
    assert result.model.num_classes == NUM_CLASSES + 1
    assert result.finetune_size == 100 + TRIGGERS_PER_USER
    assert result.trigger_accuracy == pcpt.trigger_accuracy(result.model, alice_triggers)
    assert len(history) == 2


def test_clean_model_is_never_traced(base_model, test_data, alice_triggers, bob_triggers):
    report = pcpt.trace(base_model, [alice_triggers, bob_triggers], test=test_data)
    assert report.verdict == FAIL
    assert not report.traced
    assert report.per_user_trigger_accuracy == {"Alice": 0.0, "Bob": 0.0}
    assert report.original_task_accuracy == tinynn.evaluate(base_model, test_data)


def test_fidelity(base_model, alice_model, test_data):
    rep = pcpt.fidelity_report(base_model, alice_model, test_data)
    assert abs(rep.delta) <= 0.02
    assert rep.additional_class_rate < 0.05
    assert pcpt.fidelity_report(base_model, base_model, test_data).delta == 0.0


# Verdict rule

@pytest.mark.parametrize("accuracies,expected", [
    ({"Alice": 0.90, "Bob": 0.10}, "Alice"),
    ({"Alice": 0.20, "Bob": 0.95}, "Bob"),
    ({"Alice": 0.90, "Bob": 0.90}, FAIL),
    ({"Alice": 0.90, "Bob": 0.60}, FAIL),
    ({"Alice": 0.85, "Bob": 0.00}, FAIL),
    ({"Alice": 0.30, "Bob": 0.20}, FAIL),
    ({"Alice": 1.00}, "Alice"),
])
def test_decide_verdict(accuracies, expected):
    assert pcpt.decide_verdict(accuracies, TraceThresholds()) == expected


def test_thresholds_must_be_ordered():
    with pytest.raises(InvalidInputError):
        TraceThresholds(theta1=0.5, theta2=0.6)
    with pytest.raises(InvalidInputError):
        TraceThresholds(theta1=1.5, theta2=0.6)


def test_trace_input_checks(alice_model, alice_triggers):
    with pytest.raises(InvalidInputError):
        pcpt.trace(alice_model, [])
    with pytest.raises(InvalidInputError):
        pcpt.trace(alice_model, [alice_triggers, alice_triggers])
    far = TriggerSet("Carol", alice_triggers.images, label=NUM_CLASSES + 3)
    with pytest.raises(InvalidInputError):
        pcpt.trigger_accuracy(alice_model, far)


def test_report_rendering(alice_model, alice_triggers, bob_triggers, test_data):
    report = pcpt.trace(alice_model, [alice_triggers, bob_triggers], test=test_data)
    text = report.to_text()
    assert "verdict=Alice" in text and "T-Alice=" in text and "T-Original=" in text
    records = {r["user_id"]: r for r in report.to_records()}
    assert records["Alice"]["is_source"] and not records["Bob"]["is_source"]


# Robustness

def test_finetune_attack_keeps_the_watermark(alice_model, test_data, alice_triggers, bob_triggers):
    result = pcpt.finetune_attack(alice_model, test_data, epochs=config.ATTACK_EPOCHS,
                                  cfg=TrainConfig(epochs=1, seed=7), trigger_sets=[alice_triggers, bob_triggers])
    assert result.model.num_classes == NUM_CLASSES + 1
    assert result.report.verdict == "Alice"
    assert result.report.per_user_trigger_accuracy["Alice"] > config.THETA1
    assert result.report.per_user_trigger_accuracy["Bob"] < config.THETA2
    assert result.report.original_task_accuracy >= 0.8


def test_finetune_attack_rejects_zero_epochs(alice_model, test_data, alice_triggers):
    with pytest.raises(InvalidInputError):
        pcpt.finetune_attack(alice_model, test_data, 0, TrainConfig(epochs=1), [alice_triggers])


def test_prune_sweep(alice_model, test_data, alice_triggers, bob_triggers, tmp_path):
    sets = [alice_triggers, bob_triggers]
    rows = pcpt.prune_sweep(alice_model, [0.9, 0.5, 0.0, 0.7, 0.3], sets, test_data)
    assert [r.rate for r in rows] == [0.0, 0.3, 0.5, 0.7, 0.9]
    unpruned = pcpt.trace(alice_model, sets, test=test_data)
    assert rows[0].trigger_accuracy == unpruned.per_user_trigger_accuracy
    assert rows[0].original_accuracy == unpruned.original_task_accuracy
    assert set(rows[0].to_record()) == {"rate", "T-Original", "T-Alice", "T-Bob", "verdict"}

    half = rows[2]
    assert half.verdict == "Alice"
    assert half.trigger_accuracy["Alice"] > config.THETA1 and half.trigger_accuracy["Bob"] < config.THETA2
    # T-Original does not recover as more weights go
    accs = [r.original_accuracy for r in rows]
    assert all(later <= earlier + 0.02 for earlier, later in zip(accs, accs[1:]))
    assert accs[-1] <= accs[0]

    plot = tmp_path / "sweep.png"
    pcpt.plot_prune_sweep(rows, plot)
    assert plot.stat().st_size > 0

    with pytest.raises(InvalidInputError):
        pcpt.prune_sweep(alice_model, [1.2], sets, test_data)
