import gzip
import struct

import numpy as np
import pytest
import torch

from modeltrace import config, synth, tinynn
from modeltrace.errors import (
    CorruptionError, DivergenceError, FormatError, InconsistencyError, InvalidInputError,
    TruncationError, UnsupportedArchitectureError,
)
from modeltrace.tinynn import LabeledDataset, ModelSnapshot, TrainConfig, conv2d, dense, max_pool, relu

from conftest import INPUT_SHAPE, NUM_CLASSES


def dense_model(weights, bias=None) -> ModelSnapshot:
    w = torch.tensor(weights, dtype=torch.float32)
    b = torch.zeros(w.shape[0]) if bias is None else torch.tensor(bias, dtype=torch.float32)
    return ModelSnapshot((dense(w.shape[0]),), (w.shape[1],), w.shape[0], (w,), (b,))


# IDX

@pytest.mark.parametrize("channels,suffix", [(1, ""), (3, ""), (3, ".gz")])
def test_idx_round_trip(tmp_path, channels, suffix):
    data = synth.grid_patches(30, 10, size=8, channels=channels, seed=4)
    images, labels = tmp_path / f"x.idx{suffix}", tmp_path / f"y.idx{suffix}"
    synth.write_idx(data, images, labels)
    back = tinynn.load_idx(images, labels, num_classes=10)
    assert back.input_shape == (channels, 8, 8)
    np.testing.assert_array_equal(back.labels, data.labels)
    np.testing.assert_allclose(back.inputs, data.inputs, atol=1e-6)


def test_idx_header_is_big_endian(tmp_path):
    data = synth.grid_patches(3, 4, size=4, channels=1, seed=0)
    synth.write_idx(data, tmp_path / "x.idx", tmp_path / "y.idx")
    raw = (tmp_path / "x.idx").read_bytes()
    assert struct.unpack(">IIII", raw[:16]) == (0x00000803, 3, 4, 4)


def test_idx_errors(tmp_path):
    data = synth.grid_patches(5, 4, size=4, channels=1, seed=0)
    images, labels = tmp_path / "x.idx", tmp_path / "y.idx"
    synth.write_idx(data, images, labels)
    raw = images.read_bytes()

    (tmp_path / "short.idx").write_bytes(raw[:-3])
    with pytest.raises(TruncationError):
        tinynn.load_idx(tmp_path / "short.idx", labels, 4)

    (tmp_path / "magic.idx").write_bytes(struct.pack(">I", 0x00000802) + raw[4:])
    with pytest.raises(FormatError):
        tinynn.load_idx(tmp_path / "magic.idx", labels, 4)

    few = synth.grid_patches(4, 4, size=4, channels=1, seed=0)
    synth.write_idx(few, tmp_path / "x4.idx", tmp_path / "y4.idx")
    with pytest.raises(InconsistencyError):
        tinynn.load_idx(images, tmp_path / "y4.idx", 4)


def test_label_space_comes_from_the_caller(tmp_path):
    data = synth.grid_patches(40, 10, size=4, channels=1, seed=2)
    keep = np.flatnonzero(data.labels < 9)
    split = LabeledDataset(data.inputs[keep], data.labels[keep], 10)
    synth.write_idx(split, tmp_path / "x.idx", tmp_path / "y.idx")
    back = tinynn.load_idx(tmp_path / "x.idx", tmp_path / "y.idx", num_classes=10)
    assert back.num_classes == 10 and back.labels.max() == 8
    with pytest.raises(InconsistencyError):
        tinynn.load_idx(tmp_path / "x.idx", tmp_path / "y.idx", num_classes=5)


def test_gzip_is_chosen_by_suffix(tmp_path):
    data = synth.grid_patches(6, 4, size=4, channels=1, seed=0)
    synth.write_idx(data, tmp_path / "x.idx.gz", tmp_path / "y.idx.gz")
    assert gzip.decompress((tmp_path / "y.idx.gz").read_bytes())[:4] == b"\x00\x00\x08\x01"


# Architecture and forward

def test_shape_inference_and_rejections():
    out, params = tinynn.infer_shapes(tinynn.desk_architecture(10), (3, 32, 32))
    assert out == (10,)
    assert params[0] == ((8, 3, 5, 5), (8,))
    assert params[6] == ((64, 16 * 5 * 5), (64,))
    with pytest.raises(UnsupportedArchitectureError):
        tinynn.infer_shapes((conv2d(4, 9),), (1, 6, 6))
    with pytest.raises(UnsupportedArchitectureError):
        tinynn.init_model((dense(3),), (5,), num_classes=4)


def test_zero_weights_give_uniform_output():
    model = dense_model(np.zeros((4, 6)))
    probs = tinynn.forward(model, np.ones((3, 6), dtype=np.float32))
    np.testing.assert_allclose(probs, 0.25)


def test_forward_accepts_single_input_and_rejects_wrong_shape():
    model = tinynn.init_model((dense(3),), (5,), 3, seed=1)
    assert tinynn.forward(model, np.zeros(5)).shape == (3,)
    with pytest.raises(InvalidInputError):
        tinynn.forward(model, np.zeros((2, 4)))


def test_predict_can_ignore_trailing_classes():
    model = dense_model([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    x = np.array([[2.0, 1.0]], dtype=np.float32)
    assert tinynn.predict(model, x)[0] == 2
    assert tinynn.predict(model, x, classes=2)[0] == 0


# Gradients

def test_gradient_check_dense(rng):
    model = tinynn.init_model((dense(4), relu(), dense(3)), (5,), 3, seed=2)
    batch = (rng.normal(size=(6, 5)).astype(np.float32), np.array([0, 1, 2, 0, 1, 2]))
    assert tinynn.gradient_check(model, batch) <= 1e-4


def test_gradient_check_conv(rng):
    model = tinynn.init_model((conv2d(2, 3), max_pool(2), dense(3)), (1, 6, 6), 3, seed=3)
    batch = (rng.normal(size=(4, 1, 6, 6)).astype(np.float32), np.array([0, 1, 2, 0]))
    assert tinynn.gradient_check(model, batch) <= 1e-4


def test_gradient_check_refuses_large_models():
    model = tinynn.init_model(tinynn.desk_architecture(10), (3, 32, 32), 10)
    with pytest.raises(InvalidInputError):
        tinynn.gradient_check(model, (np.zeros((1, 3, 32, 32)), [0]))


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_output_gradient_is_softmax_minus_one_hot(rng):
    model = tinynn.init_model((dense(6), relu(), dense(4)), (5,), 4, seed=7)
    x = rng.normal(size=(3, 5)).astype(np.float32)
    y = np.array([2, 0, 3])
    delta = softmax(tinynn.logits(model, x).astype(np.float64)) - np.eye(4)[y]
    grads = tinynn.gradients(model, (x, y))
    np.testing.assert_allclose(grads[-1][1].numpy(), delta.mean(axis=0), atol=1e-6)

    single = dense_model(rng.normal(size=(3, 2)).astype(np.float32), bias=[0.1, -0.2, 0.3])
    x1 = np.array([[0.5, -1.0]], dtype=np.float32)
    gw, gb = tinynn.gradients(single, (x1, np.array([1])))[0]
    d1 = softmax(tinynn.logits(single, x1).astype(np.float64)) - np.eye(3)[[1]]
    np.testing.assert_allclose(gb.numpy(), d1[0], atol=1e-6)
    np.testing.assert_allclose(gw.numpy(), d1.T @ x1.astype(np.float64), atol=1e-6)


# Training

def test_base_model_learns_the_task(base_model, test_data):
    assert tinynn.evaluate(base_model, test_data) >= 0.85


def test_training_is_seeded_and_reduces_loss(train_data):
    small = train_data.subset(range(200))
    model = tinynn.init_model((dense(16), relu(), dense(NUM_CLASSES)), INPUT_SHAPE, NUM_CLASSES, seed=5)
    history = []
    a = tinynn.train(model, small, TrainConfig(epochs=4, seed=9), history=history)
    b = tinynn.train(model, small, TrainConfig(epochs=4, seed=9))
    assert a == b
    assert len(history) == 4 and history[-1] < history[0]


def test_linearly_separable_data_is_learned_exactly(rng):
    side = rng.choice([-1.0, 1.0], size=200)
    x = np.stack([side * rng.uniform(0.5, 2.0, size=200), rng.normal(size=200)], axis=1).astype(np.float32)
    data = LabeledDataset(x, (side > 0).astype(np.int64), 2)
    model = tinynn.init_model((dense(2),), (2,), 2, seed=1)
    trained = tinynn.train(model, data, TrainConfig(epochs=50, seed=1))
    assert tinynn.evaluate(trained, data) == 1.0


def test_loss_falls_over_five_epochs(train_data):
    model = tinynn.init_model((dense(16), relu(), dense(NUM_CLASSES)), INPUT_SHAPE, NUM_CLASSES, seed=5)
    history = []
    tinynn.train(model, train_data.subset(range(300)), TrainConfig(epochs=10, seed=2), history=history)
    assert all(history[e + 5] < history[e] for e in range(5))


def test_training_rejects_mismatched_data(base_model, train_data):
    wider = LabeledDataset(train_data.inputs[:10], train_data.labels[:10], NUM_CLASSES + 1)
    with pytest.raises(InvalidInputError):
        tinynn.train(base_model, wider, TrainConfig(epochs=1))
    with pytest.raises(InvalidInputError):
        TrainConfig(epochs=0)


def test_nan_loss_raises_divergence():
    model = tinynn.init_model((dense(2),), (3,), 2, seed=0)
    data = LabeledDataset(np.full((4, 3), np.nan, dtype=np.float32), np.array([0, 1, 0, 1]), 2)
    with pytest.raises(DivergenceError) as err:
        tinynn.train(model, data, TrainConfig(epochs=3))
    assert err.value.epoch == 1


# Surgery

def test_extension_keeps_existing_logits(base_model, test_data):
    wider = tinynn.extend_output_class(base_model)
    assert wider.num_classes == NUM_CLASSES + 1
    before = tinynn.logits(base_model, test_data.inputs)
    after = tinynn.logits(wider, test_data.inputs)
    assert np.array_equal(after[:, :NUM_CLASSES], before)
    assert np.all(after[:, NUM_CLASSES] == 0.0)


def test_extension_needs_dense_output():
    model = tinynn.init_model((dense(4), relu()), (3,), 4)
    with pytest.raises(UnsupportedArchitectureError):
        tinynn.extend_output_class(model)


def test_prune_floor_and_tie_order():
    model = dense_model([[0.5, -0.1, 0.3, 0.1], [0.2, -0.7, 0.05, 0.9]], bias=[0.01, -0.02])
    pruned = tinynn.global_magnitude_prune(model, 0.25)
    expected = torch.tensor([[0.5, 0.0, 0.3, 0.1], [0.2, -0.7, 0.0, 0.9]])
    assert torch.equal(pruned.weights[0], expected)
    assert torch.equal(pruned.biases[0], model.biases[0])
    # floor(0.3 * 8) == 2 as well
    assert tinynn.global_magnitude_prune(model, 0.3) == pruned


def test_prune_extremes(base_model):
    assert tinynn.global_magnitude_prune(base_model, 0.0) == base_model
    empty = tinynn.global_magnitude_prune(base_model, 1.0)
    assert all(torch.count_nonzero(w) == 0 for w in empty.weights if w is not None)
    assert all(torch.equal(a, b) for a, b in zip(empty.biases, base_model.biases) if a is not None)
    with pytest.raises(InvalidInputError):
        tinynn.global_magnitude_prune(base_model, 1.5)


def test_prune_is_global(base_model):
    half = tinynn.global_magnitude_prune(base_model, 0.5)
    zeros = sum(int((w == 0).sum()) for w in half.weights if w is not None)
    assert zeros == base_model.weight_count // 2
    per_layer = [float((w == 0).float().mean()) for w in half.weights if w is not None]
    assert max(per_layer) - min(per_layer) > 0.05


# Serialization

def test_serialization_round_trip(tmp_path, base_model):
    path = tmp_path / "m.tnn"
    tinynn.save(base_model, path)
    assert tinynn.load(path) == base_model
    assert tinynn.from_bytes(tinynn.to_bytes(base_model)) == base_model


def test_serialization_detects_damage(base_model):
    raw = bytearray(tinynn.to_bytes(base_model))
    flipped = raw.copy()
    flipped[len(raw) // 2] ^= 0x01
    with pytest.raises(CorruptionError):
        tinynn.from_bytes(bytes(flipped))
    with pytest.raises(FormatError):
        tinynn.from_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CorruptionError):
        tinynn.from_bytes(bytes(raw[:-9]))


def test_future_format_version_is_refused(base_model):
    raw = bytearray(tinynn.to_bytes(base_model))
    raw[4:6] = struct.pack("<H", config.MODEL_VERSION + 1)
    with pytest.raises(FormatError, match="version"):
        tinynn.from_bytes(bytes(raw))
