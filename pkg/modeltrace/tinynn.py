"""
A small feed-forward / convolutional network engine on top of torch.

Models are immutable `ModelSnapshot` values (layer descriptors + per-layer
weight/bias tensors). Every operation that changes weights returns a new
snapshot. The output layer is always followed by an implicit softmax.
"""
from __future__ import annotations
import gzip, io, math, struct, zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from . import config
from .errors import (
    CorruptionError, DivergenceError, FormatError, InconsistencyError, InvalidInputError,
    TruncationError, UnsupportedArchitectureError,
)
from .logger import RunLogger, get_logger

log = get_logger("tinynn")

IDX_IMAGES_MAGIC = 0x00000803
# ubyte, 4 dims: (count, channels, rows, cols)
IDX_COLOR_MAGIC = 0x00000804
IDX_LABELS_MAGIC = 0x00000801

_KIND_CODES = {"conv2d": 1, "maxpool": 2, "dense": 3, "relu": 4}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


# Data

@dataclass(frozen=True, eq=False)
class LabeledDataset:
    inputs: np.ndarray   # (N, *input_shape) float32
    labels: np.ndarray   # (N,) int64
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float32)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.shape[0] != y.shape[0]:
            raise InconsistencyError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
        if self.num_classes < 1:
            raise InvalidInputError("num_classes must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise InvalidInputError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes)


def _read_maybe_gzip(path) -> bytes:
    p = Path(path)
    raw = p.read_bytes()
    return gzip.decompress(raw) if p.suffix == ".gz" else raw


def load_idx(path_images, path_labels, num_classes: int) -> LabeledDataset:
    """Images and labels of one split; `num_classes` is the model's label space, not the labels seen."""
    if num_classes < 1:
        raise InvalidInputError("num_classes must be positive")
    img_raw = _read_maybe_gzip(path_images)
    lbl_raw = _read_maybe_gzip(path_labels)

    if len(img_raw) < 4:
        raise TruncationError(f"{path_images}: IDX image header is truncated")
    (magic,) = struct.unpack(">I", img_raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        channels, header = 1, 16
    elif magic == IDX_COLOR_MAGIC:
        channels, header = None, 20
    else:
        raise FormatError(f"{path_images}: image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(img_raw) < header:
        raise TruncationError(f"{path_images}: IDX image header is truncated")
    dims = struct.unpack(f">{(header - 4) // 4}I", img_raw[4:header])
    if channels is None:
        count, channels, rows, cols = dims
    else:
        count, rows, cols = dims
    size = count * channels * rows * cols
    if len(img_raw) - header < size:
        raise TruncationError(f"{path_images}: {len(img_raw) - header} of {size} pixel bytes present")

    if len(lbl_raw) < 8:
        raise TruncationError(f"{path_labels}: IDX label header is truncated")
    lmagic, lcount = struct.unpack(">II", lbl_raw[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path_labels}: label magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if lcount != count:
        raise InconsistencyError(f"{count} images but {lcount} labels")
    if len(lbl_raw) - 8 < lcount:
        raise TruncationError(f"{path_labels}: {len(lbl_raw) - 8} of {lcount} label bytes present")

    pixels = np.frombuffer(img_raw, dtype=np.uint8, count=size, offset=header)
    images = pixels.reshape(count, channels, rows, cols).astype(np.float32) / 255.0
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)
    if lcount and int(labels.max()) >= num_classes:
        raise InconsistencyError(f"{path_labels}: label {int(labels.max())} outside {num_classes} classes")
    log.info("loaded %d IDX items (%dx%d, %d classes)", count, rows, cols, num_classes)
    return LabeledDataset(images, labels, num_classes)


# Architecture

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0     # conv out-channels / dense out-dim
    kernel: int = 0   # conv kernel / pool window
    stride: int = 1

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise InvalidInputError(f"unknown layer kind {self.kind!r}")


def conv2d(out_channels: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", out_channels, kernel, stride)


def max_pool(window: int) -> LayerSpec:
    return LayerSpec("maxpool", 0, window, window)


def dense(out_dim: int) -> LayerSpec:
    return LayerSpec("dense", out_dim)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def desk_architecture(num_classes: int) -> Tuple[LayerSpec, ...]:
    """LeNet-style stand-in: conv(8,5x5)-pool-conv(16,5x5)-pool-dense(64)-dense(N)."""
    return (
        conv2d(8, 5), relu(), max_pool(2),
        conv2d(16, 5), relu(), max_pool(2),
        dense(64), relu(),
        dense(num_classes),
    )


ParamShapes = List[Optional[Tuple[Tuple[int, ...], Tuple[int, ...]]]]


def infer_shapes(layers: Sequence[LayerSpec], input_shape: Sequence[int]) -> Tuple[Tuple[int, ...], ParamShapes]:
    shape = tuple(int(s) for s in input_shape)
    params: ParamShapes = []
    for i, spec in enumerate(layers):
        if spec.kind == "conv2d":
            if len(shape) != 3:
                raise UnsupportedArchitectureError(f"layer {i}: conv2d needs a (C, H, W) input, got {shape}")
            c, h, w = shape
            oh = (h - spec.kernel) // spec.stride + 1
            ow = (w - spec.kernel) // spec.stride + 1
            if oh < 1 or ow < 1:
                raise UnsupportedArchitectureError(f"layer {i}: kernel {spec.kernel} exceeds input {h}x{w}")
            params.append(((spec.size, c, spec.kernel, spec.kernel), (spec.size,)))
            shape = (spec.size, oh, ow)
        elif spec.kind == "maxpool":
            if len(shape) != 3 or shape[1] < spec.kernel or shape[2] < spec.kernel:
                raise UnsupportedArchitectureError(f"layer {i}: cannot pool {shape} with window {spec.kernel}")
            params.append(None)
            shape = (shape[0], shape[1] // spec.kernel, shape[2] // spec.kernel)
        elif spec.kind == "dense":
            params.append(((spec.size, int(np.prod(shape))), (spec.size,)))
            shape = (spec.size,)
        else:
            params.append(None)
    return shape, params


@dataclass(frozen=True, eq=False)
class ModelSnapshot:
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, ...]
    num_classes: int
    weights: Tuple[Optional[torch.Tensor], ...]
    biases: Tuple[Optional[torch.Tensor], ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        out_shape, shapes = infer_shapes(layers, self.input_shape)
        if out_shape != (self.num_classes,):
            raise UnsupportedArchitectureError(
                f"layers end in shape {out_shape}, expected ({self.num_classes},)")
        if len(self.weights) != len(layers) or len(self.biases) != len(layers):
            raise InvalidInputError("one weight/bias slot per layer is required")
        for i, (expected, w, b) in enumerate(zip(shapes, self.weights, self.biases)):
            if expected is None:
                if w is not None or b is not None:
                    raise InvalidInputError(f"layer {i} ({layers[i].kind}) takes no parameters")
                continue
            if w is None or b is None or tuple(w.shape) != expected[0] or tuple(b.shape) != expected[1]:
                raise InvalidInputError(f"layer {i}: parameter shapes do not match {expected}")
            if not (torch.isfinite(w).all() and torch.isfinite(b).all()):
                raise InvalidInputError(f"layer {i}: non-finite parameters")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "weights", tuple(self.weights))
        object.__setattr__(self, "biases", tuple(self.biases))

    def __eq__(self, other):
        if not isinstance(other, ModelSnapshot):
            return NotImplemented
        if (self.layers, self.input_shape, self.num_classes) != (other.layers, other.input_shape, other.num_classes):
            return False
        return all(_same_tensor(a, b) for a, b in zip(self.weights + self.biases, other.weights + other.biases))

    __hash__ = None

    @property
    def weight_count(self) -> int:
        return sum(w.numel() for w in self.weights if w is not None)

    @property
    def parameter_count(self) -> int:
        return self.weight_count + sum(b.numel() for b in self.biases if b is not None)


def _same_tensor(a, b) -> bool:
    if a is None or b is None:
        return a is b
    return a.shape == b.shape and bool(torch.equal(a, b))


def init_model(layers: Sequence[LayerSpec], input_shape: Sequence[int], num_classes: int,
               seed: int = 0) -> ModelSnapshot:
    """Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
    _, shapes = infer_shapes(layers, input_shape)
    gen = torch.Generator().manual_seed(seed)
    weights, biases = [], []
    for shp in shapes:
        if shp is None:
            weights.append(None)
            biases.append(None)
            continue
        w_shape, b_shape = shp
        receptive = int(np.prod(w_shape[2:])) if len(w_shape) > 2 else 1
        fan_in, fan_out = w_shape[1] * receptive, w_shape[0] * receptive
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append((torch.rand(w_shape, generator=gen) * 2.0 - 1.0) * bound)
        biases.append(torch.zeros(b_shape))
    return ModelSnapshot(tuple(layers), tuple(input_shape), num_classes, tuple(weights), tuple(biases))


# Forward

def _dense(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # row-wise products keep each output unit independent of the layer width
    return (x.unsqueeze(1) * w).sum(dim=-1) + b


def _logits(layers, weights, biases, x: torch.Tensor) -> torch.Tensor:
    h = x
    for spec, w, b in zip(layers, weights, biases):
        if spec.kind == "conv2d":
            h = F.conv2d(h, w, b, stride=spec.stride)
        elif spec.kind == "maxpool":
            h = F.max_pool2d(h, spec.kernel)
        elif spec.kind == "dense":
            h = _dense(h.reshape(h.shape[0], -1), w, b)
        else:
            h = F.relu(h)
    return h


def _as_batch(model: ModelSnapshot, x) -> Tuple[torch.Tensor, bool]:
    t = torch.as_tensor(np.asarray(x, dtype=np.float32))
    shape = tuple(t.shape)
    if shape == model.input_shape:
        return t.unsqueeze(0), True
    if shape[1:] == model.input_shape:
        return t, False
    raise InvalidInputError(f"input shape {shape} does not match model input {model.input_shape}")


@torch.inference_mode()
def logits(model: ModelSnapshot, x) -> np.ndarray:
    batch, single = _as_batch(model, x)
    outs = [
        _logits(model.layers, model.weights, model.biases, batch[i:i + config.EVAL_BATCH])
        for i in range(0, batch.shape[0], config.EVAL_BATCH)
    ]
    out = torch.cat(outs) if outs else torch.zeros((0, model.num_classes))
    arr = out.numpy()
    return arr[0] if single else arr


def forward(model: ModelSnapshot, x) -> np.ndarray:
    """Softmax probabilities over num_classes for one input or a batch."""
    z = torch.as_tensor(logits(model, x))
    return torch.softmax(z, dim=-1).numpy()


def predict(model: ModelSnapshot, x, classes: Optional[int] = None) -> np.ndarray:
    z = logits(model, x)
    if classes is not None:
        z = z[..., :classes]
    return np.argmax(z, axis=-1)


def evaluate(model: ModelSnapshot, data: LabeledDataset, classes: Optional[int] = None) -> float:
    if len(data) == 0:
        return 0.0
    pred = predict(model, data.inputs, classes=classes)
    return float(np.mean(pred == data.labels))


# Training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = config.BATCH_SIZE
    learning_rate: float = config.LEARNING_RATE
    momentum: float = config.MOMENTUM
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInputError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidInputError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError("momentum must lie in [0, 1)")


def _trainable(model: ModelSnapshot, dtype=torch.float32):
    ws = [None if w is None else w.detach().clone().to(dtype).requires_grad_(True) for w in model.weights]
    bs = [None if b is None else b.detach().clone().to(dtype).requires_grad_(True) for b in model.biases]
    return ws, bs


def _freeze(model: ModelSnapshot, ws, bs) -> ModelSnapshot:
    return replace(
        model,
        weights=tuple(None if w is None else w.detach().to(torch.float32).clone() for w in ws),
        biases=tuple(None if b is None else b.detach().to(torch.float32).clone() for b in bs),
    )


def train(model: ModelSnapshot, data: LabeledDataset, cfg: TrainConfig,
          history: Optional[List[float]] = None, log_run: Optional[RunLogger] = None,
          progress: bool = False) -> ModelSnapshot:
    """Mini-batch SGD with momentum on mean cross-entropy; seeded shuffling."""
    if data.num_classes != model.num_classes:
        raise InvalidInputError(
            f"dataset has {data.num_classes} classes, model has {model.num_classes}")
    if data.input_shape != model.input_shape:
        raise InvalidInputError(f"dataset inputs {data.input_shape} vs model {model.input_shape}")
    n = len(data)
    if n == 0:
        raise InvalidInputError("cannot train on an empty dataset")

    ws, bs = _trainable(model)
    params = [p for p in ws + bs if p is not None]
    opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)
    gen = torch.Generator().manual_seed(cfg.seed)
    x_all = torch.from_numpy(data.inputs)
    y_all = torch.from_numpy(data.labels)

    epochs = tqdm(range(1, cfg.epochs + 1), desc="train", disable=not progress, leave=False)
    for epoch in epochs:
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(_logits(model.layers, ws, bs, x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(epoch)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * idx.numel()
        mean_loss = total / n
        if history is not None:
            history.append(mean_loss)
        if log_run is not None:
            log_run.event(op="train_epoch", epoch=epoch, loss=mean_loss)
        log.debug("epoch %d loss %.6f", epoch, mean_loss)
    return _freeze(model, ws, bs)


# Gradients

def _batch_tensors(model: ModelSnapshot, batch, dtype):
    inputs, labels = batch
    x, _ = _as_batch(model, inputs)
    y = torch.as_tensor(np.atleast_1d(np.asarray(labels, dtype=np.int64)))
    return x.to(dtype), y


def gradients(model: ModelSnapshot, batch) -> List[Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]]:
    """Analytic d(mean cross-entropy)/d(params) per layer, float64."""
    ws, bs = _trainable(model, torch.float64)
    x, y = _batch_tensors(model, batch, torch.float64)
    loss = F.cross_entropy(_logits(model.layers, ws, bs, x), y)
    params = [p for p in ws + bs if p is not None]
    grads = iter(torch.autograd.grad(loss, params))
    gw = [None if w is None else next(grads) for w in ws]
    gb = [None if b is None else next(grads) for b in bs]
    return list(zip(gw, gb))


def gradient_check(model: ModelSnapshot, batch, step: float = config.GRADCHECK_STEP) -> float:
    """
    Max error between analytic gradients and central finite differences over
    every parameter. Errors are relative to max(|analytic|, |numeric|, 1e-3),
    so near-zero gradients are compared absolutely.
    """
    if model.parameter_count >= 10_000:
        raise InvalidInputError("gradient_check is meant for models under 10^4 parameters")
    analytic = gradients(model, batch)
    x, y = _batch_tensors(model, batch, torch.float64)
    ws = [None if w is None else w.detach().to(torch.float64).clone() for w in model.weights]
    bs = [None if b is None else b.detach().to(torch.float64).clone() for b in model.biases]

    def loss_value() -> float:
        with torch.no_grad():
            return float(F.cross_entropy(_logits(model.layers, ws, bs, x), y))

    worst = 0.0
    for i in range(len(model.layers)):
        for tensor, grad in ((ws[i], analytic[i][0]), (bs[i], analytic[i][1])):
            if tensor is None:
                continue
            flat, gflat = tensor.view(-1), grad.reshape(-1)
            for j in range(flat.numel()):
                orig = float(flat[j])
                flat[j] = orig + step
                plus = loss_value()
                flat[j] = orig - step
                minus = loss_value()
                flat[j] = orig
                num = (plus - minus) / (2.0 * step)
                ana = float(gflat[j])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-3)
                worst = max(worst, err)
    return worst


# Surgery

def extend_output_class(model: ModelSnapshot) -> ModelSnapshot:
    """Append one zero-initialised output unit; existing logits are untouched."""
    last = model.layers[-1]
    if last.kind != "dense":
        raise UnsupportedArchitectureError(f"final layer is {last.kind}, expected dense")
    w, b = model.weights[-1], model.biases[-1]
    new_w = torch.cat([w, torch.zeros((1, w.shape[1]), dtype=w.dtype)], dim=0)
    new_b = torch.cat([b, torch.zeros((1,), dtype=b.dtype)], dim=0)
    return replace(
        model,
        layers=model.layers[:-1] + (dense(last.size + 1),),
        num_classes=model.num_classes + 1,
        weights=model.weights[:-1] + (new_w,),
        biases=model.biases[:-1] + (new_b,),
    )


def global_magnitude_prune(model: ModelSnapshot, rate: float) -> ModelSnapshot:
    """
    Zero the floor(rate * W_total) smallest-|w| weights pooled over all layers
    (biases untouched); ties fall to the lower (layer, flat index).
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidInputError(f"prune rate must lie in [0, 1], got {rate}")
    present = [w for w in model.weights if w is not None]
    if not present:
        return model
    flat = torch.cat([w.reshape(-1) for w in present])
    k = math.floor(rate * flat.numel())
    if k == 0:
        return model
    order = torch.argsort(flat.abs(), stable=True)
    mask = torch.ones_like(flat)
    mask[order[:k]] = 0.0
    pruned, offset = [], 0
    for w in model.weights:
        if w is None:
            pruned.append(None)
            continue
        n = w.numel()
        pruned.append(w * mask[offset:offset + n].reshape(w.shape))
        offset += n
    return replace(model, weights=tuple(pruned))


# Serialization

def _pack_tensor(t: torch.Tensor) -> bytes:
    arr = t.detach().to(torch.float32).contiguous().numpy().astype("<f4")
    return struct.pack("<I", arr.size) + arr.tobytes()


def to_bytes(model: ModelSnapshot) -> bytes:
    buf = io.BytesIO()
    buf.write(config.MODEL_MAGIC)
    buf.write(struct.pack("<HHI", config.MODEL_VERSION, len(model.layers), model.num_classes))
    buf.write(struct.pack("<B", len(model.input_shape)))
    buf.write(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    for spec in model.layers:
        buf.write(struct.pack("<BIII", _KIND_CODES[spec.kind], spec.size, spec.kernel, spec.stride))
    for w, b in zip(model.weights, model.biases):
        if w is None:
            continue
        buf.write(_pack_tensor(w))
        buf.write(_pack_tensor(b))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CorruptionError("model file ends inside a record")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def tensor(self, shape) -> torch.Tensor:
        (count,) = self.take("<I")
        if count != int(np.prod(shape)):
            raise CorruptionError(f"tensor holds {count} values, layer expects {shape}")
        end = self.pos + 4 * count
        if end > len(self.data):
            raise CorruptionError("model file ends inside a weight payload")
        arr = np.frombuffer(self.data, dtype="<f4", count=count, offset=self.pos).astype(np.float32)
        self.pos = end
        return torch.from_numpy(arr.reshape(shape).copy())


def from_bytes(data: bytes) -> ModelSnapshot:
    if data[:4] != config.MODEL_MAGIC:
        raise FormatError(f"bad model magic {data[:4]!r}")
    if len(data) < 14:
        raise CorruptionError("model file is truncated")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != config.MODEL_VERSION:
        raise FormatError(f"model format version {version} is not supported (expected {config.MODEL_VERSION})")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptionError("model checksum mismatch")

    r = _Reader(body)
    r.pos = 6
    n_layers, num_classes = r.take("<HI")
    (rank,) = r.take("<B")
    input_shape = r.take(f"<{rank}I")
    layers = []
    for _ in range(n_layers):
        code, size, kernel, stride = r.take("<BIII")
        if code not in _CODE_KINDS:
            raise CorruptionError(f"unknown layer code {code}")
        layers.append(LayerSpec(_CODE_KINDS[code], size, kernel, stride))
    _, shapes = infer_shapes(layers, input_shape)
    weights, biases = [], []
    for shp in shapes:
        if shp is None:
            weights.append(None)
            biases.append(None)
        else:
            weights.append(r.tensor(shp[0]))
            biases.append(r.tensor(shp[1]))
    if r.pos != len(body):
        raise CorruptionError("trailing bytes after the weight payload")
    return ModelSnapshot(tuple(layers), tuple(input_shape), num_classes, tuple(weights), tuple(biases))


def save(model: ModelSnapshot, path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(to_bytes(model))


def load(path) -> ModelSnapshot:
    return from_bytes(Path(path).read_bytes())
