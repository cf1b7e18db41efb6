"""
Frame ingestion (YUV4MPEG2 streams, PGM/PPM directories), trigger-set
selection from a key video, and the image quality metrics (MSE, SSIM).
"""
from __future__ import annotations
import os, re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import config
from .errors import (
    ContentTooSimilarError, CorruptionError, EmptySourceError, FormatError,
    InsufficientFramesError, InvalidInputError, TruncationError, UnsupportedFormatError,
)
from .logger import get_logger
from .phash import GrayImage, PerceptualHash, RgbImage, hamming, image_phash, luminance, resize_bilinear

log = get_logger("media")


@dataclass(frozen=True)
class FrameSequence:
    frames: Tuple[RgbImage, ...]
    source_id: str
    frame_rate: Optional[str] = None

    def __post_init__(self):
        frames = tuple(self.frames)
        if frames:
            w, h = frames[0].width, frames[0].height
            if any(f.width != w or f.height != h for f in frames):
                raise InvalidInputError(f"frames of {self.source_id!r} differ in size")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class TriggerSet:
    user_id: str
    images: Tuple[RgbImage, ...]
    label: int
    d_min: int = 0
    min_distance: int = config.PHASH_BITS
    hashes: Tuple[PerceptualHash, ...] = field(default=())

    def __post_init__(self):
        images = tuple(self.images)
        if not images:
            raise InvalidInputError(f"trigger set for {self.user_id!r} is empty")
        w, h = images[0].width, images[0].height
        if any(im.width != w or im.height != h for im in images):
            raise InvalidInputError("trigger images must share one size")
        if self.label < 0:
            raise InvalidInputError("trigger label must be a class index")
        object.__setattr__(self, "images", images)
        if not self.hashes:
            object.__setattr__(self, "hashes", tuple(image_phash(im) for im in images))

    def __len__(self):
        return len(self.images)


# YUV4MPEG2

_CHROMA_420 = {"420", "420jpeg", "420paldv", "420mpeg2"}


def _ycbcr_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    # BT.601 full range
    y = y.astype(np.float64)
    cb = cb.astype(np.float64) - 128.0
    cr = cr.astype(np.float64) - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _parse_y4m_header(line: bytes) -> Dict[str, str]:
    tokens = line.decode("ascii", errors="replace").split()
    if not tokens or tokens[0].encode() != config.Y4M_MAGIC:
        raise FormatError("stream does not start with the YUV4MPEG2 signature")
    params: Dict[str, str] = {}
    for tok in tokens[1:]:
        params[tok[0]] = tok[1:]
    return params


def decode_y4m(data: bytes, source_id: str = "y4m") -> FrameSequence:
    if not data.startswith(config.Y4M_MAGIC):
        raise FormatError("stream does not start with the YUV4MPEG2 signature")
    nl = data.find(b"\n")
    if nl < 0:
        raise TruncationError("header line is not terminated", frame_index=None)
    params = _parse_y4m_header(data[:nl])
    try:
        width, height = int(params["W"]), int(params["H"])
    except (KeyError, ValueError):
        raise FormatError("header lacks valid W/H parameters")
    if width <= 0 or height <= 0:
        raise FormatError("frame dimensions must be positive")

    chroma = params.get("C", "420jpeg")
    if chroma == "444":
        cw, ch = width, height
    elif chroma in _CHROMA_420:
        cw, ch = (width + 1) // 2, (height + 1) // 2
    else:
        raise UnsupportedFormatError(f"unsupported chroma mode C{chroma}")
    luma_size, chroma_size = width * height, cw * ch
    frame_size = luma_size + 2 * chroma_size

    frames: List[RgbImage] = []
    pos = nl + 1
    while pos < len(data):
        idx = len(frames)
        if not data.startswith(b"FRAME", pos):
            raise FormatError(f"expected FRAME marker at byte {pos} (frame {idx})")
        end = data.find(b"\n", pos)
        if end < 0:
            raise TruncationError(f"frame {idx} header is not terminated", frame_index=idx)
        start = end + 1
        payload = data[start:start + frame_size]
        if len(payload) < frame_size:
            raise TruncationError(
                f"frame {idx} payload has {len(payload)} of {frame_size} bytes", frame_index=idx)
        buf = np.frombuffer(payload, dtype=np.uint8)
        y = buf[:luma_size].reshape(height, width)
        cb = buf[luma_size:luma_size + chroma_size].reshape(ch, cw)
        cr = buf[luma_size + chroma_size:].reshape(ch, cw)
        if chroma != "444":
            cb = np.repeat(np.repeat(cb, 2, axis=0), 2, axis=1)[:height, :width]
            cr = np.repeat(np.repeat(cr, 2, axis=0), 2, axis=1)[:height, :width]
        frames.append(RgbImage(width=width, height=height, data=_ycbcr_to_rgb(y, cb, cr)))
        pos = start + frame_size

    log.info("decoded %d frames (%dx%d, C%s) from %s", len(frames), width, height, chroma, source_id)
    return FrameSequence(frames=tuple(frames), source_id=source_id, frame_rate=params.get("F"))


def load_y4m(path) -> FrameSequence:
    p = Path(path)
    return decode_y4m(p.read_bytes(), source_id=p.stem)


# PGM / PPM

def _next_token(data: bytes, pos: int) -> Tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            eol = data.find(b"\n", pos)
            pos = n if eol < 0 else eol + 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise TruncationError("PNM header ended early")
    return data[start:pos], pos


def read_pnm(data: bytes) -> RgbImage:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"not a binary PGM/PPM file (magic {magic!r})")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _next_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"bad PNM header field {tok!r}")
    width, height, maxval = fields
    if maxval > 255:
        raise UnsupportedFormatError(f"maxval {maxval} > 255 is not supported")
    if width <= 0 or height <= 0 or maxval <= 0:
        raise FormatError("PNM dimensions and maxval must be positive")
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    channels = 1 if magic == b"P5" else 3
    size = width * height * channels
    raster = data[pos:pos + size]
    if len(raster) < size:
        raise TruncationError(f"PNM raster has {len(raster)} of {size} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    if maxval != 255:
        arr = np.clip(np.rint(arr.astype(np.float64) * 255.0 / maxval), 0, 255).astype(np.uint8)
    if channels == 1:
        arr = np.repeat(arr, 3, axis=2)
    return RgbImage(width=width, height=height, data=arr)


def write_pnm(img: RgbImage, gray: bool = False) -> bytes:
    if gray:
        body = np.ascontiguousarray(img.data[:, :, 0]).tobytes()
        return f"P5\n{img.width} {img.height}\n255\n".encode("ascii") + body
    return f"P6\n{img.width} {img.height}\n255\n".encode("ascii") + img.data.tobytes()


def load_pnm(path) -> RgbImage:
    return read_pnm(Path(path).read_bytes())


def save_pnm(img: RgbImage, path, gray: bool = False):
    Path(path).write_bytes(write_pnm(img, gray=gray))


def _natural_key(name: str):
    return [int(part) if part.isdigit() else part for part in re.split(r"(\d+)", name)]


def load_frame_dir(path) -> FrameSequence:
    root = Path(path)
    if not root.is_dir():
        raise EmptySourceError(f"{root} is not a directory")
    names = sorted(
        (p.name for p in root.iterdir() if p.suffix.lower() in config.PNM_EXTENSIONS),
        key=_natural_key,
    )
    frames: List[RgbImage] = []
    for name in names:
        try:
            frames.append(load_pnm(root / name))
        except UnsupportedFormatError:
            raise
        except FormatError as exc:
            log.warning("skipping %s: %s", name, exc)
    if not frames:
        raise EmptySourceError(f"no parseable PGM/PPM frames in {root}")
    return FrameSequence(frames=tuple(frames), source_id=root.name)


# Trigger selection

def hash_distances(hashes: Sequence[PerceptualHash]) -> np.ndarray:
    vals = np.array([h.value for h in hashes], dtype=np.uint64)
    x = vals[:, None] ^ vals[None, :]
    n = len(vals)
    return np.unpackbits(x.view(np.uint8).reshape(n, n, 8), axis=2).sum(axis=2).astype(np.int64)


def farthest_point_order(dist: np.ndarray, count: int) -> List[int]:
    """Greedy farthest-point selection seeded with index 0; ties go to the lower index."""
    n = dist.shape[0]
    chosen = [0]
    mind = dist[0].astype(np.int64).copy()
    mind[0] = -1
    for _ in range(count - 1):
        idx = int(np.argmax(mind))
        chosen.append(idx)
        mind = np.minimum(mind, dist[idx])
        mind[chosen] = -1
    return chosen[:min(count, n)]


def min_pairwise(dist: np.ndarray, indices: Sequence[int]) -> int:
    if len(indices) < 2:
        return config.PHASH_BITS
    sub = dist[np.ix_(indices, indices)]
    return int(sub[~np.eye(len(indices), dtype=bool)].min())


def select_triggers(seq: FrameSequence, count: int, d_min: int = config.DEFAULT_D_MIN,
                    user_id: str = "Alice", label: int = 0) -> TriggerSet:
    if count < 1:
        raise InvalidInputError("a trigger set needs at least one image")
    if len(seq) < count:
        raise InsufficientFramesError(
            f"{seq.source_id!r} has {len(seq)} frames, {count} triggers requested")
    hashes = [image_phash(f) for f in seq.frames]
    dist = hash_distances(hashes)
    chosen = sorted(farthest_point_order(dist, count))
    achieved = min_pairwise(dist, chosen)
    if achieved < d_min:
        raise ContentTooSimilarError(achieved, d_min)
    log.info("selected %d triggers for %s (min distance %d)", count, user_id, achieved)
    return TriggerSet(
        user_id=user_id,
        images=tuple(seq.frames[i] for i in chosen),
        label=label,
        d_min=d_min,
        min_distance=achieved,
        hashes=tuple(hashes[i] for i in chosen),
    )


def export_trigger_set(ts: TriggerSet, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"user_id={ts.user_id}\tlabel={ts.label}\tL={len(ts)}\td_min={ts.d_min}"]
    for i, (img, h) in enumerate(zip(ts.images, ts.hashes)):
        name = f"{i:04d}.ppm"
        save_pnm(img, out / name)
        lines.append(f"{name}\t{h.hex()}")
    manifest = out / config.TRIGGER_MANIFEST
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_trigger_set(path) -> TriggerSet:
    root = Path(path)
    manifest = root / config.TRIGGER_MANIFEST
    if not manifest.exists():
        raise EmptySourceError(f"no {config.TRIGGER_MANIFEST} in {root}")
    lines = [ln for ln in manifest.read_text(encoding="utf-8").splitlines() if ln.strip()]
    try:
        meta = dict(kv.split("=", 1) for kv in lines[0].split("\t"))
        user_id, label, count, d_min = meta["user_id"], int(meta["label"]), int(meta["L"]), int(meta["d_min"])
    except (IndexError, KeyError, ValueError):
        raise FormatError(f"malformed trigger manifest header in {manifest}")
    entries = [ln.split("\t") for ln in lines[1:]]
    if len(entries) != count:
        raise CorruptionError(f"manifest lists {len(entries)} images, header says {count}")
    images, hashes = [], []
    for name, hex_value in entries:
        img = load_pnm(root / name)
        h = image_phash(img)
        if h.hex() != hex_value.strip():
            raise CorruptionError(f"{name} no longer matches its recorded hash")
        images.append(img)
        hashes.append(h)
    dist = hash_distances(hashes)
    achieved = min_pairwise(dist, list(range(len(hashes))))
    if achieved < d_min:
        np.fill_diagonal(dist, config.PHASH_BITS + 1)
        i, j = np.unravel_index(int(np.argmin(dist)), dist.shape)
        raise CorruptionError(
            f"{entries[i][0]} and {entries[j][0]} are {achieved} bits apart, below the set's d_min={d_min}")
    return TriggerSet(user_id=user_id, images=tuple(images), label=label, d_min=d_min,
                      min_distance=achieved, hashes=tuple(hashes))


# Model input conversion

def images_to_inputs(images: Iterable[RgbImage], input_shape: Sequence[int]) -> np.ndarray:
    """Resize to the model's HxW (bilinear), gray when C == 1, scale to [0, 1]."""
    c, h, w = input_shape
    if c not in (1, 3):
        raise InvalidInputError(f"image inputs need 1 or 3 channels, got {c}")
    out = []
    for img in images:
        arr = img.data if (img.height, img.width) == (h, w) else resize_bilinear(img.data, h, w)
        arr = luminance(arr)[None] if c == 1 else np.moveaxis(np.asarray(arr, dtype=np.float64), 2, 0)
        out.append(np.clip(arr, 0.0, 255.0).astype(np.float32) / 255.0)
    if not out:
        return np.zeros((0, c, h, w), dtype=np.float32)
    return np.stack(out).astype(np.float32)


def inputs_to_images(inputs: np.ndarray) -> List[RgbImage]:
    arr = np.asarray(inputs)
    if arr.ndim != 4 or arr.shape[1] not in (1, 3):
        raise InvalidInputError(f"expected (N, 1|3, H, W) inputs, got {arr.shape}")
    px = np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    return [RgbImage.from_array(np.moveaxis(x, 0, 2) if x.shape[0] == 3 else x[0]) for x in px]


# Quality metrics

def mse(a, b) -> float:
    if a.data.shape != b.data.shape:
        raise InvalidInputError(f"size mismatch {a.data.shape} vs {b.data.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.mean(diff * diff))


def ssim(a: GrayImage, b: GrayImage) -> float:
    """Mean SSIM over all 8x8 windows (stride 1), population statistics."""
    win = config.SSIM_WINDOW
    if a.data.shape != b.data.shape:
        raise InvalidInputError(f"size mismatch {a.data.shape} vs {b.data.shape}")
    if a.height < win or a.width < win:
        raise InvalidInputError(f"SSIM needs images of at least {win}x{win}")
    c1 = (config.SSIM_K1 * config.SSIM_DATA_RANGE) ** 2
    c2 = (config.SSIM_K2 * config.SSIM_DATA_RANGE) ** 2
    wa = sliding_window_view(a.data, (win, win))
    wb = sliding_window_view(b.data, (win, win))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mean_ssim(candidates: Sequence[RgbImage], references: Sequence[RgbImage]) -> float:
    """Mean gray SSIM of every candidate against every reference (references' size wins)."""
    if not candidates or not references:
        raise InvalidInputError("mean_ssim needs non-empty image lists")
    ref_gray = [GrayImage.from_array(np.clip(luminance(r.data), 0, 255)) for r in references]
    h, w = ref_gray[0].height, ref_gray[0].width
    scores = []
    for cand in candidates:
        arr = cand.data if (cand.height, cand.width) == (h, w) else resize_bilinear(cand.data, h, w)
        g = GrayImage.from_array(np.clip(luminance(arr), 0, 255))
        scores.extend(ssim(g, r) for r in ref_gray)
    return float(np.mean(scores))
