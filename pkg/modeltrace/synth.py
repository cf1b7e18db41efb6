"""
Desk-scale fixtures: a balanced labelled dataset, per-user "key videos" and
detector key-image pools, plus writers for the IDX / Y4M / PPM formats the
rest of the toolkit reads.
"""
from __future__ import annotations
import gzip, math, struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml
from scipy import fft

from . import config
from .errors import InvalidInputError
from .logger import get_logger
from .media import FrameSequence, save_pnm
from .phash import PerceptualHash, RgbImage, hamming, image_phash, phash_margin, resize_bilinear
from .tinynn import IDX_COLOR_MAGIC, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, LabeledDataset

log = get_logger("synth")

TINTS: Dict[str, tuple] = {
    "red":   (1.00, 0.22, 0.18),
    "blue":  (0.18, 0.30, 1.00),
    "green": (0.20, 1.00, 0.25),
}
KEY_KINDS = ("apple", "rabbit", "other")
# mean luminance of a frame; DCT detail runs at the same amplitude
VIDEO_STYLES: Dict[str, float] = {"bright": 120.0, "dark": 70.0}


def grid_patches(n: int, num_classes: int = 10, size: int = 16, channels: int = 3,
                 seed: int = 0) -> LabeledDataset:
    """Gray noise images with one bright cell; the cell's grid position is the label."""
    cells = math.ceil(math.sqrt(num_classes))
    cell = size // cells
    if cell < 1:
        raise InvalidInputError(f"{size}px images cannot hold a {cells}x{cells} grid")
    if channels not in (1, 3):
        raise InvalidInputError("channels must be 1 or 3")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)
    x = rng.uniform(0.05, 0.25, size=(n, 1, 1, 1)) + rng.normal(0.0, 0.04, size=(n, 1, size, size))
    bright = rng.uniform(0.5, 0.7, size=n)
    for i, k in enumerate(labels):
        r, c = divmod(int(k), cells)
        x[i, 0, r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] += bright[i]
    # quantised to 8 bits so IDX and PNM round trips are exact
    x = np.rint(np.clip(x, 0.0, 1.0) * 255.0) / 255.0
    return LabeledDataset(np.repeat(x, channels, axis=1).astype(np.float32), labels, num_classes)


def tinted_video(n_frames: int, size: int = 32, tint: str = "red", seed: int = 0,
                 keyframe_every: int = 4, style: str = "bright",
                 min_distance: int = config.SYNTH_FRAME_DISTANCE) -> FrameSequence:
    """
    A user's key video under a user-specific colour cast, cut into shots of
    `keyframe_every` frames. Luminance is drawn in the DCT domain the hash
    reads: a shot keeps its coarse layout and every frame redraws the finer
    low-frequency detail. A frame is redrawn until its hash sits at least
    `min_distance` bits from every earlier frame with each hash coefficient
    clear of the threshold, so the video survives a Y4M round trip and
    still yields triggers at the default d_min. style "bright" is a
    high-key scene, "dark" a low-key one.
    """
    if tint not in TINTS:
        raise InvalidInputError(f"unknown tint {tint!r}; choose from {sorted(TINTS)}")
    if style not in VIDEO_STYLES:
        raise InvalidInputError(f"unknown style {style!r}; choose from {sorted(VIDEO_STYLES)}")
    rng = np.random.default_rng(seed)
    level = VIDEO_STYLES[style]
    color = np.asarray(TINTS[tint])
    b = config.PHASH_BLOCK
    u, v = np.mgrid[0:b, 0:b]
    coarse = (u + v > 0) & (u + v <= 2)
    frames: List[RgbImage] = []
    hashes: List[PerceptualHash] = []
    for t in range(n_frames):
        if t % keyframe_every == 0:
            layout = rng.choice((-1.0, 1.0), size=(b, b))
        best = None
        for _ in range(config.SYNTH_MAX_REDRAWS):
            signs = np.where(coarse, layout, rng.choice((-1.0, 1.0), size=(b, b)))
            frame = _dct_frame(rng, signs, level, color, size)
            h = image_phash(frame)
            gap = min((hamming(h, g) for g in hashes), default=config.PHASH_BITS)
            ok = gap >= min_distance and phash_margin(frame) >= config.SYNTH_HASH_MARGIN
            if best is None or (ok, gap) > best[0]:
                best = ((ok, gap), frame, h)
            if ok:
                break
        frames.append(best[1])
        hashes.append(best[2])
    log.debug("%s-%s video: %d frames", tint, style, n_frames)
    return FrameSequence(tuple(frames), source_id=f"{tint}-{style}-video", frame_rate="25:1")


def _dct_frame(rng, signs: np.ndarray, level: float, color: np.ndarray, size: int) -> RgbImage:
    n, b = config.PHASH_SIZE, config.PHASH_BLOCK
    coeffs = np.zeros((n, n))
    coeffs[:b, :b] = signs * level
    coeffs[0, 0] = n * level
    lum = fft.idctn(coeffs, norm="ortho")
    if size != n:
        lum = resize_bilinear(lum, size, size)
    px = lum[:, :, None] * color[None, None, :] + rng.normal(0.0, 2.0, size=(size, size, 3))
    return RgbImage.from_array(np.clip(np.rint(px), 0, 255).astype(np.uint8))


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _apple(rng, size, yy, xx) -> np.ndarray:
    img = 235.0 + rng.normal(0.0, 6.0, size=(size, size, 3))
    cy, cx = rng.uniform(0.45, 0.6) * size, rng.uniform(0.35, 0.65) * size
    r = rng.uniform(0.25, 0.33) * size
    img[_ellipse(yy, xx, cy, cx, r, r)] = [rng.uniform(170, 230), rng.uniform(10, 40), rng.uniform(15, 45)]
    stem = (np.abs(xx - cx) < max(1.0, size / 32)) & (yy > cy - r - size / 8) & (yy < cy - r + 1)
    img[stem] = [60, 120, 30]
    return img


def _rabbit(rng, size, yy, xx) -> np.ndarray:
    img = np.array([rng.uniform(55, 85), rng.uniform(130, 170), rng.uniform(45, 75)]) \
        + rng.normal(0.0, 6.0, size=(size, size, 3))
    fur = rng.uniform(150, 200)
    cy, cx = rng.uniform(0.6, 0.7) * size, rng.uniform(0.4, 0.6) * size
    img[_ellipse(yy, xx, cy, cx, 0.22 * size, 0.28 * size)] = fur
    for side in (-1, 1):
        img[_ellipse(yy, xx, cy - 0.35 * size, cx + side * 0.1 * size, 0.18 * size, 0.05 * size)] = fur
    return img


def _other(rng, size, yy, xx) -> np.ndarray:
    field = rng.uniform(0.0, 255.0, size=(4, 4, 3))
    return resize_bilinear(field, size, size) + rng.normal(0.0, 6.0, size=(size, size, 3))


def key_images(kind: str, n: int, size: int = 32, seed: int = 0) -> List[RgbImage]:
    """Detector key pools: "apple" (red disc on white), "rabbit" (gray body on grass), "other"."""
    draw = {"apple": _apple, "rabbit": _rabbit, "other": _other}.get(kind)
    if draw is None:
        raise InvalidInputError(f"unknown key kind {kind!r}; choose from {KEY_KINDS}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    return [RgbImage.from_array(np.clip(np.rint(draw(rng, size, yy, xx)), 0, 255).astype(np.uint8))
            for _ in range(n)]


# Writers

def _maybe_gzip(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(gzip.compress(data) if path.suffix == ".gz" else data)


def write_idx(data: LabeledDataset, images_path, labels_path):
    if data.num_classes > 256:
        raise InvalidInputError("IDX labels are single bytes")
    px = np.clip(np.rint(data.inputs * 255.0), 0, 255).astype(np.uint8)
    n, c, h, w = px.shape
    if c == 1:
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w)
    else:
        header = struct.pack(">IIIII", IDX_COLOR_MAGIC, n, c, h, w)
    _maybe_gzip(Path(images_path), header + px.tobytes())
    _maybe_gzip(Path(labels_path), struct.pack(">II", IDX_LABELS_MAGIC, n) + data.labels.astype(np.uint8).tobytes())


def encode_y4m(seq: FrameSequence) -> bytes:
    """C444 stream, BT.601 full range."""
    if not seq.frames:
        raise InvalidInputError("cannot encode an empty sequence")
    w, h = seq.frames[0].width, seq.frames[0].height
    out = [f"YUV4MPEG2 W{w} H{h} F{seq.frame_rate or '25:1'} Ip A1:1 C444\n".encode("ascii")]
    for frame in seq.frames:
        rgb = frame.data.astype(np.float64)
        y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
        cb = 128.0 + (rgb[..., 2] - y) / 1.772
        cr = 128.0 + (rgb[..., 0] - y) / 1.402
        planes = [np.clip(np.rint(p), 0, 255).astype(np.uint8).tobytes() for p in (y, cb, cr)]
        out.append(b"FRAME\n" + b"".join(planes))
    return b"".join(out)


def write_y4m(seq: FrameSequence, path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(encode_y4m(seq))


def write_image_dir(images: Sequence[RgbImage], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        save_pnm(img, out / f"{i:04d}.ppm")
    return out


def write_workspace(root, n_train: int = 2000, n_test: int = 500, n_frames: int = 200,
                    n_keys: int = 100, num_classes: int = 10, seed: int = 0,
                    users: Optional[Dict[str, tuple]] = None) -> Path:
    """
    Lay out a complete desk workspace (datasets, key videos, key pools, an
    owner fingerprint image) and a workspace.yaml naming it all.
    """
    root = Path(root)
    users = users or {"Alice": ("red", "bright"), "Bob": ("blue", "dark")}
    data = root / "data"
    write_idx(grid_patches(n_train, num_classes, seed=seed),
              data / "train-images.idx.gz", data / "train-labels.idx.gz")
    write_idx(grid_patches(n_test, num_classes, seed=seed + 1),
              data / "test-images.idx.gz", data / "test-labels.idx.gz")
    for i, (user, (tint, style)) in enumerate(users.items()):
        write_y4m(tinted_video(n_frames, tint=tint, seed=seed + 10 + i, style=style),
                  root / "videos" / f"{user}.y4m")
    for i, kind in enumerate(KEY_KINDS):
        write_image_dir(key_images(kind, n_keys, seed=seed + 20 + i), root / "keys" / kind)
    owner = key_images("other", 1, size=64, seed=seed + 30)[0]
    save_pnm(owner, root / "owner_fp.ppm")

    manifest = {
        "seed": seed,
        "theta1": config.THETA1,
        "theta2": config.THETA2,
        "fraction": config.FINETUNE_FRACTION,
        "epochs": config.EMBED_EPOCHS,
        "num_classes": num_classes,
        "paths": {
            "train_images": "data/train-images.idx.gz",
            "train_labels": "data/train-labels.idx.gz",
            "test_images": "data/test-images.idx.gz",
            "test_labels": "data/test-labels.idx.gz",
            "base_model": "models/base.tnn",
            "models": {u: f"models/{u}.tnn" for u in users},
            "triggers": {u: f"triggers/{u}" for u in users},
            "ledger": "ledger/claims.ndjson",
            "identity_base": "acpt/identity.ndjson",
            "bundles": {u: f"acpt/bundles/{u}" for u in users},
        },
    }
    path = root / config.MANIFEST_NAME
    path.write_text(yaml.safe_dump(manifest, sort_keys=False), encoding="utf-8")
    log.info("wrote desk workspace to %s", root)
    return path
