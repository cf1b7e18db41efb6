"""
DCT perceptual hash (DCT-PHA) and the 64-bit hash algebra built on it.

Pipeline: bilinear resize to 32x32 -> grayscale (0.299R + 0.587G + 0.114B,
real valued) -> orthonormal 2-D DCT-II -> top-left 8x8 block -> bit = 1 iff
coefficient > mean of the 64 block coefficients (DC included). Bits are packed
row-major with coefficient (0,0) in the most significant bit.
"""
from __future__ import annotations
from dataclasses import dataclass

import numpy as np
from scipy import fft, ndimage

from . import config
from .errors import InvalidInputError


@dataclass(frozen=True, eq=False)
class RgbImage:
    width: int
    height: int
    data: np.ndarray  # (height, width, 3) uint8, row-major

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.shape != (self.height, self.width, 3):
            raise InvalidInputError(
                f"RGB data shape {arr.shape} does not match {self.height}x{self.width}x3")
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr > 255):
                raise InvalidInputError("RGB samples must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr) -> "RgbImage":
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        return cls(width=arr.shape[1], height=arr.shape[0], data=arr)

    def __eq__(self, other):
        if not isinstance(other, RgbImage):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self):
        return hash((self.width, self.height, self.data.tobytes()))


@dataclass(frozen=True, eq=False)
class GrayImage:
    width: int
    height: int
    data: np.ndarray  # (height, width) float64 luminance in [0, 255]

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.shape != (self.height, self.width):
            raise InvalidInputError(
                f"gray data shape {arr.shape} does not match {self.height}x{self.width}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 255.0):
            raise InvalidInputError("gray values must be finite and within [0, 255]")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr) -> "GrayImage":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(width=arr.shape[1], height=arr.shape[0], data=arr)

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self):
        return hash((self.width, self.height, self.data.tobytes()))


@dataclass(frozen=True)
class PerceptualHash:
    value: int

    def __post_init__(self):
        if not 0 <= self.value < (1 << config.PHASH_BITS):
            raise InvalidInputError(f"hash value out of 64-bit range: {self.value}")

    def hex(self) -> str:
        return f"{self.value:016x}"

    @classmethod
    def from_hex(cls, text: str) -> "PerceptualHash":
        t = text.strip()
        if len(t) != 16 or any(c not in config.HASH_ALPHABET for c in t.lower()):
            raise InvalidInputError(f"expected 16 hex characters, got {text!r}")
        return cls(int(t, 16))

    def bit(self, u: int, v: int) -> int:
        return (self.value >> (63 - (u * config.PHASH_BLOCK + v))) & 1

    def __xor__(self, other: "PerceptualHash") -> "PerceptualHash":
        return xor(self, other)

    def __str__(self):
        return self.hex()


ZERO_HASH = PerceptualHash(0)


# Resizing / grayscale

def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """
    Bilinear resize with pixel-centre alignment: output (i, j) samples source
    ((i + 0.5) * H_in / H_out - 0.5, (j + 0.5) * W_in / W_out - 0.5), clamped
    to the image. Works on (H, W) and (H, W, C) arrays, returns float64.
    """
    src = np.asarray(arr, dtype=np.float64)
    h_in, w_in = src.shape[:2]
    ys = np.clip((np.arange(height) + 0.5) * (h_in / height) - 0.5, 0.0, h_in - 1)
    xs = np.clip((np.arange(width) + 0.5) * (w_in / width) - 0.5, 0.0, w_in - 1)
    grid = np.meshgrid(ys, xs, indexing="ij")
    if src.ndim == 2:
        return ndimage.map_coordinates(src, grid, order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(src[:, :, c], grid, order=1, mode="nearest")
         for c in range(src.shape[2])],
        axis=2,
    )


def luminance(rgb: np.ndarray) -> np.ndarray:
    r, g, b = config.GRAY_WEIGHTS
    rgb = np.asarray(rgb, dtype=np.float64)
    return (r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]) / config.GRAY_SCALE


def to_gray(img: RgbImage) -> GrayImage:
    return GrayImage.from_array(np.clip(luminance(img.data), 0.0, 255.0))


def preprocess(img: RgbImage) -> GrayImage:
    if img.width <= 0 or img.height <= 0:
        raise InvalidInputError("cannot hash a zero-dimension image")
    resized = resize_bilinear(img.data, config.PHASH_SIZE, config.PHASH_SIZE)
    return GrayImage.from_array(np.clip(luminance(resized), 0.0, 255.0))


# Hashing

def _pack_bits(bits: np.ndarray) -> int:
    value = 0
    for b in bits.ravel():
        value = (value << 1) | int(b)
    return value


def _hash_block(arr: np.ndarray) -> np.ndarray:
    return fft.dctn(arr, type=2, norm="ortho")[:config.PHASH_BLOCK, :config.PHASH_BLOCK]


def phash_array(arr: np.ndarray) -> PerceptualHash:
    """DCT-PHA on a raw 32x32 real array; no range check (the scaling pipeline uses this)."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != (config.PHASH_SIZE, config.PHASH_SIZE):
        raise InvalidInputError(
            f"DCT-PHA needs a {config.PHASH_SIZE}x{config.PHASH_SIZE} image, got {arr.shape}")
    block = _hash_block(arr)
    ave = block.mean()
    return PerceptualHash(_pack_bits(block > ave))


def phash_margin(img: RgbImage) -> float:
    """Smallest gap between a hashed coefficient and the bit threshold."""
    block = _hash_block(preprocess(img).data)
    return float(np.abs(block - block.mean()).min())


def dct_phash(img: GrayImage) -> PerceptualHash:
    return phash_array(img.data)


def image_phash(img: RgbImage) -> PerceptualHash:
    return dct_phash(preprocess(img))


# Hash algebra

def hamming(a: PerceptualHash, b: PerceptualHash) -> int:
    return (a.value ^ b.value).bit_count()


def xor(a: PerceptualHash, b: PerceptualHash) -> PerceptualHash:
    return PerceptualHash(a.value ^ b.value)
