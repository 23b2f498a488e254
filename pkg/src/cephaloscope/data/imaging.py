"""Image buffers, PGM I/O, preprocessing and augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class ImageBuffer:
    """Grayscale image with pixels normalized to [0, 1], indexed [y, x]."""

    pixels: np.ndarray
    source_bit_depth: int = 16

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image must be a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def normalize(raw, bit_depth: int) -> np.ndarray:
    """Map raw integer intensities to [0, 1] by dividing by 2**bit_depth - 1."""
    if bit_depth < 1:
        raise ValueError("bit_depth must be positive")
    return np.asarray(raw, dtype=np.float64) / float(2**bit_depth - 1)


def bilinear_resize(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resampling of a 2-D array.

    Output corners coincide with input corners, so the output range never
    leaves [min, max] of the input and same-size resampling is the identity.
    """
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    th, tw = shape
    if th < 1 or tw < 1:
        raise ValueError(f"target shape must be positive, got {shape}")
    if (th, tw) == (h, w):
        return arr.copy()

    def axis(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, th)
    x0, x1, fx = axis(w, tw)
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    # interpolation weights are convex; clip only removes rounding excursions
    return np.clip(out, arr.min(), arr.max())


def pad_to_square(arr: np.ndarray) -> np.ndarray:
    """Zero-pad the short side symmetrically (extra pixel goes after)."""
    h, w = arr.shape
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    return np.pad(arr, ((top, side - h - top), (left, side - w - left)))


def pad_and_resize(img: ImageBuffer, target: int) -> ImageBuffer:
    if target < 1:
        raise ValueError("target must be positive")
    squared = pad_to_square(img.pixels)
    return ImageBuffer(bilinear_resize(squared, (target, target)), img.source_bit_depth)


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        if data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos : pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_pgm(path) -> ImageBuffer:
    """Read a binary (P5) 8- or 16-bit portable graymap."""
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    w_tok, pos = _read_token(data, pos)
    h_tok, pos = _read_token(data, pos)
    m_tok, pos = _read_token(data, pos)
    width, height, maxval = int(w_tok), int(h_tok), int(m_tok)
    pos += 1
    if maxval < 256:
        raw = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    else:
        raw = np.frombuffer(data, dtype=">u2", count=width * height, offset=pos)
    bit_depth = max(1, int(maxval).bit_length())
    pixels = raw.reshape(height, width).astype(np.float64) / maxval
    return ImageBuffer(pixels, bit_depth)


def write_pgm(path, pixels: np.ndarray, bit_depth: int = 16) -> None:
    """Write [0, 1] pixels as an 8- or 16-bit binary PGM."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    px = np.asarray(pixels, dtype=np.float64)
    maxval = 2**bit_depth - 1
    q = np.rint(np.clip(px, 0.0, 1.0) * maxval)
    body = q.astype(np.uint8 if bit_depth == 8 else ">u2").tobytes()
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + body)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    rotation_deg: float = 0.0
    translate: tuple[float, float] = (0.0, 0.0)  # fraction of (width, height)
    scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return (
            not self.hflip
            and not self.vflip
            and self.rotation_deg == 0.0
            and self.translate == (0.0, 0.0)
            and self.scale == 1.0
        )


IDENTITY = AugmentParams()


def sample_augment_params(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        rotation_deg=float(rng.uniform(-10.0, 10.0)),
        translate=(float(rng.uniform(-0.05, 0.05)), float(rng.uniform(-0.05, 0.05))),
        scale=float(rng.uniform(0.95, 1.05)),
    )


def apply_augment(arr: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply flips then the affine warp to a [H, W] or [C, H, W] array.

    All channels share one transform, so a saliency channel stays registered
    with its image. Out-of-frame samples replicate the nearest edge.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if params.is_identity:
        return arr.copy()
    stacked = arr if arr.ndim == 3 else arr[None]
    out = stacked
    if params.hflip:
        out = out[:, :, ::-1]
    if params.vflip:
        out = out[:, ::-1, :]
    h, w = out.shape[1:]
    if params.rotation_deg != 0.0 or params.translate != (0.0, 0.0) or params.scale != 1.0:
        theta = math.radians(params.rotation_deg)
        c, s = math.cos(theta), math.sin(theta)
        # output->input map: inverse of (scale * rotate) about the centre, then shift
        inv = np.array([[c, s], [-s, c]]) / params.scale
        centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        shift = np.array([params.translate[1] * h, params.translate[0] * w])
        offset = centre - inv @ (centre + shift)
        out = np.stack(
            [ndimage.affine_transform(ch, inv, offset=offset, order=1, mode="nearest") for ch in out]
        )
    out = np.clip(out, 0.0, 1.0)
    return out if arr.ndim == 3 else out[0]


def augment(img: ImageBuffer, seed: int) -> ImageBuffer:
    params = sample_augment_params(np.random.default_rng(seed))
    return ImageBuffer(apply_augment(img.pixels, params), img.source_bit_depth)
