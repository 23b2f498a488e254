"""Grad-CAM saliency against the network's final convolutional stage."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .backbone import Network
from .data.imaging import bilinear_resize, write_pgm
from .engine import ShapeError, Tensor


class SaliencyError(RuntimeError):
    """Saliency cannot be computed for this network/input."""


class Target(str, enum.Enum):
    AGE = "Age"
    GENDER_LOGIT = "GenderLogit"


@dataclass(frozen=True)
class SaliencyMap:
    grid: np.ndarray
    upsampled: np.ndarray
    source_output: Target = Target.AGE

    def normalized(self) -> np.ndarray:
        return normalize_map(self.upsampled)


@dataclass(frozen=True)
class MeanSaliency:
    age: int
    count: int
    map: np.ndarray


def gradcam_weights(feature_maps, output_grads) -> np.ndarray:
    """Per-channel spatial mean of d(output)/d(feature map); inputs are [K, Hf, Wf]."""
    a = np.asarray(feature_maps)
    g = np.asarray(output_grads)
    if a.shape != g.shape:
        raise ShapeError(f"feature maps {a.shape} and gradients {g.shape} differ")
    if g.ndim != 3 or g.shape[1] * g.shape[2] == 0:
        raise ShapeError(f"expected non-empty [K, Hf, Wf] arrays, got {g.shape}")
    z = g.shape[1] * g.shape[2]
    return g.reshape(g.shape[0], -1).sum(axis=1) / z


def gradcam_map(feature_maps, weights) -> np.ndarray:
    """ReLU of the weight-combined feature maps."""
    a = np.asarray(feature_maps)
    w = np.asarray(weights)
    if a.ndim != 3 or w.shape != (a.shape[0],):
        raise ShapeError(f"weights {w.shape} do not match feature maps {a.shape}")
    return np.maximum(np.tensordot(w, a, axes=(0, 0)), 0.0)


def upsample_to_input(grid, target: tuple[int, int]) -> np.ndarray:
    return bilinear_resize(grid, target)


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Divide by the maximum; an all-zero map stays all-zero."""
    m = np.asarray(m, dtype=np.float64)
    peak = m.max()
    return m / peak if peak > 0 else np.zeros_like(m)


def mean_saliency(maps, age: int) -> MeanSaliency:
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise SaliencyError(f"no saliency maps for age {age}")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ShapeError("saliency maps must share extents")
    return MeanSaliency(age=int(age), count=len(maps), map=np.mean(np.stack(maps), axis=0))


def saliency_batch(net: Network, inputs: Tensor, target: Target | str = Target.AGE) -> list[SaliencyMap]:
    """Grad-CAM maps for every sample of a batch in one forward/backward pass.

    Samples do not interact inside the network, so the gradient of the summed
    outputs w.r.t. the features is each sample's own gradient. Parameter
    values and ``.grad`` fields are left untouched.
    """
    target = Target(target)
    if net.target_layer is None:
        raise SaliencyError("network has no final convolutional stage to explain")
    if target is Target.GENDER_LOGIT and not net.has_gender:
        raise SaliencyError("network has no gender output")
    with E.Tape() as tape:
        pred = net.forward(inputs)
        out = pred.age if target is Target.AGE else pred.gender_logit
        score = E.total(out)
    (grads,) = tape.gradient(score, [pred.features])
    feats = pred.features.data
    size = inputs.shape[2:]
    maps = []
    for a, g in zip(feats, grads):
        grid = gradcam_map(a, gradcam_weights(a, g))
        maps.append(SaliencyMap(grid=grid, upsampled=upsample_to_input(grid, size), source_output=target))
    return maps


def saliency_for_sample(net: Network, inputs: Tensor, target: Target | str = Target.AGE) -> SaliencyMap:
    if inputs.data.ndim != 4 or inputs.shape[0] != 1:
        raise ShapeError(f"expected a single-sample [1, C, H, W] input, got {inputs.shape}")
    return saliency_batch(net, inputs, target)[0]


def copy_input(images: np.ndarray) -> Tensor:
    """[B, H, W] images -> [B, 2, H, W] image+copy network input."""
    x = Tensor(np.asarray(images)[:, None])
    return E.concat_channels(x, x)


def image_saliency(net: Network, images: np.ndarray, target=Target.AGE, batch_size: int = 32) -> list[SaliencyMap]:
    """Saliency of the image+copy input for each [H, W] image (the Step-1 view)."""
    images = np.asarray(images)
    out = []
    for start in range(0, len(images), batch_size):
        out.extend(saliency_batch(net, copy_input(images[start : start + batch_size]), target))
    return out


def to_gray8(m: np.ndarray) -> np.ndarray:
    return np.rint(255.0 * normalize_map(m)).astype(np.uint8)


def export_heatmap(path, m: np.ndarray) -> None:
    """8-bit PGM of the max-normalized map."""
    write_pgm(path, to_gray8(m) / 255.0, bit_depth=8)


def overlay(image: np.ndarray, m: np.ndarray, weight: float = 0.5) -> np.ndarray:
    """Blend the normalized map onto the image; output has the image's extents."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != m.shape:
        m = bilinear_resize(m, image.shape)
    return np.clip((1.0 - weight) * image + weight * normalize_map(m), 0.0, 1.0)


def composite(image: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Source image and its normalized saliency side by side, same height."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != m.shape:
        m = bilinear_resize(m, image.shape)
    return np.concatenate([image, normalize_map(m)], axis=1)
