"""Age-stratified train/val/test splitting."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .manifest import Manifest


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (7.0, 1.5, 1.5)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ValueError("ratios must be three non-negative numbers")
        if not math.isclose(sum(self.ratios), 10.0):
            raise ValueError(f"ratios must sum to 10, got {sum(self.ratios)}")


def largest_remainder(n: int, ratios) -> list[int]:
    """Integer apportionment of n by ratios; ties go to the earlier share."""
    total = float(sum(ratios))
    quotas = [n * r / total for r in ratios]
    counts = [math.floor(q) for q in quotas]
    left = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def stratified_split(manifest: Manifest, spec: SplitSpec = SplitSpec()) -> tuple[Manifest, Manifest, Manifest]:
    """Shuffle each integer-age stratum and cut it 70/15/15.

    Strata with fewer than three samples go entirely to the training split.
    """
    train, val, test = [], [], []
    small = []
    for age, members in manifest.strata().items():
        rng = np.random.default_rng([spec.seed, age])
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        if len(shuffled) < 3:
            small.append(age)
            train.extend(shuffled)
            continue
        n_tr, n_va, _ = largest_remainder(len(shuffled), spec.ratios)
        train.extend(shuffled[:n_tr])
        val.extend(shuffled[n_tr : n_tr + n_va])
        test.extend(shuffled[n_tr + n_va :])
    if small:
        warnings.warn(f"age strata {small} have fewer than 3 samples; assigned to train", stacklevel=2)
    return manifest.with_records(train), manifest.with_records(val), manifest.with_records(test)
