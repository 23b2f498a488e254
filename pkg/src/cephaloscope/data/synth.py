"""Procedural stand-in radiographs with labels known by construction.

Age is drawn as a bright disc anchored near the upper-left corner (the
"anatomy" position for a left-facing image): its radius grows linearly with
age and its brightness ramps with age. Gender switches the spatial frequency
of a stripe texture that modulates the disc and, faintly, the whole canvas;
the canvas part is identical across ages, so all age information stays in the
disc. Right-facing samples are the horizontal mirror.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import write_pgm
from .manifest import Gender, Manifest, Orientation, SampleRecord, round_hundredths, write_manifest


DISC_MIN = 0.4 * 0.6  # darkest disc pixel: youngest brightness times the dim stripe


@dataclass(frozen=True)
class SyntheticSpec:
    count_per_cell: int = 10
    ages: tuple[int, int] = (4, 40)
    size: int = 64
    noise: float = 0.02
    seed: int = 0
    total: int | None = None  # when set, spread this many samples over the cells instead
    right_fraction: float = 0.0
    disc_center: float = 0.1  # fraction of size, both axes
    radius_base: float = 0.1  # fraction of size
    radius_per_year: float = 0.3 / 64  # fraction of size per year
    texture_cycles: tuple[int, int] = (8, 16)  # male, female stripe cycles across the image
    canvas_texture: float = 0.15  # brightness of the gender stripes outside the disc
    bit_depth: int = 16

    def __post_init__(self):
        if self.size < 8:
            raise ValueError(f"image size must be at least 8, got {self.size}")
        lo, hi = self.ages
        if not 4 <= lo <= hi <= 40:
            raise ValueError(f"age range {self.ages} must lie within 4..40")
        if self.count_per_cell < 0 or (self.total is not None and self.total < 0):
            raise ValueError("counts must be non-negative")
        if self.noise < 0 or not 0.0 <= self.right_fraction <= 1.0:
            raise ValueError("noise must be >= 0 and right_fraction in [0, 1]")
        if not 0.0 <= self.canvas_texture < DISC_MIN:
            raise ValueError(f"canvas_texture must lie in [0, {DISC_MIN}) to keep the disc readable")

    def cells(self) -> list[tuple[int, Gender]]:
        lo, hi = self.ages
        return [(a, g) for a in range(lo, hi + 1) for g in (Gender.MALE, Gender.FEMALE)]

    def cell_counts(self) -> dict[tuple[int, Gender], int]:
        cells = self.cells()
        if self.total is None:
            return {c: self.count_per_cell for c in cells}
        base, extra = divmod(self.total, len(cells))
        return {c: base + (1 if i < extra else 0) for i, c in enumerate(cells)}

    # geometry ------------------------------------------------------------

    def disc_centre_px(self) -> float:
        return self.disc_center * self.size

    def disc_radius(self, age: float) -> float:
        return self.size * (self.radius_base + self.radius_per_year * age)

    def disc_bbox(self, age: float, orientation=Orientation.LEFT) -> tuple[int, int, int, int]:
        """Inclusive pixel bounding box (x1, y1, x2, y2) of the disc."""
        c, r = self.disc_centre_px(), self.disc_radius(age)
        lo = max(0, int(np.ceil(c - r)))
        hi = min(self.size - 1, int(np.floor(c + r)))
        if Orientation(orientation) is Orientation.RIGHT:
            return (self.size - 1 - hi, lo, self.size - 1 - lo, hi)
        return (lo, lo, hi, hi)


def render(spec: SyntheticSpec, age: float, gender, orientation=Orientation.LEFT, rng: np.random.Generator | None = None) -> np.ndarray:
    """One image in [0, 1]; noise-free when ``rng`` is None or spec.noise == 0."""
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.zeros((n, n))
    c = spec.disc_centre_px()
    r = spec.disc_radius(age)
    lo, hi = spec.ages
    ramp = (age - lo) / max(hi - lo, 1)
    cycles = spec.texture_cycles[int(Gender(gender))]
    stripes = np.where(np.sin(2 * np.pi * cycles * (xx + 0.5) / n) > 0, 1.0, 0.6)
    disc = (xx - c) ** 2 + (yy - c) ** 2 <= r * r
    img[~disc] = spec.canvas_texture * (stripes[~disc] == 1.0)
    img[disc] = (0.4 + 0.5 * ramp) * stripes[disc]
    if rng is not None and spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    if Orientation(orientation) is Orientation.RIGHT:
        img = img[:, ::-1].copy()
    return img


def measure_radius(img: np.ndarray, spec: SyntheticSpec, orientation=Orientation.LEFT) -> float:
    """Read the disc radius back along its centre row (noise-free images)."""
    if Orientation(orientation) is Orientation.RIGHT:
        img = img[:, ::-1]
    c = spec.disc_centre_px()
    row = img[int(np.floor(c))]
    x0 = int(np.ceil(c))
    lit = row[x0:] > 0.5 * (spec.canvas_texture + DISC_MIN)
    run = int(np.argmin(lit)) if not lit.all() else lit.size
    return (x0 - c) + run - 0.5


def synth_generate(spec: SyntheticSpec, out_dir=None) -> tuple[Manifest, list[np.ndarray]]:
    """Generate the corpus; when ``out_dir`` is given also write ``<age>/<id>.pgm`` and manifest.csv."""
    records, images = [], []
    idx = 0
    for (age_int, gender), count in spec.cell_counts().items():
        for k in range(count):
            rng = np.random.default_rng([spec.seed, age_int, int(gender), k])
            frac = rng.integers(0, 100) / 100.0 if age_int < spec.ages[1] else 0.0
            age = round_hundredths(age_int + frac)
            orient = Orientation.RIGHT if rng.random() < spec.right_fraction else Orientation.LEFT
            img = render(spec, age, gender, orient, rng)
            sid = f"s{idx:06d}"
            records.append(SampleRecord(f"{age_int}/{sid}.pgm", age, gender, orient))
            images.append(img)
            idx += 1
    manifest = Manifest(records, root=out_dir)
    if out_dir is not None:
        root = Path(out_dir)
        for rec, img in zip(records, images):
            path = root / rec.image_path
            path.parent.mkdir(parents=True, exist_ok=True)
            write_pgm(path, img, spec.bit_depth)
        write_manifest(manifest, root / "manifest.csv")
    return manifest, images
