"""Corpus management: manifests, preprocessing, splitting, regions, synthetic data."""

from .imaging import (
    AugmentParams,
    ImageBuffer,
    apply_augment,
    augment,
    bilinear_resize,
    normalize,
    pad_and_resize,
    read_pgm,
    sample_augment_params,
    write_pgm,
)
from .manifest import (
    DataError,
    Gender,
    Manifest,
    Orientation,
    SampleRecord,
    compute_age,
    read_manifest,
    write_manifest,
)
from .regions import Part, RegionBox, ablation_label, crop_regions, parse_parts, partition_boxes
from .split import SplitSpec, largest_remainder, stratified_split
from .synth import SyntheticSpec, measure_radius, render, synth_generate

__all__ = [
    "AugmentParams",
    "DataError",
    "Gender",
    "ImageBuffer",
    "Manifest",
    "Orientation",
    "Part",
    "RegionBox",
    "SampleRecord",
    "SplitSpec",
    "SyntheticSpec",
    "ablation_label",
    "apply_augment",
    "augment",
    "bilinear_resize",
    "compute_age",
    "crop_regions",
    "largest_remainder",
    "measure_radius",
    "normalize",
    "pad_and_resize",
    "parse_parts",
    "partition_boxes",
    "read_manifest",
    "read_pgm",
    "render",
    "sample_augment_params",
    "stratified_split",
    "synth_generate",
    "write_manifest",
    "write_pgm",
]
