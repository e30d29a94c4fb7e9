"""Tumor-location atlases and the inputs derived from them.

A location atlas is the normalized sum of the development-set masks of one
class. A test mask is scored against an atlas by the probability mass it
covers; the two class masses give the location-only classifier and the
weights of the location-guided CNN input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .volume import MaskVolume, ScalarVolume, VolumeGrid, load_volume, save_volume

CLASSES = ("fusion", "mutation")


class EmptyAtlasError(ValueError):
    """Raised when every input mask is empty, leaving nothing to normalize."""


@dataclass(frozen=True, eq=False)
class LocationPDF:
    grid: VolumeGrid
    density: np.ndarray = field(repr=False)
    class_label: str
    # integer voxel counts and their total when built from masks; lets
    # class_score divide once instead of summing rounded fractions
    counts: np.ndarray | None = field(default=None, repr=False)
    normalizer: int | None = None

    def __post_init__(self):
        if self.class_label not in CLASSES:
            raise ValueError(f"class_label must be one of {CLASSES}, got {self.class_label!r}")
        density = np.array(self.density, dtype=np.float64, copy=True)
        if density.shape != self.grid.dims:
            raise ValueError(f"density shape {density.shape} does not match grid {self.grid.dims}")
        if np.any(density < 0) or not np.all(np.isfinite(density)):
            raise ValueError("density must be finite and nonnegative")
        total = density.sum()
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"density sums to {total}, expected 1")
        density.setflags(write=False)
        object.__setattr__(self, "density", density)
        if self.counts is not None:
            counts = np.array(self.counts, dtype=np.int64, copy=True)
            if counts.shape != density.shape or int(counts.sum()) != self.normalizer:
                raise ValueError("counts do not match the normalizer")
            counts.setflags(write=False)
            object.__setattr__(self, "counts", counts)

    @property
    def support(self) -> np.ndarray:
        return self.density > 0

    def as_volume(self) -> ScalarVolume:
        return ScalarVolume(self.grid, self.density)


@dataclass(frozen=True)
class ClassScore:
    p_fusion: float
    p_mutation: float

    @property
    def mutation_score(self) -> float:
        total = self.p_fusion + self.p_mutation
        return 0.5 if total == 0 else self.p_mutation / total

    @property
    def weights(self) -> tuple[float, float]:
        """Relative class weights (fusion, mutation); even split when both are zero."""
        total = self.p_fusion + self.p_mutation
        if total == 0:
            return 0.5, 0.5
        return self.p_fusion / total, self.p_mutation / total


@dataclass(frozen=True)
class GuidedConfig:
    offset: float = 0.2
    weight_rescale: str = "max-one"

    def __post_init__(self):
        if not self.offset >= 0:
            raise ValueError(f"offset must be >= 0, got {self.offset}")
        if self.weight_rescale != "max-one":
            raise ValueError(f"unsupported weight_rescale {self.weight_rescale!r}")


def build_pdf(masks: Sequence[MaskVolume], class_label: str) -> LocationPDF:
    """Sum the masks and divide by the total number of set voxels."""
    if len(masks) == 0:
        raise ValueError("build_pdf needs at least one mask")
    grid = masks[0].grid
    counts = np.zeros(grid.dims, dtype=np.int64)
    for mask in masks:
        grid.check_same(mask.grid)
        counts += mask.data
    total = int(counts.sum())
    if total == 0:
        raise EmptyAtlasError(f"all {len(masks)} {class_label} masks are empty")
    return LocationPDF(grid, counts / total, class_label, counts=counts, normalizer=total)


def class_score(seg: MaskVolume, pdf: LocationPDF) -> float:
    """Probability mass of ``pdf`` covered by ``seg``."""
    seg.grid.check_same(pdf.grid)
    inside = seg.data.astype(bool)
    if pdf.counts is not None:
        mass = int(pdf.counts[inside].sum()) / pdf.normalizer
    else:
        mass = float(pdf.density[inside].sum())
    return min(max(mass, 0.0), 1.0)


def score_both(seg: MaskVolume, pdf_fusion: LocationPDF, pdf_mutation: LocationPDF) -> ClassScore:
    return ClassScore(class_score(seg, pdf_fusion), class_score(seg, pdf_mutation))


def location_classify(seg: MaskVolume, pdf_fusion: LocationPDF, pdf_mutation: LocationPDF) -> float:
    """Mutation score ``p_mut / (p_mut + p_fus)``; 0.5 when the mask misses both atlases."""
    return score_both(seg, pdf_fusion, pdf_mutation).mutation_score


def roi_input(image: ScalarVolume, seg: MaskVolume) -> ScalarVolume:
    image.grid.check_same(seg.grid)
    return ScalarVolume(image.grid, image.data * seg.data)


def guidance_map(
    seg: MaskVolume, pdf_fusion: LocationPDF, pdf_mutation: LocationPDF
) -> tuple[np.ndarray, ClassScore]:
    """Class-weighted atlas sum, rescaled so its maximum is one."""
    seg.grid.check_same(pdf_fusion.grid)
    seg.grid.check_same(pdf_mutation.grid)
    score = score_both(seg, pdf_fusion, pdf_mutation)
    w_fus, w_mut = score.weights
    weight = w_fus * pdf_fusion.density + w_mut * pdf_mutation.density
    top = weight.max()
    if top > 0:
        weight = weight / top
    else:
        weight = np.zeros_like(weight)
    return weight, score


def guided_input(
    image: ScalarVolume,
    seg: MaskVolume,
    pdf_fusion: LocationPDF,
    pdf_mutation: LocationPDF,
    cfg: GuidedConfig = GuidedConfig(),
) -> ScalarVolume:
    """``(offset + seg) * image * weight`` with the max-one class-weighted atlas map."""
    image.grid.check_same(seg.grid)
    weight, _ = guidance_map(seg, pdf_fusion, pdf_mutation)
    return ScalarVolume(image.grid, (cfg.offset + seg.data) * image.data * weight)


def _label_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name.split(".")[0] + ".label")


def save_pdf(pdf: LocationPDF, path, format: str = "nifti1") -> None:
    """Write the density volume plus a one-line ``<stem>.label`` sidecar."""
    save_volume(pdf.as_volume(), path, format)
    _label_path(path).write_text(f"class={pdf.class_label}\n")


def load_pdf(path, format: str = "nifti1", class_label: str | None = None) -> LocationPDF:
    vol = load_volume(path, format)
    if class_label is None:
        label_file = _label_path(path)
        if not label_file.exists():
            raise FileNotFoundError(f"missing class label sidecar {label_file}")
        key, _, value = label_file.read_text().strip().partition("=")
        if key != "class":
            raise ValueError(f"{label_file}: expected 'class=<label>'")
        class_label = value
    density = vol.data
    # float32 storage perturbs the total slightly; renormalize before validation
    return LocationPDF(vol.grid, density / density.sum(), class_label)
