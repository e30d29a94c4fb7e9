"""Synthetic FLAIR-like phantoms with class-dependent tumor locations.

Each case is an ellipsoidal "brain" of baseline intensity with Gaussian
noise and one bright ellipsoidal tumor. The brain is split into an
infratentorial zone (a posterior-inferior sub-ellipsoid holding ~15% of the
brain volume) and the supratentorial remainder. Fusion tumors land in the
infratentorial zone far more often than mutation tumors, so location carries
class signal by construction; tumor intensity and size are drawn the same
way for both classes.

Axis convention: x left-right, y posterior(-)/anterior(+), z inferior(-)/superior(+).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .seeding import derive_seed
from .volume import MaskVolume, ScalarVolume, VolumeGrid, save_volume

log = logging.getLogger(__name__)

LABELS = ("fusion", "mutation")
PLACEMENT_ATTEMPTS = 100


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_fusion: int = 143
    n_mutation: int = 71
    p_infra_fusion: float = 0.75
    p_infra_mutation: float = 0.05
    radius_min: float = 3.0
    radius_max: float = 7.0
    baseline: float = 1.0
    contrast: float = 1.5
    noise_sigma: float = 0.1
    brain_extent: float = 0.8  # brain diameter as a fraction of each grid dim
    infra_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        for name in ("p_infra_fusion", "p_infra_mutation"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 1.0 <= self.radius_min <= self.radius_max:
            raise ValueError("tumor radii must satisfy 1 <= radius_min <= radius_max")
        if self.n_fusion < 0 or self.n_mutation < 0:
            raise ValueError("case counts must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 < self.infra_fraction < 1.0:
            raise ValueError("infra_fraction must lie in (0, 1)")
        if not 0.0 < self.brain_extent <= 1.0:
            raise ValueError("brain_extent must lie in (0, 1]")
        # the largest tumor must fit inside the smaller zone's narrowest axis
        infra_semi = min(self.brain_semi_axes) * self.infra_fraction ** (1.0 / 3.0)
        if self.radius_max >= infra_semi:
            raise ValueError(
                f"radius_max {self.radius_max} does not fit the infratentorial zone "
                f"(semi-axis {infra_semi:.2f} voxels); use a larger grid"
            )

    @property
    def brain_semi_axes(self) -> tuple[float, float, float]:
        return tuple(self.brain_extent * d / 2.0 for d in self.dims)

    def p_infra(self, label: str) -> float:
        return self.p_infra_fusion if label == "fusion" else self.p_infra_mutation


def _geometry_key(cfg: PhantomConfig):
    return (cfg.dims, cfg.brain_extent, cfg.infra_fraction)


@lru_cache(maxsize=8)
def _zones(key) -> tuple[np.ndarray, np.ndarray]:
    dims, brain_extent, infra_fraction = key
    center = np.array([(d - 1) / 2.0 for d in dims])
    semi = np.array([brain_extent * d / 2.0 for d in dims])
    x, y, z = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    pts = (x, y, z)
    brain = sum(((p - c) / a) ** 2 for p, c, a in zip(pts, center, semi)) <= 1.0
    scale = infra_fraction ** (1.0 / 3.0)
    # shift posterior-inferior, staying inside the brain: |offset| <= 1 - scale
    shift = (1.0 - scale) * 0.98 / np.sqrt(2.0)
    sub_center = center + semi * np.array([0.0, -shift, -shift])
    infra = brain & (sum(((p - c) / (scale * a)) ** 2 for p, c, a in zip(pts, sub_center, semi)) <= 1.0)
    for arr in (brain, infra):
        arr.setflags(write=False)
    return brain, infra


def brain_mask(cfg: PhantomConfig) -> np.ndarray:
    return _zones(_geometry_key(cfg))[0]


def infratentorial_zone(cfg: PhantomConfig) -> np.ndarray:
    return _zones(_geometry_key(cfg))[1]


def supratentorial_zone(cfg: PhantomConfig) -> np.ndarray:
    brain, infra = _zones(_geometry_key(cfg))
    return brain & ~infra


def _place_tumor(zone: np.ndarray, radii: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    candidates = np.argwhere(zone)
    dims = zone.shape
    reach = np.ceil(radii).astype(int)
    for _ in range(PLACEMENT_ATTEMPTS):
        center = candidates[rng.integers(len(candidates))]
        lo = center - reach
        hi = center + reach + 1
        if np.any(lo < 0) or np.any(hi > np.array(dims)):
            continue
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        grids = np.meshgrid(*(np.arange(a, b) - c for a, b, c in zip(lo, hi, center)), indexing="ij")
        inside = sum((g / r) ** 2 for g, r in zip(grids, radii)) <= 1.0
        if inside.any() and np.all(zone[box][inside]):
            tumor = np.zeros(dims, dtype=bool)
            tumor[box] = inside
            return tumor
    raise PlacementError(f"tumor with radii {radii} did not fit after {PLACEMENT_ATTEMPTS} attempts")


def generate_case_with_zone(cfg: PhantomConfig, label: str, case_seed: int):
    """Like ``generate_case`` but also returns the sampled zone name."""
    if label not in LABELS:
        raise ValueError(f"label must be one of {LABELS}")
    rng = np.random.default_rng(case_seed)
    brain, infra = _zones(_geometry_key(cfg))
    zone_name = "infratentorial" if rng.random() < cfg.p_infra(label) else "supratentorial"
    zone = infra if zone_name == "infratentorial" else brain & ~infra
    radii = rng.uniform(cfg.radius_min, cfg.radius_max, size=3)
    tumor = _place_tumor(zone, radii, rng)
    image = np.full(cfg.dims, cfg.baseline, dtype=np.float64)
    if cfg.noise_sigma > 0:
        image += rng.normal(0.0, cfg.noise_sigma, size=cfg.dims)
    image[tumor] += cfg.contrast
    image[~brain] = 0.0
    grid = VolumeGrid(cfg.dims, cfg.spacing)
    return ScalarVolume(grid, image), MaskVolume(grid, tumor), zone_name


def generate_case(cfg: PhantomConfig, label: str, case_seed: int) -> tuple[ScalarVolume, MaskVolume]:
    image, mask, _ = generate_case_with_zone(cfg, label, case_seed)
    return image, mask


def case_labels(cfg: PhantomConfig) -> list[str]:
    return ["fusion"] * cfg.n_fusion + ["mutation"] * cfg.n_mutation


def generate_dataset(cfg: PhantomConfig, out_dir, format: str = "raw"):
    """Write every case plus ``manifest.csv`` and ``phantom.json`` under ``out_dir``."""
    from .experiment import CaseRecord, Manifest, save_manifest

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    suffix = ".bin" if format == "raw" else ".nii"
    records = []
    for index, label in enumerate(case_labels(cfg)):
        case_id = f"case{index:04d}"
        image, mask = generate_case(cfg, label, derive_seed(cfg.seed, index))
        image_rel = Path("images") / f"{case_id}{suffix}"
        mask_rel = Path("masks") / f"{case_id}{suffix}"
        save_volume(image, out / image_rel, format)
        save_volume(mask, out / mask_rel, format)
        records.append(CaseRecord(case_id, out / image_rel, out / mask_rel, label))
        log.debug("wrote %s (%s)", case_id, label)
    manifest = Manifest(records)
    save_manifest(manifest, out / "manifest.csv")
    meta = asdict(cfg)
    meta["format"] = format
    (out / "phantom.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return manifest
