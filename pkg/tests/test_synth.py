import filecmp
import math

import numpy as np
import pytest

from conftest import SMALL_PHANTOM
from tumorloc import synth
from tumorloc.experiment import load_manifest
from tumorloc.volume import load_mask, load_volume


def small(**kw):
    return synth.PhantomConfig(**{**SMALL_PHANTOM, **kw})


def test_defaults():
    cfg = synth.PhantomConfig()
    assert (cfg.n_fusion, cfg.n_mutation) == (143, 71)
    assert (cfg.p_infra_fusion, cfg.p_infra_mutation) == (0.75, 0.05)
    assert (cfg.radius_min, cfg.radius_max) == (3.0, 7.0)
    assert len(synth.case_labels(cfg)) == 214
    assert synth.case_labels(cfg).count("fusion") == 143


def test_config_validation():
    with pytest.raises(ValueError):
        synth.PhantomConfig(p_infra_fusion=1.5)
    with pytest.raises(ValueError):
        synth.PhantomConfig(radius_min=0.5)
    with pytest.raises(ValueError):
        # radius 7 does not fit the infratentorial zone of a 16^3 grid
        synth.PhantomConfig(dims=(16, 16, 16))


def test_zone_geometry():
    cfg = synth.PhantomConfig()
    brain = synth.brain_mask(cfg)
    infra = synth.infratentorial_zone(cfg)
    supra = synth.supratentorial_zone(cfg)
    assert not (infra & supra).any()
    assert np.array_equal(infra | supra, brain)
    assert abs(infra.sum() / brain.sum() - 0.15) < 0.01
    assert abs(brain.sum() / brain.size - math.pi / 6 * 0.8**3) < 0.01
    # the zone sits posterior (low y) and inferior (low z)
    ys, zs = np.nonzero(infra)[1], np.nonzero(infra)[2]
    centre = (cfg.dims[1] - 1) / 2
    assert ys.mean() < centre and zs.mean() < centre


def test_noiseless_case_has_three_levels():
    cfg = small(noise_sigma=0.0)
    img, mask = synth.generate_case(cfg, "fusion", 11)
    assert set(np.unique(img.data)) == {0.0, 1.0, 2.5}
    assert np.array_equal(mask.data.astype(bool), img.data > 1.0 + 1.5 / 2)


def test_case_determinism():
    cfg = small()
    a = synth.generate_case(cfg, "mutation", 42)
    b = synth.generate_case(cfg, "mutation", 42)
    assert a[0] == b[0] and a[1] == b[1]
    c = synth.generate_case(cfg, "mutation", 43)
    assert not c[0] == a[0]


def test_mask_nonempty_inside_brain_and_zone():
    cfg = small()
    brain = synth.brain_mask(cfg)
    zones = {"infratentorial": synth.infratentorial_zone(cfg), "supratentorial": synth.supratentorial_zone(cfg)}
    for seed in range(40):
        _, mask, zone = synth.generate_case_with_zone(cfg, "fusion" if seed % 2 else "mutation", seed)
        m = mask.data.astype(bool)
        assert m.any()
        assert not (m & ~brain).any()
        assert not (m & ~zones[zone]).any()


@pytest.mark.parametrize("label,p", [("fusion", 0.75), ("mutation", 0.05)])
def test_zone_rate_binomial(label, p):
    cfg = small(noise_sigma=0.0)
    n = 1000
    hits = sum(synth.generate_case_with_zone(cfg, label, s)[2] == "infratentorial" for s in range(n))
    assert abs(hits - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_unknown_label():
    with pytest.raises(ValueError):
        synth.generate_case(small(), "other", 0)


def test_placement_error_when_zone_too_small():
    zone = np.zeros((10, 10, 10), dtype=bool)
    zone[4:6, 4:6, 4:6] = True
    with pytest.raises(synth.PlacementError):
        synth._place_tumor(zone, np.array([3.0, 3.0, 3.0]), np.random.default_rng(0))


def test_two_case_dataset(tmp_path):
    cfg = small(n_fusion=1, n_mutation=1)
    man = synth.generate_dataset(cfg, tmp_path)
    assert len(man) == 2
    back = load_manifest(tmp_path / "manifest.csv")
    assert [r.label for r in back.cases] == ["fusion", "mutation"]
    for rec in back.cases:
        assert load_volume(rec.image_path, "raw").grid.dims == cfg.dims
        assert load_mask(rec.mask_path, "raw").count > 0


def test_dataset_byte_identical(tmp_path):
    cfg = small(n_fusion=3, n_mutation=2, seed=7)
    synth.generate_dataset(cfg, tmp_path / "a")
    synth.generate_dataset(cfg, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    files = ["manifest.csv", "phantom.json"]
    assert filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)[0] == files
    for sub in ("images", "masks"):
        names = sorted(p.name for p in (tmp_path / "a" / sub).iterdir())
        match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / sub, tmp_path / "b" / sub, names, shallow=False)
        assert mismatch == [] and errors == [] and len(match) == 10
    assert not cmp.left_only and not cmp.right_only
