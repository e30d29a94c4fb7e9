import csv
import json
from fractions import Fraction

import numpy as np
import pytest

from tumorloc import experiment as ex
from tumorloc import stats
from tumorloc.volume import MaskVolume, ScalarVolume, save_volume


def fake_manifest(n_fusion, n_mutation):
    cases = [ex.CaseRecord(f"f{i:03d}", f"img/f{i}.bin", f"msk/f{i}.bin", "fusion") for i in range(n_fusion)]
    cases += [ex.CaseRecord(f"m{i:03d}", f"img/m{i}.bin", f"msk/m{i}.bin", "mutation") for i in range(n_mutation)]
    return ex.Manifest(cases)


# ---------------------------------------------------------------------------
# manifest


def test_manifest_validation():
    with pytest.raises(ex.ManifestError):
        fake_manifest(3, 0)
    with pytest.raises(ex.ManifestError):
        ex.Manifest([ex.CaseRecord("a", "x", "y", "fusion"), ex.CaseRecord("a", "x", "y", "mutation")])
    with pytest.raises(ex.ManifestError):
        ex.Manifest([ex.CaseRecord("a", "x", "y", "fusion"), ex.CaseRecord("b", "x", "y", "wildtype")])


def test_manifest_csv_and_json(tmp_path):
    (tmp_path / "m.csv").write_text("case_id,image,mask,label\na,i/a.bin,k/a.bin,fusion\nb,i/b.bin,k/b.bin,mutation\n")
    man = ex.load_manifest(tmp_path / "m.csv")
    assert man["a"].image_path == tmp_path / "i/a.bin"
    assert man.ids("mutation") == ["b"]
    rows = [{"case_id": "a", "image": "i/a.bin", "mask": "k/a.bin", "label": "fusion"},
            {"case_id": "b", "image": "i/b.bin", "mask": "k/b.bin", "label": "mutation"}]
    (tmp_path / "m.json").write_text(json.dumps(rows))
    assert ex.load_manifest(tmp_path / "m.json").cases == man.cases
    (tmp_path / "bad.csv").write_text("case_id,image,label\na,i,fusion\n")
    with pytest.raises(ex.ManifestError):
        ex.load_manifest(tmp_path / "bad.csv")


# ---------------------------------------------------------------------------
# splits


def test_test_count_rounding():
    assert ex.test_count(143) == 29
    assert ex.test_count(71) == 14
    assert ex.test_count(10) == 2
    assert ex.test_count(5, Fraction(1, 10)) == 1  # 0.5 rounds up
    assert ex.test_count(10, 0.25) == 3  # 2.5 rounds up


def test_split_small_balanced():
    plan = ex.make_split(fake_manifest(10, 10), 0, 0)
    assert sum(i.startswith("f") for i in plan.test_ids) == 2
    assert sum(i.startswith("m") for i in plan.test_ids) == 2
    assert len(plan.dev_ids) == 16
    assert not set(plan.dev_ids) & set(plan.test_ids)


def test_split_determinism_and_variation():
    man = fake_manifest(143, 71)
    a = ex.make_split(man, 5, 3)
    b = ex.make_split(man, 5, 3)
    assert a == b and a.split_hash == b.split_hash
    assert ex.make_split(man, 5, 4).split_hash != a.split_hash
    assert ex.make_split(man, 6, 3).split_hash != a.split_hash


def test_split_hash_ignores_order():
    a = ex.SplitPlan(0, 1, ("a", "b"), ("c",))
    b = ex.SplitPlan(0, 1, ("b", "a"), ("c",))
    assert a.split_hash == b.split_hash and len(a.split_hash) == 16


def test_split_rejects_tiny_class():
    with pytest.raises(ex.ManifestError):
        ex.make_split(fake_manifest(10, 1), 0, 0)


# ---------------------------------------------------------------------------
# hand-built datasets


def write_cases(tmp_path, masks_by_label, dims=(4, 4, 4)):
    """Write constant images plus the given masks; return the manifest."""
    cases = []
    for label, masks in masks_by_label.items():
        for i, points in enumerate(masks):
            m = np.zeros(dims, dtype=np.uint8)
            for p in points:
                m[p] = 1
            case_id = f"{label[0]}{i:02d}"
            img = np.ones(dims) + m
            save_volume(ScalarVolume.from_array(img), tmp_path / f"{case_id}_img.bin", "raw")
            save_volume(MaskVolume.from_array(m), tmp_path / f"{case_id}_msk.bin", "raw")
            cases.append(ex.CaseRecord(case_id, tmp_path / f"{case_id}_img.bin", tmp_path / f"{case_id}_msk.bin", label))
    return ex.Manifest(cases)


def test_separable_location_gives_auroc_one(tmp_path):
    man = write_cases(tmp_path, {
        "fusion": [[(0, 0, i % 4)] for i in range(10)],
        "mutation": [[(3, 3, i % 4)] for i in range(10)],
    })
    plan = ex.make_split(man, 0, 0)
    cfg = ex.ExperimentConfig(input_dims=(4, 4, 4))
    assert ex.run_pipeline("location", plan, man, cfg) == 1.0


def test_unseen_location_falls_back_to_half(tmp_path):
    # every test mask misses both atlases: all scores 0.5, AUROC 0.5
    man = write_cases(tmp_path, {
        "fusion": [[(0, 0, 0)]] * 5,
        "mutation": [[(3, 3, 3)]] * 5,
    })
    plan = ex.SplitPlan(0, 0, ("f00", "f01", "f02", "f03", "m00", "m01", "m02", "m03"), ("f04", "m04"))
    store = ex.CaseStore(man, (4, 4, 4))
    other = MaskVolume.from_array(np.pad(np.ones((1, 1, 1), dtype=np.uint8), ((2, 1), (1, 2), (1, 2))))
    store._masks["f04"] = store._masks["m04"] = other
    assert ex.run_pipeline("location", plan, man, ex.ExperimentConfig(input_dims=(4, 4, 4)), store=store) == 0.5


def test_atlases_only_see_dev_cases(small_dataset):
    _, man = small_dataset
    plan = ex.make_split(man, 1, 2)
    store = ex.CaseStore(man, (8, 8, 8))
    seen = []
    original = store.mask

    def spy(case_id):
        seen.append(case_id)
        return original(case_id)

    store.mask = spy
    pdfs = ex.build_atlases(store, plan.dev_ids)
    assert set(seen) == set(plan.dev_ids)
    # dropping test cases from the manifest leaves the atlases untouched
    reduced = man.without(plan.test_ids)
    again = ex.build_atlases(ex.CaseStore(reduced, (8, 8, 8)), plan.dev_ids)
    for a, b in zip(pdfs, again):
        assert np.array_equal(a.density, b.density)


def test_case_store_preprocessing(small_dataset):
    _, man = small_dataset
    store = ex.CaseStore(man, (8, 8, 8))
    cid = man.ids("fusion")[0]
    img = store.image(cid).data
    nz = img[img != 0]
    assert abs(nz.mean()) < 1e-9 and abs(nz.std() - 1.0) < 1e-9
    roi = store.roi_input(cid)
    assert roi.shape == (8, 8, 8) and roi.dtype == np.float32


# ---------------------------------------------------------------------------
# full runs


FAST = dict(input_dims=(8, 8, 8), cnn_epochs=2, guided_epochs=3, learning_rate=0.05)


def test_single_repeat_rows_share_split(small_dataset):
    _, man = small_dataset
    table = ex.run_experiment(man, 1, 0, ex.ExperimentConfig(**FAST))
    assert [r.pipeline for r in table.rows] == ["location", "cnn", "guided"]
    assert len({r.split_hash for r in table.rows}) == 1
    assert all(r.ok and 0.0 <= r.auroc <= 1.0 for r in table.rows)
    assert table.rows[0].split_hash == ex.make_split(man, 0, 0).split_hash


def test_five_repeats_statistics_recompute(small_dataset, tmp_path):
    _, man = small_dataset
    table = ex.run_experiment(man, 5, 11, ex.ExperimentConfig(**FAST))
    assert len(table.rows) == 15
    table.to_csv(tmp_path / "results.csv")
    back = ex.ResultTable.from_csv(tmp_path / "results.csv")
    assert back.rows == table.rows
    report = ex.summarize(back)
    report.write_csv(tmp_path / "summary.csv", tmp_path / "comparisons.csv")

    # recompute from the CSV with independent arithmetic
    with open(tmp_path / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    by = {p: [float(r["auroc"]) for r in rows if r["pipeline"] == p] for p in ex.PIPELINES}
    with open(tmp_path / "summary.csv") as fh:
        summary = {r["pipeline"]: r for r in csv.DictReader(fh)}
    for p, vals in by.items():
        mean = sum(vals) / 5
        sd = (sum((v - mean) ** 2 for v in vals) / 4) ** 0.5
        half = stats.t_ppf(0.975, 4) * sd / 5**0.5
        assert float(summary[p]["mean"]) == pytest.approx(mean, abs=1e-12)
        assert float(summary[p]["ci_low"]) == pytest.approx(mean - half, abs=1e-12)
        assert float(summary[p]["ci_high"]) == pytest.approx(mean + half, abs=1e-12)
        assert int(summary[p]["n"]) == 5
    with open(tmp_path / "comparisons.csv") as fh:
        comps = list(csv.DictReader(fh))
    assert {(c["pair"], c["test_kind"]) for c in comps} == {
        (f"{a}-{b}", k) for a, b in ex.COMPARISONS for k in ("paired", "welch")
    }
    for c in comps:
        a, b = c["pair"].split("-")
        d = [x - y for x, y in zip(by[a], by[b])]
        assert float(c["mean_difference"]) == pytest.approx(sum(d) / 5, abs=1e-12)
        if c["test_kind"] == "paired" and c["t"] != "degenerate":
            md = sum(d) / 5
            sd = (sum((x - md) ** 2 for x in d) / 4) ** 0.5
            assert float(c["t"]) == pytest.approx(md / (sd / 5**0.5), rel=1e-9)


def test_experiment_is_deterministic(small_dataset):
    _, man = small_dataset
    cfg = ex.ExperimentConfig(**FAST)
    a = ex.run_experiment(man, 2, 4, cfg)
    b = ex.run_experiment(man, 2, 4, cfg)
    assert a.rows == b.rows


def test_parallel_matches_serial(small_dataset):
    _, man = small_dataset
    cfg = ex.ExperimentConfig(**{**FAST, "pipelines": ("location", "cnn")})
    serial = ex.run_experiment(man, 2, 9, cfg, threads=1)
    parallel = ex.run_experiment(man, 2, 9, cfg, threads=2)
    assert [(r.repeat, r.pipeline, r.split_hash) for r in serial.rows] == [
        (r.repeat, r.pipeline, r.split_hash) for r in parallel.rows
    ]
    for s, p in zip(serial.rows, parallel.rows):
        assert p.auroc == pytest.approx(s.auroc, abs=1e-6)


def test_failures_are_recorded_not_raised(small_dataset, tmp_path):
    _, man = small_dataset
    broken = ex.Manifest([
        ex.CaseRecord(c.case_id, tmp_path / "missing.bin" if i == 0 else c.image_path, c.mask_path, c.label)
        for i, c in enumerate(man.cases)
    ])
    table = ex.run_experiment(broken, 1, 0, ex.ExperimentConfig(**FAST))
    statuses = {r.pipeline: r.status for r in table.rows}
    assert statuses["location"] == "ok"
    # the broken image is either in dev (training fails) or in test (prediction fails)
    assert statuses["cnn"].startswith("error:") and statuses["guided"].startswith("error:")
    assert len(table.failures) == 2


# ---------------------------------------------------------------------------
# summaries


def table_from(values):
    rows = []
    for pipeline, vals in values.items():
        rows += [ex.ResultRow(i, pipeline, v, "h") for i, v in enumerate(vals)]
    return ex.ResultTable(rows)


def test_constant_shift():
    base = [0.61, 0.73, 0.82, 0.77, 0.9]
    table = table_from({"location": base, "cnn": [v + 0.02 for v in base], "guided": [v + 0.05 for v in base]})
    report = ex.summarize(table)
    by = {(c.pair, c.kind): c for c in report.comparisons}
    assert by[("cnn-location", "paired")].mean_difference == pytest.approx(0.02, abs=1e-15)
    assert by[("cnn-location", "paired")].degenerate
    assert by[("guided-cnn", "paired")].mean_difference == pytest.approx(0.03, abs=1e-15)
    assert not by[("cnn-location", "welch")].degenerate


def test_identical_pipelines_are_degenerate(tmp_path):
    vals = [0.7, 0.8, 0.75]
    report = ex.summarize(table_from({"location": vals, "cnn": vals, "guided": vals}))
    assert all(c.degenerate for c in report.comparisons if c.kind == "paired")
    report.write_csv(tmp_path / "s.csv", tmp_path / "c.csv")
    text = (tmp_path / "c.csv").read_text()
    assert "degenerate" in text
    assert "degenerate" in report.format_table()


def test_summarize_needs_two_repeats():
    with pytest.raises(ex.InsufficientRepeatsError):
        ex.summarize(table_from({"location": [0.7], "cnn": [0.8]}))


def test_failed_rows_excluded_and_counted():
    table = table_from({"location": [0.7, 0.8, 0.9], "cnn": [0.6, 0.65, 0.7]})
    table.rows.append(ex.ResultRow(3, "cnn", None, "h", "error: boom"))
    report = ex.summarize(table)
    assert report.n_failed == 1
    assert report.stats["cnn"].n == 3


def test_distribution_csv(tmp_path):
    table = table_from({"location": [0.7, 0.8], "cnn": [0.6, 0.65]})
    ex.write_distribution_csv(table, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines == ["repeat,location,cnn", "0,0.7,0.6", "1,0.8,0.65"]
