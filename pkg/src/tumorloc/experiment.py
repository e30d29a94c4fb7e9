"""Repeated, unified-split evaluation of the three classification pipelines.

For every repeat one stratified 80/20 split is drawn and shared by the
location-only, CNN-only and location-guided CNN pipelines, so their test
AUROCs can be compared pairwise across repeats.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import atlas, cnn, stats
from .seeding import derive_seed
from .volume import MaskVolume, ScalarVolume, guess_format, load_mask, load_volume, resample_mean, zscore_nonzero

log = logging.getLogger(__name__)

PIPELINES = ("location", "cnn", "guided")
PIPELINE_CODES = {"location": 0, "cnn": 1, "guided": 2}
LABEL_VALUES = {"fusion": 0, "mutation": 1}
COMPARISONS = (("cnn", "location"), ("guided", "location"), ("guided", "cnn"))

RESULT_FIELDS = ("repeat", "pipeline", "auroc", "split_hash", "status")


class ManifestError(ValueError):
    pass


class InsufficientRepeatsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    image_path: Path
    mask_path: Path
    label: str

    @property
    def y(self) -> int:
        return LABEL_VALUES[self.label]


@dataclass
class Manifest:
    cases: list[CaseRecord]

    def __post_init__(self):
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise ManifestError("case ids must be unique")
        for c in self.cases:
            if c.label not in LABEL_VALUES:
                raise ManifestError(f"{c.case_id}: label must be fusion or mutation, got {c.label!r}")
        if {c.label for c in self.cases} != set(LABEL_VALUES):
            raise ManifestError("manifest must contain both fusion and mutation cases")
        self._by_id = {c.case_id: c for c in self.cases}

    def __len__(self):
        return len(self.cases)

    def __getitem__(self, case_id: str) -> CaseRecord:
        return self._by_id[case_id]

    def ids(self, label: str | None = None) -> list[str]:
        return sorted(c.case_id for c in self.cases if label is None or c.label == label)

    def without(self, case_ids: Iterable[str]) -> "Manifest":
        drop = set(case_ids)
        return Manifest([c for c in self.cases if c.case_id not in drop])


def load_manifest(path) -> Manifest:
    """Read a CSV (``case_id,image,mask,label``) or JSON list manifest.

    Relative volume paths resolve against the manifest's directory.
    """
    path = Path(path)
    root = path.parent
    if path.suffix == ".json":
        rows = json.loads(path.read_text())
        if isinstance(rows, dict):
            rows = rows.get("cases", [])
    else:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    cases = []
    for i, row in enumerate(rows):
        try:
            cases.append(
                CaseRecord(
                    str(row["case_id"]).strip(),
                    root / str(row["image"]).strip(),
                    root / str(row["mask"]).strip(),
                    str(row["label"]).strip(),
                )
            )
        except KeyError as exc:
            raise ManifestError(f"{path}: record {i} lacks field {exc}") from exc
    return Manifest(cases)


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    root = path.parent.resolve()

    def rel(p: Path) -> str:
        try:
            return Path(p).resolve().relative_to(root).as_posix()
        except ValueError:
            return str(p)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case_id", "image", "mask", "label"])
        for c in manifest.cases:
            writer.writerow([c.case_id, rel(c.image_path), rel(c.mask_path), c.label])


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitPlan:
    repeat_index: int
    seed: int
    dev_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    @property
    def split_hash(self) -> str:
        text = "dev:" + ",".join(sorted(self.dev_ids)) + "|test:" + ",".join(sorted(self.test_ids))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def test_count(n: int, test_fraction=Fraction(1, 5)) -> int:
    """Per-class test size: ``n * fraction`` rounded half-up."""
    frac = Fraction(str(test_fraction)) if not isinstance(test_fraction, Fraction) else test_fraction
    return math.floor(n * frac + Fraction(1, 2))


def make_split(manifest: Manifest, global_seed: int, repeat_index: int, test_fraction=Fraction(1, 5)) -> SplitPlan:
    """Stratified split; the first ``test_count`` shuffled ids of each class go to test."""
    seed = derive_seed(global_seed, repeat_index)
    rng = np.random.default_rng(seed)
    dev, test = [], []
    for label in LABEL_VALUES:
        ids = manifest.ids(label)
        n_test = test_count(len(ids), test_fraction)
        if len(ids) < 2 or n_test < 1 or n_test >= len(ids):
            raise ManifestError(f"class {label} has {len(ids)} cases; too few to split")
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        test += shuffled[:n_test]
        dev += shuffled[n_test:]
    return SplitPlan(repeat_index, seed, tuple(sorted(dev)), tuple(sorted(test)))


# ---------------------------------------------------------------------------
# configuration and case loading


@dataclass
class ExperimentConfig:
    batch_size: int = 8
    learning_rate: float = 0.1
    cnn_epochs: int = 10
    guided_epochs: int = 20
    input_dims: tuple[int, int, int] = (32, 32, 32)
    offset: float = 0.2
    test_fraction: float = 0.2
    pipelines: tuple[str, ...] = PIPELINES

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.pipelines = tuple(self.pipelines)
        unknown = set(self.pipelines) - set(PIPELINES)
        if unknown:
            raise ValueError(f"unknown pipelines {sorted(unknown)}")

    def train_config(self, kind: str, seed: int) -> cnn.TrainConfig:
        epochs = self.guided_epochs if kind == "guided" else self.cnn_epochs
        return cnn.TrainConfig(self.batch_size, epochs, self.learning_rate, seed, self.input_dims)


class CaseStore:
    """Loads each case once and caches the split-independent preprocessing.

    Images are z-scored over their nonzero voxels before any masking
    transform; network inputs are block-mean resampled to ``input_dims``.
    """

    def __init__(self, manifest: Manifest, input_dims):
        self.manifest = manifest
        self.input_dims = tuple(input_dims)
        self._masks: dict[str, MaskVolume] = {}
        self._images: dict[str, ScalarVolume] = {}
        self._roi: dict[str, np.ndarray] = {}

    def mask(self, case_id: str) -> MaskVolume:
        if case_id not in self._masks:
            rec = self.manifest[case_id]
            self._masks[case_id] = load_mask(rec.mask_path, guess_format(rec.mask_path))
        return self._masks[case_id]

    def image(self, case_id: str) -> ScalarVolume:
        if case_id not in self._images:
            rec = self.manifest[case_id]
            image = load_volume(rec.image_path, guess_format(rec.image_path))
            image.grid.check_same(self.mask(case_id).grid)
            self._images[case_id] = zscore_nonzero(image)
        return self._images[case_id]

    def _shrink(self, volume: ScalarVolume) -> np.ndarray:
        return resample_mean(volume, self.input_dims).data.astype(np.float32)

    def roi_input(self, case_id: str) -> np.ndarray:
        if case_id not in self._roi:
            self._roi[case_id] = self._shrink(atlas.roi_input(self.image(case_id), self.mask(case_id)))
        return self._roi[case_id]

    def guided_input(self, case_id: str, pdfs, guided_cfg: atlas.GuidedConfig) -> np.ndarray:
        vol = atlas.guided_input(self.image(case_id), self.mask(case_id), pdfs[0], pdfs[1], guided_cfg)
        return self._shrink(vol)


def build_atlases(store: CaseStore, dev_ids: Sequence[str]) -> tuple[atlas.LocationPDF, atlas.LocationPDF]:
    """Fusion and mutation atlases from development cases only."""
    manifest = store.manifest
    by_class = {label: [] for label in LABEL_VALUES}
    for case_id in dev_ids:
        by_class[manifest[case_id].label].append(store.mask(case_id))
    return atlas.build_pdf(by_class["fusion"], "fusion"), atlas.build_pdf(by_class["mutation"], "mutation")


def run_pipeline(
    kind: str,
    split: SplitPlan,
    manifest: Manifest,
    cfg: ExperimentConfig,
    seed: int = 0,
    store: CaseStore | None = None,
    pdfs=None,
) -> float:
    """Test AUROC of one pipeline on one split."""
    if kind not in PIPELINES:
        raise ValueError(f"unknown pipeline {kind!r}")
    store = store or CaseStore(manifest, cfg.input_dims)
    y_test = [manifest[c].y for c in split.test_ids]
    if kind in ("location", "guided") and pdfs is None:
        pdfs = build_atlases(store, split.dev_ids)
    if kind == "location":
        scores = [atlas.location_classify(store.mask(c), pdfs[0], pdfs[1]) for c in split.test_ids]
        return stats.auroc(scores, y_test)
    if kind == "cnn":
        def make(c):
            return store.roi_input(c)
    else:
        guided_cfg = atlas.GuidedConfig(cfg.offset)

        def make(c):
            return store.guided_input(c, pdfs, guided_cfg)
    x_dev = [make(c) for c in split.dev_ids]
    y_dev = [manifest[c].y for c in split.dev_ids]
    history = cnn.train(x_dev, y_dev, cfg.train_config(kind, seed))
    x_test = np.stack([make(c) for c in split.test_ids])
    scores = cnn.predict_batch(history.params, x_test)
    return stats.auroc(scores, y_test)


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class ResultRow:
    repeat: int
    pipeline: str
    auroc: float | None
    split_hash: str
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)

    def completed(self, pipeline: str) -> dict[int, float]:
        return {r.repeat: r.auroc for r in self.rows if r.pipeline == pipeline and r.ok}

    @property
    def pipelines(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.pipeline not in seen:
                seen.append(r.pipeline)
        return seen

    @property
    def failures(self) -> list[ResultRow]:
        return [r for r in self.rows if not r.ok]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(RESULT_FIELDS)
            for r in self.rows:
                writer.writerow([r.repeat, r.pipeline, "" if r.auroc is None else repr(r.auroc), r.split_hash, r.status])

    @classmethod
    def from_csv(cls, path) -> "ResultTable":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(RESULT_FIELDS) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            for rec in reader:
                value = rec["auroc"].strip()
                rows.append(
                    ResultRow(int(rec["repeat"]), rec["pipeline"], float(value) if value else None,
                              rec["split_hash"], rec["status"])
                )
        return cls(rows)


def _run_repeat(manifest: Manifest, repeat: int, global_seed: int, cfg: ExperimentConfig, store: CaseStore | None):
    store = store or CaseStore(manifest, cfg.input_dims)
    split = make_split(manifest, global_seed, repeat, cfg.test_fraction)
    rows = []
    pdfs = None
    pdf_error = None
    if {"location", "guided"} & set(cfg.pipelines):
        try:
            pdfs = build_atlases(store, split.dev_ids)
        except Exception as exc:  # recorded per pipeline below
            pdf_error = exc
    for kind in cfg.pipelines:
        seed = derive_seed(global_seed, repeat, PIPELINE_CODES[kind])
        try:
            if pdf_error is not None and kind != "cnn":
                raise pdf_error
            value = run_pipeline(kind, split, manifest, cfg, seed, store, pdfs)
            rows.append(ResultRow(repeat, kind, value, split.split_hash))
            log.info("repeat %d %-8s AUROC %.4f", repeat, kind, value)
        except Exception as exc:
            log.warning("repeat %d %s failed: %s", repeat, kind, exc)
            status = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
            rows.append(ResultRow(repeat, kind, None, split.split_hash, status))
    return rows


def _limit_blas_threads():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(1)


def _worker(args):
    _limit_blas_threads()
    return _run_repeat(*args, None)


def run_experiment(
    manifest: Manifest,
    n_repeats: int,
    global_seed: int,
    cfg: ExperimentConfig | None = None,
    threads: int = 1,
    store: CaseStore | None = None,
) -> ResultTable:
    """Run every pipeline on ``n_repeats`` shared splits.

    A failing (repeat, pipeline) pair is recorded as a diagnostic row and the
    remaining work continues. With ``threads > 1`` repeats run in worker
    processes; each repeat's seeds are derived from its index, so results do
    not depend on scheduling.
    """
    cfg = cfg or ExperimentConfig()
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    if threads <= 1:
        store = store or CaseStore(manifest, cfg.input_dims)
        rows = []
        for r in range(n_repeats):
            rows += _run_repeat(manifest, r, global_seed, cfg, store)
        return ResultTable(rows)
    jobs = [(manifest, r, global_seed, cfg) for r in range(n_repeats)]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        per_repeat = list(pool.map(_worker, jobs))
    return ResultTable([row for rows in per_repeat for row in rows])


# ---------------------------------------------------------------------------
# summaries


@dataclass(frozen=True)
class Comparison:
    pair: str
    kind: str  # "paired" or "welch"
    n: int
    mean_difference: float
    t: float | None
    p: float | None

    @property
    def degenerate(self) -> bool:
        return self.t is None


@dataclass
class Report:
    stats: dict[str, stats.SummaryStat]
    comparisons: list[Comparison]
    n_failed: int
    level: float = 0.95

    def write_csv(self, summary_path, comparisons_path) -> None:
        with open(summary_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["pipeline", "mean", "ci_low", "ci_high", "n"])
            for name, s in self.stats.items():
                writer.writerow([name, repr(s.mean), repr(s.ci_low), repr(s.ci_high), s.n])
        with open(comparisons_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["pair", "t", "p", "test_kind", "mean_difference", "n"])
            for c in self.comparisons:
                t = "degenerate" if c.degenerate else repr(c.t)
                p = "degenerate" if c.degenerate else repr(c.p)
                writer.writerow([c.pair, t, p, c.kind, repr(c.mean_difference), c.n])

    def format_table(self) -> str:
        pct = int(round(self.level * 100))
        lines = [f"{'pipeline':<10} {'mean AUROC':>10}   {pct}% CI               n"]
        for name, s in self.stats.items():
            lines.append(f"{name:<10} {s.mean:>10.4f}   ({s.ci_low:.4f}, {s.ci_high:.4f})   {s.n:>3d}")
        lines.append("")
        lines.append(f"{'pair':<18} {'test':<7} {'t':>9} {'p':>11}  mean diff")
        for c in self.comparisons:
            if c.degenerate:
                lines.append(f"{c.pair:<18} {c.kind:<7} {'degenerate':>21}  {c.mean_difference:+.4f}")
            else:
                lines.append(f"{c.pair:<18} {c.kind:<7} {c.t:>9.4f} {c.p:>11.4g}  {c.mean_difference:+.4f}")
        if self.n_failed:
            lines.append(f"\n{self.n_failed} (repeat, pipeline) runs failed and were excluded")
        return "\n".join(lines)


def _compare(name_a, name_b, values_a: dict, values_b: dict) -> list[Comparison]:
    pair = f"{name_a}-{name_b}"
    out = []
    common = sorted(set(values_a) & set(values_b))
    a = [values_a[r] for r in common]
    b = [values_b[r] for r in common]
    diff = float(np.mean(np.subtract(a, b))) if common else float("nan")
    try:
        res = stats.paired_t_test(a, b)
        out.append(Comparison(pair, "paired", len(common), diff, res.t, res.p))
    except stats.DegenerateTestError:
        out.append(Comparison(pair, "paired", len(common), diff, None, None))
    all_a, all_b = list(values_a.values()), list(values_b.values())
    mean_diff = float(np.mean(all_a) - np.mean(all_b))
    try:
        res = stats.unpaired_t_test(all_a, all_b)
        out.append(Comparison(pair, "welch", len(all_a) + len(all_b), mean_diff, res.t, res.p))
    except stats.DegenerateTestError:
        out.append(Comparison(pair, "welch", len(all_a) + len(all_b), mean_diff, None, None))
    return out


def summarize(results: ResultTable, level: float = 0.95) -> Report:
    """Per-pipeline mean AUROC with CI, plus paired and Welch t-tests per pipeline pair."""
    completed = {name: results.completed(name) for name in results.pipelines}
    for name, values in completed.items():
        if len(values) < 2:
            raise InsufficientRepeatsError(f"pipeline {name} has {len(values)} completed repeats; need >= 2")
    summary = {name: stats.mean_ci(list(v.values()), level) for name, v in completed.items()}
    comparisons = []
    for a, b in COMPARISONS:
        if a in completed and b in completed:
            comparisons += _compare(a, b, completed[a], completed[b])
    return Report(summary, comparisons, len(results.failures), level)


def write_distribution_csv(results: ResultTable, path) -> None:
    """Wide per-repeat AUROC table (one column per pipeline) for box plots."""
    names = results.pipelines
    repeats = sorted({r.repeat for r in results.rows})
    completed = {n: results.completed(n) for n in names}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["repeat"] + names)
        for rep in repeats:
            writer.writerow([rep] + [repr(completed[n][rep]) if rep in completed[n] else "" for n in names])


def run_metadata(cfg: ExperimentConfig, n_repeats: int, global_seed: int, **extra) -> dict:
    meta = {
        "experiment": asdict(cfg),
        "repeats": n_repeats,
        "global_seed": global_seed,
        "split": {"stratified": True, "test_fraction": cfg.test_fraction, "rounding": "half-up per class"},
        "seed_derivation": "split: SeedSequence([global_seed, repeat]); training: SeedSequence([global_seed, repeat, pipeline_code])",
        "pipeline_codes": PIPELINE_CODES,
    }
    meta.update(extra)
    return meta
