"""Command-line entry point: ``tumorloc <subcommand> ...``.

Logs go to stderr; data goes to files or stdout. Exit codes: 0 success,
1 completed with diagnostics or a runtime failure, 2 usage error,
3 missing input file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__, atlas, experiment, synth
from .volume import guess_format, load_mask, project, write_csv_image, write_pgm

log = logging.getLogger("tumorloc")

EXIT_OK = 0
EXIT_DIAGNOSTICS = 1
EXIT_USAGE = 2
EXIT_MISSING = 3


class UsageError(Exception):
    pass


def _dims(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.replace("x", ",").split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected N or NX,NY,NZ, got {text!r}")
    return tuple(parts)


def _write_meta(out_dir: Path, command: str, args: argparse.Namespace, **extra) -> None:
    # the output location is where this record lives, so it is left out; two
    # runs into different directories then produce identical trees
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in ("func", "out")}
    record = {"command": command, "version": __version__, "flags": flags}
    record.update(extra)
    (out_dir / f"{command}_meta.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _require(*paths: Path) -> None:
    for p in paths:
        probe = p
        if not probe.exists() and probe.suffix == ".bin":
            probe = probe.with_suffix(".meta")
        if not probe.exists():
            raise FileNotFoundError(f"no such file: {p}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = synth.PhantomConfig(
        dims=args.dims,
        n_fusion=args.n_fusion,
        n_mutation=args.n_mutation,
        p_infra_fusion=args.p_infra_fusion,
        p_infra_mutation=args.p_infra_mutation,
        radius_min=args.radius_min,
        radius_max=args.radius_max,
        contrast=args.contrast,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = synth.generate_dataset(cfg, out, args.format)
    _write_meta(out, "synth", args, phantom=asdict(cfg))
    log.info("wrote %d cases to %s", len(manifest), out)
    print(out / "manifest.csv")
    return EXIT_OK


def cmd_atlas_build(args) -> int:
    _require(Path(args.manifest))
    manifest = experiment.load_manifest(args.manifest)
    ids = manifest.ids(args.cls)
    if args.exclude:
        drop = set(Path(args.exclude).read_text().split())
        ids = [i for i in ids if i not in drop]
    masks = []
    for case_id in ids:
        rec = manifest[case_id]
        _require(rec.mask_path)
        masks.append(load_mask(rec.mask_path, guess_format(rec.mask_path)))
    pdf = atlas.build_pdf(masks, args.cls)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    atlas.save_pdf(pdf, out, guess_format(out))
    _write_meta(out.parent, f"atlas_{args.cls}", args, n_masks=len(masks))
    log.info("built %s atlas from %d masks -> %s", args.cls, len(masks), out)
    return EXIT_OK


def cmd_atlas_project(args) -> int:
    src = Path(args.atlas)
    _require(src)
    pdf = atlas.load_pdf(src, guess_format(src))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = src.name.split(".")[0]
    axes = ["axial", "coronal", "sagittal"] if args.axis == "all" else [args.axis]
    for axis in axes:
        image = project(pdf.as_volume(), axis, args.mode)
        write_pgm(image, out / f"{stem}_{axis}.pgm")
        write_csv_image(image, out / f"{stem}_{axis}.csv")
        print(out / f"{stem}_{axis}.pgm")
    return EXIT_OK


def cmd_classify(args) -> int:
    paths = [Path(args.atlas_fusion), Path(args.atlas_mutation), Path(args.mask)]
    _require(*paths)
    pdf_f = atlas.load_pdf(paths[0], guess_format(paths[0]), class_label="fusion")
    pdf_m = atlas.load_pdf(paths[1], guess_format(paths[1]), class_label="mutation")
    seg = load_mask(paths[2], guess_format(paths[2]))
    score = atlas.score_both(seg, pdf_f, pdf_m)
    print("p_fusion,p_mutation,mutation_score")
    print(f"{score.p_fusion!r},{score.p_mutation!r},{score.mutation_score!r}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    if args.strict_deterministic and args.threads != 1:
        raise UsageError("--strict-deterministic requires --threads 1")
    _require(Path(args.manifest))
    manifest = experiment.load_manifest(args.manifest)
    cfg = experiment.ExperimentConfig(
        batch_size=args.batch_size,
        learning_rate=args.lr,
        cnn_epochs=args.epochs,
        guided_epochs=args.guided_epochs,
        input_dims=args.input_dims,
        offset=args.offset,
        test_fraction=args.test_fraction,
        pipelines=tuple(args.pipelines.split(",")),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    limiter = experiment._limit_blas_threads() if args.strict_deterministic else None
    try:
        table = experiment.run_experiment(manifest, args.repeats, args.seed, cfg, threads=args.threads)
    finally:
        if limiter is not None:
            limiter.unregister()
    table.to_csv(out / "results.csv")
    meta = experiment.run_metadata(cfg, args.repeats, args.seed, manifest=str(Path(args.manifest).resolve()),
                                   strict_deterministic=args.strict_deterministic, threads=args.threads)
    _write_meta(out, "experiment", args, **meta)
    try:
        report = experiment.summarize(table)
    except experiment.InsufficientRepeatsError as exc:
        log.warning("no summary: %s", exc)
    else:
        report.write_csv(out / "summary.csv", out / "comparisons.csv")
        print(report.format_table())
    if table.failures:
        log.error("%d (repeat, pipeline) runs failed; see status column in results.csv", len(table.failures))
        return EXIT_DIAGNOSTICS
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.results)
    _require(src)
    table = experiment.ResultTable.from_csv(src)
    out = Path(args.out) if args.out else src.parent
    out.mkdir(parents=True, exist_ok=True)
    report = experiment.summarize(table, args.level)
    report.write_csv(out / "summary.csv", out / "comparisons.csv")
    experiment.write_distribution_csv(table, out / "auroc_distribution.csv")
    (out / "summary.txt").write_text(report.format_table() + "\n")
    print(report.format_table())
    return EXIT_DIAGNOSTICS if table.failures else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tumorloc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    defaults = synth.PhantomConfig()
    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--dims", type=_dims, default=defaults.dims)
    p.add_argument("--n-fusion", type=int, default=defaults.n_fusion)
    p.add_argument("--n-mutation", type=int, default=defaults.n_mutation)
    p.add_argument("--p-infra-fusion", type=float, default=defaults.p_infra_fusion)
    p.add_argument("--p-infra-mutation", type=float, default=defaults.p_infra_mutation)
    p.add_argument("--radius-min", type=float, default=defaults.radius_min)
    p.add_argument("--radius-max", type=float, default=defaults.radius_max)
    p.add_argument("--contrast", type=float, default=defaults.contrast)
    p.add_argument("--noise-sigma", type=float, default=defaults.noise_sigma)
    p.add_argument("--format", choices=["raw", "nifti1"], default="raw")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("atlas-build", help="build one class's tumor-location atlas")
    p.add_argument("manifest")
    p.add_argument("--class", dest="cls", choices=atlas.CLASSES, required=True)
    p.add_argument("--out", required=True, help="atlas path (.nii or .bin)")
    p.add_argument("--exclude", help="file of case ids to leave out (e.g. a test set)")
    p.set_defaults(func=cmd_atlas_build)

    p = sub.add_parser("atlas-project", help="write PGM + CSV projections of an atlas")
    p.add_argument("atlas")
    p.add_argument("--axis", choices=["axial", "coronal", "sagittal", "all"], default="all")
    p.add_argument("--mode", choices=["max", "sum"], default="sum")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_atlas_project)

    p = sub.add_parser("classify", help="score one mask against both atlases")
    p.add_argument("--atlas-fusion", required=True)
    p.add_argument("--atlas-mutation", required=True)
    p.add_argument("--mask", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("experiment", help="repeated unified-split evaluation of all pipelines")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=10, help="CNN-only epochs")
    p.add_argument("--guided-epochs", type=int, default=20)
    p.add_argument("--input-dims", type=_dims, default=(32, 32, 32))
    p.add_argument("--offset", type=float, default=0.2)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--pipelines", default=",".join(experiment.PIPELINES))
    p.add_argument("--threads", type=int, default=1, help="worker processes (parallel repeats)")
    p.add_argument("--strict-deterministic", action="store_true",
                   help="single-threaded BLAS; bit-exact results for a fixed seed")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="summarize a results CSV")
    p.add_argument("results")
    p.add_argument("--out", help="output directory (default: next to the results)")
    p.add_argument("--level", type=float, default=0.95)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tumorloc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_DIAGNOSTICS


if __name__ == "__main__":
    sys.exit(main())
