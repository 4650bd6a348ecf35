"""The ``segsense`` command: evaluate, sweep, fit, recommend, report, volume.

Exit codes are stable for scripting: 0 success, 1 usage error, 2 data error,
3 predictor failure.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import segsense
from segsense.fitting import SurfaceFit, fit_from_json_dict
from segsense.harness import SweepConfig, SweepResult, run_sweep
from segsense.masks import (
    DEFAULT_CUTOFF,
    load_mask,
    load_stack,
    partition,
    read_split,
)
from segsense.metrics import MetricConfig, write_metrics_csv
from segsense.report import (
    RANKABLE_INDICES,
    build_report,
    evaluate_directories,
    fit_sweep_exponential,
    fit_sweep_surfaces,
    recommend,
)
from segsense.volumes import (
    VolumeSample,
    VolumeSeries,
    modality_ratio,
    normalize_series,
    read_series_csv,
    stack_volume,
    write_ratio_csv,
    write_series_csv,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PREDICTOR = 3

_RASTER_EXTENSIONS = (".png", ".pgm")


class DataError(RuntimeError):
    """Input problem that maps to exit code 2."""


def _fail(message):
    raise DataError(message)


def _load_config_file(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        _fail(f"cannot read config {path}: {exc}")


def _metric_config(payload):
    metric = payload.get("metric", {})
    return MetricConfig(
        beta=float(metric.get("beta", 1.0)),
        delta=float(metric.get("delta", 1e-5)),
        bce_clamp=float(metric.get("bce_clamp", 1e-7)),
    )


def _add_common(parser, out_required=False):
    parser.add_argument("--config", help="JSON config file", default=None)
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", required=out_required, default=".",
                        help="output directory")
    parser.add_argument("--units", choices=("index", "images"), default=None,
                        help="axis units for surfaces")


def cmd_evaluate(args):
    payload = _load_config_file(args.config)
    spacing = tuple(args.spacing or payload.get("spacing", (1.0, 1.0)))
    cutoff = args.cutoff if args.cutoff is not None else payload.get("cutoff", DEFAULT_CUTOFF)
    records, gt_only, pr_only, errors = evaluate_directories(
        args.gt, args.pr,
        config=_metric_config(payload),
        spacing=spacing,
        cutoff=cutoff,
        threshold=args.threshold,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_metrics_csv(out_dir / "metrics.csv", records)
    print(f"wrote {csv_path} ({len(records)} pairs)")

    ok = True
    if gt_only or pr_only:
        ok = False
        if gt_only:
            print(f"ids only in gt dir: {', '.join(gt_only)}", file=sys.stderr)
        if pr_only:
            print(f"ids only in pr dir: {', '.join(pr_only)}", file=sys.stderr)
    for stem, message in sorted(errors.items()):
        ok = False
        print(f"pair {stem}: {message}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_DATA


def _load_dataset(masks_dir, cutoff):
    masks_dir = Path(masks_dir)
    if not masks_dir.is_dir():
        _fail(f"masks dir not found: {masks_dir}")
    dataset = {}
    for p in sorted(masks_dir.iterdir()):
        if p.is_file() and p.suffix.lower() in _RASTER_EXTENSIONS:
            dataset[p.stem] = load_mask(p, cutoff=cutoff)
    if not dataset:
        _fail(f"no rasters found in {masks_dir}")
    return dataset


def cmd_sweep(args):
    payload = _load_config_file(args.config)
    if "models" not in payload:
        _fail("sweep config must define models, ntrain_axis, ntest_axis and data")
    config = SweepConfig.from_dict(payload)
    if args.seed is not None:
        config = replace(config, seed=args.seed)

    data = payload.get("data", {})
    if "masks_dir" not in data:
        _fail("sweep config needs data.masks_dir")
    cutoff = data.get("cutoff", DEFAULT_CUTOFF)
    dataset = _load_dataset(data["masks_dir"], cutoff)
    if "split_manifest" in data:
        split = read_split(data["split_manifest"])
    else:
        ratios = tuple(data.get("ratios", (0.8, 0.1, 0.1)))
        split = partition(sorted(dataset), ratios, seed=int(data.get("split_seed", config.seed)))

    out_dir = Path(args.out)
    workdir = Path(args.workdir) if args.workdir else out_dir / "work"
    result = run_sweep(config, dataset, split, workdir=workdir)
    result.save(out_dir)
    print(f"sweep complete: {len(result.cells)} cells ok, {len(result.failed)} failed -> {out_dir}")
    if result.failed:
        for key, failure in sorted(result.failed.items()):
            print(f"failed {key}: [{failure.kind}] {failure.detail}", file=sys.stderr)
        return EXIT_PREDICTOR
    return EXIT_OK


def _load_result(results_dir):
    results_dir = Path(results_dir)
    if not (results_dir / "sweep.json").exists():
        _fail(f"no sweep.json under {results_dir}")
    return SweepResult.load(results_dir)


def cmd_fit(args):
    result = _load_result(args.results)
    units = args.units or "index"
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.what == "exp":
        rows = fit_sweep_exponential(result)
        payload = [
            {
                "model": model, "ntrain_idx": i, "ntest_idx": j, "index": index,
                "status": status,
                "fit": fit.to_json_dict() if fit is not None else None,
            }
            for model, i, j, index, status, fit in rows
        ]
        (out_dir / "exp_fits.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        with (out_dir / "exp_fits.csv").open("w", newline="", encoding="utf-8") as fh:
            fh.write("model,ntrain_idx,ntest_idx,index,status,a,esr,c,residual_rms\n")
            for model, i, j, index, status, fit in rows:
                tail = (f"{fit.a!r},{fit.esr!r},{fit.c!r},{fit.residual_rms!r}"
                        if fit is not None else ",,,")
                fh.write(f"{model},{i},{j},{index},{status},{tail}\n")
        print(f"wrote {out_dir / 'exp_fits.json'} ({len(rows)} fits)")
        return EXIT_OK

    fits = fit_sweep_surfaces(result, indices=RANKABLE_INDICES, units=units, mode=args.mode)
    payload = {
        "units": units,
        "models": {
            model: {index: fit.to_json_dict() for index, fit in index_fits.items()}
            for model, index_fits in fits.items()
        },
    }
    (out_dir / "surface_fits.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    with (out_dir / "surface_fits.csv").open("w", newline="", encoding="utf-8") as fh:
        fh.write("model,index,p00,p10,p01,units,residual_rms\n")
        for model in sorted(fits):
            for index, fit in sorted(fits[model].items()):
                fh.write(f"{model},{index},{fit.p00!r},{fit.p10!r},{fit.p01!r},"
                         f"{fit.axis_units},{fit.residual_rms!r}\n")
    print(f"wrote {out_dir / 'surface_fits.json'} ({sum(len(v) for v in fits.values())} fits)")
    return EXIT_OK


def cmd_recommend(args):
    payload = json.loads(Path(args.fits).read_text(encoding="utf-8"))
    fits_by_model = {}
    for model, index_fits in payload.get("models", {}).items():
        fits_by_model[model] = {
            index: fit_from_json_dict(fit_payload)
            for index, fit_payload in index_fits.items()
        }
    if not fits_by_model:
        _fail(f"{args.fits} contains no model fits")
    for model, fits in fits_by_model.items():
        bad = [i for i, f in fits.items() if not isinstance(f, SurfaceFit)]
        if bad:
            _fail(f"model {model}: non-surface fits for {bad}")

    rec = recommend(fits_by_model, args.index, args.ntrain, args.ntest,
                    units=args.units, category=args.category)
    for rank, (model, value) in enumerate(rec.ranked, 1):
        print(f"{rank}. {model}: predicted {rec.index} = {value!r}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "recommendation.json").write_text(
            json.dumps(rec.to_json_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        print(f"wrote {out_dir / 'recommendation.json'}")
    return EXIT_OK


def cmd_report(args):
    result = _load_result(args.results)
    bundle = build_report(result, mode=args.mode)
    out_dir = bundle.write(args.out)
    print(f"wrote report tables to {out_dir}")
    if not result.cells:
        print("all sweep cells failed; see failed_cells.csv", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_volume(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.series:
        series_list = read_series_csv(args.series)
        if not series_list:
            _fail(f"{args.series} contains no volume samples")
    else:
        manifest = json.loads(Path(args.stacks).read_text(encoding="utf-8"))
        by_modality = {}
        for entry in manifest:
            stack = load_stack(entry["stack_dir"], cutoff=args.cutoff)
            sample = VolumeSample(
                day=int(entry["day"]),
                stack_id=stack.stack_id,
                voxel_count=stack_volume(stack),
            )
            by_modality.setdefault(entry["modality"], []).append(sample)
        series_list = [
            VolumeSeries(modality=modality, samples=tuple(samples))
            for modality, samples in sorted(by_modality.items())
        ]

    normalized = [normalize_series(s) for s in series_list]
    write_series_csv(out_dir / "volumes.csv", normalized)
    print(f"wrote {out_dir / 'volumes.csv'}")

    by_modality = {s.modality: s for s in normalized}
    if "OCT" in by_modality and "OCT-A" in by_modality:
        ratios, skipped = modality_ratio(by_modality["OCT-A"], by_modality["OCT"])
        write_ratio_csv(out_dir / "ratios.csv", ratios)
        print(f"wrote {out_dir / 'ratios.csv'} ({len(ratios)} shared days)")
        if skipped:
            print(f"days skipped (zero OCT volume): {skipped}", file=sys.stderr)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="segsense",
        description="Model-selection and sensitivity-analysis toolkit for binary segmentation.",
    )
    parser.add_argument("--version", action="version", version=f"segsense {segsense.__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    _add_common(p)
    p.add_argument("--gt", required=True, help="ground-truth mask directory")
    p.add_argument("--pr", required=True, help="predicted mask directory")
    p.add_argument("--cutoff", type=int, default=None, help="gt binarization cutoff")
    p.add_argument("--threshold", type=float, default=None,
                   help="binarize predictions at this value instead of scoring soft")
    p.add_argument("--spacing", type=float, nargs=2, metavar=("DY", "DX"), default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run an N-Train/N-Test sweep with repeated trials")
    _add_common(p, out_required=True)
    p.add_argument("--workdir", default=None, help="scratch dir for external predictors")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit", help="fit saturation curves or scaling surfaces to a sweep")
    _add_common(p, out_required=True)
    p.add_argument("--results", required=True, help="sweep output directory")
    p.add_argument("--what", choices=("exp", "surface"), required=True)
    p.add_argument("--mode", choices=("final", "best"), default="final",
                   help="per-trial value used for surfaces")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("recommend", help="rank models by predicted index value")
    _add_common(p)
    p.add_argument("--fits", required=True, help="surface_fits.json from `segsense fit`")
    p.add_argument("--index", required=True, choices=sorted(RANKABLE_INDICES))
    p.add_argument("--ntrain", type=float, required=True)
    p.add_argument("--ntest", type=float, required=True)
    p.add_argument("--category", default="", help="data category label (recorded)")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("report", help="emit figure-ready tables for a sweep")
    _add_common(p, out_required=True)
    p.add_argument("--results", required=True, help="sweep output directory")
    p.add_argument("--mode", choices=("final", "best"), default="final")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("volume", help="quantify longitudinal volume from mask stacks")
    _add_common(p, out_required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--stacks", help="JSON manifest of (day, modality, stack_dir)")
    group.add_argument("--series", help="precomputed series CSV")
    p.add_argument("--cutoff", type=int, default=DEFAULT_CUTOFF)
    p.set_defaults(func=cmd_volume)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help/--version, 2 for usage problems
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def run():
    raise SystemExit(main(sys.argv[1:]))


if __name__ == "__main__":
    run()
