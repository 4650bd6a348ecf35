"""Report generation and model recommendation over sweep results.

Everything here emits plot-ready tables (CSV) or JSON; rendering is left to
the consumer. Values are written at full double precision, timestamps appear
only in provenance fields.
"""

import csv
import datetime
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import segsense
from segsense.fitting import (
    ExponentialFitError,
    Trace,
    eval_surface,
    fit_exponential,
    fit_surface,
)
from segsense.harness import cell_value, index_sensitivity_ranking, reproducibility_stats
from segsense.masks import DEFAULT_CUTOFF, load_gray, load_mask
from segsense.metrics import (
    DEFAULT_CONFIG,
    LOWER_IS_BETTER,
    METRIC_NAMES,
    evaluate_pair,
)

_RASTER_EXTENSIONS = (".png", ".pgm")

RANKABLE_INDICES = METRIC_NAMES + ("esr",)


@dataclass(frozen=True)
class Recommendation:
    """Models ranked by their predicted score for one index at one point."""

    ranked: tuple
    index: str
    ntrain: float
    ntest: float
    units: str
    category: str = ""

    def to_json_dict(self):
        return {
            "index": self.index,
            "ntrain": self.ntrain,
            "ntest": self.ntest,
            "units": self.units,
            "category": self.category,
            "ranked": [{"model": m, "predicted": v} for m, v in self.ranked],
        }


@dataclass
class ReportBundle:
    """Named tables plus fit payloads and run provenance."""

    tables: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def add_table(self, name, header, rows):
        self.tables[name] = {"header": list(header), "rows": [list(r) for r in rows]}

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, table in self.tables.items():
            with (out_dir / f"{name}.csv").open("w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(table["header"])
                writer.writerows(table["rows"])
        if self.fits:
            (out_dir / "fits.json").write_text(
                json.dumps(self.fits, indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
        (out_dir / "provenance.json").write_text(
            json.dumps(self.provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        return out_dir


def config_hash(config):
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _provenance(config=None):
    out = {
        "tool_version": segsense.__version__,
        "generated_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if config is not None:
        out["config_hash"] = config_hash(config)
    return out


def recommend(fits_by_model, index, ntrain, ntest, units=None, category=""):
    """Rank models by the predicted value of one index at (ntrain, ntest).

    fits_by_model maps model name to {index name: SurfaceFit}. Higher
    predictions rank first for overlap indices, lower for error/loss
    indices; ties break by model name. A model without a fit for the
    requested index is an error naming that model.
    """
    if index not in RANKABLE_INDICES:
        raise ValueError(f"unknown index {index!r}; expected one of {RANKABLE_INDICES}")
    missing = sorted(m for m, fits in fits_by_model.items() if index not in fits)
    if missing:
        raise ValueError(f"no {index!r} surface fit for model(s): {missing}")
    if not fits_by_model:
        raise ValueError("no model fits supplied")

    scored = []
    fit_units = set()
    for model, fits in fits_by_model.items():
        fit = fits[index]
        fit_units.add(fit.axis_units)
        scored.append((model, eval_surface(fit, ntrain, ntest, units=units)))
    if len(fit_units) > 1:
        raise ValueError(f"inconsistent fit units across models: {sorted(fit_units)}")

    ascending = index in LOWER_IS_BETTER
    scored.sort(key=lambda item: (item[1] if ascending else -item[1], item[0]))
    return Recommendation(
        ranked=tuple(scored),
        index=index,
        ntrain=ntrain,
        ntest=ntest,
        units=fit_units.pop(),
        category=category,
    )


def _raster_stems(directory):
    directory = Path(directory)
    return {
        p.stem: p
        for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in _RASTER_EXTENSIONS
    }


def evaluate_directories(gt_dir, pr_dir, config=DEFAULT_CONFIG, spacing=(1.0, 1.0),
                         cutoff=DEFAULT_CUTOFF, threshold=None):
    """Evaluate all id-matched gt/pr raster pairs from two directories.

    Ground truth is binarized at the cutoff; predictions are read as soft
    values (intensity / 255) unless a threshold is requested. Returns
    (records, gt_only_ids, pr_only_ids, per_pair_errors).
    """
    gt_files = _raster_stems(gt_dir)
    pr_files = _raster_stems(pr_dir)
    gt_only = sorted(set(gt_files) - set(pr_files))
    pr_only = sorted(set(pr_files) - set(gt_files))

    records, errors = [], {}
    for stem in sorted(set(gt_files) & set(pr_files)):
        try:
            gt = load_mask(gt_files[stem], cutoff=cutoff)
            pr = load_gray(pr_files[stem]).data / 255.0
            records.append(
                evaluate_pair(gt, pr, config=config, spacing=spacing,
                              pair_id=stem, threshold=threshold)
            )
        except ValueError as exc:
            errors[stem] = str(exc)
    return records, gt_only, pr_only, errors


def mean_trace(result, model, ntrain_idx, ntest_idx, index):
    """Across-trial mean trace for one grid cell, or None if no cell succeeded.

    Epochs present in every contributing trial are averaged; for the
    Hausdorff index, epochs where any trial is undefined are dropped.
    """
    cells = [
        cell for key, cell in result.cells.items()
        if key.model == model and key.ntrain_idx == ntrain_idx and key.ntest_idx == ntest_idx
    ]
    if not cells:
        return None
    per_epoch = {}
    for cell in cells:
        for ep, record in zip(cell.epochs, cell.records):
            value = record.value(index)
            if math.isfinite(value):
                per_epoch.setdefault(ep, []).append(value)
    epochs = sorted(ep for ep, vals in per_epoch.items() if len(vals) == len(cells))
    if not epochs:
        return None
    return Trace(
        epochs=np.asarray(epochs, dtype=np.float64),
        values=np.asarray([np.mean(per_epoch[ep]) for ep in epochs]),
    )


def fit_sweep_exponential(result, indices=METRIC_NAMES):
    """Fit the saturation curve to every (model, cell, index) mean trace.

    Returns rows of (model, ntrain_idx, ntest_idx, index, status, fit);
    degenerate and non-converged traces are flagged, not fatal.
    """
    rows = []
    config = result.config
    for model in config.models:
        for i in config.ntrain_axis.indices:
            for j in config.ntest_axis.indices:
                for index in indices:
                    trace = mean_trace(result, model.name, i, j, index)
                    if trace is None:
                        continue
                    if len(trace) < 4:
                        rows.append((model.name, i, j, index, "too_short", None))
                        continue
                    try:
                        fit = fit_exponential(trace)
                    except ExponentialFitError as exc:
                        rows.append((model.name, i, j, index, "no_convergence", exc.best))
                        continue
                    status = "degenerate" if fit.degenerate else "ok"
                    rows.append((model.name, i, j, index, status, fit))
    return rows


def _cell_esr(cell, source_index):
    trace = cell.trace(source_index)
    if len(trace) < 4:
        return None
    try:
        fit = fit_exponential(trace)
    except ExponentialFitError:
        return None
    return fit.esr


def surface_samples(result, index, units="index", mode="final", esr_source="loss_bce"):
    """Per-model (ntr, nte, mean value) samples for surface fitting.

    The esr pseudo-index is the fitted saturation rate of each cell's
    esr_source trace; everything else reads the cell records directly.
    """
    config = result.config
    samples = {m.name: [] for m in config.models}
    for i in config.ntrain_axis.indices:
        ntr = i if units == "index" else config.ntrain_axis.count_at(i)
        for j in config.ntest_axis.indices:
            nte = j if units == "index" else config.ntest_axis.count_at(j)
            per_model = {m.name: [] for m in config.models}
            for key, cell in result.cells.items():
                if key.ntrain_idx != i or key.ntest_idx != j:
                    continue
                if index == "esr":
                    value = _cell_esr(cell, esr_source)
                else:
                    value = cell_value(cell, index, mode)
                if value is not None:
                    per_model[key.model].append(value)
            for name, values in per_model.items():
                if values:
                    samples[name].append((ntr, nte, float(np.mean(values))))
    return samples


def fit_sweep_surfaces(result, indices=METRIC_NAMES, units="index", mode="final",
                       esr_source="loss_bce"):
    """Fit a scaling surface per (model, index) over the sweep grid."""
    fits = {}
    for index in indices:
        per_model = surface_samples(result, index, units=units, mode=mode,
                                    esr_source=esr_source)
        for model, samples in per_model.items():
            if not samples:
                continue
            fits.setdefault(model, {})[index] = fit_surface(samples, units=units)
    return fits


def build_report(result, mode="final"):
    """Assemble figure-ready tables for one sweep result.

    Tables: per-cell mean values over the (N-Train, N-Test) grid, box
    statistics per (model, index, N-Train index) across trials and N-Test
    cells, the index-sensitivity ranking, and the failed-cell manifest.
    """
    config = result.config
    bundle = ReportBundle(provenance=_provenance(config))

    mean_rows = []
    for model in config.models:
        for index in METRIC_NAMES:
            for i in config.ntrain_axis.indices:
                for j in config.ntest_axis.indices:
                    values = [
                        v for key, cell in result.cells.items()
                        if key.model == model.name
                        and key.ntrain_idx == i and key.ntest_idx == j
                        for v in [cell_value(cell, index, mode)]
                        if v is not None
                    ]
                    if values:
                        mean_rows.append([
                            model.name, index,
                            i, config.ntrain_axis.count_at(i),
                            j, config.ntest_axis.count_at(j),
                            repr(float(np.mean(values))), len(values),
                        ])
    bundle.add_table(
        "mean_by_cell",
        ["model", "index", "ntrain_idx", "ntrain_count", "ntest_idx", "ntest_count",
         "mean_value", "n_trials"],
        mean_rows,
    )

    box_rows = []
    for model in config.models:
        for index in METRIC_NAMES:
            for i in config.ntrain_axis.indices:
                values = [
                    v for key, cell in result.cells.items()
                    if key.model == model.name and key.ntrain_idx == i
                    for v in [cell_value(cell, index, mode)]
                    if v is not None
                ]
                if values:
                    stats = reproducibility_stats(values)
                    box_rows.append([
                        model.name, index, i,
                        repr(stats.min), repr(stats.q1), repr(stats.median),
                        repr(stats.q3), repr(stats.max), repr(stats.stddev), stats.n,
                    ])
    bundle.add_table(
        "box_stats",
        ["model", "index", "ntrain_idx", "min", "q1", "median", "q3", "max",
         "stddev", "n"],
        box_rows,
    )

    sensitivity_rows = []
    if result.cells and result.config.trials >= 2:
        for rank, (index, value) in enumerate(index_sensitivity_ranking(result, mode), 1):
            sensitivity_rows.append([rank, index, repr(value)])
    bundle.add_table("sensitivity", ["rank", "index", "mean_stddev"], sensitivity_rows)

    failed_rows = [
        [key.model, key.ntrain_idx, key.ntest_idx, key.trial, failure.kind, failure.detail]
        for key, failure in sorted(result.failed.items())
    ]
    bundle.add_table(
        "failed_cells",
        ["model", "ntrain_idx", "ntest_idx", "trial", "kind", "detail"],
        failed_rows,
    )
    return bundle
