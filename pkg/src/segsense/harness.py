"""Experiment sweep orchestration: axis grids, repeated trials, predictors.

A sweep walks every (model, N-Train index, N-Test index, trial) cell,
deterministically subsamples the dataset, invokes the predictor and collects
per-epoch metric traces. Subset orders are derived from the master seed only,
so every model and trial sees the same data (re-runs measure predictor
variance, not sampling variance) and the subsets grow cumulatively along each
axis. Per-cell noise seeds include the full cell coordinates, so any cell can
be reproduced in isolation.

Predictors are either synthetic (seeded corruption of the ground truth, for
desk-scale verification) or external commands bridging to real models; see
``run_external`` for the command contract. A failing predictor marks its cell
failed and never aborts the sweep.
"""

import csv
import datetime
import hashlib
import json
import re
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from segsense.fitting import GridAxis, Trace
from segsense.masks import save_mask
from segsense.metrics import (
    DEFAULT_CONFIG,
    LOWER_IS_BETTER,
    METRIC_NAMES,
    MetricConfig,
    MetricRecord,
    batch_mean,
    evaluate_pair,
)

_MODEL_NAME = re.compile(r"^[A-Za-z0-9._-]+$")
_PLACEHOLDERS = ("{train_manifest}", "{test_manifest}", "{out_dir}", "{seed}", "{epochs}")

CELL_CSV_HEADER = ("epoch",) + METRIC_NAMES + ("hd_defined", "hd_undefined")


class ExternalPredictorError(RuntimeError):
    """Base class for failures of an external predictor invocation."""


class PredictorExitError(ExternalPredictorError):
    def __init__(self, returncode, stderr_tail):
        super().__init__(f"predictor exited with code {returncode}: {stderr_tail}")
        self.returncode = returncode


class PredictorTimeoutError(ExternalPredictorError):
    def __init__(self, timeout):
        super().__init__(f"predictor exceeded the {timeout}s wall-clock timeout")
        self.timeout = timeout


class PredictionSetError(ExternalPredictorError):
    def __init__(self, missing, extra):
        parts = []
        if missing:
            parts.append(f"missing predictions for {sorted(missing)}")
        if extra:
            parts.append(f"unexpected predictions {sorted(extra)}")
        super().__init__("; ".join(parts))
        self.missing = frozenset(missing)
        self.extra = frozenset(extra)


def derive_seed(*parts):
    """Stable 64-bit seed from a tuple of hashable parts.

    Uses blake2b over the repr, so derived seeds are reproducible across
    processes and platforms (unlike the builtin hash).
    """
    digest = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


@dataclass(frozen=True)
class DegradationParams:
    """How strongly a synthetic predictor corrupts the ground truth.

    Per-epoch noise decays as exp(-epoch_decay * epoch), so traces saturate
    the way real training curves do.
    """

    flip_rate: float = 0.0
    boundary_jitter: float = 0.0
    epoch_decay: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.flip_rate <= 1.0):
            raise ValueError(f"flip_rate must be in [0, 1], got {self.flip_rate}")
        if self.boundary_jitter < 0:
            raise ValueError(f"boundary_jitter must be >= 0, got {self.boundary_jitter}")
        if self.epoch_decay < 0:
            raise ValueError(f"epoch_decay must be >= 0, got {self.epoch_decay}")


@dataclass(frozen=True)
class PredictorSpec:
    """One predictor in a sweep: a synthetic degrader or an external command."""

    kind: str
    name: str
    command_template: str = ""
    degradation: DegradationParams | None = None
    trainable: bool = True
    timeout: float = 300.0

    def __post_init__(self):
        if self.kind not in ("synthetic", "external"):
            raise ValueError(f"kind must be 'synthetic' or 'external', got {self.kind!r}")
        if not _MODEL_NAME.match(self.name or ""):
            raise ValueError(f"model name must match [A-Za-z0-9._-]+, got {self.name!r}")
        if self.kind == "external" and not self.command_template.strip():
            raise ValueError(f"external predictor {self.name!r} needs a command template")
        if self.kind == "synthetic" and self.degradation is None:
            object.__setattr__(self, "degradation", DegradationParams())

    @classmethod
    def synthetic(cls, name, flip_rate=0.0, boundary_jitter=0.0, epoch_decay=0.0):
        return cls(kind="synthetic", name=name,
                   degradation=DegradationParams(flip_rate, boundary_jitter, epoch_decay))

    @classmethod
    def external(cls, name, command_template, timeout=300.0, trainable=True):
        return cls(kind="external", name=name, command_template=command_template,
                   timeout=timeout, trainable=trainable)

    def to_dict(self):
        out = {"name": self.name, "kind": self.kind, "trainable": self.trainable}
        if self.kind == "synthetic":
            out.update(
                flip_rate=self.degradation.flip_rate,
                boundary_jitter=self.degradation.boundary_jitter,
                epoch_decay=self.degradation.epoch_decay,
            )
        else:
            out.update(command=self.command_template, timeout=self.timeout)
        return out

    @classmethod
    def from_dict(cls, payload):
        kind = payload.get("kind", "synthetic")
        if kind == "synthetic":
            return cls.synthetic(
                payload["name"],
                flip_rate=float(payload.get("flip_rate", 0.0)),
                boundary_jitter=float(payload.get("boundary_jitter", 0.0)),
                epoch_decay=float(payload.get("epoch_decay", 0.0)),
            )
        return cls.external(
            payload["name"],
            payload["command"],
            timeout=float(payload.get("timeout", 300.0)),
            trainable=bool(payload.get("trainable", True)),
        )


@dataclass(frozen=True)
class SweepConfig:
    """Full description of a sweep; everything downstream derives from it.

    batch_size is recorded for provenance and passed along to external
    predictors' own configuration; the harness itself aggregates each epoch
    over the whole evaluated subset.
    """

    models: tuple
    ntrain_axis: GridAxis
    ntest_axis: GridAxis
    trials: int = 8
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    max_workers: int = 1
    metric_config: MetricConfig = DEFAULT_CONFIG
    spacing: tuple = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "spacing", tuple(self.spacing))
        if not self.models:
            raise ValueError("sweep needs at least one model")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ValueError(f"model names must be unique, got {names}")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if len(self.ntrain_axis) == 0 or len(self.ntest_axis) == 0:
            raise ValueError("axes must be nonempty")
        if self.max_workers < 1:
            raise ValueError(f"max_workers must be >= 1, got {self.max_workers}")

    def to_dict(self):
        return {
            "seed": self.seed,
            "trials": self.trials,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "max_workers": self.max_workers,
            "ntrain_axis": list(self.ntrain_axis.counts),
            "ntest_axis": list(self.ntest_axis.counts),
            "spacing": list(self.spacing),
            "metric": {
                "beta": self.metric_config.beta,
                "delta": self.metric_config.delta,
                "bce_clamp": self.metric_config.bce_clamp,
            },
            "models": [m.to_dict() for m in self.models],
        }

    @classmethod
    def from_dict(cls, payload):
        metric = payload.get("metric", {})
        return cls(
            models=tuple(PredictorSpec.from_dict(m) for m in payload["models"]),
            ntrain_axis=GridAxis(tuple(payload["ntrain_axis"])),
            ntest_axis=GridAxis(tuple(payload["ntest_axis"])),
            trials=int(payload.get("trials", 8)),
            epochs=int(payload.get("epochs", 100)),
            batch_size=int(payload.get("batch_size", 8)),
            seed=int(payload.get("seed", 0)),
            max_workers=int(payload.get("max_workers", 1)),
            metric_config=MetricConfig(
                beta=float(metric.get("beta", 1.0)),
                delta=float(metric.get("delta", 1e-5)),
                bce_clamp=float(metric.get("bce_clamp", 1e-7)),
            ),
            spacing=tuple(payload.get("spacing", (1.0, 1.0))),
        )


class CellKey(NamedTuple):
    model: str
    ntrain_idx: int
    ntest_idx: int
    trial: int


@dataclass(frozen=True)
class CellResult:
    """Per-epoch batch-mean records for one sweep cell."""

    key: CellKey
    epochs: tuple
    records: tuple
    hd_undefined: tuple

    def trace(self, index):
        """Metric trace over epochs for one index name."""
        return Trace(
            epochs=np.asarray(self.epochs, dtype=np.float64),
            values=np.asarray([r.value(index) for r in self.records]),
        )

    def final_record(self):
        return self.records[-1]


@dataclass(frozen=True)
class FailedCell:
    key: CellKey
    kind: str
    detail: str


@dataclass
class SweepResult:
    """All cell traces plus failures and provenance for one sweep run."""

    config: SweepConfig
    cells: dict = field(default_factory=dict)
    failed: dict = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""

    def all_keys(self):
        return [
            CellKey(m.name, i, j, t)
            for m in self.config.models
            for i in self.config.ntrain_axis.indices
            for j in self.config.ntest_axis.indices
            for t in range(1, self.config.trials + 1)
        ]

    def is_complete(self):
        expected = set(self.all_keys())
        got = set(self.cells) | set(self.failed)
        return got == expected and not (set(self.cells) & set(self.failed))

    def save(self, out_dir):
        """Persist as results/<model>/<ntr>/<nte>/<trial>/metrics.csv + sweep.json.

        metrics.csv content is a pure function of config and seed; wall-clock
        timestamps live only in sweep.json.
        """
        out_dir = Path(out_dir)
        results_dir = out_dir / "results"
        for key in sorted(self.cells):
            cell = self.cells[key]
            cell_dir = results_dir / key.model / str(key.ntrain_idx) / str(key.ntest_idx) / str(key.trial)
            cell_dir.mkdir(parents=True, exist_ok=True)
            with (cell_dir / "metrics.csv").open("w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(CELL_CSV_HEADER)
                for ep, rec, undef in zip(cell.epochs, cell.records, cell.hd_undefined):
                    writer.writerow(
                        [ep]
                        + [repr(float(rec.value(name))) for name in METRIC_NAMES]
                        + [int(rec.hd_defined), undef]
                    )
        for key in sorted(self.failed):
            failure = self.failed[key]
            cell_dir = results_dir / key.model / str(key.ntrain_idx) / str(key.ntest_idx) / str(key.trial)
            cell_dir.mkdir(parents=True, exist_ok=True)
            (cell_dir / "failed.json").write_text(
                json.dumps({"kind": failure.kind, "detail": failure.detail}, indent=2) + "\n",
                encoding="utf-8",
            )
        provenance = {
            "config": self.config.to_dict(),
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "cells_ok": len(self.cells),
            "cells_failed": len(self.failed),
        }
        (out_dir / "sweep.json").write_text(
            json.dumps(provenance, indent=2) + "\n", encoding="utf-8"
        )
        return out_dir

    @classmethod
    def load(cls, out_dir):
        out_dir = Path(out_dir)
        provenance = json.loads((out_dir / "sweep.json").read_text(encoding="utf-8"))
        config = SweepConfig.from_dict(provenance["config"])
        result = cls(
            config=config,
            started_at=provenance.get("started_at", ""),
            finished_at=provenance.get("finished_at", ""),
        )
        results_dir = out_dir / "results"
        for key in result.all_keys():
            cell_dir = results_dir / key.model / str(key.ntrain_idx) / str(key.ntest_idx) / str(key.trial)
            metrics_csv = cell_dir / "metrics.csv"
            failed_json = cell_dir / "failed.json"
            if metrics_csv.exists():
                result.cells[key] = _read_cell_csv(key, metrics_csv)
            elif failed_json.exists():
                payload = json.loads(failed_json.read_text(encoding="utf-8"))
                result.failed[key] = FailedCell(key, payload["kind"], payload["detail"])
        return result


def _read_cell_csv(key, path):
    epochs, records, undefined = [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            epochs.append(int(row["epoch"]))
            records.append(
                MetricRecord(
                    pair_id=f"epoch_{row['epoch']}",
                    hd_defined=bool(int(row["hd_defined"])),
                    **{name: float(row[name]) for name in METRIC_NAMES},
                )
            )
            undefined.append(int(row["hd_undefined"]))
    return CellResult(key=key, epochs=tuple(epochs), records=tuple(records),
                      hd_undefined=tuple(undefined))


def synthetic_predict(gt, degradation, seed, epoch=0):
    """Corrupt a ground-truth mask into a stand-in prediction.

    Two seeded corruptions are applied in fixed order: a boundary jitter
    (random dilation or erosion up to boundary_jitter steps) and independent
    per-pixel flips with probability flip_rate. Both magnitudes decay as
    exp(-epoch_decay * epoch). Returns a float array in [0, 1].
    """
    data = gt.data if hasattr(gt, "data") else np.asarray(gt)
    rng = np.random.default_rng(seed)
    fade = float(np.exp(-degradation.epoch_decay * epoch))

    out = data.astype(bool)
    jitter = degradation.boundary_jitter * fade
    steps = int(round(rng.uniform(-jitter, jitter)))
    if steps > 0:
        out = ndimage.binary_dilation(out, iterations=steps)
    elif steps < 0:
        out = ndimage.binary_erosion(out, iterations=-steps)

    flip_p = degradation.flip_rate * fade
    flips = rng.random(out.shape) < flip_p
    out = np.where(flips, ~out, out)
    return out.astype(np.float64)


def run_external(spec, workdir, train_manifest, test_manifest, seed, epochs):
    """Invoke an external predictor command and verify its predictions.

    The command template must contain the placeholders {train_manifest},
    {test_manifest}, {out_dir}, {seed} and {epochs}. After substitution the
    command runs under spec.timeout; it must leave one raster per test id in
    the out directory (flat for final-epoch predictions, or grouped in
    epoch_<N>/ subdirectories for per-epoch output). Returns the out
    directory path.
    """
    missing_placeholders = [p for p in _PLACEHOLDERS if p not in spec.command_template]
    if missing_placeholders:
        raise ValueError(
            f"command template for {spec.name!r} lacks placeholders: {missing_placeholders}"
        )
    workdir = Path(workdir)
    out_dir = workdir / "pred"
    out_dir.mkdir(parents=True, exist_ok=True)
    command = spec.command_template.format(
        train_manifest=str(train_manifest),
        test_manifest=str(test_manifest),
        out_dir=str(out_dir),
        seed=seed,
        epochs=epochs,
    )
    try:
        proc = subprocess.run(
            shlex.split(command),
            capture_output=True,
            text=True,
            timeout=spec.timeout,
            cwd=workdir,
        )
    except subprocess.TimeoutExpired:
        raise PredictorTimeoutError(spec.timeout) from None
    if proc.returncode != 0:
        raise PredictorExitError(proc.returncode, (proc.stderr or proc.stdout)[-500:].strip())

    expected = set(json.loads(Path(test_manifest).read_text(encoding="utf-8"))["ids"])
    epoch_dirs = sorted(p for p in out_dir.iterdir() if p.is_dir() and p.name.startswith("epoch_"))
    for directory in epoch_dirs or [out_dir]:
        found = {p.stem for p in directory.iterdir()
                 if p.is_file() and p.suffix.lower() in (".png", ".pgm")}
        if found != expected:
            raise PredictionSetError(missing=expected - found, extra=found - expected)
    return out_dir


def subset_order(seed, ids, label):
    """Deterministic presentation order of a split's ids for subsampling.

    Depends only on the master seed and the axis label, so all models and
    trials draw the same nested subsets.
    """
    ids = list(ids)
    perm = np.random.default_rng(derive_seed(seed, label, "subset-order")).permutation(len(ids))
    return [ids[i] for i in perm]


def axis_subset_ids(config, split, axis, index):
    """ids drawn for one axis index; axis is 'train' or 'test'.

    Subsets are prefixes of a seed-derived order, so they nest as the index
    grows.
    """
    if axis == "train":
        order = subset_order(config.seed, split.train, "train")
        return order[: config.ntrain_axis.count_at(index)]
    if axis == "test":
        order = subset_order(config.seed, split.test, "test")
        return order[: config.ntest_axis.count_at(index)]
    raise ValueError(f"axis must be 'train' or 'test', got {axis!r}")


def _preflight(config, split):
    problems = []
    for model in config.models:
        if model.kind != "external":
            continue
        absent = [p for p in _PLACEHOLDERS if p not in model.command_template]
        if absent:
            problems.append(f"model {model.name!r} command template lacks {absent}")
    if config.ntrain_axis.counts[-1] > len(split.train):
        for i in config.ntrain_axis.indices:
            if config.ntrain_axis.count_at(i) > len(split.train):
                problems.append(
                    f"ntrain index {i} needs {config.ntrain_axis.count_at(i)} "
                    f"train images, split has {len(split.train)}"
                )
    if config.ntest_axis.counts[-1] > len(split.test):
        for j in config.ntest_axis.indices:
            if config.ntest_axis.count_at(j) > len(split.test):
                problems.append(
                    f"ntest index {j} needs {config.ntest_axis.count_at(j)} "
                    f"test images, split has {len(split.test)}"
                )
    if problems:
        raise ValueError("sweep preflight failed: " + "; ".join(problems))


def _predictor_by_name(config, name):
    for model in config.models:
        if model.name == name:
            return model
    raise KeyError(name)


def _run_synthetic_cell(config, key, spec, test_masks):
    epochs, records, undefined = [], [], []
    for ep in range(1, config.epochs + 1):
        epoch_records = []
        for source_id, gt in test_masks:
            pred = synthetic_predict(
                gt,
                spec.degradation,
                seed=derive_seed(config.seed, key.model, key.ntrain_idx,
                                 key.ntest_idx, key.trial, ep, source_id),
                epoch=ep,
            )
            epoch_records.append(
                evaluate_pair(gt, pred, config=config.metric_config,
                              spacing=config.spacing, pair_id=source_id)
            )
        mean, hd_undef = batch_mean(epoch_records, pair_id=f"epoch_{ep}")
        epochs.append(ep)
        records.append(mean)
        undefined.append(hd_undef)
    return CellResult(key=key, epochs=tuple(epochs), records=tuple(records),
                      hd_undefined=tuple(undefined))


def _load_soft_prediction(path):
    from segsense.masks import load_gray

    return load_gray(path).data / 255.0


def _run_external_cell(config, key, spec, dataset, train_ids, test_ids, cell_dir):
    cell_seed = derive_seed(config.seed, key.model, key.ntrain_idx, key.ntest_idx, key.trial)
    gt_dir = cell_dir / "gt"
    for source_id in sorted(set(train_ids) | set(test_ids)):
        save_mask(dataset[source_id], gt_dir / f"{source_id}.png")
    manifests = {}
    for label, ids in (("train", train_ids), ("test", test_ids)):
        manifest = cell_dir / f"{label}_manifest.json"
        manifest.write_text(
            json.dumps({"ids": list(ids), "gt_dir": str(gt_dir),
                        "seed": cell_seed, "epochs": config.epochs}, indent=2) + "\n",
            encoding="utf-8",
        )
        manifests[label] = manifest

    out_dir = run_external(spec, cell_dir, manifests["train"], manifests["test"],
                           seed=cell_seed, epochs=config.epochs)

    epoch_dirs = sorted(
        (p for p in out_dir.iterdir() if p.is_dir() and p.name.startswith("epoch_")),
        key=lambda p: int(p.name.split("_", 1)[1]),
    )
    per_epoch = [(int(p.name.split("_", 1)[1]), p) for p in epoch_dirs] or [(config.epochs, out_dir)]

    epochs, records, undefined = [], [], []
    for ep, directory in per_epoch:
        epoch_records = []
        for source_id in test_ids:
            pred_path = directory / f"{source_id}.png"
            if not pred_path.exists():
                pred_path = directory / f"{source_id}.pgm"
            pred = _load_soft_prediction(pred_path)
            epoch_records.append(
                evaluate_pair(dataset[source_id], pred, config=config.metric_config,
                              spacing=config.spacing, pair_id=source_id)
            )
        mean, hd_undef = batch_mean(epoch_records, pair_id=f"epoch_{ep}")
        epochs.append(ep)
        records.append(mean)
        undefined.append(hd_undef)
    return CellResult(key=key, epochs=tuple(epochs), records=tuple(records),
                      hd_undefined=tuple(undefined))


def run_sweep(config, dataset, split, workdir=None):
    """Run every sweep cell and collect traces.

    dataset maps source ids to ground-truth masks; split supplies the id
    pools. workdir is required when any model is external (each cell gets an
    isolated subdirectory there). Deterministic given config.seed and
    deterministic predictors.
    """
    _preflight(config, split)
    has_external = any(m.kind == "external" for m in config.models)
    if has_external and workdir is None:
        raise ValueError("external predictors need a workdir")

    train_order = subset_order(config.seed, split.train, "train")
    test_order = subset_order(config.seed, split.test, "test")
    for source_id in set(train_order) | set(test_order):
        if source_id not in dataset:
            raise ValueError(f"split id {source_id!r} missing from the dataset")

    result = SweepResult(config=config)
    result.started_at = datetime.datetime.now(datetime.timezone.utc).isoformat()
    keys = result.all_keys()

    def run_cell(key):
        spec = _predictor_by_name(config, key.model)
        test_masks = [
            (source_id, dataset[source_id])
            for source_id in test_order[: config.ntest_axis.count_at(key.ntest_idx)]
        ]
        if spec.kind == "synthetic":
            return _run_synthetic_cell(config, key, spec, test_masks)
        cell_dir = (Path(workdir) / key.model / str(key.ntrain_idx)
                    / str(key.ntest_idx) / str(key.trial))
        cell_dir.mkdir(parents=True, exist_ok=True)
        train_ids = train_order[: config.ntrain_axis.count_at(key.ntrain_idx)]
        test_ids = [source_id for source_id, _ in test_masks]
        try:
            return _run_external_cell(config, key, spec, dataset, train_ids, test_ids, cell_dir)
        except PredictorExitError as exc:
            return FailedCell(key, "exit", str(exc))
        except PredictorTimeoutError as exc:
            return FailedCell(key, "timeout", str(exc))
        except PredictionSetError as exc:
            return FailedCell(key, "predictions", str(exc))
        except (OSError, ValueError) as exc:
            return FailedCell(key, "error", str(exc))

    if config.max_workers > 1:
        with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
            outcomes = list(pool.map(run_cell, keys))
    else:
        outcomes = [run_cell(key) for key in keys]

    for key, outcome in zip(keys, outcomes):
        if isinstance(outcome, FailedCell):
            result.failed[key] = outcome
        else:
            result.cells[key] = outcome
    result.finished_at = datetime.datetime.now(datetime.timezone.utc).isoformat()
    return result


def _sample_std(values):
    # exactly 0 for constant input (a naive mean makes np.std return ~1e-16)
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2 or np.all(arr == arr.flat[0]):
        return 0.0
    return float(np.std(arr, ddof=1))


@dataclass(frozen=True)
class BoxStats:
    """Five-number summary plus sample standard deviation."""

    min: float
    q1: float
    median: float
    q3: float
    max: float
    stddev: float
    n: int


def reproducibility_stats(values):
    """Box statistics over repeated-trial values.

    Quartiles use linear interpolation between closest ranks; stddev is the
    sample standard deviation (n-1 denominator, 0 for a single value).
    """
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("reproducibility_stats needs at least one value")
    q1, median, q3 = np.percentile(arr, [25.0, 50.0, 75.0], method="linear")
    stddev = _sample_std(arr)
    return BoxStats(
        min=float(arr.min()),
        q1=float(q1),
        median=float(median),
        q3=float(q3),
        max=float(arr.max()),
        stddev=stddev,
        n=int(arr.size),
    )


def cell_value(cell, index, mode="final"):
    """Scalar value of one index for a cell: final epoch or best over epochs."""
    trace = [(r.value(index), r.hd_defined if index == "hausdorff" else True)
             for r in cell.records]
    defined = [v for v, ok in trace if ok]
    if not defined:
        return None
    if mode == "final":
        value, ok = trace[-1]
        return value if ok else None
    if mode == "best":
        return min(defined) if index in LOWER_IS_BETTER else max(defined)
    raise ValueError(f"mode must be 'final' or 'best', got {mode!r}")


def index_sensitivity_ranking(result, mode="final"):
    """Rank metric indices by mean across-trial standard deviation, descending.

    For every (model, ntrain, ntest) group the standard deviation of the
    index value over trials is computed, then averaged over all groups.
    Ties break alphabetically by index name.
    """
    if result.config.trials < 2:
        raise ValueError("sensitivity ranking needs at least 2 trials per cell")
    groups = {}
    for key, cell in result.cells.items():
        groups.setdefault((key.model, key.ntrain_idx, key.ntest_idx), []).append(cell)

    ranking = []
    for index in METRIC_NAMES:
        stddevs = []
        for cells in groups.values():
            values = [v for v in (cell_value(c, index, mode) for c in cells) if v is not None]
            if len(values) >= 2:
                stddevs.append(_sample_std(values))
        if stddevs:
            ranking.append((index, float(np.mean(stddevs))))
    ranking.sort(key=lambda item: (-item[1], item[0]))
    return ranking
