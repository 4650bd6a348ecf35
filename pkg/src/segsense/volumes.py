"""Longitudinal tumor volume quantification from segmented mask stacks.

Volume is the foreground voxel count of a stack; growth curves are reported
normalized by the series maximum, and the structural-vs-vascular comparison
uses the raw-count ratio between the two modalities on shared days.
"""

import csv
from dataclasses import dataclass, replace
from pathlib import Path

from segsense.masks import foreground_count

MODALITIES = ("OCT", "OCT-A")


@dataclass(frozen=True)
class VolumeSample:
    """Segmented volume of one stack on one follow-up day."""

    day: int
    stack_id: str
    voxel_count: int
    normalized_volume: float | None = None

    def __post_init__(self):
        if self.voxel_count < 0:
            raise ValueError(f"voxel_count must be >= 0, got {self.voxel_count}")


@dataclass(frozen=True)
class VolumeSeries:
    """Volume samples for one modality, ordered by day."""

    modality: str
    samples: tuple

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        samples = tuple(sorted(self.samples, key=lambda s: s.day))
        days = [s.day for s in samples]
        if len(set(days)) != len(days):
            raise ValueError(f"{self.modality}: at most one sample per day, got days {days}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    def count_by_day(self):
        return {s.day: s.voxel_count for s in self.samples}


def stack_volume(stack):
    """Foreground voxel count of a mask stack (sum over slices)."""
    return sum(foreground_count(s) for s in stack.slices)


def physical_volume(voxel_count, voxel_spacing):
    """Volume in physical units given (dz, dy, dx) voxel spacing."""
    dz, dy, dx = voxel_spacing
    return voxel_count * dz * dy * dx


def normalize_series(series):
    """Scale voxel counts by the series maximum so the peak maps to 1.0."""
    peak = max((s.voxel_count for s in series.samples), default=0)
    if peak <= 0:
        raise ValueError(f"{series.modality}: cannot normalize an all-zero series")
    samples = tuple(
        replace(s, normalized_volume=s.voxel_count / peak) for s in series.samples
    )
    return VolumeSeries(modality=series.modality, samples=samples)


def modality_ratio(octa_series, oct_series):
    """Raw-count ratio OCT-A / OCT on the days both series cover.

    Days where the OCT count is zero cannot form a ratio; they are skipped
    and returned separately. Normalized values are deliberately not used:
    each series normalizes by its own maximum, so only raw counts share a
    scale.
    """
    if octa_series.modality != "OCT-A" or oct_series.modality != "OCT":
        raise ValueError(
            f"expected (OCT-A, OCT) series, got "
            f"({octa_series.modality!r}, {oct_series.modality!r})"
        )
    octa = octa_series.count_by_day()
    oct_ = oct_series.count_by_day()
    ratios, skipped = [], []
    for day in sorted(octa.keys() & oct_.keys()):
        if oct_[day] == 0:
            skipped.append(day)
        else:
            ratios.append((day, octa[day] / oct_[day]))
    return ratios, skipped


def write_series_csv(path, series_list):
    """Emit `day,modality,stack_id,voxel_count,normalized_volume` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day", "modality", "stack_id", "voxel_count", "normalized_volume"])
        for series in series_list:
            for s in series.samples:
                normalized = "" if s.normalized_volume is None else repr(float(s.normalized_volume))
                writer.writerow([s.day, series.modality, s.stack_id, s.voxel_count, normalized])
    return path


def read_series_csv(path):
    """Read series rows back into one VolumeSeries per modality present."""
    by_modality = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            raw = row.get("normalized_volume", "")
            sample = VolumeSample(
                day=int(row["day"]),
                stack_id=row["stack_id"],
                voxel_count=int(row["voxel_count"]),
                normalized_volume=float(raw) if raw not in ("", None) else None,
            )
            by_modality.setdefault(row["modality"], []).append(sample)
    return [
        VolumeSeries(modality=modality, samples=tuple(samples))
        for modality, samples in sorted(by_modality.items())
    ]


def write_ratio_csv(path, ratios):
    """Emit `day,ratio` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day", "ratio"])
        for day, ratio in ratios:
            writer.writerow([day, repr(float(ratio))])
    return path
