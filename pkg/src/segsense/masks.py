"""Binary mask data model: loading, binarization, filtering, resizing, splits.

Masks are stored normalized to {0, 1} (tumor / no tumor). All operations are
pure functions over immutable inputs and are safe to call concurrently.
"""

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from segsense.validation import as_2d_array, as_binary_array, check_in_range

DEFAULT_CUTOFF = 127
DEFAULT_MIN_FOREGROUND = 50

_SLICE_SUFFIX = re.compile(r"(\d+)$")
_RASTER_EXTENSIONS = (".png", ".pgm")


def _frozen_view(arr):
    out = np.ascontiguousarray(arr)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale raster with intensities in [0, 255]."""

    data: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        arr = as_2d_array(self.data, "image data")
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError(
                f"intensities must lie in [0, 255], got range "
                f"[{arr.min()}, {arr.max()}]"
            )
        object.__setattr__(self, "data", _frozen_view(arr))

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class Mask:
    """2D binary foreground/background grid, values exactly {0, 1}."""

    data: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        arr = as_binary_array(self.data, "mask data").astype(np.uint8)
        object.__setattr__(self, "data", _frozen_view(arr))

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class MaskStack:
    """Ordered slice sequence forming a 3D volume; slices share dimensions."""

    slices: tuple
    stack_id: str = ""
    slice_index_origin: int = 0

    def __post_init__(self):
        slices = tuple(self.slices)
        shapes = {s.data.shape for s in slices}
        if len(shapes) > 1:
            raise ValueError(
                f"stack {self.stack_id!r}: slice dimensions differ: {sorted(shapes)}"
            )
        object.__setattr__(self, "slices", slices)

    def __len__(self):
        return len(self.slices)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/test/validation id lists plus the shuffle seed."""

    train: tuple
    test: tuple
    validation: tuple
    seed: int

    def __post_init__(self):
        parts = (tuple(self.train), tuple(self.test), tuple(self.validation))
        object.__setattr__(self, "train", parts[0])
        object.__setattr__(self, "test", parts[1])
        object.__setattr__(self, "validation", parts[2])
        union = parts[0] + parts[1] + parts[2]
        if len(set(union)) != len(union):
            raise ValueError("split lists must be pairwise disjoint")


def to_binary(img, cutoff=DEFAULT_CUTOFF):
    """Binarize a grayscale image: pixel becomes 1 iff intensity > cutoff."""
    check_in_range(cutoff, 0, 255, "cutoff")
    if isinstance(img, GrayImage):
        data, source_id = img.data, img.source_id
    else:
        data, source_id = as_2d_array(img, "image"), ""
    return Mask(data=(data > cutoff).astype(np.uint8), source_id=source_id)


def foreground_count(m):
    """Number of foreground (value 1) pixels in a mask."""
    data = m.data if isinstance(m, Mask) else as_binary_array(m)
    return int(np.count_nonzero(data))


def filter_informative(masks, min_count=DEFAULT_MIN_FOREGROUND):
    """Keep masks whose foreground count is at least min_count, order preserved.

    Nearly-black masks teach a segmentation model nothing, so the pipeline
    drops them before training; the default admission threshold is 50 pixels.
    """
    if min_count < 0:
        raise ValueError(f"min_count must be >= 0, got {min_count}")
    return [m for m in masks if foreground_count(m) >= min_count]


def resize_mask(m, scale):
    """Downscale a mask by nearest-neighbor sampling; output stays binary.

    Output dimensions are floor(scale * input dimensions); both must remain
    at least one pixel. Sampling uses the pixel-center convention, so
    scale=1.0 is the identity.
    """
    if not (0.0 < scale <= 1.0):
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    out_h = int(m.height * scale)
    out_w = int(m.width * scale)
    if out_h < 1 or out_w < 1:
        raise ValueError(
            f"scale {scale} collapses {m.height}x{m.width} mask to zero size"
        )
    rows = np.minimum(((np.arange(out_h) + 0.5) / scale).astype(int), m.height - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) / scale).astype(int), m.width - 1)
    return Mask(data=m.data[np.ix_(rows, cols)], source_id=m.source_id)


def partition(ids, ratios, seed):
    """Deterministically shuffle ids and split into train/test/validation.

    Sizes are floor-allocated from the ratios with the remainder going to
    train (training benefits most from extra images). The same ids and seed
    always produce the same split.
    """
    ids = list(ids)
    if len(ids) < 3:
        raise ValueError(f"need at least 3 ids to populate all splits, got {len(ids)}")
    if len(ratios) != 3:
        raise ValueError("ratios must be (train, test, validation)")
    if any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got sum {sum(ratios)}")

    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    # epsilon guards floor against 0.29 * 100 == 28.999... style float error
    n_test = int(n * ratios[1] + 1e-9)
    n_val = int(n * ratios[2] + 1e-9)
    n_train = n - n_test - n_val
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        test=tuple(shuffled[n_train:n_train + n_test]),
        validation=tuple(shuffled[n_train + n_test:]),
        seed=seed,
    )


def write_split(split, path):
    """Write a split manifest as JSON."""
    payload = {
        "seed": split.seed,
        "train": list(split.train),
        "test": list(split.test),
        "validation": list(split.validation),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_split(path):
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return DatasetSplit(
        train=tuple(payload["train"]),
        test=tuple(payload["test"]),
        validation=tuple(payload["validation"]),
        seed=int(payload["seed"]),
    )


def load_gray(path):
    """Load an 8-bit grayscale PNG/PGM raster as a GrayImage."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise ValueError(
                    f"{path}: expected 8-bit grayscale input, got mode {img.mode!r}"
                )
            data = np.asarray(img, dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"{path}: unreadable raster ({exc})") from exc
    return GrayImage(data=data, source_id=path.stem)


def load_mask(path, cutoff=DEFAULT_CUTOFF):
    """Load a raster and binarize it with the configured cutoff."""
    return to_binary(load_gray(path), cutoff=cutoff)


def save_mask(m, path):
    """Write a mask as an 8-bit raster (foreground 255, background 0)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((m.data * 255).astype(np.uint8), mode="L").save(path)


def load_stack(directory, cutoff=DEFAULT_CUTOFF):
    """Load a directory of slice rasters as a MaskStack.

    Slice files must carry a sortable numeric suffix (slice_0001.png, ...);
    slices are ordered by that index, not lexically.
    """
    directory = Path(directory)
    indexed = []
    for p in directory.iterdir():
        if p.suffix.lower() not in _RASTER_EXTENSIONS:
            continue
        match = _SLICE_SUFFIX.search(p.stem)
        if match is None:
            raise ValueError(f"{p}: slice filename lacks a numeric suffix")
        indexed.append((int(match.group(1)), p))
    if not indexed:
        raise ValueError(f"{directory}: no slice rasters found")
    indexed.sort(key=lambda pair: pair[0])
    slices = tuple(load_mask(p, cutoff=cutoff) for _, p in indexed)
    return MaskStack(
        slices=slices,
        stack_id=directory.name,
        slice_index_origin=indexed[0][0],
    )
