"""Overlap and distance metrics for 2-D label maps.

Distances are in millimetres: point sets hold pixel-centre coordinates
scaled by the (square) pixel spacing. Empty point sets do not raise; the
distance functions return a sentinel (the image diagonal) when one is given
and the caller records a flag.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

CSV_HEADER = ["case", "class", "dsc", "ahd_mm", "ashd_mm", "vd_pct", "flags"]


@dataclass
class LabelMap:
    labels: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError("label map must hold integer class ids")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("class ids must be non-negative")
        if not self.spacing > 0:
            raise ValueError("pixel spacing must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def mask(self, cls: int) -> np.ndarray:
        return self.labels == cls

    def diagonal_mm(self) -> float:
        h, w = self.shape
        return math.hypot(h, w) * self.spacing


def mask_points(mask: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Coordinates (row, col) in mm of the foreground pixels, shape ``[N, 2]``."""
    return np.argwhere(np.asarray(mask, dtype=bool)).astype(np.float64) * spacing


def dsc(truth_mask: np.ndarray, pred_mask: np.ndarray) -> float:
    """Dice ``2|T & P| / (|T| + |P|)``; two empty masks score 1.0."""
    t = np.asarray(truth_mask, dtype=bool)
    p = np.asarray(pred_mask, dtype=bool)
    if t.shape != p.shape:
        raise ValueError(f"dsc: shape mismatch {t.shape} vs {p.shape}")
    total = int(t.sum()) + int(p.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(t, p).sum()) / total


def vd(pred_mask: np.ndarray, truth_mask: np.ndarray) -> float:
    """Relative volume difference in percent; positive means over-segmentation."""
    r = int(np.count_nonzero(pred_mask))
    g = int(np.count_nonzero(truth_mask))
    if g == 0:
        raise ValueError("vd: ground truth is empty")
    return (r - g) / g * 100.0


def extract_surface(mask: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Foreground pixels with a 4-connected background neighbour (outside counts as background)."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return mask_points(m & ~interior, spacing)


# ---------------------------------------------------------------------------
# point-set distances


def _nearest(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(d, dtype=np.float64)


def _empty(*sets: np.ndarray) -> bool:
    return any(len(s) == 0 for s in sets)


def _sentinel(sentinel: float | None) -> float:
    if sentinel is None:
        raise ValueError("distance between empty point sets is undefined")
    return float(sentinel)


def directed_hd(x: np.ndarray, y: np.ndarray, sentinel: float | None = None) -> float:
    """``max_x min_y d(x, y)``; not symmetric."""
    if _empty(x, y):
        return _sentinel(sentinel)
    return float(_nearest(x, y).max())


def mean_min_distance(x: np.ndarray, y: np.ndarray) -> float:
    return float(_nearest(x, y).mean())


def ahd(x: np.ndarray, y: np.ndarray, sentinel: float | None = None) -> float:
    """Average Hausdorff distance: the larger of the two directed mean distances."""
    if _empty(x, y):
        return _sentinel(sentinel)
    return max(mean_min_distance(x, y), mean_min_distance(y, x))


def ashd(xs: np.ndarray, ys: np.ndarray, sentinel: float | None = None) -> float:
    """Average surface distance: mean of the two directed mean distances."""
    if _empty(xs, ys):
        return _sentinel(sentinel)
    return 0.5 * (mean_min_distance(xs, ys) + mean_min_distance(ys, xs))


def _brute_min(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    diff = src[:, None, :] - dst[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1)).min(axis=1)


def directed_hd_bruteforce(x, y, sentinel=None) -> float:
    if _empty(x, y):
        return _sentinel(sentinel)
    return float(_brute_min(x, y).max())


def ahd_bruteforce(x, y, sentinel=None) -> float:
    if _empty(x, y):
        return _sentinel(sentinel)
    return float(max(_brute_min(x, y).mean(), _brute_min(y, x).mean()))


def ashd_bruteforce(xs, ys, sentinel=None) -> float:
    if _empty(xs, ys):
        return _sentinel(sentinel)
    return float(0.5 * (_brute_min(xs, ys).mean() + _brute_min(ys, xs).mean()))


# ---------------------------------------------------------------------------
# per-case evaluation


@dataclass
class ClassMetrics:
    dsc: float
    ahd_mm: float
    ashd_mm: float
    vd_pct: float
    flags: list[str] = field(default_factory=list)


def mask_distances(truth: np.ndarray, pred: np.ndarray, spacing: float, sentinel: float) -> tuple[float, float, list[str]]:
    """(AHD on full masks, ASHD on extracted surfaces, flags)."""
    flags = []
    full_t, full_p = mask_points(truth, spacing), mask_points(pred, spacing)
    if _empty(full_t, full_p):
        flags.append("empty_set_distance")
    a = ahd(full_t, full_p, sentinel)
    s = ashd(extract_surface(truth, spacing), extract_surface(pred, spacing), sentinel)
    return a, s, flags


def evaluate_case(pred: LabelMap, truth: LabelMap, classes: Iterable[int]) -> dict[int, ClassMetrics]:
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    if not math.isclose(pred.spacing, truth.spacing):
        raise ValueError("prediction and truth have different pixel spacing")
    spacing = truth.spacing
    sentinel = truth.diagonal_mm()
    out = {}
    for c in classes:
        t, p = truth.mask(c), pred.mask(c)
        flags = []
        if not t.any() and not p.any():
            flags.append("absent")
        d = dsc(t, p)
        a, s, dflags = mask_distances(t, p, spacing, sentinel)
        flags += dflags
        if t.any():
            v = vd(p, t)
        else:
            v = math.nan
            flags.append("empty_truth")
        out[int(c)] = ClassMetrics(d, a, s, v, flags)
    return out


@dataclass
class MetricsReport:
    """Per-(case, class) metrics plus mean/SD aggregate rows."""

    cases: dict[str, dict[int, ClassMetrics]] = field(default_factory=dict)

    def add_case(self, name: str, metrics: dict[int, ClassMetrics]) -> None:
        self.cases[str(name)] = metrics

    def classes(self) -> list[int]:
        seen: set[int] = set()
        for m in self.cases.values():
            seen.update(m)
        return sorted(seen)

    def aggregate(self) -> dict[str, dict[int, ClassMetrics]]:
        """``{"MEAN": ..., "SD": ...}`` per class; NaNs are skipped, SD uses ddof=1."""
        mean_row, sd_row = {}, {}
        for c in self.classes():
            rows = [m[c] for m in self.cases.values() if c in m]
            vals = {k: np.array([getattr(r, k) for r in rows], dtype=float) for k in ("dsc", "ahd_mm", "ashd_mm", "vd_pct")}
            means, sds = {}, {}
            for k, arr in vals.items():
                arr = arr[~np.isnan(arr)]
                means[k] = float(arr.mean()) if arr.size else math.nan
                sds[k] = float(arr.std(ddof=1)) if arr.size > 1 else (0.0 if arr.size else math.nan)
            flags = sorted({f for r in rows for f in r.flags})
            mean_row[c] = ClassMetrics(**means, flags=flags)
            sd_row[c] = ClassMetrics(**sds, flags=flags)
        return {"MEAN": mean_row, "SD": sd_row}

    def rows(self) -> list[list[str]]:
        out = []
        for name, metrics in list(self.cases.items()) + list(self.aggregate().items()):
            for c in sorted(metrics):
                m = metrics[c]
                out.append([name, str(c), repr(m.dsc), repr(m.ahd_mm), repr(m.ashd_mm), repr(m.vd_pct), ";".join(m.flags)])
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            w.writerows(self.rows())

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricsReport":
        rep = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != CSV_HEADER:
                raise ValueError(f"unexpected metrics header {header}")
            for row in reader:
                case, c, d, a, s, v, flags = row
                if case in ("MEAN", "SD"):
                    continue
                rep.cases.setdefault(case, {})[int(c)] = ClassMetrics(
                    float(d), float(a), float(s), float(v), [f for f in flags.split(";") if f]
                )
        return rep


def dice_per_class(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray], num_classes: int) -> np.ndarray:
    """Dice per class from voxel counts pooled over all cases."""
    inter = np.zeros(num_classes)
    total = np.zeros(num_classes)
    for p, t in zip(preds, truths):
        pc = np.bincount(p.ravel(), minlength=num_classes)[:num_classes]
        tc = np.bincount(t.ravel(), minlength=num_classes)[:num_classes]
        ic = np.bincount(t[p == t].ravel(), minlength=num_classes)[:num_classes]
        inter += ic
        total += pc + tc
    out = np.ones(num_classes)
    nz = total > 0
    out[nz] = 2.0 * inter[nz] / total[nz]
    return out
