"""Per-structure segmentation metrics and quality categories.

Seven metrics are computed for every requested label: Dice (``dsc``),
Jaccard (``ji``), precision (``pr``), recall (``re``), Hausdorff distance
(``hd``, mm), average symmetric surface distance (``asd``, mm) and relative
volume difference (``rvd``).  Distances and RVD are clipped (150 mm, 10 mm
and 1 by default) so that every metric lives in a bounded range.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple, Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import LabelVolume, validate_pair

HD_CLIP = 150.0
ASD_CLIP = 10.0
RVD_CLIP = 1.0

OVERLAP_METRICS = ("dsc", "ji", "pr", "re")
ERROR_METRICS = ("hd", "asd", "rvd")
ALL_METRICS = OVERLAP_METRICS + ERROR_METRICS

# metric -> (lower bound, upper bound) of the clipped value range
METRIC_RANGES = {
    "dsc": (0.0, 1.0),
    "ji": (0.0, 1.0),
    "pr": (0.0, 1.0),
    "re": (0.0, 1.0),
    "hd": (0.0, HD_CLIP),
    "asd": (0.0, ASD_CLIP),
    "rvd": (0.0, RVD_CLIP),
}

CSV_COLUMNS = ("id", "label", "dsc", "ji", "pr", "re", "hd_mm", "asd_mm", "rvd", "empty_pred", "empty_ref")
_FIELD_OF = {"dsc": "dsc", "ji": "ji", "pr": "pr", "re": "re", "hd": "hd_mm", "asd": "asd_mm", "rvd": "rvd"}


def higher_is_better(metric: str) -> bool:
    if metric not in METRIC_RANGES:
        raise ValueError(f"unknown metric {metric!r}")
    return metric in OVERLAP_METRICS


class QualityCategory(str, enum.Enum):
    GOOD = "good"
    MEDIUM = "medium"
    BAD = "bad"


# Overlap metrics: bad [0, lo), medium [lo, hi), good [hi, 1].
# Error metrics:   good [0, lo], medium (lo, hi], bad (hi, max].
DEFAULT_BIN_EDGES = {
    "dsc": (0.6, 0.8),
    "ji": (0.6, 0.8),
    "pr": (0.6, 0.8),
    "re": (0.6, 0.8),
    "hd": (10.0, 60.0),
    "asd": (2.0, 5.0),
    "rvd": (0.2, 0.4),
}


def categorize(score: float, metric: str, edges: Optional[dict] = None) -> QualityCategory:
    """Map a metric value onto good / medium / bad.

    ``edges`` optionally overrides :data:`DEFAULT_BIN_EDGES` per metric.
    """
    lo_range, hi_range = METRIC_RANGES[metric]
    if not (lo_range - 1e-12 <= score <= hi_range + 1e-12) or np.isnan(score):
        raise ValueError(f"{metric} score {score!r} outside [{lo_range}, {hi_range}]")
    lo, hi = (edges or {}).get(metric, DEFAULT_BIN_EDGES[metric])
    if higher_is_better(metric):
        if score < lo:
            return QualityCategory.BAD
        return QualityCategory.MEDIUM if score < hi else QualityCategory.GOOD
    if score <= lo:
        return QualityCategory.GOOD
    return QualityCategory.MEDIUM if score <= hi else QualityCategory.BAD


class OverlapCounts(NamedTuple):
    tp: int
    fp: int
    fn: int


def overlap_counts(pred: LabelVolume, ref: LabelVolume, label: int) -> OverlapCounts:
    validate_pair(pred, ref)
    if not 0 <= label < min(pred.num_classes, ref.num_classes):
        raise ValueError(f"label {label} >= num_classes")
    p = pred.labels == label
    r = ref.labels == label
    tp = int(np.count_nonzero(p & r))
    return OverlapCounts(tp, int(np.count_nonzero(p)) - tp, int(np.count_nonzero(r)) - tp)


def overlap_metrics(counts: OverlapCounts) -> tuple:
    """Return ``(dsc, ji, pr, re)``.

    Both sets empty counts as vacuous agreement (all ones); one empty set
    gives zeros.
    """
    tp, fp, fn = counts
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0, 1.0
    dsc = 2.0 * tp / (2.0 * tp + fp + fn)
    ji = tp / (tp + fp + fn)
    pr = tp / (tp + fp) if tp + fp else 0.0
    re = tp / (tp + fn) if tp + fn else 0.0
    return dsc, ji, pr, re


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with a 6-neighbour outside it or on the grid border."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = mask.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def extract_surface(labels: LabelVolume, label: int) -> np.ndarray:
    """Surface voxel centres of ``label`` in mm, shape ``(n, 3)``."""
    idx = np.argwhere(surface_mask(labels.labels == label))
    return idx * np.asarray(labels.spacing, dtype=np.float64)


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cKDTree(b).query(a, k=1)[0]


def hausdorff(a, b, clip: float = HD_CLIP) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        return float(clip)
    d = max(_directed(a, b).max(), _directed(b, a).max())
    return float(min(d, clip))


def asd(a, b, clip: float = ASD_CLIP) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        return float(clip)
    total = _directed(a, b).sum() + _directed(b, a).sum()
    return float(min(total / (len(a) + len(b)), clip))


def rvd(pred_count: int, ref_count: int, clip: float = RVD_CLIP) -> float:
    if ref_count == 0:
        return float(clip)
    return float(min(abs(pred_count - ref_count) / ref_count, clip))


def _surface_distances(sa: np.ndarray, sb: np.ndarray, spacing) -> tuple:
    """Distances from each surface voxel of one mask to the other surface.

    Both masks are cropped to the bounding box of their union, which holds
    every query point and every surface voxel, so the transform stays exact.
    """
    both = sa | sb
    lo = [int(np.flatnonzero(both.any(axis=tuple(j for j in range(3) if j != i))).min()) for i in range(3)]
    hi = [int(np.flatnonzero(both.any(axis=tuple(j for j in range(3) if j != i))).max()) + 1 for i in range(3)]
    box = tuple(slice(l, h) for l, h in zip(lo, hi))
    sa, sb = sa[box], sb[box]
    to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    return to_b[sa], to_a[sb]


@dataclass
class MetricRow:
    dsc: float
    ji: float
    pr: float
    re: float
    hd_mm: float
    asd_mm: float
    rvd: float
    empty_pred: bool
    empty_ref: bool

    def value(self, metric: str) -> float:
        return float(getattr(self, _FIELD_OF[metric]))


@dataclass
class MetricReport:
    """Metric rows for one prediction/reference pair, keyed by label."""

    rows: dict = field(default_factory=dict)
    id: str = ""

    def __getitem__(self, label: int) -> MetricRow:
        return self.rows[label]

    def records(self) -> list:
        out = []
        for label in sorted(self.rows):
            rec = {"id": self.id, "label": int(label)}
            rec.update(asdict(self.rows[label]))
            out.append(rec)
        return out


def evaluate_label(
    pred: np.ndarray,
    ref: np.ndarray,
    spacing,
    hd_clip: float = HD_CLIP,
    asd_clip: float = ASD_CLIP,
    rvd_clip: float = RVD_CLIP,
) -> MetricRow:
    """All seven metrics for one pair of boolean masks."""
    tp = int(np.count_nonzero(pred & ref))
    npred = int(np.count_nonzero(pred))
    nref = int(np.count_nonzero(ref))
    counts = OverlapCounts(tp, npred - tp, nref - tp)
    dsc, ji, pr, re = overlap_metrics(counts)
    empty_pred, empty_ref = npred == 0, nref == 0
    if empty_pred and empty_ref:
        return MetricRow(dsc, ji, pr, re, 0.0, 0.0, 0.0, True, True)
    if empty_pred or empty_ref:
        return MetricRow(dsc, ji, pr, re, float(hd_clip), float(asd_clip), float(rvd_clip), empty_pred, empty_ref)
    d_ab, d_ba = _surface_distances(surface_mask(pred), surface_mask(ref), spacing)
    hd = min(float(max(d_ab.max(), d_ba.max())), hd_clip)
    mean = (float(d_ab.sum()) + float(d_ba.sum())) / (len(d_ab) + len(d_ba))
    return MetricRow(
        dsc, ji, pr, re, hd, min(mean, asd_clip), rvd(npred, nref, rvd_clip), False, False
    )


def evaluate_all(
    pred: LabelVolume,
    ref: LabelVolume,
    labels: Optional[Iterable[int]] = None,
    case_id: str = "",
) -> MetricReport:
    """Evaluate every requested label (default: all foreground labels of ``ref``'s class set)."""
    validate_pair(pred, ref)
    ncls = min(pred.num_classes, ref.num_classes)
    if labels is None:
        labels = range(1, ref.num_classes)
    report = MetricReport(id=case_id)
    for label in labels:
        if not 0 <= label < ncls:
            raise ValueError(f"label {label} >= num_classes")
        report.rows[int(label)] = evaluate_label(pred.labels == label, ref.labels == label, ref.spacing)
    return report


def reports_to_csv(reports: Iterable[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for report in reports:
        for rec in report.records():
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in rec.items()})
    return buf.getvalue()


def reports_to_json(reports: Iterable[MetricReport]) -> str:
    rows = [rec for report in reports for rec in report.records()]
    return json.dumps(rows, indent=1, sort_keys=False)
