"""How well do predicted scores track real ones?

Correlation, mean absolute error and three-category agreement over
:class:`PredictionRecord` sets, with an optional *no-zeros* variant that drops
records whose real overlap score is zero.  Predictions can also be
recalibrated leave-one-subject-out with a small regression forest.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .forest import RegressionForest
from .metrics import ALL_METRICS, METRIC_RANGES, OVERLAP_METRICS, categorize

VARIANTS = ("all", "no-zeros")
RECORD_COLUMNS = ("subject", "case", "label", "metric", "predicted", "real", "backend", "segmenter")


@dataclass(frozen=True)
class PredictionRecord:
    subject: str
    label: int
    metric: str
    predicted: float
    real: float
    backend: str = ""
    segmenter: str = ""
    case: str = ""
    calibrated: Optional[float] = None

    def __post_init__(self):
        if self.metric not in ALL_METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        lo, hi = METRIC_RANGES[self.metric]
        for name in ("predicted", "real"):
            v = getattr(self, name)
            if not (lo - 1e-9 <= v <= hi + 1e-9):
                raise ValueError(f"{name} {v!r} outside {self.metric} range [{lo}, {hi}]")

    def score(self, calibrated: bool = False) -> float:
        if calibrated:
            if self.calibrated is None:
                raise ValueError("record has no calibrated value")
            return self.calibrated
        return self.predicted


class UndefinedCorrelation(ValueError):
    pass


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Sample Pearson correlation; raises :class:`UndefinedCorrelation` for degenerate input."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two equal-length 1-D sequences")
    if len(x) < 2:
        raise UndefinedCorrelation("pearson needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    # relative guard so that constant series with rounding noise still count as degenerate
    if sxx <= 1e-24 * max(1.0, float(x @ x)) or syy <= 1e-24 * max(1.0, float(y @ y)):
        raise UndefinedCorrelation("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def mae(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("mae needs equal-length inputs")
    if x.size == 0:
        raise ValueError("mae of empty input")
    return float(np.mean(np.abs(x - y)))


def category_accuracy(
    records: Sequence[PredictionRecord], metric: str = "dsc", edges: Optional[dict] = None, calibrated: bool = False
) -> float:
    """Fraction of records whose predicted and real scores fall in the same quality bin."""
    recs = [r for r in records if r.metric == metric]
    if not recs:
        raise ValueError(f"no {metric} records")
    hits = sum(categorize(r.score(calibrated), metric, edges) == categorize(r.real, metric, edges) for r in recs)
    return hits / len(recs)


@dataclass
class AccuracyReport:
    pearson: Optional[float]
    mae: float
    accuracy: float
    n: int
    variant: str
    metric: str = "dsc"
    backend: str = ""
    per_structure: dict = dataclasses.field(default_factory=dict)  # label -> pearson or None

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "metric": self.metric,
            "variant": self.variant,
            "n": self.n,
            "correlation": self.pearson,
            "mae": self.mae,
            "accuracy_3_categories": self.accuracy,
            "per_structure_correlation": {str(k): v for k, v in sorted(self.per_structure.items())},
        }


REPORT_COLUMNS = ("backend", "metric", "variant", "n", "correlation", "mae", "accuracy_3_categories")


def reports_to_csv(reports: Iterable[AccuracyReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        d = r.to_dict()
        w.writerow(["" if d[c] is None else (repr(d[c]) if isinstance(d[c], float) else d[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def reports_to_json(reports: Iterable[AccuracyReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=1)


def _maybe_pearson(xs, ys) -> Optional[float]:
    try:
        return pearson(xs, ys)
    except UndefinedCorrelation:
        return None


def filter_variant(records: Sequence[PredictionRecord], variant: str) -> list:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if variant == "all":
        return list(records)
    return [r for r in records if not (r.metric in OVERLAP_METRICS and r.real == 0.0)]


def quantify(
    records: Sequence[PredictionRecord],
    variant: str = "all",
    metric: str = "dsc",
    edges: Optional[dict] = None,
    calibrated: bool = False,
) -> AccuracyReport:
    """Correlation, MAE and category accuracy for one metric."""
    recs = filter_variant([r for r in records if r.metric == metric], variant)
    if not recs:
        raise ValueError("empty after filter")
    pred = [r.score(calibrated) for r in recs]
    real = [r.real for r in recs]
    per = {}
    for label in sorted({r.label for r in recs}):
        sub = [r for r in recs if r.label == label]
        per[label] = _maybe_pearson([r.score(calibrated) for r in sub], [r.real for r in sub])
    backends = sorted({r.backend for r in recs})
    return AccuracyReport(
        _maybe_pearson(pred, real),
        mae(pred, real),
        category_accuracy(recs, metric, edges, calibrated),
        len(recs),
        variant,
        metric,
        ",".join(backends),
        per,
    )


def _design(recs: Sequence[PredictionRecord], labels: Sequence[int]) -> np.ndarray:
    X = np.zeros((len(recs), 1 + len(labels)))
    col = {lab: i + 1 for i, lab in enumerate(labels)}
    for i, r in enumerate(recs):
        X[i, 0] = r.predicted
        X[i, col[r.label]] = 1.0
    return X


def calibrate_loso(
    records: Sequence[PredictionRecord],
    num_trees: int = 50,
    max_depth: int = 8,
    min_samples_leaf: int = 3,
    seed: int = 0,
) -> list:
    """Leave-one-subject-out recalibration; returns copies with ``calibrated`` filled in.

    For each held-out subject a regression forest maps (predicted score,
    structure one-hot) to the real score using every other subject's records
    of the same metric.  Outputs are clamped to the metric's range.
    """
    subjects = sorted({r.subject for r in records})
    if len(subjects) < 2:
        raise ValueError("calibration needs at least two subjects")
    out = list(records)
    index = {id(r): i for i, r in enumerate(records)}
    for metric in sorted({r.metric for r in records}, key=ALL_METRICS.index):
        recs = [r for r in records if r.metric == metric]
        labels = sorted({r.label for r in recs})
        lo, hi = METRIC_RANGES[metric]
        for subj in subjects:
            test = [r for r in recs if r.subject == subj]
            train = [r for r in recs if r.subject != subj]
            if not test:
                continue
            if not train:
                raise ValueError(f"no training records for metric {metric} outside subject {subj}")
            model = RegressionForest(num_trees, max_depth, min_samples_leaf, seed).fit(
                _design(train, labels), [r.real for r in train]
            )
            fitted = np.clip(model.predict(_design(test, labels)), lo, hi)
            for r, v in zip(test, fitted):
                out[index[id(r)]] = dataclasses.replace(r, calibrated=float(v))
    return out


def records_to_csv(records: Iterable[PredictionRecord]) -> str:
    records = list(records)
    cols = RECORD_COLUMNS + (("calibrated",) if any(r.calibrated is not None for r in records) else ())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        row = [r.subject, r.case, r.label, r.metric, repr(float(r.predicted)), repr(float(r.real)), r.backend, r.segmenter]
        if "calibrated" in cols:
            row.append("" if r.calibrated is None else repr(float(r.calibrated)))
        w.writerow(row)
    return buf.getvalue()


def records_from_csv(text: str) -> list:
    reader = csv.DictReader(io.StringIO(text))
    missing = {"subject", "label", "metric", "predicted", "real"} - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"records CSV lacks columns {sorted(missing)}")
    out = []
    for row in reader:
        cal = row.get("calibrated")
        out.append(
            PredictionRecord(
                subject=row["subject"],
                label=int(row["label"]),
                metric=row["metric"],
                predicted=float(row["predicted"]),
                real=float(row["real"]),
                backend=row.get("backend", "") or "",
                segmenter=row.get("segmenter", "") or "",
                case=row.get("case", "") or "",
                calibrated=float(cal) if cal not in (None, "") else None,
            )
        )
    return out
