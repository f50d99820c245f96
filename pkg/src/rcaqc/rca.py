"""Reverse classification accuracy.

A reverse classifier is trained on one image with its *predicted*
segmentation acting as ground truth, then applied to every image of a
reference database with trusted labels.  The best score reached on any
reference (max for overlap metrics, min for distance/volume errors) is the
proxy for the unknown real quality of the predicted segmentation.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .features import build_integral
from .forest import Forest, ForestParams, predict_forest, train_atlas_forest
from .metrics import (
    ALL_METRICS,
    METRIC_RANGES,
    QualityCategory,
    categorize,
    evaluate_all,
    higher_is_better,
)
from .registration import DeformationField, RegistrationParams, register, warp_labels
from .volume import LabelVolume, ReferenceDatabase, Volume, validate_pair

log = logging.getLogger(__name__)

ATLAS_FOREST = "atlas-forest"
SINGLE_ATLAS = "single-atlas"
BACKENDS = (ATLAS_FOREST, SINGLE_ATLAS)
AGGREGATIONS = ("max", "top3-mean")


@dataclass(eq=False)
class ReverseClassifier:
    backend: str
    image: Volume
    seg: LabelVolume
    forest: Optional[Forest] = None
    training_id: str = ""
    depth_limit: Optional[int] = None

    @property
    def zero_support(self) -> bool:
        """True when the pseudo ground truth has no foreground at all."""
        return not np.any(self.seg.labels)

    @property
    def support(self) -> set:
        return set(self.seg.present_labels())


@dataclass(frozen=True)
class BackendOptions:
    forest: ForestParams = field(default_factory=ForestParams)
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    # atlas-forest inference depth limit; None descends to the leaves
    depth_limit: Optional[int] = None


def train_reverse_classifier(
    image: Volume,
    seg: LabelVolume,
    backend: str = SINGLE_ATLAS,
    options: BackendOptions = BackendOptions(),
    training_id: str = "",
) -> ReverseClassifier:
    validate_pair(image, seg)
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    rc = ReverseClassifier(backend, image, seg, training_id=training_id, depth_limit=options.depth_limit)
    if backend == ATLAS_FOREST and not rc.zero_support:
        rc.forest = train_atlas_forest(image, seg, options.forest)
    return rc


class FieldCache:
    """Registration results keyed by ``(moving id, fixed id)``.

    Registration depends only on the two images, so all segmentations of one
    image can share the fields computed for it.
    """

    def __init__(self):
        self._fields = {}
        self._locks = {}
        self._guard = threading.Lock()

    def get(self, key, compute: Callable[[], DeformationField]) -> DeformationField:
        with self._guard:
            lock = self._locks.setdefault(key, threading.Lock())
        # per-key lock: concurrent callers wait for one registration instead of repeating it
        with lock:
            if key not in self._fields:
                self._fields[key] = compute()
            return self._fields[key]

    def clear(self) -> None:
        with self._guard:
            self._fields.clear()
            self._locks.clear()

    def __len__(self) -> int:
        return len(self._fields)


def apply_reverse_classifier(
    rc: ReverseClassifier,
    target: Volume,
    target_id: str = "",
    options: BackendOptions = BackendOptions(),
    cache: Optional[FieldCache] = None,
) -> LabelVolume:
    """Segment ``target`` with the reverse classifier."""
    if rc.zero_support:
        return LabelVolume(np.zeros(target.dims, dtype=np.uint8), target.spacing, rc.seg.num_classes)
    if rc.backend == ATLAS_FOREST:
        return predict_forest(rc.forest, target, rc.depth_limit, build_integral(target))

    def compute():
        return register(rc.image, target, options.registration)

    if cache is not None and rc.training_id and target_id:
        fld = cache.get((rc.training_id, target_id), compute)
    else:
        fld = compute()
    return warp_labels(rc.seg, fld)


def evaluate_on_reference(
    rc: ReverseClassifier,
    db: ReferenceDatabase,
    labels: Optional[Iterable[int]] = None,
    options: BackendOptions = BackendOptions(),
    cache: Optional[FieldCache] = None,
    jobs: int = 1,
) -> list:
    """``[(reference id, MetricReport)]`` for every reference that evaluated cleanly.

    A failing reference is logged and left out; it never aborts the batch.
    """
    labels = list(labels) if labels is not None else list(range(1, db.num_classes))

    def one(item):
        ref_id, (img, gt) = item
        try:
            seg = apply_reverse_classifier(rc, img, ref_id, options, cache)
            return ref_id, evaluate_all(seg, gt, labels, case_id=ref_id)
        except Exception as exc:  # noqa: BLE001 - a bad reference must not stop the batch
            log.warning("reference %s failed for %s: %s", ref_id, rc.training_id or "<case>", exc)
            return None

    items = list(db)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    return [r for r in results if r is not None]


@dataclass
class ProxyScore:
    """Aggregated proxy for one (label, metric) with its provenance."""

    label: int
    metric: str
    value: float
    k_star: Optional[int]
    ref_id: Optional[str]
    scores: list
    ref_ids: list
    category: str
    zero_support: bool = False
    all_excluded: bool = False

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "metric": self.metric,
            "proxy": self.value,
            "k_star": self.k_star,
            "ref_id": self.ref_id,
            "category": self.category,
            "zero_support": self.zero_support,
            "all_excluded": self.all_excluded,
            "scores": self.scores,
            "ref_ids": self.ref_ids,
        }


def _extreme_value(metric: str) -> float:
    lo, hi = METRIC_RANGES[metric]
    return lo if higher_is_better(metric) else hi


def aggregate_scores(scores: Sequence[float], metric: str, aggregation: str = "max") -> tuple:
    """Reduce a score list; returns ``(value, position of the best score counting from 1)``.

    ``max`` takes the best score (largest, or smallest for error metrics);
    ``top3-mean`` averages the three best.  Ties go to the earliest reference.
    """
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    if len(scores) == 0:
        raise ValueError("no scores to aggregate")
    arr = np.asarray(scores, dtype=np.float64)
    key = -arr if higher_is_better(metric) else arr
    order = np.argsort(key, kind="stable")
    best = int(order[0])
    if aggregation == "max":
        return float(arr[best]), best + 1
    return float(np.mean(arr[order[:3]])), best + 1


def proxy_aggregate(
    reports: Sequence,
    label: int,
    metric: str,
    aggregation: str = "max",
    edges: Optional[dict] = None,
    zero_support: bool = False,
) -> ProxyScore:
    """Proxy for one label and metric from per-reference reports.

    ``reports`` holds ``(reference id, MetricReport)`` pairs or bare reports.
    References whose ground truth lacks ``label`` are excluded.  ``k_star``
    is the position of the best reference in ``reports`` counting from 1.
    """
    if metric not in ALL_METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if len(reports) == 0:
        raise ValueError("empty report list")
    pairs = [r if isinstance(r, tuple) else (r.id or f"ref{i + 1}", r) for i, r in enumerate(reports)]
    positions, ref_ids, scores = [], [], []
    for pos, (ref_id, rep) in enumerate(pairs, start=1):
        row = rep[label]
        if row.empty_ref:
            continue
        positions.append(pos)
        ref_ids.append(ref_id)
        scores.append(row.value(metric))
    if not scores:
        value = _extreme_value(metric)
        return ProxyScore(label, metric, value, None, None, [], [], categorize(value, metric, edges).value,
                          zero_support, all_excluded=True)
    value, best = aggregate_scores(scores, metric, aggregation)
    return ProxyScore(
        label,
        metric,
        value,
        positions[best - 1],
        ref_ids[best - 1],
        scores,
        ref_ids,
        categorize(min(max(value, METRIC_RANGES[metric][0]), METRIC_RANGES[metric][1]), metric, edges).value,
        zero_support,
    )


@dataclass
class RcaPrediction:
    case_id: str
    backend: str
    aggregation: str
    reference_ids: list
    proxies: dict = field(default_factory=dict)  # (label, metric) -> ProxyScore

    def __getitem__(self, key) -> ProxyScore:
        return self.proxies[key]

    def value(self, label: int, metric: str = "dsc") -> float:
        return self.proxies[(label, metric)].value

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "backend": self.backend,
            "aggregation": self.aggregation,
            "reference_ids": list(self.reference_ids),
            "proxies": [self.proxies[k].to_dict() for k in sorted(self.proxies, key=_proxy_sort_key)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "RcaPrediction":
        pred = cls(doc["case_id"], doc["backend"], doc["aggregation"], list(doc["reference_ids"]))
        for p in doc["proxies"]:
            ps = ProxyScore(
                p["label"], p["metric"], p["proxy"], p["k_star"], p["ref_id"], list(p["scores"]),
                list(p["ref_ids"]), p["category"], p["zero_support"], p["all_excluded"],
            )
            pred.proxies[(ps.label, ps.metric)] = ps
        return pred

    def csv_rows(self) -> list:
        return [
            {
                "case": self.case_id,
                "label": ps.label,
                "metric": ps.metric,
                "proxy": repr(float(ps.value)),
                "k_star": "" if ps.k_star is None else ps.k_star,
                "category": ps.category,
            }
            for ps in (self.proxies[k] for k in sorted(self.proxies, key=_proxy_sort_key))
        ]

    def to_csv(self) -> str:
        return predictions_to_csv([self])


PREDICTION_CSV_COLUMNS = ("case", "label", "metric", "proxy", "k_star", "category")


def predictions_to_csv(preds: Iterable[RcaPrediction]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=PREDICTION_CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for p in preds:
        writer.writerows(p.csv_rows())
    return buf.getvalue()


def _proxy_sort_key(key):
    label, metric = key
    return label, ALL_METRICS.index(metric)


def rca_predict(
    image: Volume,
    seg: LabelVolume,
    db: ReferenceDatabase,
    backend: str = SINGLE_ATLAS,
    options: BackendOptions = BackendOptions(),
    metrics: Sequence[str] = ALL_METRICS,
    aggregation: str = "max",
    labels: Optional[Iterable[int]] = None,
    case_id: str = "",
    cache: Optional[FieldCache] = None,
    jobs: int = 1,
    edges: Optional[dict] = None,
) -> RcaPrediction:
    """Train on ``(image, seg)``, score on ``db`` and aggregate every (label, metric) proxy."""
    labels = list(labels) if labels is not None else list(range(1, db.num_classes))
    rc = train_reverse_classifier(image, seg, backend, options, training_id=case_id)
    reports = evaluate_on_reference(rc, db, labels, options, cache, jobs)
    if not reports:
        raise RuntimeError(f"every reference failed for case {case_id!r}")
    support = rc.support
    pred = RcaPrediction(case_id, backend, aggregation, [rid for rid, _ in reports])
    for label in labels:
        for metric in metrics:
            pred.proxies[(label, metric)] = proxy_aggregate(
                reports, label, metric, aggregation, edges, zero_support=label not in support
            )
    return pred


def category_of(value: float, metric: str, edges: Optional[dict] = None) -> QualityCategory:
    return categorize(value, metric, edges)
