"""Atlas forests: random forests that encode a single labelled image.

A forest is trained on class-balanced voxel samples of one ``(image, labels)``
pair.  Split candidates are random box features from a shared pool, each
tried at evenly spaced thresholds across the node's response range, and the
split with the largest Shannon information gain wins.  Every node keeps its
class histogram so that inference can stop early at a depth limit.

The same node layout backs :class:`RegressionForest`, a small tabular
variance-reduction forest used for calibrating predicted scores.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np

from .features import FeatureRanges, IntegralVolume, _response, build_integral, sample_pool_table
from .volume import LabelVolume, Volume, validate_pair

log = logging.getLogger(__name__)

MODEL_MAGIC = b"RCAF0001"


class NoForegroundError(ValueError):
    """The pseudo ground truth has no foreground voxels."""


@dataclass(frozen=True)
class ForestParams:
    num_trees: int = 50
    max_depth: int = 30
    features_per_node: int = 200
    pool_size: int = 10000
    thresholds_per_feature: int = 10
    min_samples_leaf: int = 10
    samples_per_class: int = 20000
    seed: int = 0
    # rescale node histograms by (class voxels / class samples) to undo balanced sampling
    prior_correction: bool = True
    ranges: FeatureRanges = field(default_factory=FeatureRanges)

    def __post_init__(self):
        for name in (
            "num_trees",
            "max_depth",
            "features_per_node",
            "pool_size",
            "thresholds_per_feature",
            "min_samples_leaf",
            "samples_per_class",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if isinstance(self.ranges, dict):
            object.__setattr__(self, "ranges", FeatureRanges(**self.ranges))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Forest:
    """Trained trees stored as flat node arrays.

    ``feature[i] == -1`` marks a leaf; ``left``/``right`` index into the
    same arrays; ``roots[t]`` is the root of tree ``t``; ``hist[i]`` is the
    normalised class histogram of node ``i``.
    """

    params: ForestParams
    pool: np.ndarray
    num_classes: int
    channels: int
    roots: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    hist: np.ndarray
    depth: np.ndarray

    @property
    def num_trees(self) -> int:
        return len(self.roots)

    def max_tree_depth(self) -> int:
        return int(self.depth.max()) if len(self.depth) else 0

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        doc = {
            "params": self.params.to_dict(),
            "num_classes": self.num_classes,
            "channels": self.channels,
            "pool": self.pool.tolist(),
            "roots": self.roots.tolist(),
            "feature": self.feature.tolist(),
            "threshold": [float(t) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "depth": self.depth.tolist(),
            "hist": [[float(v) for v in row] for row in self.hist],
        }
        return MODEL_MAGIC + json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Forest":
        if buf[:8] != MODEL_MAGIC:
            raise ValueError("not an RCAF0001 forest model")
        doc = json.loads(buf[8:].decode())
        ncls = int(doc["num_classes"])
        return cls(
            params=ForestParams(**doc["params"]),
            pool=np.asarray(doc["pool"], dtype=np.int32).reshape(-1, 15),
            num_classes=ncls,
            channels=int(doc["channels"]),
            roots=np.asarray(doc["roots"], dtype=np.int64),
            feature=np.asarray(doc["feature"], dtype=np.int32),
            threshold=np.asarray(doc["threshold"], dtype=np.float64),
            left=np.asarray(doc["left"], dtype=np.int32),
            right=np.asarray(doc["right"], dtype=np.int32),
            hist=np.asarray(doc["hist"], dtype=np.float64).reshape(-1, ncls),
            depth=np.asarray(doc["depth"], dtype=np.int32),
        )

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Forest":
        return cls.from_bytes(Path(path).read_bytes())


def balanced_sample(labels: np.ndarray, per_class: int, rng: np.random.Generator) -> tuple:
    """Up to ``per_class`` voxels of every present label, sampled without replacement."""
    flat = labels.ravel(order="C")
    picks = []
    for c in np.unique(flat):
        where = np.flatnonzero(flat == c)
        if len(where) > per_class:
            where = np.sort(rng.choice(where, per_class, replace=False))
        picks.append(where)
    idx = np.concatenate(picks)
    pts = np.stack(np.unravel_index(idx, labels.shape), axis=1).astype(np.int64)
    return pts, flat[idx].astype(np.int64)


def class_prior_weights(labels: np.ndarray, y: np.ndarray, num_classes: int) -> np.ndarray:
    total = np.bincount(labels.ravel(), minlength=num_classes).astype(np.float64)
    sampled = np.bincount(y, minlength=num_classes).astype(np.float64)
    return np.divide(total, sampled, out=np.zeros(num_classes), where=sampled > 0)


def _concat_trees(trees: list) -> tuple:
    offsets = np.cumsum([0] + [len(t[0]) for t in trees])
    feature = np.concatenate([t[0] for t in trees]).astype(np.int32)
    threshold = np.concatenate([t[1] for t in trees])
    left = np.concatenate([np.where(t[2] >= 0, t[2] + o, -1) for t, o in zip(trees, offsets)]).astype(np.int32)
    right = np.concatenate([np.where(t[3] >= 0, t[3] + o, -1) for t, o in zip(trees, offsets)]).astype(np.int32)
    value = np.concatenate([t[4] for t in trees])
    depth = np.concatenate([t[5] for t in trees]).astype(np.int32)
    return offsets[:-1].astype(np.int64), feature, threshold, left, right, value, depth


def train_atlas_forest(
    image: Volume,
    pseudo_gt: LabelVolume,
    params: ForestParams = ForestParams(),
    integral: Optional[IntegralVolume] = None,
) -> Forest:
    validate_pair(image, pseudo_gt)
    if not np.any(pseudo_gt.labels):
        raise NoForegroundError("no foreground to encode")
    seeds = np.random.SeedSequence(params.seed)
    pool_seed, *tree_seeds = seeds.spawn(params.num_trees + 1)
    pool = sample_pool_table(np.random.default_rng(pool_seed), params.ranges, params.pool_size, image.channels)
    ii = integral if integral is not None else build_integral(image)

    trees = []
    for t, ts in enumerate(tree_seeds):
        rng = np.random.default_rng(ts)
        pts, y = balanced_sample(pseudo_gt.labels, params.samples_per_class, rng)
        weight = class_prior_weights(pseudo_gt.labels, y, pseudo_gt.num_classes) if params.prior_correction else np.ones(pseudo_gt.num_classes)
        nb_seed = int(rng.integers(0, 2**31 - 1))
        trees.append(
            _grow_classifier(
                ii.table,
                pool,
                pts,
                y,
                weight,
                pseudo_gt.num_classes,
                params.max_depth,
                params.features_per_node,
                params.thresholds_per_feature,
                params.min_samples_leaf,
                nb_seed,
            )
        )
        log.debug("tree %d: %d nodes", t, len(trees[-1][0]))
    roots, feature, threshold, left, right, hist, depth = _concat_trees(trees)
    return Forest(params, pool, pseudo_gt.num_classes, image.channels, roots, feature, threshold, left, right, hist, depth)


def forest_posteriors(forest: Forest, image: Volume, depth_limit: Optional[int] = None, integral=None) -> np.ndarray:
    """Tree-averaged class histograms per voxel, shape ``(nx, ny, nz, num_classes)``."""
    if image.channels != forest.channels:
        raise ValueError(f"forest expects {forest.channels} channel(s), image has {image.channels}")
    ii = integral if integral is not None else build_integral(image)
    limit = -1 if depth_limit is None else int(depth_limit)
    return _predict_grid(
        ii.table, forest.pool, forest.roots, forest.feature, forest.threshold,
        forest.left, forest.right, forest.hist, limit,
    )


def predict_forest(
    forest: Forest, image: Volume, depth_limit: Optional[int] = None, integral=None
) -> LabelVolume:
    post = forest_posteriors(forest, image, depth_limit, integral)
    # argmax returns the first maximum, i.e. ties go to the lower label
    labels = np.argmax(post, axis=-1).astype(np.uint8)
    return LabelVolume(labels, image.spacing, forest.num_classes)


# ---------------------------------------------------------------------------
# classification kernels


@numba.njit(cache=True)
def _entropy(counts, total):
    h = 0.0
    if total <= 0:
        return 0.0
    for c in range(counts.shape[0]):
        if counts[c] > 0:
            p = counts[c] / total
            h -= p * np.log2(p)
    return h


@numba.njit(cache=True, nogil=True)
def _grow_classifier(ii, pool, pts, y, class_weight, ncls, max_depth, feats_per_node, n_thresh, min_leaf, seed):
    np.random.seed(seed)
    n = pts.shape[0]
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int32)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    hist = np.zeros((cap, ncls), dtype=np.float64)
    depth = np.zeros(cap, dtype=np.int32)

    idx = np.arange(n)
    scratch = np.empty(n, dtype=np.int64)
    resp = np.empty(n, dtype=np.float64)
    bins = np.empty(n, dtype=np.int64)
    counts = np.zeros(ncls, dtype=np.float64)
    bin_counts = np.zeros((n_thresh + 1, ncls), dtype=np.float64)
    lcounts = np.zeros(ncls, dtype=np.float64)
    rcounts = np.zeros(ncls, dtype=np.float64)

    st_node = np.empty(cap, dtype=np.int64)
    st_lo = np.empty(cap, dtype=np.int64)
    st_hi = np.empty(cap, dtype=np.int64)
    sp = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    sp = 1
    nnodes = 1
    npool = pool.shape[0]

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        lo = st_lo[sp]
        hi = st_hi[sp]
        m = hi - lo
        counts[:] = 0.0
        for i in range(lo, hi):
            counts[y[idx[i]]] += 1.0
        nonzero = 0
        wsum = 0.0
        for c in range(ncls):
            wsum += counts[c] * class_weight[c]
            if counts[c] > 0:
                nonzero += 1
        for c in range(ncls):
            hist[node, c] = counts[c] * class_weight[c] / wsum
        if depth[node] >= max_depth or nonzero <= 1 or m < 2 * min_leaf:
            continue

        parent_h = _entropy(counts, m)
        best_gain = 0.0
        best_f = -1
        best_t = 0.0
        for _ in range(feats_per_node):
            f = np.random.randint(0, npool)
            row = pool[f]
            rmin = np.inf
            rmax = -np.inf
            for i in range(m):
                j = idx[lo + i]
                r = _response(ii, row, pts[j, 0], pts[j, 1], pts[j, 2])
                resp[i] = r
                if r < rmin:
                    rmin = r
                if r > rmax:
                    rmax = r
            if not rmax > rmin:
                continue
            # bin k holds responses in [t_k, t_{k+1}); t_q = rmin + q * width
            width = (rmax - rmin) / (n_thresh + 1)
            bin_counts[:, :] = 0.0
            for i in range(m):
                b = int((resp[i] - rmin) / width)
                if b > n_thresh:
                    b = n_thresh
                if b < 0:
                    b = 0
                # guard floating point at bin edges so that bins agree with r < t tests
                while b > 0 and resp[i] < rmin + b * width:
                    b -= 1
                while b < n_thresh and resp[i] >= rmin + (b + 1) * width:
                    b += 1
                bin_counts[b, y[idx[lo + i]]] += 1.0
            lcounts[:] = 0.0
            nl = 0.0
            for q in range(1, n_thresh + 1):
                for c in range(ncls):
                    lcounts[c] += bin_counts[q - 1, c]
                    nl += bin_counts[q - 1, c]
                nr = m - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                for c in range(ncls):
                    rcounts[c] = counts[c] - lcounts[c]
                gain = parent_h - (nl / m) * _entropy(lcounts, nl) - (nr / m) * _entropy(rcounts, nr)
                if gain > best_gain + 1e-12:
                    best_gain = gain
                    best_f = f
                    best_t = rmin + q * width
        if best_f < 0:
            continue

        row = pool[best_f]
        nleft = 0
        nright = 0
        for i in range(lo, hi):
            j = idx[i]
            if _response(ii, row, pts[j, 0], pts[j, 1], pts[j, 2]) < best_t:
                idx[lo + nleft] = j
                nleft += 1
            else:
                scratch[nright] = j
                nright += 1
        for i in range(nright):
            idx[lo + nleft + i] = scratch[i]

        lnode = nnodes
        rnode = nnodes + 1
        nnodes += 2
        feature[node] = best_f
        threshold[node] = best_t
        left[node] = lnode
        right[node] = rnode
        depth[lnode] = depth[node] + 1
        depth[rnode] = depth[node] + 1
        # right pushed first so the left subtree is grown first
        st_node[sp] = rnode
        st_lo[sp] = lo + nleft
        st_hi[sp] = hi
        sp += 1
        st_node[sp] = lnode
        st_lo[sp] = lo
        st_hi[sp] = lo + nleft
        sp += 1

    return (
        feature[:nnodes].copy(),
        threshold[:nnodes].copy(),
        left[:nnodes].copy(),
        right[:nnodes].copy(),
        hist[:nnodes].copy(),
        depth[:nnodes].copy(),
    )


@numba.njit(cache=True, nogil=True)
def _predict_grid(ii, pool, roots, feature, threshold, left, right, hist, depth_limit):
    nx = ii.shape[0] - 1
    ny = ii.shape[1] - 1
    nz = ii.shape[2] - 1
    ncls = hist.shape[1]
    ntrees = roots.shape[0]
    out = np.zeros((nx, ny, nz, ncls), dtype=np.float64)
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                for t in range(ntrees):
                    node = roots[t]
                    d = 0
                    while feature[node] >= 0 and (depth_limit < 0 or d < depth_limit):
                        r = _response(ii, pool[feature[node]], x, y, z)
                        if r < threshold[node]:
                            node = left[node]
                        else:
                            node = right[node]
                        d += 1
                    for c in range(ncls):
                        out[x, y, z, c] += hist[node, c]
                for c in range(ncls):
                    out[x, y, z, c] /= ntrees
    return out


# ---------------------------------------------------------------------------
# tabular regression forest


@numba.njit(cache=True)
def _grow_regressor(X, y, max_depth, min_leaf, seed):
    np.random.seed(seed)
    n, d = X.shape
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int32)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    value = np.zeros((cap, 1), dtype=np.float64)
    depth = np.zeros(cap, dtype=np.int32)

    # bootstrap sample
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        idx[i] = np.random.randint(0, n)
    scratch = np.empty(n, dtype=np.int64)
    vals = np.empty(n, dtype=np.float64)
    ys = np.empty(n, dtype=np.float64)

    st_node = np.empty(cap, dtype=np.int64)
    st_lo = np.empty(cap, dtype=np.int64)
    st_hi = np.empty(cap, dtype=np.int64)
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    sp = 1
    nnodes = 1

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        lo = st_lo[sp]
        hi = st_hi[sp]
        m = hi - lo
        total = 0.0
        total2 = 0.0
        for i in range(lo, hi):
            total += y[idx[i]]
            total2 += y[idx[i]] * y[idx[i]]
        value[node, 0] = total / m
        parent_sse = total2 - total * total / m
        if depth[node] >= max_depth or m < 2 * min_leaf or parent_sse <= 1e-14:
            continue
        best_gain = 0.0
        best_f = -1
        best_t = 0.0
        for f in range(d):
            for i in range(m):
                vals[i] = X[idx[lo + i], f]
            order = np.argsort(vals[:m], kind="mergesort")
            for i in range(m):
                ys[i] = y[idx[lo + order[i]]]
            sl = 0.0
            sl2 = 0.0
            for i in range(m - 1):
                sl += ys[i]
                sl2 += ys[i] * ys[i]
                nl = i + 1
                nr = m - nl
                a = vals[order[i]]
                b = vals[order[i + 1]]
                if not b > a or nl < min_leaf or nr < min_leaf:
                    continue
                sr = total - sl
                sr2 = total2 - sl2
                sse = (sl2 - sl * sl / nl) + (sr2 - sr * sr / nr)
                gain = parent_sse - sse
                if gain > best_gain + 1e-12:
                    best_gain = gain
                    best_f = f
                    best_t = 0.5 * (a + b)
        if best_f < 0:
            continue
        nleft = 0
        nright = 0
        for i in range(lo, hi):
            j = idx[i]
            if X[j, best_f] < best_t:
                idx[lo + nleft] = j
                nleft += 1
            else:
                scratch[nright] = j
                nright += 1
        for i in range(nright):
            idx[lo + nleft + i] = scratch[i]
        lnode = nnodes
        rnode = nnodes + 1
        nnodes += 2
        feature[node] = best_f
        threshold[node] = best_t
        left[node] = lnode
        right[node] = rnode
        depth[lnode] = depth[node] + 1
        depth[rnode] = depth[node] + 1
        st_node[sp] = rnode
        st_lo[sp] = lo + nleft
        st_hi[sp] = hi
        sp += 1
        st_node[sp] = lnode
        st_lo[sp] = lo
        st_hi[sp] = lo + nleft
        sp += 1

    return (
        feature[:nnodes].copy(),
        threshold[:nnodes].copy(),
        left[:nnodes].copy(),
        right[:nnodes].copy(),
        value[:nnodes].copy(),
        depth[:nnodes].copy(),
    )


@numba.njit(cache=True)
def _predict_tabular(X, roots, feature, threshold, left, right, value):
    out = np.zeros(X.shape[0], dtype=np.float64)
    for i in range(X.shape[0]):
        acc = 0.0
        for t in range(roots.shape[0]):
            node = roots[t]
            while feature[node] >= 0:
                if X[i, feature[node]] < threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            acc += value[node, 0]
        out[i] = acc / roots.shape[0]
    return out


class RegressionForest:
    """Bagged variance-reduction regression trees over a small feature matrix."""

    def __init__(self, num_trees=50, max_depth=8, min_samples_leaf=3, seed=0):
        self.num_trees = num_trees
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.seed = seed
        self._arrays = None

    def fit(self, X, y) -> "RegressionForest":
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.float64)
        if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
            raise ValueError("X must be (n, d) with n == len(y) > 0")
        seeds = np.random.SeedSequence(self.seed).generate_state(self.num_trees)
        trees = [
            _grow_regressor(X, y, self.max_depth, self.min_samples_leaf, int(s) & 0x7FFFFFFF)
            for s in seeds
        ]
        self._arrays = _concat_trees(trees)
        return self

    def predict(self, X) -> np.ndarray:
        if self._arrays is None:
            raise RuntimeError("forest is not fitted")
        roots, feature, threshold, left, right, value, _ = self._arrays
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _predict_tabular(X, roots, feature, threshold, left, right, value)
