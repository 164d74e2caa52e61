"""Random forest of Gini decision trees, written from scratch.

Trees are grown on bootstrap samples. Each node draws features without
replacement and takes the split that minimises weighted Gini impurity over
midpoints between consecutive distinct values. Ties go to the lowest feature
index, then the lowest threshold. The posterior for a row is the mean over
trees of the class frequencies in the leaf it lands in.

The inner loops are numba kernels; everything else is numpy.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .dataset import Dataset
from .errors import DegenerateFeatures, InsufficientData, SchemaMismatch
from .features import FeatureSchema, FeatureVector

logger = logging.getLogger(__name__)

FOREST_FORMAT_VERSION = 1
_TIE_TOL = 1e-12


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    max_depth: int | None = None
    min_leaf_size: int = 1
    features_per_split: int | None = None  # None -> ceil(sqrt(n_features))
    rng_seed: int = 0
    bootstrap: bool = True


@njit(cache=True, nogil=True)
def _grow_tree(X, y, sample_idx, n_classes, max_depth, min_leaf, k_features, seed):
    np.random.seed(seed)
    n = sample_idx.shape[0]
    d = X.shape[1]
    max_nodes = 2 * n - 1
    feature = np.full(max_nodes, -1, np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    counts = np.zeros((max_nodes, n_classes), np.int64)
    impurity = np.zeros(max_nodes)
    n_node = np.zeros(max_nodes, np.int64)

    idx = sample_idx.copy()
    tmp = np.empty(n, np.int64)
    vals = np.empty(n)
    lc = np.zeros(n_classes, np.int64)
    rc = np.zeros(n_classes, np.int64)

    st_node = np.empty(max_nodes, np.int64)
    st_start = np.empty(max_nodes, np.int64)
    st_end = np.empty(max_nodes, np.int64)
    st_depth = np.empty(max_nodes, np.int64)
    top = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n
    st_depth[0] = 0
    top = 1
    node_count = 1

    while top > 0:
        top -= 1
        node = st_node[top]
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        m = end - start

        for c in range(n_classes):
            counts[node, c] = 0
        for t in range(start, end):
            counts[node, y[idx[t]]] += 1
        sq = 0.0
        nonzero = 0
        for c in range(n_classes):
            cc = counts[node, c]
            if cc > 0:
                nonzero += 1
            sq += (cc / m) * (cc / m)
        impurity[node] = 1.0 - sq
        n_node[node] = m

        if nonzero <= 1 or m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue

        perm = np.random.permutation(d)
        best_score = -np.inf
        best_f = -1
        best_thr = 0.0
        tol = _TIE_TOL * m
        n_valid = 0
        j = 0
        while j < d and (j < k_features or n_valid == 0):
            f = perm[j]
            j += 1
            for t in range(m):
                vals[t] = X[idx[start + t], f]
            order = np.argsort(vals[:m], kind="mergesort")
            if vals[order[0]] == vals[order[m - 1]]:
                continue
            for c in range(n_classes):
                lc[c] = 0
                rc[c] = counts[node, c]
            found = False
            for t in range(m - 1):
                cls = y[idx[start + order[t]]]
                lc[cls] += 1
                rc[cls] -= 1
                v0 = vals[order[t]]
                v1 = vals[order[t + 1]]
                if not v0 < v1:
                    continue
                nl = t + 1
                nr = m - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                found = True
                sl = 0.0
                sr = 0.0
                for c in range(n_classes):
                    sl += lc[c] * lc[c]
                    sr += rc[c] * rc[c]
                score = sl / nl + sr / nr
                thr = (v0 + v1) / 2.0
                if not thr < v1:
                    thr = v0
                if score > best_score + tol:
                    better = True
                elif score >= best_score - tol:
                    better = f < best_f or (f == best_f and thr < best_thr)
                else:
                    better = False
                if better:
                    best_score = score
                    best_f = f
                    best_thr = thr
            if found:
                n_valid += 1

        if best_f < 0:
            continue

        # stable partition: rows with value <= threshold go left
        nl = 0
        for t in range(start, end):
            if X[idx[t], best_f] <= best_thr:
                tmp[nl] = idx[t]
                nl += 1
        k = nl
        for t in range(start, end):
            if not X[idx[t], best_f] <= best_thr:
                tmp[k] = idx[t]
                k += 1
        for t in range(m):
            idx[start + t] = tmp[t]

        feature[node] = best_f
        threshold[node] = best_thr
        lid = node_count
        rid = node_count + 1
        node_count += 2
        left[node] = lid
        right[node] = rid
        # right pushed first so the left subtree is numbered first
        st_node[top] = rid
        st_start[top] = start + nl
        st_end[top] = end
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lid
        st_start[top] = start
        st_end[top] = start + nl
        st_depth[top] = depth + 1
        top += 1

    return (
        feature[:node_count].copy(),
        threshold[:node_count].copy(),
        left[:node_count].copy(),
        right[:node_count].copy(),
        counts[:node_count].copy(),
        impurity[:node_count].copy(),
        n_node[:node_count].copy(),
    )


@njit(cache=True, nogil=True)
def _apply_tree(feature, threshold, left, right, X):
    out = np.empty(X.shape[0], np.int64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@dataclass
class Tree:
    """Flat array form of one decision tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # per-node class counts, only meaningful at leaves
    impurity: np.ndarray | None = None
    n_node: np.ndarray | None = None

    def __post_init__(self):
        totals = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.leaf_probs = np.where(totals > 0, self.counts / totals, 0.0)

    @property
    def n_internal(self) -> int:
        return int(np.count_nonzero(self.feature >= 0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        return _apply_tree(self.feature, self.threshold, self.left, self.right, X)

    def importances(self, n_features: int) -> np.ndarray:
        """Impurity decrease per feature weighted by the fraction of rows reaching each node."""
        if self.impurity is None:
            raise ValueError("tree was loaded without training statistics")
        internal = np.flatnonzero(self.feature >= 0)
        l, r = self.left[internal], self.right[internal]
        n_i = self.n_node[internal].astype(np.float64)
        child = (self.n_node[l] * self.impurity[l] + self.n_node[r] * self.impurity[r]) / n_i
        gain = (n_i / self.n_node[0]) * (self.impurity[internal] - child)
        return np.bincount(self.feature[internal], weights=gain, minlength=n_features)

    def to_dict(self) -> dict:
        leaf = self.feature < 0
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(t) if not lf else 0.0 for t, lf in zip(self.threshold, leaf)],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": [c.tolist() if lf else None for c, lf in zip(self.counts, leaf)],
        }

    @classmethod
    def from_dict(cls, d: dict, n_classes: int) -> "Tree":
        counts = np.array([c if c is not None else [0] * n_classes for c in d["counts"]], dtype=np.int64)
        return cls(
            np.array(d["feature"], dtype=np.int64),
            np.array(d["threshold"], dtype=np.float64),
            np.array(d["left"], dtype=np.int64),
            np.array(d["right"], dtype=np.int64),
            counts.reshape(-1, n_classes),
        )


@dataclass
class Forest:
    trees: list[Tree]
    class_names: list[str]
    schema: FeatureSchema
    params: ForestParams
    importances: np.ndarray = field(default=None)

    def predict_proba(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.schema):
            raise SchemaMismatch(f"expected {len(self.schema)} features, got shape {X.shape}")
        proba = np.zeros((X.shape[0], len(self.class_names)))
        for tree in self.trees:
            proba += tree.leaf_probs[tree.apply(X)]
        proba /= proba.sum(axis=1, keepdims=True)
        return proba

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def to_dict(self) -> dict:
        return {
            "format_version": FOREST_FORMAT_VERSION,
            "schema": self.schema.to_dict(),
            "class_names": list(self.class_names),
            "hyperparams": asdict(self.params),
            "importances": [float(v) for v in self.importances],
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Forest":
        if d.get("format_version") != FOREST_FORMAT_VERSION:
            raise ValueError(f"unsupported forest format {d.get('format_version')!r}")
        names = list(d["class_names"])
        return cls(
            [Tree.from_dict(t, len(names)) for t in d["trees"]],
            names,
            FeatureSchema.from_dict(d["schema"]),
            ForestParams(**d["hyperparams"]),
            np.array(d["importances"], dtype=np.float64),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _tree_seeds(rng_seed: int, index: int) -> tuple[np.random.Generator, int]:
    ss = np.random.SeedSequence([rng_seed, index])
    boot_ss, kernel_ss = ss.spawn(2)
    return np.random.default_rng(boot_ss), int(kernel_ss.generate_state(1)[0])


def _encode_labels(data: Dataset, class_names: list[str] | None) -> tuple[np.ndarray, list[str]]:
    if any(lab is None for lab in data.labels):
        raise InsufficientData("training rows must all be labeled")
    class_names = list(class_names) if class_names is not None else data.class_names
    lookup = {name: i for i, name in enumerate(class_names)}
    try:
        y = np.array([lookup[lab] for lab in data.labels], dtype=np.int64)
    except KeyError as exc:
        raise InsufficientData(f"label {exc.args[0]!r} is not among class_names") from None
    return y, class_names


def train_forest(
    data: Dataset,
    params: ForestParams = ForestParams(),
    class_names: list[str] | None = None,
    n_jobs: int = 1,
) -> Forest:
    """Grow ``params.n_trees`` trees on ``data``.

    Every tree gets its own generator derived from ``(rng_seed, tree index)``
    so results do not depend on ``n_jobs``.
    """
    if params.n_trees < 1:
        raise InsufficientData("n_trees must be at least 1")
    if params.min_leaf_size < 1:
        raise ValueError("min_leaf_size must be at least 1")
    if len(data) == 0:
        raise InsufficientData("no training rows")
    y, class_names = _encode_labels(data, class_names)
    counts = np.bincount(y, minlength=len(class_names))
    present = np.count_nonzero(counts)
    if present < 2:
        raise InsufficientData(f"need at least 2 classes, got {present}")
    short = [class_names[i] for i in np.flatnonzero(counts) if counts[i] < params.min_leaf_size]
    if short:
        raise InsufficientData(f"classes below min_leaf_size rows: {short}")

    X = np.ascontiguousarray(data.X, dtype=np.float64)
    n, d = X.shape
    if np.all(X == X[0]):
        warnings.warn("all training rows are identical; trees will be single leaves", DegenerateFeatures, stacklevel=2)
    k = params.features_per_split or math.ceil(math.sqrt(d))
    k = max(1, min(k, d))
    max_depth = -1 if params.max_depth is None else params.max_depth

    def grow(i: int) -> Tree:
        boot_rng, kernel_seed = _tree_seeds(params.rng_seed, i)
        if params.bootstrap:
            sample = boot_rng.integers(0, n, size=n).astype(np.int64)
        else:
            sample = np.arange(n, dtype=np.int64)
        arrays = _grow_tree(X, y, sample, len(class_names), max_depth, params.min_leaf_size, k, kernel_seed)
        return Tree(*arrays)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(grow, range(params.n_trees)))
    else:
        trees = [grow(i) for i in range(params.n_trees)]

    forest = Forest(trees, class_names, data.schema, params)
    forest.importances = _importances(trees, d)
    logger.debug("trained %d trees, %d nodes total", len(trees), sum(len(t.feature) for t in trees))
    return forest


def _importances(trees: list[Tree], n_features: int) -> np.ndarray:
    total = np.mean([t.importances(n_features) for t in trees], axis=0)
    s = total.sum()
    return total / s if s > 0 else total


def feature_importances(forest: Forest) -> np.ndarray:
    return forest.importances.copy()


def predict_posterior(forest: Forest, x: FeatureVector | np.ndarray) -> np.ndarray:
    values = x.values if isinstance(x, FeatureVector) else x
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(forest.schema),):
        raise SchemaMismatch(f"expected {len(forest.schema)} features, got {values.shape}")
    return forest.predict_proba(values[None, :])[0]


def undersample(data: Dataset, cap_per_class: int = 2000, rng_seed: int = 0) -> Dataset:
    """Cap every class at ``cap_per_class`` rows, keeping survivors in their original order."""
    if cap_per_class < 1:
        raise ValueError("cap_per_class must be at least 1")
    rng = np.random.default_rng(rng_seed)
    by_class: dict = {}
    for i, lab in enumerate(data.labels):
        by_class.setdefault(lab, []).append(i)
    keep = []
    for lab in sorted(by_class, key=str):
        idx = by_class[lab]
        if len(idx) > cap_per_class:
            idx = rng.choice(idx, size=cap_per_class, replace=False).tolist()
        keep.extend(idx)
    return data.take(np.array(sorted(keep), dtype=np.int64))
