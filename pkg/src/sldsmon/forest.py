"""Random forest classifier with surrogate splits for missing features.

CART-style binary trees grown on bootstrap resamples, Gini impurity
splitting over a fresh random feature subset per node, and probability
output as the average over trees of the reached leaf's positive fraction.
Rows whose split feature is missing are routed by surrogate splits ranked
by agreement with the primary partition, falling back to the majority
(default) direction — both at training and at prediction time.

Everything is deterministic given the seed; a fitted Forest is immutable
and safe to share across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def gini_impurity(pos: int, neg: int) -> float:
    """Binary Gini impurity 2 p (1 - p); maximal 0.5 at a 50/50 node."""
    total = pos + neg
    if total < 1:
        raise ValueError("empty node has no impurity")
    p = pos / total
    return 2.0 * p * (1.0 - p)


@dataclass(frozen=True)
class TreeNode:
    """Internal node (feature is not None) or leaf (feature is None)."""

    feature: int = None
    threshold: float = 0.0
    surrogates: tuple = ()  # (feature, threshold, agreement), agreement descending
    default_left: bool = True
    left: "TreeNode" = None
    right: "TreeNode" = None
    positive_fraction: float = 0.0
    sample_count: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass(frozen=True)
class Forest:
    trees: tuple
    n_trees: int
    features_per_split: int
    min_leaf: int
    seed: int
    n_features: int
    schema_id: str = None
    oob_indices: tuple = None  # per-tree out-of-bag row indices (training only)

    def __post_init__(self):
        if self.n_trees < 1 or len(self.trees) != self.n_trees:
            raise ValueError("forest needs n_trees fitted trees")


def best_split(X, y, rows, candidates, min_child: int = 1):
    """Best (feature, threshold, gain) over candidate features, or None.

    Thresholds are scanned at midpoints between sorted distinct non-missing
    values; rows with a missing candidate value are excluded from that
    feature's gain computation.  `min_child` bounds both child sizes on the
    non-missing partition.  Returns None when no split has positive gain.
    """
    yb = np.asarray(y)[rows].astype(np.int64)
    best = None
    for f in candidates:
        xv = X[rows, f]
        ok = np.isfinite(xv)
        n_ok = int(ok.sum())
        if n_ok < max(2, 2 * min_child):
            continue
        xs = xv[ok]
        ys = yb[ok]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        ys = ys[order]
        pos_tot = int(ys.sum())
        if pos_tot == 0 or pos_tot == n_ok:
            continue
        ks = np.flatnonzero(xs[1:] > xs[:-1]) + 1  # left-partition sizes
        ks = ks[(ks >= min_child) & (n_ok - ks >= min_child)]
        if ks.size == 0:
            continue
        cpos = np.cumsum(ys)
        lpos = cpos[ks - 1]
        ln = ks.astype(float)
        rn = float(n_ok) - ln
        rpos = pos_tot - lpos
        pl = lpos / ln
        pr = rpos / rn
        weighted = (ln * 2 * pl * (1 - pl) + rn * 2 * pr * (1 - pr)) / n_ok
        parent = gini_impurity(pos_tot, n_ok - pos_tot)
        gains = parent - weighted
        j = int(np.argmax(gains))
        if gains[j] <= 1e-15:
            continue
        k = int(ks[j])
        thr = 0.5 * (xs[k - 1] + xs[k])
        if best is None or gains[j] > best[2]:
            best = (int(f), float(thr), float(gains[j]))
    return best


def build_surrogates(X, rows, feature, threshold, candidates, max_surrogates: int = 5):
    """Backup (feature, threshold, agreement) splits mimicking the primary one.

    Candidates are scanned over rows where both the primary and the
    candidate feature are present; surrogates with agreement >= 0.5 are kept,
    ranked by agreement (descending), capped at `max_surrogates`.  Also
    returns the default direction (majority side of the primary split).
    """
    xp = X[rows, feature]
    ok_p = np.isfinite(xp)
    left_p = xp <= threshold
    n_left = int((left_p & ok_p).sum())
    n_right = int(ok_p.sum()) - n_left
    default_left = n_left >= n_right

    found = []
    for f in candidates:
        if f == feature:
            continue
        xv = X[rows, f]
        both = ok_p & np.isfinite(xv)
        n = int(both.sum())
        if n < 2:
            continue
        xs = xv[both]
        lp = left_p[both]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        lp = lp[order].astype(np.int64)
        ks = np.flatnonzero(xs[1:] > xs[:-1]) + 1
        if ks.size == 0:
            continue
        cum_left = np.cumsum(lp)
        total_left = int(lp.sum())
        # rows sent left that are primary-left, plus rows sent right that are
        # primary-right
        agree = cum_left[ks - 1] + (n - ks) - (total_left - cum_left[ks - 1])
        j = int(np.argmax(agree))
        frac = agree[j] / n
        if frac >= 0.5:
            k = int(ks[j])
            found.append((int(f), float(0.5 * (xs[k - 1] + xs[k])), float(frac)))
    found.sort(key=lambda s: (-s[2], s[0]))
    return tuple(found[:max_surrogates]), default_left


def _route_left(X, rows, node):
    """Boolean mask: which of `rows` go left through `node`."""
    xv = X[rows, node.feature]
    go_left = xv <= node.threshold
    unresolved = ~np.isfinite(xv)
    for f, thr, _ in node.surrogates:
        if not unresolved.any():
            break
        sv = X[rows, f]
        usable = unresolved & np.isfinite(sv)
        go_left[usable] = sv[usable] <= thr
        unresolved &= ~usable
    go_left[unresolved] = node.default_left
    return go_left


def _grow_tree(X, y, idx, rng, features_per_split, min_leaf, max_surrogates):
    """Iterative depth-first growth (an arena avoids recursion limits)."""
    n_features = X.shape[1]
    entries = []  # mutable arena; children always carry larger indices
    work = [(idx, None, None)]  # (rows, parent arena slot, "left"/"right")
    while work:
        rows, parent, side = work.pop()
        slot = len(entries)
        if parent is not None:
            entries[parent][side] = slot
        pos = int(y[rows].sum())
        n = rows.size
        entry = {
            "feature": None, "threshold": 0.0, "surrogates": (),
            "default_left": True, "left": None, "right": None,
            "positive_fraction": pos / n, "sample_count": n,
        }
        entries.append(entry)
        if n < 2 * min_leaf or pos == 0 or pos == n:
            continue
        candidates = rng.choice(n_features, size=features_per_split, replace=False)
        split = best_split(X, y, rows, candidates, min_child=min_leaf)
        if split is None:
            continue
        feature, threshold, _ = split
        surrogates, default_left = build_surrogates(
            X, rows, feature, threshold, candidates, max_surrogates
        )
        probe = TreeNode(
            feature=feature, threshold=threshold, surrogates=surrogates,
            default_left=default_left,
        )
        go_left = _route_left(X, rows, probe)
        left_rows = rows[go_left]
        right_rows = rows[~go_left]
        if left_rows.size == 0 or right_rows.size == 0:  # routing collapsed it
            continue
        entry.update(
            feature=feature, threshold=threshold, surrogates=surrogates,
            default_left=default_left,
        )
        work.append((right_rows, slot, "right"))
        work.append((left_rows, slot, "left"))

    frozen = [None] * len(entries)
    for slot in range(len(entries) - 1, -1, -1):
        e = entries[slot]
        internal = e["feature"] is not None and e["left"] is not None
        frozen[slot] = TreeNode(
            feature=e["feature"] if internal else None,
            threshold=e["threshold"],
            surrogates=e["surrogates"],
            default_left=e["default_left"],
            left=frozen[e["left"]] if internal else None,
            right=frozen[e["right"]] if internal else None,
            positive_fraction=e["positive_fraction"],
            sample_count=e["sample_count"],
        )
    return frozen[0]


def fit_forest(
    X,
    y,
    n_trees: int = 50,
    features_per_split: int = None,
    min_leaf: int = 5,
    seed: int = 0,
    max_surrogates: int = 5,
    schema_id: str = None,
) -> Forest:
    """Fit a bootstrap ensemble of Gini trees; deterministic given `seed`."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(np.int64).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("X must be (n, F) with one label per row")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("training labels contain a single class")
    if not np.all(np.isin(classes, [0, 1])):
        raise ValueError("labels must be binary 0/1")
    n, F = X.shape
    if features_per_split is None:
        features_per_split = max(1, math.ceil(math.sqrt(F)))
    features_per_split = min(features_per_split, F)
    rng = np.random.default_rng(seed)
    trees = []
    oob = []
    for _ in range(n_trees):
        sample = rng.integers(0, n, size=n)
        oob.append(np.setdiff1d(np.arange(n), sample))
        trees.append(
            _grow_tree(X, y, sample, rng, features_per_split, min_leaf, max_surrogates)
        )
    return Forest(
        trees=tuple(trees),
        n_trees=n_trees,
        features_per_split=features_per_split,
        min_leaf=min_leaf,
        seed=seed,
        n_features=F,
        schema_id=schema_id,
        oob_indices=tuple(oob),
    )


def _check_schema(forest: Forest, schema_id, n_features):
    if n_features != forest.n_features:
        raise ValueError(
            f"input has {n_features} features, forest expects {forest.n_features}"
        )
    if schema_id is not None and forest.schema_id is not None and schema_id != forest.schema_id:
        raise ValueError(f"schema mismatch: {schema_id!r} vs {forest.schema_id!r}")


def predict_proba_matrix(forest: Forest, X, schema_id: str = None) -> np.ndarray:
    """P(positive) for every row of X, averaged over trees."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_schema(forest, schema_id, X.shape[1])
    n = X.shape[0]
    out = np.zeros(n)
    for root in forest.trees:
        stack = [(root, np.arange(n))]
        while stack:
            node, rows = stack.pop()
            if rows.size == 0:
                continue
            if node.is_leaf:
                out[rows] += node.positive_fraction
                continue
            go_left = _route_left(X, rows, node)
            stack.append((node.left, rows[go_left]))
            stack.append((node.right, rows[~go_left]))
    return out / forest.n_trees


def predict_proba(forest: Forest, x, schema_id: str = None) -> float:
    """P(positive) for a single feature vector (FeatureVector or array)."""
    sid = schema_id
    if hasattr(x, "schema_id"):  # FeatureVector
        sid = x.schema_id if sid is None else sid
        x = x.values
    return float(predict_proba_matrix(forest, np.asarray(x, dtype=float)[None, :], sid)[0])


def predict_oob(forest: Forest, X) -> np.ndarray:
    """Out-of-bag probability per training row (NaN where never out-of-bag)."""
    if forest.oob_indices is None:
        raise ValueError("forest carries no out-of-bag bookkeeping")
    X = np.asarray(X, dtype=float)
    total = np.zeros(X.shape[0])
    count = np.zeros(X.shape[0])
    for root, oob in zip(forest.trees, forest.oob_indices):
        if len(oob) == 0:
            continue
        stack = [(root, np.asarray(oob))]
        while stack:
            node, rows = stack.pop()
            if rows.size == 0:
                continue
            if node.is_leaf:
                total[rows] += node.positive_fraction
                count[rows] += 1.0
                continue
            go_left = _route_left(X, rows, node)
            stack.append((node.left, rows[go_left]))
            stack.append((node.right, rows[~go_left]))
    with np.errstate(invalid="ignore"):
        return np.where(count > 0, total / count, np.nan)
