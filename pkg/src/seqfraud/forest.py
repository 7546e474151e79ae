"""Random forest of Gini-impurity CART trees.

Trees are grown by a numba-compiled kernel that releases the GIL, so
``fit_forest(..., n_jobs>1)`` fits trees concurrently on threads.  Each tree
draws its bootstrap sample and feature subsets from a stream derived from
``(seed, tree_index)``, which makes the fitted forest independent of the
execution schedule.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: Optional[int] = None
    min_samples_leaf: int = 1
    mtry: int = 1
    bootstrap: bool = True
    seed: int = 0
    # None: one bin per distinct value (exact CART)
    max_bins: Optional[int] = 255

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if self.max_bins is not None and self.max_bins < 2:
            raise ValueError("max_bins must be >= 2 or None")


@dataclass(frozen=True, eq=False)
class Tree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_fraction: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _predict_tree(X, self.feature, self.threshold, self.left,
                             self.right, self.leaf_fraction)


@dataclass(frozen=True, eq=False)
class RandomForest:
    trees: list
    params: ForestParams
    feature_names: list
    # category vocabularies used to build the matrix this forest was fit on
    encoders: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def predict_proba(self, X) -> np.ndarray:
        """Mean leaf positive-fraction over trees, one score per row."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(
                f"expected {self.n_features} features, got shape {X.shape}")
        X = np.ascontiguousarray(X)
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total += tree.predict(X)
        out = total / len(self.trees)
        return out[0] if single else out


def predict_proba(model: RandomForest, x) -> np.ndarray | float:
    return model.predict_proba(x)


# --------------------------------------------------------------------------
# tree-growing kernel

@njit(cache=True)
def _splitmix64(state):
    state = (state + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = state
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return state, z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _grow_tree(codes, y, rows, n_bins, cut_values, max_depth, min_leaf, mtry, rng_state):
    n = rows.shape[0]
    d = codes.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)

    max_bins = 1
    for f in range(d):
        if n_bins[f] > max_bins:
            max_bins = n_bins[f]
    cnt = np.zeros(max_bins)
    pcnt = np.zeros(max_bins)
    idx = rows.copy()
    buf = np.empty(n, dtype=np.int64)
    node_codes = np.empty(n, dtype=np.int64)
    feats = np.arange(d)

    # explicit stack of (node, start, end, depth)
    stack = np.empty((cap, 4), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    state = np.uint64(rng_state)

    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        m = end - start
        pos = 0.0
        for i in range(start, end):
            pos += y[idx[i]]
        value[node] = pos / m

        if pos == 0.0 or pos == m or m < 2 * min_leaf:
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue

        # Fisher-Yates over feature ids; visit until mtry non-constant ones
        for i in range(d):
            feats[i] = i
        best_score = -1.0
        best_f = -1
        best_b = -1
        visited = 0
        drawn = 0
        while drawn < d and visited < mtry:
            state, r = _splitmix64(state)
            j = drawn + np.int64(r % np.uint64(d - drawn))
            f = feats[j]
            feats[j] = feats[drawn]
            feats[drawn] = f
            drawn += 1
            nb = n_bins[f]
            if nb < 2:
                continue

            if m * 8 < nb:
                # small node: sort its codes instead of sweeping every bin
                for i in range(m):
                    node_codes[i] = codes[idx[start + i], f]
                order = np.argsort(node_codes[:m])
                if node_codes[order[0]] == node_codes[order[m - 1]]:
                    continue
                visited += 1
                pl = 0.0
                for i in range(m - 1):
                    pl += y[idx[start + order[i]]]
                    b0 = node_codes[order[i]]
                    if b0 == node_codes[order[i + 1]]:
                        continue
                    nl = i + 1
                    nr = m - nl
                    if nl < min_leaf or nr < min_leaf:
                        continue
                    pr = pos - pl
                    score = (pl * pl + (nl - pl) * (nl - pl)) / nl \
                        + (pr * pr + (nr - pr) * (nr - pr)) / nr
                    if (score > best_score
                            or (score == best_score and f < best_f)
                            or (score == best_score and f == best_f and b0 < best_b)):
                        best_score = score
                        best_f = f
                        best_b = b0
            else:
                for b in range(nb):
                    cnt[b] = 0.0
                    pcnt[b] = 0.0
                for i in range(start, end):
                    k = idx[i]
                    c = codes[k, f]
                    cnt[c] += 1.0
                    pcnt[c] += y[k]
                lo = 0
                while cnt[lo] == 0.0:
                    lo += 1
                hi = nb - 1
                while cnt[hi] == 0.0:
                    hi -= 1
                if lo == hi:
                    continue
                visited += 1
                nl = 0.0
                pl = 0.0
                for b in range(lo, hi):
                    if cnt[b] == 0.0:
                        continue
                    nl += cnt[b]
                    pl += pcnt[b]
                    nr = m - nl
                    if nl < min_leaf or nr < min_leaf:
                        continue
                    pr = pos - pl
                    score = (pl * pl + (nl - pl) * (nl - pl)) / nl \
                        + (pr * pr + (nr - pr) * (nr - pr)) / nr
                    if (score > best_score
                            or (score == best_score and f < best_f)
                            or (score == best_score and f == best_f and b < best_b)):
                        best_score = score
                        best_f = f
                        best_b = b

        if best_f < 0:
            continue

        # stable partition of idx[start:end]
        nl_i = 0
        for i in range(start, end):
            if codes[idx[i], best_f] <= best_b:
                nl_i += 1
        a = start
        b = start + nl_i
        for i in range(start, end):
            k = idx[i]
            if codes[k, best_f] <= best_b:
                buf[a] = k
                a += 1
            else:
                buf[b] = k
                b += 1
        for i in range(start, end):
            idx[i] = buf[i]

        feature[node] = best_f
        threshold[node] = cut_values[best_f, best_b]
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        # push right first so the left subtree is grown first
        stack[top, 0] = rc
        stack[top, 1] = start + nl_i
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = lc
        stack[top, 1] = start
        stack[top, 2] = start + nl_i
        stack[top, 3] = depth + 1
        top += 1

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], value[:n_nodes])


@njit(cache=True, nogil=True)
def _predict_tree(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


def bin_features(X: np.ndarray, max_bins: Optional[int]):
    """Map each column to ordered integer bin codes.

    A column with at most ``max_bins`` distinct values keeps one bin per value,
    so split search on it is exact.  Wider columns are cut at data quantiles.
    ``cuts[f, b]`` is the threshold separating bin ``b`` from bin ``b + 1``:
    the midpoint between the largest value in ``b`` and the smallest in ``b+1``.
    """
    n, d = X.shape
    codes = np.empty((n, d), dtype=np.int32, order="F")
    n_bins = np.empty(d, dtype=np.int64)
    uppers = []
    for f in range(d):
        col = X[:, f]
        uniq = np.unique(col)
        if max_bins is None or len(uniq) <= max_bins:
            upper = uniq
        else:
            qs = np.linspace(0.0, 1.0, max_bins + 1)[1:-1]
            upper = np.unique(np.quantile(col, qs, method="inverted_cdf"))
            if upper[-1] < uniq[-1]:
                upper = np.append(upper, uniq[-1])
        codes[:, f] = np.searchsorted(upper, col, side="left")
        n_bins[f] = len(upper)
        uppers.append((upper, uniq))
    cuts = np.zeros((d, max(1, int(n_bins.max(initial=1)))))
    for f, (upper, uniq) in enumerate(uppers):
        if len(upper) < 2:
            continue
        nxt = uniq[np.searchsorted(uniq, upper[:-1], side="right")]
        mid = 0.5 * (upper[:-1] + nxt)
        # midpoint can round up onto the next value; fall back to the bin max
        mid = np.where(mid >= nxt, upper[:-1], mid)
        cuts[f, : len(mid)] = mid
    return codes, n_bins, cuts


def _tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tree_index,)))


def _fit_tree(binned, y, params: ForestParams, tree_index: int) -> Tree:
    codes, n_bins, cuts = binned
    n, d = codes.shape
    rng = _tree_rng(params.seed, tree_index)
    if params.bootstrap:
        rows = np.sort(rng.integers(0, n, n))
    else:
        rows = np.arange(n)
    rng_state = int(rng.integers(0, 2**63 - 1))
    depth = -1 if params.max_depth is None else params.max_depth
    mtry = min(params.mtry, d)
    arrays = _grow_tree(codes, y, rows, n_bins, cuts, depth,
                        params.min_samples_leaf, mtry, rng_state)
    return Tree(*arrays)


def fit_forest(features, labels, params: ForestParams,
               feature_names: Sequence[str] | None = None,
               n_jobs: int = 1, encoders: dict | None = None) -> RandomForest:
    """Grow ``params.n_trees`` CART trees on bootstrap resamples.

    Splits maximise the Gini impurity decrease over ``mtry`` randomly chosen
    non-constant features; ties go to the lowest feature index, then the
    lowest threshold.  Leaves store the positive-class fraction.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("fit_forest needs a non-empty 2-D feature matrix")
    if y.shape != (X.shape[0],):
        raise ValueError("labels must have one entry per row")
    if X.shape[0] < 2:
        raise ValueError("fit_forest needs at least 2 rows")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix contains non-finite values")
    if feature_names is None:
        feature_names = [f"x{i}" for i in range(X.shape[1])]
    if len(feature_names) != X.shape[1]:
        raise ValueError("feature_names length does not match the matrix")

    binned = bin_features(X, params.max_bins)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(lambda i: _fit_tree(binned, y, params, i),
                                  range(params.n_trees)))
    else:
        trees = [_fit_tree(binned, y, params, i) for i in range(params.n_trees)]
    return RandomForest(trees, params, list(feature_names), dict(encoders or {}))


# --------------------------------------------------------------------------
# serialization

def forest_to_dict(model: RandomForest) -> dict:
    trees = []
    for t in model.trees:
        trees.append({
            "split_feature": t.feature.tolist(),
            "threshold": t.threshold.tolist(),
            "left": t.left.tolist(),
            "right": t.right.tolist(),
            "leaf_fraction": t.leaf_fraction.tolist(),
        })
    return {
        "format_version": FORMAT_VERSION,
        "params": asdict(model.params),
        "feature_names": list(model.feature_names),
        "encoders": model.encoders,
        "trees": trees,
    }


def forest_from_dict(doc: dict) -> RandomForest:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported forest format {doc.get('format_version')!r}")
    params = ForestParams(**doc["params"])
    trees = []
    for t in doc["trees"]:
        tree = Tree(np.asarray(t["split_feature"], dtype=np.int64),
                    np.asarray(t["threshold"], dtype=np.float64),
                    np.asarray(t["left"], dtype=np.int64),
                    np.asarray(t["right"], dtype=np.int64),
                    np.asarray(t["leaf_fraction"], dtype=np.float64))
        if np.any((tree.leaf_fraction < 0) | (tree.leaf_fraction > 1)):
            raise ValueError("leaf fraction outside [0, 1]")
        trees.append(tree)
    if len(trees) != params.n_trees:
        raise ValueError("tree count does not match params.n_trees")
    return RandomForest(trees, params, list(doc["feature_names"]),
                        dict(doc.get("encoders", {})))


def save_forest(model: RandomForest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(forest_to_dict(model), fh)


def load_forest(path) -> RandomForest:
    with open(path, encoding="utf-8") as fh:
        return forest_from_dict(json.load(fh))


def resolve_mtry(rule, n_features: int) -> int:
    """Turn ``"sqrt"``, ``"third"`` or an int into a feature count."""
    if rule == "sqrt":
        k = math.ceil(math.sqrt(n_features))
    elif rule == "third":
        k = math.ceil(n_features / 3)
    else:
        k = int(rule)
    return max(1, min(k, n_features))
