"""Grid search over forest hyper-parameters, scored by validation PR-AUC."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .forest import ForestParams, fit_forest, resolve_mtry
from .metrics import pr_curve


@dataclass(frozen=True)
class GridSpec:
    n_trees: tuple = (100, 300)
    max_depth: tuple = (8, 16, None)
    mtry: tuple = ("sqrt", "third")
    min_samples_leaf: tuple = (1, 5)
    bootstrap: bool = True
    max_bins: Optional[int] = 255
    seed: int = 0

    def points(self, n_features: int) -> list[ForestParams]:
        """Cartesian product in declaration order; duplicate points (e.g. two
        mtry rules resolving to the same count) are kept once."""
        out, seen = [], set()
        for n_trees, depth, mtry, leaf in itertools.product(
                self.n_trees, self.max_depth, self.mtry, self.min_samples_leaf):
            p = ForestParams(n_trees=n_trees, max_depth=depth, min_samples_leaf=leaf,
                             mtry=resolve_mtry(mtry, n_features), bootstrap=self.bootstrap,
                             seed=self.seed, max_bins=self.max_bins)
            if p not in seen:
                seen.add(p)
                out.append(p)
        if not out:
            raise ValueError("empty hyper-parameter grid")
        return out


def grid_search(train, valid, grid: GridSpec, feature_names=None, n_jobs: int = 1):
    """Fit every grid point on ``train`` and score it on ``valid``.

    ``train`` and ``valid`` are ``(X, y)`` pairs.  Returns the params with the
    highest validation PR-AUC (earliest grid point on ties) and the full
    ``[(params, auc), ...]`` report in grid order.

    Tree ``i`` depends only on ``(seed, i)``, so points that differ only in
    ``n_trees`` share one forest of the largest size and are scored on its
    prefixes; the scores equal those of separate fits.
    """
    X_tr, y_tr = train
    X_va, y_va = valid
    if not np.any(np.asarray(y_va).astype(bool)):
        raise ValueError("validation set has no positive labels")
    points = grid.points(np.asarray(X_tr).shape[1])

    sizes: dict[ForestParams, set] = {}
    for p in points:
        sizes.setdefault(replace(p, n_trees=1), set()).add(p.n_trees)
    aucs = {}
    for base, ns in sizes.items():
        model = fit_forest(X_tr, y_tr, replace(base, n_trees=max(ns)), feature_names,
                           n_jobs=n_jobs)
        X = np.ascontiguousarray(X_va, dtype=np.float64)
        total = np.zeros(X.shape[0])
        for i, tree in enumerate(model.trees, start=1):
            total += tree.predict(X)
            if i in ns:
                aucs[replace(base, n_trees=i)] = pr_curve(total / i, y_va).auc

    report = [(p, aucs[p]) for p in points]
    best, best_auc = None, -np.inf
    for p, auc in report:
        if auc > best_auc:
            best, best_auc = p, auc
    return best, report
