"""Isolation forest built from scratch on numpy.

Anomalies are points that random axis-aligned splits separate quickly;
the score maps average isolation depth into (0, 1] where higher means
more anomalous.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["IsolationForest", "average_path_length"]

EULER_GAMMA = 0.5772156649


def _harmonic(i: np.ndarray | float) -> np.ndarray | float:
    return np.log(i) + EULER_GAMMA


def average_path_length(m: np.ndarray | int) -> np.ndarray | float:
    """Expected unsuccessful-search depth c(m) of a BST with m points.

    Used both to normalize scores and to credit truncated subtrees.
    c(0) = c(1) = 0.
    """
    m_arr = np.asarray(m, dtype=float)
    out = np.zeros_like(m_arr)
    big = m_arr >= 2
    mb = m_arr[big]
    out[big] = 2.0 * _harmonic(mb - 1.0) - 2.0 * (mb - 1.0) / mb
    return out if isinstance(m, np.ndarray) else float(out)


@dataclass
class _Tree:
    """Flat node arrays: ``feat`` < 0 marks a leaf holding ``size`` points."""

    feat: np.ndarray
    thresh: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray

    def to_dict(self) -> dict:
        return {
            "feat": self.feat.tolist(),
            "thresh": self.thresh.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "size": self.size.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "_Tree":
        return cls(
            feat=np.array(d["feat"], dtype=np.int64),
            thresh=np.array(d["thresh"], dtype=float),
            left=np.array(d["left"], dtype=np.int64),
            right=np.array(d["right"], dtype=np.int64),
            size=np.array(d["size"], dtype=np.int64),
        )


def _grow_tree(X: np.ndarray, rng: np.random.Generator, height_limit: int) -> _Tree:
    feat: list[int] = []
    thresh: list[float] = []
    left: list[int] = []
    right: list[int] = []
    size: list[int] = []

    def leaf(n_points: int) -> int:
        idx = len(feat)
        feat.append(-1)
        thresh.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n_points)
        return idx

    def build(rows: np.ndarray, depth: int) -> int:
        if depth >= height_limit or len(rows) <= 1:
            return leaf(len(rows))
        sub = X[rows]
        lo = sub.min(axis=0)
        hi = sub.max(axis=0)
        splittable = np.flatnonzero(hi > lo)
        if splittable.size == 0:
            return leaf(len(rows))
        f = int(splittable[rng.integers(splittable.size)])
        s = float(rng.uniform(lo[f], hi[f]))
        mask = sub[:, f] < s
        if not mask.any() or mask.all():  # degenerate draw at the boundary
            return leaf(len(rows))
        idx = len(feat)
        feat.append(f)
        thresh.append(s)
        left.append(-1)
        right.append(-1)
        size.append(len(rows))
        l = build(rows[mask], depth + 1)
        r = build(rows[~mask], depth + 1)
        left[idx] = l
        right[idx] = r
        return idx

    build(np.arange(len(X)), 0)
    return _Tree(
        feat=np.array(feat, dtype=np.int64),
        thresh=np.array(thresh, dtype=float),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        size=np.array(size, dtype=np.int64),
    )


@dataclass
class IsolationForest:
    """t random isolation trees over ψ-point subsamples."""

    kind = "iforest"

    n_trees: int
    subsample: int  # effective ψ after capping at n
    height_limit: int
    trees: list[_Tree] = field(default_factory=list)
    train_score_threshold: float = 0.0  # (1-q) quantile of training scores
    contamination: float = 0.05

    @classmethod
    def fit(
        cls,
        X: np.ndarray,
        *,
        n_trees: int = 100,
        subsample: int = 256,
        contamination: float = 0.05,
        seed: int | np.random.Generator = 0,
    ) -> "IsolationForest":
        X = np.asarray(X, dtype=float)
        n = X.shape[0]
        if n < 2:
            raise ValueError("need at least 2 training points")
        if not 0.0 < contamination < 0.5:
            raise ValueError("contamination must lie in (0, 0.5)")
        rng = (
            seed
            if isinstance(seed, np.random.Generator)
            else np.random.default_rng(seed)
        )
        psi = min(subsample, n)
        height_limit = int(np.ceil(np.log2(psi))) if psi > 1 else 0
        trees = []
        for _ in range(n_trees):
            rows = rng.choice(n, size=psi, replace=False)
            trees.append(_grow_tree(X[rows], rng, height_limit))
        model = cls(
            n_trees=n_trees,
            subsample=psi,
            height_limit=height_limit,
            trees=trees,
            contamination=contamination,
        )
        train_scores = model.scores(X)
        model.train_score_threshold = float(
            np.quantile(train_scores, 1.0 - contamination)
        )
        return model

    def _tree_paths(self, tree: _Tree, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        depth = np.zeros(X.shape[0], dtype=float)
        while True:
            f = tree.feat[node]
            active = np.flatnonzero(f >= 0)
            if active.size == 0:
                break
            cur = node[active]
            go_left = X[active, tree.feat[cur]] < tree.thresh[cur]
            node[active] = np.where(go_left, tree.left[cur], tree.right[cur])
            depth[active] += 1.0
        return depth + average_path_length(tree.size[node])

    def scores(self, X: np.ndarray) -> np.ndarray:
        """Anomaly score per row: 2^(−E[h(x)] / c(ψ)), in (0, 1]."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mean_path = np.zeros(X.shape[0])
        for tree in self.trees:
            mean_path += self._tree_paths(tree, X)
        mean_path /= len(self.trees)
        c_psi = average_path_length(self.subsample)
        if c_psi <= 0:
            return np.full(X.shape[0], 0.5)
        return np.power(2.0, -mean_path / c_psi)

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "subsample": self.subsample,
            "height_limit": self.height_limit,
            "train_score_threshold": self.train_score_threshold,
            "contamination": self.contamination,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IsolationForest":
        return cls(
            n_trees=int(d["n_trees"]),
            subsample=int(d["subsample"]),
            height_limit=int(d["height_limit"]),
            trees=[_Tree.from_dict(t) for t in d["trees"]],
            train_score_threshold=float(d["train_score_threshold"]),
            contamination=float(d["contamination"]),
        )
