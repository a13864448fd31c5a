"""Diagonal-covariance Gaussian mixtures with BIC model selection.

Used twice in the pipeline: to learn device behavioral contexts from
low-dimensional clustering features, and as the density stage of the
PCA+GMM detector.  New points are attached to existing clusters by
exact nearest-neighbor search over the retained training points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "GmmModel",
    "SelectionEntry",
    "SelectionResult",
    "fit_gmm",
    "select_clusters",
    "assign_cluster",
    "assign_clusters",
    "responsibilities",
    "log_density",
    "DEFAULT_K_CANDIDATES",
]

VARIANCE_FLOOR = 1e-6
CONVERGENCE_TOL = 1e-6
MAX_ITER = 200

DEFAULT_K_CANDIDATES = tuple(range(1, 11)) + (30,)


@dataclass
class GmmModel:
    """A fitted mixture: parameters plus training-time diagnostics."""

    weights: np.ndarray     # (k,)
    means: np.ndarray       # (k, d)
    variances: np.ndarray   # (k, d), diagonal covariances
    log_likelihood: float   # total over training points
    bic: float
    labels: np.ndarray      # (n,) hard assignment of each training point
    converged: bool
    n_iter: int
    reseeds: int = 0
    ll_history: list[float] = field(default_factory=list)  # not persisted

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        if (self.variances < VARIANCE_FLOOR - 1e-15).any():
            raise ValueError("variances below the floor")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.k
        ):
            raise ValueError("labels out of range")

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def component_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "log_likelihood": self.log_likelihood,
            "bic": self.bic,
            "labels": self.labels.tolist(),
            "converged": self.converged,
            "n_iter": self.n_iter,
            "reseeds": self.reseeds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmModel":
        return cls(
            weights=np.array(d["weights"]),
            means=np.array(d["means"]),
            variances=np.array(d["variances"]),
            log_likelihood=float(d["log_likelihood"]),
            bic=float(d["bic"]),
            labels=np.array(d["labels"], dtype=int),
            converged=bool(d["converged"]),
            n_iter=int(d["n_iter"]),
            reseeds=int(d.get("reseeds", 0)),
        )


def _component_log_density(
    X: np.ndarray, means: np.ndarray, variances: np.ndarray
) -> np.ndarray:
    """log N(x | mu_j, diag sigma2_j) for every (point, component) pair."""
    d = X.shape[1]
    inv = 1.0 / variances                                   # (k, d)
    const = -0.5 * (d * np.log(2 * np.pi) + np.log(variances).sum(axis=1))
    quad = (
        (X**2) @ inv.T
        - 2.0 * X @ (means * inv).T
        + (means**2 * inv).sum(axis=1)[None, :]
    )
    return const[None, :] - 0.5 * quad


def log_density(model: GmmModel, X: np.ndarray) -> np.ndarray:
    """Mixture log-density of each row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    joint = _component_log_density(X, model.means, model.variances) + np.log(
        model.weights
    )
    return logsumexp(joint, axis=1)


def responsibilities(model: GmmModel, X: np.ndarray) -> np.ndarray:
    """Posterior component probabilities, computed in log space.

    Accepts one point (d,) or a batch (n, d); rows sum to 1.
    """
    pt = np.asarray(X, dtype=float)
    single = pt.ndim == 1
    pt = np.atleast_2d(pt)
    joint = _component_log_density(pt, model.means, model.variances) + np.log(
        model.weights
    )
    resp = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
    return resp[0] if single else resp


def _kmeanspp_means(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seed k means from the data, spreading them distance-proportionally."""
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))  # all points coincide
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _num_params(k: int, d: int) -> int:
    # per component: d means + d variances + 1 weight, minus the simplex tie
    return k * (2 * d + 1) - 1


def fit_gmm(
    X: np.ndarray,
    k: int,
    seed: int | np.random.Generator = 0,
    *,
    max_iter: int = MAX_ITER,
    tol: float = CONVERGENCE_TOL,
) -> GmmModel:
    """Fit a k-component diagonal GMM by EM.

    Stops when the total log-likelihood improves by less than ``tol``
    or after ``max_iter`` iterations.  A component that loses all its
    responsibility is re-seeded at the point the current mixture
    explains worst, and EM continues.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be 2-D")
    n, d = X.shape
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    global_var = np.maximum(X.var(axis=0), VARIANCE_FLOOR)
    means = _kmeanspp_means(X, k, rng)
    variances = np.tile(global_var, (k, 1))
    weights = np.full(k, 1.0 / k)

    prev_ll: float | None = None
    converged = False
    reseeds = 0
    n_iter = 0
    log_resp = None
    ll = -np.inf
    ll_history: list[float] = []

    for n_iter in range(1, max_iter + 1):
        joint = _component_log_density(X, means, variances) + np.log(weights)
        norm = logsumexp(joint, axis=1, keepdims=True)
        ll = float(norm.sum())
        log_resp = joint - norm
        ll_history.append(ll)

        if prev_ll is not None and ll - prev_ll < tol:
            converged = True
            break
        prev_ll = ll

        resp = np.exp(log_resp)
        nk = resp.sum(axis=0)
        empty = np.flatnonzero(nk < 1e-9)
        if empty.size:
            # re-seed dead components at the worst-explained points
            density = norm[:, 0]
            worst = np.argsort(density)[: empty.size]
            for j, idx in zip(empty, worst):
                means[j] = X[idx]
                variances[j] = global_var
                weights[j] = 1.0 / n
            weights = weights / weights.sum()
            reseeds += empty.size
            prev_ll = None  # restart the convergence window
            continue

        weights = nk / n
        means = (resp.T @ X) / nk[:, None]
        sq = resp.T @ (X**2) / nk[:, None] - means**2
        variances = np.maximum(sq, VARIANCE_FLOOR)

    labels = np.argmax(log_resp, axis=1)
    bic = -2.0 * ll + _num_params(k, d) * np.log(n)
    return GmmModel(
        weights=weights,
        means=means,
        variances=variances,
        log_likelihood=ll,
        bic=float(bic),
        labels=labels,
        converged=converged,
        n_iter=n_iter,
        reseeds=reseeds,
        ll_history=ll_history,
    )


@dataclass
class SelectionEntry:
    k: int
    bic: float
    min_component_size: int
    discarded: bool
    reason: str = ""


@dataclass
class SelectionResult:
    model: GmmModel
    k: int
    table: list[SelectionEntry] = field(default_factory=list)
    all_discarded: bool = False


def select_clusters(
    X: np.ndarray,
    k_candidates: tuple[int, ...] | list[int] | None = None,
    seed: int | np.random.Generator = 0,
) -> SelectionResult:
    """Fit every candidate k and keep the best-BIC usable model.

    Models containing a component with fewer than max(0.5% of n, 10)
    hard-assigned points are discarded; if every candidate is discarded
    the minimum-BIC model is returned with ``all_discarded`` set.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    candidates = sorted(set(k_candidates or DEFAULT_K_CANDIDATES))
    if not candidates:
        raise ValueError("k_candidates must be non-empty")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    min_size = max(int(np.ceil(0.005 * n)), 10)
    table: list[SelectionEntry] = []
    fits: dict[int, GmmModel] = {}
    for k in candidates:
        if k >= n:
            table.append(
                SelectionEntry(k, np.inf, 0, True, f"k={k} needs more than {n} points")
            )
            continue
        model = fit_gmm(X, k, rng)
        fits[k] = model
        smallest = int(model.component_sizes().min())
        discarded = smallest < min_size
        table.append(
            SelectionEntry(
                k,
                model.bic,
                smallest,
                discarded,
                f"component below {min_size} points" if discarded else "",
            )
        )
    if not fits:
        raise ValueError("no feasible candidate k (all >= n)")

    survivors = [e for e in table if not e.discarded]
    pool = survivors if survivors else [e for e in table if e.k in fits]
    best = min(pool, key=lambda e: (e.bic, e.k))
    return SelectionResult(
        model=fits[best.k],
        k=best.k,
        table=table,
        all_discarded=not survivors,
    )


def assign_clusters(
    model: GmmModel, train_X: np.ndarray, points: np.ndarray
) -> np.ndarray:
    """Cluster ids for new points by exact 1-NN over training points.

    Ties on distance resolve to the lowest training-point index.
    """
    train_X = np.asarray(train_X, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if train_X.shape[0] != model.labels.shape[0]:
        raise ValueError("training data does not match the model's label count")
    # squared distances; argmin returns the first (lowest-index) minimum
    d2 = (
        (points**2).sum(axis=1)[:, None]
        - 2.0 * points @ train_X.T
        + (train_X**2).sum(axis=1)[None, :]
    )
    nearest = np.argmin(d2, axis=1)
    return model.labels[nearest]


def assign_cluster(model: GmmModel, train_X: np.ndarray, point: np.ndarray) -> int:
    return int(assign_clusters(model, train_X, np.asarray(point))[0])
