"""Dimensionality-reduced density detector: PCA projection + GMM.

The score is the negative mixture log-likelihood of the projected
point, so the least-likely devices rank highest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from roamwatch.gmm import GmmModel, log_density, select_clusters

__all__ = ["PcaGmmDetector"]

ZERO_EIGENVALUE = 1e-12


@dataclass
class PcaGmmDetector:
    kind = "pcagmm"

    mean: np.ndarray          # training mean removed before projection
    components: np.ndarray    # (d_retained, d) orthonormal rows
    eigenvalues: np.ndarray   # variance along each retained component
    explained_variance: float
    variance_target: float
    gmm: GmmModel

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float)
        self.components = np.asarray(self.components, dtype=float)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float)

    @classmethod
    def fit(
        cls,
        X: np.ndarray,
        *,
        variance_target: float = 0.95,
        k_candidates=None,
        seed: int | np.random.Generator = 0,
    ) -> "PcaGmmDetector":
        X = np.asarray(X, dtype=float)
        n, d = X.shape
        mean = X.mean(axis=0)
        centered = X - mean
        cov = centered.T @ centered / n
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1]
        eigvals = eigvals[order]
        eigvecs = eigvecs[:, order]

        keep = eigvals > ZERO_EIGENVALUE  # drop degenerate directions
        eigvals = eigvals[keep]
        eigvecs = eigvecs[:, keep]
        total = eigvals.sum()
        if total <= 0:
            raise ValueError("training data has zero variance in every direction")
        cum = np.cumsum(eigvals) / total
        retained = int(np.searchsorted(cum, variance_target) + 1)
        retained = min(retained, len(eigvals))

        components = eigvecs[:, :retained].T
        projected = centered @ components.T
        selection = select_clusters(projected, k_candidates=k_candidates, seed=seed)
        return cls(
            mean=mean,
            components=components,
            eigenvalues=eigvals[:retained],
            explained_variance=float(cum[retained - 1]),
            variance_target=variance_target,
            gmm=selection.model,
        )

    def project(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return (X - self.mean) @ self.components.T

    def scores(self, X: np.ndarray) -> np.ndarray:
        """Negative log-likelihood under the projected-space mixture."""
        return -log_density(self.gmm, self.project(X))

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "explained_variance": self.explained_variance,
            "variance_target": self.variance_target,
            "gmm": self.gmm.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PcaGmmDetector":
        return cls(
            mean=np.array(d["mean"]),
            components=np.array(d["components"]),
            eigenvalues=np.array(d["eigenvalues"]),
            explained_variance=float(d["explained_variance"]),
            variance_target=float(d["variance_target"]),
            gmm=GmmModel.from_dict(d["gmm"]),
        )
