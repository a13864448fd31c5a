"""Box-plot-rule detector: per-feature quartile fences.

A point's anomaly score is the fraction of its features falling
outside [Q1 - 1.5*IQR, Q3 + 1.5*IQR], quartiles by linear
interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["TukeyDetector"]

FENCE_MULTIPLIER = 1.5


@dataclass
class TukeyDetector:
    kind = "tukey"

    lower: np.ndarray  # per-feature lower fence
    upper: np.ndarray

    def __post_init__(self) -> None:
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if (self.lower > self.upper).any():
            raise ValueError("lower fence above upper fence")

    @classmethod
    def fit(cls, X: np.ndarray, **_ignored) -> "TukeyDetector":
        X = np.asarray(X, dtype=float)
        if X.shape[0] < 4:
            raise ValueError("need at least 4 training points for quartiles")
        q1 = np.quantile(X, 0.25, axis=0)  # linear-interpolation quantiles
        q3 = np.quantile(X, 0.75, axis=0)
        iqr = q3 - q1
        return cls(
            lower=q1 - FENCE_MULTIPLIER * iqr, upper=q3 + FENCE_MULTIPLIER * iqr
        )

    def scores(self, X: np.ndarray) -> np.ndarray:
        """Fraction of out-of-fence features per row, in [0, 1]."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        outside = (X < self.lower) | (X > self.upper)
        return outside.mean(axis=1)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TukeyDetector":
        return cls(lower=np.array(d["lower"]), upper=np.array(d["upper"]))
