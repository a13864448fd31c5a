"""Interchangeable unsupervised anomaly detectors.

Each detector trains on a matrix of standardized feature vectors and
returns a per-row anomaly score where larger means more anomalous.
"""

from roamwatch.detectors.iforest import IsolationForest
from roamwatch.detectors.pcagmm import PcaGmmDetector
from roamwatch.detectors.tukey import TukeyDetector
from roamwatch.detectors.vae import FcVae

DETECTOR_KINDS = ("iforest", "tukey", "pcagmm", "fcvae")

__all__ = [
    "IsolationForest",
    "TukeyDetector",
    "PcaGmmDetector",
    "FcVae",
    "DETECTOR_KINDS",
]
