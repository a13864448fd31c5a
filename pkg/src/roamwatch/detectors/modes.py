"""Training modes and the persisted model bundle.

A ``ModelSet`` holds everything needed to score new devices: the
feature scaler, the behavioral-context clustering, and one fitted
detector per scope.  Three modes control scope resolution:

* ``global`` — one detector over the whole fleet;
* ``per-cluster`` — one detector per behavioral cluster, falling back
  to the global detector for clusters too small to train on;
* ``major-cluster`` — each (client, country) group is scored by the
  detector of the cluster holding the plurality of its devices.

Raw detector scores are not comparable across per-cluster models (each
model's score distribution has its own location and spread), so every
trained detector stores a calibration of its training scores over the
population it will score (median -> 0, 95th percentile -> 1).  In
per-cluster mode that population is the cluster's members; in
major-cluster mode it is the union of the groups resolving to the
detector, minority-profile members included.  ``score_devices``
reports scores on that calibrated scale; within one model the mapping
is affine and order-preserving, so global-mode behavior is unchanged
while the flag cut compares devices across models on equal footing.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import IO, Mapping

import numpy as np
import pandas as pd

from roamwatch.detectors.iforest import IsolationForest
from roamwatch.detectors.pcagmm import PcaGmmDetector
from roamwatch.detectors.tukey import TukeyDetector
from roamwatch.detectors.vae import FcVae
from roamwatch.features import ScalerParams, standardize
from roamwatch.gmm import GmmModel, assign_clusters

__all__ = [
    "Mode",
    "MODES",
    "GLOBAL_KEY",
    "MIN_CLUSTER_DEVICES",
    "FORMAT_VERSION",
    "ClusterContext",
    "ModelSet",
    "ScoreResult",
    "train",
    "score_devices",
    "save_model_set",
    "load_model_set",
    "group_key",
]


class Mode:
    GLOBAL = "global"
    PER_CLUSTER = "per-cluster"
    MAJOR_CLUSTER = "major-cluster"


MODES = (Mode.GLOBAL, Mode.PER_CLUSTER, Mode.MAJOR_CLUSTER)

#: detector-map key for the fleet-wide model (also the fallback)
GLOBAL_KEY = -1

#: clusters with fewer devices than this train no detector of their own
MIN_CLUSTER_DEVICES = 10

FORMAT_VERSION = "1.0"

_DETECTOR_TYPES = {
    "iforest": IsolationForest,
    "tukey": TukeyDetector,
    "pcagmm": PcaGmmDetector,
    "fcvae": FcVae,
}


def group_key(client_id: str, country: str) -> str:
    return f"{client_id}|{country}"


@dataclass
class ClusterContext:
    """Behavioral clustering retained for assigning new devices."""

    gmm: GmmModel
    scaler: ScalerParams       # over clustering features, not detector features
    train_points: np.ndarray   # scaled clustering features, row-aligned to labels
    branch: str
    selected_k: int
    all_discarded: bool = False

    def assign(self, raw_points: np.ndarray) -> np.ndarray:
        """Cluster ids for raw (unscaled) clustering-feature rows."""
        scaled, _ = standardize(np.atleast_2d(raw_points), self.scaler)
        return assign_clusters(self.gmm, self.train_points, scaled)

    def to_dict(self) -> dict:
        return {
            "gmm": self.gmm.to_dict(),
            "scaler": self.scaler.to_dict(),
            "train_points": self.train_points.tolist(),
            "branch": self.branch,
            "selected_k": self.selected_k,
            "all_discarded": self.all_discarded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterContext":
        return cls(
            gmm=GmmModel.from_dict(d["gmm"]),
            scaler=ScalerParams.from_dict(d["scaler"]),
            train_points=np.array(d["train_points"], dtype=float),
            branch=d["branch"],
            selected_k=int(d["selected_k"]),
            all_discarded=bool(d["all_discarded"]),
        )


@dataclass
class ModelSet:
    branch: str
    mode: str
    detector_kind: str
    contamination: float
    seed: int
    data_fingerprint: str
    scaler: ScalerParams
    detectors: dict[int, object]          # GLOBAL_KEY always present
    context: ClusterContext | None = None
    group_map: dict[str, int] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    #: per-detector (loc, scale) of training scores; scoring reports
    #: (raw - loc) / scale so different models share one scale
    calibration: dict[int, tuple[float, float]] = field(default_factory=dict)

    def detector_for(self, cluster_id: int | None) -> tuple[object, int]:
        """Resolve a detector, falling back to the global one."""
        if cluster_id is not None and cluster_id in self.detectors:
            return self.detectors[cluster_id], cluster_id
        return self.detectors[GLOBAL_KEY], GLOBAL_KEY

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "branch": self.branch,
            "mode": self.mode,
            "detector_kind": self.detector_kind,
            "contamination": self.contamination,
            "seed": self.seed,
            "data_fingerprint": self.data_fingerprint,
            "scaler": self.scaler.to_dict(),
            "context": self.context.to_dict() if self.context else None,
            "group_map": self.group_map,
            "notes": self.notes,
            "detectors": {str(k): v.to_dict() for k, v in self.detectors.items()},
            "calibration": {
                str(k): [loc, scale]
                for k, (loc, scale) in self.calibration.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSet":
        version = d.get("format_version", "")
        major = version.split(".", 1)[0]
        ours = FORMAT_VERSION.split(".", 1)[0]
        if major != ours:
            raise ValueError(
                f"model file format {version!r} is not readable by this build "
                f"(supports major version {ours})"
            )
        det_type = _DETECTOR_TYPES[d["detector_kind"]]
        return cls(
            branch=d["branch"],
            mode=d["mode"],
            detector_kind=d["detector_kind"],
            contamination=float(d["contamination"]),
            seed=int(d["seed"]),
            data_fingerprint=d["data_fingerprint"],
            scaler=ScalerParams.from_dict(d["scaler"]),
            context=(
                ClusterContext.from_dict(d["context"]) if d["context"] else None
            ),
            group_map={k: int(v) for k, v in d["group_map"].items()},
            notes=list(d["notes"]),
            detectors={
                int(k): det_type.from_dict(v) for k, v in d["detectors"].items()
            },
            calibration={
                int(k): (float(v[0]), float(v[1]))
                for k, v in d.get("calibration", {}).items()
            },
        )


def save_model_set(model_set: ModelSet, sink: IO | str | os.PathLike) -> None:
    doc = json.dumps(model_set.to_dict(), indent=1)
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="utf-8") as fh:
            fh.write(doc)
    else:
        sink.write(doc)


def load_model_set(source: IO | str | os.PathLike) -> ModelSet:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    else:
        doc = json.load(source)
    return ModelSet.from_dict(doc)


def _fingerprint(features: pd.DataFrame) -> str:
    h = hashlib.sha256()
    h.update("\x1f".join(map(str, features.index)).encode())
    h.update(np.ascontiguousarray(features.to_numpy(dtype=float)).tobytes())
    return h.hexdigest()


def _subset_seed(seed: int, device_ids) -> np.random.Generator:
    """RNG keyed to (run seed, exact device subset).

    Two scopes covering the same devices train identical detectors, so
    a single-cluster fleet behaves the same under every mode.
    """
    digest = hashlib.sha256("\x1f".join(sorted(device_ids)).encode()).digest()
    token = int.from_bytes(digest[:8], "big")
    return np.random.default_rng(np.random.SeedSequence((seed, token)))


def _score_calibration(detector, X: np.ndarray) -> tuple[float, float]:
    """(loc, scale) mapping the model's training scores to a shared
    scale: median -> 0, 95th percentile -> 1."""
    s = np.asarray(detector.scores(X), dtype=float)
    loc = float(np.quantile(s, 0.5))
    scale = float(np.quantile(s, 0.95)) - loc
    if scale <= 0.0:
        scale = float(np.std(s))
    if scale <= 0.0:
        scale = 1.0
    return loc, scale


def _fit_detector(kind: str, X: np.ndarray, contamination: float,
                  rng: np.random.Generator, params: dict):
    if kind == "iforest":
        return IsolationForest.fit(X, contamination=contamination, seed=rng, **params)
    if kind == "tukey":
        return TukeyDetector.fit(X, **params)
    if kind == "pcagmm":
        return PcaGmmDetector.fit(X, seed=rng, **params)
    if kind == "fcvae":
        return FcVae.fit(X, seed=rng, **params)
    raise ValueError(
        f"unknown detector {kind!r}; valid: {sorted(_DETECTOR_TYPES)}"
    )


def train(
    mode: str,
    features: pd.DataFrame,
    *,
    detector: str = "iforest",
    contamination: float = 0.05,
    seed: int = 0,
    assignments: Mapping[str, int] | None = None,
    groups: Mapping[str, tuple[str, str]] | None = None,
    context: ClusterContext | None = None,
    branch: str = "b2",
    detector_params: dict | None = None,
) -> ModelSet:
    """Fit the detector(s) demanded by ``mode`` over raw feature rows.

    ``features`` is indexed by device_id.  ``assignments`` maps each
    device to its behavioral cluster (required outside global mode);
    ``groups`` maps devices to (client_id, country) and is required for
    major-cluster resolution.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; valid: {MODES}")
    if detector not in _DETECTOR_TYPES:
        raise ValueError(
            f"unknown detector {detector!r}; valid: {sorted(_DETECTOR_TYPES)}"
        )
    if not 0.0 < contamination < 0.5:
        raise ValueError("contamination must lie in (0, 0.5)")
    if mode != Mode.GLOBAL and assignments is None:
        raise ValueError(f"mode {mode} needs cluster assignments")
    if mode == Mode.MAJOR_CLUSTER and groups is None:
        raise ValueError("major-cluster mode needs device groups")
    params = detector_params or {}

    devices = list(features.index)
    X, scaler = standardize(features.to_numpy(dtype=float))
    notes: list[str] = []

    detectors: dict[int, object] = {
        GLOBAL_KEY: _fit_detector(
            detector, X, contamination, _subset_seed(seed, devices), params
        )
    }
    calibration: dict[int, tuple[float, float]] = {
        GLOBAL_KEY: _score_calibration(detectors[GLOBAL_KEY], X)
    }

    if mode != Mode.GLOBAL:
        labels = np.array([assignments[d] for d in devices])
        for cid in sorted(set(labels.tolist())):
            members = [d for d, c in zip(devices, labels) if c == cid]
            n_unique = len(set(members))
            if n_unique < MIN_CLUSTER_DEVICES:
                notes.append(
                    f"cluster {cid} has {n_unique} devices "
                    f"(< {MIN_CLUSTER_DEVICES}); using the global detector"
                )
                continue
            if len(members) == len(devices):
                detectors[cid] = detectors[GLOBAL_KEY]  # same data, same model
                calibration[cid] = calibration[GLOBAL_KEY]
                continue
            rows = np.flatnonzero(labels == cid)
            detectors[cid] = _fit_detector(
                detector, X[rows], contamination, _subset_seed(seed, members), params
            )
            calibration[cid] = _score_calibration(detectors[cid], X[rows])

    group_map: dict[str, int] = {}
    if mode == Mode.MAJOR_CLUSTER:
        per_group: dict[str, dict[int, int]] = {}
        for dev in devices:
            client, country = groups[dev]
            key = group_key(client, country)
            tally = per_group.setdefault(key, {})
            cid = int(assignments[dev])
            tally[cid] = tally.get(cid, 0) + 1
        for key, tally in per_group.items():
            # plurality; ties resolve to the lowest cluster id
            best = min(tally.items(), key=lambda kv: (-kv[1], kv[0]))[0]
            group_map[key] = best
        # group resolution routes whole groups through one detector, so
        # calibrate each used detector against the devices it will
        # actually score, minority-profile members included
        dev_keys = np.array(
            [group_key(*groups[d]) for d in devices], dtype=object
        )
        for cid in sorted(set(group_map.values())):
            if cid not in detectors:
                continue
            served = [k for k, c in group_map.items() if c == cid]
            rows = np.flatnonzero(np.isin(dev_keys, served))
            calibration[cid] = _score_calibration(detectors[cid], X[rows])

    return ModelSet(
        branch=branch,
        mode=mode,
        detector_kind=detector,
        contamination=contamination,
        seed=seed,
        data_fingerprint=_fingerprint(features),
        scaler=scaler,
        detectors=detectors,
        context=context,
        group_map=group_map,
        notes=notes,
        calibration=calibration,
    )


@dataclass
class ScoreResult:
    scores: pd.Series          # device_id -> anomaly score
    flagged: list[str]         # top ceil(q*n) devices, empty if degenerate
    resolved: pd.Series        # device_id -> detector key used
    warnings: list[str] = field(default_factory=list)


def score_devices(
    model_set: ModelSet,
    features: pd.DataFrame,
    *,
    clusters: Mapping[str, int] | None = None,
    groups: Mapping[str, tuple[str, str]] | None = None,
) -> ScoreResult:
    """Score raw feature rows and flag the top contamination fraction.

    ``clusters`` carries per-device cluster ids (per-cluster mode);
    ``groups`` carries (client, country) pairs (major-cluster mode).
    Devices that resolve to no trained detector use the global one.
    """
    devices = list(features.index)
    X, _ = standardize(features.to_numpy(dtype=float), model_set.scaler)
    warnings: list[str] = []

    keys = np.full(len(devices), GLOBAL_KEY, dtype=int)
    if model_set.mode == Mode.PER_CLUSTER:
        if clusters is None:
            raise ValueError("per-cluster scoring needs cluster assignments")
        missing_model: set[int] = set()
        for i, dev in enumerate(devices):
            cid = clusters.get(dev)
            if cid is None:
                warnings.append(f"device {dev} has no cluster; global fallback")
            elif cid not in model_set.detectors:
                missing_model.add(int(cid))
            else:
                keys[i] = int(cid)
        for cid in sorted(missing_model):
            warnings.append(f"cluster {cid} has no trained detector; global fallback")
    elif model_set.mode == Mode.MAJOR_CLUSTER:
        if groups is None:
            raise ValueError("major-cluster scoring needs device groups")
        unseen: set[str] = set()
        for i, dev in enumerate(devices):
            key = group_key(*groups[dev])
            cid = model_set.group_map.get(key)
            if cid is None:
                unseen.add(key)
            elif cid in model_set.detectors:
                keys[i] = cid
        for key in sorted(unseen):
            warnings.append(f"group {key} unseen at train time; global fallback")

    scores = np.empty(len(devices))
    for cid in np.unique(keys):
        rows = np.flatnonzero(keys == cid)
        detector, _ = model_set.detector_for(int(cid))
        loc, scale = model_set.calibration.get(int(cid), (0.0, 1.0))
        scores[rows] = (detector.scores(X[rows]) - loc) / scale

    table = pd.DataFrame({"score": scores}, index=pd.Index(devices, name="device_id"))
    if np.unique(scores).size <= 1 and len(devices) > 1:
        warnings.append("all scores identical; nothing flagged")
        flagged: list[str] = []
    else:
        n_flag = math.ceil(model_set.contamination * len(devices))
        ranked = table.sort_values(
            ["score", "device_id"], ascending=[False, True], kind="stable"
        )
        flagged = list(ranked.index[:n_flag])

    return ScoreResult(
        scores=table["score"],
        flagged=flagged,
        resolved=pd.Series(keys, index=table.index, name="detector_key"),
        warnings=warnings,
    )
