"""Feature extraction: daily signaling matrices and monthly expert vectors.

Two representations are produced from the same dialogue stream:

* branch 1 — a per-(device, day) counter matrix of 13 signaling facets
  over 96 fifteen-minute bins, image-like input for detectors;
* branch 2 — 22 daily metrics per (device, day), summarized over a
  window (nominally one month) into a 95-value expert feature vector.

Both an object path (small data, explicit ``Dialogue`` instances) and a
vectorized pandas bulk path (full logs) are provided; they agree and
are cross-checked in the test suite.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from typing import IO, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from roamwatch.dialogues import (
    CIRCUIT_PROCEDURES,
    Dialogue,
    DurationClass,
    Procedure,
    Protocol,
    Result,
    count_transitions,
)

__all__ = [
    "MATRIX_ROWS",
    "METRIC_NAMES",
    "FEATURE_NAMES",
    "N_FEATURES",
    "BINS_PER_DAY",
    "SECONDS_PER_BIN",
    "Branch",
    "SignalingMatrix",
    "DailyMetrics",
    "FeatureVector",
    "ScalerParams",
    "day_to_epoch",
    "epoch_to_day",
    "day_range",
    "build_matrix",
    "daily_metrics",
    "monthly_features",
    "fill_window",
    "standardize",
    "clustering_features",
    "clustering_matrix",
    "metrics_frame",
    "features_from_metrics_frame",
    "matrices_from_frame",
    "write_matrix_day",
    "read_matrix_day",
    "write_feature_vectors",
    "read_feature_vectors",
]

SECONDS_PER_BIN = 900
BINS_PER_DAY = 96  # 24 h / 15 min

MATRIX_ROWS = (
    "MAP_SAI",
    "MAP_UL",
    "MAP_UL_GPRS",
    "MAP_CL",
    "MAP_PURGE",
    "DIA_SAI",
    "DIA_UL",
    "DIA_CL",
    "SUCCESS",
    "REJECT",
    "DUR_NORMAL",
    "DUR_UNUSUAL",
    "DUR_RARE",
)

#: (protocol, procedure) -> matrix row index
_PROC_ROW = {
    (Protocol.MAP, Procedure.SAI): 0,
    (Protocol.MAP, Procedure.UL): 1,
    (Protocol.MAP, Procedure.UL_GPRS): 2,
    (Protocol.MAP, Procedure.CL): 3,
    (Protocol.MAP, Procedure.PURGE_MS): 4,
    (Protocol.DIAMETER, Procedure.SAI): 5,
    (Protocol.DIAMETER, Procedure.UL): 6,
    (Protocol.DIAMETER, Procedure.CL): 7,
}
_RESULT_ROW = {Result.SUCCESS: 8, Result.REJECT: 9}
_DURATION_ROW = {
    DurationClass.NORMAL: 10,
    DurationClass.UNUSUAL: 11,
    DurationClass.RARE: 12,
}

METRIC_NAMES = (
    "map_dialogues",
    "dia_dialogues",
    "map_sai",
    "map_ul",
    "map_ul_gprs",
    "map_cl",
    "map_purge",
    "dia_sai",
    "dia_ul",
    "dia_cl",
    "map_rejects",
    "dia_rejects",
    "map_reject_ratio",
    "dia_reject_ratio",
    "unusual_duration_count",
    "rare_duration_count",
    "mean_duration_ms",
    "vlr_changes",
    "sgsn_changes",
    "lte_operator_changes",
    "distinct_countries",
    "total_dialogues",
)

_STATS = ("mean", "std", "min", "max")

LONGITUDINAL_NAMES = (
    "active_days_map",
    "active_days_dia",
    "total_month_dialogues",
    "days_with_rejects",
    "max_inactivity_gap_days",
    "first_active_day_index",
    "stationary_day_fraction",
)

FEATURE_NAMES: tuple[str, ...] = tuple(
    f"{metric}_{stat}" for metric in METRIC_NAMES for stat in _STATS
) + LONGITUDINAL_NAMES

N_FEATURES = len(FEATURE_NAMES)
assert N_FEATURES == 95


class Branch:
    """Feature-branch identifiers used across clustering and detection."""

    B1 = "b1"  # daily signaling matrices
    B2 = "b2"  # monthly expert feature vectors

    ALL = (B1, B2)


def day_to_epoch(day: str) -> int:
    """UTC midnight of a ``YYYY-MM-DD`` day as epoch seconds."""
    dt = datetime.strptime(day, "%Y-%m-%d").replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def epoch_to_day(timestamp: int) -> str:
    return datetime.fromtimestamp(timestamp, tz=timezone.utc).strftime("%Y-%m-%d")


def day_range(first_day: str, n_days: int) -> list[str]:
    """``n_days`` consecutive UTC days starting at ``first_day``."""
    start = day_to_epoch(first_day)
    return [epoch_to_day(start + i * 86400) for i in range(n_days)]


@dataclass
class SignalingMatrix:
    """13x96 counter matrix for one (device, day).

    Row order is :data:`MATRIX_ROWS`; column ``j`` covers the UTC time
    window ``[j*900, (j+1)*900)`` seconds into the day.
    """

    device_id: str
    day: str
    values: np.ndarray  # int64, shape (13, 96)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.int64)
        if self.values.shape != (len(MATRIX_ROWS), BINS_PER_DAY):
            raise ValueError(f"matrix must be 13x96, got {self.values.shape}")
        if (self.values < 0).any():
            raise ValueError("matrix entries must be non-negative")

    def group_totals(self) -> tuple[int, int, int]:
        """Total dialogues by row group (procedures, results, durations)."""
        v = self.values
        return (
            int(v[0:8].sum()),
            int(v[8:10].sum()),
            int(v[10:13].sum()),
        )

    def flatten(self) -> np.ndarray:
        """Row-major 1248-value vector for matrix-branch detectors."""
        return self.values.astype(float).reshape(-1)


def build_matrix(
    dialogues: Iterable[Dialogue], device_id: str, day: str
) -> SignalingMatrix:
    """Count one device-day of dialogues into a signaling matrix.

    Every dialogue must belong to ``device_id`` and the UTC day ``day``;
    anything else is a caller error and raises.
    """
    start = day_to_epoch(day)
    values = np.zeros((len(MATRIX_ROWS), BINS_PER_DAY), dtype=np.int64)
    for d in dialogues:
        if d.device_id != device_id:
            raise ValueError(f"dialogue for {d.device_id!r} passed for {device_id!r}")
        offset = d.timestamp - start
        if not 0 <= offset < 86400:
            raise ValueError(f"dialogue at {d.timestamp} is outside day {day}")
        col = offset // SECONDS_PER_BIN
        values[_PROC_ROW[(d.protocol, d.procedure)], col] += 1
        values[_RESULT_ROW[d.result], col] += 1
        values[_DURATION_ROW[d.duration_class], col] += 1
    return SignalingMatrix(device_id=device_id, day=day, values=values)


@dataclass(frozen=True)
class DailyMetrics:
    """The 22 per-(device, day) behavioral metrics, in frozen order."""

    map_dialogues: float = 0.0
    dia_dialogues: float = 0.0
    map_sai: float = 0.0
    map_ul: float = 0.0
    map_ul_gprs: float = 0.0
    map_cl: float = 0.0
    map_purge: float = 0.0
    dia_sai: float = 0.0
    dia_ul: float = 0.0
    dia_cl: float = 0.0
    map_rejects: float = 0.0
    dia_rejects: float = 0.0
    map_reject_ratio: float = 0.0
    dia_reject_ratio: float = 0.0
    unusual_duration_count: float = 0.0
    rare_duration_count: float = 0.0
    mean_duration_ms: float = 0.0
    vlr_changes: float = 0.0
    sgsn_changes: float = 0.0
    lte_operator_changes: float = 0.0
    distinct_countries: float = 0.0
    total_dialogues: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in METRIC_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "DailyMetrics":
        values = list(values)
        if len(values) != len(METRIC_NAMES):
            raise ValueError(f"expected {len(METRIC_NAMES)} values")
        return cls(**{n: float(v) for n, v in zip(METRIC_NAMES, values)})


assert tuple(f.name for f in fields(DailyMetrics)) == METRIC_NAMES


def daily_metrics(dialogues: Iterable[Dialogue]) -> DailyMetrics:
    """Compute the 22 daily metrics for one device-day of dialogues.

    Node-change counters use the day's time-ordered sequence; ties in
    timestamp keep input order (stable sort).
    """
    ds = sorted(dialogues, key=lambda d: d.timestamp)
    if not ds:
        return DailyMetrics()

    counts = {name: 0.0 for name in METRIC_NAMES}
    durations = []
    countries = set()
    vlr_seq: list[str] = []
    sgsn_seq: list[str] = []
    lte_seq: list[str] = []

    for d in ds:
        countries.add(d.country)
        durations.append(d.duration_ms)
        if d.protocol is Protocol.MAP:
            counts["map_dialogues"] += 1
            key = {
                Procedure.SAI: "map_sai",
                Procedure.UL: "map_ul",
                Procedure.UL_GPRS: "map_ul_gprs",
                Procedure.CL: "map_cl",
                Procedure.PURGE_MS: "map_purge",
            }[d.procedure]
            counts[key] += 1
            if d.result is Result.REJECT:
                counts["map_rejects"] += 1
            if d.procedure in CIRCUIT_PROCEDURES:
                vlr_seq.append(d.visited_node)
            else:
                sgsn_seq.append(d.visited_node)
        else:
            counts["dia_dialogues"] += 1
            key = {
                Procedure.SAI: "dia_sai",
                Procedure.UL: "dia_ul",
                Procedure.CL: "dia_cl",
            }[d.procedure]
            counts[key] += 1
            if d.result is Result.REJECT:
                counts["dia_rejects"] += 1
            lte_seq.append(d.visited_operator)
        dc = d.duration_class
        if dc is DurationClass.UNUSUAL:
            counts["unusual_duration_count"] += 1
        elif dc is DurationClass.RARE:
            counts["rare_duration_count"] += 1

    counts["map_reject_ratio"] = (
        counts["map_rejects"] / counts["map_dialogues"]
        if counts["map_dialogues"]
        else 0.0
    )
    counts["dia_reject_ratio"] = (
        counts["dia_rejects"] / counts["dia_dialogues"]
        if counts["dia_dialogues"]
        else 0.0
    )
    counts["mean_duration_ms"] = float(np.mean(durations))
    counts["vlr_changes"] = count_transitions(vlr_seq)
    counts["sgsn_changes"] = count_transitions(sgsn_seq)
    counts["lte_operator_changes"] = count_transitions(lte_seq)
    counts["distinct_countries"] = len(countries)
    counts["total_dialogues"] = counts["map_dialogues"] + counts["dia_dialogues"]
    return DailyMetrics(**counts)


@dataclass
class FeatureVector:
    """95-value monthly behavior summary for one device."""

    device_id: str
    values: np.ndarray  # float, shape (95,)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (N_FEATURES,):
            raise ValueError(f"feature vector must have {N_FEATURES} values")

    def get(self, name: str) -> float:
        return float(self.values[FEATURE_NAMES.index(name)])


def fill_window(
    metrics_by_day: Mapping[str, DailyMetrics], window_days: Sequence[str]
) -> list[DailyMetrics]:
    """Align sparse per-day metrics to a day window, zero-filling gaps."""
    empty = DailyMetrics()
    return [metrics_by_day.get(day, empty) for day in window_days]


def _window_features(block: np.ndarray) -> np.ndarray:
    """95 features from an (n_days, 22) metric block (vector core)."""
    stats = np.empty(len(METRIC_NAMES) * 4)
    stats[0::4] = block.mean(axis=0)
    stats[1::4] = block.std(axis=0)  # population std
    stats[2::4] = block.min(axis=0)
    stats[3::4] = block.max(axis=0)

    n_days = block.shape[0]
    total = block[:, METRIC_NAMES.index("total_dialogues")]
    active = total > 0
    rejects = (
        block[:, METRIC_NAMES.index("map_rejects")]
        + block[:, METRIC_NAMES.index("dia_rejects")]
    )
    moves = (
        block[:, METRIC_NAMES.index("vlr_changes")]
        + block[:, METRIC_NAMES.index("sgsn_changes")]
        + block[:, METRIC_NAMES.index("lte_operator_changes")]
    )

    # longest run of consecutive inactive days
    gap = best = 0
    for a in active:
        gap = 0 if a else gap + 1
        best = max(best, gap)

    first_active = int(np.argmax(active)) if active.any() else n_days

    longitudinal = np.array(
        [
            float((block[:, METRIC_NAMES.index("map_dialogues")] > 0).sum()),
            float((block[:, METRIC_NAMES.index("dia_dialogues")] > 0).sum()),
            float(total.sum()),
            float((rejects > 0).sum()),
            float(best),
            float(first_active),
            float((moves == 0).sum() / n_days),
        ]
    )
    return np.concatenate([stats, longitudinal])


def monthly_features(
    device_id: str, daily: Sequence[DailyMetrics]
) -> FeatureVector:
    """Summarize consecutive daily metrics into the 95-value vector.

    ``daily`` must cover every day of the window in order, with all-zero
    metrics standing in for inactive days (see :func:`fill_window`).
    """
    if not daily:
        raise ValueError("window must contain at least one day")
    block = np.stack([m.as_array() for m in daily])
    return FeatureVector(device_id=device_id, values=_window_features(block))


@dataclass
class ScalerParams:
    """Per-column standardization parameters learned on training data."""

    mean: np.ndarray
    std: np.ndarray  # floored, always > 0

    STD_FLOOR = 1e-12

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be 1-D and the same length")
        if (self.std <= 0).any():
            raise ValueError("std entries must be positive")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerParams":
        return cls(mean=np.array(d["mean"]), std=np.array(d["std"]))


def standardize(
    X: np.ndarray, params: ScalerParams | None = None
) -> tuple[np.ndarray, ScalerParams]:
    """Column-wise standardization; fits params when none are given.

    Constant columns get their std floored so they map to all-zeros
    instead of dividing by zero.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if params is None:
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        std = np.where(std < ScalerParams.STD_FLOOR, ScalerParams.STD_FLOOR, std)
        params = ScalerParams(mean=mean, std=std)
    elif params.mean.shape[0] != X.shape[1]:
        raise ValueError(
            f"scaler was fit on {params.mean.shape[0]} columns, data has {X.shape[1]}"
        )
    return (X - params.mean) / params.std, params


def _b2_from_parts(
    total_mean: float,
    map_mean: float,
    dia_mean: float,
    sai: float,
    ul: float,
    cl: float,
    circuit_moves: float,
    lte_moves: float,
) -> np.ndarray:
    map_share = map_mean / total_mean if total_mean else 0.0
    dia_share = dia_mean / total_mean if total_mean else 0.0
    return np.array(
        [total_mean, map_share, dia_share, sai, ul, cl, circuit_moves, lte_moves]
    )


def clustering_features(
    obj: FeatureVector | DailyMetrics, branch: str
) -> np.ndarray:
    """Reduce a feature object to the low-dimensional clustering view.

    Branch ``b1`` keeps only mean daily MAP and Diameter dialogue
    counts (2 values); branch ``b2`` is an 8-value profile of volume,
    protocol mix, procedure mix, and mobility.
    """
    if branch not in Branch.ALL:
        raise ValueError(f"unknown branch {branch!r}")
    if isinstance(obj, DailyMetrics):
        if branch == Branch.B1:
            return np.array([obj.map_dialogues, obj.dia_dialogues])
        return _b2_from_parts(
            obj.total_dialogues,
            obj.map_dialogues,
            obj.dia_dialogues,
            obj.map_sai + obj.dia_sai,
            obj.map_ul + obj.dia_ul,
            obj.map_cl + obj.dia_cl,
            obj.vlr_changes + obj.sgsn_changes,
            obj.lte_operator_changes,
        )
    if branch == Branch.B1:
        return np.array(
            [obj.get("map_dialogues_mean"), obj.get("dia_dialogues_mean")]
        )
    return _b2_from_parts(
        obj.get("total_dialogues_mean"),
        obj.get("map_dialogues_mean"),
        obj.get("dia_dialogues_mean"),
        obj.get("map_sai_mean") + obj.get("dia_sai_mean"),
        obj.get("map_ul_mean") + obj.get("dia_ul_mean"),
        obj.get("map_cl_mean") + obj.get("dia_cl_mean"),
        obj.get("vlr_changes_mean") + obj.get("sgsn_changes_mean"),
        obj.get("lte_operator_changes_mean"),
    )


def clustering_matrix(features: pd.DataFrame, branch: str) -> np.ndarray:
    """Bulk clustering view of a device-indexed 95-column feature frame."""
    if branch not in Branch.ALL:
        raise ValueError(f"unknown branch {branch!r}")
    col = lambda name: features[name].to_numpy(dtype=float)
    if branch == Branch.B1:
        return np.column_stack(
            [col("map_dialogues_mean"), col("dia_dialogues_mean")]
        )
    total = col("total_dialogues_mean")
    safe = np.where(total == 0.0, 1.0, total)
    map_share = np.where(total == 0.0, 0.0, col("map_dialogues_mean") / safe)
    dia_share = np.where(total == 0.0, 0.0, col("dia_dialogues_mean") / safe)
    return np.column_stack(
        [
            total,
            map_share,
            dia_share,
            col("map_sai_mean") + col("dia_sai_mean"),
            col("map_ul_mean") + col("dia_ul_mean"),
            col("map_cl_mean") + col("dia_cl_mean"),
            col("vlr_changes_mean") + col("sgsn_changes_mean"),
            col("lte_operator_changes_mean"),
        ]
    )


# ---------------------------------------------------------------------------
# Vectorized bulk paths over pandas frames of raw log rows.
# ---------------------------------------------------------------------------

def _prepared(df: pd.DataFrame) -> pd.DataFrame:
    """Stable-sort log rows by (device, time) once for grouped passes."""
    return df.sort_values(["device_id", "timestamp"], kind="stable").reset_index(
        drop=True
    )


def metrics_frame(df: pd.DataFrame) -> pd.DataFrame:
    """Daily metrics for every observed (device, day) in a log frame.

    Returns a frame indexed by (device_id, day) with the 22 metric
    columns; (device, day) pairs with no dialogues do not appear and
    must be zero-filled by the window step.
    """
    if df.empty:
        index = pd.MultiIndex.from_arrays([[], []], names=["device_id", "day"])
        return pd.DataFrame(columns=list(METRIC_NAMES), index=index, dtype=float)

    df = _prepared(df)
    day_idx = (df["timestamp"].to_numpy() // 86400).astype(np.int64)

    dev_codes, devices = pd.factorize(df["device_id"], sort=True)
    day_codes, day_keys = pd.factorize(day_idx, sort=True)
    n_dev, n_day = len(devices), len(day_keys)
    cell = dev_codes * n_day + day_codes
    n_cells = n_dev * n_day

    proto = df["protocol"].to_numpy()
    proc = df["procedure"].to_numpy()
    result = df["result"].to_numpy()
    dur = df["duration_ms"].to_numpy()

    is_map = proto == Protocol.MAP.value
    is_rej = result == Result.REJECT.value

    def bc(mask, weights=None) -> np.ndarray:
        if weights is None:
            return np.bincount(cell[mask], minlength=n_cells).astype(float)
        return np.bincount(cell[mask], weights=weights[mask], minlength=n_cells)

    out: dict[str, np.ndarray] = {}
    out["map_dialogues"] = bc(is_map)
    out["dia_dialogues"] = bc(~is_map)
    for name, mask in (
        ("map_sai", is_map & (proc == "SAI")),
        ("map_ul", is_map & (proc == "UL")),
        ("map_ul_gprs", is_map & (proc == "UL_GPRS")),
        ("map_cl", is_map & (proc == "CL")),
        ("map_purge", is_map & (proc == "PURGE_MS")),
        ("dia_sai", ~is_map & (proc == "SAI")),
        ("dia_ul", ~is_map & (proc == "UL")),
        ("dia_cl", ~is_map & (proc == "CL")),
        ("map_rejects", is_map & is_rej),
        ("dia_rejects", ~is_map & is_rej),
        ("unusual_duration_count", (dur >= 2500) & (dur <= 6000)),
        ("rare_duration_count", dur > 6000),
    ):
        out[name] = bc(mask)

    total = out["map_dialogues"] + out["dia_dialogues"]
    with np.errstate(invalid="ignore", divide="ignore"):
        out["map_reject_ratio"] = np.where(
            out["map_dialogues"] > 0, out["map_rejects"] / out["map_dialogues"], 0.0
        )
        out["dia_reject_ratio"] = np.where(
            out["dia_dialogues"] > 0, out["dia_rejects"] / out["dia_dialogues"], 0.0
        )
        dur_sum = bc(np.ones(len(df), dtype=bool), weights=dur.astype(float))
        out["mean_duration_ms"] = np.where(total > 0, dur_sum / total, 0.0)

    # node-change counters: adjacent distinct values inside one (device,
    # day, domain), rows already time-ordered
    def transitions(mask: np.ndarray, values: np.ndarray) -> np.ndarray:
        grp = cell[mask]
        val = values[mask]
        if len(grp) < 2:
            return np.zeros(n_cells)
        hit = (grp[1:] == grp[:-1]) & (val[1:] != val[:-1])
        return np.bincount(grp[1:][hit], minlength=n_cells).astype(float)

    node = pd.factorize(df["visited_node"])[0]
    oper = pd.factorize(df["visited_operator"])[0]
    circuit = is_map & (proc != "UL_GPRS")
    packet = is_map & (proc == "UL_GPRS")
    out["vlr_changes"] = transitions(circuit, node)
    out["sgsn_changes"] = transitions(packet, node)
    out["lte_operator_changes"] = transitions(~is_map, oper)

    country_codes = pd.factorize(df["country"])[0]
    pairs = np.unique(cell.astype(np.int64) * len(np.unique(country_codes)) + country_codes)
    n_countries_per_cell = np.bincount(
        pairs // len(np.unique(country_codes)), minlength=n_cells
    ).astype(float)
    out["distinct_countries"] = n_countries_per_cell
    out["total_dialogues"] = total

    observed = np.flatnonzero(total > 0)
    day_strings = [epoch_to_day(int(k) * 86400) for k in day_keys]
    index = pd.MultiIndex.from_arrays(
        [
            np.asarray(devices)[observed // n_day],
            np.asarray(day_strings, dtype=object)[observed % n_day],
        ],
        names=["device_id", "day"],
    )
    data = {name: out[name][observed] for name in METRIC_NAMES}
    return pd.DataFrame(data, index=index)


def features_from_metrics_frame(
    frame: pd.DataFrame,
    window_days: Sequence[str],
    devices: Sequence[str],
) -> pd.DataFrame:
    """Monthly feature vectors for ``devices`` over ``window_days``.

    Missing (device, day) rows are treated as inactive all-zero days.
    Returns a frame indexed by device_id with the 95 feature columns.
    """
    devices = list(devices)
    window_days = list(window_days)
    grid = frame.reindex(
        pd.MultiIndex.from_product(
            [devices, window_days], names=["device_id", "day"]
        ),
        fill_value=0.0,
    )
    cube = grid.to_numpy(dtype=float).reshape(
        len(devices), len(window_days), len(METRIC_NAMES)
    )
    rows = np.stack([_window_features(cube[i]) for i in range(len(devices))])
    return pd.DataFrame(rows, index=pd.Index(devices, name="device_id"),
                        columns=list(FEATURE_NAMES))


def matrices_from_frame(df: pd.DataFrame, day: str) -> dict[str, np.ndarray]:
    """Signaling matrices of every device for one UTC day (bulk path)."""
    if df.empty:
        return {}
    df = _prepared(df)
    start = day_to_epoch(day)
    offsets = df["timestamp"].to_numpy() - start
    if (offsets < 0).any() or (offsets >= 86400).any():
        raise ValueError(f"frame contains rows outside day {day}")
    cols = (offsets // SECONDS_PER_BIN).astype(np.int64)

    dev_codes, devices = pd.factorize(df["device_id"], sort=True)
    n_dev = len(devices)

    proto = df["protocol"].to_numpy()
    proc = df["procedure"].to_numpy()
    result = df["result"].to_numpy()
    dur = df["duration_ms"].to_numpy()

    proc_row = np.zeros(len(df), dtype=np.int64)
    for (p, q), row in _PROC_ROW.items():
        proc_row[(proto == p.value) & (proc == q.value)] = row
    result_row = np.where(result == Result.REJECT.value, 9, 8)
    duration_row = np.where(dur > 6000, 12, np.where(dur >= 2500, 11, 10))

    cube = np.zeros((n_dev, len(MATRIX_ROWS), BINS_PER_DAY), dtype=np.int64)
    flat = cube.reshape(-1)
    stride = len(MATRIX_ROWS) * BINS_PER_DAY
    for rows in (proc_row, result_row, duration_row):
        np.add.at(flat, dev_codes * stride + rows * BINS_PER_DAY + cols, 1)
    return {dev: cube[i] for i, dev in enumerate(devices)}


MATRIX_STORE_HEADER = ["device_id", "row_name"] + [
    f"c{j}" for j in range(BINS_PER_DAY)
]


def write_matrix_day(matrices: Mapping[str, np.ndarray], sink: IO) -> None:
    """Persist one day of signaling matrices as CSV rows per matrix row."""
    text = sink if isinstance(sink, io.TextIOBase) else io.TextIOWrapper(
        sink, encoding="utf-8", newline=""
    )
    text.write(",".join(MATRIX_STORE_HEADER) + "\n")
    for dev in sorted(matrices):
        m = np.asarray(matrices[dev], dtype=np.int64)
        for r, row_name in enumerate(MATRIX_ROWS):
            text.write(
                f"{dev},{row_name}," + ",".join(str(int(x)) for x in m[r]) + "\n"
            )
    text.flush()
    if text is not sink:
        text.detach()


def read_matrix_day(source: IO) -> dict[str, np.ndarray]:
    frame = pd.read_csv(source)
    if list(frame.columns) != MATRIX_STORE_HEADER:
        raise ValueError("bad matrix store header")
    out: dict[str, np.ndarray] = {}
    row_index = {name: i for i, name in enumerate(MATRIX_ROWS)}
    cols = frame.columns[2:]
    for dev, sub in frame.groupby("device_id", sort=True):
        m = np.zeros((len(MATRIX_ROWS), BINS_PER_DAY), dtype=np.int64)
        for _, rec in sub.iterrows():
            m[row_index[rec["row_name"]]] = rec[cols].to_numpy(dtype=np.int64)
        out[str(dev)] = m
    return out


def write_feature_vectors(frame: pd.DataFrame, sink: IO) -> None:
    """Persist a device-indexed 95-column feature frame as CSV."""
    if list(frame.columns) != list(FEATURE_NAMES):
        raise ValueError("feature frame columns must match the frozen name list")
    frame.to_csv(sink, index_label="device_id")


def read_feature_vectors(source: IO) -> pd.DataFrame:
    frame = pd.read_csv(source, index_col="device_id")
    if list(frame.columns) != list(FEATURE_NAMES):
        raise ValueError("feature file columns must match the frozen name list")
    return frame
