"""Synthetic labeled fleet simulator.

Generates per-day dialogue logs for multi-client device fleets whose
behavior is calibrated to five canonical device profiles, then injects
four kinds of fleet-level anomaly scenarios with exact per-(device,
day) ground-truth labels.

Determinism contract: the output is a pure function of (spec,
scenarios); every (device, day) draws from its own RNG stream derived
from the spec seed, so generation parallelized over days is
byte-identical to a serial run.

Device-days within a profile are not clones: every device-day draws
per-procedure rate multipliers (normal, mean 1), so daily volumes
wobble beyond bare Poisson noise the way live traffic does.  Window
averages still converge to the profile means, which keeps the
behavioral clusters compact while per-day feature spread stays
realistic.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from roamwatch.dialogues import (
    Dialogue,
    GroundTruthLabel,
    Procedure,
    Protocol,
    Result,
)
from roamwatch.features import day_range, day_to_epoch

__all__ = [
    "ClusterProfile",
    "ClientGroup",
    "FleetSpec",
    "ScenarioKind",
    "AnomalyScenario",
    "DEFAULT_INTENSITY",
    "RATE_JITTER_SIGMA",
    "default_profiles",
    "affected_devices",
    "labels_for",
    "simulate_day_frame",
    "simulate",
    "write_simulation",
    "benchmark_scenario",
    "BASELINE_REJECT_RATE",
]

BASELINE_REJECT_RATE = 0.02

#: lognormal duration model: median 300 ms, sigma 1.0
_DURATION_MU = math.log(300.0)
_DURATION_SIGMA = 1.0

#: residual traffic (profile total minus the six named procedure means)
#: goes to the 2G/3G-only bookkeeping procedures
_RESIDUAL_SPLIT = (("ul_gprs", 0.7), ("purge", 0.3))

#: spread (std) of the per-device-day rate multipliers
RATE_JITTER_SIGMA = 0.18


@dataclass(frozen=True)
class ClusterProfile:
    """Daily behavior means for one device population."""

    name: str
    mean_dialogues_per_day: float
    map_share: float  # fraction of traffic on 2G/3G, per the profile table
    sai_2g3g: float
    sai_lte: float
    ul_2g3g: float
    ul_lte: float
    cl_2g3g: float
    cl_lte: float
    lte_operator_changes: float
    vlr_changes: float
    sgsn_changes: float
    reject_rate: float = BASELINE_REJECT_RATE

    def __post_init__(self) -> None:
        for f in (
            "mean_dialogues_per_day", "sai_2g3g", "sai_lte", "ul_2g3g",
            "ul_lte", "cl_2g3g", "cl_lte", "lte_operator_changes",
            "vlr_changes", "sgsn_changes",
        ):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")
        if not 0.0 <= self.map_share <= 1.0:
            raise ValueError("map_share must lie in [0, 1]")

    def procedure_means(self) -> dict[tuple[str, str], float]:
        """Effective per-(protocol, procedure) daily Poisson means.

        The six named means are used exactly; whatever remains of the
        profile total is routed to UL_GPRS/PURGE_MS (2G/3G only), so a
        Diameter-only profile simply generates its named procedures.
        """
        means = {
            ("MAP", "SAI"): self.sai_2g3g,
            ("MAP", "UL"): self.ul_2g3g,
            ("MAP", "CL"): self.cl_2g3g,
            ("DIAMETER", "SAI"): self.sai_lte,
            ("DIAMETER", "UL"): self.ul_lte,
            ("DIAMETER", "CL"): self.cl_lte,
        }
        residual = self.mean_dialogues_per_day - sum(means.values())
        if residual > 0 and self.map_share > 0:
            means[("MAP", "UL_GPRS")] = residual * _RESIDUAL_SPLIT[0][1]
            means[("MAP", "PURGE_MS")] = residual * _RESIDUAL_SPLIT[1][1]
        else:
            means[("MAP", "UL_GPRS")] = 0.0
            means[("MAP", "PURGE_MS")] = 0.0
        return means


def default_profiles() -> dict[str, ClusterProfile]:
    """The five canonical device profiles (c1..c5)."""
    return {
        "c1": ClusterProfile(
            name="c1", mean_dialogues_per_day=8.7, map_share=1.0,
            sai_2g3g=4.2, sai_lte=0.0, ul_2g3g=1.2, ul_lte=0.0,
            cl_2g3g=1.7, cl_lte=0.0,
            lte_operator_changes=0.0, vlr_changes=2.2, sgsn_changes=1.51,
        ),
        "c2": ClusterProfile(
            name="c2", mean_dialogues_per_day=22.4, map_share=0.0,
            sai_2g3g=0.0, sai_lte=15.0, ul_2g3g=0.0, ul_lte=4.4,
            cl_2g3g=0.0, cl_lte=1.2,
            lte_operator_changes=0.0, vlr_changes=0.0, sgsn_changes=0.0,
        ),
        "c3": ClusterProfile(
            name="c3", mean_dialogues_per_day=98.4, map_share=0.9999,
            sai_2g3g=46.4, sai_lte=0.01, ul_2g3g=18.5, ul_lte=0.001,
            cl_2g3g=21.6, cl_lte=0.001,
            lte_operator_changes=0.0, vlr_changes=36.3, sgsn_changes=20.5,
        ),
        "c4": ClusterProfile(
            name="c4", mean_dialogues_per_day=1300.0, map_share=0.634,
            sai_2g3g=306.0, sai_lte=291.0, ul_2g3g=145.5, ul_lte=244.0,
            cl_2g3g=117.1, cl_lte=102.1,
            lte_operator_changes=25.0, vlr_changes=278.0, sgsn_changes=103.8,
        ),
        "c5": ClusterProfile(
            name="c5", mean_dialogues_per_day=72.0, map_share=0.181,
            sai_2g3g=2.1, sai_lte=43.0, ul_2g3g=1.1, ul_lte=12.7,
            cl_2g3g=1.6, cl_lte=6.5,
            lte_operator_changes=1.6, vlr_changes=1.12, sgsn_changes=1.0,
        ),
    }


@dataclass(frozen=True)
class ClientGroup:
    """One (client, country) fleet slice, homogeneous in profile."""

    client_id: str
    country: str
    device_count: int
    profile: str  # key into the profile map

    def __post_init__(self) -> None:
        if self.device_count <= 0:
            raise ValueError("device_count must be positive")

    def device_ids(self) -> list[str]:
        width = max(4, len(str(self.device_count - 1)))
        return [
            f"{self.client_id}-{self.country}-{self.profile}-{i:0{width}d}"
            for i in range(self.device_count)
        ]


@dataclass(frozen=True)
class FleetSpec:
    groups: tuple[ClientGroup, ...]
    start_day: str  # YYYY-MM-DD
    n_days: int
    seed: int = 0
    profiles: dict = field(default_factory=default_profiles, compare=False)

    def __post_init__(self) -> None:
        if self.n_days <= 0:
            raise ValueError("simulation window must be non-empty")
        missing = {g.profile for g in self.groups} - set(self.profiles)
        if missing:
            raise ValueError(f"unknown profiles: {sorted(missing)}")

    def days(self) -> list[str]:
        return day_range(self.start_day, self.n_days)

    def all_devices(self) -> list[tuple[str, ClientGroup]]:
        return [(dev, g) for g in self.groups for dev in g.device_ids()]


class ScenarioKind(str, Enum):
    REJECT_STORM = "REJECT_STORM"
    PLATFORM_OUTAGE = "PLATFORM_OUTAGE"
    CANCEL_LOCATION_STORM = "CANCEL_LOCATION_STORM"
    AGGRESSIVE_SIGNALING = "AGGRESSIVE_SIGNALING"


DEFAULT_INTENSITY = {
    ScenarioKind.REJECT_STORM: 5.0,
    ScenarioKind.PLATFORM_OUTAGE: 10.0,
    ScenarioKind.CANCEL_LOCATION_STORM: 20.0,
    ScenarioKind.AGGRESSIVE_SIGNALING: 50.0,
}


@dataclass(frozen=True)
class AnomalyScenario:
    kind: ScenarioKind
    client_id: str
    country: str
    days: tuple[str, ...]
    affected_fraction: float
    intensity: float | None = None  # None -> kind default

    def __post_init__(self) -> None:
        if not 0.0 < self.affected_fraction <= 1.0:
            raise ValueError("affected_fraction must lie in (0, 1]")
        if self.intensity is not None and self.intensity < 1.0:
            raise ValueError("intensity must be >= 1")
        if not self.days:
            raise ValueError("scenario needs at least one day")

    @property
    def effective_intensity(self) -> float:
        return (
            self.intensity
            if self.intensity is not None
            else DEFAULT_INTENSITY[ScenarioKind(self.kind)]
        )


def _validate_scenarios(
    spec: FleetSpec, scenarios: Sequence[AnomalyScenario]
) -> None:
    targets = {(g.client_id, g.country) for g in spec.groups}
    window = set(spec.days())
    for s in scenarios:
        if (s.client_id, s.country) not in targets:
            raise ValueError(
                f"scenario targets unknown fleet ({s.client_id}, {s.country})"
            )
        outside = [d for d in s.days if d not in window]
        if outside:
            raise ValueError(
                f"scenario days outside the simulation window: {outside}"
            )


def _device_token(device_id: str) -> int:
    return int.from_bytes(hashlib.sha256(device_id.encode()).digest()[:8], "big")


def _device_day_rng(seed: int, device_id: str, day_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((seed, _device_token(device_id), day_index))
    )


def _day_rate_jitter(rng: np.random.Generator) -> dict[tuple[str, str], float]:
    """Per-(protocol, procedure) rate multipliers for one device-day.

    Normal with mean exactly 1 (clipped at five sigma, so positivity
    holds and the mean is unbiased).  Drawn first from the device-day
    stream, so counts stay reproducible at any generation parallelism.
    """
    draws = np.clip(
        rng.normal(1.0, RATE_JITTER_SIGMA, size=len(_PROCS)),
        1.0 - 5.0 * RATE_JITTER_SIGMA,
        1.0 + 5.0 * RATE_JITTER_SIGMA,
    )
    return dict(zip(_PROCS, draws))


def affected_devices(
    spec: FleetSpec, scenarios: Sequence[AnomalyScenario]
) -> list[set[str]]:
    """The fixed affected-device set of each scenario.

    Sampled once per scenario from a stream keyed by (spec seed,
    scenario index), independent of the per-day streams.
    """
    sets: list[set[str]] = []
    for idx, s in enumerate(scenarios):
        members: list[str] = []
        for g in spec.groups:
            if (g.client_id, g.country) == (s.client_id, s.country):
                members.extend(g.device_ids())
        rng = np.random.default_rng(
            np.random.SeedSequence((spec.seed, 0xA5, idx))
        )
        n_hit = max(1, int(round(s.affected_fraction * len(members))))
        chosen = rng.choice(len(members), size=min(n_hit, len(members)), replace=False)
        sets.append({members[i] for i in sorted(chosen)})
    return sets


def labels_for(
    spec: FleetSpec, scenarios: Sequence[AnomalyScenario]
) -> list[GroundTruthLabel]:
    """Ground truth for every (device, day): exactly the scenario hits."""
    _validate_scenarios(spec, scenarios)
    hit_sets = affected_devices(spec, scenarios)
    marked: dict[tuple[str, str], str] = {}
    for s, hits in zip(scenarios, hit_sets):
        for day in s.days:
            for dev in hits:
                marked[(dev, day)] = ScenarioKind(s.kind).value

    labels = []
    for g in spec.groups:
        for dev in g.device_ids():
            for day in spec.days():
                scenario = marked.get((dev, day), "")
                labels.append(
                    GroundTruthLabel(
                        device_id=dev,
                        client_id=g.client_id,
                        country=g.country,
                        day=day,
                        anomalous=bool(scenario),
                        scenario=scenario,
                    )
                )
    return labels


_PROCS = (
    ("MAP", "SAI"),
    ("MAP", "UL"),
    ("MAP", "UL_GPRS"),
    ("MAP", "CL"),
    ("MAP", "PURGE_MS"),
    ("DIAMETER", "SAI"),
    ("DIAMETER", "UL"),
    ("DIAMETER", "CL"),
)

# precomputed node-name pools; index j yields the j-th identifier
_MAX_NODES = 4096
_VLR_POOL = np.array([f"v{j}" for j in range(_MAX_NODES)])
_SGSN_POOL = np.array([f"s{j}" for j in range(_MAX_NODES)])
_OPER_POOL = np.array([f"o{j}" for j in range(_MAX_NODES)])


def _segment_indices(n: int, k: int) -> np.ndarray:
    """n items split into k+1 contiguous runs -> per-item segment index."""
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    return (np.arange(n, dtype=np.int64) * (k + 1)) // n


def _device_day_rows(
    device_id: str,
    group: ClientGroup,
    profile: ClusterProfile,
    means: dict[tuple[str, str], float],
    day_start: int,
    rng: np.random.Generator,
    scenario: AnomalyScenario | None,
) -> dict[str, np.ndarray] | None:
    """All dialogue rows of one device on one day, unsorted columns."""
    day_end = day_start + 86400

    protos: list[np.ndarray] = []
    procs: list[np.ndarray] = []
    stamps: list[np.ndarray] = []
    forced_reject: list[np.ndarray] = []

    kind = ScenarioKind(scenario.kind) if scenario else None
    intensity = scenario.effective_intensity if scenario else 1.0

    def emit(proto: str, proc: str, count: int, ts: np.ndarray, rejected: bool):
        if count == 0:
            return
        protos.append(np.repeat(proto, count))
        procs.append(np.repeat(proc, count))
        stamps.append(ts)
        forced_reject.append(np.full(count, rejected))

    if kind is ScenarioKind.PLATFORM_OUTAGE:
        # starved traffic for 22 hours, reconnect burst in the last 2
        cutoff = day_start + 22 * 3600
        for proto, proc in _PROCS:
            n = int(rng.poisson(means[(proto, proc)] * (22.0 / 24.0) / intensity))
            emit(proto, proc, n, rng.integers(day_start, cutoff, n), False)
        for proto, proc in _PROCS:
            if proc not in ("SAI", "UL"):
                continue
            n = int(rng.poisson(means[(proto, proc)] * intensity))
            emit(proto, proc, n, rng.integers(cutoff, day_end, n), False)
    else:
        for proto, proc in _PROCS:
            n = int(rng.poisson(means[(proto, proc)]))
            emit(proto, proc, n, rng.integers(day_start, day_end, n), False)

        if kind is ScenarioKind.REJECT_STORM:
            for proto in ("MAP", "DIAMETER"):
                n = int(rng.poisson(means[(proto, "SAI")] * (intensity - 1.0)))
                emit(proto, "SAI", n, rng.integers(day_start, day_end, n), True)
        elif kind is ScenarioKind.CANCEL_LOCATION_STORM:
            for proto in ("MAP", "DIAMETER"):
                n = int(rng.poisson(means[(proto, "CL")] * (intensity - 1.0)))
                emit(proto, "CL", n, rng.integers(day_start, day_end, n), True)
        elif kind is ScenarioKind.AGGRESSIVE_SIGNALING:
            # the extra queries land inside a handful of 15-minute windows
            window_starts = day_start + 900 * rng.choice(96, size=4, replace=False)
            for proto in ("MAP", "DIAMETER"):
                n = int(rng.poisson(means[(proto, "SAI")] * (intensity - 1.0)))
                if n == 0:
                    continue
                win = rng.choice(window_starts, size=n)
                emit(proto, "SAI", n, win + rng.integers(0, 900, n), False)

    if not protos:
        return None

    proto_col = np.concatenate(protos)
    proc_col = np.concatenate(procs)
    ts_col = np.concatenate(stamps).astype(np.int64)
    forced = np.concatenate(forced_reject)
    n_total = len(proto_col)

    order = np.argsort(ts_col, kind="stable")
    proto_col, proc_col, ts_col, forced = (
        proto_col[order], proc_col[order], ts_col[order], forced[order],
    )

    rejected = rng.random(n_total) < profile.reject_rate
    if kind is ScenarioKind.REJECT_STORM:
        rejected[:] = True
    else:
        rejected |= forced

    durations = np.rint(
        rng.lognormal(_DURATION_MU, _DURATION_SIGMA, n_total)
    ).astype(np.int64)

    # realized mobility: cycle node ids over contiguous time segments
    visited_node = np.empty(n_total, dtype=object)
    is_map = proto_col == "MAP"
    circuit = is_map & (proc_col != "UL_GPRS")
    packet = is_map & ~circuit
    k_vlr = int(rng.poisson(profile.vlr_changes))
    k_sgsn = int(rng.poisson(profile.sgsn_changes))
    k_oper = int(rng.poisson(profile.lte_operator_changes))
    visited_node[circuit] = _VLR_POOL[
        _segment_indices(int(circuit.sum()), min(k_vlr, _MAX_NODES - 1))
    ]
    visited_node[packet] = _SGSN_POOL[
        _segment_indices(int(packet.sum()), min(k_sgsn, _MAX_NODES - 1))
    ]
    visited_operator = np.empty(n_total, dtype=object)
    visited_operator[is_map] = "m0"
    visited_operator[~is_map] = _OPER_POOL[
        _segment_indices(int((~is_map).sum()), min(k_oper, _MAX_NODES - 1))
    ]
    visited_node[~is_map] = "mme0"

    return {
        "device_id": np.repeat(device_id, n_total),
        "client_id": np.repeat(group.client_id, n_total),
        "country": np.repeat(group.country, n_total),
        "timestamp": ts_col,
        "protocol": proto_col,
        "procedure": proc_col,
        "result": np.where(rejected, "REJECT", "SUCCESS"),
        "duration_ms": durations,
        "visited_operator": visited_operator,
        "visited_node": visited_node,
        "home_node": np.repeat(f"h-{group.client_id}", n_total),
    }


def simulate_day_frame(
    spec: FleetSpec,
    scenarios: Sequence[AnomalyScenario],
    day: str,
    *,
    _hit_sets: list[set[str]] | None = None,
) -> pd.DataFrame:
    """One UTC day of dialogues for the whole fleet, ordered by
    (device_id, timestamp)."""
    _validate_scenarios(spec, scenarios)
    days = spec.days()
    if day not in days:
        raise ValueError(f"day {day} outside the simulation window")
    day_index = days.index(day)
    day_start = day_to_epoch(day)
    hit_sets = _hit_sets if _hit_sets is not None else affected_devices(spec, scenarios)

    active: dict[str, AnomalyScenario] = {}
    for s, hits in zip(scenarios, hit_sets):
        if day in s.days:
            for dev in hits:
                active[dev] = s

    pieces = []
    for group in spec.groups:
        profile = spec.profiles[group.profile]
        base_means = profile.procedure_means()
        for dev in group.device_ids():
            rng = _device_day_rng(spec.seed, dev, day_index)
            jitter = _day_rate_jitter(rng)
            means = {k: m * jitter[k] for k, m in base_means.items()}
            rows = _device_day_rows(
                dev, group, profile, means, day_start, rng, active.get(dev)
            )
            if rows is not None:
                pieces.append(rows)

    if not pieces:
        from roamwatch.dialogues import LOG_FIELDS

        return pd.DataFrame({name: [] for name in LOG_FIELDS})
    frame = pd.DataFrame(
        {
            name: np.concatenate([p[name] for p in pieces])
            for name in pieces[0]
        }
    )
    # device streams are already time-ordered; stable sort groups devices
    return frame.sort_values(
        ["device_id", "timestamp"], kind="stable", ignore_index=True
    )


def _frame_to_dialogues(frame: pd.DataFrame) -> list[Dialogue]:
    return [
        Dialogue(
            device_id=r.device_id,
            client_id=r.client_id,
            country=r.country,
            timestamp=int(r.timestamp),
            protocol=Protocol(r.protocol),
            procedure=Procedure(r.procedure),
            result=Result(r.result),
            duration_ms=int(r.duration_ms),
            visited_operator=r.visited_operator,
            visited_node=r.visited_node,
            home_node=r.home_node,
        )
        for r in frame.itertuples()
    ]


def simulate(
    spec: FleetSpec, scenarios: Sequence[AnomalyScenario] = ()
) -> tuple[list[Dialogue], list[GroundTruthLabel]]:
    """Materialize the full simulation (small fleets and tests)."""
    _validate_scenarios(spec, scenarios)
    hit_sets = affected_devices(spec, scenarios)
    dialogues: list[Dialogue] = []
    for day in spec.days():
        frame = simulate_day_frame(spec, scenarios, day, _hit_sets=hit_sets)
        dialogues.extend(_frame_to_dialogues(frame))
    return dialogues, labels_for(spec, scenarios)


def _write_day(args) -> str:
    spec, scenarios, day, out_dir = args
    frame = simulate_day_frame(spec, scenarios, day)
    path = Path(out_dir) / f"{day}.csv"
    frame.to_csv(path, index=False, lineterminator="\n")
    return str(path)


def write_simulation(
    spec: FleetSpec,
    scenarios: Sequence[AnomalyScenario],
    out_dir: str | Path,
    *,
    jobs: int = 1,
) -> dict:
    """Write per-day log CSVs plus the ground-truth file.

    Output bytes are identical for any ``jobs`` because every (device,
    day) stream is independently seeded.
    """
    _validate_scenarios(spec, scenarios)
    out = Path(out_dir)
    logs = out / "logs"
    logs.mkdir(parents=True, exist_ok=True)

    days = spec.days()
    tasks = [(spec, scenarios, day, logs) for day in days]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            paths = list(pool.map(_write_day, tasks))
    else:
        paths = [_write_day(t) for t in tasks]

    labels = labels_for(spec, scenarios)
    truth_path = out / "ground_truth.csv"
    with open(truth_path, "w", encoding="utf-8", newline="") as fh:
        from roamwatch.dialogues import write_ground_truth

        write_ground_truth(labels, fh)
    return {
        "log_files": paths,
        "ground_truth": str(truth_path),
        "days": days,
        "devices": sum(g.device_count for g in spec.groups),
    }


def benchmark_scenario(seed: int = 0) -> tuple[FleetSpec, list[AnomalyScenario]]:
    """The canonical acceptance fixture.

    Five scenario clients (one incident each) plus one multi-country
    control client that stays clean; ~5000 devices across the five
    profiles; a 30-day training month (September 2022) followed by a
    week of test days in which every incident falls.
    """
    groups = (
        # scenario clients
        ClientGroup("client1", "ES", 1400, "c1"),
        ClientGroup("client2", "AR", 830, "c2"),
        ClientGroup("client3", "IN", 900, "c3"),
        ClientGroup("client4", "SV", 30, "c4"),
        ClientGroup("client5", "US", 32, "c5"),
        # control client, spread over every profile in five countries
        ClientGroup("control", "FR", 700, "c1"),
        ClientGroup("control", "IT", 514, "c2"),
        ClientGroup("control", "PL", 560, "c3"),
        ClientGroup("control", "MA", 18, "c4"),
        ClientGroup("control", "CL", 16, "c5"),
    )
    spec = FleetSpec(groups=groups, start_day="2022-09-01", n_days=37, seed=seed)
    scenarios = [
        AnomalyScenario(
            ScenarioKind.REJECT_STORM, "client1", "ES",
            ("2022-10-06", "2022-10-07"), affected_fraction=0.9,
        ),
        AnomalyScenario(
            ScenarioKind.PLATFORM_OUTAGE, "client2", "AR",
            ("2022-10-05",), affected_fraction=0.9,
        ),
        AnomalyScenario(
            ScenarioKind.CANCEL_LOCATION_STORM, "client3", "IN",
            ("2022-10-04",), affected_fraction=0.95,
        ),
        AnomalyScenario(
            ScenarioKind.AGGRESSIVE_SIGNALING, "client4", "SV",
            ("2022-10-03",), affected_fraction=0.9,
        ),
        AnomalyScenario(
            ScenarioKind.CANCEL_LOCATION_STORM, "client5", "US",
            ("2022-10-02",), affected_fraction=0.9,
        ),
    ]
    return spec, scenarios
