"""Staged batch pipeline over a run directory.

Each stage reads the artifacts of the previous one from disk and
writes its own, so any stage can be rerun or inspected in isolation
and a failed run leaves everything up to the failure behind:

    logs/<day>.csv            simulate    per-day dialogue logs
    ground_truth.csv          simulate    per-(device, day) labels
    features/daily_metrics.csv featurize  22 metrics per (device, day)
    features/train_features.csv featurize 95-dim vectors, training window
    features/matrices/<day>.csv featurize signaling matrices (branch b1)
    clusters/assignments.csv  cluster     device -> cluster id
    clusters/context.json     cluster     mixture + scaler for assignment
    models/<name>.json        train       persisted ModelSet
    scores/<day>.csv          score       per-device scores + flags
    alarms/alarms.csv         alarm       z-score records per group/day
    alarms/recall.csv         alarm       recall vs ground truth
    report.txt                report      day x client recall table

The whole run is a pure function of the config: rerunning with the
same config and seed reproduces every artifact byte for byte.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
import yaml

from roamwatch.alarms import (
    AlarmRecord,
    RecallRecord,
    compute_recall,
    raise_alarms,
    read_alarms,
    render_report,
    write_alarms,
)
from roamwatch.dialogues import GroundTruthLabel, read_ground_truth
from roamwatch.detectors import DETECTOR_KINDS
from roamwatch.detectors.modes import (
    MODES,
    ClusterContext,
    load_model_set,
    save_model_set,
    train,
    score_devices,
)
from roamwatch.features import (
    METRIC_NAMES,
    Branch,
    clustering_matrix,
    features_from_metrics_frame,
    matrices_from_frame,
    metrics_frame,
    read_feature_vectors,
    read_matrix_day,
    standardize,
    write_feature_vectors,
    write_matrix_day,
)
from roamwatch.fleetsim import (
    AnomalyScenario,
    ClientGroup,
    ClusterProfile,
    FleetSpec,
    ScenarioKind,
    benchmark_scenario,
    default_profiles,
    write_simulation,
)
from roamwatch.gmm import select_clusters

__all__ = [
    "CONFIG_VERSION",
    "ConfigError",
    "StageError",
    "PipelineConfig",
    "RunPaths",
    "load_config",
    "build_fleet",
    "stage_simulate",
    "stage_featurize",
    "stage_cluster",
    "stage_train",
    "stage_score",
    "stage_alarm",
    "stage_report",
    "run_pipeline",
    "STAGES",
]

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unreadable pipeline configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed; partial artifacts remain on disk."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    """Everything a run needs; see ``load_config`` for the file schema."""

    seed: int = 0
    out_dir: str | None = None
    preset: str | None = "benchmark"
    fleet: FleetSpec | None = None
    scenarios: tuple[AnomalyScenario, ...] = ()
    jobs: int = 1
    train_days: int = 30
    branch: str = Branch.B2
    detector: str = "iforest"
    mode: str = "major-cluster"
    contamination: float = 0.05
    confidence: float = 0.99

    def __post_init__(self) -> None:
        if self.branch not in Branch.ALL:
            raise ConfigError(
                f"unknown branch {self.branch!r}; valid: {sorted(Branch.ALL)}"
            )
        if self.detector not in DETECTOR_KINDS:
            raise ConfigError(
                f"unknown detector {self.detector!r}; "
                f"valid: {sorted(DETECTOR_KINDS)}"
            )
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; valid: {list(MODES)}")
        if not 0.0 < self.contamination < 0.5:
            raise ConfigError("contamination must lie in (0, 0.5)")
        if not 0.0 < self.confidence < 1.0:
            raise ConfigError("confidence must lie in (0, 1)")
        if self.train_days < 1:
            raise ConfigError("train_days must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.preset is None and self.fleet is None:
            raise ConfigError("config needs either a preset or an explicit fleet")

    def resolve_fleet(self) -> tuple[FleetSpec, tuple[AnomalyScenario, ...]]:
        if self.fleet is not None:
            return self.fleet, self.scenarios
        return build_fleet(self.preset, self.seed)

    def to_dict(self) -> dict:
        out: dict = {
            "config_version": CONFIG_VERSION,
            "seed": self.seed,
            "simulate": {"jobs": self.jobs},
            "train_days": self.train_days,
            "branch": self.branch,
            "detector": self.detector,
            "mode": self.mode,
            "contamination": self.contamination,
            "confidence": self.confidence,
        }
        if self.out_dir is not None:
            out["out_dir"] = self.out_dir
        if self.fleet is not None:
            out["simulate"]["fleet"] = {
                "start_day": self.fleet.start_day,
                "n_days": self.fleet.n_days,
                "groups": [
                    {
                        "client_id": g.client_id,
                        "country": g.country,
                        "device_count": g.device_count,
                        "profile": g.profile,
                    }
                    for g in self.fleet.groups
                ],
            }
            extra = {
                name: p
                for name, p in self.fleet.profiles.items()
                if name not in default_profiles()
            }
            if extra:
                out["simulate"]["fleet"]["profiles"] = {
                    name: {
                        "mean_dialogues_per_day": p.mean_dialogues_per_day,
                        "map_share": p.map_share,
                        "sai_2g3g": p.sai_2g3g,
                        "sai_lte": p.sai_lte,
                        "ul_2g3g": p.ul_2g3g,
                        "ul_lte": p.ul_lte,
                        "cl_2g3g": p.cl_2g3g,
                        "cl_lte": p.cl_lte,
                        "lte_operator_changes": p.lte_operator_changes,
                        "vlr_changes": p.vlr_changes,
                        "sgsn_changes": p.sgsn_changes,
                        "reject_rate": p.reject_rate,
                    }
                    for name, p in extra.items()
                }
            if self.scenarios:
                out["simulate"]["scenarios"] = [
                    {
                        "kind": ScenarioKind(s.kind).value,
                        "client_id": s.client_id,
                        "country": s.country,
                        "days": list(s.days),
                        "affected_fraction": s.affected_fraction,
                        **(
                            {"intensity": s.intensity}
                            if s.intensity is not None
                            else {}
                        ),
                    }
                    for s in self.scenarios
                ]
        else:
            out["simulate"]["preset"] = self.preset
        return out


def build_fleet(preset: str, seed: int) -> tuple[FleetSpec, tuple[AnomalyScenario, ...]]:
    """Resolve a named preset into a concrete fleet + scenarios."""
    if preset == "benchmark":
        spec, scenarios = benchmark_scenario(seed=seed)
        return spec, tuple(scenarios)
    raise ConfigError(f"unknown preset {preset!r}; valid: ['benchmark']")


def _parse_fleet(node: dict, seed: int) -> FleetSpec:
    profiles = default_profiles()
    for name, fields_ in (node.get("profiles") or {}).items():
        try:
            profiles[name] = ClusterProfile(name=name, **fields_)
        except TypeError as e:
            raise ConfigError(f"profile {name!r}: {e}") from e
    try:
        groups = tuple(
            ClientGroup(
                client_id=str(g["client_id"]),
                country=str(g["country"]),
                device_count=int(g["device_count"]),
                profile=str(g["profile"]),
            )
            for g in node["groups"]
        )
        return FleetSpec(
            groups=groups,
            start_day=str(node["start_day"]),
            n_days=int(node["n_days"]),
            seed=seed,
            profiles=profiles,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad fleet definition: {e}") from e


def _parse_scenarios(items: list) -> tuple[AnomalyScenario, ...]:
    out = []
    for s in items or []:
        try:
            kind = ScenarioKind(str(s["kind"]))
        except ValueError as e:
            raise ConfigError(
                f"unknown scenario kind {s.get('kind')!r}; "
                f"valid: {[k.value for k in ScenarioKind]}"
            ) from e
        try:
            out.append(
                AnomalyScenario(
                    kind=kind,
                    client_id=str(s["client_id"]),
                    country=str(s["country"]),
                    days=tuple(str(d) for d in s["days"]),
                    affected_fraction=float(s["affected_fraction"]),
                    intensity=(
                        float(s["intensity"]) if "intensity" in s else None
                    ),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad scenario definition: {e}") from e
    return tuple(out)


def config_from_dict(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    version = raw.get("config_version")
    if version != CONFIG_VERSION:
        raise ConfigError(
            f"config_version {version!r} unsupported (expected {CONFIG_VERSION})"
        )
    known = {
        "config_version", "seed", "out_dir", "simulate", "train_days",
        "branch", "detector", "mode", "contamination", "confidence",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    sim = raw.get("simulate") or {}
    if not isinstance(sim, dict):
        raise ConfigError("'simulate' must be a mapping")
    seed = int(raw.get("seed", 0))
    fleet = None
    scenarios: tuple[AnomalyScenario, ...] = ()
    preset = sim.get("preset")
    if "fleet" in sim:
        if preset is not None:
            raise ConfigError("give either simulate.preset or simulate.fleet")
        fleet = _parse_fleet(sim["fleet"], seed)
        scenarios = _parse_scenarios(sim.get("scenarios"))
    elif preset is None:
        preset = "benchmark"
    try:
        return PipelineConfig(
            seed=seed,
            out_dir=raw.get("out_dir"),
            preset=None if fleet is not None else str(preset),
            fleet=fleet,
            scenarios=scenarios,
            jobs=int(sim.get("jobs", 1)),
            train_days=int(raw.get("train_days", 30)),
            branch=str(raw.get("branch", Branch.B2)),
            detector=str(raw.get("detector", "iforest")),
            mode=str(raw.get("mode", "major-cluster")),
            contamination=float(raw.get("contamination", 0.05)),
            confidence=float(raw.get("confidence", 0.99)),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def load_config(path: str | Path) -> PipelineConfig:
    """Read and validate a YAML config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from e
    return config_from_dict(raw or {})


@dataclass
class RunPaths:
    """Artifact locations under one run directory."""

    root: Path

    def __post_init__(self) -> None:
        self.root = Path(self.root)

    @property
    def config_file(self) -> Path:
        return self.root / "config.yaml"

    @property
    def logs_dir(self) -> Path:
        return self.root / "logs"

    @property
    def ground_truth(self) -> Path:
        return self.root / "ground_truth.csv"

    @property
    def metrics_file(self) -> Path:
        return self.root / "features" / "daily_metrics.csv"

    @property
    def train_features(self) -> Path:
        return self.root / "features" / "train_features.csv"

    @property
    def matrices_dir(self) -> Path:
        return self.root / "features" / "matrices"

    @property
    def assignments_file(self) -> Path:
        return self.root / "clusters" / "assignments.csv"

    @property
    def context_file(self) -> Path:
        return self.root / "clusters" / "context.json"

    @property
    def models_dir(self) -> Path:
        return self.root / "models"

    def model_file(self, cfg: PipelineConfig) -> Path:
        name = f"model_{cfg.branch}_{cfg.detector}_{cfg.mode}.json"
        return self.models_dir / name

    @property
    def scores_dir(self) -> Path:
        return self.root / "scores"

    @property
    def alarms_file(self) -> Path:
        return self.root / "alarms" / "alarms.csv"

    @property
    def recall_file(self) -> Path:
        return self.root / "alarms" / "recall.csv"

    @property
    def report_file(self) -> Path:
        return self.root / "report.txt"

    def log_days(self) -> list[str]:
        """Simulated days, recovered from the log file names."""
        return sorted(p.stem for p in self.logs_dir.glob("*.csv"))

    def score_days(self) -> list[str]:
        return sorted(p.stem for p in self.scores_dir.glob("*.csv"))


_LOG_DTYPES = {
    "device_id": str,
    "client_id": str,
    "country": str,
    "timestamp": np.int64,
    "protocol": str,
    "procedure": str,
    "result": str,
    "duration_ms": np.int64,
    "visited_operator": str,
    "visited_node": str,
    "home_node": str,
}


def _read_log_day(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, dtype=_LOG_DTYPES)


def _read_labels(paths: RunPaths) -> list[GroundTruthLabel]:
    with open(paths.ground_truth, encoding="utf-8") as fh:
        return read_ground_truth(fh)


def _device_groups(labels: list[GroundTruthLabel]) -> dict[str, tuple[str, str]]:
    return {l.device_id: (l.client_id, l.country) for l in labels}


def _split_days(paths: RunPaths, cfg: PipelineConfig) -> tuple[list[str], list[str]]:
    days = paths.log_days()
    if not days:
        raise FileNotFoundError(f"no day logs under {paths.logs_dir}")
    if len(days) <= cfg.train_days:
        raise ValueError(
            f"need more than train_days={cfg.train_days} simulated days "
            f"to have something to score (got {len(days)})"
        )
    return days[: cfg.train_days], days[cfg.train_days :]


# --------------------------------------------------------------------- stages


def stage_simulate(cfg: PipelineConfig, paths: RunPaths) -> dict:
    """Generate the fleet's dialogue logs and ground-truth labels."""
    spec, scenarios = cfg.resolve_fleet()
    paths.root.mkdir(parents=True, exist_ok=True)
    with open(paths.config_file, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
    return write_simulation(spec, scenarios, paths.root, jobs=cfg.jobs)


def stage_featurize(cfg: PipelineConfig, paths: RunPaths) -> dict:
    """Daily metrics for every day plus training-window feature vectors."""
    train_days, _ = _split_days(paths, cfg)
    labels = _read_labels(paths)
    devices = sorted({l.device_id for l in labels})

    paths.metrics_file.parent.mkdir(parents=True, exist_ok=True)
    per_day = []
    for day in paths.log_days():
        frame = _read_log_day(paths.logs_dir / f"{day}.csv")
        per_day.append(metrics_frame(frame))
        if cfg.branch == Branch.B1:
            paths.matrices_dir.mkdir(parents=True, exist_ok=True)
            mats = matrices_from_frame(frame, day)
            with open(paths.matrices_dir / f"{day}.csv", "w", encoding="utf-8", newline="") as fh:
                write_matrix_day(mats, fh)
    metrics = pd.concat(per_day) if per_day else pd.DataFrame(columns=METRIC_NAMES)
    metrics.sort_index(inplace=True)
    metrics.to_csv(paths.metrics_file)

    feats = features_from_metrics_frame(metrics, train_days, devices)
    with open(paths.train_features, "w", encoding="utf-8", newline="") as fh:
        write_feature_vectors(feats, fh)
    return {
        "days": paths.log_days(),
        "devices": len(devices),
        "metrics_rows": len(metrics),
    }


def stage_cluster(cfg: PipelineConfig, paths: RunPaths) -> dict:
    """Group devices by coarse behavior over the training window."""
    with open(paths.train_features, encoding="utf-8") as fh:
        feats = read_feature_vectors(fh)
    raw = clustering_matrix(feats, cfg.branch)
    scaled, scaler = standardize(raw)
    selection = select_clusters(scaled, seed=cfg.seed)
    context = ClusterContext(
        gmm=selection.model,
        scaler=scaler,
        train_points=scaled,
        branch=cfg.branch,
        selected_k=selection.k,
        all_discarded=selection.all_discarded,
    )
    paths.assignments_file.parent.mkdir(parents=True, exist_ok=True)
    assignments = pd.Series(
        selection.model.labels, index=feats.index, name="cluster_id"
    )
    assignments.to_csv(paths.assignments_file)
    with open(paths.context_file, "w", encoding="utf-8") as fh:
        json.dump(context.to_dict(), fh, indent=1)
        fh.write("\n")
    sizes = assignments.value_counts().sort_index()
    return {
        "k": selection.k,
        "sizes": sizes.to_dict(),
        "all_discarded": selection.all_discarded,
    }


def _read_assignments(paths: RunPaths) -> dict[str, int]:
    frame = pd.read_csv(paths.assignments_file, dtype={"device_id": str})
    if list(frame.columns) != ["device_id", "cluster_id"]:
        raise ValueError("bad cluster assignment header")
    return dict(zip(frame["device_id"], frame["cluster_id"].astype(int)))


def _train_rows_b1(paths: RunPaths, days: list[str]) -> pd.DataFrame:
    """One flattened signaling matrix per (device, day) of the window."""
    rows = []
    index = []
    for day in days:
        with open(paths.matrices_dir / f"{day}.csv", encoding="utf-8") as fh:
            mats = read_matrix_day(fh)
        for dev in sorted(mats):
            rows.append(mats[dev].reshape(-1))
            index.append(dev)
    if not rows:
        raise ValueError("no matrices found for the training window")
    return pd.DataFrame(
        np.array(rows, dtype=float), index=pd.Index(index, name="device_id")
    )


def stage_train(cfg: PipelineConfig, paths: RunPaths) -> dict:
    """Fit the configured detector under the configured mode."""
    labels = _read_labels(paths)
    groups = _device_groups(labels)
    assignments = _read_assignments(paths)
    with open(paths.context_file, encoding="utf-8") as fh:
        context = ClusterContext.from_dict(json.load(fh))

    train_days, _ = _split_days(paths, cfg)
    if cfg.branch == Branch.B1:
        feats = _train_rows_b1(paths, train_days)
    else:
        with open(paths.train_features, encoding="utf-8") as fh:
            feats = read_feature_vectors(fh)

    model_set = train(
        cfg.mode,
        feats,
        detector=cfg.detector,
        contamination=cfg.contamination,
        seed=cfg.seed,
        assignments=assignments,
        groups=groups,
        context=context,
        branch=cfg.branch,
    )
    paths.models_dir.mkdir(parents=True, exist_ok=True)
    save_model_set(model_set, paths.model_file(cfg))
    return {
        "model_file": str(paths.model_file(cfg)),
        "detectors": sorted(model_set.detectors),
        "notes": model_set.notes,
    }


def _score_rows_for_day(
    cfg: PipelineConfig,
    paths: RunPaths,
    metrics: pd.DataFrame,
    devices: list[str],
    all_days: list[str],
    day: str,
) -> pd.DataFrame:
    if cfg.branch == Branch.B1:
        with open(paths.matrices_dir / f"{day}.csv", encoding="utf-8") as fh:
            mats = read_matrix_day(fh)
        devs = sorted(mats)
        data = np.array([mats[d].reshape(-1) for d in devs], dtype=float)
        return pd.DataFrame(data, index=pd.Index(devs, name="device_id"))
    # branch 2: trailing window of the same length as the training window
    idx = all_days.index(day)
    window = all_days[idx - cfg.train_days + 1 : idx + 1]
    return features_from_metrics_frame(metrics, window, devices)


def stage_score(cfg: PipelineConfig, paths: RunPaths) -> dict:
    """Score every post-training day and flag the top contamination cut."""
    model_set = load_model_set(paths.model_file(cfg))
    labels = _read_labels(paths)
    groups = _device_groups(labels)
    devices = sorted(groups)
    assignments = _read_assignments(paths)
    all_days = paths.log_days()
    _, test_days = _split_days(paths, cfg)

    metrics = None
    if cfg.branch != Branch.B1:
        metrics = pd.read_csv(
            paths.metrics_file, index_col=["device_id", "day"],
            dtype={"device_id": str, "day": str},
        )

    paths.scores_dir.mkdir(parents=True, exist_ok=True)
    warnings: list[str] = []
    for day in test_days:
        feats = _score_rows_for_day(cfg, paths, metrics, devices, all_days, day)
        result = score_devices(
            model_set, feats, clusters=assignments, groups=groups
        )
        warnings.extend(f"{day}: {w}" for w in result.warnings)
        flagged = set(result.flagged)
        out = pd.DataFrame(
            {
                "device_id": result.scores.index,
                "score": [repr(float(s)) for s in result.scores.to_numpy()],
                "flagged": [
                    "true" if d in flagged else "false"
                    for d in result.scores.index
                ],
            }
        )
        out.to_csv(paths.scores_dir / f"{day}.csv", index=False, lineterminator="\n")
    return {"days": test_days, "warnings": warnings}


def _read_scores_day(path: Path) -> tuple[list[str], set[str]]:
    frame = pd.read_csv(path, dtype={"device_id": str, "flagged": str})
    devices = frame["device_id"].tolist()
    flagged = set(frame.loc[frame["flagged"] == "true", "device_id"])
    return devices, flagged


def stage_alarm(cfg: PipelineConfig, paths: RunPaths) -> dict:
    """Aggregate per-day flags into z-score alarms and recall records."""
    labels = _read_labels(paths)
    groups = _device_groups(labels)
    alarms: list[AlarmRecord] = []
    recalls: list[RecallRecord] = []
    for day in paths.score_days():
        devices, flagged = _read_scores_day(paths.scores_dir / f"{day}.csv")
        population = {d: groups[d] for d in devices}
        alarms.extend(
            raise_alarms(flagged, population, day, confidence=cfg.confidence)
        )
        recalls.extend(compute_recall(flagged, labels, day))

    paths.alarms_file.parent.mkdir(parents=True, exist_ok=True)
    with open(paths.alarms_file, "w", encoding="utf-8", newline="") as fh:
        write_alarms(alarms, fh)
    with open(paths.recall_file, "w", encoding="utf-8", newline="") as fh:
        fh.write("client_id,day,ground_truth,detected,recall\n")
        for r in recalls:
            recall = "" if r.recall is None else repr(r.recall)
            fh.write(
                f"{r.client_id},{r.day},{r.ground_truth},{r.detected},{recall}\n"
            )
    n_alarms = sum(a.alarm for a in alarms)
    return {"alarm_records": len(alarms), "alarms_raised": n_alarms}


def _read_recalls(paths: RunPaths) -> list[RecallRecord]:
    frame = pd.read_csv(
        paths.recall_file, dtype={"client_id": str, "day": str}
    )
    out = []
    for row in frame.itertuples(index=False):
        recall = None if pd.isna(row.recall) else float(row.recall)
        out.append(
            RecallRecord(
                client_id=row.client_id,
                day=row.day,
                ground_truth=int(row.ground_truth),
                detected=int(row.detected),
                recall=recall,
            )
        )
    return out


def stage_report(cfg: PipelineConfig, paths: RunPaths) -> str:
    """Render the day-by-client recall table with alarm markers."""
    with open(paths.alarms_file, encoding="utf-8") as fh:
        alarms = read_alarms(fh, confidence=cfg.confidence)
    recalls = _read_recalls(paths)
    text = render_report(alarms, recalls)
    paths.report_file.write_text(text, encoding="utf-8")
    return text


STAGES: tuple[tuple[str, Callable], ...] = (
    ("simulate", stage_simulate),
    ("featurize", stage_featurize),
    ("cluster", stage_cluster),
    ("train", stage_train),
    ("score", stage_score),
    ("alarm", stage_alarm),
    ("report", stage_report),
)


def run_pipeline(
    cfg: PipelineConfig,
    out_dir: str | Path,
    *,
    progress: Callable[[str, float], None] | None = None,
) -> dict:
    """Execute every stage in order under ``out_dir``.

    Raises :class:`StageError` naming the failed stage; artifacts
    written before the failure stay on disk.
    """
    paths = RunPaths(Path(out_dir))
    summary: dict = {}
    for name, fn in STAGES:
        started = time.perf_counter()
        try:
            summary[name] = fn(cfg, paths)
        except Exception as e:
            raise StageError(name, e) from e
        if progress is not None:
            progress(name, time.perf_counter() - started)
    return summary
