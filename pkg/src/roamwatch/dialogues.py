"""Signaling dialogue data model and the on-disk log format.

A dialogue is one request/response exchange between a device's visited
network and its home network, observed at the roaming interconnection
point.  Everything downstream (simulation, features, detectors, alarms)
speaks in terms of the types defined here.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import IO, Iterable, Iterator

import numpy as np

__all__ = [
    "Protocol",
    "Procedure",
    "Result",
    "DurationClass",
    "Dialogue",
    "GroundTruthLabel",
    "ParseSummary",
    "LogFormatError",
    "LOG_HEADER",
    "LABEL_HEADER",
    "CIRCUIT_PROCEDURES",
    "PACKET_PROCEDURES",
    "classify_duration",
    "parse_dialogue_log",
    "write_dialogue_log",
    "read_ground_truth",
    "write_ground_truth",
    "count_transitions",
    "summarize_dataset",
    "DatasetSummary",
]


class Protocol(str, Enum):
    MAP = "MAP"          # 2G/3G signaling
    DIAMETER = "DIAMETER"  # 4G LTE signaling


class Procedure(str, Enum):
    SAI = "SAI"            # authentication vector request
    UL = "UL"              # update location (circuit domain)
    UL_GPRS = "UL_GPRS"    # update location (packet domain, 2G/3G only)
    CL = "CL"              # cancel location
    PURGE_MS = "PURGE_MS"  # purge mobile device (2G/3G only)


class Result(str, Enum):
    SUCCESS = "SUCCESS"
    REJECT = "REJECT"


class DurationClass(str, Enum):
    NORMAL = "NORMAL"
    UNUSUAL = "UNUSUAL"
    RARE = "RARE"


# Procedures valid on the LTE (Diameter) side; the remaining two exist
# only in the 2G/3G MAP world.
DIAMETER_PROCEDURES = frozenset({Procedure.SAI, Procedure.UL, Procedure.CL})

# Node-domain split used for mobility counting: circuit-domain dialogues
# carry a VLR identifier in visited_node, packet-domain dialogues an SGSN.
CIRCUIT_PROCEDURES = frozenset(
    {Procedure.SAI, Procedure.UL, Procedure.CL, Procedure.PURGE_MS}
)
PACKET_PROCEDURES = frozenset({Procedure.UL_GPRS})

#: threshold (ms) above which a dialogue duration is considered unusual
UNUSUAL_DURATION_MS = 2500
#: threshold (ms) above which a dialogue duration is considered rare
RARE_DURATION_MS = 6000


def classify_duration(duration_ms: int) -> DurationClass:
    """Bucket a dialogue duration.

    < 2500 ms is NORMAL, 2500..6000 ms inclusive is UNUSUAL, anything
    beyond 6000 ms is RARE.
    """
    if duration_ms < 0:
        raise ValueError(f"duration_ms must be >= 0, got {duration_ms}")
    if duration_ms < UNUSUAL_DURATION_MS:
        return DurationClass.NORMAL
    if duration_ms <= RARE_DURATION_MS:
        return DurationClass.UNUSUAL
    return DurationClass.RARE


@dataclass(frozen=True, slots=True)
class Dialogue:
    """One signaling request/response exchange.

    ``device_id`` stands for an already-pseudonymized subscriber
    identifier.  ``timestamp`` is UTC seconds since the epoch; days are
    UTC calendar days throughout.
    """

    device_id: str
    client_id: str
    country: str
    timestamp: int
    protocol: Protocol
    procedure: Procedure
    result: Result
    duration_ms: int
    visited_operator: str
    visited_node: str
    home_node: str

    def __post_init__(self) -> None:
        if not self.device_id:
            raise ValueError("device_id must be non-empty")
        if not self.client_id:
            raise ValueError("client_id must be non-empty")
        if not self.country:
            raise ValueError("country must be non-empty")
        if self.duration_ms < 0:
            raise ValueError("duration_ms must be >= 0")
        if (
            self.protocol is Protocol.DIAMETER
            and self.procedure not in DIAMETER_PROCEDURES
        ):
            raise ValueError(
                f"procedure {self.procedure.value} is 2G/3G-only and cannot "
                "appear on a DIAMETER dialogue"
            )

    @property
    def day(self) -> str:
        """UTC calendar day of the exchange, as ``YYYY-MM-DD``."""
        return datetime.fromtimestamp(self.timestamp, tz=timezone.utc).strftime(
            "%Y-%m-%d"
        )

    @property
    def duration_class(self) -> DurationClass:
        return classify_duration(self.duration_ms)


@dataclass(frozen=True, slots=True)
class GroundTruthLabel:
    """Per (device, day) truth record emitted by the fleet simulator."""

    device_id: str
    client_id: str
    country: str
    day: str  # YYYY-MM-DD
    anomalous: bool
    scenario: str  # scenario kind token, empty when not anomalous


LOG_HEADER = (
    "device_id,client_id,country,timestamp,protocol,procedure,result,"
    "duration_ms,visited_operator,visited_node,home_node"
)
LOG_FIELDS = LOG_HEADER.split(",")

LABEL_HEADER = "device_id,client_id,country,day,anomalous,scenario"


class LogFormatError(ValueError):
    """Raised for a malformed dialogue-log line; carries the line number."""

    def __init__(self, line_number: int, message: str) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass
class ParseSummary:
    """Record-level error accounting for a skip-and-count parse."""

    total_lines: int = 0
    parsed: int = 0
    errors: list[LogFormatError] = field(default_factory=list)

    @property
    def error_count(self) -> int:
        return len(self.errors)


def _as_text(source: IO | io.IOBase) -> IO[str]:
    first = getattr(source, "read", None)
    if first is None:
        raise TypeError("source must be a readable file object")
    if isinstance(source, io.TextIOBase):
        return source
    # bytes stream: decode as UTF-8 on the fly
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def _dialogue_from_row(row: list[str], line_number: int) -> Dialogue:
    if len(row) != len(LOG_FIELDS):
        raise LogFormatError(
            line_number, f"expected {len(LOG_FIELDS)} fields, got {len(row)}"
        )
    try:
        return Dialogue(
            device_id=row[0],
            client_id=row[1],
            country=row[2],
            timestamp=int(row[3]),
            protocol=Protocol(row[4]),
            procedure=Procedure(row[5]),
            result=Result(row[6]),
            duration_ms=int(row[7]),
            visited_operator=row[8],
            visited_node=row[9],
            home_node=row[10],
        )
    except LogFormatError:
        raise
    except (ValueError, KeyError) as exc:
        raise LogFormatError(line_number, str(exc)) from exc


def parse_dialogue_log(
    source: IO,
    *,
    on_error: str = "skip",
    summary: ParseSummary | None = None,
) -> Iterator[Dialogue]:
    """Lazily parse a dialogue log.

    ``source`` may be a text or binary file object holding the CSV format
    written by :func:`write_dialogue_log`.  Dialogues are yielded in file
    order; parsing is single-pass and keeps no per-file state, so peak
    memory does not grow with file length.

    ``on_error``: ``"skip"`` (default) records malformed lines in
    ``summary`` and keeps going; ``"raise"`` fails fast with a
    :class:`LogFormatError` carrying the offending line number.
    """
    if on_error not in ("skip", "raise"):
        raise ValueError("on_error must be 'skip' or 'raise'")
    text = _as_text(source)
    reader = csv.reader(text)
    header = next(reader, None)
    if header is None:
        return  # empty file -> empty sequence
    if header != LOG_FIELDS:
        raise LogFormatError(1, f"bad header: {','.join(header)!r}")
    for line_number, row in enumerate(reader, start=2):
        if summary is not None:
            summary.total_lines += 1
        try:
            dialogue = _dialogue_from_row(row, line_number)
        except LogFormatError as exc:
            if on_error == "raise":
                raise
            if summary is not None:
                summary.errors.append(exc)
            continue
        if summary is not None:
            summary.parsed += 1
        yield dialogue


def write_dialogue_log(dialogues: Iterable[Dialogue], sink: IO) -> None:
    """Write dialogues as CSV; output re-parses to an identical sequence."""
    text = sink if isinstance(sink, io.TextIOBase) else io.TextIOWrapper(
        sink, encoding="utf-8", newline=""
    )
    writer = csv.writer(text, lineterminator="\n")
    writer.writerow(LOG_FIELDS)
    for d in dialogues:
        writer.writerow(
            (
                d.device_id,
                d.client_id,
                d.country,
                d.timestamp,
                d.protocol.value,
                d.procedure.value,
                d.result.value,
                d.duration_ms,
                d.visited_operator,
                d.visited_node,
                d.home_node,
            )
        )
    text.flush()
    if text is not sink:
        text.detach()


def write_ground_truth(labels: Iterable[GroundTruthLabel], sink: IO) -> None:
    text = sink if isinstance(sink, io.TextIOBase) else io.TextIOWrapper(
        sink, encoding="utf-8", newline=""
    )
    writer = csv.writer(text, lineterminator="\n")
    writer.writerow(LABEL_HEADER.split(","))
    for lab in labels:
        writer.writerow(
            (
                lab.device_id,
                lab.client_id,
                lab.country,
                lab.day,
                "true" if lab.anomalous else "false",
                lab.scenario,
            )
        )
    text.flush()
    if text is not sink:
        text.detach()


def read_ground_truth(source: IO) -> list[GroundTruthLabel]:
    text = _as_text(source)
    reader = csv.reader(text)
    header = next(reader, None)
    if header is None:
        return []
    if header != LABEL_HEADER.split(","):
        raise LogFormatError(1, f"bad label header: {','.join(header)!r}")
    out = []
    for line_number, row in enumerate(reader, start=2):
        if len(row) != 6:
            raise LogFormatError(line_number, f"expected 6 fields, got {len(row)}")
        if row[4] not in ("true", "false"):
            raise LogFormatError(line_number, f"bad boolean {row[4]!r}")
        out.append(
            GroundTruthLabel(
                device_id=row[0],
                client_id=row[1],
                country=row[2],
                day=row[3],
                anomalous=row[4] == "true",
                scenario=row[5],
            )
        )
    return out


def count_transitions(values: Iterable[str]) -> int:
    """Number of adjacent distinct-value transitions in a sequence."""
    changes = 0
    prev = None
    for v in values:
        if prev is not None and v != prev:
            changes += 1
        prev = v
    return changes


@dataclass
class DatasetSummary:
    """Per-device statistics backing empirical-CDF views of a dataset.

    ``device_daily_means`` holds, per device, the mean daily dialogue
    count for each (protocol, procedure) pair plus the overall total;
    ``activity_shares`` the MAP/Diameter split of each device's traffic;
    ``mobility_means`` mean daily node-change counts.  Means divide by
    the number of distinct days on which the device appears.
    """

    device_daily_means: "object"  # pandas.DataFrame
    activity_shares: "object"
    mobility_means: "object"

    def cdf(self, table: str, column: str) -> tuple[np.ndarray, np.ndarray]:
        """Empirical CDF of one column: (sorted values, cumulative fraction)."""
        frame = getattr(self, table)
        vals = np.sort(np.asarray(frame[column], dtype=float))
        frac = np.arange(1, len(vals) + 1) / len(vals)
        return vals, frac


def summarize_dataset(dialogues: Iterable[Dialogue]) -> DatasetSummary:
    """Aggregate a dialogue stream into per-device distribution tables."""
    import pandas as pd

    counts: dict[tuple[str, str, str], int] = defaultdict(int)  # (dev, day, col)
    days_seen: dict[str, set[str]] = defaultdict(set)
    # per (device, day): time-ordered node sequences per mobility dimension
    sequences: dict[tuple[str, str, str], list[tuple[int, str]]] = defaultdict(list)

    for d in dialogues:
        day = d.day
        days_seen[d.device_id].add(day)
        col = f"{d.protocol.value}_{d.procedure.value}"
        counts[(d.device_id, day, col)] += 1
        counts[(d.device_id, day, "TOTAL")] += 1
        counts[(d.device_id, day, d.protocol.value)] += 1
        if d.protocol is Protocol.MAP:
            dim = "vlr" if d.procedure in CIRCUIT_PROCEDURES else "sgsn"
            sequences[(d.device_id, day, dim)].append((d.timestamp, d.visited_node))
        else:
            sequences[(d.device_id, day, "lte_operator")].append(
                (d.timestamp, d.visited_operator)
            )

    all_cols = sorted(
        {f"{p.value}_{q.value}" for p in Protocol for q in Procedure
         if not (p is Protocol.DIAMETER and q not in DIAMETER_PROCEDURES)}
    )
    devices = sorted(days_seen)
    per_day = {c: [] for c in all_cols + ["TOTAL"]}
    shares = {"map_share": [], "diameter_share": []}
    mobility = {"vlr_changes": [], "sgsn_changes": [], "lte_operator_changes": []}

    change_totals: dict[tuple[str, str], int] = defaultdict(int)
    for (dev, day, dim), seq in sequences.items():
        seq.sort()
        change_totals[(dev, dim)] += count_transitions(node for _, node in seq)

    for dev in devices:
        n_days = len(days_seen[dev])
        total = sum(counts.get((dev, day, "TOTAL"), 0) for day in days_seen[dev])
        for col in all_cols + ["TOTAL"]:
            c = sum(counts.get((dev, day, col), 0) for day in days_seen[dev])
            per_day[col].append(c / n_days)
        map_count = sum(counts.get((dev, day, "MAP"), 0) for day in days_seen[dev])
        shares["map_share"].append(map_count / total if total else 0.0)
        shares["diameter_share"].append(
            (total - map_count) / total if total else 0.0
        )
        for dim, key in (
            ("vlr", "vlr_changes"),
            ("sgsn", "sgsn_changes"),
            ("lte_operator", "lte_operator_changes"),
        ):
            mobility[key].append(change_totals.get((dev, dim), 0) / n_days)

    index = pd.Index(devices, name="device_id")
    return DatasetSummary(
        device_daily_means=pd.DataFrame(per_day, index=index),
        activity_shares=pd.DataFrame(shares, index=index),
        mobility_means=pd.DataFrame(mobility, index=index),
    )
