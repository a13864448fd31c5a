"""Fleet-level alarming on top of per-device flags.

Flags are aggregated per (client, country, day) and compared against a
uniform spread of the day's flagged devices: group i expects
E_i = total_flagged * n_i / N.  The alarm statistic is
z = (D - E) / sqrt(E * Ci); a one-sided exceedance of the normal
critical value at the configured confidence raises the alarm (an
unusually low flag count is not an incident).
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

from scipy.special import ndtri

from roamwatch.dialogues import GroundTruthLabel

__all__ = [
    "AlarmRecord",
    "RecallRecord",
    "ALARM_HEADER",
    "z_threshold",
    "z_score",
    "expected_anomalies",
    "raise_alarms",
    "compute_recall",
    "write_alarms",
    "read_alarms",
    "render_report",
    "report_rows",
]

ALARM_HEADER = "client_id,country,day,n_devices,flagged,expected,z,alarm"


@dataclass(frozen=True)
class AlarmRecord:
    client_id: str
    country: str
    day: str
    n_devices: int
    flagged: int          # D
    expected: float       # E
    z: float
    alarm: bool
    confidence: float = 0.99


@dataclass(frozen=True)
class RecallRecord:
    client_id: str
    day: str
    ground_truth: int     # G: anomalous devices per ground truth
    detected: int         # |flagged ∩ ground truth|
    recall: float | None  # None when G = 0


def z_threshold(confidence: float = 0.99) -> float:
    """One-sided critical value matching a two-sided confidence band.

    0.99 gives 2.5758 (commonly quoted as 2.576).
    """
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    return float(ndtri((1.0 + confidence) / 2.0))


def z_score(D: int, E: float, Ci: float = 1.0) -> float:
    """(D - E) / sqrt(E*Ci); with E = 0, +inf when D > 0 else 0."""
    if E < 0:
        raise ValueError("expected count must be >= 0")
    if E == 0:
        return math.inf if D > 0 else 0.0
    return (D - E) / math.sqrt(E * Ci)


def expected_anomalies(
    group_sizes: Mapping[str, int], total_flagged: int, total_devices: int
) -> dict[str, float]:
    """Uniform-spread expectation per group; sums back to total_flagged."""
    if total_devices <= 0:
        raise ValueError("total_devices must be positive")
    return {
        key: total_flagged * size / total_devices
        for key, size in group_sizes.items()
    }


def raise_alarms(
    flagged: Iterable[str],
    population: Mapping[str, tuple[str, str]],
    day: str,
    *,
    confidence: float = 0.99,
    ci: float = 1.0,
) -> list[AlarmRecord]:
    """One record per (client, country) present in the scored population.

    ``population`` maps every device scored on ``day`` to its
    (client_id, country); ``flagged`` must be a subset of its keys.
    """
    flagged = set(flagged)
    unknown = flagged - population.keys()
    if unknown:
        raise ValueError(f"flagged devices missing from the population: {sorted(unknown)[:5]}")

    sizes: dict[tuple[str, str], int] = defaultdict(int)
    hits: dict[tuple[str, str], int] = defaultdict(int)
    for device, group in population.items():
        sizes[group] += 1
        if device in flagged:
            hits[group] += 1

    threshold = z_threshold(confidence)
    total = len(population)
    records = []
    for group in sorted(sizes):
        client, country = group
        D = hits[group]
        E = len(flagged) * sizes[group] / total
        z = z_score(D, E, ci)
        records.append(
            AlarmRecord(
                client_id=client,
                country=country,
                day=day,
                n_devices=sizes[group],
                flagged=D,
                expected=E,
                z=z,
                alarm=z > threshold,
                confidence=confidence,
            )
        )
    return records


def compute_recall(
    flagged: Iterable[str],
    labels: Sequence[GroundTruthLabel],
    day: str,
) -> list[RecallRecord]:
    """Recall of ground-truth anomalous devices per client for one day."""
    flagged = set(flagged)
    truth: dict[str, set[str]] = defaultdict(set)
    clients: set[str] = set()
    for lab in labels:
        if lab.day != day:
            continue
        clients.add(lab.client_id)
        if lab.anomalous:
            truth[lab.client_id].add(lab.device_id)

    records = []
    for client in sorted(clients):
        gt = truth.get(client, set())
        detected = len(gt & flagged)
        records.append(
            RecallRecord(
                client_id=client,
                day=day,
                ground_truth=len(gt),
                detected=detected,
                recall=detected / len(gt) if gt else None,
            )
        )
    return records


def write_alarms(records: Iterable[AlarmRecord], sink: IO) -> None:
    text = sink if isinstance(sink, io.TextIOBase) else io.TextIOWrapper(
        sink, encoding="utf-8", newline=""
    )
    writer = csv.writer(text, lineterminator="\n")
    writer.writerow(ALARM_HEADER.split(","))
    for r in records:
        writer.writerow(
            (
                r.client_id,
                r.country,
                r.day,
                r.n_devices,
                r.flagged,
                repr(r.expected),
                repr(r.z),
                "true" if r.alarm else "false",
            )
        )
    text.flush()
    if text is not sink:
        text.detach()


def read_alarms(source: IO, confidence: float = 0.99) -> list[AlarmRecord]:
    text = source if isinstance(source, io.TextIOBase) else io.TextIOWrapper(
        source, encoding="utf-8", newline=""
    )
    reader = csv.reader(text)
    header = next(reader, None)
    if header != ALARM_HEADER.split(","):
        raise ValueError(f"bad alarm header: {header!r}")
    out = []
    for row in reader:
        out.append(
            AlarmRecord(
                client_id=row[0],
                country=row[1],
                day=row[2],
                n_devices=int(row[3]),
                flagged=int(row[4]),
                expected=float(row[5]),
                z=float(row[6]),
                alarm=row[7] == "true",
                confidence=confidence,
            )
        )
    return out


def report_rows(
    alarms: Sequence[AlarmRecord], recalls: Sequence[RecallRecord]
) -> tuple[list[str], list[str], dict[tuple[str, str], str]]:
    """Day-by-client cell table: recall percentage plus alarm marker.

    Returns (days, clients, cells); cells are keyed by (day, client).
    A ``*`` suffix marks a raised alarm; ``-`` stands for a client with
    no ground-truth anomalies that day.
    """
    days = sorted({r.day for r in recalls} | {a.day for a in alarms})
    clients = sorted({r.client_id for r in recalls} | {a.client_id for a in alarms})
    alarmed = {
        (a.day, a.client_id) for a in alarms if a.alarm
    }  # any country of the client alarming marks the cell
    recall_at = {(r.day, r.client_id): r for r in recalls}

    cells = {}
    for day in days:
        for client in clients:
            rec = recall_at.get((day, client))
            if rec is None or rec.recall is None:
                body = "-"
            else:
                body = f"{100.0 * rec.recall:.1f}%"
            if (day, client) in alarmed:
                body += "*"
            cells[(day, client)] = body
    return days, clients, cells


def render_report(
    alarms: Sequence[AlarmRecord], recalls: Sequence[RecallRecord]
) -> str:
    """Plain-text recall table: one row per day, one column per client."""
    days, clients, cells = report_rows(alarms, recalls)
    widths = {
        c: max(len(c), *(len(cells[(d, c)]) for d in days)) if days else len(c)
        for c in clients
    }
    day_width = max([len("day")] + [len(d) for d in days])
    lines = [
        " | ".join(
            ["day".ljust(day_width)] + [c.rjust(widths[c]) for c in clients]
        )
    ]
    lines.append("-+-".join(["-" * day_width] + ["-" * widths[c] for c in clients]))
    for day in days:
        lines.append(
            " | ".join(
                [day.ljust(day_width)]
                + [cells[(day, c)].rjust(widths[c]) for c in clients]
            )
        )
    legend = "cells: recall of ground-truth anomalies; '*' = alarm raised; '-' = no ground-truth anomalies"
    return "\n".join(lines + [legend]) + "\n"
