"""Unsupervised anomaly detection for IoT roaming signaling traffic.

The package covers the whole desk-scale pipeline: a labeled fleet
simulator, dialogue-log parsing, per-device feature extraction,
behavioral context clustering, four interchangeable unsupervised
detectors, and per-(client, country, day) z-score alarms.
"""

from roamwatch.dialogues import (
    Dialogue,
    DurationClass,
    GroundTruthLabel,
    Procedure,
    Protocol,
    Result,
    classify_duration,
    parse_dialogue_log,
    write_dialogue_log,
)

__version__ = "0.1.0"

__all__ = [
    "Dialogue",
    "DurationClass",
    "GroundTruthLabel",
    "Procedure",
    "Protocol",
    "Result",
    "classify_duration",
    "parse_dialogue_log",
    "write_dialogue_log",
    "__version__",
]
