from .db import AttackSequence, ThreatDatabase, deserialize_db, prevention_threshold, serialize_db
from .detector import (
    Candidate,
    Confirmation,
    FilterOutcome,
    ThreatPolicy,
    confirm_threat,
    filter_block,
    inspect_fork,
    prune,
)
from .matcher import BACKEND, BACKENDS, MatcherState, Verdict, matcher_step

__all__ = [
    "AttackSequence", "ThreatDatabase", "deserialize_db", "serialize_db", "prevention_threshold",
    "Candidate", "Confirmation", "FilterOutcome", "ThreatPolicy", "confirm_threat",
    "filter_block", "inspect_fork", "prune",
    "BACKEND", "BACKENDS", "MatcherState", "Verdict", "matcher_step",
]
