"""Deterministic discrete-event harness: scenarios, engine, audits, metrics."""

from .scenario import (
    ConsortiumSpec,
    FaultSpec,
    NetworkSpec,
    PartySpec,
    Scenario,
    ScenarioError,
    ScheduleAction,
    load_scenario,
    parse_scenario,
)
from .audits import (
    ObservationEntry,
    ObservationLog,
    Violation,
    audit_knowledge_partition,
)
from .metrics import MetricsReport
from .engine import SimWorld, run_scenario

__all__ = [
    "ConsortiumSpec",
    "FaultSpec",
    "MetricsReport",
    "NetworkSpec",
    "ObservationEntry",
    "ObservationLog",
    "PartySpec",
    "Scenario",
    "ScenarioError",
    "ScheduleAction",
    "SimWorld",
    "Violation",
    "audit_knowledge_partition",
    "load_scenario",
    "parse_scenario",
    "run_scenario",
]
