"""Run metrics and the rendered report.

The report has two audiences: the metric and audit lines are stable
machine-readable `name=value` pairs (one per line), the surrounding text is
for people.  Rendering is deterministic; two runs of the same scenario must
produce byte-identical reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .audits import Violation

__all__ = ["AuditResult", "MetricsReport"]


@dataclass(frozen=True)
class AuditResult:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        verdict = "pass" if self.ok else "fail"
        suffix = f" # {self.detail}" if self.detail else ""
        return f"audit {self.name}={verdict}{suffix}"


@dataclass
class MetricsReport:
    scenario: str
    seed: int
    clock_ms: int = 0
    circuits_built: int = 0
    circuits_failed: int = 0
    flows_sent: int = 0
    flows_refused: int = 0
    bytes_migrated: int = 0
    flows_migrated: int = 0
    batches: int = 0
    hops_extended: int = 0
    rounds_used: int = 0
    max_rounds_per_hop: int = 0
    deanon_outcomes: dict[str, int] = field(default_factory=dict)
    deanon_details: list[str] = field(default_factory=list)
    probes_run: int = 0
    probes_passed: int = 0
    probes_aborted: int = 0
    probe_relay_faults: int = 0
    relays_removed: tuple[str, ...] = ()
    ledger_blocks: int = 0
    ledger_stats: str = ""
    audits: list[AuditResult] = field(default_factory=list)
    violations: list[Violation] = field(default_factory=list)
    findings: list[str] = field(default_factory=list)

    @property
    def per_connection_bytes(self) -> float:
        """Archived bytes per migrated flow record; the storage figure of merit."""
        if self.flows_migrated == 0:
            return 0.0
        return self.bytes_migrated / self.flows_migrated

    @property
    def all_audits_pass(self) -> bool:
        return all(a.ok for a in self.audits)

    @property
    def exit_status(self) -> int:
        return 0 if self.all_audits_pass else 1

    def metric_lines(self) -> list[str]:
        pairs: list[tuple[str, object]] = [
            ("clock_ms", self.clock_ms),
            ("circuits_built", self.circuits_built),
            ("circuits_failed", self.circuits_failed),
            ("flows_sent", self.flows_sent),
            ("flows_refused", self.flows_refused),
            ("flows_migrated", self.flows_migrated),
            ("bytes_migrated", self.bytes_migrated),
            ("per_connection_bytes", f"{self.per_connection_bytes:.2f}"),
            ("migration_batches", self.batches),
            ("hops_extended", self.hops_extended),
            ("rounds_used", self.rounds_used),
            ("max_rounds_per_hop", self.max_rounds_per_hop),
        ]
        for result in sorted(self.deanon_outcomes):
            pairs.append((f"deanon_{result}", self.deanon_outcomes[result]))
        pairs += [
            ("probes_run", self.probes_run),
            ("probes_passed", self.probes_passed),
            ("probes_aborted", self.probes_aborted),
            ("probe_relay_faults", self.probe_relay_faults),
            ("relays_removed", ",".join(self.relays_removed) or "none"),
            ("ledger_blocks", self.ledger_blocks),
            ("knowledge_violations", len(self.violations)),
        ]
        return [f"metric {name}={value}" for name, value in pairs]

    def render(self) -> str:
        lines = [
            f"# run report: scenario '{self.scenario}' seed {self.seed}",
            f"# ledger: {self.ledger_stats}" if self.ledger_stats else "# ledger: no activity",
        ]
        lines += self.metric_lines()
        lines += [a.line() for a in self.audits]
        lines += [f"violation {v.describe()}" for v in self.violations]
        lines += [f"finding {f}" for f in self.findings]
        lines += [f"deanon {d}" for d in self.deanon_details]
        status = "ok" if self.all_audits_pass else "AUDIT FAILURES"
        lines.append(f"# status: {status}")
        return "\n".join(lines) + "\n"
