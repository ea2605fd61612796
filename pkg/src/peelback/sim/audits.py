"""Observation logs and the knowledge-partition audit.

Every party in a run keeps an append-only, time-ordered log of the messages
delivered to it: a digest of the raw burst plus whatever fields the party
could actually decode.  After a run the harness replays those logs against
the run's ground truth (which sensitive values exist, which circuit minted
them, who was entitled to hold them) and reports every value that shows up
at a party outside its allowed set, every value reused across circuits, and
every out-of-band handoff.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = [
    "KnowledgeTruth",
    "ObservationEntry",
    "ObservationLog",
    "ValueGrant",
    "Violation",
    "audit_knowledge_partition",
]


@dataclass(frozen=True)
class ObservationEntry:
    """One delivered message as the receiving party saw it.

    ``fields`` holds what the party decoded: (kind, label, value) triples.
    ``channel`` is "link" for protocol traffic and "oob" for out-of-band
    handoffs between colluding parties.
    """

    time_ms: int
    source: str
    digest: bytes
    fields: tuple[tuple[str, str, bytes], ...]
    channel: str = "link"


class ObservationLog:
    """Ordered, append-only record of everything one party received."""

    def __init__(self, party: str):
        self.party = party
        self._entries: list[ObservationEntry] = []

    def append(self, entry: ObservationEntry) -> None:
        self._entries.append(entry)

    @property
    def entries(self) -> tuple[ObservationEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ObservationLog):
            return NotImplemented
        return self.party == other.party and self._entries == other._entries


@dataclass(frozen=True)
class Violation:
    """One breach of the knowledge partition."""

    kind: str  # "field_access" | "value_reuse" | "oob_handoff"
    observer: str
    value_kind: str
    circuit: str
    source: str = ""
    detail: str = ""

    def describe(self) -> str:
        parts = [
            f"kind={self.kind}",
            f"observer={self.observer}",
            f"value={self.value_kind}",
            f"circuit={self.circuit}",
        ]
        if self.source:
            parts.append(f"source={self.source}")
        if self.detail:
            parts.append(f"detail={self.detail}")
        return " ".join(parts)


@dataclass(frozen=True)
class ValueGrant:
    """Who may hold one sensitive value, and where it came from."""

    kind: str
    circuit: str
    owner: str  # the party that minted the value (its client side)
    allowed: frozenset[str]


class KnowledgeTruth:
    """Ground truth for the partition audit.

    The harness registers every certificate and hop key at circuit build time
    and every flow signature at send time, together with the set of relays
    allowed to see it.  Registering a value that an earlier circuit already
    minted is itself a violation (one per reuse), recorded here.
    """

    def __init__(self):
        self.values: dict[bytes, ValueGrant] = {}
        self.reuse: list[Violation] = []

    def register(
        self,
        value: bytes,
        kind: str,
        circuit: str,
        owner: str,
        allowed: set[str] | frozenset[str],
    ) -> None:
        if not value:
            return
        prior = self.values.get(value)
        if prior is not None:
            if prior.circuit != circuit:
                self.reuse.append(
                    Violation(
                        kind="value_reuse",
                        observer=owner,
                        value_kind=kind,
                        circuit=circuit,
                        source=prior.circuit,
                        detail=f"{kind} minted for {prior.circuit} reused in {circuit}",
                    )
                )
            return
        self.values[value] = ValueGrant(
            kind=kind, circuit=circuit, owner=owner, allowed=frozenset(allowed)
        )


def audit_knowledge_partition(
    logs: dict[str, ObservationLog], truth: KnowledgeTruth
) -> list[Violation]:
    """Cross every party's log against the value grants.

    Returns the violations in deterministic order: reuse first (in
    registration order), then field accesses in log order.  Empty means no
    relay observed a value outside its allowed set and no value served two
    circuits.
    """

    violations: list[Violation] = list(truth.reuse)
    for party in logs:
        log = logs[party]
        for entry in log:
            for kind, label, value in entry.fields:
                grant = truth.values.get(value)
                if grant is None:
                    continue
                if party == grant.owner or party in grant.allowed:
                    continue
                via = "oob_handoff" if entry.channel == "oob" else "field_access"
                violations.append(
                    Violation(
                        kind=via,
                        observer=party,
                        value_kind=grant.kind,
                        circuit=grant.circuit,
                        source=entry.source,
                        detail=f"seen as {kind}/{label} at t={entry.time_ms}ms",
                    )
                )
    return violations
