"""Commitment-bound test flows that audit exit relays.

An authority that wants to check an exit first posts a commitment on the
ledger naming, under a hash, the flow it is about to send: the signing key it
will use, the exit under test, the destination, and the time window.  It then
runs that flow like any ordinary client, reveals the preimage, and files a
recovery case against its own traffic.  Before the reveal the exit cannot
tell the probe from a real connection, so the only strategy that survives
repeated audits is storing and reporting every flow honestly.

Probes that fail for reasons outside the exit's control (an unwilling
committee, a prober's own bookkeeping error) never count toward removal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .circuit import Directory
from .crypto import SigningKeyPair, hash_digest
from .deanon import (
    CHECK_FLOW_SIG,
    REFUSED_NOT_FOUND,
    RESULT_IDENTITY,
    RESULT_MISBEHAVIOR,
    RESULT_REFUSED,
    DeanonOutcome,
)
from .encoding import (
    decode_fields,
    decode_u16,
    decode_u64,
    encode_fields,
    encode_u16,
    encode_u64,
)
from .errors import ParameterError, PreconditionError, ProtocolError
from .flowstore import FlowRecord, verify_flow_sig
from .ledger import ACCEPTED, ConsortiumLedger
from .rng import Rng, ensure_rng

# a stored flow the prober itself sent but the search cannot find
CHECK_RECORD_MISSING = "record_missing"

DEFAULT_FAILURES_TO_REMOVE = 2


# ---------------------------------------------------------------------------
# commitments


@dataclass(frozen=True)
class ProbePreimage:
    """What the commitment digest binds: who will sign, whom it tests, where
    the flow goes, and when."""

    identification_key: bytes  # public half of the probe's flow-signing key
    exit_id_key: bytes
    dest_ip: str
    dest_port: int
    timeframe: tuple[int, int]  # inclusive unix-second window for the flow

    def __post_init__(self):
        if len(self.identification_key) != 32:
            raise ParameterError("identification key must be 32 bytes")
        if not 0 <= self.dest_port < 2**16:
            raise ParameterError(f"port out of range: {self.dest_port}")
        start, end = self.timeframe
        if start >= end:
            raise ParameterError("timeframe must be a nonempty window")

    def to_bytes(self) -> bytes:
        start, end = self.timeframe
        return encode_fields(
            self.identification_key,
            self.exit_id_key,
            self.dest_ip.encode(),
            encode_u16(self.dest_port),
            encode_u64(start),
            encode_u64(end),
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProbePreimage":
        key, exit_id, ip, port, start, end = decode_fields(data, 6)
        return cls(
            identification_key=key,
            exit_id_key=exit_id,
            dest_ip=ip.decode(),
            dest_port=decode_u16(port),
            timeframe=(decode_u64(start), decode_u64(end)),
        )

    def digest(self) -> bytes:
        return hash_digest(self.to_bytes())


@dataclass
class ProbePlan:
    """An authority's private half of one committed probe."""

    prober: str
    preimage: ProbePreimage
    identification_key: SigningKeyPair  # full pair, secret until the reveal
    commitment: bytes
    revealed: bool = False
    voided: bool = False


def commit_to_probe(
    prober: str,
    exit_id_key: bytes,
    dest_ip: str,
    dest_port: int,
    timeframe: tuple[int, int],
    ledger: ConsortiumLedger,
    now_s: int,
    rng: Rng | None = None,
) -> ProbePlan:
    """Generate a fresh identification key and post the probe commitment.

    The timeframe must lie ahead of the commitment; blessing already-elapsed
    traffic retroactively would let an authority relabel any real case as a
    probe after seeing how it went.
    """
    start, _end = timeframe
    if start <= now_s:
        raise PreconditionError("probe timeframe must start in the future")
    rng = ensure_rng(rng)
    key = SigningKeyPair.generate(rng)
    preimage = ProbePreimage(
        identification_key=key.public,
        exit_id_key=exit_id_key,
        dest_ip=dest_ip,
        dest_port=dest_port,
        timeframe=timeframe,
    )
    commitment = preimage.digest()
    ledger.post_probe_commitment(prober, commitment)
    return ProbePlan(
        prober=prober,
        preimage=preimage,
        identification_key=key,
        commitment=commitment,
    )


# ---------------------------------------------------------------------------
# judgment


@dataclass
class ProbeResult:
    """Public judgment of one revealed probe."""

    exit_id_key: bytes
    prober: str
    passed: bool
    failed_check: str | None = None
    commitment: bytes | None = None
    case_id: int | None = None
    verified_independently_by: frozenset = frozenset()

    @property
    def relay_fault(self) -> bool:
        """True when the failure is attributable to the probed exit."""
        return not self.passed and self.failed_check is not None


def verify_probe(
    preimage: ProbePreimage,
    outcome: DeanonOutcome,
    prober: str,
    ledger: ConsortiumLedger | None = None,
) -> ProbeResult:
    """Judge a revealed probe against its commitment.

    Anyone can run this from public data: the revealed preimage, the case
    outcome, and the ledger.  A preimage that does not open a posted, revealed
    commitment is the prober's own error and raises; it never counts against
    the relay.
    """
    commitment = preimage.digest()
    if ledger is not None:
        poster = ledger.probe_commitment_poster(commitment)
        if poster is None:
            raise PreconditionError("no posted commitment matches this preimage")
        if poster != prober:
            raise PreconditionError("commitment was posted by a different authority")
        if ledger.probe_reveal(commitment) != preimage.to_bytes():
            raise PreconditionError("preimage was never revealed on the ledger")
    result = ProbeResult(
        exit_id_key=preimage.exit_id_key,
        prober=prober,
        passed=False,
        commitment=commitment,
        case_id=outcome.case_id,
    )
    if outcome.result == RESULT_REFUSED:
        if outcome.refusal_reason == REFUSED_NOT_FOUND:
            # the prober sent this flow itself; a vanished record is on the exit
            result.failed_check = CHECK_RECORD_MISSING
        return result
    if outcome.result == RESULT_MISBEHAVIOR:
        if outcome.misbehaving_party == preimage.exit_id_key:
            result.failed_check = outcome.failed_check
        return result
    # identity recovered: some candidate must be the committed flow, signed by
    # the committed key
    for cand in [outcome] + list(outcome.candidates):
        if cand.result == RESULT_IDENTITY and _binds(preimage, cand):
            result.passed = True
            return result
    result.failed_check = CHECK_FLOW_SIG
    return result


def _binds(preimage: ProbePreimage, outcome: DeanonOutcome) -> bool:
    record = outcome.flow_record
    if record is None:
        return False
    start, end = preimage.timeframe
    return (
        record.dest_ip == preimage.dest_ip
        and record.dest_port == preimage.dest_port
        and start <= record.timestamp <= end
        and verify_flow_sig(
            preimage.identification_key,
            record,
            outcome.identity_digest or b"",
            outcome.flow_signature or b"",
        )
    )


# ---------------------------------------------------------------------------
# orchestration


def run_probe(
    plan: ProbePlan,
    ledger: ConsortiumLedger,
    open_circuit_and_flow: Callable[[ProbePlan], FlowRecord | None],
    deanonymize: Callable[[ProbePlan, FlowRecord], DeanonOutcome],
    audit: "ProbeAudit | None" = None,
) -> ProbeResult | None:
    """Drive one committed probe end to end.

    open_circuit_and_flow plays the client: build a circuit ending at the
    committed exit with the plan's identification key as the last hop key,
    send one flow to the committed destination inside the timeframe, and
    return its record, or None when the circuit could not be built.  A failed
    build voids the commitment and aborts; nothing is revealed.

    deanonymize files the recovery case with the prober as the requesting
    authority, once the exit's migration deadline has passed; filing earlier
    turns honest buffering into a spurious missing-record fault.  The probe
    case is disclosed on the ledger whether or not the exit passed, keeping
    the public case statistics honest.
    """
    if plan.voided or plan.revealed:
        raise PreconditionError("probe plan already used")
    if audit is not None:
        audit.begin(plan)
    try:
        record = open_circuit_and_flow(plan)
    except ProtocolError:
        record = None
    if record is None:
        ledger.void_probe_commitment(plan.prober, plan.commitment)
        plan.voided = True
        if audit is not None:
            audit.abort(plan)
        return None
    ledger.post_probe_reveal(plan.prober, plan.preimage.to_bytes())
    plan.revealed = True
    outcome = deanonymize(plan, record)
    if outcome.case_id is not None:
        ledger.mark_probe(plan.prober, outcome.case_id)
    result = verify_probe(plan.preimage, outcome, plan.prober, ledger=ledger)
    if audit is not None:
        audit.record(result)
    return result


class ProbeAudit:
    """Cross-authority probe accounting plus the removal rule.

    An exit leaves the consensus once failures_to_remove distinct authorities
    each produced a relay-fault result against it.  One authority probing the
    same exit twice keeps it listed; independent confirmation is the point.
    """

    def __init__(
        self,
        directory: Directory | None = None,
        failures_to_remove: int = DEFAULT_FAILURES_TO_REMOVE,
    ):
        if failures_to_remove < 1:
            raise ParameterError("failures_to_remove must be positive")
        self.directory = directory
        self.failures_to_remove = failures_to_remove
        self.results: list[ProbeResult] = []
        self.removed: set[bytes] = set()
        self._in_flight: set[bytes] = set()
        self._fault_reporters: dict[bytes, set[str]] = {}

    def begin(self, plan: ProbePlan) -> None:
        """At most one probe per exit may be in flight."""
        target = plan.preimage.exit_id_key
        if target in self._in_flight:
            raise PreconditionError("a probe against this exit is already in flight")
        self._in_flight.add(target)

    def abort(self, plan: ProbePlan) -> None:
        self._in_flight.discard(plan.preimage.exit_id_key)

    def record(self, result: ProbeResult) -> bool:
        """Returns True when this result removes the exit from the consensus."""
        self._in_flight.discard(result.exit_id_key)
        self.results.append(result)
        if not result.relay_fault:
            return False
        reporters = self._fault_reporters.setdefault(result.exit_id_key, set())
        reporters.add(result.prober)
        result.verified_independently_by = frozenset(reporters)
        if (
            len(reporters) >= self.failures_to_remove
            and result.exit_id_key not in self.removed
        ):
            self.removed.add(result.exit_id_key)
            if self.directory is not None:
                self.directory.delist(result.exit_id_key)
            return True
        return False

    def fault_reporters(self, exit_id_key: bytes) -> frozenset:
        return frozenset(self._fault_reporters.get(exit_id_key, set()))


def probe_statistics(ledger: ConsortiumLedger) -> tuple[int, int, int]:
    """(accepted cases, disclosed probes among them, remaining real cases).

    All three are public.  Authorities must disclose their probe cases, so
    anyone can subtract probes from the accepted total and compare the rest
    against the investigative load authorities claim elsewhere.
    """
    accepted = sum(1 for c in ledger.cases.values() if c.accepted == ACCEPTED)
    probes = sum(
        1
        for c in ledger.cases.values()
        if c.probe_marked and c.accepted == ACCEPTED
    )
    return accepted, probes, accepted - probes
