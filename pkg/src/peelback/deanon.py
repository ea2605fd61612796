"""End-to-end identity recovery with misbehavior attribution.

The pipeline locates the suspect flow in a migrated database, files a case on
the consortium ledger, collects votes, asks the exit relay to open the sealed
envelope under a state proof, peels the layered identity escrow one relay at
a time with the full verification chain, and finally hands the innermost
layer's decryption shares to the requesting authority alone.  Every failed
verification attributes exactly one party.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .certs import DEFAULT_MAX_AGE, TemporalIpCertificate, verify_certificate
from .circuit import (
    LAYER_ENTRY,
    Directory,
    EncryptedIdentity,
    IdentityLayer,
    bundle_signing_payload,
)
from .crypto import (
    DecryptionShare,
    HybridCiphertext,
    ThresholdKeyShare,
    ThresholdPublicKey,
    combine_shares,
    hash_digest,
    partial_decrypt,
    verify,
)
from .errors import InsufficientSharesError, PreconditionError, ProtocolError
from .flowstore import (
    DEFAULT_RETENTION_S,
    ExitFlowStore,
    FlowRecord,
    FlowRecordEnvelope,
    GovDatabase,
    StoredEnvelope,
    verify_flow_sig,
)
from .ledger import (
    ACCEPTED,
    ConsortiumLedger,
    LedgerBlock,
    MerkleStateProof,
    verify_state_proof,
)

# Check names, in the order the peel routine evaluates them.
CHECK_RETRIEVABLE = "retrievable"
CHECK_FLOW_SIG = "flow_sig"
CHECK_IDENTITY_KNOWN = "identity_known"
CHECK_SIG_S = "sig_s"
CHECK_HOP_KEY = "hop_key_match"
CHECK_CHAIN_SIG = "chain_sig"
CHECK_CERTIFICATE = "certificate"  # final-layer only, judged by the authority

CHECK_ORDER = (
    CHECK_RETRIEVABLE,
    CHECK_FLOW_SIG,
    CHECK_IDENTITY_KNOWN,
    CHECK_SIG_S,
    CHECK_HOP_KEY,
    CHECK_CHAIN_SIG,
    CHECK_CERTIFICATE,
)

RESULT_IDENTITY = "identity"
RESULT_MISBEHAVIOR = "misbehavior"
RESULT_REFUSED = "refused"

REFUSED_VOTE = "vote failed"
REFUSED_EXPIRED = "expired"
REFUSED_NOT_FOUND = "not found"
REFUSED_SHARES = "insufficient shares"

_MAX_DEPTH = 16  # sanity bound; honest circuits stay well below


def _safe_verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """Signature check that treats malformed key or signature bytes as a
    plain failure; peeled layers carry whatever a relay chose to store."""
    try:
        return verify(public, message, signature)
    except ProtocolError:
        return False


@dataclass
class ConsortiumMember:
    """One committee seat: a ledger voter holding a threshold key share.

    The log records material this member received or sent, for the
    knowledge-partition audits.  Plaintexts of inner layers never appear in
    it; members only ever contribute shares.
    """

    member_id: str
    share: ThresholdKeyShare
    votes_in_favor: bool = True
    provides_shares: bool = True
    log: list[tuple] = field(default_factory=list)


@dataclass
class Consortium:
    members: list[ConsortiumMember]
    public_key: ThresholdPublicKey
    directory: Directory

    @property
    def chair(self) -> ConsortiumMember:
        return self.members[0]

    def _quorum(self) -> list[ConsortiumMember]:
        willing = [m for m in self.members if m.provides_shares]
        if len(willing) < self.public_key.threshold:
            raise InsufficientSharesError(
                f"{len(willing)} members willing, threshold is {self.public_key.threshold}"
            )
        return willing[: self.public_key.threshold]

    def joint_decrypt(self, ct: HybridCiphertext) -> bytes:
        """Members contribute shares; the chair combines. Used for every
        layer except the innermost, whose shares bypass the consortium."""
        parts = []
        ct_ref = hash_digest(ct.to_bytes()).hex()[:16]
        for m in self._quorum():
            parts.append(partial_decrypt(m.share, ct))
            m.log.append(("share_sent", ct_ref, "to", self.chair.member_id))
        plain = combine_shares(self.public_key, ct, parts)
        self.chair.log.append(("layer_combined", ct_ref, hash_digest(plain).hex()[:16]))
        return plain


@dataclass
class DeanonRequest:
    lea_id: str
    flow_query: tuple[str, int, str, tuple[int, int]]
    record_hash: bytes
    case_id: int


@dataclass
class LayerVerdict:
    """Outcome of verifying one peeled layer.

    layer_index counts inward from the exit layer at 0.  relay names the
    party that built the layer: the exit itself for index 0, afterwards the
    predecessor identified (and signature-checked) one layer further out,
    and the label "entry" for the innermost layer judged by the authority.
    """

    layer_index: int
    relay: bytes | str
    checks: dict[str, bool]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    @property
    def failed_check(self) -> str | None:
        for name in CHECK_ORDER:
            if not self.checks.get(name, True):
                return name
        return None


@dataclass
class DeanonOutcome:
    result: str
    certificate: TemporalIpCertificate | None = None
    certified_ip: str | None = None
    misbehaving_party: bytes | str | None = None
    failed_check: str | None = None
    refusal_reason: str | None = None
    verdicts: list[LayerVerdict] = field(default_factory=list)
    case_id: int | None = None
    request: DeanonRequest | None = None
    log: list[str] = field(default_factory=list)
    # one sub-outcome per candidate envelope when the search was ambiguous
    candidates: list["DeanonOutcome"] = field(default_factory=list)
    # flow evidence, filled once the exit has opened its envelope; auditors
    # check probe flows against these without rerunning the pipeline
    flow_record: FlowRecord | None = None
    identity_digest: bytes | None = None
    flow_signature: bytes | None = None

    def describe(self) -> str:
        if self.result == RESULT_IDENTITY:
            return f"identity: certified ip {self.certified_ip}"
        if self.result == RESULT_MISBEHAVIOR:
            party = (
                self.misbehaving_party.hex()[:16]
                if isinstance(self.misbehaving_party, bytes)
                else self.misbehaving_party
            )
            return f"misbehavior: party {party} failed {self.failed_check}"
        return f"refused: {self.refusal_reason}"


@dataclass
class PeelContext:
    """What the committee knows about a layer before decrypting it."""

    layer_index: int
    builder: bytes | str  # who is answerable for this layer's contents
    is_exit: bool
    outer_inbound_key: bytes | None = None  # set for middle layers
    flow_record: FlowRecord | None = None  # set for the exit layer
    flow_signature: bytes | None = None
    identity_digest: bytes | None = None


@dataclass
class LeaDelivery:
    """Shares of the innermost layer, addressed to the requesting authority.

    k2 is the inbound hop key recorded one layer further out; the authority
    needs it to check the entry relay's key chain.
    """

    ciphertext: EncryptedIdentity
    shares: list[tuple[str, DecryptionShare]]
    k2: bytes
    lea_id: str


def exit_open_envelope(
    exit_store: ExitFlowStore,
    envelope: FlowRecordEnvelope,
    proof: MerkleStateProof,
    block: LedgerBlock,
) -> tuple[tuple[bytes, bytes] | None, str]:
    """The exit relay's side of a deanonymization request.

    The relay checks the consortium's selective state reveal against the
    block header it already holds: the proof must verify, name this very
    flow record, and show the case accepted.  Only then does it decrypt the
    sealed pointer.  Returns ((identity digest, flow signature), "") or
    (None, reason).
    """
    if not verify_state_proof(block, proof):
        return None, "bad_proof"
    by_var: dict[bytes, tuple[bytes, bytes]] = {}
    for key, value in proof.proved_pairs:
        prefix, _, var = key.rpartition(b"/")
        by_var[var] = (prefix, value)
    if b"record_hash" not in by_var or b"accepted" not in by_var:
        return None, "bad_proof"
    if by_var[b"record_hash"][0] != by_var[b"accepted"][0]:
        return None, "bad_proof"  # variables of two different cases
    if by_var[b"record_hash"][1] != hash_digest(envelope.record.to_bytes()):
        return None, "record_hash_mismatch"
    if int.from_bytes(by_var[b"accepted"][1], "big", signed=True) != ACCEPTED:
        return None, "not_accepted"
    try:
        return exit_store.open_envelope(envelope), ""
    except (PreconditionError, ProtocolError):
        # key loss or an unopenable seal: the relay simply cannot answer
        return None, "no_response"


def peel_layer(
    consortium: Consortium, ct: EncryptedIdentity, context: PeelContext
) -> tuple[LayerVerdict, IdentityLayer | None]:
    """Jointly decrypt one escrow layer and verify its chain of custody.

    Checks run in a fixed order: (a) the referenced data is retrievable and
    parses, (b) the flow signature verifies under the revealed
    identification key (exit layer only), (c) the named predecessor has a
    known identity, (d) the predecessor's custody signature s verifies,
    (e) the recorded next hop key matches the outer layer and its chain
    signature verifies (middle layers only).  Any failure is answerable by
    this layer's builder.
    """
    checks: dict[str, bool] = {}
    verdict = LayerVerdict(context.layer_index, context.builder, checks)
    try:
        plain = consortium.joint_decrypt(ct.ciphertext)
        layer = IdentityLayer.from_bytes(plain)
    except InsufficientSharesError:
        raise  # an unwilling committee is a refusal, not relay misbehavior
    except (ProtocolError, ValueError):
        checks[CHECK_RETRIEVABLE] = False
        return verdict, None
    if layer.kind != ct.kind or layer.kind == LAYER_ENTRY:
        # the cleartext tag lied about what was sealed; discard unlogged
        checks[CHECK_RETRIEVABLE] = False
        return verdict, None
    checks[CHECK_RETRIEVABLE] = True

    if context.is_exit:
        checks[CHECK_FLOW_SIG] = verify_flow_sig(
            layer.inbound_hop_key,
            context.flow_record,
            context.identity_digest,
            context.flow_signature or b"",
        )

    checks[CHECK_IDENTITY_KNOWN] = consortium.directory.known_key(
        layer.predecessor_id or b""
    )

    payload = bundle_signing_payload(
        layer.inner, layer.inbound_hop_key, layer.predecessor_id or b""
    )
    checks[CHECK_SIG_S] = bool(layer.predecessor_sig) and _safe_verify(
        layer.predecessor_id or b"", payload, layer.predecessor_sig or b""
    )

    if not context.is_exit:
        checks[CHECK_HOP_KEY] = layer.next_hop_key == context.outer_inbound_key
        checks[CHECK_CHAIN_SIG] = bool(layer.chain_sig) and _safe_verify(
            layer.inbound_hop_key, layer.next_hop_key or b"", layer.chain_sig or b""
        )
    return verdict, layer


def final_layer_to_lea(
    consortium: Consortium, ct: EncryptedIdentity, lea_id: str, k2: bytes
) -> LeaDelivery:
    """Produce decryption shares of the innermost layer for the authority.

    Members send their shares only to the requesting authority; no member,
    the chair included, combines them.  The hop key recorded one layer out
    rides the same channel under its own tag.
    """
    shares = []
    ct_ref = hash_digest(ct.to_bytes()).hex()[:16]
    for m in consortium._quorum():
        shares.append((m.member_id, partial_decrypt(m.share, ct.ciphertext)))
        m.log.append(("share_sent", ct_ref, "to", lea_id))
    consortium.chair.log.append(("hop_key_k2_sent", k2, "to", lea_id))
    return LeaDelivery(ciphertext=ct, shares=shares, k2=k2, lea_id=lea_id)


def lea_open_identity(
    pk: ThresholdPublicKey, delivery: LeaDelivery
) -> IdentityLayer | None:
    """Authority-side combine of the innermost layer. None if the shares do
    not produce a well-formed entry layer."""
    try:
        plain = combine_shares(
            pk, delivery.ciphertext.ciphertext, [s for _, s in delivery.shares]
        )
        layer = IdentityLayer.from_bytes(plain)
    except (ProtocolError, ValueError):
        return None
    if layer.kind != LAYER_ENTRY:
        return None
    return layer


def _lea_checks(
    cert: TemporalIpCertificate,
    k2_from_consortium: bytes,
    chain_sig: bytes,
    entry_layer: IdentityLayer | None,
    trusted_ca_keys,
    flow_time: int,
    max_cert_age: int = DEFAULT_MAX_AGE,
) -> dict[str, bool]:
    try:
        cert_ok = verify_certificate(cert, trusted_ca_keys, now=flow_time, max_age=max_cert_age)
    except ProtocolError:
        cert_ok = False
    checks = {
        # validity is judged at the time the flow happened, not at recovery
        CHECK_CERTIFICATE: cert_ok,
        CHECK_CHAIN_SIG: _safe_verify(
            cert.client_public_key, k2_from_consortium, chain_sig or b""
        ),
    }
    if entry_layer is not None:
        checks[CHECK_HOP_KEY] = entry_layer.next_hop_key == k2_from_consortium
    return checks


def lea_verify_identity(
    lea_id: str,
    cert: TemporalIpCertificate,
    k2_from_consortium: bytes,
    chain_sig: bytes,
    trusted_ca_keys,
    flow_time: int,
    max_cert_age: int = DEFAULT_MAX_AGE,
) -> bool:
    """True iff a trusted CA issued the certificate, it was valid when the
    flow happened, and the certificate's key signed the hop key the
    consortium vouches for.  False means the entry relay covered something
    up and warrants investigation."""
    checks = _lea_checks(
        cert, k2_from_consortium, chain_sig, None, trusted_ca_keys, flow_time, max_cert_age
    )
    return all(checks.values())


def _refused(reason: str, case_id=None, request=None, log=None, verdicts=None) -> DeanonOutcome:
    return DeanonOutcome(
        result=RESULT_REFUSED,
        refusal_reason=reason,
        case_id=case_id,
        request=request,
        log=log or [],
        verdicts=verdicts or [],
    )


def _misbehavior(
    party, check, verdicts, case_id, request, log
) -> DeanonOutcome:
    return DeanonOutcome(
        result=RESULT_MISBEHAVIOR,
        misbehaving_party=party,
        failed_check=check,
        verdicts=verdicts,
        case_id=case_id,
        request=request,
        log=log,
    )


def _run_one_envelope(
    lea_id: str,
    stored: StoredEnvelope,
    request: DeanonRequest,
    proof: MerkleStateProof,
    block: LedgerBlock,
    consortium: Consortium,
    db: GovDatabase,
    exit_store: ExitFlowStore,
    trusted_ca_keys,
    now_s: int,
    retention_s: int,
    max_cert_age: int,
    log: list[str],
) -> DeanonOutcome:
    verdicts: list[LayerVerdict] = []
    case_id = request.case_id
    record = stored.record
    if record.timestamp < now_s - retention_s:
        log.append("record beyond retention, refusing")
        return _refused(REFUSED_EXPIRED, case_id, request, log, verdicts)

    envelope = FlowRecordEnvelope(record=record, sealed=stored.sealed)
    opened, reason = exit_open_envelope(exit_store, envelope, proof, block)
    if opened is None:
        log.append(f"exit gave no usable answer ({reason})")
        if reason in ("bad_proof", "record_hash_mismatch", "not_accepted"):
            # the exit rightly refused our request; nothing to attribute
            return _refused(f"exit refused: {reason}", case_id, request, log, verdicts)
        return _misbehavior(
            stored.exit_id_key, CHECK_RETRIEVABLE, verdicts, case_id, request, log
        )
    digest, flow_sig = opened
    log.append(f"exit opened envelope, identity digest {digest.hex()[:16]}")

    outcome = _judge_opened(
        lea_id,
        stored.exit_id_key,
        request,
        consortium,
        db,
        exit_store,
        trusted_ca_keys,
        record,
        digest,
        flow_sig,
        max_cert_age,
        verdicts,
        log,
    )
    outcome.flow_record = record
    outcome.identity_digest = digest
    outcome.flow_signature = flow_sig
    return outcome


def _judge_opened(
    lea_id: str,
    exit_id_key: bytes,
    request: DeanonRequest,
    consortium: Consortium,
    db: GovDatabase,
    exit_store: ExitFlowStore,
    trusted_ca_keys,
    record: FlowRecord,
    digest: bytes,
    flow_sig: bytes,
    max_cert_age: int,
    verdicts: list[LayerVerdict],
    log: list[str],
) -> DeanonOutcome:
    case_id = request.case_id
    ct_bytes = db.identity_ciphertext(digest)
    if ct_bytes is None:
        ct_bytes = exit_store.identity_ciphertext(digest)
        if ct_bytes is not None:
            log.append("identity ciphertext found in the exit's unmigrated buffer")
    if ct_bytes is None:
        log.append("no identity ciphertext under that digest anywhere")
        return _misbehavior(
            exit_id_key, CHECK_RETRIEVABLE, verdicts, case_id, request, log
        )

    pk = consortium.public_key
    try:
        ct = EncryptedIdentity.from_ciphertext_bytes(ct_bytes, pk.modulus_bytes)
    except ProtocolError:
        return _misbehavior(
            exit_id_key, CHECK_RETRIEVABLE, verdicts, case_id, request, log
        )

    builder: bytes | str = exit_id_key
    outer_inbound: bytes | None = None
    index = 0
    while ct.kind != LAYER_ENTRY:
        if index >= _MAX_DEPTH:
            return _misbehavior(builder, CHECK_RETRIEVABLE, verdicts, case_id, request, log)
        context = PeelContext(
            layer_index=index,
            builder=builder,
            is_exit=(index == 0),
            outer_inbound_key=outer_inbound,
            flow_record=record,
            flow_signature=flow_sig,
            identity_digest=digest,
        )
        try:
            verdict, layer = peel_layer(consortium, ct, context)
        except InsufficientSharesError:
            return _refused(REFUSED_SHARES, case_id, request, log, verdicts)
        verdicts.append(verdict)
        log.append(
            f"layer {index}: " + ("all checks pass" if verdict.passed else f"FAILED {verdict.failed_check}")
        )
        if not verdict.passed:
            return _misbehavior(
                builder, verdict.failed_check, verdicts, case_id, request, log
            )
        outer_inbound = layer.inbound_hop_key
        builder = layer.predecessor_id
        try:
            ct = EncryptedIdentity.from_ciphertext_bytes(layer.inner, pk.modulus_bytes)
        except ProtocolError:
            # the predecessor signed custody of these bytes, so they answer
            return _misbehavior(
                builder, CHECK_RETRIEVABLE, verdicts, case_id, request, log
            )
        index += 1

    # innermost layer: shares go to the authority, never combined in-house
    try:
        delivery = final_layer_to_lea(consortium, ct, lea_id, outer_inbound or b"")
    except InsufficientSharesError:
        return _refused(REFUSED_SHARES, case_id, request, log, verdicts)
    log.append(f"innermost layer shares sent to {lea_id} with hop key escort")

    entry_verdict = LayerVerdict(index, "entry", {})
    verdicts.append(entry_verdict)
    entry_layer = lea_open_identity(pk, delivery)
    if entry_layer is None:
        entry_verdict.checks[CHECK_RETRIEVABLE] = False
        return _misbehavior(builder, CHECK_RETRIEVABLE, verdicts, case_id, request, log)
    entry_verdict.checks[CHECK_RETRIEVABLE] = True
    try:
        cert = TemporalIpCertificate.from_bytes(entry_layer.inner)
    except (ProtocolError, ValueError):
        entry_verdict.checks[CHECK_CERTIFICATE] = False
        return _misbehavior(builder, CHECK_CERTIFICATE, verdicts, case_id, request, log)
    entry_verdict.checks.update(
        _lea_checks(
            cert,
            delivery.k2,
            entry_layer.chain_sig or b"",
            entry_layer,
            trusted_ca_keys,
            flow_time=record.timestamp,
            max_cert_age=max_cert_age,
        )
    )
    log.append(
        "authority verdict: " + ("identity confirmed" if entry_verdict.passed else f"FAILED {entry_verdict.failed_check}")
    )
    if not entry_verdict.passed:
        return _misbehavior(
            builder, entry_verdict.failed_check, verdicts, case_id, request, log
        )
    return DeanonOutcome(
        result=RESULT_IDENTITY,
        certificate=cert,
        certified_ip=cert.client_ip,
        verdicts=verdicts,
        case_id=case_id,
        request=request,
        log=log + [f"certified identity revealed to {lea_id} only"],
    )


def run_deanonymization(
    lea_id: str,
    flow_query: tuple[str, int, str, tuple[int, int]],
    consortium: Consortium,
    ledger: ConsortiumLedger,
    db: GovDatabase,
    exit_store: ExitFlowStore,
    now_s: int,
    reasoning: str = "",
    trusted_ca_keys=None,
    retention_s: int = DEFAULT_RETENTION_S,
    max_cert_age: int = DEFAULT_MAX_AGE,
) -> DeanonOutcome:
    """Run the whole recovery pipeline for one observed flow tuple.

    flow_query is (dest_ip, dest_port, exit_ip, (start, end)).  When the
    search is ambiguous, every candidate envelope is processed under the
    case filed for its record; the returned outcome is the first decisive
    one and carries the rest in .candidates.
    """
    trusted_ca_keys = trusted_ca_keys or {}
    log: list[str] = []
    dest_ip, dest_port, exit_ip, window = flow_query
    candidates = db.search(dest_ip, dest_port, exit_ip, window)
    log.append(f"db search returned {len(candidates)} candidate envelope(s)")
    if not candidates:
        if window[1] < now_s - retention_s:
            return _refused(REFUSED_EXPIRED, log=log)
        return _refused(REFUSED_NOT_FOUND, log=log)

    # group by record hash: identical records share one case and one proof
    groups: dict[bytes, list[StoredEnvelope]] = {}
    for stored in candidates:
        groups.setdefault(hash_digest(stored.record.to_bytes()), []).append(stored)

    outcomes: list[DeanonOutcome] = []
    for record_hash, group in groups.items():
        if group[0].record.timestamp < now_s - retention_s:
            # no case is even filed for data past its retention
            expired_log = log + ["record beyond retention, refusing"]
            outcomes.append(_refused(REFUSED_EXPIRED, log=expired_log))
            continue
        case_id = ledger.request_deanonymization(lea_id, record_hash, reasoning)
        request = DeanonRequest(lea_id, flow_query, record_hash, case_id)
        sub_log = list(log)
        sub_log.append(f"case {case_id} filed for record hash {record_hash.hex()[:16]}")
        accepted = False
        for member in consortium.members:
            if not member.votes_in_favor:
                continue
            accepted = ledger.vote_in_favor(member.member_id, case_id)
            if accepted:
                break
        block = ledger.produce_block(now_s)  # seals the case and any votes
        if not accepted:
            sub_log.append("vote did not reach the threshold")
            outcomes.append(_refused(REFUSED_VOTE, case_id, request, sub_log))
            continue
        sub_log.append("vote accepted and sealed into a block")
        proof = ledger.prove_state(case_id)
        for stored in group:
            outcomes.append(
                _run_one_envelope(
                    lea_id,
                    stored,
                    request,
                    proof,
                    block,
                    consortium,
                    db,
                    exit_store,
                    trusted_ca_keys,
                    now_s,
                    retention_s,
                    max_cert_age,
                    list(sub_log),
                )
            )

    primary = next(
        (o for o in outcomes if o.result != RESULT_REFUSED), outcomes[0]
    )
    if len(outcomes) > 1:
        primary.candidates = outcomes
    return primary
