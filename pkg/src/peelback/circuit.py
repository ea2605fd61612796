"""Circuit establishment with escrowed layered identities.

Each relay that joins a circuit contributes one layer to a nested
threshold-encrypted identity: the entry layer holds the client's address
certificate and first two hop keys, every further layer wraps the previous
ciphertext together with the hop keys and the predecessor relay's signature
over what it forwarded. Relay n ends up knowing only hop keys n and n+1; the
committee can later peel the nesting layer by layer and attribute any
inconsistency to the relay that built the offending layer.

Transport model: an abstract per-hop secure channel stands in for the real
handshake. Client payloads are sealed to the target relay's static channel
key; established hops carry onion-layered cells under per-hop stream keys so
every relay on the path sees different bytes. All link traffic rides
fixed-size cells from the cells module.

Handlers are transport-free: they consume a delivered cell burst and return
observations (what this party decoded, for the knowledge audits), directives
(bursts to send next), and events (protocol outcomes for the harness).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .cells import (
    PAYLOAD_SIZE,
    Cell,
    CellCommand,
    package_create,
    unpack_create,
)
from .certs import TemporalIpCertificate, verify_certificate
from .crypto import (
    ChannelKeyPair,
    HybridCiphertext,
    SigningKeyPair,
    ThresholdPublicKey,
    hash_digest,
    open_sealed,
    seal_to,
    sign,
    stream_xor,
    threshold_encrypt,
    verify,
)
from .encoding import decode_fields, decode_fields_prefix, encode_fields, encode_u64
from .errors import (
    FormatError,
    IncompleteError,
    ParameterError,
    PreconditionError,
    ProtocolError,
)
from .flowstore import FlowRecord, client_sign_flow
from .rng import Rng, ensure_rng

LAYER_ENTRY = 1
LAYER_MIDDLE = 2
LAYER_EXIT = 3

_RECOG_LEN = 4
_ACK_OK = b"\x01"
_ACK_REFUSED = b"\x00"


# ---------------------------------------------------------------------------
# directory and relay identities


@dataclass(frozen=True)
class RelayIdentity:
    """Descriptor data every participant can look up."""

    relay_id_key: bytes  # long-term signing public key
    listed: bool
    ip: str
    channel_key: bytes  # static X25519 public key for sealed client payloads
    bridge_certificate: bytes | None = None


class Directory:
    """Consensus view: listed relays, bridge registrations, and party routing."""

    def __init__(self, bridge_authority_key: bytes | None = None):
        self.bridge_authority_key = bridge_authority_key
        self._relays: dict[bytes, tuple[str, RelayIdentity]] = {}

    def register(self, party_id: str, identity: RelayIdentity) -> None:
        self._relays[identity.relay_id_key] = (party_id, identity)

    def route(self, relay_id_key: bytes) -> str | None:
        entry = self._relays.get(relay_id_key)
        return entry[0] if entry else None

    def lookup(self, relay_id_key: bytes) -> RelayIdentity | None:
        entry = self._relays.get(relay_id_key)
        return entry[1] if entry else None

    def _bridge_ok(self, relay_id_key: bytes, bridge_cert: bytes | None) -> bool:
        if bridge_cert is None or self.bridge_authority_key is None:
            return False
        if len(bridge_cert) != 64:
            return False
        return verify(self.bridge_authority_key, relay_id_key, bridge_cert)

    def identity_known(
        self, relay_id_key: bytes, listed_claim: bool, bridge_cert: bytes | None
    ) -> bool:
        """Extension-time check by the next relay."""
        entry = self._relays.get(relay_id_key)
        if listed_claim:
            return entry is not None and entry[1].listed
        return self._bridge_ok(relay_id_key, bridge_cert)

    def known_key(self, relay_id_key: bytes) -> bool:
        """Peel-time check by the committee: consensus-listed or bridge-certified."""
        entry = self._relays.get(relay_id_key)
        if entry is None:
            return False
        ident = entry[1]
        return ident.listed or self._bridge_ok(relay_id_key, ident.bridge_certificate)

    def delist(self, relay_id_key: bytes) -> bool:
        """Drop a relay from the consensus, e.g. after repeated probe failures."""
        return self._relays.pop(relay_id_key, None) is not None


# ---------------------------------------------------------------------------
# identity layers


@dataclass(frozen=True)
class IdentityLayer:
    """Plaintext of one escrow layer, before threshold encryption.

    `inner` holds the certificate bytes at the entry layer and the previous
    layer's ciphertext bytes everywhere else. The chain signature binds this
    layer's inbound hop key to the next hop key; the predecessor signature is
    the forwarding relay's attestation over (inner, inbound key, its own id).
    """

    kind: int
    inner: bytes
    inbound_hop_key: bytes
    predecessor_id: bytes | None = None
    predecessor_sig: bytes | None = None
    next_hop_key: bytes | None = None
    chain_sig: bytes | None = None

    def __post_init__(self):
        if self.kind not in (LAYER_ENTRY, LAYER_MIDDLE, LAYER_EXIT):
            raise ParameterError(f"unknown layer kind {self.kind}")
        if len(self.inbound_hop_key) != 32:
            raise FormatError("inbound hop key must be 32 bytes")
        has_pred = self.predecessor_id is not None
        has_next = self.next_hop_key is not None
        if self.kind == LAYER_ENTRY and (has_pred or not has_next):
            raise FormatError("entry layer carries no predecessor and must chain forward")
        if self.kind == LAYER_MIDDLE and not (has_pred and has_next):
            raise FormatError("middle layer needs predecessor and next key")
        if self.kind == LAYER_EXIT and (not has_pred or has_next):
            raise FormatError("exit layer needs a predecessor and no next key")
        if has_pred != (self.predecessor_sig is not None):
            raise FormatError("predecessor id and signature come together")
        if has_next != (self.chain_sig is not None):
            raise FormatError("next key and chain signature come together")

    def to_bytes(self) -> bytes:
        return encode_fields(
            bytes([self.kind]),
            self.inner,
            self.inbound_hop_key,
            self.predecessor_id or b"",
            self.predecessor_sig or b"",
            self.next_hop_key or b"",
            self.chain_sig or b"",
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "IdentityLayer":
        kind_b, inner, inbound, pred, pred_sig, nxt, chain = decode_fields(data, 7)
        if len(kind_b) != 1:
            raise FormatError("layer kind must be one byte")
        return cls(
            kind=kind_b[0],
            inner=inner,
            inbound_hop_key=inbound,
            predecessor_id=pred or None,
            predecessor_sig=pred_sig or None,
            next_hop_key=nxt or None,
            chain_sig=chain or None,
        )


@dataclass(frozen=True)
class EncryptedIdentity:
    """An escrowed layer ciphertext carrying a cleartext kind tag.

    The tag tells the decrypting committee whether a ciphertext is the
    innermost (entry) layer, whose shares must go to the requesting
    authority instead of being combined in-house.  It is set by the layer's
    builder and covered by the forwarding signature over the ciphertext
    bytes, so downstream tampering breaks the chain; a builder lying about
    its own tag is caught when the decrypted layer's kind disagrees.
    Nesting depth is already visible from ciphertext lengths, so the tag
    reveals nothing new to relays handling it.
    """

    kind: int
    ciphertext: HybridCiphertext
    digest: bytes

    def to_bytes(self) -> bytes:
        return bytes([self.kind]) + self.ciphertext.to_bytes()

    @classmethod
    def seal(
        cls, pk: ThresholdPublicKey, layer: IdentityLayer, rng: Rng | None = None
    ) -> "EncryptedIdentity":
        ct = threshold_encrypt(pk, layer.to_bytes(), rng)
        tagged = bytes([layer.kind]) + ct.to_bytes()
        return cls(kind=layer.kind, ciphertext=ct, digest=hash_digest(tagged))

    @classmethod
    def from_ciphertext_bytes(cls, data: bytes, modulus_bytes: int) -> "EncryptedIdentity":
        if not data or data[0] not in (LAYER_ENTRY, LAYER_MIDDLE, LAYER_EXIT):
            raise FormatError("identity ciphertext lacks a valid kind tag")
        ct = HybridCiphertext.from_bytes(data[1:], modulus_bytes)
        return cls(kind=data[0], ciphertext=ct, digest=hash_digest(data))


@dataclass(frozen=True)
class AuthBundle:
    """What relay n forwards to relay n+1 alongside the client's sealed payload."""

    inner_identity: bytes  # this relay's layer ciphertext, canonical bytes
    hop_key: bytes  # the next inbound hop key the client handed this relay
    relay_id_key: bytes
    relay_listed: bool
    bridge_certificate: bytes | None
    signature: bytes

    def to_bytes(self) -> bytes:
        return encode_fields(
            self.inner_identity,
            self.hop_key,
            self.relay_id_key,
            b"\x01" if self.relay_listed else b"\x00",
            self.bridge_certificate or b"",
            self.signature,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "AuthBundle":
        inner, hop, rid, listed, bridge, sig = decode_fields(data, 6)
        if len(listed) != 1:
            raise FormatError("listed flag must be one byte")
        return cls(
            inner_identity=inner,
            hop_key=hop,
            relay_id_key=rid,
            relay_listed=listed == b"\x01",
            bridge_certificate=bridge or None,
            signature=sig,
        )


def bundle_signing_payload(inner_identity: bytes, hop_key: bytes, relay_id_key: bytes) -> bytes:
    return encode_fields(inner_identity, hop_key, relay_id_key)


# ---------------------------------------------------------------------------
# per-hop channel


class HopChannel:
    """Symmetric per-hop stream channel with independent direction counters.

    Both endpoints advance their counters in lockstep because link delivery is
    reliable and ordered; the stream cipher keeps onion layers size-preserving.
    """

    def __init__(self, key: bytes):
        if len(key) != 32:
            raise ParameterError("channel key must be 32 bytes")
        self.key = key
        self._fwd = 0
        self._bwd = 0

    def _turn(self, tag: bytes, counter: int, data: bytes) -> bytes:
        nonce = hash_digest(tag + encode_u64(counter))[:16]
        return stream_xor(self.key, nonce, data)

    def wrap_forward(self, data: bytes) -> bytes:
        out = self._turn(b"fwd", self._fwd, data)
        self._fwd += 1
        return out

    unwrap_forward = wrap_forward  # XOR stream: same transform both ways

    def wrap_backward(self, data: bytes) -> bytes:
        out = self._turn(b"bwd", self._bwd, data)
        self._bwd += 1
        return out

    unwrap_backward = wrap_backward

    def peek_backward(self, data: bytes) -> bytes:
        """Apply the next backward stream without advancing; pair with
        commit_backward once the unwrap depth is known."""
        return self._turn(b"bwd", self._bwd, data)

    def commit_backward(self) -> None:
        self._bwd += 1


def frame_recognized(body: bytes) -> bytes:
    """Prefix a short digest so the addressed hop can recognize its payloads."""
    return hash_digest(body)[:_RECOG_LEN] + body


def try_unframe(data: bytes) -> bytes | None:
    if len(data) < _RECOG_LEN:
        return None
    body = data[_RECOG_LEN:]
    if hash_digest(body)[:_RECOG_LEN] == data[:_RECOG_LEN]:
        return body
    return None


# ---------------------------------------------------------------------------
# client side


@dataclass
class ClientCircuit:
    circuit_id: int
    path: list[RelayIdentity]
    cert: TemporalIpCertificate
    hop_keys: list[SigningKeyPair]
    channels: list[HopChannel]
    seldom: bool = True
    established: int = 0
    id_digest: bytes | None = None  # H of the exit layer, returned at completion
    failed: str | None = None
    rounds_per_hop: list[int] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.path)

    @property
    def complete(self) -> bool:
        return self.established == len(self.path) and self.failed is None

    @property
    def identification_key(self) -> SigningKeyPair:
        """The last hop key, under which flow records are signed."""
        return self.hop_keys[-1]


def client_begin_circuit(
    cert: TemporalIpCertificate,
    cert_key: SigningKeyPair,
    path: Sequence[RelayIdentity],
    circuit_id: int,
    rng: Rng | None = None,
    extra_padding: int = 0,
    seldom: bool = True,
    reuse_hop_key: SigningKeyPair | None = None,
) -> tuple[list[Cell], ClientCircuit]:
    """First hop: confidentially hand the entry relay the certificate, a fresh
    second hop key, and the chain signature binding them."""
    if len(path) < 2:
        raise ParameterError("a circuit needs at least two hops")
    rng = ensure_rng(rng)
    entry = path[0]
    chan_key = rng.randbytes(32)
    if seldom:
        k2 = reuse_hop_key if reuse_hop_key is not None else SigningKeyPair.generate(rng)
        chain = sign(cert_key, k2.public)
        inner = encode_fields(
            chan_key, cert.to_bytes(), k2.public, chain, rng.randbytes(extra_padding)
        )
        hop_keys = [cert_key, k2]
    else:
        inner = encode_fields(chan_key, b"", b"", b"", rng.randbytes(extra_padding))
        hop_keys = [cert_key]
    sealed = seal_to(entry.channel_key, inner, rng)
    create_blob = encode_fields(b"", sealed)  # empty bundle field marks the entry position
    cells = package_create(circuit_id, create_blob)
    circuit = ClientCircuit(
        circuit_id=circuit_id,
        path=list(path),
        cert=cert,
        hop_keys=hop_keys,
        channels=[HopChannel(chan_key)],
        seldom=seldom,
    )
    return cells, circuit


def client_extend(
    circuit: ClientCircuit,
    rng: Rng | None = None,
    extra_padding: int = 0,
    reuse_prev_hop_key: bool = False,
    next_key: SigningKeyPair | None = None,
) -> list[Cell]:
    """Extend to the next relay on the path through the established hops.

    next_key, when given, is used as the freshly chained hop key instead of
    generating one; probing authorities pre-commit to the identification key
    this way.
    """
    rng = ensure_rng(rng)
    target = circuit.established
    if target < 1:
        raise PreconditionError("entry hop not established yet")
    if target >= circuit.length:
        raise PreconditionError("circuit already fully established")
    next_relay = circuit.path[target]
    final = target == circuit.length - 1
    chan_key = rng.randbytes(32)
    new_key: SigningKeyPair | None = None
    if circuit.seldom and not final:
        if next_key is not None:
            new_key = next_key
        elif reuse_prev_hop_key:
            new_key = circuit.hop_keys[-1]
        else:
            new_key = SigningKeyPair.generate(rng)
        chain = sign(circuit.hop_keys[-1], new_key.public)
        inner = encode_fields(chan_key, new_key.public, chain, rng.randbytes(extra_padding))
    elif circuit.seldom:
        inner = encode_fields(chan_key, b"", b"", rng.randbytes(extra_padding))
    else:
        # without identity escrow there is no bundle, so the blob must parse
        # like an entry create (empty certificate slot)
        inner = encode_fields(chan_key, b"", b"", b"", rng.randbytes(extra_padding))
    sealed = seal_to(next_relay.channel_key, inner, rng)
    body = encode_fields(next_relay.relay_id_key, sealed)
    blob = frame_recognized(body)
    cells = package_create(circuit.circuit_id, blob, first_command=CellCommand.EXTEND2)
    wrapped = []
    for cell in cells:
        data = cell.payload
        for ch in reversed(circuit.channels[: circuit.established]):
            data = ch.wrap_forward(data)
        wrapped.append(Cell(cell.circuit_id, cell.command, data, seq=cell.seq))
    circuit.channels.append(HopChannel(chan_key))
    if new_key is not None:
        circuit.hop_keys.append(new_key)
    return wrapped


def client_absorb_ack(
    circuit: ClientCircuit, cells: list[Cell], expect: str
) -> tuple[bool, bytes]:
    """Digest a response burst; `expect` is "extend" during establishment
    (covers the entry create as well) or "flow" for opened connections.
    Returns (accepted, payload); an extend refusal marks the circuit failed."""
    acks = [c for c in cells if c.command in (CellCommand.EXTENDED2, CellCommand.RELAY)]
    if len(acks) != 1:
        raise IncompleteError(f"expected one ack cell, got {len(acks)}")
    raw = acks[0].payload
    # a refusal from an already-established hop (e.g. it could not route the
    # extension) carries one wrap fewer than an answer from the new hop
    if expect == "extend":
        depths = [circuit.established + 1, circuit.established]
    else:
        depths = [circuit.established]
    parsed = None
    for depth in depths:
        data = raw
        for ch in circuit.channels[:depth]:
            data = ch.peek_backward(data)
        try:
            (status, payload), _ = decode_fields_prefix(data, 2)
        except FormatError:
            continue
        if status in (_ACK_OK, _ACK_REFUSED):
            parsed = (status, payload)
            for ch in circuit.channels[:depth]:
                ch.commit_backward()
            break
    if parsed is None:
        circuit.failed = "garbled_ack"
        return False, b""
    status, payload = parsed
    if status != _ACK_OK:
        if expect == "extend":
            circuit.failed = payload.decode(errors="replace") or "refused"
        return False, payload
    if expect == "extend":
        circuit.established += 1
        if circuit.established == circuit.length and circuit.seldom:
            if len(payload) != 32:
                raise FormatError("completion ack must carry the identity digest")
            circuit.id_digest = payload
    return True, payload


def client_open_flow(
    circuit: ClientCircuit,
    dest_ip: str,
    dest_port: int,
    now_s: int,
    rng: Rng | None = None,
    sign_flow: bool = True,
) -> tuple[list[Cell], FlowRecord]:
    """First cell of a new connection: flow record plus the client's signature
    binding it to this circuit's escrowed identity."""
    if not circuit.complete:
        raise PreconditionError("circuit not established")
    rng = ensure_rng(rng)
    record = FlowRecord(
        dest_ip=dest_ip,
        dest_port=dest_port,
        exit_ip=circuit.path[-1].ip,
        timestamp=now_s,
    )
    if circuit.seldom and sign_flow:
        signature = client_sign_flow(circuit.identification_key, record, circuit.id_digest)
    else:
        signature = b""
    body = encode_fields(b"open", record.to_bytes(), signature)
    body += bytes(PAYLOAD_SIZE - _RECOG_LEN - len(body))  # constant-size relay cells
    data = frame_recognized(body)
    for ch in reversed(circuit.channels[: circuit.established]):
        data = ch.wrap_forward(data)
    return [Cell(circuit.circuit_id, CellCommand.RELAY, data)], record


# ---------------------------------------------------------------------------
# relay side


@dataclass
class RelayFlags:
    """Adversarial knobs; every default is honest behavior."""

    skip_ip_check: bool = False
    substitute_cert: bytes | None = None
    corrupt_stored_pred_sig: bool = False
    wrong_chain_key: bool = False
    leak_cert_to: str | None = None


@dataclass
class RelayCircuit:
    prev_party: str
    prev_circuit_id: int
    channel: HopChannel
    role: str  # "entry" | "middle" | "exit" | "plain"
    identity: EncryptedIdentity | None = None
    next_key: bytes | None = None  # hop key the client handed us for the next layer
    inbound_key: bytes | None = None  # exit only: the client identification key
    next_party: str | None = None
    next_circuit_id: int | None = None
    source_ip: str | None = None


@dataclass
class Directive:
    to_party: str
    cells: list[Cell]
    note: str = ""
    oob_fields: list[tuple[str, str, bytes]] | None = None  # out-of-band leaks


@dataclass
class HandleResult:
    observations: list[tuple[str, str, bytes]]
    directives: list[Directive]
    events: list[dict]


class RelayNode:
    """Per-relay protocol state machine; one instance per relay party."""

    def __init__(
        self,
        party_id: str,
        identity: RelayIdentity,
        id_key: SigningKeyPair,
        channel_kp: ChannelKeyPair,
        directory: Directory,
        consortium_pk: ThresholdPublicKey | None,
        trusted_ca_keys: dict[str, bytes],
        rng: Rng,
        max_cert_age: int = 24 * 3600,
        flags: RelayFlags | None = None,
        seldom: bool = True,
    ):
        self.party_id = party_id
        self.identity = identity
        self.id_key = id_key
        self.channel_kp = channel_kp
        self.directory = directory
        self.consortium_pk = consortium_pk
        self.trusted_ca_keys = trusted_ca_keys
        self.rng = rng
        self.max_cert_age = max_cert_age
        self.flags = flags or RelayFlags()
        self.seldom = seldom
        self.circuits: dict[tuple[str, int], RelayCircuit] = {}
        self._by_next: dict[tuple[str, int], tuple[str, int]] = {}
        self._next_cid = 1
        self.exit_store = None  # attached by the harness for exits
        self.events: list[dict] = []

    # -- helpers

    def _alloc_cid(self) -> int:
        cid = self._next_cid
        self._next_cid += 1
        return cid

    def _refuse(self, from_party: str, cid: int, circ: RelayCircuit | None, reason: str) -> HandleResult:
        event = {"event": "refusal", "reason": reason, "from": from_party}
        self.events.append(event)
        body = encode_fields(_ACK_REFUSED, reason.encode())
        if circ is not None:
            body = circ.channel.wrap_backward(body)
        cell = Cell(cid, CellCommand.EXTENDED2, body)
        return HandleResult(
            observations=[],
            directives=[Directive(to_party=from_party, cells=[cell], note="refusal")],
            events=[event],
        )

    def _ack_burst(self, cid: int, circ: RelayCircuit, payload: bytes) -> list[Cell]:
        body = circ.channel.wrap_backward(encode_fields(_ACK_OK, payload))
        return [
            Cell(cid, CellCommand.CREATED2, b""),  # early ack upon the first cell
            Cell(cid, CellCommand.EXTENDED2, body),
        ]

    # -- message entry point

    def handle_message(
        self, from_party: str, cells: list[Cell], source_ip: str, now_ms: int
    ) -> HandleResult:
        if not cells:
            raise ProtocolError("empty burst")
        cmd = cells[0].command
        if cmd == CellCommand.CREATE2:
            return self._handle_create(from_party, cells, source_ip, now_ms)
        if (from_party, cells[0].circuit_id) in self._by_next:
            # response from the next hop, heading back toward the client
            return self._handle_backward(from_party, cells)
        if cmd in (CellCommand.EXTEND2, CellCommand.RELAY):
            return self._handle_forward(from_party, cells, now_ms)
        raise ProtocolError(f"unexpected burst command {cmd}")

    # -- create (this relay is being added to a circuit)

    def _handle_create(
        self, from_party: str, cells: list[Cell], source_ip: str, now_ms: int
    ) -> HandleResult:
        cid = cells[0].circuit_id
        try:
            blob = unpack_create(cells)
            bundle_b, sealed = decode_fields(blob, 2)
            inner = open_sealed(self.channel_kp, sealed)
        except ProtocolError as exc:
            return self._refuse(from_party, cid, None, f"malformed_create:{exc}")
        obs: list[tuple[str, str, bytes]] = [("sealed_blob", "create_sealed", sealed)]
        if not bundle_b:
            return self._entry_handle_create(from_party, cid, inner, source_ip, now_ms, obs)
        return self._extension_handle_create(from_party, cid, bundle_b, inner, obs)

    def _entry_handle_create(
        self,
        from_party: str,
        cid: int,
        inner: bytes,
        source_ip: str,
        now_ms: int,
        obs: list[tuple[str, str, bytes]],
    ) -> HandleResult:
        try:
            chan_key, cert_b, next_key, chain, _pad = decode_fields(inner, 5)
        except FormatError as exc:
            return self._refuse(from_party, cid, None, f"malformed_entry:{exc}")
        circ = RelayCircuit(
            prev_party=from_party,
            prev_circuit_id=cid,
            channel=HopChannel(chan_key),
            role="plain",
            source_ip=source_ip,
        )
        events: list[dict] = []
        directives: list[Directive] = []
        if cert_b:
            try:
                cert = TemporalIpCertificate.from_bytes(cert_b)
            except FormatError:
                return self._refuse(from_party, cid, circ, "bad_certificate")
            if not verify_certificate(
                cert, self.trusted_ca_keys, now_ms // 1000, self.max_cert_age
            ):
                return self._refuse(from_party, cid, circ, "bad_certificate")
            if len(next_key) != 32 or not verify(cert.client_public_key, next_key, chain):
                return self._refuse(from_party, cid, circ, "bad_chain_sig")
            if source_ip != cert.client_ip and not self.flags.skip_ip_check:
                return self._refuse(from_party, cid, circ, "ip_mismatch")
            stored_cert_b = cert_b
            stored_inbound = cert.client_public_key
            if self.flags.substitute_cert is not None:
                stored_cert_b = self.flags.substitute_cert
                stored_inbound = TemporalIpCertificate.from_bytes(
                    stored_cert_b
                ).client_public_key
            layer = IdentityLayer(
                kind=LAYER_ENTRY,
                inner=stored_cert_b,
                inbound_hop_key=stored_inbound,
                next_hop_key=next_key,
                chain_sig=chain,
            )
            identity = EncryptedIdentity.seal(self.consortium_pk, layer, self.rng)
            circ.role = "entry"
            circ.identity = identity
            circ.next_key = next_key
            obs += [
                ("certificate", "client_cert", cert_b),
                ("hop_key", "inbound", cert.client_public_key),
                ("hop_key", "next", next_key),
                ("chain_sig", "chain", chain),
                ("encrypted_identity", "built", identity.to_bytes()),
            ]
            events.append(
                {
                    "event": "entry_created",
                    "source_ip": source_ip,
                    "certified_ip": cert.client_ip,
                    "digest": identity.digest,
                }
            )
            if self.flags.leak_cert_to is not None:
                directives.append(
                    Directive(
                        to_party=self.flags.leak_cert_to,
                        cells=[],
                        note="oob_leak",
                        oob_fields=[("certificate", "leaked_cert", cert_b)],
                    )
                )
        self.circuits[(from_party, cid)] = circ
        directives.insert(
            0, Directive(to_party=from_party, cells=self._ack_burst(cid, circ, b""), note="ack")
        )
        self.events.extend(events)
        return HandleResult(observations=obs, directives=directives, events=events)

    def _extension_handle_create(
        self,
        from_party: str,
        cid: int,
        bundle_b: bytes,
        inner: bytes,
        obs: list[tuple[str, str, bytes]],
    ) -> HandleResult:
        try:
            bundle = AuthBundle.from_bytes(bundle_b)
            chan_key, new_key, chain, _pad = decode_fields(inner, 4)
        except FormatError as exc:
            return self._refuse(from_party, cid, None, f"malformed_extension:{exc}")
        circ = RelayCircuit(
            prev_party=from_party,
            prev_circuit_id=cid,
            channel=HopChannel(chan_key),
            role="plain",
        )
        payload = bundle_signing_payload(
            bundle.inner_identity, bundle.hop_key, bundle.relay_id_key
        )
        if not verify(bundle.relay_id_key, payload, bundle.signature):
            return self._refuse(from_party, cid, circ, "bad_bundle_sig")
        if not self.directory.identity_known(
            bundle.relay_id_key, bundle.relay_listed, bundle.bridge_certificate
        ):
            return self._refuse(from_party, cid, circ, "unknown_predecessor")
        obs += [
            ("encrypted_identity", "inner", bundle.inner_identity),
            ("hop_key", "inbound", bundle.hop_key),
            ("layer_sig", "pred_sig", bundle.signature),
        ]
        events: list[dict] = []
        if new_key:
            # middle position: the client chained a fresh key for the hop after us
            if not verify(bundle.hop_key, new_key, chain):
                return self._refuse(from_party, cid, circ, "bad_chain_sig")
            stored_sig = bundle.signature
            if self.flags.corrupt_stored_pred_sig:
                stored_sig = bytes([stored_sig[0] ^ 1]) + stored_sig[1:]
            stored_next = new_key
            if self.flags.wrong_chain_key:
                stored_next = SigningKeyPair.generate(self.rng).public
            layer = IdentityLayer(
                kind=LAYER_MIDDLE,
                inner=bundle.inner_identity,
                inbound_hop_key=bundle.hop_key,
                predecessor_id=bundle.relay_id_key,
                predecessor_sig=stored_sig,
                next_hop_key=stored_next,
                chain_sig=chain,
            )
            identity = EncryptedIdentity.seal(self.consortium_pk, layer, self.rng)
            circ.role = "middle"
            circ.identity = identity
            circ.next_key = new_key
            ack_payload = b""
            obs += [
                ("hop_key", "next", new_key),
                ("chain_sig", "chain", chain),
                ("encrypted_identity", "built", identity.to_bytes()),
            ]
            events.append({"event": "middle_created", "digest": identity.digest})
        else:
            stored_sig = bundle.signature
            if self.flags.corrupt_stored_pred_sig:
                stored_sig = bytes([stored_sig[0] ^ 1]) + stored_sig[1:]
            layer = IdentityLayer(
                kind=LAYER_EXIT,
                inner=bundle.inner_identity,
                inbound_hop_key=bundle.hop_key,
                predecessor_id=bundle.relay_id_key,
                predecessor_sig=stored_sig,
            )
            identity = EncryptedIdentity.seal(self.consortium_pk, layer, self.rng)
            circ.role = "exit"
            circ.identity = identity
            circ.inbound_key = bundle.hop_key
            if self.exit_store is not None:
                self.exit_store.register_circuit(
                    (from_party, cid),
                    identity.digest,
                    identity.to_bytes(),
                    bundle.hop_key,
                )
            ack_payload = identity.digest
            obs += [
                ("encrypted_identity", "built", identity.to_bytes()),
                ("identity_digest", "built", identity.digest),
            ]
            events.append({"event": "exit_created", "digest": identity.digest})
        self.circuits[(from_party, cid)] = circ
        self.events.extend(events)
        return HandleResult(
            observations=obs,
            directives=[
                Directive(to_party=from_party, cells=self._ack_burst(cid, circ, ack_payload))
            ],
            events=events,
        )

    # -- forward direction (from the client side of the circuit)

    def _handle_forward(
        self, from_party: str, cells: list[Cell], now_ms: int
    ) -> HandleResult:
        cid = cells[0].circuit_id
        circ = self.circuits.get((from_party, cid))
        if circ is None:
            return self._refuse(from_party, cid, None, "unknown_circuit")
        stripped = [circ.channel.unwrap_forward(c.payload) for c in cells]
        cmd = cells[0].command
        obs: list[tuple[str, str, bytes]] = []
        if cmd == CellCommand.EXTEND2:
            body = None
            try:
                rebuilt = [
                    Cell(c.circuit_id, c.command, data, seq=c.seq)
                    for c, data in zip(cells, stripped)
                ]
                blob = unpack_create(rebuilt)
                body = try_unframe(blob)
            except ProtocolError:
                body = None
            if body is not None:
                return self._handle_extend_request(from_party, cid, circ, body, obs)
        elif cmd == CellCommand.RELAY:
            body = try_unframe(stripped[0])
            if body is not None:
                return self._handle_relay_payload(from_party, cid, circ, body, now_ms, obs)
        # not addressed to us: pass one layer down the circuit
        if circ.next_party is None:
            return self._refuse(from_party, cid, circ, "no_next_hop")
        fwd = [
            Cell(circ.next_circuit_id, c.command, data, seq=c.seq)
            for c, data in zip(cells, stripped)
        ]
        obs.append(("sealed_blob", "onion_forwarded", b"".join(stripped)))
        return HandleResult(
            observations=obs,
            directives=[Directive(to_party=circ.next_party, cells=fwd, note="forward")],
            events=[],
        )

    def _handle_extend_request(
        self,
        from_party: str,
        cid: int,
        circ: RelayCircuit,
        body: bytes,
        obs: list[tuple[str, str, bytes]],
    ) -> HandleResult:
        try:
            next_key_id, sealed = decode_fields(body, 2)
        except FormatError as exc:
            return self._refuse(from_party, cid, circ, f"malformed_extend:{exc}")
        next_party = self.directory.route(next_key_id)
        if next_party is None:
            return self._refuse(from_party, cid, circ, "unknown_next_relay")
        obs.append(("sealed_blob", "extend_sealed", sealed))
        if self.seldom and circ.identity is not None:
            bundle = self.relay_extend(circ)
            bundle_b = bundle.to_bytes()
            self.events.append(
                {
                    "event": "bundle_sent",
                    "signature": bundle.signature,
                    "hop_key": bundle.hop_key,
                    "inner": bundle.inner_identity,
                }
            )
        else:
            bundle_b = b""
        create_blob = encode_fields(bundle_b, sealed)
        ncid = self._alloc_cid()
        circ.next_party = next_party
        circ.next_circuit_id = ncid
        self._by_next[(next_party, ncid)] = (from_party, cid)
        out = package_create(ncid, create_blob)
        return HandleResult(
            observations=obs,
            directives=[Directive(to_party=next_party, cells=out, note="extend_create")],
            events=[],
        )

    def relay_extend(self, circ: RelayCircuit) -> AuthBundle:
        """Authentication bundle for the next relay: our layer ciphertext, the
        hop key the client chained to us, our identity, and our signature."""
        inner = circ.identity.to_bytes()
        payload = bundle_signing_payload(inner, circ.next_key, self.identity.relay_id_key)
        return AuthBundle(
            inner_identity=inner,
            hop_key=circ.next_key,
            relay_id_key=self.identity.relay_id_key,
            relay_listed=self.identity.listed,
            bridge_certificate=self.identity.bridge_certificate,
            signature=sign(self.id_key, payload),
        )

    def _handle_relay_payload(
        self,
        from_party: str,
        cid: int,
        circ: RelayCircuit,
        body: bytes,
        now_ms: int,
        obs: list[tuple[str, str, bytes]],
    ) -> HandleResult:
        try:
            (op, record_b, signature), _ = decode_fields_prefix(body, 3)
        except FormatError as exc:
            return self._refuse(from_party, cid, circ, f"malformed_relay:{exc}")
        if op != b"open":
            return self._refuse(from_party, cid, circ, "unknown_relay_op")
        obs += [("flow_record", "record", record_b), ("flow_sig", "signature", signature)]
        events: list[dict] = []
        if self.seldom and circ.role == "exit" and self.exit_store is not None:
            envelope, reason = self.exit_store.accept_flow(
                (from_party, cid), FlowRecord.from_bytes(record_b), signature
            )
            if envelope is None:
                events.append({"event": "flow_refused", "reason": reason})
                self.events.extend(events)
                body_out = circ.channel.wrap_backward(
                    encode_fields(_ACK_REFUSED, reason.encode())
                )
                return HandleResult(
                    observations=obs,
                    directives=[
                        Directive(
                            to_party=from_party,
                            cells=[Cell(cid, CellCommand.RELAY, body_out)],
                        )
                    ],
                    events=events,
                )
            events.append({"event": "flow_accepted", "record": record_b})
        else:
            events.append({"event": "flow_opened_plain"})
        self.events.extend(events)
        body_out = circ.channel.wrap_backward(encode_fields(_ACK_OK, b""))
        return HandleResult(
            observations=obs,
            directives=[
                Directive(to_party=from_party, cells=[Cell(cid, CellCommand.RELAY, body_out)])
            ],
            events=events,
        )

    # -- backward direction (responses travelling toward the client)

    def _handle_backward(self, from_party: str, cells: list[Cell]) -> HandleResult:
        cid = cells[0].circuit_id
        prev = self._by_next.get((from_party, cid))
        if prev is None:
            return HandleResult(observations=[], directives=[], events=[])
        circ = self.circuits[prev]
        out: list[Cell] = []
        obs: list[tuple[str, str, bytes]] = []
        for cell in cells:
            if cell.command == CellCommand.CREATED2:
                continue  # early ack is link-local
            wrapped = circ.channel.wrap_backward(cell.payload)
            obs.append(("sealed_blob", "onion_backward", cell.payload))
            out.append(Cell(circ.prev_circuit_id, cell.command, wrapped, seq=cell.seq))
        directives = (
            [Directive(to_party=circ.prev_party, cells=out, note="backward")] if out else []
        )
        return HandleResult(observations=obs, directives=directives, events=[])

    def close_circuit(self, key: tuple[str, int]) -> None:
        circ = self.circuits.get(key)
        if circ is None:
            return
        if circ.role == "exit" and self.exit_store is not None:
            self.exit_store.note_circuit_closed(key)
