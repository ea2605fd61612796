"""Translucent consortium ledger.

A single sequencer orders state transitions into hash-linked blocks. Each
block header publishes a Merkle root over the contract state and a Bloom
filter over the block's event topics, so outsiders can follow activity in
real time (how many cases, which were accepted, which were probes) while the
sensitive payloads (request reasoning, vote maps) stay sealed until a fixed
disclosure delay has passed. Selected state variables can be revealed early
through Merkle proofs without opening anything else.

The voting contract: any law-enforcement party may file a deanonymization
case against a 32-byte record hash; consortium members vote, and the case is
accepted once VOTING_THRESHOLD distinct member votes are in. Votes by
non-members are recorded but never counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .crypto import hash_digest
from .encoding import (
    decode_fields,
    decode_fields_prefix,
    decode_u32,
    decode_u64,
    encode_fields,
    encode_u32,
    encode_u64,
)
from .errors import FormatError, ParameterError, PreconditionError

VOTING_THRESHOLD = 3
DEFAULT_DISCLOSURE_DELAY_S = 90 * 24 * 3600

KIND_NEW_CASE = "NewCase"
KIND_ACCEPTED = "Accepted"
KIND_PROBE_DISCLOSED = "ProbeDisclosed"
KIND_MIGRATION_DIGEST = "MigrationDigest"
EVENT_KINDS = (KIND_NEW_CASE, KIND_ACCEPTED, KIND_PROBE_DISCLOSED, KIND_MIGRATION_DIGEST)

PENDING = -1
ACCEPTED = 0

BLOOM_BYTES = 256
_BLOOM_BITS = BLOOM_BYTES * 8
_BLOOM_PROBES = ((0, 1), (2, 3), (4, 5))  # topic-digest byte pairs -> bit positions


# ---------------------------------------------------------------------------
# events and blooms


@dataclass(frozen=True)
class Event:
    kind: str
    subject: bytes  # case id (8-byte counter) or batch digest
    payload_hash: bytes

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ParameterError(f"unknown event kind {self.kind!r}")

    def topics(self) -> list[bytes]:
        """Kind-only topic plus kind-and-subject topic, both bloom-inserted, so
        filters answer "any event of this kind?" and "this exact subject?"."""
        base = self.kind.encode()
        return [hash_digest(base), hash_digest(base + self.subject)]

    def to_bytes(self) -> bytes:
        return encode_fields(self.kind.encode(), self.subject, self.payload_hash)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Event":
        kind, subject, payload_hash = decode_fields(data, 3)
        return cls(kind=kind.decode(), subject=subject, payload_hash=payload_hash)


def _bloom_positions(topic: bytes) -> list[int]:
    return [
        ((topic[a] << 8) | topic[b]) % _BLOOM_BITS for a, b in _BLOOM_PROBES
    ]


def bloom_build(topics: list[bytes]) -> bytes:
    bits = bytearray(BLOOM_BYTES)
    for topic in topics:
        for pos in _bloom_positions(topic):
            bits[pos // 8] |= 1 << (pos % 8)
    return bytes(bits)


def bloom_contains(bloom: bytes, topic: bytes) -> bool:
    if len(bloom) != BLOOM_BYTES:
        raise FormatError(f"bloom must be {BLOOM_BYTES} bytes")
    return all(bloom[pos // 8] & (1 << (pos % 8)) for pos in _bloom_positions(topic))


def bloom_query(block: "LedgerBlock", kind: str, subject: bytes | None = None) -> bool:
    """Might the block contain an event of this kind (and subject)?
    No false negatives; false positives at the filter's rate."""
    base = kind.encode()
    topic = hash_digest(base) if subject is None else hash_digest(base + subject)
    return bloom_contains(block.event_bloom, topic)


# ---------------------------------------------------------------------------
# Merkle state commitments


def _leaf_digest(key: bytes, value: bytes) -> bytes:
    return hash_digest(b"leaf" + encode_fields(key, value))


def _node_digest(left: bytes, right: bytes) -> bytes:
    return hash_digest(b"node" + left + right)


_EMPTY_LEAF = hash_digest(b"empty-leaf")
_EMPTY_STATE_ROOT = hash_digest(b"empty-state")


def _padded_leaves(state: dict[bytes, bytes]) -> tuple[list[bytes], list[bytes]]:
    """Sorted keys and leaf digests, padded to a power of two."""
    keys = sorted(state)
    leaves = [_leaf_digest(k, state[k]) for k in keys]
    size = 1
    while size < len(leaves):
        size *= 2
    leaves += [_EMPTY_LEAF] * (size - len(leaves))
    return keys, leaves


def merkle_state_root(state: dict[bytes, bytes]) -> bytes:
    if not state:
        return _EMPTY_STATE_ROOT
    _, level = _padded_leaves(state)
    while len(level) > 1:
        level = [_node_digest(level[i], level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def _merkle_path(leaves: list[bytes], index: int) -> list[bytes]:
    path = []
    level = leaves
    while len(level) > 1:
        sibling = index ^ 1
        path.append(level[sibling])
        level = [_node_digest(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        index //= 2
    return path


def _fold_path(leaf: bytes, index: int, path: list[bytes]) -> bytes:
    node = leaf
    for sibling in path:
        if index & 1:
            node = _node_digest(sibling, node)
        else:
            node = _node_digest(node, sibling)
        index //= 2
    return node


@dataclass(frozen=True)
class MerkleStateProof:
    """Selective reveal of contract variables against one block's state root."""

    block_height: int
    proved_pairs: tuple[tuple[bytes, bytes], ...]  # (state key, value)
    paths: tuple[tuple[int, tuple[bytes, ...]], ...]  # per pair: leaf index, siblings

    def to_bytes(self) -> bytes:
        parts = [encode_u64(self.block_height), encode_u32(len(self.proved_pairs))]
        for (key, value), (index, siblings) in zip(self.proved_pairs, self.paths):
            parts.append(
                encode_fields(key, value, encode_u32(index), encode_fields(*siblings))
                if siblings
                else encode_fields(key, value, encode_u32(index), b"")
            )
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MerkleStateProof":
        if len(data) < 12:
            raise FormatError("truncated proof")
        height = decode_u64(data[:8])
        count = decode_u32(data[8:12])
        offset = 12
        pairs = []
        paths = []
        for _ in range(count):
            (key, value, idx_b, sib_blob), used = decode_fields_prefix(data[offset:], 4)
            offset += used
            siblings: list[bytes] = []
            rest = sib_blob
            while rest:
                (sib,), used2 = decode_fields_prefix(rest, 1)
                siblings.append(sib)
                rest = rest[used2:]
            pairs.append((key, value))
            paths.append((decode_u32(idx_b), tuple(siblings)))
        if offset != len(data):
            raise FormatError("trailing bytes after proof")
        return cls(
            block_height=height, proved_pairs=tuple(pairs), paths=tuple(paths)
        )


# ---------------------------------------------------------------------------
# blocks


@dataclass(frozen=True)
class LedgerBlock:
    height: int
    parent_digest: bytes
    state_root: bytes
    event_bloom: bytes
    timestamp: int
    events: tuple[Event, ...]  # sealed until the disclosure delay passes

    def header_bytes(self) -> bytes:
        events_digest = hash_digest(b"".join(e.to_bytes() for e in self.events))
        return encode_fields(
            encode_u64(self.height),
            self.parent_digest,
            self.state_root,
            self.event_bloom,
            encode_u64(self.timestamp),
            events_digest,
        )

    def digest(self) -> bytes:
        return hash_digest(self.header_bytes())

    def to_bytes(self) -> bytes:
        return encode_fields(
            encode_u64(self.height),
            self.parent_digest,
            self.state_root,
            self.event_bloom,
            encode_u64(self.timestamp),
            *[e.to_bytes() for e in self.events],
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "LedgerBlock":
        fields = []
        rest = data
        while rest:
            (item,), used = decode_fields_prefix(rest, 1)
            fields.append(item)
            rest = rest[used:]
        if len(fields) < 5:
            raise FormatError("truncated block")
        return cls(
            height=decode_u64(fields[0]),
            parent_digest=fields[1],
            state_root=fields[2],
            event_bloom=fields[3],
            timestamp=decode_u64(fields[4]),
            events=tuple(Event.from_bytes(f) for f in fields[5:]),
        )


def verify_chain(blocks: list[LedgerBlock]) -> bool:
    parent = bytes(32)
    for height, block in enumerate(blocks):
        if block.height != height or block.parent_digest != parent:
            return False
        parent = block.digest()
    return True


# ---------------------------------------------------------------------------
# cases and the ledger


@dataclass
class Case:
    case_id: int
    record_hash: bytes
    filer: str
    reasoning: str
    accepted: int = PENDING
    votes: dict[str, bool] = field(default_factory=dict)
    probe_marked: bool = False
    created_at: int | None = None  # timestamp of the block sealing its NewCase event
    disclosure_extended: bool = False


@dataclass(frozen=True)
class DisclosureView:
    as_of: int
    delay: int
    items: tuple[dict, ...]


def _accepted_value(accepted: int) -> bytes:
    return accepted.to_bytes(8, "big", signed=True)


def case_state_key(case_id: int, variable: str) -> bytes:
    if variable not in ("record_hash", "accepted", "probe"):
        raise ParameterError(f"unknown state variable {variable!r}")
    return f"case/{case_id}/{variable}".encode()


class ConsortiumLedger:
    """Contract state, vote counting, block production, proofs, disclosure."""

    def __init__(
        self,
        members: list[str],
        voting_threshold: int = VOTING_THRESHOLD,
        disclosure_delay_s: int = DEFAULT_DISCLOSURE_DELAY_S,
    ):
        if voting_threshold < 1 or voting_threshold > len(members):
            raise ParameterError("voting threshold out of range")
        self.members = list(members)
        self.voting_threshold = voting_threshold
        self.disclosure_delay_s = disclosure_delay_s
        self.cases: dict[int, Case] = {}
        self.next_case_id = 0
        self.state: dict[bytes, bytes] = {}
        self.blocks: list[LedgerBlock] = []
        self._pending_events: list[Event] = []
        self._snapshots: list[dict[bytes, bytes]] = []
        self._migrations: dict[bytes, bytes] = {}  # digest -> exit id key
        self._probe_commitments: dict[bytes, str] = {}  # commitment -> poster
        self._probe_reveals: dict[bytes, bytes] = {}  # commitment -> preimage
        self._probe_voided: set[bytes] = set()

    # -- contract calls

    def request_deanonymization(self, caller: str, record_hash: bytes, reasoning: str) -> int:
        if len(record_hash) != 32:
            raise ParameterError("record hash must be 32 bytes")
        case_id = self.next_case_id
        self.next_case_id += 1
        self.cases[case_id] = Case(
            case_id=case_id, record_hash=record_hash, filer=caller, reasoning=reasoning
        )
        self.state[case_state_key(case_id, "record_hash")] = record_hash
        self.state[case_state_key(case_id, "accepted")] = _accepted_value(PENDING)
        self._pending_events.append(
            Event(KIND_NEW_CASE, encode_u64(case_id), record_hash)
        )
        return case_id

    def vote_in_favor(self, member: str, case_id: int) -> bool:
        case = self.cases.get(case_id)
        if case is None:
            raise ParameterError(f"unknown case {case_id}")
        case.votes[member] = True
        if case.accepted != ACCEPTED:
            counted = sum(
                1 for voter, vote in case.votes.items() if vote and voter in self.members
            )
            if counted >= self.voting_threshold:
                case.accepted = ACCEPTED
                self.state[case_state_key(case_id, "accepted")] = _accepted_value(ACCEPTED)
                self._pending_events.append(
                    Event(KIND_ACCEPTED, encode_u64(case_id), case.record_hash)
                )
        return case.accepted == ACCEPTED

    def announce_migration_digest(self, exit_id: bytes, digest: bytes) -> None:
        if len(digest) != 32:
            raise ParameterError("migration digest must be 32 bytes")
        if digest in self._migrations:
            return  # idempotent
        self._migrations[digest] = exit_id
        self.state[b"migration/" + digest] = exit_id
        self._pending_events.append(
            Event(KIND_MIGRATION_DIGEST, digest, hash_digest(exit_id))
        )

    def migration_digests(self) -> set[bytes]:
        return set(self._migrations)

    def mark_probe(self, prober: str, case_id: int) -> None:
        case = self.cases.get(case_id)
        if case is None:
            raise ParameterError(f"unknown case {case_id}")
        if case.filer != prober:
            raise PreconditionError("only the filer may mark its case as a probe")
        if case.probe_marked:
            return
        case.probe_marked = True
        self.state[case_state_key(case_id, "probe")] = b"\x01"
        self._pending_events.append(
            Event(KIND_PROBE_DISCLOSED, encode_u64(case_id), case.record_hash)
        )

    def post_probe_commitment(self, prober: str, commitment: bytes) -> None:
        """Record a probe commitment before any probe traffic is sent.

        Commitments and reveals are state entries (covered by the block's
        state root), not events: the event vocabulary is fixed, and the
        public announcement of a probe is mark_probe's job."""
        if len(commitment) != 32:
            raise ParameterError("probe commitment must be 32 bytes")
        if commitment in self._probe_commitments:
            raise PreconditionError("probe commitment already posted")
        self._probe_commitments[commitment] = prober
        self.state[b"probe/commit/" + commitment] = prober.encode()

    def void_probe_commitment(self, prober: str, commitment: bytes) -> None:
        """Retire an unused commitment, e.g. after a failed circuit build."""
        poster = self._probe_commitments.get(commitment)
        if poster is None:
            raise ParameterError("unknown probe commitment")
        if poster != prober:
            raise PreconditionError("only the poster may void its commitment")
        if commitment in self._probe_reveals:
            raise PreconditionError("commitment already revealed")
        self._probe_voided.add(commitment)
        self.state[b"probe/void/" + commitment] = b"\x01"

    def post_probe_reveal(self, prober: str, preimage: bytes) -> bytes:
        """Publish a commitment preimage; returns the commitment it opens."""
        commitment = hash_digest(preimage)
        poster = self._probe_commitments.get(commitment)
        if poster is None:
            raise PreconditionError("no posted commitment matches this preimage")
        if poster != prober:
            raise PreconditionError("only the poster may reveal its commitment")
        if commitment in self._probe_voided:
            raise PreconditionError("commitment was voided")
        if commitment in self._probe_reveals:
            return commitment
        self._probe_reveals[commitment] = preimage
        self.state[b"probe/reveal/" + commitment] = preimage
        return commitment

    def probe_commitment_poster(self, commitment: bytes) -> str | None:
        return self._probe_commitments.get(commitment)

    def probe_commitment_voided(self, commitment: bytes) -> bool:
        return commitment in self._probe_voided

    def probe_reveal(self, commitment: bytes) -> bytes | None:
        return self._probe_reveals.get(commitment)

    def revealed_probes(self) -> dict[bytes, bytes]:
        """All opened commitments, keyed by commitment digest."""
        return dict(self._probe_reveals)

    def extend_disclosure(self, case_id: int, approving_members: set[str]) -> None:
        """Unanimous consortium agreement keeps a case sealed past the delay."""
        case = self.cases.get(case_id)
        if case is None:
            raise ParameterError(f"unknown case {case_id}")
        if set(self.members) - set(approving_members):
            raise PreconditionError("disclosure extension requires unanimous approval")
        case.disclosure_extended = True

    # -- blocks

    def produce_block(self, timestamp: int) -> LedgerBlock:
        events = tuple(self._pending_events)
        self._pending_events = []
        topics = [topic for event in events for topic in event.topics()]
        parent = self.blocks[-1].digest() if self.blocks else bytes(32)
        block = LedgerBlock(
            height=len(self.blocks),
            parent_digest=parent,
            state_root=merkle_state_root(self.state),
            event_bloom=bloom_build(topics),
            timestamp=timestamp,
            events=events,
        )
        for event in events:
            if event.kind == KIND_NEW_CASE:
                case = self.cases[decode_u64(event.subject)]
                if case.created_at is None:
                    case.created_at = timestamp
        self.blocks.append(block)
        self._snapshots.append(dict(self.state))
        return block

    # -- proofs

    def prove_state(
        self,
        case_id: int,
        keys: tuple[str, ...] = ("record_hash", "accepted"),
        height: int | None = None,
    ) -> MerkleStateProof:
        if case_id not in self.cases:
            raise ParameterError(f"unknown case {case_id}")
        for key in keys:
            if key not in ("record_hash", "accepted"):
                raise ParameterError(f"unknown state key {key!r}")
        if height is None:
            height = len(self.blocks) - 1
        if not 0 <= height < len(self.blocks):
            raise ParameterError("no block at that height")
        snapshot = self._snapshots[height]
        sorted_keys, leaves = _padded_leaves(snapshot)
        pairs = []
        paths = []
        for key in keys:
            state_key = case_state_key(case_id, key)
            if state_key not in snapshot:
                raise PreconditionError("case not in state at that height")
            index = sorted_keys.index(state_key)
            pairs.append((state_key, snapshot[state_key]))
            paths.append((index, tuple(_merkle_path(leaves, index))))
        return MerkleStateProof(
            block_height=height, proved_pairs=tuple(pairs), paths=tuple(paths)
        )

    # -- views

    def stats_line(self) -> str:
        accepted = sum(1 for c in self.cases.values() if c.accepted == ACCEPTED)
        probes = sum(1 for c in self.cases.values() if c.probe_marked)
        return f"cases={len(self.cases)} accepted={accepted} probes={probes}"

    def public_view(self) -> dict:
        """What anyone can see before disclosure: block headers, event kinds,
        case skeletons, probe markers. Never reasoning or vote maps."""
        return {
            "blocks": [
                {
                    "height": b.height,
                    "digest": b.digest().hex(),
                    "parent": b.parent_digest.hex(),
                    "state_root": b.state_root.hex(),
                    "timestamp": b.timestamp,
                    "event_kinds": [e.kind for e in b.events],
                }
                for b in self.blocks
            ],
            "cases": [
                {
                    "case_id": c.case_id,
                    "record_hash": c.record_hash.hex(),
                    "accepted": c.accepted,
                    "probe": c.probe_marked,
                }
                for c in self.cases.values()
            ],
            "migration_digests": sorted(d.hex() for d in self._migrations),
            "stats": self.stats_line(),
        }

    def disclose(self, now: int) -> DisclosureView:
        items = []
        for case in self.cases.values():
            sealed_reason = None
            open_now = (
                case.created_at is not None
                and case.created_at <= now - self.disclosure_delay_s
            )
            if case.disclosure_extended:
                open_now = False
                sealed_reason = "unanimous extension"
            elif not open_now:
                sealed_reason = "within delay"
            item = {
                "case_id": case.case_id,
                "record_hash": case.record_hash.hex(),
                "accepted": case.accepted,
                "probe": case.probe_marked,
                "disclosed": open_now,
            }
            if open_now:
                item["reasoning"] = case.reasoning
                item["votes"] = dict(case.votes)
                item["filer"] = case.filer
            else:
                item["sealed_reason"] = sealed_reason
            items.append(item)
        return DisclosureView(
            as_of=now, delay=self.disclosure_delay_s, items=tuple(items)
        )


def verify_state_proof(block: LedgerBlock, proof: MerkleStateProof) -> bool:
    """Check a selective state reveal against a block header. True iff every
    proved (key, value) pair folds to the block's committed state root."""
    if proof.block_height != block.height:
        return False
    if len(proof.proved_pairs) != len(proof.paths) or not proof.proved_pairs:
        return False
    for (key, value), (index, siblings) in zip(proof.proved_pairs, proof.paths):
        if index >= (1 << len(siblings)):  # canonical index range for this depth
            return False
        if _fold_path(_leaf_digest(key, value), index, list(siblings)) != block.state_root:
            return False
    return True
