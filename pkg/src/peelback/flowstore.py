"""Flow records, exit-side envelope storage, and government databases.

Every new connection through an exit produces a small flow record (where to,
from which exit, when). The exit stores each record next to a sealed pointer
at the circuit's escrowed identity: the pointer is encrypted under the exit's
own long-lived key, so database operators can search the plaintext metadata
but cannot link flows to circuits, or flows of one circuit to each other,
without the exit's cooperation.

Exits upload in batches: a compressed archive of envelopes plus the referenced
encrypted identities, its digest announced on the ledger so databases can
audit completeness and mirror one another.
"""

from __future__ import annotations

import ipaddress
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .crypto import (
    SigningKeyPair,
    hash_digest,
    sign,
    symmetric_decrypt,
    symmetric_encrypt,
    verify,
)
from .encoding import (
    decode_fields,
    decode_fields_prefix,
    decode_u16,
    decode_u32,
    decode_u64,
    encode_fields,
    encode_u16,
    encode_u32,
    encode_u64,
)
from .errors import (
    FormatError,
    IntegrityError,
    ParameterError,
    PreconditionError,
)
from .rng import Rng, ensure_rng

DEFAULT_RETENTION_S = 2 * 365 * 24 * 3600  # two years


def _pack_ip(ip: str) -> bytes:
    return ipaddress.ip_address(ip).packed


def _unpack_ip(data: bytes) -> str:
    if len(data) not in (4, 16):
        raise FormatError(f"packed IP must be 4 or 16 bytes, got {len(data)}")
    return str(ipaddress.ip_address(data))


@dataclass(frozen=True)
class FlowRecord:
    """Searchable plaintext part of one stored connection."""

    dest_ip: str
    dest_port: int
    exit_ip: str
    timestamp: int  # unix seconds, the exit's clock at connection time

    def __post_init__(self):
        _pack_ip(self.dest_ip)
        _pack_ip(self.exit_ip)
        if not 0 <= self.dest_port < 2**16:
            raise ParameterError(f"port out of range: {self.dest_port}")
        if self.timestamp < 0:
            raise ParameterError("timestamp must be non-negative")

    def to_bytes(self) -> bytes:
        return encode_fields(
            _pack_ip(self.dest_ip),
            encode_u16(self.dest_port),
            _pack_ip(self.exit_ip),
            encode_u64(self.timestamp),
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "FlowRecord":
        dest, port, exit_ip, ts = decode_fields(data, 4)
        return cls(
            dest_ip=_unpack_ip(dest),
            dest_port=decode_u16(port),
            exit_ip=_unpack_ip(exit_ip),
            timestamp=decode_u64(ts),
        )


def flow_signing_payload(record: FlowRecord, identity_digest: bytes) -> bytes:
    return encode_fields(record.to_bytes(), identity_digest)


def client_sign_flow(
    identification_key: SigningKeyPair, record: FlowRecord, identity_digest: bytes
) -> bytes:
    """Bind a flow record to this circuit's escrowed identity digest."""
    if identity_digest is None or len(identity_digest) != 32:
        raise ParameterError("identity digest must be 32 bytes")
    return sign(identification_key, flow_signing_payload(record, identity_digest))


def verify_flow_sig(
    public_key: bytes, record: FlowRecord, identity_digest: bytes, signature: bytes
) -> bool:
    if len(signature) != 64:
        return False
    return verify(public_key, flow_signing_payload(record, identity_digest), signature)


@dataclass(frozen=True)
class FlowRecordEnvelope:
    """One stored connection: plaintext record plus the sealed identity pointer.

    The sealed part holds (identity digest, client flow signature), encrypted
    under the exit's key with a fresh nonce, so two envelopes of the same
    circuit share no equal field at rest.
    """

    record: FlowRecord
    sealed: bytes

    def to_bytes(self) -> bytes:
        return encode_fields(self.record.to_bytes(), self.sealed)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FlowRecordEnvelope":
        record_b, sealed = decode_fields(data, 2)
        return cls(record=FlowRecord.from_bytes(record_b), sealed=sealed)


@dataclass(frozen=True)
class MigrationBatch:
    exit_id_key: bytes
    exit_ip: str
    envelopes: tuple[FlowRecordEnvelope, ...]
    identities: tuple[tuple[bytes, bytes], ...]  # (digest, identity ciphertext bytes)
    archive: bytes
    digest: bytes


def _counted(items: list[bytes]) -> bytes:
    return encode_u32(len(items)) + b"".join(encode_fields(item) for item in items)


def _read_counted(data: bytes, offset: int) -> tuple[list[bytes], int]:
    if offset + 4 > len(data):
        raise FormatError("truncated count")
    count = decode_u32(data[offset : offset + 4])
    offset += 4
    items = []
    for _ in range(count):
        (item,), used = decode_fields_prefix(data[offset:], 1)
        items.append(item)
        offset += used
    return items, offset


def build_archive(
    envelopes: list[FlowRecordEnvelope], identities: list[tuple[bytes, bytes]]
) -> bytes:
    """Canonical batch serialization: counted envelope list, counted identity
    list, DEFLATE-compressed."""
    raw = _counted([e.to_bytes() for e in envelopes]) + _counted(
        [encode_fields(digest, ct) for digest, ct in identities]
    )
    return zlib.compress(raw, level=9)


def parse_archive(
    archive: bytes,
) -> tuple[list[FlowRecordEnvelope], list[tuple[bytes, bytes]]]:
    try:
        raw = zlib.decompress(archive)
    except zlib.error as exc:
        raise FormatError(f"bad archive compression: {exc}") from None
    env_items, offset = _read_counted(raw, 0)
    id_items, offset = _read_counted(raw, offset)
    if offset != len(raw):
        raise FormatError("trailing bytes after archive lists")
    envelopes = [FlowRecordEnvelope.from_bytes(item) for item in env_items]
    identities = []
    for item in id_items:
        digest, ct = decode_fields(item, 2)
        if len(digest) != 32:
            raise FormatError("identity digest must be 32 bytes")
        identities.append((digest, ct))
    return envelopes, identities


# ---------------------------------------------------------------------------
# exit-side store


@dataclass
class ExitStoreFlags:
    """Misbehavior knobs for the exit store; defaults are honest."""

    wrong_envelope: bool = False  # seal a pointer at a mismatched identity
    drop_records: bool = False  # ack flows but never buffer their envelopes


@dataclass
class _CircuitFlows:
    identity_digest: bytes
    identity_ct: bytes
    identification_key: bytes  # the client's last hop key, verifies flow signatures
    envelopes: list[FlowRecordEnvelope] = field(default_factory=list)


class ExitFlowStore:
    """Per-exit buffer of flow envelopes awaiting batch migration."""

    def __init__(
        self,
        exit_id_key: bytes,
        exit_ip: str,
        rng: Rng | None = None,
        flags: ExitStoreFlags | None = None,
    ):
        self.exit_id_key = exit_id_key
        self.exit_ip = exit_ip
        self.rng = ensure_rng(rng)
        self.flags = flags or ExitStoreFlags()
        self.exit_key: bytes | None = self.rng.randbytes(32)
        self._open: dict[tuple, _CircuitFlows] = {}
        self._closed: list[_CircuitFlows] = []
        self.events: list[dict] = []

    def destroy_key(self) -> None:
        """Model key loss: sealed pointers become permanently unopenable."""
        self.exit_key = None

    def register_circuit(
        self, ref: tuple, identity_digest: bytes, identity_ct: bytes, identification_key: bytes
    ) -> None:
        self._open[ref] = _CircuitFlows(
            identity_digest=identity_digest,
            identity_ct=identity_ct,
            identification_key=identification_key,
        )

    def accept_flow(
        self, ref: tuple, record: FlowRecord, signature: bytes
    ) -> tuple[FlowRecordEnvelope | None, str]:
        """Verify the client's flow signature; on success build and buffer the
        envelope. Returns (envelope, "") or (None, reason)."""
        circ = self._open.get(ref)
        if circ is None:
            return None, "unknown_circuit"
        if self.exit_key is None:
            return None, "exit_key_destroyed"
        if not verify_flow_sig(
            circ.identification_key, record, circ.identity_digest, signature
        ):
            return None, "bad_flow_sig"
        sealed_digest = circ.identity_digest
        if self.flags.wrong_envelope:
            sealed_digest = hash_digest(b"misfiled:" + circ.identity_digest)
        sealed = symmetric_encrypt(
            self.exit_key, encode_fields(sealed_digest, signature), self.rng
        )
        envelope = FlowRecordEnvelope(record=record, sealed=sealed)
        if not self.flags.drop_records:
            circ.envelopes.append(envelope)
            self.events.append({"event": "flow_stored", "digest": circ.identity_digest})
        return envelope, ""

    def open_envelope(self, envelope: FlowRecordEnvelope) -> tuple[bytes, bytes]:
        """Decrypt the sealed pointer: (identity digest, flow signature)."""
        if self.exit_key is None:
            raise PreconditionError("exit key destroyed")
        plain = symmetric_decrypt(self.exit_key, envelope.sealed)
        digest, signature = decode_fields(plain, 2)
        return digest, signature

    def identity_ciphertext(self, digest: bytes) -> bytes | None:
        """Look up a not-yet-migrated identity ciphertext by its digest."""
        for circ in list(self._open.values()) + self._closed:
            if circ.identity_digest == digest:
                return circ.identity_ct
        return None

    def note_circuit_closed(self, ref: tuple) -> None:
        circ = self._open.pop(ref, None)
        if circ is not None:
            self._closed.append(circ)

    @property
    def closed_circuits(self) -> int:
        return len(self._closed)

    def migrate(self, flush_after_circuits: int, ledger) -> MigrationBatch | None:
        """Archive the closed-circuit buffer once it is large enough, announce
        the digest on the ledger, and hand the batch back for delivery. The
        buffer survives an unreachable ledger for a later retry."""
        if flush_after_circuits < 1:
            raise ParameterError("flush size must be positive")
        if len(self._closed) < flush_after_circuits:
            return None
        batch_circuits = self._closed
        envelopes = [env for circ in batch_circuits for env in circ.envelopes]
        identities = []
        seen = set()
        for circ in batch_circuits:
            if circ.identity_digest not in seen:
                seen.add(circ.identity_digest)
                identities.append((circ.identity_digest, circ.identity_ct))
        archive = build_archive(envelopes, identities)
        digest = hash_digest(archive)
        try:
            ledger.announce_migration_digest(self.exit_id_key, digest)
        except Exception:
            return None  # ledger unavailable: hold the buffer, retry later
        self._closed = []
        self.events.append(
            {"event": "batch_migrated", "digest": digest, "envelopes": len(envelopes)}
        )
        return MigrationBatch(
            exit_id_key=self.exit_id_key,
            exit_ip=self.exit_ip,
            envelopes=tuple(envelopes),
            identities=tuple(identities),
            archive=archive,
            digest=digest,
        )


# ---------------------------------------------------------------------------
# government databases


@dataclass(frozen=True)
class StoredEnvelope:
    record: FlowRecord
    sealed: bytes
    exit_id_key: bytes
    exit_ip: str
    batch_digest: bytes


@dataclass
class _StoredBatch:
    batch: MigrationBatch
    max_timestamp: int


class GovDatabase:
    """One jurisdiction's flow-record store, mirrored across peers by digest."""

    def __init__(self, db_id: str):
        self.db_id = db_id
        self._batches: dict[bytes, _StoredBatch] = {}
        self.known_digests: set[bytes] = set()
        self._index: dict[tuple[bytes, int, bytes, int], list[StoredEnvelope]] = {}
        self._identities: dict[bytes, bytes] = {}
        self.alarms: list[str] = []

    # -- ingestion

    def note_announced(self, digest: bytes) -> None:
        self.known_digests.add(digest)

    def refresh_announcements(self, ledger) -> None:
        self.known_digests |= set(ledger.migration_digests())

    def insert_batch(self, batch: MigrationBatch) -> None:
        if hash_digest(batch.archive) != batch.digest:
            raise IntegrityError("archive digest mismatch, batch rejected")
        if batch.digest not in self.known_digests:
            raise PreconditionError("batch digest was never announced on the ledger")
        if batch.digest in self._batches:
            return
        envelopes, identities = parse_archive(batch.archive)
        max_ts = 0
        for env in envelopes:
            stored = StoredEnvelope(
                record=env.record,
                sealed=env.sealed,
                exit_id_key=batch.exit_id_key,
                exit_ip=batch.exit_ip,
                batch_digest=batch.digest,
            )
            self._index.setdefault(self._key(env.record), []).append(stored)
            max_ts = max(max_ts, env.record.timestamp)
        for digest, ct in identities:
            self._identities[digest] = ct
        self._batches[batch.digest] = _StoredBatch(batch=batch, max_timestamp=max_ts)

    @staticmethod
    def _key(record: FlowRecord) -> tuple[bytes, int, bytes, int]:
        return (
            _pack_ip(record.dest_ip),
            record.dest_port,
            _pack_ip(record.exit_ip),
            record.timestamp,  # one-second buckets
        )

    # -- queries

    def search(
        self, dest_ip: str, dest_port: int, exit_ip: str, time_window: tuple[int, int]
    ) -> list[StoredEnvelope]:
        start, end = time_window
        if start > end:
            raise ParameterError("empty time window")
        dest = _pack_ip(dest_ip)
        exit_p = _pack_ip(exit_ip)
        found = []
        for ts in range(start, end + 1):
            found.extend(self._index.get((dest, dest_port, exit_p, ts), []))
        return found

    def identity_ciphertext(self, digest: bytes) -> bytes | None:
        return self._identities.get(digest)

    @property
    def batch_digests(self) -> set[bytes]:
        return set(self._batches)

    def get_batch(self, digest: bytes) -> MigrationBatch | None:
        entry = self._batches.get(digest)
        return entry.batch if entry else None

    def stats(self) -> dict:
        n_env = sum(len(v) for v in self._index.values())
        return {
            "db_id": self.db_id,
            "batches": len(self._batches),
            "envelopes": n_env,
            "identities": len(self._identities),
            "announced": len(self.known_digests),
            "alarms": len(self.alarms),
        }

    # -- retention

    def retention_expire(self, now: int, retention: int = DEFAULT_RETENTION_S) -> int:
        """Drop envelopes older than the retention window; identity entries go
        when their whole batch has aged out."""
        cutoff = now - retention
        removed = 0
        for key in list(self._index):
            kept = [e for e in self._index[key] if e.record.timestamp >= cutoff]
            removed += len(self._index[key]) - len(kept)
            if kept:
                self._index[key] = kept
            else:
                del self._index[key]
        for digest in list(self._batches):
            entry = self._batches[digest]
            if entry.max_timestamp < cutoff:
                _, identities = parse_archive(entry.batch.archive)
                for id_digest, _ct in identities:
                    self._identities.pop(id_digest, None)
                del self._batches[digest]
        return removed

    # -- persistence

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = []
        for digest, entry in self._batches.items():
            name = digest.hex() + ".batch"
            (directory / name).write_bytes(entry.batch.archive)
            index.append(
                {
                    "digest": digest.hex(),
                    "exit_id_key": entry.batch.exit_id_key.hex(),
                    "exit_ip": entry.batch.exit_ip,
                    "file": name,
                }
            )
        meta = {
            "db_id": self.db_id,
            "known_digests": sorted(d.hex() for d in self.known_digests),
            "batches": index,
        }
        (directory / "index.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "GovDatabase":
        directory = Path(directory)
        meta = json.loads((directory / "index.json").read_text())
        db = cls(meta["db_id"])
        for hexd in meta["known_digests"]:
            db.known_digests.add(bytes.fromhex(hexd))
        for row in meta["batches"]:
            archive = (directory / row["file"]).read_bytes()
            envelopes, identities = parse_archive(archive)
            batch = MigrationBatch(
                exit_id_key=bytes.fromhex(row["exit_id_key"]),
                exit_ip=row["exit_ip"],
                envelopes=tuple(envelopes),
                identities=tuple(identities),
                archive=archive,
                digest=bytes.fromhex(row["digest"]),
            )
            db.insert_batch(batch)
        return db


def db_sync(db_a: GovDatabase, db_b: GovDatabase, ledger) -> list[bytes]:
    """Mirror batches between two databases against the ledger's announcement
    list. Returns the digests announced but held by neither (audit alarms)."""
    announced = set(ledger.migration_digests())
    for db in (db_a, db_b):
        db.known_digests |= announced
    missing = []
    for digest in sorted(announced):
        in_a = digest in db_a.batch_digests
        in_b = digest in db_b.batch_digests
        if in_a and not in_b:
            db_b.insert_batch(db_a.get_batch(digest))
        elif in_b and not in_a:
            db_a.insert_batch(db_b.get_batch(digest))
        elif not in_a and not in_b:
            missing.append(digest)
            alarm = f"announced batch {digest.hex()[:16]} held by no database"
            db_a.alarms.append(alarm)
            db_b.alarms.append(alarm)
    return missing


def bytes_per_connection(batch: MigrationBatch) -> float:
    """Archive size amortized over the connections it records."""
    if not batch.envelopes:
        raise ParameterError("empty batch")
    return len(batch.archive) / len(batch.envelopes)
