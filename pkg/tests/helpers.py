"""Minimal in-process network shared by protocol-level tests.

Routes directive bursts between relay nodes synchronously; the discrete-event
simulator has its own richer transport, this one just exercises the handlers.
"""

from __future__ import annotations

from peelback.certs import CertificateAuthority
from peelback.circuit import (
    ClientCircuit,
    Directory,
    RelayFlags,
    RelayIdentity,
    RelayNode,
    client_absorb_ack,
    client_begin_circuit,
    client_extend,
    client_open_flow,
)
from peelback.crypto import ChannelKeyPair, SigningKeyPair, sign
from peelback.deanon import Consortium, ConsortiumMember, run_deanonymization
from peelback.flowstore import ExitFlowStore, ExitStoreFlags, FlowRecord, GovDatabase
from peelback.ledger import ConsortiumLedger
from peelback.rng import Rng

CLIENT_IP = "9.9.9.9"


class LedgerStub:
    """Stands in for the translucent ledger where only migration digests matter."""

    def __init__(self):
        self.announced: list[tuple[bytes, bytes]] = []  # (exit_id_key, digest)

    def announce_migration_digest(self, exit_id_key: bytes, digest: bytes) -> None:
        self.announced.append((exit_id_key, digest))

    def migration_digests(self) -> set[bytes]:
        return {digest for _, digest in self.announced}


class UnreachableLedger:
    def announce_migration_digest(self, exit_id_key: bytes, digest: bytes) -> None:
        raise ConnectionError("ledger unreachable")

    def migration_digests(self) -> set[bytes]:
        raise ConnectionError("ledger unreachable")


class MiniNet:
    """A handful of relay nodes plus synchronous burst routing."""

    def __init__(
        self,
        consortium_pk,
        n_relays: int = 3,
        seldom: bool = True,
        bridge: tuple[str, ...] = (),
        unlisted: tuple[str, ...] = (),
        flags: dict[str, RelayFlags] | None = None,
        store_flags: dict[str, ExitStoreFlags] | None = None,
        seed: str = "tests:net",
    ):
        self.rng = Rng.from_seed(seed)
        self.bridge_authority = SigningKeyPair.generate(self.rng.child("bridge-auth"))
        self.directory = Directory(bridge_authority_key=self.bridge_authority.public)
        self.ca = CertificateAuthority("ca-1", self.rng.child("ca"))
        trusted = {"ca-1": self.ca.public_key}
        self.trusted = trusted
        self.relays: dict[str, RelayNode] = {}
        self.traffic: list[tuple[str, str, list]] = []
        self.oob: list[tuple[str, str, list]] = []
        self.observations: list[tuple[str, tuple[str, str, bytes]]] = []
        for i in range(n_relays):
            party = f"relay-{i}"
            id_key = SigningKeyPair.generate(self.rng.child(f"id-{i}"))
            chan = ChannelKeyPair.generate(self.rng.child(f"chan-{i}"))
            bridge_cert = (
                sign(self.bridge_authority, id_key.public) if party in bridge else None
            )
            ident = RelayIdentity(
                relay_id_key=id_key.public,
                listed=party not in unlisted and party not in bridge,
                ip=f"10.0.0.{i + 1}",
                channel_key=chan.public,
                bridge_certificate=bridge_cert,
            )
            node = RelayNode(
                party_id=party,
                identity=ident,
                id_key=id_key,
                channel_kp=chan,
                directory=self.directory,
                consortium_pk=consortium_pk,
                trusted_ca_keys=trusted,
                rng=self.rng.child(f"node-{i}"),
                flags=(flags or {}).get(party),
                seldom=seldom,
            )
            node.exit_store = ExitFlowStore(
                exit_id_key=id_key.public,
                exit_ip=ident.ip,
                rng=self.rng.child(f"store-{i}"),
                flags=(store_flags or {}).get(party),
            )
            self.directory.register(party, ident)
            self.relays[party] = node

    def exchange(
        self,
        to_party: str,
        cells: list,
        from_party: str = "client",
        source_ip: str = CLIENT_IP,
        now_ms: int = 0,
    ) -> list[list]:
        """Deliver one burst and run relays until quiescent; returns the bursts
        that arrived back at the client."""
        pending = [(from_party, to_party, source_ip, cells)]
        client_bursts = []
        steps = 0
        while pending:
            frm, to, src, burst = pending.pop(0)
            self.traffic.append((frm, to, burst))
            if to == "client":
                client_bursts.append(burst)
                continue
            node = self.relays[to]
            result = node.handle_message(frm, burst, src, now_ms)
            for o in result.observations:
                self.observations.append((to, o))
            for d in result.directives:
                if d.oob_fields is not None:
                    self.oob.append((to, d.to_party, d.oob_fields))
                if d.cells:
                    pending.append((to, d.to_party, node.identity.ip, d.cells))
            steps += 1
            if steps > 1000:
                raise RuntimeError("routing did not quiesce")
        return client_bursts


def establish(
    net: MiniNet,
    path: list[str],
    client_ip: str = CLIENT_IP,
    source_ip: str | None = None,
    now_s: int = 1_700_000,
    circuit_id: int = 7,
    seldom: bool = True,
    extra_padding: int = 0,
    seed: str = "tests:client",
    reuse_hop_key=None,
    reuse_within: bool = False,
    cert=None,
    cert_key=None,
    identification_key=None,
) -> tuple[ClientCircuit, SigningKeyPair]:
    """Drive a full circuit build; returns the client state (check .complete).

    identification_key, when given, becomes the hop key the exit learns (the
    one that signs flows), as a probing authority pre-commits to."""
    rng = Rng.from_seed(seed)
    if cert_key is None:
        cert_key = SigningKeyPair.generate(rng.child("k1"))
    if cert is None:
        cert = net.ca.issue(client_ip, cert_key.public, now_s)
    src = source_ip if source_ip is not None else client_ip
    idents = [net.relays[p].identity for p in path]
    if identification_key is not None and len(path) == 2:
        reuse_hop_key = identification_key
    cells, circ = client_begin_circuit(
        cert,
        cert_key,
        idents,
        circuit_id,
        rng.child("begin"),
        extra_padding=extra_padding,
        seldom=seldom,
        reuse_hop_key=reuse_hop_key,
    )
    replies = net.exchange(path[0], cells, source_ip=src, now_ms=now_s * 1000)
    assert len(replies) == 1, "entry create must produce exactly one reply burst"
    client_absorb_ack(circ, replies[0], "extend")
    circ.rounds_per_hop.append(1)
    while not circ.failed and circ.established < circ.length:
        inject = (
            identification_key
            if identification_key is not None and circ.established == len(path) - 2
            else None
        )
        cells = client_extend(
            circ,
            rng.child(f"ext-{circ.established}"),
            extra_padding=extra_padding,
            reuse_prev_hop_key=reuse_within,
            next_key=inject,
        )
        replies = net.exchange(path[0], cells, source_ip=src, now_ms=now_s * 1000)
        assert len(replies) == 1, "each extension must produce exactly one reply burst"
        client_absorb_ack(circ, replies[0], "extend")
        circ.rounds_per_hop.append(1)
    return circ, cert_key


def open_flow(
    net: MiniNet,
    circ: ClientCircuit,
    path: list[str],
    dest_ip: str = "93.184.216.34",
    dest_port: int = 443,
    now_s: int = 1_700_100,
    sign_flow: bool = True,
    seed: str = "tests:flow",
) -> tuple[bool, FlowRecord, bytes]:
    cells, record = client_open_flow(
        circ, dest_ip, dest_port, now_s, Rng.from_seed(seed), sign_flow=sign_flow
    )
    replies = net.exchange(path[0], cells, source_ip=CLIENT_IP, now_ms=now_s * 1000)
    assert len(replies) == 1
    ok, payload = client_absorb_ack(circ, replies[0], "flow")
    return ok, record, payload


MEMBER_IDS = tuple(f"member-{i}" for i in range(5))


def make_consortium(committee, directory) -> "Consortium":
    pk, shares = committee
    members = [ConsortiumMember(MEMBER_IDS[i], shares[i]) for i in range(len(shares))]
    return Consortium(members=members, public_key=pk, directory=directory)


def migrate_exit(net: MiniNet, exit_party: str, ledger, db=None):
    """Close every open circuit on the exit, flush its buffer into a batch,
    and (when a database is given) mirror the batch there."""
    store = net.relays[exit_party].exit_store
    for ref in list(store._open):
        store.note_circuit_closed(ref)
    batch = store.migrate(1, ledger)
    if db is not None and batch is not None:
        db.refresh_announcements(ledger)
        db.insert_batch(batch)
    return batch


class DeanonWorld:
    """Everything one recovery run needs: network, committee, ledger, db."""

    def __init__(self, committee, net: MiniNet, path: list[str]):
        self.committee = committee
        self.net = net
        self.path = path
        self.consortium = make_consortium(committee, net.directory)
        self.ledger = ConsortiumLedger(list(MEMBER_IDS))
        self.db = GovDatabase("db-0")
        self.circuits: list[ClientCircuit] = []
        self.records: list[FlowRecord] = []

    @property
    def exit_party(self) -> str:
        return self.path[-1]

    @property
    def exit_store(self):
        return self.net.relays[self.exit_party].exit_store

    @property
    def exit_id_key(self) -> bytes:
        return self.net.relays[self.exit_party].identity.relay_id_key

    def relay_key(self, party: str) -> bytes:
        return self.net.relays[party].identity.relay_id_key

    def run_flow(
        self,
        client_ip: str = CLIENT_IP,
        dest_ip: str = "93.184.216.34",
        dest_port: int = 443,
        now_establish: int = 1_700_000,
        now_flow: int = 1_700_100,
        circuit_id: int = 7,
        sign_flow: bool = True,
        seed: str = "tests:world-client",
        identification_key=None,
    ):
        circ, cert_key = establish(
            self.net,
            self.path,
            client_ip=client_ip,
            now_s=now_establish,
            circuit_id=circuit_id,
            seed=seed,
            identification_key=identification_key,
        )
        assert circ.complete, "world builder expects establishment to succeed"
        ok, record, _ = open_flow(
            self.net,
            circ,
            self.path,
            dest_ip=dest_ip,
            dest_port=dest_port,
            now_s=now_flow,
            sign_flow=sign_flow,
            seed=seed + ":flow",
        )
        self.circuits.append(circ)
        self.records.append(record)
        return circ, cert_key, ok, record

    def migrate(self):
        return migrate_exit(self.net, self.exit_party, self.ledger, self.db)

    def deanonymize(
        self,
        record: FlowRecord,
        now_s: int = 1_700_200,
        lea_id: str = "lea-1",
        reasoning: str = "court order 17",
        window_pad: int = 1,
        **kwargs,
    ):
        query = (
            record.dest_ip,
            record.dest_port,
            self.exit_store.exit_ip,
            (record.timestamp - window_pad, record.timestamp + window_pad),
        )
        return run_deanonymization(
            lea_id,
            query,
            self.consortium,
            self.ledger,
            self.db,
            self.exit_store,
            now_s=now_s,
            reasoning=reasoning,
            trusted_ca_keys=self.net.trusted,
            **kwargs,
        )
