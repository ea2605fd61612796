"""Discrete-event network simulation.

``SimWorld`` builds the whole party roster from a scenario (relays,
clients, committee, ledger, databases, probing authorities), then plays the
schedule on a logical millisecond clock.  Messages move only through
``_exchange``, which delivers bursts hop by hop, applies the per-link delay,
and appends one entry to the receiving party's observation log per delivery.

Determinism contract: a run is a pure function of the scenario.  All
randomness flows from one master stream seeded with the scenario seed; each
party draws from its own child stream; no wall-clock time, no global RNG,
single thread.  Two runs of the same scenario yield equal observation logs
and byte-identical reports.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, field

from ..certs import CertificateAuthority
from ..circuit import (
    ClientCircuit,
    Directory,
    RelayIdentity,
    RelayNode,
    client_absorb_ack,
    client_begin_circuit,
    client_extend,
    client_open_flow,
)
from ..crypto import ChannelKeyPair, SigningKeyPair, dealer_keygen, hash_digest
from ..deanon import (
    RESULT_IDENTITY,
    RESULT_MISBEHAVIOR,
    Consortium,
    ConsortiumMember,
    run_deanonymization,
)
from ..encoding import encode_fields, encode_u32
from ..errors import PreconditionError
from ..flowstore import ExitFlowStore, FlowRecord, GovDatabase, client_sign_flow
from ..ledger import ConsortiumLedger, merkle_state_root, verify_chain
from ..probing import ProbeAudit, ProbeResult, commit_to_probe, probe_statistics, run_probe
from ..rng import Rng
from .audits import KnowledgeTruth, ObservationEntry, ObservationLog, audit_knowledge_partition
from .metrics import AuditResult, MetricsReport
from .scenario import FAULT_KINDS, FaultSpec, Scenario, ScheduleAction

__all__ = ["SimError", "SimWorld", "run_scenario"]

WORLD_FORMAT = 1


class SimError(RuntimeError):
    """A schedule action could not be carried out."""


@dataclass
class ClientState:
    """Client-side bookkeeping for one traffic source (client or authority)."""

    party: str
    ip: str
    rng: Rng
    sign_flows: bool = True
    reuse_hop_key: bool = False
    prev_hop_key: SigningKeyPair | None = None
    next_circuit_id: int = 1
    flow_counter: int = 0


@dataclass
class CircuitTruth:
    """Ground truth about one circuit the harness built."""

    label: str
    client: str
    client_ip: str  # the address the certificate names
    source_ip: str  # the address the traffic actually came from
    path: tuple[str, ...]
    circ: ClientCircuit
    cert_bytes: bytes
    built_at_ms: int
    closed: bool = False

    @property
    def complete(self) -> bool:
        return self.circ.complete


@dataclass
class FlowTruth:
    """Ground truth about one accepted flow."""

    circuit: str
    client_ip: str
    record: FlowRecord
    signed: bool


def _burst_digest(cells) -> bytes:
    parts = [
        encode_fields(encode_u32(c.circuit_id), bytes([int(c.command)]), encode_u32(c.seq), c.payload)
        for c in cells
    ]
    return hash_digest(b"".join(parts))


def _split_dest(dest: str) -> tuple[str, int]:
    ip, _, port = dest.rpartition(":")
    return ip, int(port)


class SimWorld:
    """One simulated deployment: parties, transport, schedule playback."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.network = scenario.network
        self.seldom = scenario.network.seldom
        self.link_delay_ms = scenario.network.link_delay_ms
        self.retention_s = scenario.network.retention_days * 86_400
        self.clock_ms = 0
        self.master = Rng.from_seed(f"sim:{scenario.seed}")
        self._ran = False
        self._report: MetricsReport | None = None

        # committee and ledger
        spec = scenario.parties.consortium
        pk, shares = dealer_keygen(
            spec.size, spec.threshold, modulus_bits=spec.key_bits, rng=self.master.child("committee")
        )
        member_ids = [f"member-{i}" for i in range(spec.size)]
        self.directory = Directory()
        self.consortium = Consortium(
            members=[ConsortiumMember(member_ids[i], shares[i]) for i in range(spec.size)],
            public_key=pk,
            directory=self.directory,
        )
        self.ledger = ConsortiumLedger(
            member_ids,
            voting_threshold=spec.threshold,
            disclosure_delay_s=scenario.network.disclosure_delay_days * 86_400,
        )
        self.dbs = [GovDatabase(f"db-{i}") for i in range(scenario.parties.databases)]

        # certificate authority, trusted by every relay
        self.ca = CertificateAuthority("ca-1", self.master.child("ca"))
        self.trusted = {"ca-1": self.ca.public_key}

        # relays by role
        self.relays: dict[str, RelayNode] = {}
        self.entry_parties: list[str] = []
        self.middle_parties: list[str] = []
        self.exit_parties: list[str] = []
        self._key_to_party: dict[bytes, str] = {}
        roles = (
            ("entry", scenario.parties.entries, self.entry_parties, "10.1.0."),
            ("middle", scenario.parties.middles, self.middle_parties, "10.2.0."),
            ("exit", scenario.parties.exits, self.exit_parties, "10.3.0."),
        )
        for role, count, pool, prefix in roles:
            for i in range(count):
                party = f"{role}-{i}"
                self._add_relay(party, f"{prefix}{i + 1}", pk)
                pool.append(party)

        # traffic sources: clients plus probing authorities
        self.clients: dict[str, ClientState] = {}
        ip_rng = self.master.child("client-ips")
        taken: set[str] = set()
        for i in range(scenario.parties.clients):
            ip = self._fresh_client_ip(ip_rng, taken)
            party = f"client-{i}"
            self.clients[party] = ClientState(party=party, ip=ip, rng=self.master.child(f"party:{party}"))
        authorities = list(dict.fromkeys(scenario.parties.leas + scenario.parties.authorities))
        for i, party in enumerate(authorities):
            self.clients[party] = ClientState(
                party=party, ip=f"8.8.{i // 250}.{i % 250 + 1}", rng=self.master.child(f"party:{party}")
            )

        self.logs: dict[str, ObservationLog] = {
            party: ObservationLog(party) for party in list(self.clients) + list(self.relays)
        }
        self.knowledge = KnowledgeTruth()
        self.probe_audit = ProbeAudit(directory=self.directory)
        self.circuits: dict[str, CircuitTruth] = {}
        self.flows: list[FlowTruth] = []
        self.outcomes: list[tuple[str, object]] = []
        self.probe_results: list[ProbeResult] = []
        self.active_faults: dict[str, set[str]] = {}
        self.metrics = MetricsReport(scenario=scenario.name, seed=scenario.seed)
        self._exchanges = 0
        self._round_robin = {"entry": 0, "middle": 0, "exit": 0}
        self._probe_counter = 0

    # -- construction helpers

    def _add_relay(self, party: str, ip: str, consortium_pk) -> None:
        rng = self.master.child(f"party:{party}")
        id_key = SigningKeyPair.generate(rng.child("id"))
        chan = ChannelKeyPair.generate(rng.child("chan"))
        ident = RelayIdentity(
            relay_id_key=id_key.public,
            listed=True,
            ip=ip,
            channel_key=chan.public,
            bridge_certificate=None,
        )
        node = RelayNode(
            party_id=party,
            identity=ident,
            id_key=id_key,
            channel_kp=chan,
            directory=self.directory,
            consortium_pk=consortium_pk,
            trusted_ca_keys=self.trusted,
            rng=rng.child("node"),
            max_cert_age=self.network.max_cert_age_s,
            seldom=self.seldom,
        )
        node.exit_store = ExitFlowStore(
            exit_id_key=id_key.public, exit_ip=ip, rng=rng.child("store")
        )
        self.directory.register(party, ident)
        self.relays[party] = node
        self._key_to_party[id_key.public] = party

    @staticmethod
    def _fresh_client_ip(rng: Rng, taken: set[str]) -> str:
        while True:
            a = rng.randrange(1, 224)
            if a in (8, 10, 127):  # keep clear of relay, authority, loopback space
                continue
            ip = f"{a}.{rng.randrange(0, 256)}.{rng.randrange(0, 256)}.{rng.randrange(1, 255)}"
            if ip not in taken:
                taken.add(ip)
                return ip

    # -- logging and transport

    def _log(self, party: str, t_ms: int, source: str, fields: tuple, digest: bytes, channel="link"):
        self.logs[party].append(
            ObservationEntry(time_ms=t_ms, source=source, digest=digest, fields=fields, channel=channel)
        )

    def _exchange(self, to_party: str, cells, from_party: str, source_ip: str, t_ms: int):
        """Deliver one burst and run the relays to quiescence.

        Returns the bursts that arrived back at non-relay parties (the
        client side).  Advances the clock to the last delivery."""
        pending = [(from_party, to_party, source_ip, cells, t_ms)]
        client_bursts = []
        t_max = t_ms
        steps = 0
        while pending:
            frm, to, src, burst, t = pending.pop(0)
            t_max = max(t_max, t)
            if to not in self.relays:
                self._log(to, t, frm, (), _burst_digest(burst))
                client_bursts.append(burst)
                continue
            node = self.relays[to]
            result = node.handle_message(frm, burst, src, t)
            self._log(to, t, frm, tuple(result.observations), _burst_digest(burst))
            for d in result.directives:
                if d.oob_fields is not None:
                    digest = hash_digest(b"".join(v for _, _, v in d.oob_fields))
                    self._log(d.to_party, t, to, tuple(d.oob_fields), digest, channel="oob")
                if d.cells:
                    pending.append((to, d.to_party, node.identity.ip, d.cells, t + self.link_delay_ms))
            steps += 1
            if steps > 100_000:
                raise SimError("relay routing did not quiesce")
        self._exchanges += 1
        self.metrics.rounds_used += 1
        self.clock_ms = max(self.clock_ms, t_max)
        return client_bursts

    # -- path selection

    def _pick_path(self, length: int, exit_party: str | None, explicit, loc: str) -> list[str]:
        if explicit:
            return list(explicit)
        if length < 2:
            raise SimError(f"{loc}: circuit length must be at least 2")
        middles_needed = length - 2
        if middles_needed > len(self.middle_parties):
            raise SimError(
                f"{loc}: length {length} needs {middles_needed} middles, "
                f"scenario has {len(self.middle_parties)}"
            )
        entry = self.entry_parties[self._round_robin["entry"] % len(self.entry_parties)]
        self._round_robin["entry"] += 1
        if exit_party is None:
            exit_party = self.exit_parties[self._round_robin["exit"] % len(self.exit_parties)]
            self._round_robin["exit"] += 1
        middles = []
        for j in range(middles_needed):
            middles.append(self.middle_parties[(self._round_robin["middle"] + j) % len(self.middle_parties)])
        self._round_robin["middle"] += middles_needed
        return [entry, *middles, exit_party]

    # -- protocol driving

    def _build_circuit(
        self,
        t_ms: int,
        client_party: str,
        length: int,
        label: str,
        *,
        path=None,
        source_ip: str | None = None,
        extra_padding: int = 0,
        identification_key: SigningKeyPair | None = None,
        exit_party: str | None = None,
        loc: str = "",
    ) -> CircuitTruth:
        if label in self.circuits:
            raise SimError(f"{loc}: circuit label '{label}' already used")
        client = self.clients[client_party]
        parties = self._pick_path(length, exit_party, path, loc)
        now_s = t_ms // 1000
        crng = client.rng.child(f"circuit:{label}")
        cert_key = SigningKeyPair.generate(crng.child("cert-key"))
        cert = self.ca.issue(client.ip, cert_key.public, now_s)
        src = source_ip or client.ip
        reuse = None
        if client.reuse_hop_key and client.prev_hop_key is not None:
            reuse = client.prev_hop_key
        if identification_key is not None and len(parties) == 2:
            reuse = identification_key
        idents = [self.relays[p].identity for p in parties]
        cid = client.next_circuit_id
        client.next_circuit_id += 1
        cells, circ = client_begin_circuit(
            cert,
            cert_key,
            idents,
            cid,
            crng.child("begin"),
            extra_padding=extra_padding,
            seldom=self.seldom,
            reuse_hop_key=reuse,
        )
        rounds: list[int] = []
        before = self._exchanges
        replies = self._exchange(parties[0], cells, client_party, src, t_ms)
        if len(replies) != 1:
            raise SimError(f"{loc}: entry create produced {len(replies)} reply bursts")
        client_absorb_ack(circ, replies[0], "extend")
        rounds.append(self._exchanges - before)
        while not circ.failed and circ.established < circ.length:
            inject = None
            if identification_key is not None and circ.established == len(parties) - 2:
                inject = identification_key
            cells = client_extend(
                circ,
                crng.child(f"extend-{circ.established}"),
                extra_padding=extra_padding,
                next_key=inject,
            )
            before = self._exchanges
            replies = self._exchange(
                parties[0], cells, client_party, src, self.clock_ms + self.link_delay_ms
            )
            if len(replies) != 1:
                raise SimError(f"{loc}: extension produced {len(replies)} reply bursts")
            client_absorb_ack(circ, replies[0], "extend")
            rounds.append(self._exchanges - before)
        circ.rounds_per_hop = rounds
        truth = CircuitTruth(
            label=label,
            client=client_party,
            client_ip=client.ip,
            source_ip=src,
            path=tuple(parties),
            circ=circ,
            cert_bytes=cert.to_bytes(),
            built_at_ms=t_ms,
        )
        self.circuits[label] = truth
        if circ.complete:
            self.metrics.circuits_built += 1
            self.metrics.hops_extended += circ.length
            self.metrics.max_rounds_per_hop = max(self.metrics.max_rounds_per_hop, max(rounds))
            client.prev_hop_key = circ.hop_keys[1] if len(circ.hop_keys) > 1 else None
            self._register_circuit_values(truth, cert, cert_key)
        else:
            self.metrics.circuits_failed += 1
        return truth

    def _register_circuit_values(self, truth: CircuitTruth, cert, cert_key) -> None:
        owner = truth.client
        label = truth.label
        path = truth.path
        self.knowledge.register(truth.cert_bytes, "certificate", label, owner, {path[0]})
        self.knowledge.register(cert_key.public, "certificate_key", label, owner, {path[0]})
        for i, kp in enumerate(truth.circ.hop_keys):
            if i == 0:
                continue  # position 0 is the certificate key, already granted
            allowed = {path[i - 1], path[i]} if i < len(path) else {path[-1]}
            self.knowledge.register(kp.public, "hop_key", label, owner, allowed)

    def _open_flow(self, t_ms: int, truth: CircuitTruth, dest_ip: str, dest_port: int, signed=True):
        client = self.clients[truth.client]
        if not truth.circ.complete:
            raise SimError(f"circuit '{truth.label}' is not established")
        now_s = t_ms // 1000
        sign_flow = signed and client.sign_flows
        client.flow_counter += 1
        cells, record = client_open_flow(
            truth.circ,
            dest_ip,
            dest_port,
            now_s,
            client.rng.child(f"flow:{client.flow_counter}"),
            sign_flow=sign_flow,
        )
        replies = self._exchange(truth.path[0], cells, truth.client, truth.source_ip, t_ms)
        if len(replies) != 1:
            raise SimError(f"flow on '{truth.label}' produced {len(replies)} reply bursts")
        ok, _ = client_absorb_ack(truth.circ, replies[0], "flow")
        if ok:
            self.metrics.flows_sent += 1
            self.flows.append(
                FlowTruth(circuit=truth.label, client_ip=client.ip, record=record, signed=sign_flow)
            )
            if sign_flow and truth.circ.seldom:
                sig = client_sign_flow(truth.circ.identification_key, record, truth.circ.id_digest)
                self.knowledge.register(sig, "flow_signature", truth.label, truth.client, {truth.path[-1]})
        else:
            self.metrics.flows_refused += 1
        return ok, record

    def _close_circuit(self, truth: CircuitTruth) -> None:
        key = (truth.client, truth.circ.circuit_id)
        for party in truth.path:
            node = self.relays[party]
            circ = node.circuits.get(key)
            node.close_circuit(key)
            if circ is None or circ.next_party is None:
                break
            key = (party, circ.next_circuit_id)
        truth.closed = True

    def _migrate(self, t_ms: int, flush_after: int | None = None, exit_party: str | None = None):
        flush = flush_after if flush_after is not None else self.network.flush_after_circuits
        parties = [exit_party] if exit_party else list(self.relays)
        batches = []
        for party in parties:
            store = self.relays[party].exit_store
            batch = store.migrate(flush, self.ledger)
            if batch is None:
                continue
            self.metrics.bytes_migrated += len(batch.archive)
            self.metrics.flows_migrated += len(batch.envelopes)
            self.metrics.batches += 1
            for db in self.dbs:
                db.refresh_announcements(self.ledger)
                db.insert_batch(batch)
            batches.append(batch)
        if batches:
            self.ledger.produce_block(t_ms // 1000)
        return batches

    def party_for_key(self, id_key: bytes) -> str | None:
        """Resolve a relay identity key back to its scenario party name."""
        return self._key_to_party.get(id_key)

    def run_recovery(
        self,
        t_ms: int,
        lea: str,
        dest_ip: str,
        dest_port: int,
        exit_party: str,
        window: tuple[int, int],
        reason: str,
        label: str = "",
    ):
        node = self.relays[exit_party]
        outcome = run_deanonymization(
            lea,
            (dest_ip, dest_port, node.exit_store.exit_ip, window),
            self.consortium,
            self.ledger,
            self.dbs[0],
            node.exit_store,
            now_s=t_ms // 1000,
            reasoning=reason,
            trusted_ca_keys=self.trusted,
            retention_s=self.retention_s,
            max_cert_age=self.network.max_cert_age_s,
        )
        name = label or f"q{len(self.outcomes)}"
        self.outcomes.append((name, outcome))
        self.metrics.deanon_outcomes[outcome.result] = (
            self.metrics.deanon_outcomes.get(outcome.result, 0) + 1
        )
        detail = outcome.describe()
        if outcome.result == RESULT_MISBEHAVIOR and isinstance(outcome.misbehaving_party, bytes):
            known = self._key_to_party.get(outcome.misbehaving_party)
            if known:
                detail += f" ({known})"
        self.metrics.deanon_details.append(f"{name}: {detail}")
        self.clock_ms = max(self.clock_ms, t_ms)
        return outcome

    def run_probe_round(
        self,
        t_ms: int,
        authority: str,
        exit_party: str,
        dest: str = "198.51.100.7:8443",
        duration_s: int = 600,
        length: int = 3,
    ) -> ProbeResult | None:
        """Commit, run, reveal, and judge one probe against an exit relay."""
        node = self.relays[exit_party]
        client = self.clients[authority]
        now_s = t_ms // 1000
        dest_ip, dest_port = _split_dest(dest)
        timeframe = (now_s + 2, now_s + 2 + duration_s)
        self._probe_counter += 1
        n = self._probe_counter
        plan = commit_to_probe(
            authority,
            node.identity.relay_id_key,
            dest_ip,
            dest_port,
            timeframe,
            self.ledger,
            now_s,
            rng=client.rng.child(f"probe:{n}"),
        )
        self.ledger.produce_block(now_s)  # the commitment is on chain before any traffic

        label = f"probe-{n}"

        def open_circuit_and_flow(p):
            truth = self._build_circuit(
                max(self.clock_ms, t_ms) + self.link_delay_ms,
                authority,
                length,
                label,
                identification_key=p.identification_key,
                exit_party=exit_party,
                loc=label,
            )
            if not truth.circ.complete:
                return None
            flow_t = max(self.clock_ms, timeframe[0] * 1000) + 1000
            ok, record = self._open_flow(flow_t, truth, dest_ip, dest_port, signed=True)
            return record if ok else None

        def judge(p, record):
            truth = self.circuits[label]
            self._close_circuit(truth)
            self._migrate(self.clock_ms + 1000, flush_after=1, exit_party=exit_party)
            return self.run_recovery(
                self.clock_ms + 2000,
                authority,
                p.preimage.dest_ip,
                p.preimage.dest_port,
                exit_party,
                p.preimage.timeframe,
                reason=f"probe {p.commitment.hex()[:12]}",
                label=label,
            )

        result = run_probe(plan, self.ledger, open_circuit_and_flow, judge, audit=self.probe_audit)
        self.ledger.produce_block(self.clock_ms // 1000)
        if result is None:
            self.metrics.probes_aborted += 1
        else:
            self.probe_results.append(result)
            self.metrics.probes_run += 1
            if result.passed:
                self.metrics.probes_passed += 1
            if result.relay_fault:
                self.metrics.probe_relay_faults += 1
            removed = sorted(self._key_to_party.get(k, k.hex()[:12]) for k in self.probe_audit.removed)
            self.metrics.relays_removed = tuple(removed)
        return result

    # -- fault switches

    def _apply_fault(self, f: FaultSpec) -> None:
        self.active_faults.setdefault(f.party, set()).add(f.kind)
        side = FAULT_KINDS[f.kind]
        if side == "client":
            client = self.clients[f.party]
            if f.kind == "unsigned_flow":
                client.sign_flows = False
            else:
                client.reuse_hop_key = True
        elif side == "store":
            store = self.relays[f.party].exit_store
            if f.kind == "destroy_key":
                store.destroy_key()
            elif f.kind == "wrong_envelope":
                store.flags.wrong_envelope = True
            else:
                store.flags.drop_records = True
        else:
            node = self.relays[f.party]
            if f.kind == "skip_ip_check":
                node.flags.skip_ip_check = True
            elif f.kind == "substitute_cert":
                key = SigningKeyPair.generate(self.master.child(f"fault:cert:{f.party}"))
                foreign = self.ca.issue("203.0.113.66", key.public, self.clock_ms // 1000)
                node.flags.substitute_cert = foreign.to_bytes()
            elif f.kind == "forged_layer_sig":
                node.flags.corrupt_stored_pred_sig = True
            elif f.kind == "wrong_chain_key":
                node.flags.wrong_chain_key = True
            else:
                node.flags.leak_cert_to = f.params["to"]

    # -- schedule playback

    def run(self) -> None:
        if self._ran:
            raise PreconditionError("this world already played its schedule")
        timeline: list[tuple[int, int, int, object]] = []
        for i, f in enumerate(self.scenario.faults):
            timeline.append((f.at_ms, 0, i, f))
        for a in self.scenario.schedule:
            timeline.append((a.at_ms, 1, a.index, a))
        timeline.sort(key=lambda e: (e[0], e[1], e[2]))
        for at_ms, _, _, item in timeline:
            self.clock_ms = max(self.clock_ms, at_ms)
            if isinstance(item, FaultSpec):
                self._apply_fault(item)
            else:
                self._dispatch(item)
        self.ledger.produce_block(self.clock_ms // 1000)  # final seal
        self._ran = True

    def _dispatch(self, a: ScheduleAction) -> None:
        loc = f"schedule[{a.index}]"
        p = a.params
        t = self.clock_ms
        if a.action == "build_circuit":
            label = p.get("label") or f"c{len(self.circuits)}"
            self._build_circuit(
                t,
                p["client"],
                p.get("length", len(p["path"]) if "path" in p else 3),
                label,
                path=p.get("path"),
                source_ip=p.get("source_ip"),
                extra_padding=p.get("extra_padding", 0),
                loc=loc,
            )
        elif a.action == "open_flow":
            truth = self._require_circuit(p["circuit"], loc)
            dest_ip, dest_port = _split_dest(p["dest"])
            self._open_flow(t, truth, dest_ip, dest_port, signed=p.get("signed", True))
        elif a.action == "close_circuit":
            self._close_circuit(self._require_circuit(p["circuit"], loc))
        elif a.action == "migrate":
            self._migrate(t, flush_after=p.get("flush_after"), exit_party=p.get("exit"))
        elif a.action == "deanonymize":
            dest_ip, dest_port = _split_dest(p["dest"])
            window = tuple(p.get("window", (0, t // 1000)))
            self.run_recovery(
                t,
                p["lea"],
                dest_ip,
                dest_port,
                p["exit"],
                window,
                p.get("reason", "scheduled recovery"),
                label=p.get("label", ""),
            )
        elif a.action == "probe":
            self.run_probe_round(
                t,
                p["authority"],
                p["exit"],
                dest=p.get("dest", "198.51.100.7:8443"),
                duration_s=p.get("duration_s", 600),
            )
        elif a.action == "expire":
            retention = p.get("retention_days")
            retention_s = retention * 86_400 if retention is not None else self.retention_s
            for db in self.dbs:
                db.retention_expire(t // 1000, retention_s)
        elif a.action == "seal_block":
            self.ledger.produce_block(t // 1000)
        elif a.action == "bulk_traffic":
            self._bulk_traffic(t, p, loc)
        else:  # unreachable once the parser agrees with the engine
            raise SimError(f"{loc}: engine has no handler for '{a.action}'")

    def _require_circuit(self, label: str, loc: str) -> CircuitTruth:
        truth = self.circuits.get(label)
        if truth is None:
            raise SimError(f"{loc}: unknown circuit '{label}'")
        return truth

    def _bulk_traffic(self, t_ms: int, p: dict, loc: str) -> None:
        """Compound action: many circuits, each carrying a run of flows, each
        closed and offered for migration at the configured flush cadence."""
        n_circuits = p["circuits"]
        n_flows = p["flows_per_circuit"]
        stem = p.get("label", "bulk")
        length = p.get("length", 3)
        flush = p.get("flush_after", self.network.flush_after_circuits)
        do_migrate = p.get("migrate", True)
        signed = p.get("signed", True)
        client_ids = [p["client"]] if "client" in p else [c for c in self.clients if c.startswith("client-")]
        if not client_ids:
            raise SimError(f"{loc}: scenario has no clients")
        t = t_ms
        for i in range(n_circuits):
            client = client_ids[i % len(client_ids)]
            label = f"{stem}-{i}"
            if "dest" in p:
                dest_ip, dest_port = _split_dest(p["dest"])
            else:
                dest_ip, dest_port = f"93.184.{i // 250 % 256}.{i % 250 + 1}", 443
            truth = self._build_circuit(t, client, length, label, loc=loc)
            if truth.circ.complete:
                for _ in range(n_flows):
                    t = self.clock_ms + 1000
                    self._open_flow(t, truth, dest_ip, dest_port, signed=signed)
                self._close_circuit(truth)
            if do_migrate:
                self._migrate(self.clock_ms, flush_after=flush)
            t = self.clock_ms + 1000

    # -- report and audits

    def report(self) -> MetricsReport:
        if self._report is not None:
            return self._report
        m = self.metrics
        m.clock_ms = self.clock_ms
        m.ledger_blocks = len(self.ledger.blocks)
        m.ledger_stats = self.ledger.stats_line()
        self._run_audits(m)
        self._report = m
        return m

    def _run_audits(self, m: MetricsReport) -> None:
        violations = audit_knowledge_partition(self.logs, self.knowledge)
        m.violations = violations
        m.audits.append(
            AuditResult(
                "knowledge_partition",
                not violations,
                f"{len(violations)} violation(s)" if violations else "",
            )
        )

        mismatches = []
        for label, truth in self.circuits.items():
            if truth.complete and truth.source_ip != truth.client_ip:
                mismatches.append(
                    f"source_ip_mismatch circuit={label} entry={truth.path[0]} "
                    f"certified={truth.client_ip} source={truth.source_ip}"
                )
        m.findings += mismatches
        m.audits.append(
            AuditResult("source_ip_consistency", not mismatches, mismatches[0] if mismatches else "")
        )

        uneven = []
        for label, truth in self.circuits.items():
            c = truth.circ
            if not truth.complete:
                continue
            if len(c.rounds_per_hop) != c.length or any(r != 1 for r in c.rounds_per_hop):
                uneven.append(f"circuit {label} used {c.rounds_per_hop} rounds per hop")
        m.audits.append(AuditResult("round_trip_parity", not uneven, uneven[0] if uneven else ""))

        chain_ok = verify_chain(self.ledger.blocks)
        detail = "" if chain_ok else "hash chain broken"
        if chain_ok and self.ledger.blocks:
            chain_ok = self.ledger.blocks[-1].state_root == merkle_state_root(self.ledger.state)
            detail = "" if chain_ok else "final state root does not match contract state"
        m.audits.append(AuditResult("ledger_chain", chain_ok, detail))

        now_s = self.clock_ms // 1000
        public = repr(self.ledger.public_view())
        leaks = []
        for case in self.ledger.cases.values():
            if not case.reasoning:
                continue
            created = case.created_at if case.created_at is not None else now_s
            if now_s < created + self.ledger.disclosure_delay_s and case.reasoning in public:
                leaks.append(f"case {case.case_id} reasoning visible before the disclosure delay")
        m.audits.append(AuditResult("translucency", not leaks, leaks[0] if leaks else ""))

        problems = []
        for name, outcome in self.outcomes:
            problems += self._check_outcome(name, outcome)
        m.audits.append(AuditResult("attribution", not problems, problems[0] if problems else ""))

        announced = self.ledger.migration_digests()
        orphans = []
        for db in self.dbs:
            extra = db.batch_digests - announced
            if extra:
                orphans.append(f"{db.db_id} holds {len(extra)} unannounced batch(es)")
        m.audits.append(AuditResult("migration_provenance", not orphans, orphans[0] if orphans else ""))

        accepted, probes, real = probe_statistics(self.ledger)
        stats_ok = accepted == probes + real
        m.audits.append(
            AuditResult(
                "probe_stats",
                stats_ok,
                "" if stats_ok else f"accepted {accepted} != probes {probes} + real {real}",
            )
        )

    def _check_outcome(self, name: str, outcome) -> list[str]:
        problems = []
        items = outcome.candidates if outcome.candidates else [outcome]
        for o in items:
            if o.result == RESULT_IDENTITY:
                flow = next((f for f in self.flows if f.record == o.flow_record), None)
                if flow is None:
                    problems.append(f"{name}: identity recovered for a flow this run never sent")
                elif o.certified_ip != flow.client_ip:
                    problems.append(
                        f"{name}: recovered ip {o.certified_ip} but the flow came from {flow.client_ip}"
                    )
            elif o.result == RESULT_MISBEHAVIOR:
                party = o.misbehaving_party
                resolved = self._key_to_party.get(party) if isinstance(party, bytes) else party
                if resolved is None:
                    problems.append(f"{name}: blamed an unknown relay key")
                elif not self.active_faults.get(resolved):
                    problems.append(f"{name}: blamed honest relay {resolved}")
        return problems

    # -- persistence (the operator tooling keeps worlds across invocations)

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            pickle.dump({"format": WORLD_FORMAT, "world": self}, fh, protocol=4)

    @classmethod
    def load(cls, path: str) -> "SimWorld":
        with open(path, "rb") as fh:
            blob = pickle.load(fh)
        if not isinstance(blob, dict) or blob.get("format") != WORLD_FORMAT:
            raise PreconditionError(f"{path} is not a saved world (format {WORLD_FORMAT})")
        world = blob["world"]
        if not isinstance(world, cls):
            raise PreconditionError(f"{path} does not hold a world object")
        return world


def run_scenario(scenario: Scenario):
    """Play a scenario start to finish.

    Returns (observation logs by party, metrics report, exit status); the
    status is 0 only when every post-run audit passed."""
    world = SimWorld(scenario)
    world.run()
    report = world.report()
    return world.logs, report, report.exit_status
