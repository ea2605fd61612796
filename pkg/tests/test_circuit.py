"""Circuit establishment, layered identity construction, and onion transport."""

from __future__ import annotations

import pytest

from peelback.cells import CellCommand
from peelback.circuit import (
    LAYER_ENTRY,
    LAYER_EXIT,
    LAYER_MIDDLE,
    AuthBundle,
    HopChannel,
    IdentityLayer,
    RelayFlags,
    bundle_signing_payload,
    frame_recognized,
    try_unframe,
)
from peelback.crypto import (
    HybridCiphertext,
    SigningKeyPair,
    combine_shares,
    hash_digest,
    partial_decrypt,
    verify,
)
from peelback.errors import FormatError, ParameterError, PreconditionError
from peelback.rng import Rng

from helpers import CLIENT_IP, MiniNet, establish, open_flow


def peel_once(committee, ciphertext_bytes: bytes) -> IdentityLayer:
    """Decryption oracle: open one escrow layer with a share quorum."""
    pk, shares = committee
    ct = HybridCiphertext.from_bytes(ciphertext_bytes[1:], pk.modulus_bytes)
    parts = [partial_decrypt(s, ct) for s in shares[:3]]
    layer = IdentityLayer.from_bytes(combine_shares(pk, ct, parts))
    assert layer.kind == ciphertext_bytes[0], "cleartext kind tag must match the sealed layer"
    return layer


@pytest.fixture(scope="module")
def net(small_committee):
    return MiniNet(small_committee[0], n_relays=3)


@pytest.fixture(scope="module")
def built(net):
    circ, cert_key = establish(net, ["relay-0", "relay-1", "relay-2"])
    assert circ.complete, circ.failed
    return circ, cert_key


# ---------------------------------------------------------------------------
# primitives


class TestHopChannel:
    def test_roundtrip_both_directions(self):
        a = HopChannel(bytes(32))
        b = HopChannel(bytes(32))
        for msg in [b"", b"x", b"hello" * 50]:
            assert b.unwrap_forward(a.wrap_forward(msg)) == msg
            assert a.unwrap_backward(b.wrap_backward(msg)) == msg

    def test_counters_give_fresh_streams(self):
        a = HopChannel(bytes(32))
        first = a.wrap_forward(bytes(64))
        second = a.wrap_forward(bytes(64))
        assert first != second

    def test_directions_independent(self):
        a = HopChannel(bytes(32))
        assert a.wrap_forward(bytes(32)) != a.wrap_backward(bytes(32))

    def test_key_length_checked(self):
        with pytest.raises(ParameterError):
            HopChannel(b"short")


class TestRecognition:
    def test_roundtrip(self):
        assert try_unframe(frame_recognized(b"payload")) == b"payload"

    def test_tampered_body_unrecognized(self):
        framed = bytearray(frame_recognized(b"payload"))
        framed[-1] ^= 1
        assert try_unframe(bytes(framed)) is None

    def test_garbage_unrecognized(self):
        assert try_unframe(b"\x00" * 40) is None
        assert try_unframe(b"ab") is None


class TestIdentityLayerCodec:
    def test_middle_roundtrip(self):
        layer = IdentityLayer(
            kind=LAYER_MIDDLE,
            inner=b"ct" * 40,
            inbound_hop_key=bytes(32),
            predecessor_id=bytes(range(32)),
            predecessor_sig=bytes(64),
            next_hop_key=bytes([7] * 32),
            chain_sig=bytes([9] * 64),
        )
        assert IdentityLayer.from_bytes(layer.to_bytes()) == layer

    def test_entry_and_exit_shapes_enforced(self):
        with pytest.raises(FormatError):
            IdentityLayer(kind=LAYER_ENTRY, inner=b"c", inbound_hop_key=bytes(32))
        with pytest.raises(FormatError):
            IdentityLayer(
                kind=LAYER_EXIT,
                inner=b"c",
                inbound_hop_key=bytes(32),
                predecessor_id=bytes(32),
                predecessor_sig=bytes(64),
                next_hop_key=bytes(32),
                chain_sig=bytes(64),
            )
        with pytest.raises(ParameterError):
            IdentityLayer(kind=9, inner=b"c", inbound_hop_key=bytes(32))

    def test_bundle_roundtrip(self):
        bundle = AuthBundle(
            inner_identity=b"ct",
            hop_key=bytes(32),
            relay_id_key=bytes([1] * 32),
            relay_listed=False,
            bridge_certificate=bytes(64),
            signature=bytes([2] * 64),
        )
        assert AuthBundle.from_bytes(bundle.to_bytes()) == bundle


# ---------------------------------------------------------------------------
# full establishment


class TestEstablishment:
    def test_three_hops_complete(self, built):
        circ, _ = built
        assert circ.established == 3
        assert circ.id_digest is not None and len(circ.id_digest) == 32
        assert len(circ.hop_keys) == 3

    def test_roles_assigned_in_order(self, net, built):
        roles = {}
        for party, node in net.relays.items():
            for rc in node.circuits.values():
                roles[party] = rc.role
        assert roles["relay-0"] == "entry"
        assert roles["relay-1"] == "middle"
        assert roles["relay-2"] == "exit"

    def test_one_round_trip_per_hop(self, built):
        circ, _ = built
        assert circ.rounds_per_hop == [1, 1, 1]

    def test_exit_digest_matches_announced(self, net, built):
        circ, _ = built
        exit_node = net.relays["relay-2"]
        rc = next(iter(exit_node.circuits.values()))
        assert rc.identity.digest == circ.id_digest
        assert hash_digest(rc.identity.to_bytes()) == circ.id_digest

    def test_layer_nesting_decrypts_to_client_views(
        self, net, built, small_committee
    ):
        circ, cert_key = built
        exit_node = net.relays["relay-2"]
        exit_ct = next(iter(exit_node.circuits.values())).identity.to_bytes()

        exit_layer = peel_once(small_committee, exit_ct)
        assert exit_layer.kind == LAYER_EXIT
        assert exit_layer.inbound_hop_key == circ.hop_keys[2].public
        assert exit_layer.predecessor_id == net.relays["relay-1"].identity.relay_id_key
        assert verify(
            exit_layer.predecessor_id,
            bundle_signing_payload(
                exit_layer.inner, exit_layer.inbound_hop_key, exit_layer.predecessor_id
            ),
            exit_layer.predecessor_sig,
        )

        middle_layer = peel_once(small_committee, exit_layer.inner)
        assert middle_layer.kind == LAYER_MIDDLE
        assert middle_layer.inbound_hop_key == circ.hop_keys[1].public
        assert middle_layer.next_hop_key == circ.hop_keys[2].public
        assert verify(
            middle_layer.inbound_hop_key, middle_layer.next_hop_key, middle_layer.chain_sig
        )
        assert middle_layer.predecessor_id == net.relays["relay-0"].identity.relay_id_key

        entry_layer = peel_once(small_committee, middle_layer.inner)
        assert entry_layer.kind == LAYER_ENTRY
        assert entry_layer.inner == circ.cert.to_bytes()
        assert entry_layer.inbound_hop_key == cert_key.public
        assert entry_layer.next_hop_key == circ.hop_keys[1].public
        assert verify(cert_key.public, entry_layer.next_hop_key, entry_layer.chain_sig)

    @pytest.mark.parametrize("length", [2, 4, 5, 6])
    def test_other_circuit_lengths(self, small_committee, length):
        net = MiniNet(small_committee[0], n_relays=length, seed=f"tests:len-{length}")
        path = [f"relay-{i}" for i in range(length)]
        circ, _ = establish(net, path, seed=f"tests:client-{length}")
        assert circ.complete, circ.failed
        assert circ.rounds_per_hop == [1] * length
        exit_node = net.relays[path[-1]]
        ct = next(iter(exit_node.circuits.values())).identity.to_bytes()
        kinds = []
        for _ in range(length):
            layer = peel_once(small_committee, ct)
            kinds.append(layer.kind)
            ct = layer.inner
        assert kinds[0] == LAYER_EXIT
        assert kinds[-1] == LAYER_ENTRY
        assert all(k == LAYER_MIDDLE for k in kinds[1:-1])
        assert ct == circ.cert.to_bytes()

    def test_large_padding_still_one_round_per_hop(self, small_committee):
        net = MiniNet(small_committee[0], n_relays=3, seed="tests:pad")
        circ, _ = establish(
            net,
            ["relay-0", "relay-1", "relay-2"],
            extra_padding=10 * 1024,
            seed="tests:client-pad",
        )
        assert circ.complete, circ.failed
        assert circ.rounds_per_hop == [1, 1, 1]

    def test_baseline_mode_builds_no_identities(self, small_committee):
        net = MiniNet(small_committee[0], n_relays=3, seldom=False, seed="tests:base")
        circ, _ = establish(net, ["relay-0", "relay-1", "relay-2"], seldom=False)
        assert circ.complete, circ.failed
        assert circ.id_digest is None
        for node in net.relays.values():
            for rc in node.circuits.values():
                assert rc.identity is None

    def test_non_adjacent_links_never_carry_equal_payloads(self, small_committee):
        net = MiniNet(small_committee[0], n_relays=3, seed="tests:unlink")
        path = ["relay-0", "relay-1", "relay-2"]
        circ, _ = establish(net, path, seed="tests:client-unlink")
        open_flow(net, circ, path)
        by_link: dict[tuple[str, str], set[bytes]] = {}
        for frm, to, burst in net.traffic:
            for cell in burst:
                if cell.payload:
                    by_link.setdefault((frm, to), set()).add(cell.payload)
        links = list(by_link)
        for i, a in enumerate(links):
            for b in links[i + 1 :]:
                if a[1] == b[0] or b[1] == a[0]:
                    continue  # adjacent links share the relay in the middle
                assert not (by_link[a] & by_link[b]), (a, b)


# ---------------------------------------------------------------------------
# flows


class TestFlows:
    def test_signed_flow_accepted_and_stored(self, small_committee):
        net = MiniNet(small_committee[0], n_relays=3, seed="tests:flow-ok")
        path = ["relay-0", "relay-1", "relay-2"]
        circ, _ = establish(net, path, seed="tests:client-flow")
        ok, record, _ = open_flow(net, circ, path, dest_ip="203.0.113.10", dest_port=8443)
        assert ok
        store = net.relays["relay-2"].exit_store
        ref = next(iter(net.relays["relay-2"].circuits))
        flows = store._open[ref].envelopes
        assert len(flows) == 1
        envelope = flows[0]
        assert envelope.record == record
        digest, signature = store.open_envelope(envelope)
        assert digest == circ.id_digest
        assert len(signature) == 64

    def test_twenty_flows_share_one_identity(self, small_committee):
        net = MiniNet(small_committee[0], n_relays=3, seed="tests:flow-20")
        path = ["relay-0", "relay-1", "relay-2"]
        circ, _ = establish(net, path, seed="tests:client-20")
        for i in range(20):
            ok, _, _ = open_flow(
                net, circ, path, dest_port=1000 + i, now_s=1_700_100 + i,
                seed=f"tests:flow-{i}",
            )
            assert ok
        store = net.relays["relay-2"].exit_store
        ref = next(iter(net.relays["relay-2"].circuits))
        assert len(store._open[ref].envelopes) == 20

    def test_unsigned_flow_refused_nothing_stored(self, small_committee):
        net = MiniNet(small_committee[0], n_relays=3, seed="tests:flow-bad")
        path = ["relay-0", "relay-1", "relay-2"]
        circ, _ = establish(net, path, seed="tests:client-bad")
        ok, _, reason = open_flow(net, circ, path, sign_flow=False)
        assert not ok
        assert b"bad_flow_sig" in reason
        store = net.relays["relay-2"].exit_store
        ref = next(iter(net.relays["relay-2"].circuits))
        assert store._open[ref].envelopes == []


# ---------------------------------------------------------------------------
# refusals


class TestRefusals:
    PATH = ["relay-0", "relay-1", "relay-2"]

    def test_expired_certificate(self, small_committee):
        net = MiniNet(small_committee[0], seed="tests:ref-exp")
        rng = Rng.from_seed("tests:exp-key")
        key = SigningKeyPair.generate(rng)
        stale = net.ca.issue(CLIENT_IP, key.public, now=1_700_000 - 2 * 86400)
        circ, _ = establish(net, self.PATH, cert=stale, cert_key=key)
        assert circ.failed == "bad_certificate"

    def test_source_ip_mismatch(self, small_committee):
        net = MiniNet(small_committee[0], seed="tests:ref-ip")
        circ, _ = establish(net, self.PATH, client_ip=CLIENT_IP, source_ip="6.6.6.6")
        assert circ.failed == "ip_mismatch"

    def test_entry_skipping_ip_check_accepts_mismatch(self, small_committee):
        net = MiniNet(
            small_committee[0],
            seed="tests:ref-skip",
            flags={"relay-0": RelayFlags(skip_ip_check=True)},
        )
        circ, _ = establish(net, self.PATH, client_ip=CLIENT_IP, source_ip="6.6.6.6")
        assert circ.complete

    def test_unlisted_predecessor_refused_downstream(self, small_committee):
        net = MiniNet(small_committee[0], unlisted=("relay-1",), seed="tests:ref-unl")
        circ, _ = establish(net, self.PATH)
        assert circ.failed == "unknown_predecessor"
        assert circ.established == 2  # entry and middle built, exit refused

    def test_bridge_certificate_substitutes_for_listing(self, small_committee):
        net = MiniNet(small_committee[0], bridge=("relay-1",), seed="tests:ref-br")
        circ, _ = establish(net, self.PATH)
        assert circ.complete, circ.failed

    def test_extension_to_unknown_relay_refused(self, small_committee):
        net = MiniNet(small_committee[0], seed="tests:ref-unk")
        path = ["relay-0", "relay-1", "relay-2"]
        circ, _ = establish(net, path, seed="tests:client-unk")
        assert circ.complete
        # forge an extension to a relay the directory has never seen
        from peelback.circuit import client_extend

        circ.path.append(
            type(net.relays["relay-0"].identity)(
                relay_id_key=bytes(32),
                listed=True,
                ip="10.9.9.9",
                channel_key=net.relays["relay-0"].identity.channel_key,
            )
        )
        cells = client_extend(circ, Rng.from_seed("tests:unk"))
        replies = net.exchange(path[0], cells, source_ip=CLIENT_IP, now_ms=0)
        from peelback.circuit import client_absorb_ack

        ok, _ = client_absorb_ack(circ, replies[0], "extend")
        assert not ok
        assert circ.failed == "unknown_next_relay"


# ---------------------------------------------------------------------------
# relay misbehavior changes what lands in the escrow layers


class TestFaultInjection:
    PATH = ["relay-0", "relay-1", "relay-2"]

    def _foreign_cert(self, net):
        rng = Rng.from_seed("tests:foreign")
        other = SigningKeyPair.generate(rng)
        return net.ca.issue("8.8.4.4", other.public, now=1_700_000).to_bytes()

    def test_entry_cert_swap_lands_foreign_cert_in_layer(self, small_committee):
        net = MiniNet(small_committee[0], seed="tests:fault-swap")
        foreign = self._foreign_cert(net)
        net.relays["relay-0"].flags = RelayFlags(substitute_cert=foreign)
        circ, cert_key = establish(net, self.PATH, seed="tests:client-swap")
        assert circ.complete  # nothing visible to the client at build time
        exit_ct = next(
            iter(net.relays["relay-2"].circuits.values())
        ).identity.to_bytes()
        layer = peel_once(small_committee, exit_ct)
        layer = peel_once(small_committee, layer.inner)
        entry_layer = peel_once(small_committee, layer.inner)
        assert entry_layer.inner == foreign
        assert entry_layer.inner != circ.cert.to_bytes()
        # the swap is detectable: the stored chain signature no longer verifies
        # under the certificate's key
        from peelback.certs import TemporalIpCertificate

        swapped_key = TemporalIpCertificate.from_bytes(entry_layer.inner).client_public_key
        assert not verify(swapped_key, entry_layer.next_hop_key, entry_layer.chain_sig)
        assert verify(cert_key.public, entry_layer.next_hop_key, entry_layer.chain_sig)

    def test_middle_corrupt_stored_predecessor_sig(self, small_committee):
        net = MiniNet(
            small_committee[0],
            seed="tests:fault-sig",
            flags={"relay-1": RelayFlags(corrupt_stored_pred_sig=True)},
        )
        circ, _ = establish(net, self.PATH, seed="tests:client-sig")
        assert circ.complete
        exit_ct = next(
            iter(net.relays["relay-2"].circuits.values())
        ).identity.to_bytes()
        exit_layer = peel_once(small_committee, exit_ct)
        assert verify(  # the exit checked the bundle it received, so its layer is fine
            exit_layer.predecessor_id,
            bundle_signing_payload(
                exit_layer.inner, exit_layer.inbound_hop_key, exit_layer.predecessor_id
            ),
            exit_layer.predecessor_sig,
        )
        middle_layer = peel_once(small_committee, exit_layer.inner)
        assert not verify(
            middle_layer.predecessor_id,
            bundle_signing_payload(
                middle_layer.inner,
                middle_layer.inbound_hop_key,
                middle_layer.predecessor_id,
            ),
            middle_layer.predecessor_sig,
        )

    def test_middle_wrong_chain_key_breaks_stored_chain(self, small_committee):
        net = MiniNet(
            small_committee[0],
            seed="tests:fault-chain",
            flags={"relay-1": RelayFlags(wrong_chain_key=True)},
        )
        circ, _ = establish(net, self.PATH, seed="tests:client-chain")
        assert circ.complete
        exit_ct = next(
            iter(net.relays["relay-2"].circuits.values())
        ).identity.to_bytes()
        exit_layer = peel_once(small_committee, exit_ct)
        middle_layer = peel_once(small_committee, exit_layer.inner)
        assert middle_layer.next_hop_key != circ.hop_keys[2].public
        assert not verify(
            middle_layer.inbound_hop_key, middle_layer.next_hop_key, middle_layer.chain_sig
        )

    def test_entry_leaks_certificate_out_of_band(self, small_committee):
        net = MiniNet(
            small_committee[0],
            seed="tests:fault-leak",
            flags={"relay-0": RelayFlags(leak_cert_to="relay-1")},
        )
        circ, _ = establish(net, self.PATH, seed="tests:client-leak")
        assert circ.complete
        assert len(net.oob) == 1
        frm, to, fields = net.oob[0]
        assert (frm, to) == ("relay-0", "relay-1")
        assert fields[0][0] == "certificate"
        assert fields[0][2] == circ.cert.to_bytes()

    def test_hop_key_reuse_is_structurally_accepted(self, small_committee):
        net = MiniNet(small_committee[0], seed="tests:fault-reuse")
        first, _ = establish(net, self.PATH, seed="tests:client-r1", circuit_id=21)
        assert first.complete
        reused = first.hop_keys[1]
        second, _ = establish(
            net,
            self.PATH,
            seed="tests:client-r2",
            circuit_id=22,
            reuse_hop_key=reused,
        )
        assert second.complete
        assert second.hop_keys[1].public == reused.public

    def test_ack_cells_use_expected_commands(self, small_committee):
        net = MiniNet(small_committee[0], seed="tests:cmds")
        establish(net, self.PATH, seed="tests:client-cmds")
        commands = {
            cell.command
            for _, to, burst in net.traffic
            if to == "client"
            for cell in burst
        }
        assert commands == {CellCommand.CREATED2, CellCommand.EXTENDED2}


class TestClientPreconditions:
    def test_extend_before_entry(self, small_committee):
        net = MiniNet(small_committee[0], seed="tests:pre")
        from peelback.circuit import client_begin_circuit, client_extend

        rng = Rng.from_seed("tests:pre-client")
        key = SigningKeyPair.generate(rng)
        cert = net.ca.issue(CLIENT_IP, key.public, now=1_700_000)
        idents = [net.relays[p].identity for p in ["relay-0", "relay-1"]]
        _, circ = client_begin_circuit(cert, key, idents, 5, rng)
        with pytest.raises(PreconditionError):
            client_extend(circ, rng)

    def test_flow_before_complete(self, small_committee):
        net = MiniNet(small_committee[0], seed="tests:pre2")
        from peelback.circuit import client_begin_circuit, client_open_flow

        rng = Rng.from_seed("tests:pre2-client")
        key = SigningKeyPair.generate(rng)
        cert = net.ca.issue(CLIENT_IP, key.public, now=1_700_000)
        idents = [net.relays[p].identity for p in ["relay-0", "relay-1"]]
        _, circ = client_begin_circuit(cert, key, idents, 5, rng)
        with pytest.raises(PreconditionError):
            client_open_flow(circ, "1.2.3.4", 80, 1_700_000, rng)

    def test_too_short_path(self, small_committee):
        net = MiniNet(small_committee[0], seed="tests:pre3")
        from peelback.circuit import client_begin_circuit

        rng = Rng.from_seed("tests:pre3-client")
        key = SigningKeyPair.generate(rng)
        cert = net.ca.issue(CLIENT_IP, key.public, now=1_700_000)
        with pytest.raises(ParameterError):
            client_begin_circuit(cert, key, [net.relays["relay-0"].identity], 5, rng)
