"""Temporal address certificates: issuance, verification, and the proxy path.

A certificate binds a client's ephemeral public key to the source address the
CA observed, with a timestamp. Clients on networks that cannot reach the CA
directly enroll through a proxy; the certificate is then XOR-split across
share servers, each of which releases its share only to a requester connecting
from the certified address, so one honest share server suffices to expose a
proxy that lied about the address.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .crypto import SigningKeyPair, sign, verify
from .encoding import decode_fields, decode_u64, encode_fields, encode_u64
from .errors import FormatError, ParameterError
from .rng import Rng, ensure_rng

DEFAULT_MAX_AGE = 24 * 3600  # seconds


def _check_ip(text: str) -> str:
    try:
        ipaddress.ip_address(text)
    except ValueError as exc:
        raise FormatError(f"not an IP address: {text!r}") from exc
    return text


@dataclass(frozen=True)
class TemporalIpCertificate:
    client_ip: str
    issued_at: int  # unix seconds
    client_public_key: bytes
    ca_id: str
    ca_signature: bytes

    def signed_payload(self) -> bytes:
        return encode_fields(
            self.client_ip.encode(),
            encode_u64(self.issued_at),
            self.client_public_key,
            self.ca_id.encode(),
        )

    def to_bytes(self) -> bytes:
        return encode_fields(
            self.client_ip.encode(),
            encode_u64(self.issued_at),
            self.client_public_key,
            self.ca_id.encode(),
            self.ca_signature,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "TemporalIpCertificate":
        ip, ts, key, ca_id, sig = decode_fields(data, 5)
        if len(key) != 32:
            raise FormatError("certificate key must be 32 bytes")
        if len(sig) != 64:
            raise FormatError("certificate signature must be 64 bytes")
        return cls(
            client_ip=_check_ip(ip.decode()),
            issued_at=decode_u64(ts),
            client_public_key=key,
            ca_id=ca_id.decode(),
            ca_signature=sig,
        )


class CertificateAuthority:
    """Automated issuer. Keeps an append-only log of what it certified."""

    def __init__(self, ca_id: str, rng: Rng | None = None):
        self.ca_id = ca_id
        self.keypair = SigningKeyPair.generate(ensure_rng(rng))
        self.issuance_log: list[tuple[int, str, bytes]] = []

    @property
    def public_key(self) -> bytes:
        return self.keypair.public

    def issue(
        self, observed_source_ip: str, client_public_key: bytes, now: int
    ) -> TemporalIpCertificate:
        # binds the observed source address, never a claimed one
        _check_ip(observed_source_ip)
        if len(client_public_key) != 32:
            raise FormatError("client public key must be 32 bytes")
        draft = TemporalIpCertificate(
            client_ip=observed_source_ip,
            issued_at=now,
            client_public_key=client_public_key,
            ca_id=self.ca_id,
            ca_signature=b"\x00" * 64,
        )
        signature = sign(self.keypair, draft.signed_payload())
        cert = TemporalIpCertificate(
            client_ip=draft.client_ip,
            issued_at=draft.issued_at,
            client_public_key=draft.client_public_key,
            ca_id=draft.ca_id,
            ca_signature=signature,
        )
        self.issuance_log.append((now, observed_source_ip, client_public_key))
        return cert


def verify_certificate(
    cert: TemporalIpCertificate,
    trusted_ca_keys: Mapping[str, bytes],
    now: int,
    max_age: int = DEFAULT_MAX_AGE,
) -> bool:
    ca_key = trusted_ca_keys.get(cert.ca_id)
    if ca_key is None:
        return False
    if not verify(ca_key, cert.signed_payload(), cert.ca_signature):
        return False
    return 0 <= now - cert.issued_at <= max_age


# ---------------------------------------------------------------------------
# proxy-mediated issuance


@dataclass(frozen=True)
class CertificateShare:
    share_index: int
    share_bytes: bytes
    server_id: str


@dataclass(frozen=True)
class MisbehaviorReport:
    reporter: str
    certified_ip: str
    observed_ip: str


def split_certificate(
    cert: TemporalIpCertificate,
    server_ids: Sequence[str],
    rng: Rng | None = None,
) -> list[CertificateShare]:
    """k-of-k XOR split; any proper subset is information-free about the body."""
    if not server_ids:
        raise ParameterError("at least one share server required")
    rng = ensure_rng(rng)
    blob = cert.to_bytes()
    shares: list[bytes] = [rng.randbytes(len(blob)) for _ in range(len(server_ids) - 1)]
    last = bytearray(blob)
    for s in shares:
        for i, b in enumerate(s):
            last[i] ^= b
    shares.append(bytes(last))
    return [
        CertificateShare(share_index=i, share_bytes=s, server_id=sid)
        for i, (sid, s) in enumerate(zip(server_ids, shares))
    ]


def reassemble_certificate(shares: Sequence[CertificateShare]) -> TemporalIpCertificate:
    if not shares:
        raise ParameterError("no shares supplied")
    if len({s.share_index for s in shares}) != len(shares):
        raise ParameterError("duplicate share indices")
    length = len(shares[0].share_bytes)
    if any(len(s.share_bytes) != length for s in shares):
        raise FormatError("share lengths disagree")
    blob = bytearray(length)
    for s in shares:
        for i, b in enumerate(s.share_bytes):
            blob[i] ^= b
    # a missing share leaves uniformly random bytes, which will not parse
    return TemporalIpCertificate.from_bytes(bytes(blob))


class ShareServer:
    """Holds one certificate share and releases it only to the certified address."""

    def __init__(self, server_id: str):
        self.server_id = server_id
        self._share: CertificateShare | None = None
        self._certified_ip: str | None = None

    def store(self, share: CertificateShare, certified_ip: str) -> None:
        self._share = share
        self._certified_ip = certified_ip

    def release(self, requester_source_ip: str) -> CertificateShare | MisbehaviorReport:
        if self._share is None or self._certified_ip is None:
            raise ParameterError(f"{self.server_id} holds no share")
        if requester_source_ip != self._certified_ip:
            return MisbehaviorReport(
                reporter=self.server_id,
                certified_ip=self._certified_ip,
                observed_ip=requester_source_ip,
            )
        return self._share


@dataclass
class ProxyIssuer:
    """Enrollment relay for clients that cannot reach the CA themselves.

    The address the CA observes is the proxy's egress address; a dishonest
    proxy is modeled by `forged_ip`, standing in for any trick that makes the
    CA certify an address the client's traffic will not actually come from.
    """

    proxy_id: str
    ip: str
    forged_ip: str | None = None

    def claimed_ip(self) -> str:
        return self.forged_ip if self.forged_ip is not None else self.ip


def proxy_issue(
    ca: CertificateAuthority,
    proxy: ProxyIssuer,
    share_servers: Sequence[ShareServer],
    client,
    now: int,
    rng: Rng | None = None,
) -> TemporalIpCertificate | MisbehaviorReport:
    """Full proxy enrollment: issue, split, distribute, collect, reassemble.

    `client` needs `public_key` (bytes) and `ip` (the egress address its share
    requests arrive from, i.e. the proxy's address when traffic is relayed).
    Returns the reassembled certificate, or the first mismatch report.
    """
    if not share_servers:
        raise ParameterError("at least one share server required")
    cert = ca.issue(proxy.claimed_ip(), client.public_key, now)
    shares = split_certificate(cert, [s.server_id for s in share_servers], rng)
    for server, share in zip(share_servers, shares):
        server.store(share, cert.client_ip)
    collected: list[CertificateShare] = []
    for server in share_servers:
        result = server.release(client.ip)
        if isinstance(result, MisbehaviorReport):
            return result
        collected.append(result)
    return reassemble_certificate(collected)
