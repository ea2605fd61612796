"""Cryptographic primitives: t-of-n threshold RSA with hybrid AES bulk mode,
ed25519 signatures, authenticated symmetric sealing, and X25519 channel sealing.

The threshold scheme is the heart of the package. A dealer generates an RSA
modulus from two safe primes and splits the decryption exponent over a random
polynomial so that any `threshold` committee members can decrypt cooperatively
while fewer learn nothing. Decryption shares are combined with integer Lagrange
coefficients scaled by n! so all arithmetic stays over the integers; no member
ever reconstructs the private exponent itself.

Plaintexts longer than one RSA block are handled hybrid style: a fresh 32-byte
AES key plus the plaintext head fill the RSA block, and the remainder travels
under AES-256-GCM. The RSA block uses randomized two-prefix padding whose
structure doubles as the integrity check for the combined result: a wrong or
corrupted share garbles the block and the padding check fails.

Randomness: every generating operation takes `rng=None`; None selects OS
entropy, a seeded Rng makes the operation reproducible.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import gmpy2
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import (
    FormatError,
    InsufficientSharesError,
    IntegrityError,
    ParameterError,
    TamperError,
)
from .rng import Rng, ensure_rng

RSA_EXPONENT = 65537
AES_KEY_BYTES = 32
GCM_NONCE_BYTES = 12
GCM_TAG_BYTES = 16
DIGEST_BYTES = 32
SIGNATURE_BYTES = 64
PUBLIC_KEY_BYTES = 32
# two marker bytes + zero separator + at least 8 random pad bytes
_PAD_OVERHEAD = 11
_MIN_PAD = 8


def hash_digest(data: bytes) -> bytes:
    """SHA-256. The only digest used anywhere in the package."""
    return hashlib.sha256(data).digest()


# ---------------------------------------------------------------------------
# threshold RSA


@dataclass(frozen=True)
class ThresholdPublicKey:
    modulus: int
    exponent: int
    n_members: int
    threshold: int
    epoch: int = 0

    def __post_init__(self):
        if self.n_members < 1:
            raise ParameterError("committee must have at least one member")
        if not 1 <= self.threshold <= self.n_members:
            raise ParameterError("threshold must be within [1, n_members]")
        if self.exponent <= self.n_members:
            raise ParameterError("public exponent must exceed the member count")
        if self.modulus < 3 or self.modulus % 2 == 0:
            raise ParameterError("modulus must be an odd integer > 2")

    @property
    def modulus_bytes(self) -> int:
        return (self.modulus.bit_length() + 7) // 8

    @property
    def block_capacity(self) -> int:
        """Largest plaintext that fits a single RSA block after padding."""
        return self.modulus_bytes - _PAD_OVERHEAD


@dataclass(frozen=True)
class ThresholdKeyShare:
    member_index: int  # 1-based
    value: int
    modulus: int
    n_members: int
    epoch: int = 0

    def __post_init__(self):
        if not 1 <= self.member_index <= self.n_members:
            raise ParameterError("member index out of range")
        if self.value < 0:
            raise ParameterError("share value must be non-negative")


@dataclass(frozen=True)
class DecryptionShare:
    member_index: int
    value: int


@dataclass(frozen=True)
class AesTail:
    nonce: bytes
    ciphertext: bytes
    tag: bytes


@dataclass(frozen=True)
class HybridCiphertext:
    """RSA block plus optional AES-GCM tail for long plaintexts.

    Serialization is the raw concatenation rsa_block || nonce || ciphertext ||
    tag (tail parts only when present); it parses unambiguously given the
    modulus byte length and is the byte string every identity digest is
    computed over.
    """

    rsa_block: bytes
    aes_tail: AesTail | None = None

    def to_bytes(self) -> bytes:
        if self.aes_tail is None:
            return self.rsa_block
        t = self.aes_tail
        return self.rsa_block + t.nonce + t.ciphertext + t.tag

    @classmethod
    def from_bytes(cls, data: bytes, modulus_bytes: int) -> "HybridCiphertext":
        if len(data) < modulus_bytes:
            raise FormatError("ciphertext shorter than one RSA block")
        block, rest = data[:modulus_bytes], data[modulus_bytes:]
        if not rest:
            return cls(rsa_block=block)
        if len(rest) < GCM_NONCE_BYTES + GCM_TAG_BYTES + 1:
            raise FormatError("truncated AES tail")
        tail = AesTail(
            nonce=rest[:GCM_NONCE_BYTES],
            ciphertext=rest[GCM_NONCE_BYTES:-GCM_TAG_BYTES],
            tag=rest[-GCM_TAG_BYTES:],
        )
        return cls(rsa_block=block, aes_tail=tail)


_SIEVE_LIMIT = 60000
_WINDOW = 1 << 16
_small_primes_cache: list[int] | None = None


def _small_primes() -> list[int]:
    global _small_primes_cache
    if _small_primes_cache is None:
        sieve = bytearray(_SIEVE_LIMIT)
        primes = []
        for n in range(3, _SIEVE_LIMIT, 2):
            if sieve[n]:
                continue
            primes.append(n)
            sieve[n * n :: 2 * n] = b"\x01" * len(sieve[n * n :: 2 * n])
        _small_primes_cache = primes
    return _small_primes_cache


def _find_safe_prime(bits: int, rng: Rng) -> int:
    """Random prime p = 2q + 1 with q prime and p exactly `bits` bits.

    Candidates q are sieved in windows: for each small prime, positions where
    either q or 2q+1 would be divisible are struck out before any expensive
    primality test runs. Top two bits of q are forced so products of two such
    primes always reach the full target modulus size.
    """
    if bits < 32:
        raise ParameterError("prime size too small")
    primes = _small_primes()
    while True:
        base = rng.getrandbits(bits - 1)
        base |= (0b11 << (bits - 3)) | 1
        base &= (1 << (bits - 1)) - 1
        flags = bytearray(_WINDOW)
        one = b"\x01"
        for sp in primes:
            r = base % sp
            inv2 = (sp + 1) >> 1
            inv4 = inv2 * inv2 % sp
            i0 = (-r * inv2) % sp
            i1 = (-(2 * r + 1) * inv4) % sp
            flags[i0::sp] = one * len(range(i0, _WINDOW, sp))
            flags[i1::sp] = one * len(range(i1, _WINDOW, sp))
        pos = flags.find(0)
        while pos >= 0:
            q = base + 2 * pos
            if gmpy2.is_prime(q):
                p = 2 * q + 1
                if p.bit_length() == bits and gmpy2.is_prime(p):
                    return int(p)
            pos = flags.find(0, pos + 1)


def dealer_keygen(
    n_members: int,
    threshold: int,
    modulus_bits: int = 2048,
    rng: Rng | None = None,
    epoch: int = 0,
) -> tuple[ThresholdPublicKey, list[ThresholdKeyShare]]:
    """Generate a threshold RSA key and one share per committee member.

    The modulus is a product of two distinct safe primes; the decryption
    exponent d = e^-1 mod p'q' is the constant term of a random polynomial of
    degree threshold-1 over Z_{p'q'}, and member i holds its evaluation at i.
    """
    if n_members < 1:
        raise ParameterError("committee must have at least one member")
    if not 1 <= threshold <= n_members:
        raise ParameterError("threshold must be within [1, n_members]")
    if n_members >= RSA_EXPONENT:
        raise ParameterError("member count must stay below the public exponent")
    if modulus_bits < 64 or modulus_bits % 2:
        raise ParameterError("modulus_bits must be even and at least 64")
    rng = ensure_rng(rng)
    half = modulus_bits // 2
    p = _find_safe_prime(half, rng)
    q = _find_safe_prime(half, rng)
    while q == p:
        q = _find_safe_prime(half, rng)
    modulus = p * q
    m = ((p - 1) // 2) * ((q - 1) // 2)
    d = int(gmpy2.invert(RSA_EXPONENT, m))
    coeffs = [d] + [rng.randrange(m) for _ in range(threshold - 1)]
    pk = ThresholdPublicKey(
        modulus=modulus,
        exponent=RSA_EXPONENT,
        n_members=n_members,
        threshold=threshold,
        epoch=epoch,
    )
    shares = []
    for i in range(1, n_members + 1):
        acc = 0
        for c in reversed(coeffs):
            acc = (acc * i + c) % m
        shares.append(
            ThresholdKeyShare(
                member_index=i,
                value=acc,
                modulus=modulus,
                n_members=n_members,
                epoch=epoch,
            )
        )
    return pk, shares


def _pad_block(payload: bytes, k: int, rng: Rng) -> bytes:
    ps_len = k - 3 - len(payload)
    if ps_len < _MIN_PAD:
        raise ParameterError("payload too long for one RSA block")
    ps = bytearray(rng.randbytes(ps_len))
    for i, b in enumerate(ps):
        while ps[i] == 0:
            ps[i] = rng.randbytes(1)[0]
    return b"\x00\x02" + bytes(ps) + b"\x00" + payload


def _unpad_block(block: bytes) -> bytes:
    if len(block) < _PAD_OVERHEAD or block[0] != 0 or block[1] != 2:
        raise IntegrityError("padding structure check failed")
    sep = block.find(b"\x00", 2)
    if sep < 2 + _MIN_PAD:
        raise IntegrityError("padding structure check failed")
    return block[sep + 1 :]


def threshold_encrypt(
    pk: ThresholdPublicKey, plaintext: bytes, rng: Rng | None = None
) -> HybridCiphertext:
    """Encrypt bytes of any length to the committee.

    Fits a single padded RSA block when possible; otherwise a fresh AES key and
    the plaintext head go in the block and the remainder rides an AES-GCM tail.
    """
    rng = ensure_rng(rng)
    k = pk.modulus_bytes
    cap = pk.block_capacity
    if len(plaintext) <= cap:
        block = _pad_block(plaintext, k, rng)
        tail = None
    else:
        key = rng.randbytes(AES_KEY_BYTES)
        head = plaintext[: cap - AES_KEY_BYTES]
        block = _pad_block(key + head, k, rng)
        nonce = rng.randbytes(GCM_NONCE_BYTES)
        sealed = AESGCM(key).encrypt(nonce, plaintext[len(head) :], None)
        tail = AesTail(nonce=nonce, ciphertext=sealed[:-GCM_TAG_BYTES], tag=sealed[-GCM_TAG_BYTES:])
    m_int = int.from_bytes(block, "big")
    c = gmpy2.powmod(m_int, pk.exponent, pk.modulus)
    return HybridCiphertext(rsa_block=int(c).to_bytes(k, "big"), aes_tail=tail)


def partial_decrypt(share: ThresholdKeyShare, ct: HybridCiphertext) -> DecryptionShare:
    """Member's contribution c^(2 * n! * s_i) mod N. Deterministic."""
    k = (share.modulus.bit_length() + 7) // 8
    if len(ct.rsa_block) != k:
        raise FormatError("rsa_block length does not match the modulus")
    c = int.from_bytes(ct.rsa_block, "big")
    if not 0 < c < share.modulus:
        raise FormatError("rsa_block out of range for the modulus")
    delta = math.factorial(share.n_members)
    value = gmpy2.powmod(c, 2 * delta * share.value, share.modulus)
    return DecryptionShare(member_index=share.member_index, value=int(value))


def _lagrange_at_zero(subset: list[int], j: int, delta: int) -> int:
    num = delta
    den = 1
    for jj in subset:
        if jj == j:
            continue
        num *= jj
        den *= jj - j
    if num % den:
        raise IntegrityError("non-integral combining coefficient")
    return num // den


def combine_shares(
    pk: ThresholdPublicKey,
    ct: HybridCiphertext,
    shares: list[DecryptionShare],
) -> bytes:
    """Recover the plaintext from at least `threshold` decryption shares.

    Any qualifying subset works and all must agree. A tampered share value
    surfaces as a failed padding check, never as silent wrong plaintext.
    """
    seen: dict[int, int] = {}
    for s in shares:
        if not 1 <= s.member_index <= pk.n_members:
            raise ParameterError(f"share index {s.member_index} out of range")
        if s.member_index in seen and seen[s.member_index] != s.value:
            raise ParameterError("conflicting shares for one member")
        seen[s.member_index] = s.value
    if len(seen) < pk.threshold:
        raise InsufficientSharesError(
            f"{len(seen)} distinct shares, need {pk.threshold}"
        )
    if len(ct.rsa_block) != pk.modulus_bytes:
        raise FormatError("rsa_block length does not match the modulus")
    subset = sorted(seen)
    delta = math.factorial(pk.n_members)
    w = 1
    for j in subset:
        lam = _lagrange_at_zero(subset, j, delta)
        w = w * gmpy2.powmod(seen[j], 2 * lam, pk.modulus) % pk.modulus
    # a * 4*delta^2 + b * e = 1; exists because e is prime and larger than n
    g, a, b = gmpy2.gcdext(4 * delta * delta, pk.exponent)
    if g != 1:
        raise IntegrityError("combining exponents not coprime")
    c = int.from_bytes(ct.rsa_block, "big")
    y = (
        gmpy2.powmod(w, int(a), pk.modulus)
        * gmpy2.powmod(c, int(b), pk.modulus)
        % pk.modulus
    )
    block = int(y).to_bytes(pk.modulus_bytes, "big")
    head = _unpad_block(block)
    if ct.aes_tail is None:
        return head
    if len(head) < AES_KEY_BYTES:
        raise IntegrityError("hybrid head shorter than one AES key")
    key, head = head[:AES_KEY_BYTES], head[AES_KEY_BYTES:]
    t = ct.aes_tail
    try:
        tail = AESGCM(key).decrypt(t.nonce, t.ciphertext + t.tag, None)
    except Exception as exc:
        raise TamperError("AES tail failed authentication") from exc
    return head + tail


# ---------------------------------------------------------------------------
# signatures


@dataclass(frozen=True)
class SigningKeyPair:
    secret: bytes
    public: bytes

    @classmethod
    def generate(cls, rng: Rng | None = None) -> "SigningKeyPair":
        seed = ensure_rng(rng).randbytes(32)
        sk = Ed25519PrivateKey.from_private_bytes(seed)
        pub = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return cls(secret=seed, public=pub)


def sign(key: SigningKeyPair | bytes, message: bytes) -> bytes:
    seed = key.secret if isinstance(key, SigningKeyPair) else key
    if len(seed) != 32:
        raise FormatError("signing key seed must be 32 bytes")
    return Ed25519PrivateKey.from_private_bytes(seed).sign(message)


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    if len(public) != PUBLIC_KEY_BYTES:
        raise FormatError("public key must be 32 bytes")
    if len(signature) != SIGNATURE_BYTES:
        raise FormatError("signature must be 64 bytes")
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


# ---------------------------------------------------------------------------
# symmetric sealing


def symmetric_encrypt(key: bytes, plaintext: bytes, rng: Rng | None = None) -> bytes:
    """AES-256-GCM seal: returns nonce || ciphertext || tag."""
    if len(key) != AES_KEY_BYTES:
        raise ParameterError("symmetric key must be 32 bytes")
    nonce = ensure_rng(rng).randbytes(GCM_NONCE_BYTES)
    return nonce + AESGCM(key).encrypt(nonce, plaintext, None)


def symmetric_decrypt(key: bytes, sealed: bytes) -> bytes:
    if len(key) != AES_KEY_BYTES:
        raise ParameterError("symmetric key must be 32 bytes")
    if len(sealed) < GCM_NONCE_BYTES + GCM_TAG_BYTES:
        raise FormatError("sealed blob too short")
    try:
        return AESGCM(key).decrypt(sealed[:GCM_NONCE_BYTES], sealed[GCM_NONCE_BYTES:], None)
    except Exception as exc:
        raise TamperError("authenticated decryption failed") from exc


# ---------------------------------------------------------------------------
# channel sealing (X25519 ECIES) and stream layers, used by the circuit module


@dataclass(frozen=True)
class ChannelKeyPair:
    """Static X25519 keypair a relay publishes for sealed client payloads."""

    secret: bytes
    public: bytes

    @classmethod
    def generate(cls, rng: Rng | None = None) -> "ChannelKeyPair":
        seed = ensure_rng(rng).randbytes(32)
        sk = X25519PrivateKey.from_private_bytes(seed)
        pub = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return cls(secret=seed, public=pub)


def seal_to(public: bytes, plaintext: bytes, rng: Rng | None = None) -> bytes:
    """Seal bytes so only the holder of the matching ChannelKeyPair can open them."""
    if len(public) != 32:
        raise FormatError("channel public key must be 32 bytes")
    rng = ensure_rng(rng)
    eph = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
    eph_pub = eph.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    shared = eph.exchange(X25519PublicKey.from_public_bytes(public))
    key = hash_digest(b"channel-seal" + shared + eph_pub + public)
    nonce = rng.randbytes(GCM_NONCE_BYTES)
    return eph_pub + nonce + AESGCM(key).encrypt(nonce, plaintext, None)


def open_sealed(keypair: ChannelKeyPair, blob: bytes) -> bytes:
    if len(blob) < 32 + GCM_NONCE_BYTES + GCM_TAG_BYTES:
        raise FormatError("sealed blob too short")
    eph_pub, nonce, body = blob[:32], blob[32 : 32 + GCM_NONCE_BYTES], blob[32 + GCM_NONCE_BYTES :]
    sk = X25519PrivateKey.from_private_bytes(keypair.secret)
    shared = sk.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    key = hash_digest(b"channel-seal" + shared + eph_pub + keypair.public)
    try:
        return AESGCM(key).decrypt(nonce, body, None)
    except Exception as exc:
        raise TamperError("sealed blob failed authentication") from exc


def stream_xor(key: bytes, nonce: bytes, data: bytes) -> bytes:
    """One AES-256-CTR pass; applying twice with the same nonce restores data."""
    if len(key) != AES_KEY_BYTES:
        raise ParameterError("stream key must be 32 bytes")
    if len(nonce) != 16:
        raise ParameterError("stream nonce must be 16 bytes")
    enc = Cipher(algorithms.AES(key), modes.CTR(nonce)).encryptor()
    return enc.update(data) + enc.finalize()
