"""Walkthrough: a 3-of-5 committee key from dealing to decryption.

Run with `python3 demos/threshold_committee.py`.
"""

from peelback.crypto import (
    combine_shares,
    dealer_keygen,
    partial_decrypt,
    threshold_encrypt,
)
from peelback.errors import InsufficientSharesError, IntegrityError
from peelback.rng import Rng


def main() -> None:
    rng = Rng.from_seed("demo:committee")
    print("dealing a 3-of-5 committee key (1024-bit modulus for demo speed)...")
    pk, shares = dealer_keygen(5, 3, modulus_bits=1024, rng=rng)
    print(f"  modulus: {pk.modulus.bit_length()} bits, members: {pk.n_members}, "
          f"threshold: {pk.threshold}")

    secret = b"certified address 93.184.216.34 belongs to case 7"
    ct = threshold_encrypt(pk, secret, rng.child("enc"))
    print(f"encrypted {len(secret)} bytes into a {len(ct.to_bytes())}-byte ciphertext")

    print("\ntwo members alone learn nothing:")
    parts = [partial_decrypt(s, ct) for s in shares[:2]]
    try:
        combine_shares(pk, ct, parts)
    except InsufficientSharesError as e:
        print(f"  refused: {e}")

    print("any three members decrypt:")
    for subset in (shares[:3], shares[2:], [shares[0], shares[2], shares[4]]):
        parts = [partial_decrypt(s, ct) for s in subset]
        ids = [s.member_index for s in subset]
        assert combine_shares(pk, ct, parts) == secret
        print(f"  members {ids}: recovered the plaintext")

    print("a tampered share is caught, never silently wrong:")
    parts = [partial_decrypt(s, ct) for s in shares[:3]]
    parts[1] = type(parts[1])(parts[1].member_index, parts[1].value ^ 1)
    try:
        combine_shares(pk, ct, parts)
    except IntegrityError as e:
        print(f"  rejected: {e}")


if __name__ == "__main__":
    main()
