from __future__ import annotations

import pytest

from peelback.crypto import dealer_keygen
from peelback.rng import Rng


@pytest.fixture(scope="session")
def committee():
    """Full-size 3-of-5 committee key, shared across the session (keygen is the slow part)."""
    rng = Rng.from_seed("tests:committee")
    return dealer_keygen(5, 3, modulus_bits=2048, rng=rng)


@pytest.fixture(scope="session")
def small_committee():
    """512-bit 3-of-5 key for tests that only need the algebra, not the key size."""
    rng = Rng.from_seed("tests:small-committee")
    return dealer_keygen(5, 3, modulus_bits=512, rng=rng)
