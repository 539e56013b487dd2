import hashlib

import pytest

from edgelinker.chain import GenesisConfig, make_genesis
from edgelinker.channel import generate_keypair


def tseed(label) -> bytes:
    return hashlib.sha256(f"test-seed:{label}".encode()).digest()


def kp(label):
    return generate_keypair(tseed(label))


@pytest.fixture
def keys():
    return [kp(i) for i in range(8)]


@pytest.fixture
def genesis_one(keys):
    """Single-authority genesis with a well-funded client account."""
    cfg = GenesisConfig(
        chain_id=1,
        authorities=[keys[0].public_key],
        initial_balances={keys[1].public_key: 10**12, keys[2].public_key: 10**12},
        block_interval_ms=1000,
    )
    return cfg, make_genesis(cfg)
