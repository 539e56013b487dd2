import random

import pytest

from edgelinker.chain import (
    Block,
    Chain,
    GenesisConfig,
    NotAuthority,
    Query,
    Transfer,
    ValidationRequired,
    Violation,
    build_block,
    hash_block,
    hash_tx,
    make_genesis,
    make_transaction,
    validate_block,
    append_block,
    verify_transaction,
)
from tests.conftest import kp

NOW_MS = 1_700_000_000_000


def transfer_tx(sender, nonce, amount=10):
    return make_transaction(sender, nonce, NOW_MS + nonce, Transfer(to=kp("sink").public_key, amount=amount))


@pytest.fixture
def setup(keys):
    authority = keys[0]
    cfg = GenesisConfig(chain_id=5, authorities=[authority.public_key])
    genesis = make_genesis(cfg)
    return authority, cfg, genesis


def test_genesis_hash_constant_for_fixed_config(setup):
    _, cfg, genesis = setup
    assert hash_block(genesis) == hash_block(make_genesis(cfg))
    assert genesis.header.height == 0
    assert genesis.header.prev_hash == bytes(32)


def test_genesis_differs_across_configs(setup):
    _, cfg, genesis = setup
    other = GenesisConfig(chain_id=6, authorities=cfg.authorities, genesis_timestamp_ms=1)
    assert hash_block(make_genesis(other)) != hash_block(genesis)


def test_hash_tx_changes_with_every_field():
    sender = kp("mut")
    base = transfer_tx(sender, 1)
    variants = [
        transfer_tx(sender, 2),
        make_transaction(sender, 1, NOW_MS + 99, base.payload),
        make_transaction(sender, 1, NOW_MS + 1, Transfer(to=kp("other").public_key, amount=10)),
        make_transaction(sender, 1, NOW_MS + 1, Transfer(to=kp("sink").public_key, amount=11)),
        make_transaction(sender, 1, NOW_MS + 1, base.payload, gas_limit=123_456),
        make_transaction(kp("mut2"), 1, NOW_MS + 1, base.payload),
    ]
    hashes = {hash_tx(base)} | {hash_tx(v) for v in variants}
    assert len(hashes) == 1 + len(variants)


def test_tx_order_changes_root_and_block_hash(setup):
    authority, _, genesis = setup
    sender = kp("order")
    t1, t2 = transfer_tx(sender, 1), transfer_tx(sender, 2)
    b1 = build_block([t1, t2], genesis, authority, NOW_MS)
    b2 = Block(header=b1.header, transactions=[t2, t1])
    from edgelinker.chain import compute_tx_root

    assert compute_tx_root(b1.transactions) != compute_tx_root(b2.transactions)


class TestBuildBlock:
    def test_empty_heartbeat_block_is_valid(self, setup):
        authority, _, genesis = setup
        block = build_block([], genesis, authority, NOW_MS)
        assert block.transactions == []
        assert validate_block(block, genesis, [authority.public_key]).ok

    def test_cap_holds_back_overflow(self, setup):
        authority, _, genesis = setup
        sender = kp("bulk")
        pending = [transfer_tx(sender, n) for n in range(1, 601)]
        block = build_block(pending, genesis, authority, NOW_MS, max_txs=500)
        assert len(block.transactions) == 500
        included = {hash_tx(t) for t in block.transactions}
        remaining = [t for t in pending if hash_tx(t) not in included]
        assert len(remaining) == 100

    def test_orders_by_sender_then_nonce(self, setup):
        authority, _, genesis = setup
        s1, s2 = sorted((kp("s1"), kp("s2")), key=lambda p: p.public_key)
        pending = [transfer_tx(s2, 2), transfer_tx(s1, 2), transfer_tx(s2, 1), transfer_tx(s1, 1)]
        block = build_block(pending, genesis, authority, NOW_MS)
        order = [(t.sender, t.nonce) for t in block.transactions]
        assert order == [(s1.public_key, 1), (s1.public_key, 2), (s2.public_key, 1), (s2.public_key, 2)]

    def test_non_authority_rejected(self, setup):
        _, _, genesis = setup
        outsider = kp("outsider")
        with pytest.raises(NotAuthority):
            build_block([], genesis, outsider, NOW_MS, authorities=[kp("real").public_key])

    def test_queries_never_included(self, setup):
        authority, _, genesis = setup
        sender = kp("q")
        q = make_transaction(sender, 1, NOW_MS, Query(bytes(32), 0, 10))
        block = build_block([q, transfer_tx(sender, 1)], genesis, authority, NOW_MS)
        assert all(not isinstance(t.payload, Query) for t in block.transactions)
        assert len(block.transactions) == 1


class TestValidateBlock:
    def _good(self, setup, txs=None):
        authority, _, genesis = setup
        sender = kp("v")
        txs = txs if txs is not None else [transfer_tx(sender, 1)]
        return authority, genesis, build_block(txs, genesis, authority, NOW_MS)

    def test_honest_block_valid(self, setup):
        authority, genesis, block = self._good(setup)
        assert validate_block(block, genesis, [authority.public_key]).ok

    @pytest.mark.parametrize(
        "corrupt,violation",
        [
            ("parent", Violation.BAD_PARENT_LINK),
            ("height", Violation.BAD_HEIGHT),
            ("timestamp", Violation.BAD_TIMESTAMP),
            ("proposer", Violation.NOT_AUTHORITY),
            ("signature", Violation.BAD_PROPOSER_SIGNATURE),
            ("tx_root", Violation.BAD_TX_ROOT),
            ("tx_signature", Violation.BAD_TX_SIGNATURE),
            ("query", Violation.QUERY_IN_BLOCK),
        ],
    )
    def test_each_targeted_corruption_yields_exactly_that_violation(self, setup, corrupt, violation):
        authority, genesis, block = self._good(setup)
        import hashlib as _h
        from edgelinker.chain import compute_tx_root
        from edgelinker.channel import sign_digest

        def resign():
            block.header.proposer_signature = sign_digest(
                authority.private_key, _h.sha256(block.header.signing_bytes()).digest()
            )

        if corrupt == "parent":
            block.header.prev_hash = bytes(32)
            resign()
        elif corrupt == "height":
            block.header.height += 1
            block.header.prev_hash = hash_block(genesis)
            resign()
        elif corrupt == "timestamp":
            block.header.timestamp = genesis.header.timestamp
            resign()
        elif corrupt == "proposer":
            outsider = kp("imposter")
            block.header.proposer = outsider.public_key
            block.header.proposer_signature = sign_digest(
                outsider.private_key, _h.sha256(block.header.signing_bytes()).digest()
            )
        elif corrupt == "signature":
            block.header.proposer_signature = bytes(64)
        elif corrupt == "tx_root":
            block.header.tx_root = bytes(32)
            resign()
        elif corrupt == "tx_signature":
            block.transactions[0].signature = bytes(64)  # insertion-style forgery
            block.header.tx_root = compute_tx_root(block.transactions)
            resign()
        elif corrupt == "query":
            q = make_transaction(kp("v"), 2, NOW_MS, Query(bytes(32), 0, 1))
            block.transactions.append(q)
            block.header.tx_root = compute_tx_root(block.transactions)
            resign()

        result = validate_block(block, genesis, [authority.public_key])
        assert result.violations == [violation]

    def test_multiple_violations_all_reported(self, setup):
        authority, genesis, block = self._good(setup)
        block.header.prev_hash = bytes(32)
        block.header.timestamp = 0
        result = validate_block(block, genesis, [authority.public_key])
        assert Violation.BAD_PARENT_LINK in result.violations
        assert Violation.BAD_TIMESTAMP in result.violations
        assert Violation.BAD_PROPOSER_SIGNATURE in result.violations  # header was re-keyed by the edits


class TestAppend:
    def test_append_grows_chain(self, setup):
        authority, _, genesis = setup
        chain = Chain.from_genesis(genesis, [authority.public_key])
        block = build_block([], genesis, authority, NOW_MS)
        append_block(chain, block)
        assert chain.height == 1 and chain.tip is block

    def test_invalid_append_refused_and_chain_unchanged(self, setup):
        authority, _, genesis = setup
        chain = Chain.from_genesis(genesis, [authority.public_key])
        bad = build_block([], genesis, authority, NOW_MS)
        bad.header.prev_hash = bytes(32)
        with pytest.raises(ValidationRequired):
            append_block(chain, bad)
        assert chain.height == 0

    def test_replaying_recorded_blocks_reproduces_tip_hash(self, setup):
        # Oracle: independently rebuild the chain from the recorded blocks.
        authority, _, genesis = setup
        rng = random.Random(3)
        sender = kp("replay")
        chain = Chain.from_genesis(genesis, [authority.public_key])
        nonce = 1
        for i in range(100):
            txs = []
            for _ in range(rng.randrange(0, 4)):
                txs.append(transfer_tx(sender, nonce))
                nonce += 1
            block = build_block(txs, chain.tip, authority, NOW_MS + (i + 1) * 1000)
            append_block(chain, block)
        fresh = Chain.from_genesis(make_genesis(GenesisConfig(chain_id=5, authorities=[authority.public_key])), [authority.public_key])
        for block in chain.blocks[1:]:
            append_block(fresh, block)
        assert fresh.tip_hash() == chain.tip_hash()
        assert fresh.height == 100


def test_any_single_field_mutation_in_history_detected(setup):
    # Data-integrity sweep: corrupt one field anywhere, revalidate the chain.
    authority, _, genesis = setup
    chain = Chain.from_genesis(genesis, [authority.public_key])
    sender = kp("hist")
    for i in range(5):
        append_block(chain, build_block([transfer_tx(sender, i + 1)], chain.tip, authority, NOW_MS + i * 1000))

    def chain_valid(blocks):
        return all(
            validate_block(blocks[i], blocks[i - 1], [authority.public_key]).ok for i in range(1, len(blocks))
        )

    assert chain_valid(chain.blocks)
    import copy

    for i in range(1, len(chain.blocks)):
        mutated = copy.deepcopy(chain.blocks)
        mutated[i].transactions[0].payload = Transfer(to=bytes(32), amount=999)
        assert not chain_valid(mutated)
        mutated = copy.deepcopy(chain.blocks)
        mutated[i].header.timestamp += 1
        assert not chain_valid(mutated)


def test_transaction_signature_verifies_under_sender():
    tx = transfer_tx(kp("sig"), 1)
    assert verify_transaction(tx)
    tx.signature = bytes(64)
    assert not verify_transaction(tx)


def test_genesis_config_json_roundtrip(setup):
    _, cfg, _ = setup
    cfg.initial_balances = {kp("x").public_key: 5}
    cfg.gas = {"deploy": 1, "add_data": 2, "grant": 3, "revoke": 4, "read_query": 5, "transfer": 6}
    again = GenesisConfig.from_json(cfg.to_json())
    assert again == cfg
