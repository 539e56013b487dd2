import pytest

from edgelinker.chain import (
    Call,
    Deploy,
    GenesisConfig,
    Query,
    build_block,
    make_transaction,
    validate_block,
)
from edgelinker.channel import ChannelMessage, seal_message
from edgelinker.contracts import (
    WRITE_PERMISSION,
    contract_address,
    encode_permission_args,
    encode_reading_args,
    replay_chain,
)
from edgelinker.node import (
    AlertKind,
    ConsensusWire,
    FogNode,
    QueryReplyBody,
    proxy_keypair,
)
from edgelinker.channel import open_message, SecureEnvelope
from tests.conftest import kp

T0 = 500_000  # first event, microseconds
INTERVAL = 1_000_000


def make_node(authority, balances, node_id="n0", peer_ids=(), directory=None, extra_cfg=None):
    cfg = GenesisConfig(
        chain_id=1,
        authorities=[authority.public_key] if not isinstance(authority, list) else [a.public_key for a in authority],
        initial_balances=balances,
        block_interval_ms=1000,
    )
    first = authority if not isinstance(authority, list) else authority[0]
    return FogNode(node_id, first, cfg, list(peer_ids), dict(directory or {}), cfg=extra_cfg)


def envelope(client, node, nonce, tx, now_us):
    m = ChannelMessage(now_us // 1000, nonce, client.public_key, tx.encode())
    return seal_message(m, client.private_key, node.keypair.public_key).to_bytes()


@pytest.fixture
def single(keys):
    authority, client = keys[0], keys[1]
    node = make_node(authority, {client.public_key: 10**12, keys[2].public_key: 10**12})
    return node, authority, client


class TestEnvelopeIngress:
    def test_valid_transaction_ack_and_mempool_growth(self, single):
        node, _, client = single
        tx = make_transaction(client, 1, T0 // 1000, Deploy("health_record", b""))
        out = node.handle_envelope(envelope(client, node, 1, tx, T0), T0)
        assert out.result == "ack"
        assert len(node.mempool) == 1

    def test_replayed_envelope_rejected_with_alert(self, single):
        node, _, client = single
        tx = make_transaction(client, 1, T0 // 1000, Deploy("health_record", b""))
        raw = envelope(client, node, 1, tx, T0)
        assert node.handle_envelope(raw, T0).result == "ack"
        out = node.handle_envelope(raw, T0 + 1000)
        assert out.result == "rejected:nonce_replayed"
        assert [a.kind for a in node.alerts] == [AlertKind.REPLAY_DETECTED]
        assert node.alerts[0].offender == client.public_key
        assert len(node.mempool) == 1

    def test_tampered_ciphertext_rejected(self, single):
        node, _, client = single
        tx = make_transaction(client, 1, T0 // 1000, Deploy("health_record", b""))
        raw = bytearray(envelope(client, node, 1, tx, T0))
        raw[60] ^= 0xFF
        out = node.handle_envelope(bytes(raw), T0)
        assert out.result == "rejected:decrypt_failed"
        assert node.mempool == {}

    def test_nonce_gap_rejected(self, single):
        node, _, client = single
        tx = make_transaction(client, 1, T0 // 1000, Deploy("health_record", b""))
        out = node.handle_envelope(envelope(client, node, 7, tx, T0), T0)
        assert out.result == "rejected:nonce_gap"

    def test_mempool_cap(self, single, keys):
        node, _, client = single
        node.cfg.mempool_cap = 2
        for i in range(1, 4):
            tx = make_transaction(client, i, T0 // 1000, Deploy("health_record", b""))
            out = node.handle_envelope(envelope(client, node, i, tx, T0), T0)
        assert out.result == "rejected:mempool_full"
        assert len(node.mempool) == 2


class TestProposalLifecycle:
    def test_proposer_timer_finalizes_pending_txs(self, single):
        node, _, client = single
        tx = make_transaction(client, 1, T0 // 1000, Deploy("health_record", b""))
        node.handle_envelope(envelope(client, node, 1, tx, T0), T0)
        out = node.on_timer(("propose", 1), INTERVAL)
        assert node.chain.height == 1
        assert node.mempool == {}
        contract = contract_address(client.public_key, 1)
        assert contract in node.world.contracts

    def test_confirmation_sent_to_directory_entry(self, single):
        node, _, client = single
        node.directory[client.public_key] = "c1"
        tx = make_transaction(client, 1, T0 // 1000, Deploy("health_record", b""))
        node.handle_envelope(envelope(client, node, 1, tx, T0), T0)
        out = node.on_timer(("propose", 1), INTERVAL)
        confirms = [s for s in out.sends if s.dst == "c1"]
        assert len(confirms) == 1

    def test_empty_heartbeat_advances_height(self, single):
        node, _, _ = single
        node.on_timer(("propose", 1), INTERVAL)
        assert node.chain.height == 1
        assert node.chain.tip.transactions == []

    def test_state_replay_matches_live_world(self, single):
        node, _, client = single
        payloads = [Deploy("health_record", b"")]
        contract = contract_address(client.public_key, 1)
        payloads.append(Call(contract, "grant", encode_permission_args(WRITE_PERMISSION, client.public_key)))
        payloads.append(Call(contract, "add_reading", encode_reading_args(123456, 70)))
        now = T0
        for i, payload in enumerate(payloads, start=1):
            tx = make_transaction(client, i, now // 1000, payload)
            node.handle_envelope(envelope(client, node, i, tx, now), now)
            now += INTERVAL
            node.on_timer(("propose", node.engine.height), now)
        rebuilt = replay_chain(node.chain, node.genesis_config)
        assert rebuilt.encode() == node.world.encode()

    def test_no_tx_appears_twice_across_blocks(self, single):
        node, _, client = single
        tx = make_transaction(client, 1, T0 // 1000, Deploy("health_record", b""))
        raw = envelope(client, node, 1, tx, T0)
        node.handle_envelope(raw, T0)
        node.on_timer(("propose", 1), INTERVAL)
        # gossip duplicate after finalization is refused
        out = node.on_gossip(tx, INTERVAL + 1000)
        assert out.result == "rejected:tx_already_final"
        node.on_timer(("propose", 2), 2 * INTERVAL)
        seen = [h for b in node.chain.blocks for h in [t.encode() for t in b.transactions]]
        assert len(seen) == len(set(seen))


class TestTickProposerDuty:
    def test_non_proposer_does_not_propose(self, keys):
        a0, a1 = keys[0], keys[1]
        node0 = make_node([a0, a1], {}, node_id="n0", peer_ids=["n0", "n1"])
        out = node0.on_timer(("propose", 1), INTERVAL)
        # height-1 proposer is authorities[1]; n0 stays silent
        assert out.sends == []
        assert node0.chain.height == 0

    def test_tick_is_noop_for_non_proposer_before_deadline(self, keys):
        a0, a1 = keys[0], keys[1]
        node0 = make_node([a0, a1], {}, node_id="n0", peer_ids=["n0", "n1"])
        out = node0.tick(INTERVAL)
        assert out.sends == []
        assert node0.chain.height == 0

    def test_tick_drives_proposal_and_purges_mempool(self, single):
        node, _, client = single
        tx = make_transaction(client, 1, T0 // 1000, Deploy("health_record", b""))
        node.handle_envelope(envelope(client, node, 1, tx, T0), T0)
        node.tick(T0 + 1000)  # before the interval elapses: nothing happens
        assert node.chain.height == 0 and len(node.mempool) == 1
        node.tick(INTERVAL)
        assert node.chain.height == 1
        assert node.mempool == {}

    def test_tick_fires_round_timeout(self, keys):
        authorities = [keys[i] for i in range(4)]
        node0 = make_node(authorities, {}, node_id="n0", peer_ids=[f"n{i}" for i in range(4)])
        deadline = node0.engine.deadline_us
        out = node0.tick(deadline)
        assert node0.engine.round == 1
        assert any(getattr(s.payload, "msg", None) is not None for s in out.sends)

    def test_proposer_emits_pre_prepare_with_pending_txs(self, keys):
        a0, a1, client = keys[0], keys[1], keys[2]
        cfg = GenesisConfig(
            chain_id=1,
            authorities=[a0.public_key, a1.public_key],
            initial_balances={client.public_key: 10**12},
            block_interval_ms=1000,
        )
        node1 = FogNode("n1", a1, cfg, ["n0", "n1"], {})
        for i in range(1, 4):
            tx = make_transaction(client, i, T0 // 1000, Deploy("health_record", b""))
            node1.on_gossip(tx, T0)
        out = node1.on_timer(("propose", 1), INTERVAL)
        pre = [s for s in out.sends if isinstance(s.payload, ConsensusWire) and s.payload.msg.block is not None]
        assert pre, "expected a proposal broadcast"
        assert len(pre[0].payload.msg.block.transactions) == 3
        # quorum is 1 for n=2, so the proposer finalized and purged its mempool
        assert node1.mempool == {}


class TestQueries:
    def _prepared(self, keys):
        authority, client, doctor = keys[0], keys[1], keys[2]
        directory = {client.public_key: "c1", doctor.public_key: "d1"}
        node = make_node(authority, {client.public_key: 10**12}, directory=directory)
        contract = contract_address(client.public_key, 1)
        payloads = [
            Deploy("health_record", b""),
            Call(contract, "grant", encode_permission_args(WRITE_PERMISSION, client.public_key)),
            Call(contract, "add_reading", encode_reading_args(1000, 72)),
            Call(contract, "add_reading", encode_reading_args(2000, 75)),
        ]
        now = T0
        for i, payload in enumerate(payloads, start=1):
            tx = make_transaction(client, i, now // 1000, payload)
            node.handle_envelope(envelope(client, node, i, tx, now), now)
        node.on_timer(("propose", 1), INTERVAL)
        return node, client, doctor, contract

    def test_owner_reads_directly(self, keys):
        node, client, _, contract = self._prepared(keys)
        assert node.serve_query(contract, client.public_key, 0, 10_000) == [(1000, 72), (2000, 75)]

    def test_outsider_denied_directly(self, keys):
        from edgelinker.contracts import PermissionDenied

        node, _, doctor, contract = self._prepared(keys)
        with pytest.raises(PermissionDenied):
            node.serve_query(contract, doctor.public_key, 0, 10_000)

    def test_query_envelope_gets_sealed_reply(self, keys):
        node, client, _, contract = self._prepared(keys)
        q = make_transaction(client, 5, 2_000, Query(contract, 0, 10_000))
        now = 2 * INTERVAL
        m = ChannelMessage(now // 1000, 5, client.public_key, q.encode())
        raw = seal_message(m, client.private_key, node.keypair.public_key).to_bytes()
        out = node.handle_envelope(raw, now)
        reply_sends = [s for s in out.sends if s.dst == "c1"]
        assert len(reply_sends) == 1
        assert reply_sends[0].at_us == now + node.cfg.query_service_us
        env = SecureEnvelope.from_bytes(reply_sends[0].payload.raw)
        reply_msg = open_message(env, client.private_key, node.keypair.public_key)
        reply = QueryReplyBody.decode(reply_msg.body)
        assert reply.status == 0
        assert reply.readings == [(1000, 72), (2000, 75)]

    def test_two_nodes_same_state_identical_reply_bytes(self, keys):
        # Cross-node read consistency at an identical finalized height.
        node_a, client, _, contract = self._prepared(keys)
        node_b, _, _, _ = self._prepared(keys)
        a = QueryReplyBody(0, "", node_a.serve_query(contract, client.public_key, 0, 10_000)).encode()
        b = QueryReplyBody(0, "", node_b.serve_query(contract, client.public_key, 0, 10_000)).encode()
        assert a == b

    def test_queue_serializes_service_times(self, keys):
        node, client, _, contract = self._prepared(keys)
        now = 2 * INTERVAL
        outs = []
        for i, nonce in enumerate((5, 6)):
            q = make_transaction(client, nonce, now // 1000, Query(contract, 0, 10_000))
            m = ChannelMessage(now // 1000, nonce, client.public_key, q.encode())
            raw = seal_message(m, client.private_key, node.keypair.public_key).to_bytes()
            outs.append(node.handle_envelope(raw, now))
        first, second = (o.sends[0].at_us for o in outs)
        assert second == first + node.cfg.query_service_us


class TestMonitoring:
    def test_invalid_block_raises_single_alert(self, single):
        node, authority, _ = single
        outsider = kp("imposter")
        bad = build_block([], node.chain.tip, outsider, 999_999)
        verdict = validate_block(bad, node.chain.tip, node.chain.authority_set)
        assert not verdict.ok
        node.monitor_block(bad, verdict, T0)
        node.monitor_block(bad, verdict, T0 + 50)  # duplicate delivery
        invalid = [a for a in node.alerts if a.kind == AlertKind.INVALID_BLOCK]
        assert len(invalid) == 1
        assert invalid[0].offender == outsider.public_key

    def test_valid_block_raises_nothing(self, single):
        node, authority, _ = single
        good = build_block([], node.chain.tip, authority, 999_999)
        verdict = validate_block(good, node.chain.tip, node.chain.authority_set)
        node.monitor_block(good, verdict, T0)
        assert node.alerts == []


class TestLegacyProxy:
    def test_unknown_device_rejected(self, single):
        node, _, _ = single
        out = node.proxy_submit("ghost", encode_reading_args(1, 70), T0)
        assert out.result == "rejected:unknown_legacy_device"

    def test_registered_device_reading_lands_under_proxy_identity(self, keys):
        authority, client = keys[0], keys[1]
        proxy_kp = proxy_keypair(authority.public_key, "sensor-1")
        node = make_node(
            authority,
            {client.public_key: 10**12, proxy_kp.public_key: 10**12},
        )
        contract = contract_address(client.public_key, 1)
        setup = [
            Deploy("health_record", b""),
            Call(contract, "grant", encode_permission_args(WRITE_PERMISSION, proxy_kp.public_key)),
        ]
        for i, payload in enumerate(setup, start=1):
            tx = make_transaction(client, i, T0 // 1000, payload)
            node.handle_envelope(envelope(client, node, i, tx, T0), T0)
        node.on_timer(("propose", 1), INTERVAL)

        registered = node.register_legacy("sensor-1", contract)
        assert registered.public_key == proxy_kp.public_key
        out = node.proxy_submit("sensor-1", encode_reading_args(5000, 88), 2 * INTERVAL - 1000)
        assert out.result == "ack"
        node.on_timer(("propose", 2), 2 * INTERVAL)
        assert node.world.contracts[contract].readings[-1] == (5000, 88)
        proxied = [tx for b in node.chain.blocks for tx in b.transactions if tx.sender == proxy_kp.public_key]
        assert len(proxied) == 1
        assert proxied[0].sender != client.public_key


def test_replay_floor_rebuilt_from_chain(single):
    node, _, client = single
    tx = make_transaction(client, 1, T0 // 1000, Deploy("health_record", b""))
    node.handle_envelope(envelope(client, node, 1, tx, T0), T0)
    node.on_timer(("propose", 1), INTERVAL)
    fresh = make_node(node.keypair, {})  # same authority, fresh in-memory state
    fresh.chain = node.chain
    fresh.rebuild_replay_floor()
    assert fresh.replay.last_nonce[client.public_key] == 1
