"""Fog-node runtime: channel termination, mempool, consensus, reads, alerts.

Each node is an event-driven state machine fed by one ordered input stream.
Handlers return a NodeOutput describing messages to send and timers to arm;
the surrounding simulation (or any other transport) owns delivery. World
state is only ever advanced by applying finalized blocks, so replaying the
chain from genesis always reproduces it byte for byte.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

from . import channel as ch
from .chain import (
    Block,
    Call,
    Chain,
    GenesisConfig,
    Query,
    Transaction,
    ValidationResult,
    build_block,
    hash_block,
    hash_tx,
    make_genesis,
    make_transaction,
    validate_block,
    verify_transaction,
)
from .codec import DecodeError, Reader, enc_bytes, enc_str, enc_u64, enc_u8
from .consensus import AuthorityConfig, ConsensusEngine, ConsensusMessage, Phase, verify_message
from .contracts import (
    METHOD_ADD_READING,
    GasSchedule,
    PermissionDenied,
    UnknownContract,
    decode_reading_args,
    genesis_world,
    read_history,
    apply_block,
)


class AlertKind:
    INVALID_BLOCK = "invalid_block"
    EQUIVOCATION = "equivocation"
    REPLAY_DETECTED = "replay_detected"


@dataclass(frozen=True)
class Alert:
    kind: str
    height: int
    offender: bytes
    detail: str
    sim_time_us: int

    def key(self):
        return (self.kind, self.offender, self.height, self.detail)


# --- wire wrappers routed by the transport ---------------------------------

@dataclass
class ClientWire:
    """Device-to-node channel bytes (sealed envelope or plain encoding)."""

    raw: bytes


@dataclass
class ReplyWire:
    raw: bytes


@dataclass
class ConfirmWire:
    raw: bytes


@dataclass
class GossipWire:
    tx: Transaction


@dataclass
class ConsensusWire:
    msg: ConsensusMessage


@dataclass
class AlertWire:
    alert: Alert


@dataclass
class LegacyWire:
    legacy_id: str
    payload: bytes


@dataclass
class QueryReplyBody:
    """Node response to a read query."""

    status: int  # 0 ok, 1 permission denied, 2 unknown contract
    reason: str
    readings: list

    WIRE_TAG = 0x06

    def encode(self) -> bytes:
        parts = [enc_u8(self.WIRE_TAG), enc_u64(self.status), enc_str(self.reason)]
        parts.append(enc_u64(len(self.readings)))
        for ts, hr in self.readings:
            parts.append(enc_u64(ts))
            parts.append(enc_u64(hr))
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "QueryReplyBody":
        r = Reader(data)
        r.expect_tag(cls.WIRE_TAG)
        status = r.u64()
        reason = r.str_()
        readings = [(r.u64(), r.u64()) for _ in range(r.u64())]
        r.expect_eof()
        return cls(status, reason, readings)


@dataclass
class ConfirmBody:
    """Finalization notice sent back to the submitting device."""

    tx_hash: bytes
    result: str
    height: int
    delay_us: int  # node-side receipt-to-finalization time

    WIRE_TAG = 0x07

    def encode(self) -> bytes:
        return (
            enc_u8(self.WIRE_TAG)
            + enc_bytes(self.tx_hash)
            + enc_str(self.result)
            + enc_u64(self.height)
            + enc_u64(self.delay_us)
        )

    @classmethod
    def decode(cls, data: bytes) -> "ConfirmBody":
        r = Reader(data)
        r.expect_tag(cls.WIRE_TAG)
        body = cls(tx_hash=r.bytes_(), result=r.str_(), height=r.u64(), delay_us=r.u64())
        r.expect_eof()
        return body


@dataclass
class Send:
    dst: Optional[str]
    payload: object
    at_us: Optional[int] = None  # departure time; None means immediately


@dataclass
class NodeOutput:
    result: Optional[str] = None
    sends: list = field(default_factory=list)
    timers: list = field(default_factory=list)  # (fire_at_us, key)

    def merge(self, other: "NodeOutput") -> "NodeOutput":
        self.sends.extend(other.sends)
        self.timers.extend(other.timers)
        if other.result is not None:
            self.result = other.result
        return self


class Recorder:
    """Minimal trace sink; the simulator swaps in its own."""

    def __init__(self):
        self.events = []
        self.now_us = 0
        self.src = ""

    def __call__(self, kind: str, **info):
        self.events.append((self.now_us, self.src, kind, info))


@dataclass
class NodeConfig:
    block_interval_ms: int = 1000
    mempool_cap: int = 10_000
    clock_skew_ms: int = 30_000
    query_service_us: int = 1000
    channel_mode: str = "secure"  # or "plain"
    schedule: GasSchedule = field(default_factory=GasSchedule)

    @property
    def block_interval_us(self) -> int:
        return self.block_interval_ms * 1000

    @property
    def round_timeout_us(self) -> int:
        return 2 * self.block_interval_us


@dataclass
class ProxyEntry:
    keypair: ch.KeyPair
    contract: bytes
    next_account_nonce: int = 1
    channel_nonce: int = 0


def proxy_keypair(node_public: bytes, legacy_id: str) -> ch.KeyPair:
    """Deterministic per-device keypair held by the fronting node."""
    seed = hashlib.sha256(b"edgelinker/proxy/" + node_public + legacy_id.encode()).digest()
    return ch.generate_keypair(seed)


class FogNode:
    """One authority node: miner, channel endpoint, and read server."""

    def __init__(
        self,
        node_id: str,
        keypair: ch.KeyPair,
        genesis_config: GenesisConfig,
        peer_ids: list,
        directory: dict,
        cfg: Optional[NodeConfig] = None,
        recorder: Optional[Recorder] = None,
        rng=None,
        now_us: int = 0,
    ):
        self.node_id = node_id
        self.keypair = keypair
        self.cfg = cfg or NodeConfig(block_interval_ms=genesis_config.block_interval_ms)
        self.genesis_config = genesis_config
        self.schedule = GasSchedule.from_dict(genesis_config.gas) if genesis_config.gas else self.cfg.schedule
        self.chain = Chain.from_genesis(make_genesis(genesis_config), genesis_config.authorities)
        self.world = genesis_world(genesis_config)
        self.replay = ch.ReplayState(clock_skew_ms=self.cfg.clock_skew_ms)
        auth_cfg = AuthorityConfig(
            authorities=list(genesis_config.authorities),
            round_timeout_us=self.cfg.round_timeout_us,
        )
        self.engine = ConsensusEngine(auth_cfg, keypair, height=1, now_us=now_us)
        self.peer_ids = [p for p in peer_ids if p != node_id]
        self.directory = directory  # public key -> transport id
        self.rec = recorder or Recorder()
        self.rng = rng

        self.mempool: dict = {}  # tx hash -> Transaction, insertion ordered
        self._in_chain: set = set()
        self.pending_conf: dict = {}  # tx hash -> (client pk, received_us)
        self.alerts: list = []
        self._alert_keys: set = set()
        self.proxy_table: dict = {}
        self.outbound_nonces: dict = {}
        self.busy_until_us = 0
        self.last_finalize_us = now_us
        self._next_propose_us = now_us + self.cfg.block_interval_us
        self.counters = {"dropped_consensus": 0, "rejected": 0}

    # -- lifecycle -----------------------------------------------------------

    def initial_output(self, now_us: int) -> NodeOutput:
        out = NodeOutput()
        out.timers.append((self._next_propose_us, ("propose", self.engine.height)))
        out.timers.append((self.engine.deadline_us, ("round", self.engine.height, self.engine.round)))
        return out

    def world_digest(self) -> bytes:
        return self.world.digest()

    def rebuild_replay_floor(self) -> None:
        """Seed replay counters from ledger history after a restart."""
        for block in self.chain.blocks[1:]:
            for tx in block.transactions:
                self.replay.observe_floor(tx.sender, tx.nonce)

    # -- channel ingress -------------------------------------------------------

    def handle_envelope(self, raw: bytes, now_us: int) -> NodeOutput:
        out = NodeOutput()
        try:
            if self.cfg.channel_mode == "secure":
                env = ch.SecureEnvelope.from_bytes(raw)
                message = ch.open_message(env, self.keypair.private_key, env.sender_hint)
            else:
                message = ch.open_plain(raw)
        except (ch.ChannelError, DecodeError) as exc:
            return self._reject(out, _channel_reason(exc), detail=str(exc))

        verdict = self.replay.check_and_record(message, now_us // 1000)
        if not verdict.accepted:
            reason = verdict.reason.value
            if verdict.reason == ch.RejectReason.NONCE_REPLAYED:
                self._raise_alert(
                    AlertKind.REPLAY_DETECTED,
                    message.identification,
                    self.chain.height,
                    f"nonce={message.nonce}",
                    now_us,
                    out,
                )
            return self._reject(out, reason, sender=message.identification.hex()[:16])

        try:
            tx = Transaction.decode(message.body)
        except DecodeError as exc:
            return self._reject(out, "bad_body", detail=str(exc))

        if isinstance(tx.payload, Query):
            return self._serve_query_wire(tx.payload, message, now_us, out)
        return self._admit(tx, now_us, out, client_pk=message.identification)

    def on_gossip(self, tx: Transaction, now_us: int) -> NodeOutput:
        return self._admit(tx, now_us, NodeOutput(), client_pk=None)

    def _admit(self, tx: Transaction, now_us: int, out: NodeOutput, client_pk) -> NodeOutput:
        if not verify_transaction(tx):
            return self._reject(out, "bad_tx_signature")
        txh = hash_tx(tx)
        if txh in self._in_chain:
            # A fresh channel message carrying an already-final transaction is
            # a cross-node replay; late gossip duplicates are a benign race.
            if client_pk is not None:
                self._raise_alert(
                    AlertKind.REPLAY_DETECTED, tx.sender, self.chain.height, f"tx={txh.hex()[:16]}", now_us, out
                )
            return self._reject(out, "tx_already_final")
        if tx.nonce < self.world.next_nonce(tx.sender):
            return self._reject(out, "stale_tx_nonce")
        if txh in self.mempool:
            return self._reject(out, "duplicate")
        if len(self.mempool) >= self.cfg.mempool_cap:
            return self._reject(out, "mempool_full")
        self.mempool[txh] = tx
        if client_pk is not None:
            self.pending_conf[txh] = (client_pk, now_us)
            for peer in self.peer_ids:
                out.sends.append(Send(peer, GossipWire(tx)))
        self.rec("tx_admitted", tx=txh.hex()[:16], sender=tx.sender.hex()[:16])
        out.result = "ack"
        return out

    def _reject(self, out: NodeOutput, reason: str, **info) -> NodeOutput:
        self.counters["rejected"] += 1
        self.rec("rejected", reason=reason, **info)
        out.result = f"rejected:{reason}"
        return out

    # -- read serving ----------------------------------------------------------

    def serve_query(self, contract: bytes, caller: bytes, from_ts: int, to_ts: int) -> list:
        """Direct read against the latest finalized state; raises on denial."""
        return read_history(self.world, contract, caller, from_ts, to_ts)

    def _serve_query_wire(self, query: Query, message: ch.ChannelMessage, now_us: int, out: NodeOutput) -> NodeOutput:
        caller = message.identification
        completion = max(now_us, self.busy_until_us) + self.cfg.query_service_us
        self.busy_until_us = completion
        try:
            readings = self.serve_query(query.contract_address, caller, query.from_ts, query.to_ts)
            body = QueryReplyBody(0, "", readings)
        except PermissionDenied:
            body = QueryReplyBody(1, "permission_denied", [])
        except UnknownContract:
            body = QueryReplyBody(2, "unknown_contract", [])
        self.rec(
            "query_served",
            caller=caller.hex()[:16],
            status=body.status,
            count=len(body.readings),
            delay_us=completion - now_us,
        )
        dst = self.directory.get(caller)
        if dst is not None:
            raw = self._wrap_to(caller, body.encode(), completion)
            out.sends.append(Send(dst, ReplyWire(raw), at_us=completion))
        out.result = "ack"
        return out

    def _wrap_to(self, recipient_pk: bytes, body: bytes, now_us: int) -> bytes:
        nonce = self.outbound_nonces.get(recipient_pk, 0) + 1
        self.outbound_nonces[recipient_pk] = nonce
        message = ch.ChannelMessage(now_us // 1000, nonce, self.keypair.public_key, body)
        if self.cfg.channel_mode == "secure":
            return ch.seal_message(message, self.keypair.private_key, recipient_pk, rng=self.rng).to_bytes()
        return ch.seal_plain(message)

    # -- legacy proxy ------------------------------------------------------------

    def register_legacy(self, legacy_id: str, contract: bytes) -> ch.KeyPair:
        entry = ProxyEntry(keypair=proxy_keypair(self.keypair.public_key, legacy_id), contract=contract)
        self.proxy_table[legacy_id] = entry
        return entry.keypair

    def proxy_submit(self, legacy_id: str, payload: bytes, now_us: int) -> NodeOutput:
        """Wrap a raw legacy reading in a proxied, channel-secured transaction."""
        entry = self.proxy_table.get(legacy_id)
        if entry is None:
            return self._reject(NodeOutput(), "unknown_legacy_device", legacy_id=legacy_id)
        try:
            decode_reading_args(payload)
        except DecodeError:
            return self._reject(NodeOutput(), "bad_legacy_payload", legacy_id=legacy_id)
        tx = make_transaction(
            entry.keypair,
            entry.next_account_nonce,
            now_us // 1000,
            Call(entry.contract, METHOD_ADD_READING, payload),
        )
        entry.next_account_nonce += 1
        entry.channel_nonce += 1
        message = ch.ChannelMessage(now_us // 1000, entry.channel_nonce, entry.keypair.public_key, tx.encode())
        if self.cfg.channel_mode == "secure":
            raw = ch.seal_message(
                message, entry.keypair.private_key, self.keypair.public_key, rng=self.rng
            ).to_bytes()
        else:
            raw = ch.seal_plain(message)
        return self.handle_envelope(raw, now_us)

    # -- consensus ---------------------------------------------------------------

    def on_consensus(self, msg: ConsensusMessage, now_us: int) -> NodeOutput:
        out = NodeOutput()
        if not verify_message(msg, self.chain.authority_set):
            self.counters["dropped_consensus"] += 1
            # A fabricated proposal from outside the authority set is still
            # inspected so the monitoring layer can name the offender.
            if msg.phase == Phase.PRE_PREPARE and msg.block is not None:
                verdict = validate_block(msg.block, self.chain.tip, self.chain.authority_set)
                if not verdict.ok:
                    self.monitor_block(msg.block, verdict, now_us, out)
            return out
        msgs, fin = self.engine.on_message(msg, self.chain, now_us)
        self._post_engine(out, now_us, msgs, fin)
        return out

    def on_timer(self, key: tuple, now_us: int) -> NodeOutput:
        out = NodeOutput()
        kind = key[0]
        if kind == "propose":
            if self.engine.height == key[1] and self.engine.round == 0:
                self._maybe_propose(out, now_us)
        elif kind == "round":
            _, height, round_ = key
            if self.engine.height == height and self.engine.round == round_ and not self.engine.state.finalized:
                msgs, fin = self.engine.on_timeout(now_us)
                self.rec("round_timeout", height=height, round=round_)
                self._post_engine(out, now_us, msgs, fin)
        return out

    def tick(self, now_us: int) -> NodeOutput:
        """Timer-free driving surface: fire due timeouts, propose when due.

        Applies any resulting finalized block and purges its transactions
        from the mempool, same as the timer path.
        """
        out = NodeOutput()
        if now_us >= self.engine.deadline_us and not self.engine.state.finalized:
            msgs, fin = self.engine.on_timeout(now_us)
            self.rec("round_timeout", height=self.engine.height, round=self.engine.round)
            self._post_engine(out, now_us, msgs, fin)
        self._maybe_propose(out, now_us)
        out.timers.append((self.engine.deadline_us, ("round", self.engine.height, self.engine.round)))
        return out

    def _maybe_propose(self, out: NodeOutput, now_us: int) -> None:
        if not self.engine.wants_proposal():
            return
        if self.engine.round == 0 and now_us < self._next_propose_us:
            return
        block = build_block(
            list(self.mempool.values()),
            self.chain.tip,
            self.keypair,
            now_us // 1000,
            max_txs=self.genesis_config.max_txs,
            authorities=self.chain.authority_set,
        )
        self.rec("proposed", height=block.header.height, round=self.engine.round, txs=len(block.transactions))
        msgs, fin = self.engine.propose(block, now_us)
        self._post_engine(out, now_us, msgs, fin)

    def _post_engine(self, out: NodeOutput, now_us: int, msgs: list, fin) -> None:
        self._broadcast_consensus(out, msgs)
        self._drain_incidents(out, now_us)
        while fin is not None:
            self._apply_finalized(fin, now_us, out)
            replayed = self.engine.start_height(fin.header.height + 1, now_us)
            out.timers.append((self._next_propose_us, ("propose", self.engine.height)))
            out.timers.append((self.engine.deadline_us, ("round", self.engine.height, 0)))
            fin = None
            for msg in replayed:
                more, f2 = self.engine.on_message(msg, self.chain, now_us)
                self._broadcast_consensus(out, more)
                self._drain_incidents(out, now_us)
                if f2 is not None and fin is None:
                    fin = f2
        self._maybe_propose_once(out, now_us)
        out.timers.append((self.engine.deadline_us, ("round", self.engine.height, self.engine.round)))

    def _maybe_propose_once(self, out: NodeOutput, now_us: int) -> None:
        # Round-change quorum can make this node the proposer mid-stream.
        if self.engine.wants_proposal() and self.engine.round > 0:
            self._maybe_propose(out, now_us)

    def _broadcast_consensus(self, out: NodeOutput, msgs: list) -> None:
        for msg in msgs:
            for peer in self.peer_ids:
                out.sends.append(Send(peer, ConsensusWire(msg)))

    def _drain_incidents(self, out: NodeOutput, now_us: int) -> None:
        incidents, self.engine.incidents = self.engine.incidents, []
        for inc in incidents:
            if inc.kind == "invalid_proposal":
                offender = inc.block.header.proposer if inc.block is not None else inc.offender
                self._raise_alert(AlertKind.INVALID_BLOCK, offender, inc.height, inc.detail, now_us, out)
            elif inc.kind == "equivocation":
                self._raise_alert(AlertKind.EQUIVOCATION, inc.offender, inc.height, inc.detail, now_us, out)

    def _apply_finalized(self, block: Block, now_us: int, out: NodeOutput) -> None:
        self.chain.blocks.append(block)
        receipts = apply_block(self.world, block, self.schedule)
        self.last_finalize_us = now_us
        self._next_propose_us = now_us + self.cfg.block_interval_us
        bh = hash_block(block)
        self.rec(
            "block_finalized",
            height=block.header.height,
            hash=bh.hex()[:16],
            txs=len(block.transactions),
            proposer=block.header.proposer.hex()[:16],
        )
        for receipt in receipts:
            self.rec(
                "receipt",
                tx=receipt.tx_hash.hex()[:16],
                result=receipt.result,
                reason=receipt.reason,
                gas=receipt.gas_used,
                height=receipt.height,
            )
        for tx in block.transactions:
            txh = hash_tx(tx)
            self._in_chain.add(txh)
            self.mempool.pop(txh, None)
            pending = self.pending_conf.pop(txh, None)
            if pending is None:
                continue
            client_pk, received_us = pending
            delay_us = now_us - received_us
            self.rec("tx_finalized_delay", tx=txh.hex()[:16], delay_us=delay_us)
            dst = self.directory.get(client_pk)
            if dst is not None:
                body = ConfirmBody(txh, "final", block.header.height, delay_us)
                out.sends.append(Send(dst, ConfirmWire(self._wrap_to(client_pk, body.encode(), now_us))))

    # -- monitoring -----------------------------------------------------------

    def monitor_block(self, block: Block, verdict: ValidationResult, now_us: int, out: Optional[NodeOutput] = None) -> NodeOutput:
        """Raise a network alert when a block fails validation."""
        out = out if out is not None else NodeOutput()
        if not verdict.ok:
            self._raise_alert(
                AlertKind.INVALID_BLOCK,
                block.header.proposer,
                block.header.height,
                ",".join(v.value for v in verdict.violations),
                now_us,
                out,
            )
        return out

    def _raise_alert(self, kind: str, offender: bytes, height: int, detail: str, now_us: int, out: NodeOutput) -> None:
        alert = Alert(kind=kind, height=height, offender=offender, detail=detail, sim_time_us=now_us)
        if alert.key() in self._alert_keys:
            return
        self._alert_keys.add(alert.key())
        self.alerts.append(alert)
        self.rec("alert", alert_kind=kind, offender=offender.hex()[:16], height=height, detail=detail)
        for peer in self.peer_ids:
            out.sends.append(Send(peer, AlertWire(alert)))

    def on_alert(self, alert: Alert, now_us: int) -> NodeOutput:
        out = NodeOutput()
        if alert.key() not in self._alert_keys:
            self._alert_keys.add(alert.key())
            self.alerts.append(alert)
            self.rec("alert_received", alert_kind=alert.kind, height=alert.height)
        return out


def _channel_reason(exc: Exception) -> str:
    if isinstance(exc, ch.DecryptFailed):
        return "decrypt_failed"
    if isinstance(exc, ch.SignatureInvalid):
        return "signature_invalid"
    if isinstance(exc, ch.IdentityMismatch):
        return "identity_mismatch"
    if isinstance(exc, ch.InvalidPublicKey):
        return "invalid_public_key"
    return "bad_wire"
