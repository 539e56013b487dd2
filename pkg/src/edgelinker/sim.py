"""Deterministic discrete-event simulation of the device / fog topology.

Virtual time runs in microseconds over a single event heap with stable FIFO
tie-breaking. Every random draw comes from a stream derived from (seed,
label), so link jitter, cipher nonces and actor behavior are reproducible
bit for bit, and adding an attacker never perturbs honest streams.

Scenarios wire devices (patients, doctors, legacy sensors) and fog nodes
through a configurable link model, then run either the canonical access
lifecycle (deploy, periodic writes, grant, read, revoke, denied read) or a
benchmark workload. Attack injectors cover replay, eavesdropping, block
insertion, denial-of-service flooding and identity spoofing.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from collections import deque
from dataclasses import dataclass, field, asdict
from typing import Optional

from . import channel as ch
from .chain import (
    Block,
    BlockHeader,
    Call,
    Deploy,
    GenesisConfig,
    Query,
    Transaction,
    compute_tx_root,
    hash_block,
    hash_tx,
    make_transaction,
)
from .channel import ChannelMessage, KeyPair, SecureEnvelope, generate_keypair, open_message, seal_message
from .codec import DecodeError, enc_u64
from .consensus import Phase, make_message
from .contracts import (
    HEALTH_RECORD_KIND,
    METHOD_ADD_READING,
    METHOD_GRANT,
    METHOD_REVOKE,
    READ_PERMISSION,
    WRITE_PERMISSION,
    GasSchedule,
    contract_address,
    encode_permission_args,
    encode_reading_args,
)
from .node import (
    AlertWire,
    ClientWire,
    ConfirmBody,
    ConsensusWire,
    FogNode,
    GossipWire,
    LegacyWire,
    NodeConfig,
    NodeOutput,
    QueryReplyBody,
    Send,
)

FULL_RANGE = (0, 2**63)

ATTACK_KINDS = ("replay", "eavesdrop", "insertion", "dos", "spoof")


class ConfigInvalid(ValueError):
    pass


# --- seeded randomness -------------------------------------------------------

def child_seed(master: int, *labels) -> int:
    material = "edgelinker:" + str(master) + ":" + ":".join(str(x) for x in labels)
    return int.from_bytes(hashlib.sha256(material.encode()).digest()[:8], "big")


def child_rng(master: int, *labels) -> random.Random:
    return random.Random(child_seed(master, *labels))


def key_seed(master: int, *labels) -> bytes:
    material = "edgelinker-key:" + str(master) + ":" + ":".join(str(x) for x in labels)
    return hashlib.sha256(material.encode()).digest()


# --- link model ---------------------------------------------------------------

@dataclass
class LinkModel:
    """Per-message delay and loss; defaults model a quiet fog LAN."""

    base_latency_us: int = 1000
    jitter_us: int = 200
    drop_probability: float = 0.0
    partitions: set = field(default_factory=set)  # frozenset pairs of endpoint ids

    def partitioned(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self.partitions

    def to_dict(self) -> dict:
        return {
            "base_latency_us": self.base_latency_us,
            "jitter_us": self.jitter_us,
            "drop_probability": self.drop_probability,
            "partitions": sorted(sorted(p) for p in self.partitions),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "LinkModel":
        return cls(
            base_latency_us=raw.get("base_latency_us", 1000),
            jitter_us=raw.get("jitter_us", 200),
            drop_probability=raw.get("drop_probability", 0.0),
            partitions={frozenset(p) for p in raw.get("partitions", [])},
        )


def deliver(link: LinkModel, src: str, dst: str, now_us: int, rng: random.Random) -> Optional[int]:
    """Arrival time for one message, or None when dropped or partitioned."""
    if link.partitioned(src, dst):
        return None
    if link.drop_probability > 0 and rng.random() < link.drop_probability:
        return None
    jitter = rng.randrange(link.jitter_us + 1) if link.jitter_us > 0 else 0
    return now_us + link.base_latency_us + jitter


# --- trace ---------------------------------------------------------------------

@dataclass
class TraceEvent:
    t_us: int
    src: str
    kind: str
    info: dict


@dataclass
class NodeFinal:
    chain: object
    world: object
    alerts: list
    tip_hash: bytes
    height: int


class SimTrace:
    """Ordered event log plus end-of-run summaries."""

    def __init__(self):
        self.events: list = []
        self.final: dict = {}
        self.counters: dict = {}
        self.meta: dict = {}
        self.attack_stats: dict = {}
        self.genesis = None

    def add(self, t_us: int, src: str, kind: str, info: dict) -> None:
        self.events.append(TraceEvent(t_us, src, kind, info))

    def of_kind(self, kind: str) -> list:
        return [e for e in self.events if e.kind == kind]

    def jsonl(self) -> str:
        lines = [
            json.dumps({"t_us": e.t_us, "src": e.src, "kind": e.kind, **e.info}, sort_keys=True)
            for e in self.events
        ]
        return "\n".join(lines)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.jsonl() + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t_us,src,kind,info\n")
            for e in self.events:
                fh.write(f"{e.t_us},{e.src},{e.kind},\"{json.dumps(e.info, sort_keys=True)}\"\n")

    def write_alerts_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("sim_time_us,kind,offender,height\n")
            for node_id in sorted(self.final):
                for alert in self.final[node_id].alerts:
                    fh.write(f"{alert.sim_time_us},{alert.kind},{alert.offender.hex()},{alert.height}\n")

    # metric sample helpers used by the benchmark harness
    def write_samples(self):
        out = [e for e in self.of_kind("task_confirmed") if e.info.get("measured")]
        return out

    def read_samples(self):
        return [e for e in self.of_kind("task_reply") if e.info.get("measured")]


class SimRecorder:
    """Recorder handed to nodes; the loop stamps src and time before dispatch."""

    def __init__(self, trace: SimTrace):
        self.trace = trace
        self.now_us = 0
        self.src = ""

    def __call__(self, kind: str, **info):
        self.trace.add(self.now_us, self.src, kind, info)


# --- scenario configuration -----------------------------------------------------

@dataclass
class ScenarioConfig:
    nodes: int = 4
    block_interval_ms: int = 1000
    link: LinkModel = field(default_factory=LinkModel)
    duration_s: Optional[float] = None
    channel_mode: str = "secure"
    workload: str = "scenario"  # scenario | write | read | mixed | none
    tasks: int = 0
    task_period_us: int = 50  # global spacing between injected tasks
    writers: int = 4
    readers: int = 4
    writes: int = 10
    write_period_ms: int = 60_000
    actor_balance: int = 10**12
    query_service_us: int = 1000
    mempool_cap: int = 10_000
    max_txs: int = 500
    gas: Optional[dict] = None
    attack: Optional[str] = None
    attack_params: dict = field(default_factory=dict)
    byzantine: int = 0
    crashed: int = 0
    stop_at_height: Optional[int] = None
    stop_on_done: bool = True
    trace_links: bool = False
    seed: Optional[int] = None  # default seed when the caller supplies none

    def to_json(self) -> str:
        raw = asdict(self)
        raw["link"] = self.link.to_dict()
        raw["link"]["partitions"] = [list(p) for p in self.link.partitions]
        return json.dumps(raw, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        raw = json.loads(text)
        link = LinkModel.from_dict(raw.pop("link", {}))
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {k: v for k, v in raw.items() if k in known and k != "link"}
        return cls(link=link, **kwargs)

    def validate(self) -> None:
        if self.nodes < 1:
            raise ConfigInvalid("need at least one node")
        if self.workload not in ("scenario", "write", "read", "mixed", "none"):
            raise ConfigInvalid(f"unknown workload {self.workload!r}")
        if self.channel_mode not in ("secure", "plain"):
            raise ConfigInvalid(f"unknown channel mode {self.channel_mode!r}")
        if self.attack is not None and self.attack not in ATTACK_KINDS:
            raise ConfigInvalid(f"unknown attack {self.attack!r}")
        if self.byzantine + self.crashed >= max(self.nodes, 1) and self.nodes > 1:
            raise ConfigInvalid("faulty nodes must be a minority")


# --- actor plans -----------------------------------------------------------------

@dataclass
class Step:
    at_us: int
    kind: str  # "tx" | "query"
    payload: object
    label: str
    measured: bool = False
    target: Optional[int] = None  # node index; None = actor's primary


class DeviceActor:
    """Schedule-driven device: signs, seals, sends, and matches responses."""

    def __init__(self, actor_id: str, keypair: KeyPair, primary: int, steps: list, sim: "Simulation"):
        self.id = actor_id
        self.keypair = keypair
        self.primary = primary
        self.steps = sorted(steps, key=lambda s: s.at_us)
        self.sim = sim
        self.rng = child_rng(sim.seed, "actor", actor_id)
        self.account_nonce = 1
        self.channel_nonces: dict = {}
        self.sent_tx: dict = {}  # tx hash -> (t_send, label, measured)
        self.pending_queries: dict = {}  # node id -> deque of (t_send, label, measured)

    def wake(self, idx: int, now_us: int) -> list:
        step = self.steps[idx]
        node_idx = step.target if step.target is not None else self.primary
        node_id = f"n{node_idx}"
        if step.kind == "tx":
            tx = make_transaction(self.keypair, self.account_nonce, now_us // 1000, step.payload)
            self.account_nonce += 1
            self.sent_tx[hash_tx(tx)] = (now_us, step.label, step.measured)
        else:
            nonce_preview = self.channel_nonces.get(node_id, 0) + 1
            tx = make_transaction(self.keypair, nonce_preview, now_us // 1000, step.payload)
            self.pending_queries.setdefault(node_id, deque()).append((now_us, step.label, step.measured))
        raw = self._wrap(tx, node_id, now_us)
        self.sim.trace.add(now_us, self.id, "task_sent", {"label": step.label, "measured": step.measured})
        return [Send(node_id, ClientWire(raw))]

    def _wrap(self, tx: Transaction, node_id: str, now_us: int) -> bytes:
        nonce = self.channel_nonces.get(node_id, 0) + 1
        self.channel_nonces[node_id] = nonce
        message = ChannelMessage(now_us // 1000, nonce, self.keypair.public_key, tx.encode())
        if self.sim.config.channel_mode == "secure":
            node_pk = self.sim.node_keys[node_id].public_key
            return seal_message(message, self.keypair.private_key, node_pk, rng=self.rng).to_bytes()
        return ch.seal_plain(message)

    def on_receive(self, payload, src: str, now_us: int) -> None:
        raw = payload.raw
        try:
            if self.sim.config.channel_mode == "secure":
                env = SecureEnvelope.from_bytes(raw)
                message = open_message(env, self.keypair.private_key, self.sim.node_keys[src].public_key)
            else:
                message = ch.open_plain(raw)
        except ch.ChannelError:
            self.sim.trace.add(now_us, self.id, "client_reject", {"from": src})
            return
        body = message.body
        if body and body[0] == ConfirmBody.WIRE_TAG:
            confirm = ConfirmBody.decode(body)
            sent = self.sent_tx.pop(confirm.tx_hash, None)
            if sent is None:
                return
            t_send, label, measured = sent
            self.sim.trace.add(
                now_us,
                self.id,
                "task_confirmed",
                {
                    "label": label,
                    "measured": measured,
                    "t_send_us": t_send,
                    "rtt_us": now_us - t_send,
                    "delay_node_us": confirm.delay_us,
                    "height": confirm.height,
                },
            )
            self.sim.note_response()
        elif body and body[0] == QueryReplyBody.WIRE_TAG:
            reply = QueryReplyBody.decode(body)
            queue = self.pending_queries.get(src)
            if not queue:
                return
            t_send, label, measured = queue.popleft()
            self.sim.trace.add(
                now_us,
                self.id,
                "task_reply",
                {
                    "label": label,
                    "measured": measured,
                    "t_send_us": t_send,
                    "rtt_us": now_us - t_send,
                    "status": reply.status,
                    "count": len(reply.readings),
                },
            )
            self.sim.note_response()


# --- attackers -------------------------------------------------------------------

class AttackerBase:
    expects_responses = False

    def __init__(self, sim: "Simulation", keypair: KeyPair, params: dict):
        self.sim = sim
        self.id = "attacker"
        self.keypair = keypair
        self.params = params
        self.rng = child_rng(sim.seed, "actor", "attacker")
        self.stats: dict = {}

    def schedule(self) -> list:
        """(t_us, tag) wake list."""
        return []

    def on_tap(self, src: str, dst: str, raw: bytes, now_us: int) -> None:
        pass

    def wake(self, tag, now_us: int) -> list:
        return []

    def on_receive(self, payload, src, now_us) -> None:
        pass


class ReplayAttacker(AttackerBase):
    """Records channel bytes in transit and re-sends them verbatim."""

    def __init__(self, sim, keypair, params):
        super().__init__(sim, keypair, params)
        self.captured: list = []
        self.stats = {"captured": 0, "replayed": 0}

    def schedule(self):
        return [(int(self.params["replay_at_us"]), "replay")]

    def on_tap(self, src, dst, raw, now_us):
        if len(self.captured) < self.params.get("max_capture", 100_000):
            self.captured.append((dst, raw))
            self.stats["captured"] = len(self.captured)

    def wake(self, tag, now_us):
        gap = self.params.get("gap_us", 2000)
        limit = self.params.get("max_replay", len(self.captured))
        sends = []
        for i, (dst, raw) in enumerate(self.captured[:limit]):
            sends.append(Send(dst, ClientWire(raw), at_us=now_us + i * gap))
        self.stats["replayed"] = len(sends)
        self.sim.trace.add(now_us, self.id, "attack_replay", {"count": len(sends)})
        return sends


class EavesdropAttacker(AttackerBase):
    """Passive capture plus offline decryption attempts with the wrong key."""

    def __init__(self, sim, keypair, params):
        super().__init__(sim, keypair, params)
        self.captured: list = []
        self.stats = {"captured": 0, "attempts": 0, "failures": 0}

    def schedule(self):
        return [(int(self.params["attempt_at_us"]), "attempt")]

    def on_tap(self, src, dst, raw, now_us):
        self.captured.append(raw)
        self.stats["captured"] = len(self.captured)

    def wake(self, tag, now_us):
        for raw in self.captured:
            self.stats["attempts"] += 1
            try:
                env = SecureEnvelope.from_bytes(raw)
                open_message(env, self.keypair.private_key, env.sender_hint)
            except (ch.ChannelError, DecodeError):
                self.stats["failures"] += 1
        self.sim.trace.add(now_us, self.id, "attack_eavesdrop", dict(self.stats))
        return []


class InsertionAttacker(AttackerBase):
    """Outsider fabricating blocks with forged transactions."""

    def __init__(self, sim, keypair, params):
        super().__init__(sim, keypair, params)
        self.stats = {"forged": 0}

    def schedule(self):
        start = int(self.params.get("start_us", 2_000_000))
        period = int(self.params.get("period_us", 2_000_000))
        count = int(self.params.get("count", 5))
        return [(start + i * period, i) for i in range(count)]

    def wake(self, tag, now_us):
        height = int(tag) + 1
        forged_tx = make_transaction(self.keypair, 1, now_us // 1000, Deploy(HEALTH_RECORD_KIND, b""))
        forged_tx.signature = bytes(64)  # broken on purpose
        header = BlockHeader(
            height=height,
            timestamp=now_us // 1000,
            prev_hash=hashlib.sha256(b"forged-parent" + enc_u64(height)).digest(),
            tx_root=compute_tx_root([forged_tx]),
            proposer=self.keypair.public_key,
            proposer_signature=bytes(64),
        )
        block = Block(header=header, transactions=[forged_tx])
        header_digest = hashlib.sha256(header.signing_bytes()).digest()
        header.proposer_signature = ch.sign_digest(self.keypair.private_key, header_digest)
        msg = make_message(self.keypair, Phase.PRE_PREPARE, height, 0, hash_block(block), block)
        self.stats["forged"] += 1
        self.sim.trace.add(now_us, self.id, "attack_insertion", {"height": height})
        return [Send(f"n{i}", ConsensusWire(msg)) for i in range(self.sim.config.nodes)]


class DoSAttacker(AttackerBase):
    """Floods permission-denied contract calls until fees drain its balance."""

    def __init__(self, sim, keypair, params):
        super().__init__(sim, keypair, params)
        self.nonce = 1
        self.channel_nonce = 0
        self.stats = {"flood_sent": 0}

    def schedule(self):
        start = int(self.params.get("start_us", 5_000_000))
        period = int(self.params.get("period_us", 300_000))
        count = int(self.params["count"])
        return [(start + i * period, i) for i in range(count)]

    def wake(self, tag, now_us):
        contract = self.params["contract"]
        args = encode_reading_args(now_us // 1000, 77)
        tx = make_transaction(self.keypair, self.nonce, now_us // 1000, Call(contract, METHOD_ADD_READING, args))
        self.nonce += 1
        self.channel_nonce += 1
        message = ChannelMessage(now_us // 1000, self.channel_nonce, self.keypair.public_key, tx.encode())
        node_id = "n0"
        if self.sim.config.channel_mode == "secure":
            node_pk = self.sim.node_keys[node_id].public_key
            raw = seal_message(message, self.keypair.private_key, node_pk, rng=self.rng).to_bytes()
        else:
            raw = ch.seal_plain(message)
        self.stats["flood_sent"] += 1
        self.sim.trace.add(now_us, self.id, "attack_dos_call", {"nonce": tx.nonce})
        return [Send(node_id, ClientWire(raw))]


class SpoofAttacker(AttackerBase):
    """Claims another device's identity without holding its private key."""

    def __init__(self, sim, keypair, params):
        super().__init__(sim, keypair, params)
        self.channel_nonce = 100
        self.stats = {"spoof_sent": 0}

    def schedule(self):
        start = int(self.params.get("start_us", 2_000_000))
        period = int(self.params.get("period_us", 500_000))
        count = int(self.params.get("count", 10))
        return [(start + i * period, i) for i in range(count)]

    def wake(self, tag, now_us):
        victim_pk = self.params["victim"]
        node_id = "n0"
        node_pk = self.sim.node_keys[node_id].public_key
        self.channel_nonce += 1
        tx = make_transaction(self.keypair, 1, now_us // 1000, Deploy(HEALTH_RECORD_KIND, b""))
        message = ChannelMessage(now_us // 1000, self.channel_nonce, victim_pk, tx.encode())
        encoded = message.encode()
        digest = hashlib.sha256(encoded).digest()
        signature = ch.sign_digest(self.keypair.private_key, digest)
        key = ch.derive_shared_key(self.keypair.private_key, node_pk)
        from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

        aead_nonce = self.rng.randbytes(12)
        ciphertext = aead_nonce + ChaCha20Poly1305(key.key).encrypt(aead_nonce, encoded + signature, None)
        # Alternate between claiming the victim in the hint and in the body.
        hint = victim_pk if int(tag) % 2 == 0 else self.keypair.public_key
        env = SecureEnvelope(sender_hint=hint, ciphertext=ciphertext)
        self.stats["spoof_sent"] += 1
        self.sim.trace.add(now_us, self.id, "attack_spoof", {"variant": int(tag) % 2})
        return [Send(node_id, ClientWire(env.to_bytes()))]


ATTACKER_CLASSES = {
    "replay": ReplayAttacker,
    "eavesdrop": EavesdropAttacker,
    "insertion": InsertionAttacker,
    "dos": DoSAttacker,
    "spoof": SpoofAttacker,
}


class EquivocatingNode(FogNode):
    """Byzantine authority: proposes two blocks and votes both ways."""

    def _maybe_propose(self, out: NodeOutput, now_us: int) -> None:
        if not self.engine.wants_proposal():
            return
        if self.engine.round == 0 and now_us < self._next_propose_us:
            return
        from .chain import build_block

        tip = self.chain.tip
        now_ms = now_us // 1000
        block_a = build_block([], tip, self.keypair, now_ms, authorities=self.chain.authority_set)
        block_b = build_block([], tip, self.keypair, now_ms + 7, authorities=self.chain.authority_set)
        height, round_ = self.engine.height, self.engine.round
        msgs, fin = self.engine.propose(block_a, now_us)
        half = (len(self.peer_ids) + 1) // 2
        group_a, group_b = self.peer_ids[:half], self.peer_ids[half:]
        for msg in msgs:
            for peer in group_a:
                out.sends.append(Send(peer, ConsensusWire(msg)))
        bh_b = hash_block(block_b)
        forged = [
            make_message(self.keypair, Phase.PRE_PREPARE, height, round_, bh_b, block_b),
            make_message(self.keypair, Phase.PREPARE, height, round_, bh_b),
            make_message(self.keypair, Phase.COMMIT, height, round_, bh_b),
        ]
        for msg in forged:
            for peer in group_b:
                out.sends.append(Send(peer, ConsensusWire(msg)))
        self.rec("equivocating_proposal", height=height, round=round_)
        self._post_engine(out, now_us, [], fin)


# --- simulation -------------------------------------------------------------------

class Simulation:
    def __init__(self, config: ScenarioConfig, seed: int):
        config.validate()
        self.config = config
        self.seed = seed
        self.now_us = 0
        self._seq = 0
        self.heap: list = []
        self.trace = SimTrace()
        self.recorder = SimRecorder(self.trace)
        self.inflight = 0
        self.pending_responses = 0
        self.remaining_wakes = 0
        self.total_wakes = 0
        self.sent_count = 0
        self.delivered_count = 0
        self.dropped_count = 0
        self.stop = False

        n = config.nodes
        self.node_ids = [f"n{i}" for i in range(n)]
        self.node_keys = {f"n{i}": generate_keypair(key_seed(seed, "node", i)) for i in range(n)}
        authorities = [self.node_keys[i_].public_key for i_ in self.node_ids]
        self.crashed = set(self.node_ids[n - config.crashed :]) if config.crashed else set()
        byz_ids = set(self.node_ids[n - config.byzantine :]) if config.byzantine else set()
        if config.crashed and config.byzantine:
            raise ConfigInvalid("use either crashed or byzantine faults, not both")
        self.byzantine_ids = byz_ids
        self.honest_ids = [i_ for i_ in self.node_ids if i_ not in byz_ids and i_ not in self.crashed]

        plans, balances, attacker_needs = _build_plans(self, config)
        genesis = GenesisConfig(
            chain_id=1,
            authorities=authorities,
            initial_balances=balances,
            gas=config.gas,
            block_interval_ms=config.block_interval_ms,
            max_txs=config.max_txs,
        )
        self.genesis = genesis

        directory = {}
        for node_id in self.node_ids:
            directory[self.node_keys[node_id].public_key] = node_id

        self.actors: dict = {}
        for actor_id, keypair, primary, steps in plans:
            directory[keypair.public_key] = actor_id
            self.actors[actor_id] = DeviceActor(actor_id, keypair, primary, steps, self)

        node_cfg = NodeConfig(
            block_interval_ms=config.block_interval_ms,
            mempool_cap=config.mempool_cap,
            query_service_us=config.query_service_us,
            channel_mode=config.channel_mode,
            schedule=GasSchedule.from_dict(config.gas),
        )
        self.nodes: dict = {}
        for node_id in self.node_ids:
            cls = EquivocatingNode if node_id in byz_ids else FogNode
            self.nodes[node_id] = cls(
                node_id=node_id,
                keypair=self.node_keys[node_id],
                genesis_config=genesis,
                peer_ids=self.node_ids,
                directory=directory,
                cfg=node_cfg,
                recorder=self.recorder,
                rng=child_rng(seed, "nodecrypto", node_id),
            )

        self.attacker = None
        if config.attack is not None:
            attacker_kp = generate_keypair(key_seed(seed, "attacker"))
            params = dict(attacker_needs)
            params.update(config.attack_params)
            self.attacker = ATTACKER_CLASSES[config.attack](self, attacker_kp, params)
            directory[attacker_kp.public_key] = self.attacker.id

        self._pair_rngs: dict = {}
        self._armed: set = set()

        self.duration_us = int((config.duration_s if config.duration_s else self._auto_duration()) * 1_000_000)

        for node_id in self.node_ids:
            if node_id in self.crashed:
                continue
            out = self.nodes[node_id].initial_output(0)
            self._emit(node_id, out)
        for actor in self.actors.values():
            for idx, step in enumerate(actor.steps):
                self._push(step.at_us, ("actor_wake", actor.id, idx))
                self.total_wakes += 1
        if self.attacker is not None:
            for at_us, tag in self.attacker.schedule():
                self._push(at_us, ("attacker_wake", tag))
                self.total_wakes += 1
        self.remaining_wakes = self.total_wakes

    def _auto_duration(self) -> float:
        last = 0
        for actor in self.actors.values():
            if actor.steps:
                last = max(last, actor.steps[-1].at_us)
        if self.attacker is not None:
            for at_us, _tag in self.attacker.schedule():
                last = max(last, at_us + 10_000_000)
        margin = 60 * self.config.block_interval_ms * 1000 + 30_000_000
        return (last + margin) / 1_000_000

    # -- event machinery ------------------------------------------------------

    def _push(self, t_us: int, item: tuple) -> None:
        self._seq += 1
        heapq.heappush(self.heap, (t_us, self._seq, item))

    def _pair_rng(self, src: str, dst: str, klass: str) -> random.Random:
        # One stream per (endpoints, traffic class): extra alert or attack
        # traffic can never perturb the jitter seen by honest flows.
        key = (src, dst, klass)
        rng = self._pair_rngs.get(key)
        if rng is None:
            rng = child_rng(self.seed, "link", src, dst, klass)
            self._pair_rngs[key] = rng
        return rng

    def send(self, src: str, dst: Optional[str], payload, depart_us: int) -> None:
        if dst is None or src in self.crashed or dst in self.crashed:
            return
        self.sent_count += 1
        rng = self._pair_rng(src, dst, type(payload).__name__)
        arrival = deliver(self.config.link, src, dst, depart_us, rng)
        if self.config.trace_links:
            self.trace.add(depart_us, src, "send", {"dst": dst, "type": type(payload).__name__})
        if arrival is None:
            self.dropped_count += 1
            if self.config.trace_links:
                self.trace.add(depart_us, src, "drop", {"dst": dst})
            return
        self.inflight += 1
        self._push(arrival, ("deliver", dst, src, payload))
        if (
            self.attacker is not None
            and isinstance(payload, ClientWire)
            and src in self.actors
            and dst in self.nodes
        ):
            self._push(arrival, ("tap", src, dst, payload.raw))

    def _emit(self, src: str, out: NodeOutput) -> None:
        for send_item in out.sends:
            depart = send_item.at_us if send_item.at_us is not None else self.now_us
            self.send(src, send_item.dst, send_item.payload, max(depart, self.now_us))
        for at_us, key in out.timers:
            marker = (src, key, at_us)
            if marker in self._armed:
                continue
            self._armed.add(marker)
            self._push(at_us, ("node_timer", src, key))

    def run(self) -> SimTrace:
        while self.heap and not self.stop:
            t_us, _seq, item = heapq.heappop(self.heap)
            if t_us > self.duration_us:
                break
            self.now_us = t_us
            self._dispatch(item)
            self._check_stop()
        self._finish()
        return self.trace

    def _dispatch(self, item: tuple) -> None:
        kind = item[0]
        if kind == "deliver":
            _, dst, src, payload = item
            self.inflight -= 1
            self.delivered_count += 1
            if self.config.trace_links:
                self.trace.add(self.now_us, dst, "deliver", {"src": src, "type": type(payload).__name__})
            if dst in self.nodes:
                self._node_event(dst, src, payload)
            elif dst in self.actors:
                self.actors[dst].on_receive(payload, src, self.now_us)
            elif self.attacker is not None and dst == self.attacker.id:
                self.attacker.on_receive(payload, src, self.now_us)
        elif kind == "tap":
            _, src, dst, raw = item
            if self.attacker is not None:
                self.attacker.on_tap(src, dst, raw, self.now_us)
        elif kind == "node_timer":
            _, node_id, key = item
            self._armed.discard((node_id, key, self.now_us))
            if node_id in self.crashed:
                return
            self.recorder.now_us, self.recorder.src = self.now_us, node_id
            out = self.nodes[node_id].on_timer(key, self.now_us)
            self._emit(node_id, out)
        elif kind == "actor_wake":
            _, actor_id, idx = item
            self.remaining_wakes -= 1
            actor = self.actors[actor_id]
            for send_item in actor.wake(idx, self.now_us):
                self.pending_responses += 1
                depart = send_item.at_us if send_item.at_us is not None else self.now_us
                self.send(actor_id, send_item.dst, send_item.payload, depart)
        elif kind == "attacker_wake":
            _, tag = item
            self.remaining_wakes -= 1
            for send_item in self.attacker.wake(tag, self.now_us):
                depart = send_item.at_us if send_item.at_us is not None else self.now_us
                self.send(self.attacker.id, send_item.dst, send_item.payload, max(depart, self.now_us))

    def _node_event(self, node_id: str, src: str, payload) -> None:
        node = self.nodes[node_id]
        self.recorder.now_us, self.recorder.src = self.now_us, node_id
        if isinstance(payload, ClientWire):
            out = node.handle_envelope(payload.raw, self.now_us)
        elif isinstance(payload, GossipWire):
            out = node.on_gossip(payload.tx, self.now_us)
        elif isinstance(payload, ConsensusWire):
            out = node.on_consensus(payload.msg, self.now_us)
        elif isinstance(payload, AlertWire):
            out = node.on_alert(payload.alert, self.now_us)
        elif isinstance(payload, LegacyWire):
            out = node.proxy_submit(payload.legacy_id, payload.payload, self.now_us)
        else:
            return
        self._emit(node_id, out)

    def note_response(self) -> None:
        self.pending_responses -= 1

    def _check_stop(self) -> None:
        if self.stop:
            return
        cfg = self.config
        if cfg.stop_at_height is not None:
            for node_id in self.honest_ids:
                if self.nodes[node_id].chain.height >= cfg.stop_at_height:
                    self.stop = True
                    return
        if (
            cfg.stop_on_done
            and self.total_wakes > 0
            and self.remaining_wakes == 0
            and self.pending_responses <= 0
            and self.inflight == 0
        ):
            self.stop = True

    def _finish(self) -> None:
        for node_id in self.node_ids:
            node = self.nodes[node_id]
            self.trace.final[node_id] = NodeFinal(
                chain=node.chain,
                world=node.world,
                alerts=list(node.alerts),
                tip_hash=node.chain.tip_hash(),
                height=node.chain.height,
            )
        self.trace.counters = {
            "sent": self.sent_count,
            "delivered": self.delivered_count,
            "dropped": self.dropped_count,
            "in_flight_at_stop": self.inflight,
            "pending_responses": self.pending_responses,
            "end_us": self.now_us,
        }
        self.trace.genesis = self.genesis
        self.trace.meta = {
            "seed": self.seed,
            "nodes": self.config.nodes,
            "workload": self.config.workload,
            "channel_mode": self.config.channel_mode,
            "attack": self.config.attack or "",
            "honest": list(self.honest_ids),
        }
        if self.attacker is not None:
            self.trace.attack_stats = dict(self.attacker.stats)


# --- plan builders ------------------------------------------------------------------

def _build_plans(sim: Simulation, config: ScenarioConfig):
    """Returns (plans, genesis balances, attacker default params)."""
    seed = sim.seed
    interval_us = config.block_interval_ms * 1000
    balances: dict = {}
    plans: list = []
    attacker_needs: dict = {}

    if config.workload == "none":
        return plans, balances, attacker_needs

    admin_kp = generate_keypair(key_seed(seed, "actor", "patient0"))
    contract = contract_address(admin_kp.public_key, 1)
    balances[admin_kp.public_key] = config.actor_balance

    admin_steps = [
        Step(200_000, "tx", Deploy(HEALTH_RECORD_KIND, b""), "deploy"),
        Step(260_000, "tx", Call(contract, METHOD_GRANT, encode_permission_args(WRITE_PERMISSION, admin_kp.public_key)), "grant_write_self"),
    ]
    next_admin_at = 320_000

    if config.workload == "scenario":
        doctor_kp = generate_keypair(key_seed(seed, "actor", "doctor0"))
        balances[doctor_kp.public_key] = config.actor_balance
        period = config.write_period_ms * 1000
        first_write = max(4 * interval_us, 1_000_000)
        for i in range(config.writes):
            at = first_write + i * period
            args = encode_reading_args(at // 1000, 60 + (i % 40))
            admin_steps.append(Step(at, "tx", Call(contract, METHOD_ADD_READING, args), "write", measured=True))
        writes_end = first_write + max(config.writes - 1, 0) * period
        pause = max(8 * interval_us, 2_000_000)
        grant_at = writes_end + pause
        read1_at = grant_at + pause
        revoke_at = read1_at + pause
        read2_at = revoke_at + pause
        admin_steps.append(
            Step(grant_at, "tx", Call(contract, METHOD_GRANT, encode_permission_args(READ_PERMISSION, doctor_kp.public_key)), "grant_read")
        )
        admin_steps.append(
            Step(revoke_at, "tx", Call(contract, METHOD_REVOKE, encode_permission_args(READ_PERMISSION, doctor_kp.public_key)), "revoke_read")
        )
        doctor_steps = [
            Step(read1_at, "query", Query(contract, *FULL_RANGE), "read_granted", measured=True),
            Step(read2_at, "query", Query(contract, *FULL_RANGE), "read_revoked", measured=True),
        ]
        plans.append(("patient0", admin_kp, 0, admin_steps))
        plans.append(("doctor0", doctor_kp, 0, doctor_steps))
        attacker_needs = {
            "replay_at_us": read2_at + pause,
            "attempt_at_us": read2_at + pause,
            "contract": contract,
            "victim": admin_kp.public_key,
        }

    elif config.workload in ("write", "read", "mixed"):
        tasks = config.tasks if config.tasks > 0 else 100
        start = 6 * interval_us
        writer_kps, reader_kps = [], []
        write_tasks = tasks if config.workload == "write" else (tasks // 2 if config.workload == "mixed" else 0)
        read_tasks = tasks if config.workload == "read" else (tasks - tasks // 2 if config.workload == "mixed" else 0)
        n_writers = min(config.writers, write_tasks) if write_tasks else 0
        n_readers = min(config.readers, read_tasks) if read_tasks else 0
        # Per (sender, node) spacing must stay above the jitter bound, or
        # reordered arrivals would trip the channel's nonce-gap guard.
        fan_out = min(n for n in (n_writers, n_readers) if n) if (n_writers or n_readers) else 1
        period = max(config.task_period_us, config.link.jitter_us // fan_out + 1)

        for j in range(n_writers):
            kp = generate_keypair(key_seed(seed, "actor", f"writer{j}"))
            writer_kps.append(kp)
            balances[kp.public_key] = config.actor_balance
            admin_steps.append(
                Step(next_admin_at, "tx", Call(contract, METHOD_GRANT, encode_permission_args(WRITE_PERMISSION, kp.public_key)), "grant_write")
            )
            next_admin_at += 50_000
        for j in range(n_readers):
            kp = generate_keypair(key_seed(seed, "actor", f"reader{j}"))
            reader_kps.append(kp)
            balances[kp.public_key] = config.actor_balance
            admin_steps.append(
                Step(next_admin_at, "tx", Call(contract, METHOD_GRANT, encode_permission_args(READ_PERMISSION, kp.public_key)), "grant_read")
            )
            next_admin_at += 50_000
        if read_tasks:
            for i in range(5):  # a few readings so queries return data
                args = encode_reading_args((next_admin_at + i) // 1000, 70 + i)
                admin_steps.append(Step(next_admin_at, "tx", Call(contract, METHOD_ADD_READING, args), "seed_write"))
                next_admin_at += 50_000
        plans.append(("patient0", admin_kp, 0, admin_steps))

        for g in range(write_tasks):
            j = g % n_writers
            at = start + g * period
            args = encode_reading_args(at // 1000, 60 + (g % 40))
            step = Step(at, "tx", Call(contract, METHOD_ADD_READING, args), "write", measured=True)
            _append_step(plans, f"writer{j}", writer_kps[j], 0, step)
        for g in range(read_tasks):
            j = g % n_readers
            at = start + g * period
            step = Step(at, "query", Query(contract, *FULL_RANGE), "read", measured=True, target=g % config.nodes)
            _append_step(plans, f"reader{j}", reader_kps[j], 0, step)
        quiesce_at = start + max(write_tasks + read_tasks, 1) * period + 20 * interval_us
        attacker_needs = {
            "replay_at_us": quiesce_at,
            "attempt_at_us": quiesce_at,
            "contract": contract,
            "victim": admin_kp.public_key,
        }

    if config.attack == "dos":
        attacker_kp = generate_keypair(key_seed(seed, "attacker"))
        schedule = GasSchedule.from_dict(config.gas)
        balance = int(config.attack_params.get("balance", 100_000))
        balances[attacker_kp.public_key] = balance
        attacker_needs["count"] = balance // schedule.add_data + 3
        attacker_needs["balance"] = balance

    return plans, balances, attacker_needs


def _append_step(plans: list, actor_id: str, keypair: KeyPair, primary: int, step: Step) -> None:
    for existing_id, _kp, _primary, steps in plans:
        if existing_id == actor_id:
            steps.append(step)
            return
    plans.append((actor_id, keypair, primary, [step]))


# --- public entry points ---------------------------------------------------------------

def run_scenario(config: ScenarioConfig, seed: int) -> SimTrace:
    """Execute one configured scenario to completion and return its trace."""
    return Simulation(config, seed).run()


def inject_attack(config: ScenarioConfig, attack: str, seed: int) -> SimTrace:
    """Run the scenario with the named attacker wired in."""
    if attack not in ATTACK_KINDS:
        raise ConfigInvalid(f"unknown attack {attack!r}")
    import copy

    attacked = copy.deepcopy(config)
    attacked.attack = attack
    if attack == "insertion":
        attacked.stop_on_done = False
        if attacked.duration_s is None:
            raise ConfigInvalid("insertion runs need a fixed duration for baseline comparison")
    return run_scenario(attacked, seed)
