"""Three-phase finality engine over a fixed authority set.

Proposers rotate round-robin by (height + round) mod n. A height finalizes
when 2f+1 authorities commit the same block hash, f = (n-1)//3. A node that
sees a prepare quorum locks the block and re-proposals must carry it. Round
changes fire on timeout with per-round deadline doubling; a new round's
proposer waits for a round-change quorum before proposing.

The engine is a deterministic state machine: one ordered input stream per
node, no internal concurrency. Message signatures and authority membership
are verified by the caller before on_message.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

from .chain import Block, Chain, hash_block, validate_block
from .channel import KeyPair, sign_digest, verify_digest
from .codec import Reader, enc_bytes, enc_u64, enc_u8

ZERO_HASH = bytes(32)


class Phase(IntEnum):
    PRE_PREPARE = 0
    PREPARE = 1
    COMMIT = 2
    ROUND_CHANGE = 3


@dataclass
class ConsensusMessage:
    phase: Phase
    height: int
    round: int
    block_hash: bytes  # zero for an unlocked round change
    block: Optional[Block]  # full block on pre-prepare only
    sender: bytes
    signature: bytes

    WIRE_TAG = 0x05

    def signing_bytes(self) -> bytes:
        parts = [
            enc_u8(self.WIRE_TAG),
            enc_u8(int(self.phase)),
            enc_u64(self.height),
            enc_u64(self.round),
            enc_bytes(self.block_hash),
        ]
        if self.block is None:
            parts.append(enc_u8(0))
        else:
            parts.append(enc_u8(1))
            parts.append(self.block.encode())
        parts.append(enc_bytes(self.sender))
        return b"".join(parts)

    def encode(self) -> bytes:
        return self.signing_bytes() + enc_bytes(self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "ConsensusMessage":
        r = Reader(data)
        r.expect_tag(cls.WIRE_TAG)
        phase = Phase(r.u8())
        height = r.u64()
        rnd = r.u64()
        block_hash = r.bytes_()
        block = None
        if r.u8() == 1:
            from .chain import BlockHeader, Transaction  # local to keep imports light

            r.expect_tag(Block.WIRE_TAG)
            header = BlockHeader.read(r)
            count = r.u64()
            txs = [Transaction.read(r) for _ in range(count)]
            block = Block(header=header, transactions=txs)
        sender = r.bytes_()
        signature = r.bytes_()
        r.expect_eof()
        return cls(phase, height, rnd, block_hash, block, sender, signature)


def make_message(
    keypair: KeyPair,
    phase: Phase,
    height: int,
    round_: int,
    block_hash: bytes = ZERO_HASH,
    block: Optional[Block] = None,
) -> ConsensusMessage:
    msg = ConsensusMessage(phase, height, round_, block_hash, block, keypair.public_key, b"")
    digest = hashlib.sha256(msg.signing_bytes()).digest()
    msg.signature = sign_digest(keypair.private_key, digest)
    return msg


def verify_message(msg: ConsensusMessage, authorities) -> bool:
    if msg.sender not in authorities:
        return False
    digest = hashlib.sha256(msg.signing_bytes()).digest()
    return verify_digest(msg.sender, msg.signature, digest)


@dataclass
class AuthorityConfig:
    authorities: list
    round_timeout_us: int = 2_000_000  # round-0 deadline; doubles each round

    @property
    def n(self) -> int:
        return len(self.authorities)

    @property
    def f(self) -> int:
        return (self.n - 1) // 3

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1


def select_proposer(height: int, round_: int, cfg: AuthorityConfig) -> bytes:
    """Deterministic rotation; a round change shifts to the next authority."""
    return cfg.authorities[(height + round_) % cfg.n]


@dataclass
class Incident:
    kind: str  # "invalid_proposal" | "equivocation"
    offender: bytes
    height: int
    detail: str
    block: Optional[Block] = None


@dataclass
class ConsensusState:
    height: int
    round: int = 0
    phase: Phase = Phase.PRE_PREPARE
    locked_block: Optional[Block] = None
    proposals: dict = field(default_factory=dict)  # round -> validated Block
    prepare_votes: dict = field(default_factory=dict)  # (round, hash) -> set of senders
    commit_votes: dict = field(default_factory=dict)
    round_change_votes: dict = field(default_factory=dict)  # round -> set of senders
    voted_hash: dict = field(default_factory=dict)  # (round, phase, sender) -> hash
    sent_prepare: set = field(default_factory=set)  # rounds
    sent_commit: set = field(default_factory=set)
    sent_round_change: set = field(default_factory=set)
    deadline_us: int = 0
    finalized: bool = False


class ConsensusEngine:
    """Per-node deterministic consensus state machine."""

    BUFFER_CAP = 4096

    def __init__(self, cfg: AuthorityConfig, keypair: KeyPair, height: int, now_us: int):
        self.cfg = cfg
        self.keypair = keypair
        self.state = ConsensusState(height=height)
        self.state.deadline_us = now_us + cfg.round_timeout_us
        self.incidents: list = []
        self.dropped = 0
        self._future: list = []  # messages for later heights

    # -- public surface ----------------------------------------------------

    @property
    def height(self) -> int:
        return self.state.height

    @property
    def round(self) -> int:
        return self.state.round

    @property
    def deadline_us(self) -> int:
        return self.state.deadline_us

    @property
    def locked_block(self) -> Optional[Block]:
        return self.state.locked_block

    def is_proposer(self) -> bool:
        return select_proposer(self.state.height, self.state.round, self.cfg) == self.keypair.public_key

    def wants_proposal(self) -> bool:
        """True when this node should issue the pre-prepare for the current round."""
        st = self.state
        if st.finalized or not self.is_proposer() or st.round in st.proposals:
            return False
        if st.round == 0:
            return True
        votes = st.round_change_votes.get(st.round, set())
        return len(votes) >= self.cfg.quorum

    def on_message(self, msg: ConsensusMessage, chain: Chain, now_us: int):
        """Feed one verified message; returns (outbound messages, finalized block)."""
        st = self.state
        out: list = []
        if msg.height != st.height:
            if msg.height > st.height:
                if len(self._future) < self.BUFFER_CAP:
                    self._future.append(msg)
            else:
                self.dropped += 1
            return out, None
        if st.finalized:
            return out, None

        if msg.phase == Phase.ROUND_CHANGE:
            self._record_round_change(msg.sender, msg.round, out, now_us)
        elif msg.phase == Phase.PRE_PREPARE:
            self._handle_pre_prepare(msg, chain)
        elif msg.phase in (Phase.PREPARE, Phase.COMMIT):
            self._record_vote(msg)
        return out, self._check_progress(out, now_us)

    def on_timeout(self, now_us: int):
        """Advance one round and broadcast the round change."""
        st = self.state
        out: list = []
        if st.finalized:
            return out, None
        self._enter_round(st.round + 1, now_us)
        self._send_round_change(st.round, out)
        return out, self._check_progress(out, now_us)

    def propose(self, block: Block, now_us: int):
        """Issue the pre-prepare for the current round.

        A locked block always takes precedence over the freshly built one.
        """
        st = self.state
        out: list = []
        if st.finalized or st.round in st.proposals:
            return out, None
        if st.locked_block is not None:
            block = st.locked_block
        bh = hash_block(block)
        st.proposals[st.round] = block
        out.append(make_message(self.keypair, Phase.PRE_PREPARE, st.height, st.round, bh, block))
        # The pre-prepare doubles as the proposer's prepare vote.
        self._add_vote(st.prepare_votes, st.round, bh, self.keypair.public_key)
        st.sent_prepare.add(st.round)
        return out, self._check_progress(out, now_us)

    def start_height(self, height: int, now_us: int):
        """Reset for the next height and replay any buffered messages for it."""
        self.state = ConsensusState(height=height)
        self.state.deadline_us = now_us + self.cfg.round_timeout_us
        pending, self._future = self._future, []
        ready = [m for m in pending if m.height >= height]
        self._future = [m for m in ready if m.height > height]
        return [m for m in ready if m.height == height]

    # -- internals -----------------------------------------------------------

    def _timeout_for(self, round_: int) -> int:
        return self.cfg.round_timeout_us << min(round_, 20)

    def _enter_round(self, round_: int, now_us: int) -> None:
        st = self.state
        st.round = round_
        st.phase = Phase.PRE_PREPARE
        st.deadline_us = now_us + self._timeout_for(round_)

    def _send_round_change(self, round_: int, out: list) -> None:
        st = self.state
        if round_ in st.sent_round_change:
            return
        st.sent_round_change.add(round_)
        locked_hash = hash_block(st.locked_block) if st.locked_block else ZERO_HASH
        out.append(make_message(self.keypair, Phase.ROUND_CHANGE, st.height, round_, locked_hash))
        st.round_change_votes.setdefault(round_, set()).add(self.keypair.public_key)

    def _record_round_change(self, sender: bytes, round_: int, out: list, now_us: int) -> None:
        st = self.state
        votes = st.round_change_votes.setdefault(round_, set())
        votes.add(sender)
        if round_ <= st.round:
            return
        # f+1 peers already gave up on our round: join the change early.
        if len(votes) > self.cfg.f and round_ not in st.sent_round_change:
            self._send_round_change(round_, out)
        if len(votes) >= self.cfg.quorum:
            self._enter_round(round_, now_us)

    def _handle_pre_prepare(self, msg: ConsensusMessage, chain: Chain) -> None:
        st = self.state
        existing = st.proposals.get(msg.round)
        if existing is not None:
            if hash_block(existing) != msg.block_hash:
                self._incident("equivocation", msg.sender, f"conflicting proposal round {msg.round}")
            return
        if msg.sender != select_proposer(st.height, msg.round, self.cfg):
            self._incident("invalid_proposal", msg.sender, "not the proposer for this round", msg.block)
            return
        if msg.block is None or hash_block(msg.block) != msg.block_hash:
            self._incident("invalid_proposal", msg.sender, "proposal hash mismatch", msg.block)
            return
        result = validate_block(msg.block, chain.tip, self.cfg.authorities)
        if not result.ok:
            detail = ",".join(v.value for v in result.violations)
            self._incident("invalid_proposal", msg.sender, detail, msg.block)
            return
        st.proposals[msg.round] = msg.block
        # The proposer's pre-prepare counts as its prepare vote.
        self._add_vote(st.prepare_votes, msg.round, msg.block_hash, msg.sender)

    def _record_vote(self, msg: ConsensusMessage) -> None:
        st = self.state
        key = (msg.round, int(msg.phase), msg.sender)
        previous = st.voted_hash.get(key)
        if previous is not None:
            if previous != msg.block_hash:
                self._incident("equivocation", msg.sender, f"double {msg.phase.name} in round {msg.round}")
            return
        st.voted_hash[key] = msg.block_hash
        table = st.prepare_votes if msg.phase == Phase.PREPARE else st.commit_votes
        self._add_vote(table, msg.round, msg.block_hash, msg.sender)

    @staticmethod
    def _add_vote(table: dict, round_: int, block_hash: bytes, sender: bytes) -> None:
        table.setdefault((round_, block_hash), set()).add(sender)

    def _incident(self, kind: str, offender: bytes, detail: str, block: Optional[Block] = None) -> None:
        self.incidents.append(Incident(kind, offender, self.state.height, detail, block))

    def _block_for(self, block_hash: bytes) -> Optional[Block]:
        st = self.state
        if st.locked_block is not None and hash_block(st.locked_block) == block_hash:
            return st.locked_block
        for block in st.proposals.values():
            if hash_block(block) == block_hash:
                return block
        return None

    def _check_progress(self, out: list, now_us: int) -> Optional[Block]:
        """Drive prepare/commit/finalize off the current vote tables."""
        st = self.state
        quorum = self.cfg.quorum
        me = self.keypair.public_key

        proposal = st.proposals.get(st.round)
        if proposal is not None and st.round not in st.sent_prepare:
            bh = hash_block(proposal)
            if st.locked_block is None or hash_block(st.locked_block) == bh:
                st.sent_prepare.add(st.round)
                st.phase = Phase.PREPARE
                out.append(make_message(self.keypair, Phase.PREPARE, st.height, st.round, bh))
                self._add_vote(st.prepare_votes, st.round, bh, me)

        for (round_, bh), votes in list(st.prepare_votes.items()):
            if round_ != st.round or len(votes) < quorum or round_ in st.sent_commit:
                continue
            block = self._block_for(bh)
            if block is None:
                continue
            st.locked_block = block
            st.sent_commit.add(round_)
            st.phase = Phase.COMMIT
            out.append(make_message(self.keypair, Phase.COMMIT, st.height, round_, bh))
            self._add_vote(st.commit_votes, round_, bh, me)

        for (round_, bh), votes in list(st.commit_votes.items()):
            if len(votes) < quorum:
                continue
            block = self._block_for(bh)
            if block is None:
                continue
            st.finalized = True
            return block
        return None
