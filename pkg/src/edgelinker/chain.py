"""Ledger records: transactions, blocks, hash linking, stateless validation.

Every block header carries the parent hash and a proposer signature over the
header digest, so recomputing hashes over a chain exposes any historical
mutation. Validation is stateless and reports every violation it finds
rather than stopping at the first.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from .channel import KeyPair, sign_digest, verify_digest
from .codec import DecodeError, Reader, enc_bytes, enc_str, enc_u64, enc_u8

ZERO_HASH = bytes(32)
EMPTY_SIG = bytes(64)

DEFAULT_MAX_TXS = 500
DEFAULT_BLOCK_INTERVAL_MS = 1000
DEFAULT_GAS_LIMIT = 10_000_000


class NotAuthority(Exception):
    pass


class ValidationRequired(Exception):
    """Raised when a block is appended without passing validation."""

    def __init__(self, violations):
        super().__init__(f"block failed validation: {[v.value for v in violations]}")
        self.violations = violations


# --- transaction payloads -------------------------------------------------

@dataclass(frozen=True)
class Transfer:
    to: bytes
    amount: int

    TAG = 0


@dataclass(frozen=True)
class Deploy:
    contract_kind: str
    init_args: bytes

    TAG = 1


@dataclass(frozen=True)
class Call:
    contract_address: bytes
    method: str
    args: bytes

    TAG = 2


@dataclass(frozen=True)
class Query:
    """Read request; valid on the wire, never valid inside a block."""

    contract_address: bytes
    from_ts: int
    to_ts: int

    TAG = 3


TxPayload = Union[Transfer, Deploy, Call, Query]


def encode_payload(payload: TxPayload) -> bytes:
    if isinstance(payload, Transfer):
        return enc_u8(Transfer.TAG) + enc_bytes(payload.to) + enc_u64(payload.amount)
    if isinstance(payload, Deploy):
        return enc_u8(Deploy.TAG) + enc_str(payload.contract_kind) + enc_bytes(payload.init_args)
    if isinstance(payload, Call):
        return (
            enc_u8(Call.TAG)
            + enc_bytes(payload.contract_address)
            + enc_str(payload.method)
            + enc_bytes(payload.args)
        )
    if isinstance(payload, Query):
        return (
            enc_u8(Query.TAG)
            + enc_bytes(payload.contract_address)
            + enc_u64(payload.from_ts)
            + enc_u64(payload.to_ts)
        )
    raise TypeError(f"unknown payload type {type(payload).__name__}")


def decode_payload(r: Reader) -> TxPayload:
    tag = r.u8()
    if tag == Transfer.TAG:
        return Transfer(to=r.bytes_(), amount=r.u64())
    if tag == Deploy.TAG:
        return Deploy(contract_kind=r.str_(), init_args=r.bytes_())
    if tag == Call.TAG:
        return Call(contract_address=r.bytes_(), method=r.str_(), args=r.bytes_())
    if tag == Query.TAG:
        return Query(contract_address=r.bytes_(), from_ts=r.u64(), to_ts=r.u64())
    raise DecodeError(f"unknown payload tag {tag}")


# --- transactions ---------------------------------------------------------

@dataclass
class Transaction:
    sender: bytes
    nonce: int
    timestamp: int  # unix milliseconds
    payload: TxPayload
    gas_limit: int
    signature: bytes

    WIRE_TAG = 0x02

    def signing_bytes(self) -> bytes:
        return (
            enc_u8(self.WIRE_TAG)
            + enc_bytes(self.sender)
            + enc_u64(self.nonce)
            + enc_u64(self.timestamp)
            + encode_payload(self.payload)
            + enc_u64(self.gas_limit)
        )

    def encode(self) -> bytes:
        return self.signing_bytes() + enc_bytes(self.signature)

    @classmethod
    def read(cls, r: Reader) -> "Transaction":
        r.expect_tag(cls.WIRE_TAG)
        sender = r.bytes_()
        nonce = r.u64()
        timestamp = r.u64()
        payload = decode_payload(r)
        gas_limit = r.u64()
        signature = r.bytes_()
        return cls(sender, nonce, timestamp, payload, gas_limit, signature)

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        r = Reader(data)
        tx = cls.read(r)
        r.expect_eof()
        return tx


def make_transaction(
    keypair: KeyPair,
    nonce: int,
    timestamp: int,
    payload: TxPayload,
    gas_limit: int = DEFAULT_GAS_LIMIT,
) -> Transaction:
    tx = Transaction(keypair.public_key, nonce, timestamp, payload, gas_limit, EMPTY_SIG)
    digest = hashlib.sha256(tx.signing_bytes()).digest()
    tx.signature = sign_digest(keypair.private_key, digest)
    return tx


def verify_transaction(tx: Transaction) -> bool:
    digest = hashlib.sha256(tx.signing_bytes()).digest()
    return verify_digest(tx.sender, tx.signature, digest)


def hash_tx(tx: Transaction) -> bytes:
    return hashlib.sha256(tx.encode()).digest()


# --- blocks ---------------------------------------------------------------

@dataclass
class BlockHeader:
    height: int
    timestamp: int  # unix milliseconds, strictly greater than parent's
    prev_hash: bytes
    tx_root: bytes
    proposer: bytes
    proposer_signature: bytes

    WIRE_TAG = 0x03

    def signing_bytes(self) -> bytes:
        return (
            enc_u8(self.WIRE_TAG)
            + enc_u64(self.height)
            + enc_u64(self.timestamp)
            + enc_bytes(self.prev_hash)
            + enc_bytes(self.tx_root)
            + enc_bytes(self.proposer)
        )

    def encode(self) -> bytes:
        return self.signing_bytes() + enc_bytes(self.proposer_signature)

    @classmethod
    def read(cls, r: Reader) -> "BlockHeader":
        r.expect_tag(cls.WIRE_TAG)
        return cls(
            height=r.u64(),
            timestamp=r.u64(),
            prev_hash=r.bytes_(),
            tx_root=r.bytes_(),
            proposer=r.bytes_(),
            proposer_signature=r.bytes_(),
        )


@dataclass
class Block:
    header: BlockHeader
    transactions: list

    WIRE_TAG = 0x04

    def encode(self) -> bytes:
        parts = [enc_u8(self.WIRE_TAG), self.header.encode()]
        parts.append(enc_u64(len(self.transactions)))
        parts.extend(tx.encode() for tx in self.transactions)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        r = Reader(data)
        r.expect_tag(cls.WIRE_TAG)
        header = BlockHeader.read(r)
        count = r.u64()
        txs = [Transaction.read(r) for _ in range(count)]
        r.expect_eof()
        return cls(header=header, transactions=txs)


def compute_tx_root(transactions) -> bytes:
    return hashlib.sha256(b"".join(hash_tx(tx) for tx in transactions)).digest()


def hash_block(block: Block) -> bytes:
    return hashlib.sha256(block.encode()).digest()


def verify_block_signature(header: BlockHeader) -> bool:
    digest = hashlib.sha256(header.signing_bytes()).digest()
    return verify_digest(header.proposer, header.proposer_signature, digest)


# --- genesis --------------------------------------------------------------

@dataclass
class GenesisConfig:
    """Bootstrap description; fully determines the genesis block and state."""

    chain_id: int
    authorities: list
    initial_balances: dict = field(default_factory=dict)
    gas: Optional[dict] = None
    block_interval_ms: int = DEFAULT_BLOCK_INTERVAL_MS
    max_txs: int = DEFAULT_MAX_TXS
    genesis_timestamp_ms: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "chain_id": self.chain_id,
                "authorities": [pk.hex() for pk in self.authorities],
                "initial_balances": {addr.hex(): bal for addr, bal in self.initial_balances.items()},
                "gas_schedule": self.gas,
                "block_interval_ms": self.block_interval_ms,
                "max_txs": self.max_txs,
                "genesis_timestamp_ms": self.genesis_timestamp_ms,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "GenesisConfig":
        raw = json.loads(text)
        return cls(
            chain_id=raw["chain_id"],
            authorities=[bytes.fromhex(h) for h in raw["authorities"]],
            initial_balances={bytes.fromhex(a): b for a, b in raw.get("initial_balances", {}).items()},
            gas=raw.get("gas_schedule"),
            block_interval_ms=raw.get("block_interval_ms", DEFAULT_BLOCK_INTERVAL_MS),
            max_txs=raw.get("max_txs", DEFAULT_MAX_TXS),
            genesis_timestamp_ms=raw.get("genesis_timestamp_ms", 0),
        )


def make_genesis(config: GenesisConfig) -> Block:
    header = BlockHeader(
        height=0,
        timestamp=config.genesis_timestamp_ms,
        prev_hash=ZERO_HASH,
        tx_root=compute_tx_root([]),
        proposer=ZERO_HASH,
        proposer_signature=EMPTY_SIG,
    )
    return Block(header=header, transactions=[])


# --- chain ----------------------------------------------------------------

@dataclass
class Chain:
    """Append-only block list owned by a single consensus loop."""

    blocks: list
    authority_set: list

    @classmethod
    def from_genesis(cls, genesis: Block, authorities) -> "Chain":
        return cls(blocks=[genesis], authority_set=list(authorities))

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return self.tip.header.height

    def tip_hash(self) -> bytes:
        return hash_block(self.tip)

    def encode(self) -> bytes:
        return b"".join(b.encode() for b in self.blocks)


class Violation(str, Enum):
    BAD_PARENT_LINK = "bad_parent_link"
    BAD_HEIGHT = "bad_height"
    BAD_TIMESTAMP = "bad_timestamp"
    NOT_AUTHORITY = "not_authority"
    BAD_PROPOSER_SIGNATURE = "bad_proposer_signature"
    BAD_TX_ROOT = "bad_tx_root"
    BAD_TX_SIGNATURE = "bad_tx_signature"
    QUERY_IN_BLOCK = "query_in_block"


@dataclass
class ValidationResult:
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def build_block(
    pending,
    parent: Block,
    proposer: KeyPair,
    now_ms: int,
    max_txs: int = DEFAULT_MAX_TXS,
    authorities=None,
) -> Block:
    """Collate pending transactions under the proposer's signature.

    Queries never enter blocks; ordering is (sender, nonce) with arrival
    order as the stable tiebreak, capped at max_txs.
    """
    if authorities is not None and proposer.public_key not in authorities:
        raise NotAuthority("proposer is not in the authority set")
    seen = set()
    eligible = []
    for tx in pending:
        h = hash_tx(tx)
        if isinstance(tx.payload, Query) or h in seen:
            continue
        seen.add(h)
        eligible.append(tx)
    eligible.sort(key=lambda tx: (tx.sender, tx.nonce))
    chosen = eligible[:max_txs]
    header = BlockHeader(
        height=parent.header.height + 1,
        timestamp=max(now_ms, parent.header.timestamp + 1),
        prev_hash=hash_block(parent),
        tx_root=compute_tx_root(chosen),
        proposer=proposer.public_key,
        proposer_signature=EMPTY_SIG,
    )
    digest = hashlib.sha256(header.signing_bytes()).digest()
    header.proposer_signature = sign_digest(proposer.private_key, digest)
    return Block(header=header, transactions=chosen)


def validate_block(block: Block, parent: Block, authorities) -> ValidationResult:
    """Stateless checks against the parent; reports every violation found."""
    violations = []
    if block.header.prev_hash != hash_block(parent):
        violations.append(Violation.BAD_PARENT_LINK)
    if block.header.height != parent.header.height + 1:
        violations.append(Violation.BAD_HEIGHT)
    if block.header.timestamp <= parent.header.timestamp:
        violations.append(Violation.BAD_TIMESTAMP)
    if block.header.proposer not in authorities:
        violations.append(Violation.NOT_AUTHORITY)
    if not verify_block_signature(block.header):
        violations.append(Violation.BAD_PROPOSER_SIGNATURE)
    if block.header.tx_root != compute_tx_root(block.transactions):
        violations.append(Violation.BAD_TX_ROOT)
    if any(not verify_transaction(tx) for tx in block.transactions):
        violations.append(Violation.BAD_TX_SIGNATURE)
    if any(isinstance(tx.payload, Query) for tx in block.transactions):
        violations.append(Violation.QUERY_IN_BLOCK)
    return ValidationResult(violations)


def append_block(chain: Chain, block: Block) -> Chain:
    result = validate_block(block, chain.tip, chain.authority_set)
    if not result.ok:
        raise ValidationRequired(result.violations)
    chain.blocks.append(block)
    return chain
