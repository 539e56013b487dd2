"""Deterministic contract execution: permissions, health records, gas.

The permission table is a mapping from 32-byte permission ids to address
sets. Holders of the root permitter permission (id 0x00...00) may grant or
revoke any permission; the deployer receives it at initialization. The
health-record contract keeps an append-only list of (timestamp, heart_rate)
readings gated by write/read permissions.

Gas is charged up front at one coin per unit, including for calls that end
in a permission denial, which is what drains a flooding attacker's balance.
Fees accumulate in a sink account and move to the block proposer when the
enclosing block is applied.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .chain import Block, Call, Deploy, GenesisConfig, Query, Transaction, Transfer, hash_tx
from .codec import DecodeError, Reader, enc_bytes, enc_list, enc_str, enc_u64, enc_u8

PERMITTER_PERMISSION = bytes(32)
WRITE_PERMISSION = bytes(31) + b"\x01"
READ_PERMISSION = bytes(31) + b"\x02"

FEE_SINK = b"\xfe" * 32

HEALTH_RECORD_KIND = "health_record"

METHOD_ADD_READING = "add_reading"
METHOD_GRANT = "grant"
METHOD_REVOKE = "revoke"
METHOD_READ_HISTORY = "read_history"

RESULT_OK = "ok"
RESULT_DENIED = "denied"
RESULT_FAILED = "failed"
RESULT_SKIPPED = "skipped"

MAX_HEART_RATE = 0xFFFF


class ContractError(Exception):
    pass


class PermissionDenied(ContractError):
    pass


class UnknownContract(ContractError):
    pass


class BadNonce(ContractError):
    pass


class InsufficientBalance(ContractError):
    pass


@dataclass
class GasSchedule:
    """Unit costs per operation; defaults match the measured fee table."""

    deploy: int = 701_382
    add_data: int = 48_182
    grant: int = 23_521
    revoke: int = 21_948
    read_query: int = 21_000
    transfer: int = 21_000

    def to_dict(self) -> dict:
        return {
            "deploy": self.deploy,
            "add_data": self.add_data,
            "grant": self.grant,
            "revoke": self.revoke,
            "read_query": self.read_query,
            "transfer": self.transfer,
        }

    @classmethod
    def from_dict(cls, raw: dict | None) -> "GasSchedule":
        if not raw:
            return cls()
        return cls(**{k: int(v) for k, v in raw.items()})


# --- permission table (the access-control core) -----------------------------

@dataclass
class PermissionTable:
    permissions: dict = field(default_factory=dict)  # permission id -> set of addresses

    def encode(self) -> bytes:
        parts = [enc_u8(0x10)]
        items = sorted((pid, sorted(addrs)) for pid, addrs in self.permissions.items() if addrs)
        parts.append(enc_u64(len(items)))
        for pid, addrs in items:
            parts.append(enc_bytes(pid))
            parts.append(enc_list(addrs, enc_bytes))
        return b"".join(parts)


def initialize(deployer: bytes) -> PermissionTable:
    """Fresh table whose only entry is the deployer as permitter."""
    return PermissionTable(permissions={PERMITTER_PERMISSION: {deployer}})


def has_permission(table: PermissionTable, permission: bytes, address: bytes) -> bool:
    return address in table.permissions.get(permission, ())


def grant_permission(table: PermissionTable, caller: bytes, permission: bytes, address: bytes) -> PermissionTable:
    """Add address to the permission set; permitter holders only."""
    if not has_permission(table, PERMITTER_PERMISSION, caller):
        raise PermissionDenied("caller lacks permitter permission")
    table.permissions.setdefault(permission, set()).add(address)
    return table


def revoke_permission(table: PermissionTable, caller: bytes, permission: bytes, address: bytes) -> PermissionTable:
    """Remove address from the permission set; removing a non-member is a no-op."""
    if not has_permission(table, PERMITTER_PERMISSION, caller):
        raise PermissionDenied("caller lacks permitter permission")
    table.permissions.get(permission, set()).discard(address)
    return table


# --- contract and world state ----------------------------------------------

@dataclass
class HealthRecordState:
    owner: bytes
    readings: list = field(default_factory=list)  # append-only (timestamp_ms, heart_rate)
    permission_table: PermissionTable = field(default_factory=PermissionTable)

    def encode(self) -> bytes:
        parts = [enc_u8(0x11), enc_bytes(self.owner)]
        parts.append(enc_u64(len(self.readings)))
        for ts, hr in self.readings:
            parts.append(enc_u64(ts))
            parts.append(enc_u64(hr))
        parts.append(self.permission_table.encode())
        return b"".join(parts)


@dataclass
class Account:
    balance: int = 0
    next_nonce: int = 1


@dataclass
class Event:
    contract_address: bytes
    name: str
    data: bytes
    block_height: int
    tx_hash: bytes


@dataclass
class Receipt:
    tx_hash: bytes
    result: str
    reason: str
    gas_used: int
    events: list
    height: int


@dataclass
class WorldState:
    accounts: dict = field(default_factory=dict)  # address -> Account
    contracts: dict = field(default_factory=dict)  # contract address -> HealthRecordState

    def encode(self) -> bytes:
        parts = [enc_u8(0x12)]
        accts = sorted(self.accounts.items())
        parts.append(enc_u64(len(accts)))
        for addr, acct in accts:
            parts.append(enc_bytes(addr))
            parts.append(enc_u64(acct.balance))
            parts.append(enc_u64(acct.next_nonce))
        contracts = sorted(self.contracts.items())
        parts.append(enc_u64(len(contracts)))
        for addr, state in contracts:
            parts.append(enc_bytes(addr))
            parts.append(state.encode())
        return b"".join(parts)

    def digest(self) -> bytes:
        return hashlib.sha256(self.encode()).digest()

    def total_supply(self) -> int:
        return sum(acct.balance for acct in self.accounts.values())

    def balance(self, address: bytes) -> int:
        acct = self.accounts.get(address)
        return acct.balance if acct else 0

    def next_nonce(self, address: bytes) -> int:
        acct = self.accounts.get(address)
        return acct.next_nonce if acct else 1

    def _account(self, address: bytes) -> Account:
        acct = self.accounts.get(address)
        if acct is None:
            acct = Account()
            self.accounts[address] = acct
        return acct


def contract_address(deployer: bytes, nonce: int) -> bytes:
    return hashlib.sha256(deployer + enc_u64(nonce)).digest()


def encode_reading_args(timestamp_ms: int, heart_rate: int) -> bytes:
    return enc_u64(timestamp_ms) + enc_u64(heart_rate)


def decode_reading_args(args: bytes):
    r = Reader(args)
    ts, hr = r.u64(), r.u64()
    r.expect_eof()
    return ts, hr


def encode_permission_args(permission: bytes, address: bytes) -> bytes:
    return enc_bytes(permission) + enc_bytes(address)


def decode_permission_args(args: bytes):
    r = Reader(args)
    permission, address = r.bytes_(), r.bytes_()
    r.expect_eof()
    return permission, address


def _gas_for(payload, schedule: GasSchedule) -> int:
    if isinstance(payload, Deploy):
        return schedule.deploy
    if isinstance(payload, Transfer):
        return schedule.transfer
    if isinstance(payload, Call):
        if payload.method == METHOD_ADD_READING:
            return schedule.add_data
        if payload.method == METHOD_GRANT:
            return schedule.grant
        if payload.method == METHOD_REVOKE:
            return schedule.revoke
        return schedule.transfer  # base charge for unrecognized methods
    raise ContractError(f"payload {type(payload).__name__} is not executable")


def execute_transaction(world: WorldState, tx: Transaction, schedule: GasSchedule, height: int) -> Receipt:
    """Apply one transaction in place and return its receipt.

    The fee is charged before the effect runs, so denied calls still pay.
    Raises InsufficientBalance or BadNonce without touching state; those
    transactions are skipped and the sender nonce is not consumed.
    """
    if isinstance(tx.payload, Query):
        raise ContractError("queries are served locally, never executed")
    sender_acct = world.accounts.get(tx.sender)
    balance = sender_acct.balance if sender_acct else 0
    next_nonce = sender_acct.next_nonce if sender_acct else 1
    if tx.nonce != next_nonce:
        raise BadNonce(f"expected nonce {next_nonce}, got {tx.nonce}")
    gas = _gas_for(tx.payload, schedule)
    if balance < gas:
        raise InsufficientBalance(f"balance {balance} below fee {gas}")

    sender_acct = world._account(tx.sender)
    sender_acct.balance -= gas
    world._account(FEE_SINK).balance += gas
    sender_acct.next_nonce += 1

    txh = hash_tx(tx)
    events: list = []
    result, reason = RESULT_OK, ""
    payload = tx.payload

    if isinstance(payload, Deploy):
        addr = contract_address(tx.sender, tx.nonce)
        world.contracts[addr] = HealthRecordState(
            owner=tx.sender,
            readings=[],
            permission_table=initialize(tx.sender),
        )
    elif isinstance(payload, Transfer):
        if sender_acct.balance < payload.amount:
            result, reason = RESULT_FAILED, "insufficient_funds"
        else:
            sender_acct.balance -= payload.amount
            world._account(payload.to).balance += payload.amount
    elif isinstance(payload, Call):
        contract = world.contracts.get(payload.contract_address)
        if contract is None:
            result, reason = RESULT_FAILED, "unknown_contract"
        elif payload.method == METHOD_ADD_READING:
            result, reason, events = _call_add_reading(contract, payload, tx.sender, txh, height)
        elif payload.method in (METHOD_GRANT, METHOD_REVOKE):
            result, reason, events = _call_permission(contract, payload, tx.sender, txh, height)
        else:
            result, reason = RESULT_FAILED, "unknown_method"

    return Receipt(tx_hash=txh, result=result, reason=reason, gas_used=gas, events=events, height=height)


def _call_add_reading(contract, payload, sender, txh, height):
    try:
        ts, hr = decode_reading_args(payload.args)
    except DecodeError:
        return RESULT_FAILED, "bad_args", []
    if hr > MAX_HEART_RATE:
        return RESULT_FAILED, "bad_args", []
    if not has_permission(contract.permission_table, WRITE_PERMISSION, sender):
        return RESULT_DENIED, "write_permission", []
    contract.readings.append((ts, hr))
    event = Event(payload.contract_address, "ReadingAdded", encode_reading_args(ts, hr), height, txh)
    return RESULT_OK, "", [event]


def _call_permission(contract, payload, sender, txh, height):
    try:
        permission, address = decode_permission_args(payload.args)
    except DecodeError:
        return RESULT_FAILED, "bad_args", []
    try:
        if payload.method == METHOD_GRANT:
            grant_permission(contract.permission_table, sender, permission, address)
        else:
            revoke_permission(contract.permission_table, sender, permission, address)
    except PermissionDenied:
        return RESULT_DENIED, "permitter_permission", []
    data = enc_str(payload.method) + encode_permission_args(permission, address)
    event = Event(payload.contract_address, "PermissionChanged", data, height, txh)
    return RESULT_OK, "", [event]


def apply_block(world: WorldState, block: Block, schedule: GasSchedule) -> list:
    """Execute a finalized block in order; fees sweep to the proposer."""
    height = block.header.height
    receipts = []
    fees = 0
    for tx in block.transactions:
        try:
            receipt = execute_transaction(world, tx, schedule, height)
            fees += receipt.gas_used
        except (InsufficientBalance, BadNonce) as exc:
            receipt = Receipt(
                tx_hash=hash_tx(tx),
                result=RESULT_SKIPPED,
                reason=type(exc).__name__,
                gas_used=0,
                events=[],
                height=height,
            )
        receipts.append(receipt)
    if fees:
        world._account(FEE_SINK).balance -= fees
        world._account(block.header.proposer).balance += fees
    return receipts


def read_history(world: WorldState, contract: bytes, caller: bytes, from_ts: int, to_ts: int) -> list:
    """Pure read of the reading log, gated on ownership or read permission."""
    state = world.contracts.get(contract)
    if state is None:
        raise UnknownContract(contract.hex())
    if caller != state.owner and not has_permission(state.permission_table, READ_PERMISSION, caller):
        raise PermissionDenied("caller lacks read permission")
    return [(ts, hr) for ts, hr in state.readings if from_ts <= ts <= to_ts]


def genesis_world(config: GenesisConfig) -> WorldState:
    world = WorldState()
    for addr, balance in config.initial_balances.items():
        world.accounts[addr] = Account(balance=balance, next_nonce=1)
    return world


def replay_chain(chain, config: GenesisConfig) -> WorldState:
    """Rebuild world state from genesis by replaying every finalized block."""
    schedule = GasSchedule.from_dict(config.gas)
    world = genesis_world(config)
    for block in chain.blocks[1:]:
        apply_block(world, block, schedule)
    return world
