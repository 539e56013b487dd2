"""EdgeLinker: permissioned PoA ledger, secure device channel, and benchmark simulator."""

from .channel import (
    ChannelMessage,
    KeyPair,
    ReplayState,
    SecureEnvelope,
    derive_shared_key,
    generate_keypair,
    open_message,
    seal_message,
)
from .chain import Block, Chain, GenesisConfig, Transaction, build_block, hash_block, validate_block
from .contracts import GasSchedule, WorldState, execute_transaction, read_history
from .consensus import AuthorityConfig, ConsensusEngine, select_proposer
from .node import FogNode
from .sim import LinkModel, ScenarioConfig, inject_attack, run_scenario

__version__ = "0.1.0"

__all__ = [
    "AuthorityConfig",
    "Block",
    "Chain",
    "ChannelMessage",
    "ConsensusEngine",
    "FogNode",
    "GasSchedule",
    "GenesisConfig",
    "KeyPair",
    "LinkModel",
    "ReplayState",
    "ScenarioConfig",
    "SecureEnvelope",
    "Transaction",
    "WorldState",
    "build_block",
    "derive_shared_key",
    "execute_transaction",
    "generate_keypair",
    "hash_block",
    "inject_attack",
    "open_message",
    "read_history",
    "run_scenario",
    "seal_message",
    "select_proposer",
    "validate_block",
]
