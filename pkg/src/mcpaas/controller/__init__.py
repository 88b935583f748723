"""The controller: system state, transactions, election, checkpoints, fail-over."""

from .checkpoint import (
    LEADER_KEY,
    Checkpoint,
    CheckpointLog,
    DigestMismatch,
    FileStateStore,
    MemoryStateStore,
    StateStore,
    StoreUnavailable,
    encode_leader,
    read_leader,
)
from .election import ElectionStrategy, MinLatencyElection, NoCandidate, Role, RoleState, elect_leader, election_duration
from .platform import AppSettings, DecisionRejected, InstanceFailure, Platform, PlatformConfig, RecoveryReport
from .transactions import (
    ConflictAbort,
    IntakePaused,
    InvalidKey,
    SystemState,
    Transaction,
    TransactionError,
    TransactionManager,
    TxStatus,
)
