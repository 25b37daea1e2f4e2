"""Value types and pure state transitions for the sharded ledger.

Accounts, transactions, blocks, the per-shard account state, and the
account-to-shard partition map live here, together with the pure functions
the consensus and mechanism layers drive: shard resolution, transaction
classification, block application, state-root computation, and block
verification. Nothing in this module owns a clock, a socket, or a file.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional

ADDRESS_SIZE = 20
DIGEST_SIZE = 32
HASH_ALGORITHM = "sha256"
# Suffix width used to map an address onto a shard.
SHARD_SUFFIX_BYTES = 8

VALUE_BITS = 128
BALANCE_BITS = 256

ZERO_DIGEST = b"\x00" * DIGEST_SIZE


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# Root of a state tree with no accounts.
EMPTY_TREE_ROOT = digest(b"")


class TxKind(Enum):
    """Lifecycle role of a transaction inside blocks and pools.

    REGULAR and ORIGINAL_CTX are injected kinds; the other four are derived
    from an original cross-shard transaction and always carry ``origin_hash``.
    """

    REGULAR = "regular"
    ORIGINAL_CTX = "original_ctx"
    INTRA_RELAY = "intra_relay"
    INTER_RELAY = "inter_relay"
    BROKER_PAYER_HALF = "broker_payer_half"
    BROKER_PAYEE_HALF = "broker_payee_half"


# Stable one-byte tags for hashing; append-only.
_KIND_TAG = {
    TxKind.REGULAR: 0,
    TxKind.ORIGINAL_CTX: 1,
    TxKind.INTRA_RELAY: 2,
    TxKind.INTER_RELAY: 3,
    TxKind.BROKER_PAYER_HALF: 4,
    TxKind.BROKER_PAYEE_HALF: 5,
}

INJECTED_KINDS = frozenset({TxKind.REGULAR, TxKind.ORIGINAL_CTX})
DERIVED_KINDS = frozenset(
    {
        TxKind.INTRA_RELAY,
        TxKind.INTER_RELAY,
        TxKind.BROKER_PAYER_HALF,
        TxKind.BROKER_PAYEE_HALF,
    }
)
# Kinds that move value out of the payer account when applied.
DEBIT_KINDS = frozenset({TxKind.INTRA_RELAY, TxKind.BROKER_PAYER_HALF})
# Kinds that move value into the payee account when applied.
CREDIT_KINDS = frozenset({TxKind.INTER_RELAY, TxKind.BROKER_PAYEE_HALF})


class TxClass(Enum):
    """Classification of an injected transaction against a partition map."""

    REGULAR = "regular"
    CROSS_SHARD = "cross_shard"
    BROKER_INVOLVED = "broker_involved"


class BlockKind(Enum):
    TX = "tx"
    MIGRATION = "migration"


class RejectReason(Enum):
    """Machine-readable outcome of a failed block verification."""

    BAD_HEIGHT = "bad_height"
    BAD_PARENT = "bad_parent"
    OVERSIZE = "oversize"
    WRONG_SHARD = "wrong_shard"
    BAD_STATE_ROOT = "bad_state_root"
    MALFORMED = "malformed"


def address_from_hex(text: str) -> bytes:
    """Parse a 40-hex-digit address, 0x prefix optional, case-insensitive."""
    if not isinstance(text, str):
        raise ValueError(f"bad address literal: {text!r}")
    body = text[2:] if text.startswith(("0x", "0X")) else text
    if len(body) != 2 * ADDRESS_SIZE:
        raise ValueError(f"bad address literal: {text!r}")
    try:
        return bytes.fromhex(body)
    except ValueError:
        raise ValueError(f"bad address literal: {text!r}") from None


def address_to_hex(addr: bytes) -> str:
    return "0x" + addr.hex()


@dataclass(slots=True)
class Transaction:
    """A single transfer, possibly one half of a split cross-shard transfer.

    ``origin_hash`` links a derived half back to the original transaction it
    was split from; injected kinds carry ``None``. ``inject_time`` and
    ``confirm_time`` are virtual milliseconds, stamped by the pool and the
    metrics pipeline respectively. ``fee`` only matters under the
    fee-priority pool policy and defaults to zero.
    """

    payer: bytes
    payee: bytes
    value: int
    nonce: int
    kind: TxKind
    origin_hash: Optional[bytes] = None
    fee: int = 0
    inject_time: Optional[int] = None
    confirm_time: Optional[int] = None
    hash: bytes = b""

    def __post_init__(self) -> None:
        if not self.hash:
            self.hash = tx_digest(
                self.payer, self.payee, self.value, self.nonce, self.kind, self.origin_hash
            )


def tx_digest(
    payer: bytes,
    payee: bytes,
    value: int,
    nonce: int,
    kind: TxKind,
    origin_hash: Optional[bytes],
) -> bytes:
    """Hash of the identity fields; timing fields deliberately excluded."""
    parts = (
        payer
        + payee
        + value.to_bytes(VALUE_BITS // 8, "big")
        + nonce.to_bytes(8, "big")
        + bytes([_KIND_TAG[kind]])
        + (origin_hash or b"")
    )
    return digest(parts)


def make_transaction(
    payer: bytes,
    payee: bytes,
    value: int,
    nonce: int,
    kind: TxKind = TxKind.REGULAR,
    origin_hash: Optional[bytes] = None,
    fee: int = 0,
    inject_time: Optional[int] = None,
) -> Transaction:
    if len(payer) != ADDRESS_SIZE or len(payee) != ADDRESS_SIZE:
        raise ValueError("addresses must be 20 bytes")
    if not (0 <= value < (1 << VALUE_BITS)):
        raise ValueError("value out of range")
    if kind in DERIVED_KINDS and not origin_hash:
        raise ValueError(f"{kind.value} requires an origin_hash")
    if kind in INJECTED_KINDS and origin_hash:
        raise ValueError(f"{kind.value} must not carry an origin_hash")
    return Transaction(
        payer=payer,
        payee=payee,
        value=value,
        nonce=nonce,
        kind=kind,
        origin_hash=origin_hash,
        fee=fee,
        inject_time=inject_time,
    )


@dataclass(frozen=True, slots=True)
class AccountState:
    """Balance and nonce of one account inside one shard.

    Balances are signed: relay and broker halves debit and credit
    independently, so a shard-local balance may go below zero while the
    global sum stays conserved.
    """

    address: bytes
    balance: int = 0
    nonce: int = 0


@dataclass(slots=True)
class Block:
    """One consensus decision: either a batch of transactions or a
    partition-migration checkpoint.

    Migration blocks carry no transactions; instead ``migration_installs``
    holds inbound account states to adopt and ``migration_departures`` lists
    addresses whose state leaves this shard. ``timestamp`` is the proposer's
    virtual clock at proposal time and is part of the hash.
    """

    shard_id: int
    height: int
    parent_hash: bytes
    state_root: bytes
    proposer: str
    block_kind: BlockKind
    txs: list[Transaction] = field(default_factory=list)
    migration_installs: list[AccountState] = field(default_factory=list)
    migration_departures: list[bytes] = field(default_factory=list)
    timestamp: int = 0
    hash: bytes = b""

    def __post_init__(self) -> None:
        if not self.hash:
            self.hash = block_digest(self)


def block_digest(block: Block) -> bytes:
    parts = [
        block.shard_id.to_bytes(4, "big"),
        block.height.to_bytes(8, "big"),
        block.parent_hash,
        block.state_root,
        block.proposer.encode(),
        bytes([0 if block.block_kind is BlockKind.TX else 1]),
        block.timestamp.to_bytes(8, "big"),
    ]
    for tx in block.txs:
        parts.append(tx.hash)
    for acct in block.migration_installs:
        parts.append(
            acct.address
            + acct.balance.to_bytes(BALANCE_BITS // 8, "big", signed=True)
            + acct.nonce.to_bytes(8, "big")
        )
    for addr in block.migration_departures:
        parts.append(addr)
    return digest(b"".join(parts))


def genesis_block(shard_id: int) -> Block:
    return Block(
        shard_id=shard_id,
        height=0,
        parent_hash=ZERO_DIGEST,
        state_root=EMPTY_TREE_ROOT,
        proposer="genesis",
        block_kind=BlockKind.TX,
        timestamp=0,
    )


class StateTree:
    """Account states of one shard with a Merkle root over sorted entries.

    Transition functions treat instances as immutable snapshots: they copy,
    mutate the copy, and return it, so verification can run against the
    pre-state while a candidate post-state is built.
    """

    __slots__ = ("entries", "_root")

    def __init__(self, entries: Optional[dict[bytes, AccountState]] = None) -> None:
        self.entries: dict[bytes, AccountState] = entries if entries is not None else {}
        self._root: Optional[bytes] = None

    def get(self, addr: bytes) -> AccountState:
        acct = self.entries.get(addr)
        return acct if acct is not None else AccountState(address=addr)

    def copy(self) -> "StateTree":
        return StateTree(dict(self.entries))

    def invalidate(self) -> None:
        self._root = None

    def __len__(self) -> int:
        return len(self.entries)


def _leaf_hash(acct: AccountState) -> bytes:
    return digest(
        acct.address
        + acct.balance.to_bytes(BALANCE_BITS // 8, "big", signed=True)
        + acct.nonce.to_bytes(8, "big")
    )


def compute_state_root(state: StateTree) -> bytes:
    """Merkle root over entries sorted by address; an odd node is promoted
    unchanged to the next level. The empty tree hashes the empty string."""
    if state._root is not None:
        return state._root
    level = [_leaf_hash(state.entries[a]) for a in sorted(state.entries)]
    if not level:
        state._root = EMPTY_TREE_ROOT
        return state._root
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            nxt.append(digest(level[i] + level[i + 1]))
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    state._root = level[0]
    return state._root


@dataclass(frozen=True, slots=True)
class PartitionMap:
    """Versioned account-to-shard assignment.

    The default placement hashes nothing: the last ``SHARD_SUFFIX_BYTES``
    bytes of the address, taken as a big-endian integer, are reduced modulo
    the shard count. ``overrides`` pins individual accounts elsewhere and
    grows as repartitioning runs. ``brokers`` are accounts considered
    present in every shard at once.
    """

    n_shards: int
    version: int = 0
    overrides: dict[bytes, int] = field(default_factory=dict)
    brokers: frozenset[bytes] = field(default_factory=frozenset)

    def updated(self, version: int, assignments: dict[bytes, int],
                brokers: Optional[Iterable[bytes]] = None) -> "PartitionMap":
        merged = dict(self.overrides)
        merged.update(assignments)
        return PartitionMap(
            n_shards=self.n_shards,
            version=version,
            overrides=merged,
            brokers=frozenset(brokers) if brokers is not None else self.brokers,
        )


def address_to_shard(addr: bytes, pmap: PartitionMap) -> int:
    override = pmap.overrides.get(addr)
    if override is not None:
        return override
    return int.from_bytes(addr[-SHARD_SUFFIX_BYTES:], "big") % pmap.n_shards


def classify_transaction(tx: Transaction, pmap: PartitionMap) -> TxClass:
    """Classify an injected transaction; derived kinds are already routed."""
    if tx.kind not in INJECTED_KINDS:
        raise ValueError(f"cannot classify derived kind {tx.kind.value}")
    if tx.payer in pmap.brokers or tx.payee in pmap.brokers:
        return TxClass.BROKER_INVOLVED
    if address_to_shard(tx.payer, pmap) == address_to_shard(tx.payee, pmap):
        return TxClass.REGULAR
    return TxClass.CROSS_SHARD


def tx_local_to_shard(tx: Transaction, shard_id: int, pmap: PartitionMap) -> bool:
    """True when every account the transaction touches for execution lives in
    ``shard_id``. Brokers count as local everywhere."""
    if tx.kind in CREDIT_KINDS:
        return address_to_shard(tx.payee, pmap) == shard_id
    if tx.kind in DEBIT_KINDS:
        return address_to_shard(tx.payer, pmap) == shard_id
    if tx.kind is TxKind.REGULAR:
        payer_ok = tx.payer in pmap.brokers or address_to_shard(tx.payer, pmap) == shard_id
        payee_ok = tx.payee in pmap.brokers or address_to_shard(tx.payee, pmap) == shard_id
        return payer_ok and payee_ok
    return False


def apply_txs(state: StateTree, txs: Iterable[Transaction]) -> StateTree:
    """Pure application of executable transactions to a snapshot.

    Regular transfers debit the payer and credit the payee. A debit half
    only debits, a credit half only credits; the matching half settles in
    the counterpart shard. No overdraft rule exists, balances may go
    negative.
    """
    out = state.copy()
    entries = out.entries
    for tx in txs:
        kind = tx.kind
        if kind is TxKind.REGULAR:
            payer = entries.get(tx.payer) or AccountState(address=tx.payer)
            entries[tx.payer] = AccountState(tx.payer, payer.balance - tx.value, payer.nonce + 1)
            payee = entries.get(tx.payee) or AccountState(address=tx.payee)
            entries[tx.payee] = AccountState(tx.payee, payee.balance + tx.value, payee.nonce)
        elif kind in DEBIT_KINDS:
            payer = entries.get(tx.payer) or AccountState(address=tx.payer)
            entries[tx.payer] = AccountState(tx.payer, payer.balance - tx.value, payer.nonce + 1)
        elif kind in CREDIT_KINDS:
            payee = entries.get(tx.payee) or AccountState(address=tx.payee)
            entries[tx.payee] = AccountState(tx.payee, payee.balance + tx.value, payee.nonce)
        else:
            raise ValueError(f"block carries unexecutable kind {kind.value}")
    out.invalidate()
    return out


def apply_migration(
    state: StateTree,
    installs: Iterable[AccountState],
    departures: Iterable[bytes],
) -> StateTree:
    """Install inbound account states verbatim and drop departing ones."""
    out = state.copy()
    for acct in installs:
        out.entries[acct.address] = acct
    for addr in departures:
        out.entries.pop(addr, None)
    out.invalidate()
    return out


def apply_block_to_state(state: StateTree, block: Block) -> StateTree:
    """Pure block application; the input snapshot is left untouched."""
    if block.block_kind is BlockKind.MIGRATION:
        return apply_migration(state, block.migration_installs, block.migration_departures)
    return apply_txs(state, block.txs)


def verify_block(
    block: Block,
    head: Block,
    state: StateTree,
    pmap: PartitionMap,
    theta: int,
    applied: Optional[StateTree] = None,
) -> Optional[RejectReason]:
    """Check a proposed block against the local chain head and pre-state.

    Returns None when acceptable, otherwise the first failing reason.
    ``applied`` lets the caller supply a precomputed post-state (needed for
    migration blocks, whose application the mechanism layer extends); when
    omitted the plain transition above is used.
    """
    if block.shard_id != head.shard_id:
        return RejectReason.WRONG_SHARD
    if block.height != head.height + 1:
        return RejectReason.BAD_HEIGHT
    if block.parent_hash != head.hash:
        return RejectReason.BAD_PARENT
    if block.block_kind is BlockKind.MIGRATION:
        if block.txs:
            return RejectReason.MALFORMED
    else:
        if block.migration_installs or block.migration_departures:
            return RejectReason.MALFORMED
        if len(block.txs) > theta:
            return RejectReason.OVERSIZE
        for tx in block.txs:
            if tx.kind in INJECTED_KINDS and tx.kind is not TxKind.REGULAR:
                return RejectReason.MALFORMED
            if tx.kind in DERIVED_KINDS and not tx.origin_hash:
                return RejectReason.MALFORMED
            if not tx_local_to_shard(tx, block.shard_id, pmap):
                return RejectReason.WRONG_SHARD
    post = applied if applied is not None else apply_block_to_state(state, block)
    if compute_state_root(post) != block.state_root:
        return RejectReason.BAD_STATE_ROOT
    return None


# --- canonical JSON layouts (wire and disk share these) ---


def tx_to_json(tx: Transaction, confirm_time: Optional[int] = None) -> dict:
    """Values are decimal strings so parsers without big integers survive."""
    return {
        "hash": tx.hash.hex(),
        "payer": address_to_hex(tx.payer),
        "payee": address_to_hex(tx.payee),
        "value": str(tx.value),
        "nonce": tx.nonce,
        "kind": tx.kind.value,
        "origin_hash": tx.origin_hash.hex() if tx.origin_hash else None,
        "fee": tx.fee,
        "inject_time": tx.inject_time,
        "confirm_time": confirm_time if confirm_time is not None else tx.confirm_time,
    }


def tx_from_json(obj: dict) -> Transaction:
    tx = Transaction(
        payer=address_from_hex(obj["payer"]),
        payee=address_from_hex(obj["payee"]),
        value=int(obj["value"]),
        nonce=int(obj["nonce"]),
        kind=TxKind(obj["kind"]),
        origin_hash=bytes.fromhex(obj["origin_hash"]) if obj.get("origin_hash") else None,
        fee=int(obj.get("fee", 0)),
        inject_time=obj.get("inject_time"),
        confirm_time=obj.get("confirm_time"),
    )
    if tx.hash.hex() != obj["hash"]:
        raise ValueError("transaction hash mismatch in serialized form")
    return tx


def account_to_json(acct: AccountState) -> dict:
    return {
        "address": address_to_hex(acct.address),
        "balance": str(acct.balance),
        "nonce": acct.nonce,
    }


def account_from_json(obj: dict) -> AccountState:
    return AccountState(
        address=address_from_hex(obj["address"]),
        balance=int(obj["balance"]),
        nonce=int(obj["nonce"]),
    )


def block_to_json(block: Block, confirm_time: Optional[int] = None) -> dict:
    return {
        "shard_id": block.shard_id,
        "height": block.height,
        "parent_hash": block.parent_hash.hex(),
        "state_root": block.state_root.hex(),
        "proposer": block.proposer,
        "block_kind": block.block_kind.value,
        "txs": [tx_to_json(tx, confirm_time) for tx in block.txs],
        "migration_installs": [account_to_json(a) for a in block.migration_installs],
        "migration_departures": [address_to_hex(a) for a in block.migration_departures],
        "timestamp": block.timestamp,
        "commit_time": confirm_time,
        "hash": block.hash.hex(),
    }


def block_from_json(obj: dict) -> Block:
    block = Block(
        shard_id=int(obj["shard_id"]),
        height=int(obj["height"]),
        parent_hash=bytes.fromhex(obj["parent_hash"]),
        state_root=bytes.fromhex(obj["state_root"]),
        proposer=obj["proposer"],
        block_kind=BlockKind(obj["block_kind"]),
        txs=[tx_from_json(t) for t in obj["txs"]],
        migration_installs=[account_from_json(a) for a in obj["migration_installs"]],
        migration_departures=[address_from_hex(a) for a in obj["migration_departures"]],
        timestamp=int(obj["timestamp"]),
    )
    if block.hash.hex() != obj["hash"]:
        raise ValueError("block hash mismatch in serialized form")
    return block


def replace_tx(tx: Transaction, **changes) -> Transaction:
    """Copy with updated timing or fee fields; identity fields keep the hash."""
    return replace(tx, **changes)


def replace_tx_list(txs: Iterable[Transaction]) -> list[Transaction]:
    """Fresh copies of shared transaction objects.

    Nodes stamp arrival times on pool entries, so anything delivered to
    several nodes at once must be copied before it is stamped.
    """
    return [replace(t) for t in txs]
