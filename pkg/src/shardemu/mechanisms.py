"""Cross-shard mechanisms, partition policies, and account migration.

Two mechanism families plug into the consensus hooks:

* relay: a cross-shard transfer is packed as a debit half in the payer's
  shard; on commit the matching credit half is forwarded to the payee's
  shard and packed there later. Atomicity is eventual, via the shared
  origin hash.
* broker: a cross-shard transfer is rewritten at injection into two
  independent, locally executable halves against a well-known intermediary
  account; transfers that already touch a broker stay single regular
  transactions.

Partitioning is either the static address-suffix map or constrained label
propagation over the observed transfer graph, with lock-based account
migration riding the normal consensus path as dedicated blocks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Optional

from .core import (
    CREDIT_KINDS,
    Block,
    BlockKind,
    PartitionMap,
    RejectReason,
    StateTree,
    Transaction,
    TxClass,
    TxKind,
    address_to_shard,
    apply_block_to_state,
    apply_txs,
    classify_transaction,
    compute_state_root,
    make_transaction,
    replace_tx_list,
    verify_block,
)
from .transport import (
    AccountMigrate,
    BlockInfo,
    Envelope,
    InjectTxs,
    MigratedAccount,
    PartitionResult,
    RelayCtx,
    TxSummary,
    shard_of,
)

log = logging.getLogger(__name__)


class NotCrossShard(ValueError):
    """Split requested for a transfer that both parties share a shard for."""


class NoBrokers(RuntimeError):
    """Broker mechanism configured without any broker accounts."""


# --- relay primitives ---


def relay_split(tx: Transaction, pmap: PartitionMap) -> tuple[Transaction, Transaction]:
    """Split an original transfer into its debit and credit halves.

    Both halves inherit value, nonce and inject_time and point back at the
    original through origin_hash. The debit half belongs in the payer's
    shard, the credit half in the payee's.
    """
    if tx.kind not in (TxKind.REGULAR, TxKind.ORIGINAL_CTX):
        raise NotCrossShard(f"cannot split derived kind {tx.kind.value}")
    origin = tx.hash
    intra = make_transaction(
        tx.payer, tx.payee, tx.value, tx.nonce,
        kind=TxKind.INTRA_RELAY, origin_hash=origin, fee=tx.fee,
        inject_time=tx.inject_time,
    )
    inter = make_transaction(
        tx.payer, tx.payee, tx.value, tx.nonce,
        kind=TxKind.INTER_RELAY, origin_hash=origin, fee=tx.fee,
        inject_time=tx.inject_time,
    )
    return intra, inter


def inter_from_intra(intra: Transaction) -> Transaction:
    """Reconstruct the credit half from a committed debit half."""
    return make_transaction(
        intra.payer, intra.payee, intra.value, intra.nonce,
        kind=TxKind.INTER_RELAY, origin_hash=intra.origin_hash, fee=intra.fee,
        inject_time=intra.inject_time,
    )


def relay_validate(body: RelayCtx, sender: str) -> Optional[str]:
    """Structural checks on an inbound relay batch; None when acceptable."""
    src = shard_of(sender)
    if src is None or src != body.source_shard:
        return f"sender {sender} does not belong to claimed shard {body.source_shard}"
    for tx in body.txs:
        if tx.kind not in CREDIT_KINDS:
            return f"relay batch carries non-credit kind {tx.kind.value}"
        if not tx.origin_hash:
            return "relay half missing origin hash"
    return None


# --- broker primitives ---


def pick_broker(pmap: PartitionMap) -> bytes:
    """Deterministic choice: the lowest broker address."""
    if not pmap.brokers:
        raise NoBrokers("no broker accounts configured")
    return min(pmap.brokers)


def broker_transform(tx: Transaction, pmap: PartitionMap) -> tuple[Transaction, Transaction]:
    """Rewrite a cross-shard transfer into two broker-bridged halves.

    The payer half (payer pays the broker) belongs in the payer's shard,
    the payee half (broker pays the payee) in the payee's shard. Both are
    locally executable on arrival and settle independently.
    """
    if classify_transaction(tx, pmap) is not TxClass.CROSS_SHARD:
        raise NotCrossShard("broker transform only applies to cross-shard transfers")
    broker = pick_broker(pmap)
    origin = tx.hash
    payer_half = make_transaction(
        tx.payer, broker, tx.value, tx.nonce,
        kind=TxKind.BROKER_PAYER_HALF, origin_hash=origin, fee=tx.fee,
        inject_time=tx.inject_time,
    )
    payee_half = make_transaction(
        broker, tx.payee, tx.value, tx.nonce,
        kind=TxKind.BROKER_PAYEE_HALF, origin_hash=origin, fee=tx.fee,
        inject_time=tx.inject_time,
    )
    return payer_half, payee_half


def exec_home_shard(tx: Transaction, pmap: PartitionMap) -> int:
    """Shard where a queued transaction must execute under ``pmap``.

    Credit halves execute where the payee lives; everything else where the
    payer lives, falling back to the payee when the payer is a broker.
    """
    if tx.kind in CREDIT_KINDS:
        return address_to_shard(tx.payee, pmap)
    if tx.payer in pmap.brokers and tx.payee not in pmap.brokers:
        return address_to_shard(tx.payee, pmap)
    return address_to_shard(tx.payer, pmap)


# --- constrained label propagation ---


@dataclass
class ClpaParams:
    """beta damps the pull of already-loaded shards; rho caps the rounds."""

    beta: float = 0.5
    rho: int = 100


class AccountGraph:
    """Undirected weighted transfer graph folded from committed blocks.

    Vertex weight counts transfers touching the account; edge weight counts
    transfers between the pair. Credit halves are skipped during folding so
    a relayed transfer contributes one edge, not two.
    """

    def __init__(self) -> None:
        self.vertex_weight: dict[bytes, int] = {}
        self.adj: dict[bytes, dict[bytes, int]] = {}
        self.edge_count = 0

    def add_edge(self, a: bytes, b: bytes, w: int = 1) -> None:
        if a == b:
            return
        self.vertex_weight[a] = self.vertex_weight.get(a, 0) + w
        self.vertex_weight[b] = self.vertex_weight.get(b, 0) + w
        row = self.adj.setdefault(a, {})
        if b not in row:
            self.edge_count += 1
        row[b] = row.get(b, 0) + w
        row = self.adj.setdefault(b, {})
        row[a] = row.get(a, 0) + w

    def add_vertex(self, a: bytes, w: int = 0) -> None:
        self.vertex_weight.setdefault(a, w)
        self.adj.setdefault(a, {})

    @property
    def vertices(self) -> list[bytes]:
        return list(self.vertex_weight)

    def __len__(self) -> int:
        return len(self.vertex_weight)


def shard_loads(
    graph: AccountGraph, labels: dict[bytes, int], n_shards: int
) -> list[int]:
    loads = [0] * n_shards
    for v, w in graph.vertex_weight.items():
        loads[labels[v]] += w
    return loads


def clpa_objective(
    graph: AccountGraph, labels: dict[bytes, int], beta: float, n_shards: int
) -> float:
    """Total load-damped within-shard affinity the propagation maximizes."""
    loads = shard_loads(graph, labels, n_shards)
    mean = sum(loads) / n_shards if any(loads) else 1.0
    total = 0.0
    for v, row in graph.adj.items():
        k = labels[v]
        internal = sum(w for u, w in row.items() if labels[u] == k)
        total += internal * (1.0 - beta * loads[k] / mean)
    return total


def cut_weight(graph: AccountGraph, labels: dict[bytes, int]) -> int:
    cut = 0
    for v, row in graph.adj.items():
        for u, w in row.items():
            if v < u and labels[v] != labels[u]:
                cut += w
    return cut


def clpa_partition(
    graph: AccountGraph,
    pmap: PartitionMap,
    params: ClpaParams,
) -> tuple[PartitionMap, dict[bytes, int]]:
    """Relabel accounts to soak up cross-shard edges without piling load.

    Vertices are visited in ascending address order; each adopts the shard
    maximizing affinity times the load damping factor, ties resolved toward
    the lowest shard id. Shard loads are frozen for the duration of a round
    and recomputed between rounds. Isolated vertices and brokers keep their
    current shard. Returns the bumped map and the dirty set: accounts whose
    label changed, mapped to their new shard.
    """
    n = pmap.n_shards
    beta, rho = params.beta, params.rho
    labels = {v: address_to_shard(v, pmap) for v in graph.vertex_weight}
    order = sorted(labels)
    total_weight = sum(graph.vertex_weight.values())
    mean = total_weight / n if total_weight else 1.0
    for _ in range(rho):
        loads = shard_loads(graph, labels, n)
        factors = [1.0 - beta * loads[k] / mean for k in range(n)]
        changed = False
        for v in order:
            if v in pmap.brokers:
                continue
            row = graph.adj.get(v)
            if not row:
                continue
            affinity = [0] * n
            for u, w in row.items():
                affinity[labels[u]] += w
            best_k = labels[v]
            best_score = affinity[best_k] * factors[best_k]
            for k in range(n):
                score = affinity[k] * factors[k]
                if score > best_score or (score == best_score and k < best_k):
                    best_k, best_score = k, score
            if best_k != labels[v]:
                labels[v] = best_k
                changed = True
        if not changed:
            break
    dirty = {v: k for v, k in labels.items() if k != address_to_shard(v, pmap)}
    new_map = pmap.updated(pmap.version + 1, dirty)
    return new_map, dirty


# --- migration ---


@dataclass
class PendingPartition:
    version: int
    assignments: dict[bytes, int]
    brokers: list[bytes]


class MigrationController:
    """Per-replica state machine for one lock-based account migration.

    Lifecycle: a partition announcement locks the pool (uninvolved shards
    just adopt the map), the node quiesces once no round of its own is in
    flight, the leader then extracts displaced pool entries and ships
    account states, and a dedicated block commits the handover, switches
    the map, and unlocks.
    """

    def __init__(self) -> None:
        self.pending: Optional[PendingPartition] = None
        self.quiesced = False
        self.shipped = False
        self.outbound: dict[bytes, int] = {}
        self.inbound_expected: set[bytes] = set()
        self.inbound_states: dict[bytes, Any] = {}
        self.inbound_txs: dict[int, list[Transaction]] = {}
        self.inbound_seen: set[bytes] = set()
        self.extracted: list[Transaction] = []
        self.early: dict[int, list[tuple[str, AccountMigrate]]] = {}
        self.stalled_since: Optional[int] = None

    @property
    def active(self) -> bool:
        return self.pending is not None

    def new_shard_of(self, addr: bytes, pmap: PartitionMap) -> int:
        assert self.pending is not None
        got = self.pending.assignments.get(addr)
        return got if got is not None else address_to_shard(addr, pmap)

    def on_partition_result(self, node: Any, body: PartitionResult, now: int) -> list:
        if body.version <= node.pmap.version or self.active:
            return []
        me = node.shard_id
        outbound = {
            a: s
            for a, s in body.overrides.items()
            if address_to_shard(a, node.pmap) == me and s != me
        }
        inbound = {
            a
            for a, s in body.overrides.items()
            if s == me and address_to_shard(a, node.pmap) != me
        }
        if not outbound and not inbound:
            # Nothing moves through this shard; adopt the map right away so
            # routing decisions use fresh assignments.
            node.pmap = node.pmap.updated(body.version, body.overrides, body.brokers)
            return []
        self.pending = PendingPartition(body.version, dict(body.overrides), list(body.brokers))
        self.outbound = outbound
        self.inbound_expected = inbound
        self.stalled_since = now
        node.pool.lock()
        for sender, early_body in self.early.pop(body.version, []):
            self.on_account_migrate(node, sender, early_body, now)
        self.early.clear()
        if node.phase.value == "idle":
            return self.quiesce(node, now)
        return []

    def quiesce(self, node: Any, now: int) -> list:
        """Extract displaced pool entries once no round is in flight.

        Every node prunes its own pool; only the leader ships the result,
        so follower pools converge to the leader's view through the same
        broadcast that feeds the target shard.
        """
        if self.quiesced or not self.active:
            return []
        self.quiesced = True
        dirty = set(self.pending.assignments)
        self.extracted = node.pool.extract_for_migration(dirty)
        return self.ensure_shipped(node, now)

    def ensure_shipped(self, node: Any, now: int) -> list:
        if self.shipped or not self.quiesced or not self.active:
            return []
        if not node.is_leader:
            return []
        self.shipped = True
        bundles: dict[int, dict[bytes, MigratedAccount]] = {}

        def bundle_for(target: int, addr: bytes) -> MigratedAccount:
            per = bundles.setdefault(target, {})
            acct = per.get(addr)
            if acct is None:
                acct = MigratedAccount(state=node.state.get(addr), pending_txs=[])
                per[addr] = acct
            return acct

        for addr in sorted(self.outbound):
            bundle_for(self.outbound[addr], addr)
        for tx in self.extracted:
            home = (
                tx.payee
                if tx.kind in CREDIT_KINDS
                or (tx.payer in node.pmap.brokers and tx.payee not in node.pmap.brokers)
                else tx.payer
            )
            target = self.new_shard_of(home, node.pmap)
            bundle_for(target, home).pending_txs.append(tx)
        outs = []
        for target in sorted(bundles):
            accounts = [bundles[target][a] for a in sorted(bundles[target])]
            env = Envelope(
                "account_migrate",
                node.nid,
                AccountMigrate(version=self.pending.version, accounts=accounts),
            )
            outs.append((("shard_all", target), env))
        return outs

    def on_account_migrate(self, node: Any, sender: str, body: AccountMigrate, now: int) -> list:
        if not self.active or body.version != self.pending.version:
            if body.version > node.pmap.version:
                # Transfer outran the announcement; replay once it lands.
                self.early.setdefault(body.version, []).append((sender, body))
            return []
        src = shard_of(sender)
        txs = self.inbound_txs.setdefault(src, [])
        for acct in body.accounts:
            self.inbound_states[acct.state.address] = acct.state
            for tx in acct.pending_txs:
                # A leader change mid-session can ship the same entries
                # twice; only the first copy is kept.
                if tx.hash not in self.inbound_seen:
                    self.inbound_seen.add(tx.hash)
                    txs.append(tx)
        return []

    def ready(self, node: Any) -> bool:
        return (
            self.active
            and self.quiesced
            and self.inbound_expected.issubset(self.inbound_states)
        )

    def build_block(self, node: Any, now: int) -> Block:
        installs = [self.inbound_states[a] for a in sorted(self.inbound_states)]
        departures = sorted(self.outbound)
        applied = apply_block_to_state(
            node.state,
            Block(
                shard_id=node.shard_id,
                height=node.next_height,
                parent_hash=node.head.hash,
                state_root=b"\x00" * 32,
                proposer=node.nid,
                block_kind=BlockKind.MIGRATION,
                migration_installs=installs,
                migration_departures=departures,
                timestamp=now,
                hash=b"\x00",
            ),
        )
        block = Block(
            shard_id=node.shard_id,
            height=node.next_height,
            parent_hash=node.head.hash,
            state_root=compute_state_root(applied),
            proposer=node.nid,
            block_kind=BlockKind.MIGRATION,
            migration_installs=installs,
            migration_departures=departures,
            timestamp=now,
        )
        node.applied_cache[block.hash] = applied
        return block

    def on_commit(self, mech: "BaseMechanism", node: Any, block: Block, now: int) -> list:
        """Switch to the announced map, unlock, requeue displaced entries,
        and evict anything the new map re-homes elsewhere."""
        pending = self.pending
        node.pmap = node.pmap.updated(pending.version, pending.assignments, pending.brokers)
        node.pool.unlock()
        for src in sorted(self.inbound_txs):
            batch = replace_tx_list(self.inbound_txs[src])
            node.pool.requeue(batch)
            for tx in batch:
                # Register migrated credit halves so a straggling duplicate
                # of the same relay is dropped rather than double-queued.
                if tx.kind in CREDIT_KINDS and tx.origin_hash:
                    node.relay_seen.add(tx.origin_hash)
        outs = mech.evict_misplaced(node, now)
        self.pending = None
        self.quiesced = False
        self.shipped = False
        self.outbound = {}
        self.inbound_expected = set()
        self.inbound_states = {}
        self.inbound_txs = {}
        self.inbound_seen = set()
        self.extracted = []
        self.stalled_since = None
        return outs


# --- consensus hooks ---


class BaseMechanism:
    """Shared packing, verification, and commit logic for one replica."""

    name = "base"

    def __init__(self) -> None:
        self.migration = MigrationController()

    # - packing -

    def op_mining(self, node: Any, now: int) -> tuple[Optional[Block], list]:
        outs: list = []
        if self.migration.active:
            outs.extend(self.migration.ensure_shipped(node, now))
            if self.migration.ready(node):
                return self.migration.build_block(node, now), outs
        if node.pool.locked:
            return None, outs
        packed = node.pool.pack_block_txs(node.theta)
        if not packed:
            return None, outs
        chosen: list[Transaction] = []
        forwards: dict[tuple[str, int], list[Transaction]] = {}
        for tx in packed:
            keep, route = self._place(tx, node)
            if keep is not None:
                chosen.append(keep)
            if route is not None:
                forwards.setdefault(route[:2], []).append(route[2])
        for (channel, dest), txs in sorted(forwards.items()):
            if channel == "inject":
                env = Envelope("inject_txs", node.nid, InjectTxs(txs=txs))
            else:
                env = Envelope(
                    "relay_ctx",
                    node.nid,
                    RelayCtx(source_shard=node.shard_id, height=node.next_height, txs=txs),
                )
            outs.append((("shard_all", dest), env))
        if not chosen:
            return None, outs
        applied = apply_txs(node.state, chosen)
        block = Block(
            shard_id=node.shard_id,
            height=node.next_height,
            parent_hash=node.head.hash,
            state_root=compute_state_root(applied),
            proposer=node.nid,
            block_kind=BlockKind.TX,
            txs=chosen,
            timestamp=now,
        )
        node.applied_cache[block.hash] = applied
        return block, outs

    def _place(
        self, tx: Transaction, node: Any
    ) -> tuple[Optional[Transaction], Optional[tuple[str, int, Transaction]]]:
        """Decide what a packed pool entry becomes under the current map.

        Returns (transaction to include in the block, forward route). A
        migration can re-home accounts while entries wait, so locality is
        re-derived at packing time rather than trusted from injection.
        """
        me = node.shard_id
        pmap = node.pmap
        if tx.kind in CREDIT_KINDS:
            dest = address_to_shard(tx.payee, pmap)
            if dest == me:
                return tx, None
            return None, ("relay", dest, tx)
        if tx.kind is TxKind.BROKER_PAYER_HALF:
            dest = address_to_shard(tx.payer, pmap)
            if dest == me:
                return tx, None
            return None, ("inject", dest, tx)
        payer_home = None if tx.payer in pmap.brokers else address_to_shard(tx.payer, pmap)
        payee_home = None if tx.payee in pmap.brokers else address_to_shard(tx.payee, pmap)
        if payer_home is not None and payer_home != me:
            return None, ("inject", payer_home, tx)
        if payer_home is None and payee_home is not None and payee_home != me:
            return None, ("inject", payee_home, tx)
        if tx.kind is TxKind.ORIGINAL_CTX:
            return self._pack_cross(tx, node)
        # Regular transfer; it may have turned cross-shard since injection.
        if payee_home is None or payee_home == me:
            return tx, None
        return self._pack_cross(tx, node)

    def _pack_cross(self, tx, node):
        raise NotImplementedError

    # - verification -

    def op_verification(self, node: Any, block: Block) -> Optional[RejectReason]:
        if block.block_kind is BlockKind.MIGRATION and not self.migration.active:
            return RejectReason.MALFORMED
        applied = apply_block_to_state(node.state, block)
        reason = verify_block(block, node.head, node.state, node.pmap, node.theta, applied=applied)
        if reason is None:
            node.applied_cache[block.hash] = applied
        return reason

    # - confirmation -

    def op_confirmation(
        self, node: Any, block: Block, applied: Optional[StateTree], now: int
    ) -> tuple[StateTree, list]:
        if applied is None:
            applied = apply_block_to_state(node.state, block)
        node.state = applied
        outs: list = []
        if block.block_kind is BlockKind.TX:
            outs.extend(self._commit_emissions(node, block, now))
            if self.migration.active and not self.migration.quiesced:
                outs.extend(self.migration.quiesce(node, now))
        else:
            outs.extend(self.migration.on_commit(self, node, block, now))
        info = BlockInfo(
            shard=node.shard_id,
            height=block.height,
            commit_time=now,
            pool_size=len(node.pool),
            txs=[
                TxSummary(tx.hash, tx.kind.value, tx.origin_hash, tx.inject_time)
                for tx in block.txs
            ],
            block_kind=block.block_kind.value,
            version=node.pmap.version,
        )
        outs.append((("supervisor",), Envelope("block_info", node.nid, info)))
        return applied, outs

    def _commit_emissions(self, node: Any, block: Block, now: int) -> list:
        return []

    def evict_misplaced(self, node: Any, now: int) -> list:
        """After a map switch, re-home queued entries the shard no longer
        owns. Every node drops them; only the leader forwards, so exactly
        one copy travels."""
        gone: dict[int, list[Transaction]] = {}
        for tx in node.pool.snapshot():
            home = exec_home_shard(tx, node.pmap)
            if home != node.shard_id:
                gone.setdefault(home, []).append(tx)
        if not gone:
            return []
        node.pool.discard({t.hash for txs in gone.values() for t in txs})
        if not node.is_leader:
            return []
        outs = []
        for dest in sorted(gone):
            relays = [t for t in gone[dest] if t.kind in CREDIT_KINDS]
            raws = [t for t in gone[dest] if t.kind not in CREDIT_KINDS]
            if relays:
                env = Envelope(
                    "relay_ctx",
                    node.nid,
                    RelayCtx(source_shard=node.shard_id, height=node.head.height, txs=relays),
                )
                outs.append((("shard_all", dest), env))
            if raws:
                outs.append(
                    (("shard_all", dest), Envelope("inject_txs", node.nid, InjectTxs(txs=raws)))
                )
        return outs

    # - inter-shard dispatch -

    def handle_inter_shard_msg(self, node: Any, env: Envelope, now: int) -> list:
        if env.msg_type == "relay_ctx":
            return self._on_relay(node, env, now)
        if env.msg_type == "partition_result":
            return self.migration.on_partition_result(node, env.body, now)
        if env.msg_type == "account_migrate":
            return self.migration.on_account_migrate(node, env.sender, env.body, now)
        raise ValueError(f"not an inter-shard message: {env.msg_type}")

    def _on_relay(self, node: Any, env: Envelope, now: int) -> list:
        problem = relay_validate(env.body, env.sender)
        if problem is not None:
            log.warning("%s rejects relay batch: %s", node.nid, problem)
            return []
        accept: list[Transaction] = []
        misrouted: dict[int, list[Transaction]] = {}
        for tx in env.body.txs:
            if tx.origin_hash in node.relay_seen:
                continue
            home = address_to_shard(tx.payee, node.pmap)
            if home == node.shard_id:
                node.relay_seen.add(tx.origin_hash)
                accept.append(tx)
            else:
                misrouted.setdefault(home, []).append(tx)
        if accept:
            node.pool.append_relays(replace_tx_list(accept), node.pmap)
        outs = []
        if misrouted and node.is_leader:
            # A migration moved the payee while this batch was in flight.
            for dest in sorted(misrouted):
                fwd = Envelope(
                    "relay_ctx",
                    node.nid,
                    RelayCtx(
                        source_shard=node.shard_id,
                        height=node.head.height,
                        txs=misrouted[dest],
                    ),
                )
                outs.append((("shard_all", dest), fwd))
        return outs


class RelayMechanism(BaseMechanism):
    """Debit half commits at the payer's shard, credit half rides a
    relay message and commits at the payee's shard later."""

    name = "relay"

    def _pack_cross(self, tx, node):
        intra, _ = relay_split(tx, node.pmap)
        return intra, None

    def _commit_emissions(self, node: Any, block: Block, now: int) -> list:
        batches: dict[int, list[Transaction]] = {}
        for tx in block.txs:
            if tx.kind is TxKind.INTRA_RELAY:
                inter = inter_from_intra(tx)
                dest = address_to_shard(inter.payee, node.pmap)
                batches.setdefault(dest, []).append(inter)
        outs = []
        for dest in sorted(batches):
            env = Envelope(
                "relay_ctx",
                node.nid,
                RelayCtx(source_shard=node.shard_id, height=block.height, txs=batches[dest]),
            )
            outs.append((("shard_all", dest), env))
        return outs


class BrokerMechanism(BaseMechanism):
    """Cross-shard transfers are bridged through a broker account at
    injection; the shard side only has to handle strays that a migration
    turned cross-shard after the fact."""

    name = "broker"

    def __init__(self) -> None:
        super().__init__()
        self._stray_payee_halves: dict[int, list[Transaction]] = {}

    def _pack_cross(self, tx, node):
        payer_half, payee_half = broker_transform(tx, node.pmap)
        dest = address_to_shard(payee_half.payee, node.pmap)
        self._stray_payee_halves.setdefault(dest, []).append(payee_half)
        return payer_half, None

    def op_mining(self, node: Any, now: int) -> tuple[Optional[Block], list]:
        self._stray_payee_halves = {}
        block, outs = super().op_mining(node, now)
        for dest in sorted(self._stray_payee_halves):
            env = Envelope(
                "relay_ctx",
                node.nid,
                RelayCtx(
                    source_shard=node.shard_id,
                    height=node.next_height,
                    txs=self._stray_payee_halves[dest],
                ),
            )
            outs.append((("shard_all", dest), env))
        self._stray_payee_halves = {}
        return block, outs


def make_mechanism(name: str) -> BaseMechanism:
    if name == "relay":
        return RelayMechanism()
    if name == "broker":
        return BrokerMechanism()
    raise ValueError(f"unknown mechanism {name!r}")
