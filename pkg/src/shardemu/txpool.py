"""Per-node transaction pool.

Every node of a shard mirrors the same pool content (injections and relays
are broadcast shard-wide), so any node that becomes leader can propose. The
pool is unbounded; back-pressure is an explicit non-goal, queue growth is
itself a measurement.
"""

from __future__ import annotations

from collections import deque
from typing import Iterable

from .core import (
    CREDIT_KINDS,
    PartitionMap,
    Transaction,
    address_to_shard,
)


class PoolError(Exception):
    pass


class PoolLocked(PoolError):
    """Packing or extraction attempted while a migration lock is held."""


class PoolNotLocked(PoolError):
    """Migration extraction requires the lock to be held first."""


class WrongShard(PoolError):
    """A relay half was appended to a shard that does not own its payee."""


class TxPool:
    """FIFO queue of pending transactions for one shard.

    ``policy`` selects packing order: "fifo" takes the queue head, "fee"
    takes highest fee first with arrival order breaking ties. During a
    migration lock injection still lands (clients do not pause) but packing
    and extraction order is frozen until unlock.
    """

    def __init__(self, shard_id: int, policy: str = "fifo") -> None:
        if policy not in ("fifo", "fee"):
            raise ValueError(f"unknown pool policy {policy!r}")
        self.shard_id = shard_id
        self.policy = policy
        self.locked = False
        self._queue: deque[Transaction] = deque()
        self._arrival: dict[bytes, int] = {}
        self._seq = 0
        # Accounting counters; size must always equal
        # injected + appended - packed - extracted - removed.
        self.injected = 0
        self.appended = 0
        self.packed = 0
        self.extracted = 0
        self.removed = 0

    def __len__(self) -> int:
        return len(self._queue)

    def _push(self, tx: Transaction) -> None:
        self._queue.append(tx)
        self._arrival[tx.hash] = self._seq
        self._seq += 1

    def inject_batch(self, txs: Iterable[Transaction], now: int) -> int:
        """Append client transactions and stamp their arrival time."""
        n = 0
        for tx in txs:
            tx.inject_time = now
            self._push(tx)
            n += 1
        self.injected += n
        return n

    def preload(self, txs: Iterable[Transaction]) -> int:
        """Bulk load already-stamped transactions (prefill protocol)."""
        n = 0
        for tx in txs:
            self._push(tx)
            n += 1
        self.injected += n
        return n

    def append_relays(self, relays: list[Transaction], pmap: PartitionMap) -> int:
        """Queue inbound credit halves behind everything already waiting.

        Relay halves keep the inject_time of their origin; latency is
        measured from first injection, not from the hop.
        """
        for tx in relays:
            if tx.kind not in CREDIT_KINDS:
                raise WrongShard(f"not a credit half: {tx.kind.value}")
            if address_to_shard(tx.payee, pmap) != self.shard_id:
                raise WrongShard(
                    f"payee of {tx.hash.hex()[:8]} maps off shard {self.shard_id}"
                )
        for tx in relays:
            self._push(tx)
        self.appended += len(relays)
        return len(relays)

    def requeue(self, txs: Iterable[Transaction]) -> int:
        """Re-admit transactions displaced by a migration, at the tail.

        They keep their original inject_time; confirmation latency is
        measured from first injection.
        """
        n = 0
        for tx in txs:
            self._push(tx)
            n += 1
        self.appended += n
        return n

    def discard(self, hashes: set[bytes]) -> int:
        """Drop queued transactions that no longer belong to this shard."""
        if not hashes:
            return 0
        before = len(self._queue)
        self._queue = deque(t for t in self._queue if t.hash not in hashes)
        for h in hashes:
            self._arrival.pop(h, None)
        gone = before - len(self._queue)
        self.extracted += gone
        return gone

    def pack_block_txs(self, theta: int) -> list[Transaction]:
        """Remove and return up to ``theta`` transactions in policy order."""
        if self.locked:
            raise PoolLocked(f"pool of shard {self.shard_id} is locked")
        take = min(theta, len(self._queue))
        if take == 0:
            return []
        if self.policy == "fifo":
            out = [self._queue.popleft() for _ in range(take)]
        else:
            ranked = sorted(
                self._queue, key=lambda t: (-t.fee, self._arrival[t.hash])
            )[:take]
            chosen = {t.hash for t in ranked}
            self._queue = deque(t for t in self._queue if t.hash not in chosen)
            out = ranked
        for tx in out:
            self._arrival.pop(tx.hash, None)
        self.packed += len(out)
        return out

    def lock(self) -> None:
        self.locked = True

    def unlock(self) -> None:
        self.locked = False

    def extract_for_migration(self, dirty: set[bytes]) -> list[Transaction]:
        """Pull every queued transaction touching a migrating account.

        Only legal while locked; the caller re-routes the result to the
        accounts' new shards.
        """
        if not self.locked:
            raise PoolNotLocked("extraction requires the migration lock")
        moved = [t for t in self._queue if t.payer in dirty or t.payee in dirty]
        if moved:
            gone = {t.hash for t in moved}
            self._queue = deque(t for t in self._queue if t.hash not in gone)
            for h in gone:
                self._arrival.pop(h, None)
        self.extracted += len(moved)
        return moved

    def remove_committed(self, hashes: set[bytes]) -> int:
        """Drop transactions that a committed block just executed.

        Mirrored pools see commits in queue order, so the common case is a
        pure popleft run; a linear rebuild covers reordered arrivals.
        """
        if not hashes:
            return 0
        n = 0
        remaining = set(hashes)
        while self._queue and self._queue[0].hash in remaining:
            tx = self._queue.popleft()
            remaining.discard(tx.hash)
            self._arrival.pop(tx.hash, None)
            n += 1
        if remaining and self._queue:
            before = len(self._queue)
            self._queue = deque(t for t in self._queue if t.hash not in remaining)
            if len(self._queue) != before:
                for h in remaining:
                    self._arrival.pop(h, None)
                n += before - len(self._queue)
        self.removed += n
        return n

    def snapshot(self) -> list[Transaction]:
        """Read-only view in queue order, for audits and tests."""
        return list(self._queue)
