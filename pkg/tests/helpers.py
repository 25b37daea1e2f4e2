"""Shared builders for the test suite.

Addresses pinned to specific shards, tiny CSV datasets, config dictionaries
with sensible test defaults, and a four-node shard wired over the simulated
network. Nothing here asserts; helpers stay dumb so failures point at the
code under test.
"""

from __future__ import annotations

from typing import Optional

from shardemu.config import RunConfig, parse_config
from shardemu.core import (
    ADDRESS_SIZE,
    SHARD_SUFFIX_BYTES,
    PartitionMap,
    Transaction,
    TxKind,
    digest,
    make_transaction,
)
from shardemu.dataset import HEADER
from shardemu.mechanisms import make_mechanism
from shardemu.pbft import Replica
from shardemu.transport import SUPERVISOR_ID, SimNetwork, node_id
from shardemu.txpool import TxPool


def suffix_shard(addr: bytes, n_shards: int) -> int:
    """The default (override-free) address-to-shard placement."""
    return int.from_bytes(addr[-SHARD_SUFFIX_BYTES:], "big") % n_shards


def addr(tag: str, shard: Optional[int] = None, n_shards: int = 2) -> bytes:
    """Deterministic 20-byte address, optionally pinned to ``shard`` under
    the default suffix placement for ``n_shards``."""
    i = 0
    while True:
        cand = digest(f"test-addr:{tag}:{i}".encode())[:ADDRESS_SIZE]
        if shard is None or suffix_shard(cand, n_shards) == shard:
            return cand
        i += 1


def regular_tx(payer: bytes, payee: bytes, value: int = 1, nonce: int = 0,
               fee: int = 0, inject_time: Optional[int] = 0) -> Transaction:
    return make_transaction(payer, payee, value, nonce, kind=TxKind.REGULAR,
                            fee=fee, inject_time=inject_time)


def write_dataset(path, rows) -> str:
    """Rows are (payer_bytes, payee_bytes, value) triples."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(HEADER + "\n")
        for payer, payee, value in rows:
            fh.write(f"{payer.hex()},{payee.hex()},{value}\n")
    return str(path)


def cfg_dict(**over) -> dict:
    """A small, fast correctness-protocol config; override freely."""
    base = {
        "n_shards": 2,
        "nodes_per_shard": 4,
        "block_size": 10,
        "block_interval_ms": 100,
        "epoch_ms": 500,
        "mechanism": "relay",
        "partition": "static",
        "injection": {"prefill": True},
        "transport": {"sim": {"latency_ms": 5, "seed": 0}},
        "stop": {"drain": True},
    }
    base.update(over)
    return base


def build_cfg(**over) -> RunConfig:
    return parse_config(cfg_dict(**over))


class SupervisorSink:
    """Stands in for the supervisor when a test drives replicas directly."""

    def __init__(self) -> None:
        self.envelopes = []

    def on_envelope(self, env, now) -> None:
        self.envelopes.append((now, env))

    def on_timer(self, tag, data, now) -> None:
        pass


def build_shard(
    net: SimNetwork,
    shard_id: int = 0,
    n_nodes: int = 4,
    theta: int = 10,
    delta: int = 100,
    vc_timeout: int = 1000,
    n_shards: int = 1,
    mechanism: str = "relay",
    pmap: Optional[PartitionMap] = None,
) -> dict[str, Replica]:
    """One consensus group registered on ``net``; pools start empty."""
    if pmap is None:
        pmap = PartitionMap(n_shards=n_shards)
    replicas: dict[str, Replica] = {}
    for i in range(n_nodes):
        nid = node_id(shard_id, i)
        replica = Replica(
            shard_id=shard_id,
            index=i,
            n_nodes=n_nodes,
            theta=theta,
            block_interval_ms=delta,
            vc_timeout_ms=vc_timeout,
            pool=TxPool(shard_id),
            pmap=pmap,
            hooks=make_mechanism(mechanism),
            net=net,
            block_sink=None,
        )
        replicas[nid] = replica
        net.register(nid, replica, shard=shard_id)
    return replicas


def attach_sink(net: SimNetwork) -> SupervisorSink:
    sink = SupervisorSink()
    net.register(SUPERVISOR_ID, sink)
    return sink
