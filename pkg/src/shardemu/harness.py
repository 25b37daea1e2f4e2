"""Run orchestration: wiring nodes together and driving them to completion.

``Emulation`` owns a full run: it builds the partition map, loads or
pre-fills the dataset, spawns one replica per (shard, node) plus the
supervisor, schedules scripted faults, runs the event loop, and writes
block files and reports.

``setup()`` and ``execute()`` are separate so callers can inspect pools
and state between wiring and running.
"""

from __future__ import annotations

import heapq
import json
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Optional

from .config import ConfigError, MissingKey, RunConfig
from .core import (
    Block,
    PartitionMap,
    StateTree,
    block_from_json,
    block_to_json,
)
from .dataset import load_dataset, top_active_accounts
from .mechanisms import make_mechanism
from .metrics import MetricsLedger
from .pbft import Replica
from .supervisor import Supervisor
from .transport import (
    SUPERVISOR_ID,
    Envelope,
    SimNetwork,
    TcpMesh,
    TxSummary,
    node_id,
)
from .txpool import TxPool

log = logging.getLogger(__name__)

# Hard ceiling on virtual time; a healthy run stops itself well before.
VIRTUAL_TIME_CAP_MS = 3_000_000


@dataclass
class RunResult:
    exit_code: int
    summary: dict
    out_dir: Optional[str]
    supervisor: Supervisor
    replicas: dict[str, Replica] = field(default_factory=dict)

    def shard_replicas(self, shard: int) -> list[Replica]:
        return [r for r in self.replicas.values() if r.shard_id == shard]

    def root_logs(self) -> dict[str, list]:
        return {nid: list(r.root_log) for nid, r in self.replicas.items()}

    def final_states(self) -> dict[str, StateTree]:
        return {nid: r.state for nid, r in self.replicas.items()}


class Emulation:
    """One configured run over the deterministic sim transport."""

    def __init__(self, cfg: RunConfig) -> None:
        if cfg.sim is None:
            raise ConfigError("Emulation drives the sim transport; use TcpRunner for tcp")
        if cfg.dataset_path is None:
            raise MissingKey("dataset_path")
        self.cfg = cfg
        self.net: Optional[SimNetwork] = None
        self.supervisor: Optional[Supervisor] = None
        self.replicas: dict[str, Replica] = {}
        self._block_files: dict[int, Any] = {}
        self._ran = False

    # -- wiring --

    def setup(self) -> None:
        cfg = self.cfg
        brokers = self._effective_brokers()
        pmap = PartitionMap(
            n_shards=cfg.n_shards, version=0, overrides={}, brokers=frozenset(brokers)
        )
        lat = cfg.sim.latency_ms
        self.net = SimNetwork(latency_ms=lat, seed=cfg.sim.seed)
        rows = load_dataset(cfg.dataset_path, cfg.dataset_limit)
        self.supervisor = Supervisor(cfg, pmap, self.net, rows)
        self.net.register(SUPERVISOR_ID, self.supervisor)

        if cfg.output_dir is not None:
            os.makedirs(cfg.output_dir, exist_ok=True)
        crash_scheduled = {f.node for f in cfg.faults if f.kind == "crash"}
        writers = {
            k: self._pick_writer(k, crash_scheduled) for k in range(cfg.n_shards)
        }
        for k in range(cfg.n_shards):
            for i in range(cfg.nodes_per_shard):
                nid = node_id(k, i)
                pool = TxPool(k, policy=cfg.pool_policy)
                sink = self._make_sink(k) if cfg.output_dir and writers[k] == nid else None
                replica = Replica(
                    shard_id=k,
                    index=i,
                    n_nodes=cfg.nodes_per_shard,
                    theta=cfg.block_size,
                    block_interval_ms=cfg.block_interval_ms,
                    vc_timeout_ms=cfg.vc_timeout_ms,
                    pool=pool,
                    pmap=pmap,
                    hooks=make_mechanism(cfg.mechanism),
                    net=self.net,
                    block_sink=sink,
                )
                self.replicas[nid] = replica
                self.net.register(nid, replica, shard=k)

        for fault in cfg.faults:
            if fault.kind == "crash":
                self.net.schedule_crash(fault.node, fault.at_ms)
            else:
                self.replicas[fault.node].invalid_heights.add(fault.height)

        if cfg.injection.prefill:
            per_shard = self.supervisor.prepare_prefill()
            for nid, replica in self.replicas.items():
                replica.pool.preload(per_shard.get(replica.shard_id, []))

    def _effective_brokers(self) -> list[bytes]:
        cfg = self.cfg
        if cfg.mechanism != "broker":
            return []
        if cfg.brokers_top_k is not None:
            return top_active_accounts(
                cfg.dataset_path, cfg.brokers_top_k, cfg.dataset_limit
            )
        return cfg.brokers

    @staticmethod
    def _pick_writer(shard: int, crash_scheduled: set[str]) -> str:
        """Lowest-index node of the shard that is never scripted to crash
        keeps the shard's chain on disk."""
        i = 0
        while node_id(shard, i) in crash_scheduled:
            i += 1
        return node_id(shard, i)

    def _make_sink(self, shard: int):
        path = os.path.join(self.cfg.output_dir, f"blocks_shard{shard}.jsonl")
        fh = open(path, "w", encoding="utf-8")
        self._block_files[shard] = fh

        def sink(block: Block, now: int) -> None:
            fh.write(json.dumps(block_to_json(block, confirm_time=now)) + "\n")

        return sink

    # -- running --

    def execute(self) -> RunResult:
        if self.net is None:
            self.setup()
        assert not self._ran, "an Emulation instance runs once"
        self._ran = True
        sup = self.supervisor
        sup.on_start(0)
        for replica in self.replicas.values():
            replica.on_start(0)
        self.net.run(until=VIRTUAL_TIME_CAP_MS)
        if self.net._heap:
            sup.ledger.degraded = True
            sup.ledger.notes.append(
                f"virtual time cap {VIRTUAL_TIME_CAP_MS} ms hit before the run stopped"
            )
        for fh in self._block_files.values():
            fh.close()
        self._block_files.clear()
        if self.cfg.output_dir is not None:
            exit_code, summary = sup.finalize(self.cfg.output_dir)
        else:
            exit_code = 3 if sup.ledger.degraded else 0
            summary = sup.ledger.summary(self.cfg.echo())
        return RunResult(
            exit_code=exit_code,
            summary=summary,
            out_dir=self.cfg.output_dir,
            supervisor=sup,
            replicas=self.replicas,
        )


def run(cfg: RunConfig) -> RunResult:
    if cfg.tcp is not None:
        return TcpRunner(cfg).execute()
    emu = Emulation(cfg)
    emu.setup()
    return emu.execute()


# -- recomputation from stored blocks --


def report_from_blocks(run_dir: str) -> dict:
    """Rebuild the metric reports from a run directory's block files.

    Injection records are inferred from the committed transactions
    themselves: a whole transaction stands for its own original, halves
    point at theirs through the origin hash. Classification is therefore
    by commitment shape, and the outputs land in a ``recomputed``
    subdirectory of the run directory.
    """
    summary_path = os.path.join(run_dir, "summary.json")
    with open(summary_path, "r", encoding="utf-8") as fh:
        prior = json.load(fh)
    cfg_echo = prior["config"]
    n_shards = cfg_echo["n_shards"]
    ledger = MetricsLedger(n_shards, cfg_echo["epoch_ms"])

    from .core import TxClass, TxKind

    blocks: list[tuple[dict, Block]] = []
    for k in range(n_shards):
        path = os.path.join(run_dir, f"blocks_shard{k}.jsonl")
        if not os.path.exists(path):
            continue
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                blocks.append((obj, block_from_json(obj)))
    blocks.sort(key=lambda pair: (pair[0]["commit_time"] or 0, pair[1].shard_id))

    split_kinds = {
        TxKind.INTRA_RELAY,
        TxKind.INTER_RELAY,
        TxKind.BROKER_PAYER_HALF,
        TxKind.BROKER_PAYEE_HALF,
    }
    for obj, block in blocks:
        for tx in block.txs:
            if tx.kind in split_kinds:
                ledger.record_injection(
                    tx.origin_hash,
                    TxKind.ORIGINAL_CTX.value,
                    TxClass.CROSS_SHARD,
                    tx.payer,
                    tx.payee,
                    tx.inject_time or 0,
                )
            else:
                ledger.record_injection(
                    tx.hash,
                    tx.kind.value,
                    TxClass.REGULAR,
                    tx.payer,
                    tx.payee,
                    tx.inject_time or 0,
                )

    class _Info:
        __slots__ = ("shard", "height", "commit_time", "pool_size", "txs", "block_kind", "version")

    for obj, block in blocks:
        info = _Info()
        info.shard = block.shard_id
        info.height = block.height
        info.commit_time = obj["commit_time"] or block.timestamp
        info.pool_size = 0
        info.block_kind = block.block_kind.value
        info.version = 0
        info.txs = [
            TxSummary(tx.hash, tx.kind.value, tx.origin_hash, tx.inject_time or 0)
            for tx in block.txs
        ]
        ledger.record_block(info)

    out_dir = os.path.join(run_dir, "recomputed")
    summary = ledger.write_reports(out_dir, cfg_echo)
    return summary


# -- real-network runner --


class _TcpNodeDriver:
    """Thread that gives one node real timers and a real inbox.

    The node logic is written against the sim network interface; this
    adapter reimplements the ``send`` / ``broadcast`` / ``schedule`` calls
    over a TCP mesh and a monotonic millisecond clock.
    """

    def __init__(self, nid: str, cfg: RunConfig, ip_table: dict[str, str], t0: float) -> None:
        self.nid = nid
        self.cfg = cfg
        self.ip_table = ip_table
        self.t0 = t0
        self.inbox: "queue.Queue[Envelope]" = queue.Queue()
        self.timers: list[tuple[int, int, str, Any]] = []
        self._timer_seq = 0
        self.node: Any = None  # Replica or Supervisor, set by TcpRunner
        self.mesh: Optional[TcpMesh] = None
        self.thread = threading.Thread(target=self._loop, name=f"node-{nid}", daemon=True)
        self.shard_members: dict[int, list[str]] = {}

    # network interface used by the node logic

    def send(self, to: str, env: Envelope) -> None:
        if to == self.nid:
            self.inbox.put(env)
        else:
            self.mesh.send(to, env)

    def broadcast_shard(self, shard: int, env: Envelope, include_self: bool = False) -> None:
        for nid in self.shard_members.get(shard, ()):
            if not include_self and nid == env.sender:
                continue
            self.send(nid, env)

    def broadcast_all(self, env: Envelope) -> None:
        for nid in self.ip_table:
            if nid != env.sender:
                self.send(nid, env)

    def schedule(self, nid: str, at: int, tag: str, data: Any = None) -> None:
        assert nid == self.nid, "tcp nodes arm only their own timers"
        self._timer_seq += 1
        heapq.heappush(self.timers, (at, self._timer_seq, tag, data))

    def now_ms(self) -> int:
        return int((time.monotonic() - self.t0) * 1000)

    # thread body

    def start(self) -> None:
        self.thread.start()

    def _loop(self) -> None:
        self.node.on_start(self.now_ms())
        while True:
            if getattr(self.node, "stopped", False) and self.inbox.empty():
                return
            timeout = 0.05
            if self.timers:
                timeout = max(0.0, min(timeout, (self.timers[0][0] - self.now_ms()) / 1000))
            try:
                env = self.inbox.get(timeout=timeout)
            except queue.Empty:
                env = None
            if env is not None:
                try:
                    self.node.on_envelope(env, self.now_ms())
                except Exception:
                    log.exception("%s failed handling %s", self.nid, env.msg_type)
            while self.timers and self.timers[0][0] <= self.now_ms():
                _, _, tag, data = heapq.heappop(self.timers)
                try:
                    self.node.on_timer(tag, data, self.now_ms())
                except Exception:
                    log.exception("%s failed on timer %s", self.nid, tag)


class TcpRunner:
    """Whole-run orchestration over loopback/LAN TCP."""

    def __init__(self, cfg: RunConfig) -> None:
        if cfg.tcp is None:
            raise ConfigError("TcpRunner needs a tcp transport section")
        if cfg.dataset_path is None:
            raise MissingKey("dataset_path")
        self.cfg = cfg
        with open(cfg.tcp.ip_table, "r", encoding="utf-8") as fh:
            self.ip_table: dict[str, str] = json.load(fh)

    def execute(self) -> RunResult:
        cfg = self.cfg
        brokers = []
        if cfg.mechanism == "broker":
            brokers = (
                top_active_accounts(cfg.dataset_path, cfg.brokers_top_k, cfg.dataset_limit)
                if cfg.brokers_top_k is not None
                else cfg.brokers
            )
        pmap = PartitionMap(
            n_shards=cfg.n_shards, version=0, overrides={}, brokers=frozenset(brokers)
        )
        t0 = time.monotonic()
        members = {
            k: [node_id(k, i) for i in range(cfg.nodes_per_shard)]
            for k in range(cfg.n_shards)
        }
        drivers: dict[str, _TcpNodeDriver] = {}
        for nid in list(self.ip_table):
            drivers[nid] = _TcpNodeDriver(nid, cfg, self.ip_table, t0)
            drivers[nid].shard_members = members

        rows = load_dataset(cfg.dataset_path, cfg.dataset_limit)
        sup_driver = drivers[SUPERVISOR_ID]
        supervisor = Supervisor(cfg, pmap, sup_driver, rows)
        sup_driver.node = supervisor

        replicas: dict[str, Replica] = {}
        for k in range(cfg.n_shards):
            for i in range(cfg.nodes_per_shard):
                nid = node_id(k, i)
                driver = drivers[nid]
                replica = Replica(
                    shard_id=k,
                    index=i,
                    n_nodes=cfg.nodes_per_shard,
                    theta=cfg.block_size,
                    block_interval_ms=cfg.block_interval_ms,
                    vc_timeout_ms=cfg.vc_timeout_ms,
                    pool=TxPool(k, policy=cfg.pool_policy),
                    pmap=pmap,
                    hooks=make_mechanism(cfg.mechanism),
                    net=driver,
                    block_sink=None,
                )
                driver.node = replica
                replicas[nid] = replica

        if cfg.injection.prefill:
            per_shard = supervisor.prepare_prefill()
            for nid, replica in replicas.items():
                replica.pool.preload(list(per_shard.get(replica.shard_id, [])))

        for nid, driver in drivers.items():
            driver.mesh = TcpMesh(nid, self.ip_table, driver.inbox.put)
        for driver in drivers.values():
            driver.start()

        wall_s = (cfg.stop.wall_ms / 1000 + 5) if cfg.stop.wall_ms else 120
        deadline = time.monotonic() + wall_s
        for driver in drivers.values():
            driver.thread.join(timeout=max(0.1, deadline - time.monotonic()))
        hung = [d.nid for d in drivers.values() if d.thread.is_alive()]
        if hung:
            supervisor.ledger.degraded = True
            supervisor.ledger.notes.append(f"tcp nodes still running at teardown: {hung}")
        for driver in drivers.values():
            driver.mesh.close()

        if cfg.output_dir is not None:
            os.makedirs(cfg.output_dir, exist_ok=True)
            exit_code, summary = supervisor.finalize(cfg.output_dir)
        else:
            exit_code = 3 if supervisor.ledger.degraded else 0
            summary = supervisor.ledger.summary(cfg.echo())
        return RunResult(
            exit_code=exit_code,
            summary=summary,
            out_dir=cfg.output_dir,
            supervisor=supervisor,
            replicas=replicas,
        )
