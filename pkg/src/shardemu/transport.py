"""Message envelopes, wire codec, and the two network backends.

Every message is an envelope ``{"type", "sender", "body"}`` serialized as
UTF-8 JSON behind a 4-byte big-endian length prefix. The simulated backend
delivers envelopes through a deterministic event heap on a virtual
millisecond clock; the TCP backend pushes the same frames over keep-alive
sockets. Node logic sees the same interface either way.
"""

from __future__ import annotations

import heapq
import json
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Any, Callable, Optional

from .core import (
    AccountState,
    Block,
    Transaction,
    account_from_json,
    account_to_json,
    block_from_json,
    block_to_json,
    tx_from_json,
    tx_to_json,
)

MSG_TYPES = frozenset(
    {
        "inject_txs",
        "preprepare",
        "prepare",
        "commit",
        "view_change",
        "new_view",
        "relay_ctx",
        "partition_result",
        "account_migrate",
        "block_info",
        "stop",
    }
)

SUPERVISOR_ID = "supervisor"

_LEN = struct.Struct("!I")


class FrameError(Exception):
    pass


class FrameTooShort(FrameError):
    """Buffer ends before the length prefix or the promised payload."""


class BadJson(FrameError):
    """Payload bytes are not a valid JSON envelope."""


class UnknownType(FrameError):
    """Envelope type is outside the closed message set."""


class UnknownPeer(Exception):
    """Destination id is not registered with the network."""


class PeerDown(Exception):
    """Destination is registered but its connection is gone (TCP only)."""


def node_id(shard: int, index: int) -> str:
    return f"{shard}.{index}"


def shard_of(nid: str) -> Optional[int]:
    """Shard number of a node id, None for the supervisor."""
    if nid == SUPERVISOR_ID:
        return None
    return int(nid.split(".", 1)[0])


# --- payload types ---


@dataclass(slots=True)
class InjectTxs:
    txs: list[Transaction]


@dataclass(slots=True)
class PrePrepare:
    block: Block


@dataclass(slots=True)
class Prepare:
    height: int
    view: int
    block_hash: bytes


@dataclass(slots=True)
class Commit:
    height: int
    view: int
    block_hash: bytes


@dataclass(slots=True)
class ViewChange:
    new_view: int
    height: int


@dataclass(slots=True)
class NewView:
    new_view: int
    height: int


@dataclass(slots=True)
class RelayCtx:
    source_shard: int
    height: int
    txs: list[Transaction]


@dataclass(slots=True)
class PartitionResult:
    version: int
    overrides: dict[bytes, int]
    brokers: list[bytes]


@dataclass(slots=True)
class MigratedAccount:
    state: AccountState
    pending_txs: list[Transaction]


@dataclass(slots=True)
class AccountMigrate:
    version: int
    accounts: list[MigratedAccount]


@dataclass(slots=True)
class TxSummary:
    """What the supervisor needs to know about one committed transaction."""

    hash: bytes
    kind: str
    origin_hash: Optional[bytes]
    inject_time: Optional[int]


@dataclass(slots=True)
class BlockInfo:
    shard: int
    height: int
    commit_time: int
    pool_size: int
    txs: list[TxSummary]
    block_kind: str = "tx"
    version: int = 0


@dataclass(slots=True)
class Stop:
    pass


@dataclass(slots=True)
class Envelope:
    msg_type: str
    sender: str
    body: Any


def _addr_hex(addr: bytes) -> str:
    return "0x" + addr.hex()


def _addr_unhex(text: str) -> bytes:
    return bytes.fromhex(text[2:])


def _body_to_json(msg_type: str, body: Any) -> dict:
    if msg_type == "inject_txs":
        return {"txs": [tx_to_json(t) for t in body.txs]}
    if msg_type == "preprepare":
        return {"block": block_to_json(body.block)}
    if msg_type in ("prepare", "commit"):
        return {"height": body.height, "view": body.view, "block_hash": body.block_hash.hex()}
    if msg_type in ("view_change", "new_view"):
        return {"new_view": body.new_view, "height": body.height}
    if msg_type == "relay_ctx":
        return {
            "source_shard": body.source_shard,
            "height": body.height,
            "txs": [tx_to_json(t) for t in body.txs],
        }
    if msg_type == "partition_result":
        return {
            "version": body.version,
            "overrides": {_addr_hex(a): s for a, s in body.overrides.items()},
            "brokers": [_addr_hex(a) for a in body.brokers],
        }
    if msg_type == "account_migrate":
        return {
            "version": body.version,
            "accounts": [
                {
                    "state": account_to_json(m.state),
                    "pending_txs": [tx_to_json(t) for t in m.pending_txs],
                }
                for m in body.accounts
            ],
        }
    if msg_type == "block_info":
        return {
            "shard": body.shard,
            "height": body.height,
            "commit_time": body.commit_time,
            "pool_size": body.pool_size,
            "block_kind": body.block_kind,
            "version": body.version,
            "txs": [
                {
                    "hash": s.hash.hex(),
                    "kind": s.kind,
                    "origin_hash": s.origin_hash.hex() if s.origin_hash else None,
                    "inject_time": s.inject_time,
                }
                for s in body.txs
            ],
        }
    if msg_type == "stop":
        return {}
    raise UnknownType(msg_type)


def _body_from_json(msg_type: str, obj: dict) -> Any:
    if msg_type == "inject_txs":
        return InjectTxs(txs=[tx_from_json(t) for t in obj["txs"]])
    if msg_type == "preprepare":
        return PrePrepare(block=block_from_json(obj["block"]))
    if msg_type == "prepare":
        return Prepare(obj["height"], obj["view"], bytes.fromhex(obj["block_hash"]))
    if msg_type == "commit":
        return Commit(obj["height"], obj["view"], bytes.fromhex(obj["block_hash"]))
    if msg_type == "view_change":
        return ViewChange(obj["new_view"], obj["height"])
    if msg_type == "new_view":
        return NewView(obj["new_view"], obj["height"])
    if msg_type == "relay_ctx":
        return RelayCtx(
            obj["source_shard"], obj["height"], [tx_from_json(t) for t in obj["txs"]]
        )
    if msg_type == "partition_result":
        return PartitionResult(
            version=obj["version"],
            overrides={_addr_unhex(a): s for a, s in obj["overrides"].items()},
            brokers=[_addr_unhex(a) for a in obj["brokers"]],
        )
    if msg_type == "account_migrate":
        return AccountMigrate(
            version=obj["version"],
            accounts=[
                MigratedAccount(
                    state=account_from_json(m["state"]),
                    pending_txs=[tx_from_json(t) for t in m["pending_txs"]],
                )
                for m in obj["accounts"]
            ],
        )
    if msg_type == "block_info":
        return BlockInfo(
            shard=obj["shard"],
            height=obj["height"],
            commit_time=obj["commit_time"],
            pool_size=obj["pool_size"],
            block_kind=obj.get("block_kind", "tx"),
            version=obj.get("version", 0),
            txs=[
                TxSummary(
                    hash=bytes.fromhex(t["hash"]),
                    kind=t["kind"],
                    origin_hash=bytes.fromhex(t["origin_hash"]) if t.get("origin_hash") else None,
                    inject_time=t.get("inject_time"),
                )
                for t in obj["txs"]
            ],
        )
    if msg_type == "stop":
        return Stop()
    raise UnknownType(msg_type)


def encode_frame(env: Envelope) -> bytes:
    """Length-prefixed UTF-8 JSON for one envelope."""
    if env.msg_type not in MSG_TYPES:
        raise UnknownType(env.msg_type)
    payload = json.dumps(
        {"type": env.msg_type, "sender": env.sender, "body": _body_to_json(env.msg_type, env.body)},
        separators=(",", ":"),
    ).encode("utf-8")
    return _LEN.pack(len(payload)) + payload


def decode_frame(data: bytes) -> Envelope:
    """Parse one complete frame. Raises FrameTooShort on truncation, BadJson
    on undecodable payload, UnknownType outside the message set."""
    if len(data) < _LEN.size:
        raise FrameTooShort(f"{len(data)} bytes is shorter than the length prefix")
    (size,) = _LEN.unpack_from(data)
    if len(data) < _LEN.size + size:
        raise FrameTooShort(f"frame promises {size} payload bytes, got {len(data) - _LEN.size}")
    raw = data[_LEN.size : _LEN.size + size]
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadJson(str(exc)) from None
    if not isinstance(obj, dict) or "type" not in obj or "sender" not in obj or "body" not in obj:
        raise BadJson("envelope must carry type, sender and body")
    msg_type = obj["type"]
    if msg_type not in MSG_TYPES:
        raise UnknownType(str(msg_type))
    return Envelope(msg_type=msg_type, sender=obj["sender"], body=_body_from_json(msg_type, obj["body"]))


# --- simulated backend ---

_EV_MSG = 0
_EV_TIMER = 1
_EV_CRASH = 2


class SimNetwork:
    """Deterministic discrete-event delivery on a virtual millisecond clock.

    Events are ordered by (time, enqueue sequence), so equal-time events
    fire in the order they were scheduled. Latency is either a fixed value
    or an inclusive uniform integer range drawn from a seeded generator.
    Envelopes travel by reference; handlers must treat them as read-only.
    """

    def __init__(
        self,
        latency_ms: int | tuple[int, int] = 5,
        seed: int = 0,
    ) -> None:
        import random

        self.now = 0
        self._seq = 0
        self._heap: list[tuple[int, int, int, str, Any]] = []
        self._handlers: dict[str, Any] = {}
        self.shard_members: dict[int, list[str]] = {}
        self.crashed: set[str] = set()
        self._rng = random.Random(seed)
        if isinstance(latency_ms, int):
            self._lat_lo = self._lat_hi = latency_ms
        else:
            self._lat_lo, self._lat_hi = latency_ms
            if self._lat_lo > self._lat_hi:
                raise ValueError("latency range inverted")
        self.delivered = 0

    def register(self, nid: str, handler: Any, shard: Optional[int] = None) -> None:
        self._handlers[nid] = handler
        if shard is not None:
            self.shard_members.setdefault(shard, []).append(nid)

    def _latency(self) -> int:
        if self._lat_lo == self._lat_hi:
            return self._lat_lo
        return self._rng.randint(self._lat_lo, self._lat_hi)

    def _put(self, at: int, kind: int, target: str, payload: Any) -> None:
        heapq.heappush(self._heap, (at, self._seq, kind, target, payload))
        self._seq += 1

    def send(self, to: str, env: Envelope) -> None:
        if to not in self._handlers:
            raise UnknownPeer(to)
        if env.sender in self.crashed:
            return
        self._put(self.now + self._latency(), _EV_MSG, to, env)

    def broadcast_shard(self, shard: int, env: Envelope, include_self: bool = False) -> None:
        for nid in self.shard_members.get(shard, ()):
            if not include_self and nid == env.sender:
                continue
            self.send(nid, env)

    def broadcast_all(self, env: Envelope) -> None:
        for nid in self._handlers:
            if nid != env.sender:
                self.send(nid, env)

    def schedule(self, nid: str, at: int, tag: str, data: Any = None) -> None:
        """Arm a timer for a node at absolute virtual time ``at``."""
        self._put(max(at, self.now), _EV_TIMER, nid, (tag, data))

    def schedule_crash(self, nid: str, at: int) -> None:
        self._put(at, _EV_CRASH, nid, None)

    def step(self) -> Optional[tuple[int, str, Any]]:
        """Pop and dispatch the earliest event; None when the queue is empty."""
        if not self._heap:
            return None
        at, _, kind, target, payload = heapq.heappop(self._heap)
        self.now = at
        if kind == _EV_CRASH:
            self.crashed.add(target)
            return at, target, "crash"
        if target in self.crashed:
            return at, target, None
        handler = self._handlers.get(target)
        if handler is None:
            return at, target, None
        if kind == _EV_MSG:
            self.delivered += 1
            handler.on_envelope(payload, at)
        else:
            tag, data = payload
            handler.on_timer(tag, data, at)
        return at, target, payload

    def run(self, until: Optional[int] = None) -> int:
        """Drain the event queue, optionally stopping past a virtual time."""
        steps = 0
        while self._heap:
            if until is not None and self._heap[0][0] > until:
                break
            self.step()
            steps += 1
        return steps


# --- TCP backend ---


def read_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf += chunk
    return buf


def read_frame(sock: socket.socket) -> Envelope:
    header = read_exact(sock, _LEN.size)
    (size,) = _LEN.unpack(header)
    payload = read_exact(sock, size)
    return decode_frame(header + payload)


class TcpMesh:
    """Keep-alive TCP connections between every pair of nodes.

    Each participant listens on its address from the ip table and dials
    peers lazily on first send, keeping the socket open afterwards.
    Inbound envelopes are decoded by reader threads and handed to a
    callback; ordering is per-connection FIFO as TCP provides.
    """

    def __init__(self, nid: str, ip_table: dict[str, str], on_envelope: Callable[[Envelope], None]) -> None:
        if nid not in ip_table:
            raise UnknownPeer(nid)
        self.nid = nid
        self.ip_table = dict(ip_table)
        self._on_envelope = on_envelope
        self._out: dict[str, socket.socket] = {}
        self._lock = threading.Lock()
        self._closing = False
        host, port = self._split(ip_table[nid])
        self._server = socket.create_server((host, port))
        self._server.settimeout(0.2)
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    @staticmethod
    def _split(addr: str) -> tuple[str, int]:
        host, port = addr.rsplit(":", 1)
        return host, int(port)

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True).start()

    def _read_loop(self, conn: socket.socket) -> None:
        try:
            while not self._closing:
                env = read_frame(conn)
                self._on_envelope(env)
        except (ConnectionError, OSError):
            return

    def send(self, to: str, env: Envelope) -> None:
        if to not in self.ip_table:
            raise UnknownPeer(to)
        frame = encode_frame(env)
        with self._lock:
            sock = self._out.get(to)
            if sock is None:
                host, port = self._split(self.ip_table[to])
                try:
                    sock = socket.create_connection((host, port), timeout=5.0)
                except OSError as exc:
                    raise PeerDown(f"{to}: {exc}") from None
                self._out[to] = sock
            try:
                sock.sendall(frame)
            except OSError as exc:
                self._out.pop(to, None)
                try:
                    sock.close()
                finally:
                    raise PeerDown(f"{to}: {exc}") from None

    def close(self) -> None:
        self._closing = True
        try:
            self._server.close()
        except OSError:
            pass
        with self._lock:
            for sock in self._out.values():
                try:
                    sock.close()
                except OSError:
                    pass
            self._out.clear()
