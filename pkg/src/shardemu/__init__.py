"""Sharded-blockchain emulator with per-shard PBFT and pluggable
cross-shard mechanisms (relay or broker) and partition policies (static or
label-propagation with live account migration)."""

__version__ = "0.1.0"
