"""Sweep the desk-scale correctness protocol and print proximity tables.

For each shard count the sweep generates a fresh uniform workload, runs it
with prefilled pools over the simulated transport, and prints how far every
usable epoch's throughput landed from the analytic intake and settle rates,
plus the confirmation-latency uniformity statistics and the conservation
counters.

Usage:
    python scripts/correctness_sweep.py --out /tmp/sweep
    python scripts/correctness_sweep.py --shards 2 4 --txs-per-shard 5000
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from shardemu.config import parse_config
from shardemu.dataset import gen_dataset
from shardemu.harness import run


def desk_config(n_shards: int, dataset: Path, out_dir: Path,
                theta: int, delta_ms: int, epoch_ms: int) -> dict:
    return {
        "n_shards": n_shards,
        "nodes_per_shard": 4,
        "block_size": theta,
        "block_interval_ms": delta_ms,
        "epoch_ms": epoch_ms,
        "mechanism": "relay",
        "partition": "static",
        "injection": {"prefill": True},
        "transport": {"sim": {"latency_ms": 5, "seed": 0}},
        "stop": {"drain": True},
        "dataset_path": str(dataset),
        "output_dir": str(out_dir),
    }


def print_oracle(oracle: dict) -> None:
    if "skipped" in oracle:
        print(f"  oracle skipped: {oracle['skipped']}")
        return
    print(f"  {'epoch':>5}  {'label':<7} {'tps':>9} {'expected':>9} "
          f"{'dist%':>7}  note")
    for row in oracle["epochs"]:
        if row["included"]:
            print(f"  {row['epoch']:>5}  {row['label']:<7} {row['tps']:>9.2f} "
                  f"{row['expected_tps']:>9.2f} {row['pct_distance']:>7.2f}")
        else:
            print(f"  {row['epoch']:>5}  {row['label']:<7} {row['tps']:>9.2f} "
                  f"{'-':>9} {'-':>7}  {row['exclude_reason']}")
    worst = oracle["max_pct_distance"]
    print(f"  worst distance: intake {worst['intake']:.2f}%  "
          f"settle {worst['settle']:.2f}%  "
          f"({oracle['included_epochs']} epochs included)")
    for family in ("whole", "split"):
        info = oracle.get("tcl", {}).get(family, {})
        if info.get("n"):
            print(f"  tcl {family}: n={info['n']}  KS D={info['ks_d']:.4f}  "
                  f"mean {info['mean_s']:.2f} s vs midpoint "
                  f"{info['midpoint_s']:.2f} s ({info['mean_pct_distance']:.2f}%)")


def sweep_one(n_shards: int, args, out_base: Path) -> int:
    dataset = out_base / f"uniform_{n_shards}.csv"
    accounts = args.accounts * (n_shards if args.scale_accounts else 1)
    gen_dataset(str(dataset), accounts=accounts,
                txs=args.txs_per_shard * n_shards,
                skew="uniform", seed=args.seed)
    run_dir = out_base / f"run_{n_shards}"
    cfg = parse_config(desk_config(n_shards, dataset, run_dir,
                                   args.block_size, args.block_interval_ms,
                                   args.epoch_ms))
    t0 = time.perf_counter()
    result = run(cfg)
    wall = time.perf_counter() - t0

    c = result.summary["counters"]
    ok = (c["Z"] + c["Y"] == c["X"] and c["Z"] + 2 * c["Y"] == c["W"]
          and c["Y"] == c["U"] == c["V"])
    print(f"\n== {n_shards} shards | X={c['X']} | wall {wall:.1f} s | "
          f"exit {result.exit_code} ==")
    print(f"  counters: Z={c['Z']} Y={c['Y']} U={c['U']} V={c['V']} "
          f"W={c['W']}  conservation {'ok' if ok else 'VIOLATED'}")
    print(f"  ctx ratio {result.summary['ctx_ratio']:.4f}  "
          f"last commit {result.summary['last_commit_ms']} ms  "
          f"blocks {result.summary['blocks_committed']}")
    print_oracle(result.summary.get("oracle", {}))
    if not ok:
        return 1
    return result.exit_code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="/tmp/shardemu_sweep",
                        help="directory for datasets and run outputs")
    parser.add_argument("--shards", type=int, nargs="+", default=[2, 4, 8])
    parser.add_argument("--txs-per-shard", type=int, default=10_000)
    parser.add_argument("--accounts", type=int, default=1000,
                        help="account universe per shard when scaling")
    parser.add_argument("--scale-accounts", action="store_true", default=True,
                        help="grow the universe with the shard count so the "
                             "uniform prefill stays evenly spread")
    parser.add_argument("--block-size", type=int, default=200)
    parser.add_argument("--block-interval-ms", type=int, default=1000)
    parser.add_argument("--epoch-ms", type=int, default=5000)
    parser.add_argument("--seed", type=int, default=11)
    args = parser.parse_args(argv)

    out_base = Path(args.out)
    out_base.mkdir(parents=True, exist_ok=True)
    worst = 0
    for n_shards in args.shards:
        worst = max(worst, sweep_one(n_shards, args, out_base))
    return worst


if __name__ == "__main__":
    raise SystemExit(main())
