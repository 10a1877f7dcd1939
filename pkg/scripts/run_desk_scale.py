#!/usr/bin/env python3
"""Desk-scale study: 118-bus grid, five months of hours, three forecasters.

Generates the dataset (4 months train / 1 month test, 10 congested lines),
trains the attention model, the GCN baseline, and per-node MLPs, evaluates
everything on the test split, and emits comparison tables and plots. Results
land under --out (default runs/desk_scale). Expect roughly half an hour at
the default budgets; pass --quick for a minutes-scale shakedown with smaller
models.

Every step shells through the package CLI so the artifacts match exactly what
a user would produce by hand.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
CASE = REPO / "data" / "cases" / "ieee118"

TRAIN_HOURS = 4 * 31 * 24   # 2976
TEST_HOURS = 31 * 24        # 744
MLP_NODES = (21, 49, 52, 76, 85, 101)


def cli(*argv) -> None:
    from lmpcast.cli import main
    argv = [str(a) for a in argv]
    print(f"$ lmpcast {' '.join(argv)}", flush=True)
    t0 = time.time()
    rc = main(argv)
    if rc != 0:
        sys.exit(f"step failed with exit code {rc}")
    print(f"  ... {time.time() - t0:.1f}s", flush=True)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk_scale", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true",
                    help="tiny models and few epochs; shape check only")
    ap.add_argument("--force", action="store_true",
                    help="overwrite an existing run directory")
    args = ap.parse_args()

    out: Path = args.out
    hours = TRAIN_HOURS + TEST_HOURS
    train_fraction = TRAIN_HOURS / hours
    if args.quick:
        epochs, channels, ast_epochs, mlp_epochs = 2, 16, 1, 5
    else:
        epochs, channels, ast_epochs, mlp_epochs = 15, 128, 6, 60
    force = ["--force"] if args.force else []

    ds = out / "dataset"
    cli("gen-data", "--case", CASE, "--out", ds, "--hours", hours,
        "--train-fraction", train_fraction, "--congested-lines", 10,
        "--seed", args.seed, "--threads", 4, *force)

    cli("train", "--data", ds, "--model", "gcn", "--out", out / "gcn",
        "--epochs", epochs, "--lr", 1e-2, "--channels", channels,
        "--seed", args.seed, "--verbose", *force)
    cli("train", "--data", ds, "--model", "astgcn", "--out", out / "astgcn",
        "--epochs", ast_epochs, "--lr", 1e-2, "--channels", max(channels // 2, 8),
        "--t-hist", 4, "--batch-size", 16, "--seed", args.seed,
        "--verbose", *force)
    for node in MLP_NODES:
        cli("train", "--data", ds, "--model", "mlp", "--node", node,
            "--out", out / f"mlp_node{node}", "--epochs", mlp_epochs,
            "--lr", 1e-2, "--t-hist", 24, "--seed", args.seed, *force)

    for name in ("gcn", "astgcn"):
        cli("eval", "--data", ds, "--ckpt", out / name / "best.ckpt",
            "--out", out / f"eval_{name}", *force)
    for node in MLP_NODES:
        cli("eval", "--data", ds, "--ckpt", out / f"mlp_node{node}" / "best.ckpt",
            "--out", out / f"eval_mlp_node{node}", *force)

    cli("export-attention", "--ckpt", out / "astgcn" / "best.ckpt",
        "--data", ds, "--sample", 0, "--out", out / "attention", *force)
    cli("plot", "--pred", out / "eval_gcn" / "pred_lmp.csv",
        "--gt", out / "eval_gcn" / "gt_lmp.csv", "--node", 49,
        "--out", out / "plots", *force)

    # condense the head-to-head numbers into one table
    summary = {}
    for name in ("gcn", "astgcn"):
        summary[name] = json.loads(
            (out / f"eval_{name}" / "metrics.json").read_text())
    per_node = {}
    gcn_nodes = {int(r.split(",")[0]): float(r.split(",")[1])
                 for r in (out / "eval_gcn" / "per_node.csv")
                 .read_text().splitlines()[1:]}
    for node in MLP_NODES:
        mlp = json.loads(
            (out / f"eval_mlp_node{node}" / "metrics.json").read_text())
        per_node[node] = {"gcn_mae": gcn_nodes[node], "mlp_mae": mlp["mae"]}
    (out / "summary.json").write_text(
        json.dumps({"models": summary, "per_node_vs_mlp": per_node},
                   indent=2, sort_keys=True) + "\n")

    print("\n== test-split summary ==")
    for name, m in summary.items():
        print(f"{name:7s} MAE {m['mae']:.3f}  RMSE {m['rmse']:.3f}  "
              f"MAPE {m['mape_pct']:.2f}%  s-acc {m['s_accuracy_pct']:.1f}%")
    wins = sum(v["gcn_mae"] < v["mlp_mae"] for v in per_node.values())
    print(f"gcn beats mlp on {wins}/{len(per_node)} spotlight nodes")
    print(f"artifacts in {out}")


if __name__ == "__main__":
    main()
