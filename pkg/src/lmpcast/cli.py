"""Command-line workbench: dataset synthesis, training, and evaluation.

Exit codes: 0 success, 1 usage errors (bad flags or arguments), 2 invalid
inputs or configuration, 3 solver failures during dataset generation.

Each command writes ``manifest.json`` into its output directory recording the
resolved configuration, SHA-256 hashes of every input, and wall-clock
timestamps. The manifest is the only file whose bytes vary between identical
re-runs; everything else is byte-deterministic for a fixed seed.

A ``--config`` file holds flat ``key = value`` lines where the key is the
long flag name with dashes replaced by underscores (``t_hist = 24``). Values
on the command line win over file values, which win over built-in defaults.
``LMPCAST_THREADS`` caps the thread count used by ``gen-data``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (compute_metrics, emit_series_plot, export_attention,
                         read_matrix_csv, write_table_csv)
from .grid import CaseFormatError, chebyshev_basis, load_case, max_eigenvalue, \
    normalized_laplacian
from .market import DatasetError, GenConfig, SourceConfig, generate_dataset, \
    load_dataset
from .model import attention_masks
from .opf import SolverError
from .training import (TrainConfig, TrainingError, build_windows,
                       load_model_checkpoint, norm_stats, train)

EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_SOLVER = 3

HOURS_PER_YEAR = 8760


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- manifest

def _sha256_path(path: Path) -> str:
    """Content hash of a file, or of a directory's files in sorted order."""
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(b"\0")
                h.update(p.read_bytes())
    elif path.is_file():
        h.update(path.read_bytes())
    else:
        raise CliError(f"{path}: no such file or directory")
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict,
                   inputs: dict[str, Path], started: str) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256_path(Path(p)) for p in inputs.values()},
        "started_utc": started,
        "finished_utc": _utc_now(),
        "version": __version__,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------- config-file handling

def read_config_file(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise CliError(f"{path}: config file not found")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def resolve_options(ns: argparse.Namespace, spec: dict[str, tuple],
                    file_values: dict[str, str], source: str) -> dict:
    """Merge flag > config-file > default for every option in ``spec``."""
    unknown = set(file_values) - set(spec)
    if unknown:
        raise CliError(f"{source}: unknown config keys {sorted(unknown)}")
    resolved = {}
    for key, (coerce, default) in spec.items():
        flag_value = getattr(ns, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in file_values:
            try:
                resolved[key] = coerce(file_values[key])
            except ValueError as exc:
                raise CliError(f"{source}: bad value for {key}: {exc}")
        else:
            resolved[key] = default
    return resolved


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise CliError(f"{out}: exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise CliError(f"{out}: directory not empty (pass --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------ subcommands

GEN_SPEC = {
    "years": (float, None),
    "hours": (int, None),
    "alpha": (float, 5.0),
    "concentration": (float, 1.0),
    "congested_lines": (int, 10),
    "limit_fraction": (float, 0.7),
    "train_fraction": (float, 2.0 / 3.0),
    "seed": (int, 0),
    "threads": (int, 1),
}


def cmd_gen_data(ns: argparse.Namespace) -> int:
    started = _utc_now()
    file_values = read_config_file(Path(ns.config)) if ns.config else {}
    opt = resolve_options(ns, GEN_SPEC, file_values, ns.config or "--config")
    if opt["years"] is not None and opt["hours"] is not None:
        raise CliError("give either years or hours, not both")
    if opt["years"] is not None:
        opt["hours"] = int(round(opt["years"] * HOURS_PER_YEAR))
    elif opt["hours"] is None:
        opt["hours"] = HOURS_PER_YEAR
    threads = opt["threads"]
    env_cap = os.environ.get("LMPCAST_THREADS")
    if env_cap is not None:
        try:
            threads = min(threads, int(env_cap))
        except ValueError:
            raise CliError(f"LMPCAST_THREADS={env_cap!r} is not an integer")
    threads = max(threads, 1)

    graph = load_case(ns.case)
    source = SourceConfig(csv_path=ns.source) if ns.source else SourceConfig()
    cfg = GenConfig(hours=opt["hours"], seed=opt["seed"], alpha=opt["alpha"],
                    concentration=opt["concentration"],
                    congested_count=opt["congested_lines"],
                    limit_fraction=opt["limit_fraction"],
                    train_fraction=opt["train_fraction"],
                    threads=threads,
                    source_mode="csv" if ns.source else "synthetic",
                    source=source)
    out = _prepare_out(ns.out, ns.force)
    generate_dataset(graph, cfg, out)
    inputs = {"case": Path(ns.case)}
    if ns.source:
        inputs["source"] = Path(ns.source)
    config = dict(opt, threads=threads, case=str(ns.case),
                  source=ns.source or "synthetic")
    write_manifest(out, "gen-data", config, inputs, started)
    print(f"wrote dataset ({opt['hours']} hours, {graph.node_count} nodes) to {out}")
    return 0


TRAIN_SPEC = {
    "epochs": (int, 100),
    "lr": (float, 1e-4),
    "k": (int, 3),
    "t_hist": (int, 24),
    "seed": (int, 0),
    "batch_size": (int, 32),
    "channels": (int, 128),
    "mu_width": (int, 16),
    "stride": (int, 1),
    "node": (int, None),
}


def cmd_train(ns: argparse.Namespace) -> int:
    started = _utc_now()
    file_values = read_config_file(Path(ns.config)) if ns.config else {}
    opt = resolve_options(ns, TRAIN_SPEC, file_values, ns.config or "--config")
    data_dir = Path(ns.data)
    dataset = load_dataset(data_dir)
    basis = None
    if ns.model != "mlp":
        graph = load_case(data_dir / "case")
        lap = normalized_laplacian(graph)
        basis = chebyshev_basis(lap, max_eigenvalue(lap), opt["k"])
    if ns.model == "mlp" and opt["node"] is None:
        raise CliError("mlp is a per-node model: pass --node")
    cfg = TrainConfig(learning_rate=opt["lr"], epochs=opt["epochs"],
                      batch_size=opt["batch_size"], k_order=opt["k"],
                      t_hist=opt["t_hist"], seed=opt["seed"],
                      stride=opt["stride"], channels=opt["channels"],
                      mu_width=opt["mu_width"])
    out = _prepare_out(ns.out, ns.force)
    result = train(dataset, cfg, ns.model, out, basis=basis, node=opt["node"],
                   log=(lambda msg: print(msg)) if ns.verbose else None)
    config = dict(opt, model=ns.model, data=str(data_dir))
    write_manifest(out, "train", config, {"data": data_dir}, started)
    best = ("n/a" if math.isinf(result.best_rmse)
            else f"{result.best_rmse:.4f} (epoch {result.best_epoch})")
    print(f"trained {ns.model} for {cfg.epochs} epochs; best test RMSE {best}")
    print(f"checkpoints and history in {out}")
    return 0


def _model_windows(loaded, dataset, part: str):
    node = loaded.spec.node if loaded.spec.kind == "mlp" else None
    return build_windows(dataset, loaded.spec.t_hist, part, 1,
                         loaded.mean, loaded.std, node)


def cmd_eval(ns: argparse.Namespace) -> int:
    started = _utc_now()
    loaded = load_model_checkpoint(ns.ckpt)
    dataset = load_dataset(ns.data)
    wins = _model_windows(loaded, dataset, ns.part)
    pred, s_hat = loaded.predict(wins.x)
    report = compute_metrics(pred, wins.lmp, s_hat, wins.s)
    out = _prepare_out(ns.out, ns.force)

    if loaded.spec.kind == "mlp":
        node_ids = [loaded.spec.node]
    else:
        node_ids = list(range(dataset.node_count))
    with open(out / "pred_lmp.csv", "w") as fh:
        fh.write("hour,s_hat," + ",".join(str(i) for i in node_ids) + "\n")
        for h, flag, row in zip(wins.hours, s_hat, pred):
            cells = ",".join(f"{v:.17g}" for v in row)
            fh.write(f"{h},{int(flag)},{cells}\n")
    with open(out / "gt_lmp.csv", "w") as fh:
        fh.write("hour,s," + ",".join(str(i) for i in node_ids) + "\n")
        for h, flag, row in zip(wins.hours, wins.s, wins.lmp):
            cells = ",".join(f"{v:.17g}" for v in row)
            fh.write(f"{h},{int(flag)},{cells}\n")
    rows = [{"node": node_ids[j],
             "mae": report.per_node[j, 0],
             "rmse": report.per_node[j, 1]} for j in range(len(node_ids))]
    write_table_csv(rows, out / "per_node.csv")
    metrics = {"mae": report.mae, "rmse": report.rmse, "mape_pct": report.mape,
               "s_accuracy_pct": report.s_accuracy,
               "mape_excluded_node_hours": report.mape_excluded,
               "windows": int(wins.hours.size), "part": ns.part}
    (out / "metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "eval", {"part": ns.part},
                   {"ckpt": Path(ns.ckpt), "data": Path(ns.data)}, started)
    print(f"{loaded.spec.kind} on {ns.part} split ({wins.hours.size} windows)")
    print(f"  MAE   {report.mae:10.4f} $/MWh")
    print(f"  RMSE  {report.rmse:10.4f} $/MWh")
    print(f"  MAPE  {report.mape:10.4f} %")
    print(f"  s-acc {report.s_accuracy:10.4f} %")
    return 0


def cmd_predict(ns: argparse.Namespace) -> int:
    started = _utc_now()
    loaded = load_model_checkpoint(ns.ckpt)
    loads = read_matrix_csv(ns.loads)
    t_hist = loaded.spec.t_hist
    n = loaded.spec.node_count
    if loads.ndim != 2 or loads.shape[1] != n:
        raise CliError(f"{ns.loads}: expected {n} load columns, "
                       f"got {loads.shape[1] if loads.ndim == 2 else 'none'}")
    if loads.shape[0] < t_hist:
        raise CliError(f"{ns.loads}: need at least {t_hist} rows of history, "
                       f"got {loads.shape[0]}")
    loads_std = (loads - loaded.mean) / loaded.std
    # row t forecasts hour t from the t_hist hours before it; the final row
    # is the out-of-sample forecast for the hour after the file ends
    targets = np.arange(t_hist, loads.shape[0] + 1)
    x = np.stack([loads_std[t - t_hist:t].T for t in targets])
    if loaded.spec.kind == "mlp":
        x = x[:, loaded.spec.node, :]
        node_ids = [loaded.spec.node]
    else:
        node_ids = list(range(n))
    pred, s_hat = loaded.predict(x)
    out = _prepare_out(ns.out, ns.force)
    with open(out / "predictions.csv", "w") as fh:
        fh.write("hour,s_hat," + ",".join(str(i) for i in node_ids) + "\n")
        for h, flag, row in zip(targets, s_hat, pred):
            cells = ",".join(f"{v:.17g}" for v in row)
            fh.write(f"{h},{int(flag)},{cells}\n")
    write_manifest(out, "predict", {"t_hist": t_hist, "kind": loaded.spec.kind},
                   {"ckpt": Path(ns.ckpt), "loads": Path(ns.loads)}, started)
    print(f"wrote {targets.size} hourly forecasts to {out / 'predictions.csv'}")
    return 0


def cmd_export_attention(ns: argparse.Namespace) -> int:
    started = _utc_now()
    loaded = load_model_checkpoint(ns.ckpt)
    if loaded.spec.kind != "astgcn":
        raise CliError(f"{loaded.spec.kind} checkpoints carry no attention "
                       "masks; train an astgcn model")
    dataset = load_dataset(ns.data)
    wins = _model_windows(loaded, dataset, ns.part)
    if not 0 <= ns.sample < wins.x.shape[0]:
        raise CliError(f"sample {ns.sample} outside [0, {wins.x.shape[0]}) "
                       f"for the {ns.part} split")
    masks = attention_masks(wins.x[ns.sample], loaded.params, loaded.spec)
    out = _prepare_out(ns.out, ns.force)
    for branch, (temporal, spatial) in masks.items():
        export_attention(temporal, spatial, out, prefix=f"{branch}_")
    write_manifest(out, "export-attention",
                   {"sample": ns.sample, "part": ns.part,
                    "hour": int(wins.hours[ns.sample])},
                   {"ckpt": Path(ns.ckpt), "data": Path(ns.data)}, started)
    print(f"wrote attention masks for window {ns.sample} "
          f"(hour {wins.hours[ns.sample]}) to {out}")
    return 0


def _read_hourly_matrix(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an ``hour,...`` CSV written by eval/predict; returns (hours, matrix)."""
    raw = read_matrix_csv(path)
    if raw.ndim != 2 or raw.shape[1] < 3:
        raise CliError(f"{path}: expected hour,s,<per-node columns>")
    return raw[:, 0].astype(int), raw[:, 2:]


def cmd_plot(ns: argparse.Namespace) -> int:
    started = _utc_now()
    hours_p, pred = _read_hourly_matrix(ns.pred)
    hours_g, gt = _read_hourly_matrix(ns.gt)
    if pred.shape != gt.shape or not np.array_equal(hours_p, hours_g):
        raise CliError("prediction and ground-truth files cover different "
                       "hours or node sets")
    start = ns.start if ns.start is not None else 0
    end = ns.end if ns.end is not None else pred.shape[0]
    out = _prepare_out(ns.out, ns.force)
    paths = emit_series_plot(pred, gt, ns.node, (start, end), out)
    write_manifest(out, "plot", {"node": ns.node, "start": start, "end": end},
                   {"pred": Path(ns.pred), "gt": Path(ns.gt)}, started)
    print(f"wrote {paths['csv'].name} and {paths['svg'].name} to {out}")
    return 0


# -------------------------------------------------------------- the parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmpcast",
        description="Electricity-price dataset synthesis and forecasting.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="solve hourly dispatch, write a dataset")
    p.add_argument("--case", required=True, help="grid case directory")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--source", help="CSV of hourly zone loads (default: synthetic)")
    p.add_argument("--years", type=float, help=f"duration ({HOURS_PER_YEAR} hours each)")
    p.add_argument("--hours", type=int, help="duration in hours (default 8760)")
    p.add_argument("--alpha", type=float, help="load mixing noise, MW (default 5)")
    p.add_argument("--concentration", type=float, help="Dirichlet concentration (default 1)")
    p.add_argument("--congested-lines", type=int, dest="congested_lines",
                   help="how many lines get limits (default 10)")
    p.add_argument("--limit-fraction", type=float, dest="limit_fraction",
                   help="limit as a fraction of unconstrained flow (default 0.7)")
    p.add_argument("--train-fraction", type=float, dest="train_fraction",
                   help="share of hours in the training split (default 2/3)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--threads", type=int, help="solver threads (default 1)")

    p = sub.add_parser("train", help="fit a forecaster on a dataset")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--model", required=True, choices=("astgcn", "gcn", "mlp"))
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--epochs", type=int, help="training epochs (default 100)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 1e-4)")
    p.add_argument("--k", type=int, help="Chebyshev order (default 3)")
    p.add_argument("--t-hist", type=int, dest="t_hist",
                   help="hours of load history per window (default 24)")
    p.add_argument("--seed", type=int, help="training seed (default 0)")
    p.add_argument("--batch-size", type=int, dest="batch_size",
                   help="windows per optimizer step (default 32)")
    p.add_argument("--channels", type=int, help="hidden width (default 128)")
    p.add_argument("--mu-width", type=int, dest="mu_width",
                   help="congestion-branch output width (default 16)")
    p.add_argument("--stride", type=int, help="hours between windows (default 1)")
    p.add_argument("--node", type=int, help="node to forecast (mlp only)")
    p.add_argument("--verbose", action="store_true", help="print per-epoch metrics")

    p = sub.add_parser("eval", help="score a checkpoint against a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--part", choices=("train", "test"), default="test")

    p = sub.add_parser("predict", help="forecast prices from a loads CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--loads", required=True, help="CSV shaped like loads.csv")
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-attention",
                       help="dump attention masks for one input window")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset supplying the window")
    p.add_argument("--sample", type=int, default=0,
                   help="window index within the split (default 0)")
    p.add_argument("--part", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)

    p = sub.add_parser("plot", help="forecast-vs-truth series at one node")
    p.add_argument("--pred", required=True, help="pred_lmp.csv or predictions.csv")
    p.add_argument("--gt", required=True, help="gt_lmp.csv from eval")
    p.add_argument("--node", type=int, required=True,
                   help="column position within the file's node columns")
    p.add_argument("--start", type=int, help="first row to plot")
    p.add_argument("--end", type=int, help="one past the last row to plot")
    p.add_argument("--out", required=True)

    for name, sp in sub.choices.items():
        sp.add_argument("--force", action="store_true",
                        help="overwrite a non-empty output directory")
        if name in ("gen-data", "train"):
            sp.add_argument("--config", help="key = value defaults file")
    return parser


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "export-attention": cmd_export_attention,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else EXIT_USAGE
    if ns.command is None:
        parser.print_help(file=sys.stderr)
        return EXIT_USAGE
    try:
        return _HANDLERS[ns.command](ns)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DatasetError as exc:
        if "failed to solve" in str(exc):
            print(f"solver failure: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CaseFormatError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
