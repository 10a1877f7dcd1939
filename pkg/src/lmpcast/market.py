"""Synthesis of the hourly market dataset.

Pipeline: build hourly loads for a set of source zones (from a CSV of real
data or a sinusoidal synthetic fallback), mix them into nodal loads with a
Dirichlet weight matrix plus additive noise, randomize quadratic bids per
hour, pick lines to congest, solve every hour's dispatch, and write the
resulting series (loads, lambda, mu, s, LMP) as a dataset directory:

    loads.csv    header = node ids, one row per hour, MW
    lambda.csv   energy price per hour
    mu.csv       one signed dual column per monitored line
    s.csv        binary congestion flag
    lmp.csv      nodal price per node
    split.json   {"train": [lo, hi), "test": [lo, hi)}
    genconfig.json  everything needed to regenerate, incl. monitored lines

All randomness is drawn from numpy Generators seeded with
[seed, stream, ...] tuples; the streams are: 1 mixing weights, 2 source
profiles, 3 mixing noise, 4 hourly bids (one stream per hour).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .grid import GridGraph, ptdf, write_case_dir
from .opf import (BidCurve, DispatchRecord, LineLimits, EMPTY_LIMITS,
                  SolverError, STATUS_OPTIMAL, line_flows, solve_dcopf)

SOURCE_ZONES = 26

# Dirichlet rows are snapped to this dyadic grid with an exact integer total,
# so a row times a constant load vector sums without rounding error. This is
# what lets "uniform unit source loads -> synthetic loads exactly 1" hold.
_WEIGHT_GRID_BITS = 30


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class LoadMatrix:
    values: np.ndarray      # (hours, columns) MW
    timestamps: np.ndarray  # hour indices

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.timestamps.size:
            raise ValueError("values/timestamps shape mismatch")


@dataclass(frozen=True)
class DirichletMixer:
    weights: np.ndarray   # (n_target, n_source), rows sum to 1
    noise_scale: float    # MW


def synthesize_weights(n_target: int, n_source: int, concentration: float = 1.0,
                       seed=0, noise_scale: float = 5.0) -> DirichletMixer:
    """Row-stochastic mixing matrix, each row a symmetric Dirichlet draw."""
    if n_target < 1 or n_source < 1:
        raise ValueError("n_target and n_source must be >= 1")
    if concentration <= 0:
        raise ValueError(f"concentration must be positive, got {concentration}")
    rng = np.random.default_rng(seed)
    raw = rng.dirichlet(np.full(n_source, float(concentration)), size=n_target)
    scale = 1 << _WEIGHT_GRID_BITS
    grid = np.rint(raw * scale).astype(np.int64)
    drift = scale - grid.sum(axis=1)
    rows = np.arange(n_target)
    grid[rows, grid.argmax(axis=1)] += drift
    if np.any(grid < 0):  # argmax row could in principle go negative on tiny rows
        raise DatasetError("weight quantization produced a negative entry")
    weights = grid.astype(np.float64) / scale
    return DirichletMixer(weights, float(noise_scale))


def synthesize_loads(mixer: DirichletMixer, source_loads: np.ndarray, seed=0,
                     include_source: bool = True) -> LoadMatrix:
    """Nodal loads: source zone columns (optionally) followed by mixed ones.

    Each synthetic column is W @ d_t plus N(0, noise_scale) additive noise,
    clipped at zero from below.
    """
    src = np.asarray(source_loads, dtype=np.float64)
    if src.ndim != 2:
        raise ValueError(f"source_loads must be 2-D, got shape {src.shape}")
    if np.any(src < 0):
        raise ValueError("source loads must be nonnegative")
    if mixer.weights.shape[1] != src.shape[1]:
        raise ValueError(
            f"mixer expects {mixer.weights.shape[1]} source columns, got {src.shape[1]}")
    synthetic = src @ mixer.weights.T
    if mixer.noise_scale != 0.0:
        rng = np.random.default_rng(seed)
        synthetic = synthetic + mixer.noise_scale * rng.standard_normal(synthetic.shape)
        synthetic = np.maximum(synthetic, 0.0)
    values = np.hstack([src, synthetic]) if include_source else synthetic
    return LoadMatrix(values, np.arange(src.shape[0]))


@dataclass(frozen=True)
class SourceConfig:
    hours: int = 8760
    seed: int = 0
    zones: int = SOURCE_ZONES
    base_mw: float = 35.0
    base_spread: float = 0.3      # per-zone base in base_mw * (1 +- spread)
    daily_amplitude: float = 0.30
    weekly_amplitude: float = 0.08
    annual_amplitude: float = 0.12
    noise_rel: float = 0.02
    csv_path: str | None = None


def source_load_provider(mode: str, config: SourceConfig) -> np.ndarray:
    """Hourly zone loads, shape (hours, zones)."""
    if mode == "csv":
        return _source_from_csv(config)
    if mode == "synthetic":
        return _source_synthetic(config)
    raise ValueError(f"unknown source mode {mode!r} (expected 'csv' or 'synthetic')")


def _source_synthetic(cfg: SourceConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 2])
    base = cfg.base_mw * (1.0 + cfg.base_spread * rng.uniform(-1.0, 1.0, cfg.zones))
    # zones peak within a couple of hours of each other; fully random phases
    # would cancel in aggregate and flatten the system profile
    day_phase = rng.uniform(-2.0, 2.0, cfg.zones)
    week_phase = rng.uniform(0.0, np.pi / 4.0, cfg.zones)
    year_phase = rng.uniform(0.0, np.pi / 6.0, cfg.zones)
    t = np.arange(cfg.hours, dtype=np.float64)[:, None]
    shape = (1.0
             + cfg.daily_amplitude * np.sin(2.0 * np.pi * (t + day_phase) / 24.0)
             + cfg.weekly_amplitude * np.sin(2.0 * np.pi * t / 168.0 + week_phase)
             + cfg.annual_amplitude * np.sin(2.0 * np.pi * t / 8760.0 + year_phase))
    noise = 1.0 + cfg.noise_rel * rng.standard_normal((cfg.hours, cfg.zones)) \
        if cfg.noise_rel != 0.0 else 1.0
    return np.maximum(base * shape * noise, 0.0)


def _source_from_csv(cfg: SourceConfig) -> np.ndarray:
    if cfg.csv_path is None:
        raise ValueError("csv source mode requires csv_path")
    path = Path(cfg.csv_path)
    if not path.exists():
        raise ValueError(f"{path}: source CSV missing")
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    has_hour = header and header[0].strip().lower() == "hour"
    width = len(header) - (1 if has_hour else 0)
    if width != cfg.zones:
        raise ValueError(f"{path}: expected {cfg.zones} zone columns, found {width}")
    data = np.array([[float(v) for v in row] for row in rows])
    if has_hour:
        hours = data[:, 0].astype(np.int64)
        gaps = sorted(set(range(int(hours[0]), int(hours[-1]) + 1)) - set(hours.tolist()))
        if gaps:
            head = ", ".join(str(g) for g in gaps[:10])
            raise ValueError(f"{path}: missing hours: {head}"
                             + (f" (+{len(gaps) - 10} more)" if len(gaps) > 10 else ""))
        data = data[:, 1:]
    if np.any(data < 0):
        bad = np.argwhere(data < 0)[0]
        raise ValueError(f"{path}: negative load at row {bad[0] + 2}, column {bad[1]}")
    if data.shape[0] != cfg.hours:
        raise ValueError(f"{path}: {data.shape[0]} rows but the run asks for "
                         f"{cfg.hours} hours; set hours to match the file")
    return data


def bid_coefficients(total_load: float, c20, c10, seed=0,
                     noise_on: bool = True) -> BidCurve:
    """Hourly quadratic bid coefficients scaled by system load.

    c2 = (total/1000) * c20 + 0.001 * N(0,1), floored at 1e-4;
    c1 = (0.5 + total/50000) * c10 + 0.5 * N(0,1), floored at 0.
    """
    if total_load < 0:
        raise ValueError("total_load must be nonnegative")
    c20 = np.atleast_1d(np.asarray(c20, dtype=np.float64))
    c10 = np.atleast_1d(np.asarray(c10, dtype=np.float64))
    c2 = (total_load / 1000.0) * c20
    c1 = (0.5 + total_load / 50000.0) * c10
    if noise_on:
        rng = np.random.default_rng(seed)
        c2 = c2 + 0.001 * rng.standard_normal(c2.shape)
        c1 = c1 + 0.5 * rng.standard_normal(c1.shape)
    return BidCurve(np.maximum(c2, 1e-4), np.maximum(c1, 0.0))


def _hour_bids(graph: GridGraph, loads_t: np.ndarray, seed, hour: int,
               noise_on: bool = True) -> BidCurve:
    c20 = np.array([g.c20 for g in graph.generators])
    c10 = np.array([g.c10 for g in graph.generators])
    return bid_coefficients(float(loads_t.sum()), c20, c10,
                            seed=[seed, 4, hour], noise_on=noise_on)


def select_congested_lines(graph: GridGraph, loads: LoadMatrix, seed: int,
                           count: int, fraction: float = 0.7,
                           sample_limit: int = 168) -> LineLimits:
    """Pick the `count` highest mean-|flow| lines from unconstrained solves.

    Limits are fraction * (mean + std) of each chosen line's sampled |flow|,
    using the same per-hour bid streams the full run will use.
    """
    if count == 0:
        return EMPTY_LIMITS
    if not 0 <= count <= graph.line_count:
        raise ValueError(f"count {count} outside [0, {graph.line_count}]")
    hours = loads.values.shape[0]
    sample = np.unique(np.linspace(0, hours - 1, min(hours, sample_limit)).astype(int))
    ptm = ptdf(graph)
    flows = np.empty((sample.size, graph.line_count))
    for i, t in enumerate(sample):
        d = loads.values[t]
        rec = solve_dcopf(graph, d, _hour_bids(graph, d, seed, int(t)),
                          ptdf_matrix=ptm, hour=int(t))
        if rec.solver_status != STATUS_OPTIMAL:
            raise SolverError(
                f"unconstrained dispatch failed at hour {t}: {rec.diagnostics}")
        flows[i] = np.abs(line_flows(graph, ptm, rec.generation, d))
    mean = flows.mean(axis=0)
    std = flows.std(axis=0)
    top = np.argsort(-mean, kind="stable")[:count]
    limits = fraction * (mean[top] + std[top])
    return LineLimits(tuple(int(i) for i in top), limits)


@dataclass(frozen=True)
class GenConfig:
    hours: int = 8760
    seed: int = 0
    alpha: float = 5.0            # MW noise on mixed loads
    concentration: float = 1.0
    congested_count: int = 10
    limit_fraction: float = 0.7
    congestion_sample: int = 168
    train_fraction: float = 2.0 / 3.0
    bid_noise: bool = True
    threads: int = 1
    source_mode: str = "synthetic"
    source: SourceConfig = field(default_factory=SourceConfig)


def build_load_matrix(graph: GridGraph, cfg: GenConfig) -> LoadMatrix:
    """Source zones map to node ids 0..25 when the grid is big enough;
    every remaining node gets a mixed synthetic load."""
    src_cfg = SourceConfig(**{**asdict(cfg.source), "hours": cfg.hours, "seed": cfg.seed,
                              "csv_path": cfg.source.csv_path})
    source = source_load_provider(cfg.source_mode, src_cfg)
    n = graph.node_count
    n_source = source.shape[1]
    if n == n_source:
        return LoadMatrix(source, np.arange(cfg.hours))
    n_synth = n - n_source if n > n_source else n
    mixer = synthesize_weights(n_synth, n_source, cfg.concentration,
                               seed=[cfg.seed, 1], noise_scale=cfg.alpha)
    return synthesize_loads(mixer, source, seed=[cfg.seed, 3],
                            include_source=n > n_source)


def dispatch_series(graph: GridGraph, cfg: GenConfig, loads: LoadMatrix,
                    limits: LineLimits,
                    ptdf_matrix=None) -> list[DispatchRecord]:
    """Solve every hour of the load matrix under the config's bid policy."""
    ptm = ptdf(graph) if ptdf_matrix is None else ptdf_matrix

    def solve_hour(t: int) -> DispatchRecord:
        d = loads.values[t]
        return solve_dcopf(graph, d, _hour_bids(graph, d, cfg.seed, t, cfg.bid_noise),
                           limits, ptdf_matrix=ptm, hour=t)

    hours = range(cfg.hours)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            return list(pool.map(solve_hour, hours))
    return [solve_hour(t) for t in hours]


def generate_dataset(graph: GridGraph, cfg: GenConfig, out_dir) -> Path:
    """Solve every hour and write the dataset directory; returns its path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # embed the grid so downstream consumers never need the original case dir
    write_case_dir(graph, out / "case")
    loads = build_load_matrix(graph, cfg)
    limits = select_congested_lines(graph, loads, cfg.seed, cfg.congested_count,
                                    cfg.limit_fraction, cfg.congestion_sample)
    records = dispatch_series(graph, cfg, loads, limits)

    failed = [r for r in records if r.solver_status != STATUS_OPTIMAL]
    if len(failed) > 0.01 * cfg.hours:
        examples = "; ".join(
            f"hour {r.hour}: {r.solver_status} ({r.diagnostics})" for r in failed[:5])
        raise DatasetError(
            f"{len(failed)}/{cfg.hours} hours failed to solve: {examples}")
    good = [r for r in records if r.solver_status == STATUS_OPTIMAL]

    kept = np.array([r.hour for r in good], dtype=int)
    _write_csv(out / "loads.csv", [str(i) for i in range(graph.node_count)],
               loads.values[kept])
    _write_csv(out / "lambda.csv", ["lambda"], np.array([[r.lam] for r in good]))
    _write_csv(out / "mu.csv", [f"mu_{k}" for k in limits.line_indices],
               np.array([r.mu for r in good]).reshape(len(good), limits.count))
    _write_csv(out / "s.csv", ["s"], np.array([[float(r.s)] for r in good]))
    _write_csv(out / "lmp.csv", [str(i) for i in range(graph.node_count)],
               np.array([r.lmp for r in good]))

    h_kept = len(good)
    train_end = int(math.floor(h_kept * cfg.train_fraction))
    split = {"train": [0, train_end], "test": [train_end, h_kept]}
    (out / "split.json").write_text(json.dumps(split, indent=2, sort_keys=True) + "\n")

    genconfig = {
        "hours": cfg.hours,
        "seed": cfg.seed,
        "alpha": cfg.alpha,
        "concentration": cfg.concentration,
        "congested_count": cfg.congested_count,
        "limit_fraction": cfg.limit_fraction,
        "congestion_sample": cfg.congestion_sample,
        "train_fraction": cfg.train_fraction,
        "bid_noise": cfg.bid_noise,
        "source_mode": cfg.source_mode,
        "source": asdict(cfg.source),
        "node_count": graph.node_count,
        "monitored_lines": [
            {"line": int(k),
             "from": graph.edges[k].from_node,
             "to": graph.edges[k].to_node,
             "limit_mw": float(lim)}
            for k, lim in zip(limits.line_indices, limits.limits_mw)],
        "failed_hours": [
            {"hour": r.hour, "status": r.solver_status, "detail": r.diagnostics}
            for r in failed],
    }
    (out / "genconfig.json").write_text(
        json.dumps(genconfig, indent=2, sort_keys=True) + "\n")
    return out


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _write_csv(path: Path, header: list[str], rows: np.ndarray) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class Dataset:
    loads: np.ndarray        # (H, N)
    lam: np.ndarray          # (H,)
    mu: np.ndarray           # (H, m)
    s: np.ndarray            # (H,) in {0, 1}
    lmp: np.ndarray          # (H, N)
    split: dict
    genconfig: dict

    @property
    def hours(self) -> int:
        return self.loads.shape[0]

    @property
    def node_count(self) -> int:
        return self.loads.shape[1]

    def range_of(self, part: str) -> tuple[int, int]:
        lo, hi = self.split[part]
        return int(lo), int(hi)


def _read_csv(path: Path) -> np.ndarray:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    if len(lines) <= 1:
        return np.zeros((max(len(lines) - 1, 0), 0))
    header = lines[0].split(",")
    width = 0 if header == [""] else len(header)
    if width == 0:
        return np.zeros((len(lines) - 1, 0))
    return np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])


def load_dataset(path) -> Dataset:
    root = Path(path)
    for name in ("loads.csv", "lambda.csv", "s.csv", "lmp.csv", "split.json",
                 "genconfig.json"):
        if not (root / name).exists():
            raise DatasetError(f"{root}: missing {name}")
    loads = _read_csv(root / "loads.csv")
    lam = _read_csv(root / "lambda.csv")[:, 0]
    s = _read_csv(root / "s.csv")[:, 0]
    lmp = _read_csv(root / "lmp.csv")
    h = loads.shape[0]
    mu_path = root / "mu.csv"
    mu = _read_csv(mu_path) if mu_path.exists() else np.zeros((h, 0))
    if mu.shape[1] == 0:
        mu = np.zeros((h, 0))  # a zero-column file carries no row structure
    split = json.loads((root / "split.json").read_text())
    genconfig = json.loads((root / "genconfig.json").read_text())
    if not (lam.size == s.size == lmp.shape[0] == mu.shape[0] == h):
        raise DatasetError(f"{root}: series lengths disagree")
    return Dataset(loads, lam, mu, s, lmp, split, genconfig)
