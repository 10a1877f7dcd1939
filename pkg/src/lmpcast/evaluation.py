"""Forecast quality metrics, per-node comparison tables, and artifact emission.

Every plot-producing function writes a CSV with the exact plotted values next
to the SVG; the SVG is presentation-only. SVGs are rendered with a fixed hash
salt and no date metadata so repeated runs produce identical bytes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAPE_FLOOR = 0.01  # $/MWh; node-hours with |ground truth| below this are excluded


@dataclass(frozen=True)
class MetricReport:
    mae: float
    rmse: float
    mape: float           # percent
    s_accuracy: float     # percent
    per_node: np.ndarray  # (N, 2): columns MAE, RMSE
    mape_excluded: int    # node-hours dropped by the |gt| floor

    @property
    def node_count(self) -> int:
        return self.per_node.shape[0]


def compute_metrics(pred: np.ndarray, gt: np.ndarray, s_pred: np.ndarray,
                    s_gt: np.ndarray) -> MetricReport:
    """MAE / RMSE / MAPE over all node-hours plus congestion-flag accuracy."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    s_pred = np.asarray(s_pred)
    s_gt = np.asarray(s_gt)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"pred {pred.shape} vs gt {gt.shape}: need matching H x N")
    if pred.size == 0:
        raise ValueError("empty prediction matrix")
    if s_pred.shape != (pred.shape[0],) or s_gt.shape != (pred.shape[0],):
        raise ValueError("congestion flags must have one entry per hour")
    delta = pred - gt
    mae = float(np.abs(delta).mean())
    rmse = float(np.sqrt((delta ** 2).mean()))
    keep = np.abs(gt) >= MAPE_FLOOR
    excluded = int((~keep).sum())
    if not keep.any():
        raise ValueError("every ground-truth price is below the MAPE floor")
    mape = float((np.abs(delta[keep] / gt[keep])).mean() * 100.0)
    s_acc = float((s_pred == s_gt).mean() * 100.0)
    per_node = np.column_stack([np.abs(delta).mean(axis=0),
                                np.sqrt((delta ** 2).mean(axis=0))])
    return MetricReport(mae, rmse, mape, s_acc, per_node, excluded)


def per_node_table(pred_a: np.ndarray, pred_b: np.ndarray, gt: np.ndarray,
                   node_ids) -> list[dict]:
    """Per-node MAE/RMSE of models a and b plus improvement 100*(b-a)/b.

    Positive improvement means a beats the baseline b at that node.
    """
    pred_a, pred_b, gt = (np.asarray(x, dtype=np.float64)
                          for x in (pred_a, pred_b, gt))
    if not (pred_a.shape == pred_b.shape == gt.shape):
        raise ValueError("model outputs and ground truth must share a shape")
    rows = []
    for node in node_ids:
        node = int(node)
        if not 0 <= node < gt.shape[1]:
            raise ValueError(f"node {node} outside [0, {gt.shape[1]})")
        da, db = pred_a[:, node] - gt[:, node], pred_b[:, node] - gt[:, node]
        mae_a, mae_b = float(np.abs(da).mean()), float(np.abs(db).mean())
        rmse_a = float(np.sqrt((da ** 2).mean()))
        rmse_b = float(np.sqrt((db ** 2).mean()))
        rows.append({
            "node": node,
            "mae_a": mae_a, "mae_b": mae_b,
            "mae_improve_pct": _improvement(mae_a, mae_b),
            "rmse_a": rmse_a, "rmse_b": rmse_b,
            "rmse_improve_pct": _improvement(rmse_a, rmse_b),
        })
    return rows


def _improvement(a: float, b: float) -> float:
    return float("nan") if b == 0.0 else 100.0 * (b - a) / b


def write_table_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path


def _write_matrix_csv(path: Path, matrix: np.ndarray, col_prefix: str) -> None:
    header = [f"{col_prefix}{j}" for j in range(matrix.shape[1])]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in matrix:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    return np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])


def _new_figure():
    import matplotlib
    matplotlib.use("Agg", force=False)
    matplotlib.rcParams["svg.hashsalt"] = "lmpcast"
    import matplotlib.pyplot as plt
    return plt


def _save_svg(fig, path: Path) -> None:
    # strip the creation date so re-renders are byte-identical
    fig.savefig(path, format="svg", metadata={"Date": None})


def export_attention(temporal_mask: np.ndarray, spatial_mask: np.ndarray,
                     out_dir, prefix: str = "") -> dict[str, Path]:
    """Write both masks as CSV plus SVG heat maps; row order is index order."""
    temporal_mask = np.asarray(temporal_mask, dtype=np.float64)
    spatial_mask = np.asarray(spatial_mask, dtype=np.float64)
    for name, m in (("temporal", temporal_mask), ("spatial", spatial_mask)):
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"{name} mask must be square, got {m.shape}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    plt = _new_figure()
    for name, m, axis_label in (("temporal", temporal_mask, "hour"),
                                ("spatial", spatial_mask, "node")):
        csv_path = out / f"{prefix}{name}_mask.csv"
        _write_matrix_csv(csv_path, m, axis_label)
        fig, ax = plt.subplots(figsize=(5, 4.2))
        im = ax.imshow(m, aspect="auto", origin="upper", cmap="viridis")
        ax.set_xlabel(f"source {axis_label}")
        ax.set_ylabel(f"target {axis_label}")
        fig.colorbar(im, ax=ax, label="attention weight")
        svg_path = out / f"{prefix}{name}_mask.svg"
        _save_svg(fig, svg_path)
        plt.close(fig)
        paths[f"{name}_csv"] = csv_path
        paths[f"{name}_svg"] = svg_path
    return paths


def emit_series_plot(pred: np.ndarray, gt: np.ndarray, node: int,
                     hour_range: tuple[int, int], out_dir,
                     prefix: str = "series") -> dict[str, Path]:
    """Forecast vs ground truth at one node over [start, end) hours."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError("pred and gt must be matching H x N matrices")
    if not 0 <= node < pred.shape[1]:
        raise ValueError(f"node {node} outside [0, {pred.shape[1]})")
    start, end = int(hour_range[0]), int(hour_range[1])
    if not 0 <= start < end <= pred.shape[0]:
        raise ValueError(f"empty or out-of-bounds hour range [{start}, {end})")
    hours = np.arange(start, end)
    p, g = pred[start:end, node], gt[start:end, node]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{prefix}_node{node}.csv"
    with open(csv_path, "w", newline="") as fh:
        fh.write("hour,pred,gt\n")
        for h, a, b in zip(hours, p, g):
            fh.write(f"{h},{a:.17g},{b:.17g}\n")
    plt = _new_figure()
    fig, ax = plt.subplots(figsize=(8, 3.2))
    ax.plot(hours, g, label="ground truth", linewidth=1.0)
    ax.plot(hours, p, label="forecast", linewidth=1.0)
    ax.set_xlabel("hour")
    ax.set_ylabel("LMP ($/MWh)")
    ax.set_title(f"node {node}")
    ax.legend(loc="best")
    svg_path = out / f"{prefix}_node{node}.svg"
    _save_svg(fig, svg_path)
    plt.close(fig)
    return {"csv": csv_path, "svg": svg_path}


def emit_per_node_rmse_plot(report_a: MetricReport, report_b: MetricReport,
                            out_dir, labels: tuple[str, str] = ("a", "b"),
                            prefix: str = "per_node_rmse") -> dict[str, Path]:
    """Paired per-node RMSE comparison of two metric reports."""
    if report_a.node_count != report_b.node_count:
        raise ValueError(f"node-count mismatch: {report_a.node_count} "
                         f"vs {report_b.node_count}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rmse_a, rmse_b = report_a.per_node[:, 1], report_b.per_node[:, 1]
    csv_path = out / f"{prefix}.csv"
    with open(csv_path, "w", newline="") as fh:
        fh.write(f"node,rmse_{labels[0]},rmse_{labels[1]}\n")
        for node, (a, b) in enumerate(zip(rmse_a, rmse_b)):
            fh.write(f"{node},{a:.17g},{b:.17g}\n")
    plt = _new_figure()
    fig, ax = plt.subplots(figsize=(8, 3.2))
    nodes = np.arange(report_a.node_count)
    ax.plot(nodes, rmse_a, label=labels[0], linewidth=1.0)
    ax.plot(nodes, rmse_b, label=labels[1], linewidth=1.0)
    ax.set_xlabel("node")
    ax.set_ylabel("RMSE ($/MWh)")
    ax.legend(loc="best")
    svg_path = out / f"{prefix}.svg"
    _save_svg(fig, svg_path)
    plt.close(fig)
    return {"csv": csv_path, "svg": svg_path}
