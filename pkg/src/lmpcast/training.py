"""Branch losses, Adam, the epoch loop, and checkpoint plumbing.

Per batch (first axis is always the batch):

    energy  = mean over samples of |d|_1 +   |d|_2,  d = lambda output - target
    congest = mean over samples of |d|_1 + 2*|d|_2,  d = summed mu output - target
    status  = softmax cross-entropy of the s logits
    total   = 1*energy + 10*congest + 100*status

Targets per window ending at hour t: the system price lambda_t standardized
by its train-split mean/std (the graph variants are supervised on their
composed estimate, the mean of the per-node lambda outputs; composition
applies the inverse transform), the nodal congestion component
lmp_t - lambda_t, and the hourly flag s_t (replicated across nodes for the
graph variants; the 2-norm is the Euclidean norm of each sample's flattened
residual, not a mean square).

All randomness derives from the run seed: parameter i (sorted name order) is
initialized from stream [seed, 6, i]; epoch e is shuffled by [seed, 5, e].
Training is therefore byte-deterministic for fixed inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (Tape, Tensor, add, cross_entropy, l1_norm, l2_norm,
                       mean, reduce_sum, scale)
from .grid import SpectralBasis
from .market import Dataset
from .model import (ModelSpec, compose_lmp, load_checkpoint, manifest_from_spec,
                    model_forward, parameter_shapes, save_checkpoint,
                    spec_from_manifest)
from .evaluation import MetricReport, compute_metrics


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 32
    k_order: int = 3
    t_hist: int = 24
    seed: int = 0
    weight_energy: float = 1.0
    weight_congest: float = 10.0
    weight_status: float = 100.0
    stride: int = 1            # spacing between window end hours
    channels: int = 128
    mu_width: int = 16
    hidden_layers: int = 10
    eval_batch: int = 256

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "k_order", "t_hist",
                     "stride", "channels", "mu_width", "hidden_layers",
                     "eval_batch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        return (self.weight_energy, self.weight_congest, self.weight_status)


def xavier_init(fan_in: int, fan_out: int, seed) -> np.ndarray:
    """Uniform samples in +-sqrt(6)/sqrt(fan_in + fan_out)."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fans must be >= 1")
    bound = math.sqrt(6.0) / math.sqrt(fan_in + fan_out)
    return np.random.default_rng(seed).uniform(-bound, bound, (fan_in, fan_out))


def init_params(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """Xavier weights, zero biases; stream [seed, 6, i] per sorted name."""
    params = {}
    for i, name in enumerate(sorted(parameter_shapes(spec))):
        shape = parameter_shapes(spec)[name]
        if name.rsplit(".", 1)[-1].startswith("b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = xavier_init(shape[0], shape[1], [seed, 6, i])
    return params


def _norm_loss(pred: Tensor, gt: np.ndarray, two_weight: float) -> Tensor:
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"loss shapes differ: pred {pred.shape} vs gt {gt.shape}")
    delta = add(pred, -gt)
    if delta.data.ndim <= 1:
        return add(l1_norm(delta), scale(l2_norm(delta), two_weight))
    axes = tuple(range(1, delta.data.ndim))
    per_sample = add(l1_norm(delta, axes=axes),
                     scale(l2_norm(delta, axes=axes), two_weight))
    return mean(per_sample)


def loss_energy(pred: Tensor, gt) -> Tensor:
    return _norm_loss(pred, gt, 1.0)


def loss_congest(pred: Tensor, gt) -> Tensor:
    return _norm_loss(pred, gt, 2.0)


def loss_status(logits: Tensor, s_gt) -> Tensor:
    s = np.asarray(s_gt, dtype=np.int64)
    want = logits.shape[:-1]
    if s.shape != want:
        s = np.broadcast_to(s.reshape(s.shape + (1,) * (len(want) - s.ndim)), want)
    return cross_entropy(logits, s)


def loss_total(e: Tensor, c: Tensor, s: Tensor,
               weights: tuple[float, float, float] = (1.0, 10.0, 100.0)) -> Tensor:
    return add(scale(e, weights[0]), add(scale(c, weights[1]), scale(s, weights[2])))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class WindowSet:
    """Input windows plus per-window targets; x is already standardized."""
    x: np.ndarray      # (M, N, T) graph variants, (M, T) per-node mlp
    lam: np.ndarray    # (M,) system price
    cong: np.ndarray   # (M, N) or (M, 1) nodal congestion component
    s: np.ndarray      # (M,) 0/1 flag
    lmp: np.ndarray    # (M, N) or (M, 1) ground-truth prices
    hours: np.ndarray  # (M,) absolute target hour


def norm_stats(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-node load mean/std over the training split, std floored at 1e-6."""
    lo, hi = dataset.range_of("train")
    rows = dataset.loads[lo:hi]
    if rows.shape[0] == 0:
        raise TrainingError("training split is empty")
    return rows.mean(axis=0), np.maximum(rows.std(axis=0), 1e-6)


def lam_stats(dataset: Dataset) -> tuple[float, float]:
    """Train-split mean/std of the system price, std floored at 1e-6.

    The energy branch regresses the standardized price: raw prices sit tens
    of dollars from the zero-initialized outputs, and under the robust loss
    Adam closes that gap at roughly the learning rate per step, wasting
    thousands of steps on a constant offset.
    """
    lo, hi = dataset.range_of("train")
    rows = dataset.lam[lo:hi]
    if rows.shape[0] == 0:
        raise TrainingError("training split is empty")
    return float(rows.mean()), float(max(rows.std(), 1e-6))


def build_windows(dataset: Dataset, t_hist: int, part: str, stride: int,
                  mean_: np.ndarray, std: np.ndarray,
                  node: int | None = None) -> WindowSet:
    """Windows of ``t_hist`` hours of loads ending just before the target hour."""
    lo, hi = dataset.range_of(part)
    targets = np.arange(max(lo, t_hist), hi, stride)
    if targets.size == 0:
        raise TrainingError(
            f"no {part} windows: split [{lo},{hi}) cannot fit history {t_hist}")
    loads_std = (dataset.loads - mean_) / std
    x = np.stack([loads_std[t - t_hist:t].T for t in targets])
    lam = dataset.lam[targets]
    cong = dataset.lmp[targets] - lam[:, None]
    s = dataset.s[targets].astype(np.int64)
    lmp = dataset.lmp[targets]
    if node is not None:
        if not 0 <= node < dataset.node_count:
            raise TrainingError(f"node {node} outside [0, {dataset.node_count})")
        x = x[:, node, :]
        cong = cong[:, node:node + 1]
        lmp = lmp[:, node:node + 1]
    return WindowSet(x, lam, cong, s, lmp, targets)


def batch_losses(out: dict[str, Tensor], wins: WindowSet, idx: np.ndarray,
                 graph_variant: bool, lam_center: float = 0.0,
                 lam_scale: float = 1.0) -> tuple[Tensor, Tensor, Tensor]:
    """(energy, congest, status) losses for the windows selected by ``idx``.

    The energy branch is scored in standardized price units: the target is
    (lambda - lam_center) / lam_scale and the model output is interpreted on
    that scale (composition applies the inverse transform).
    """
    lam = (wins.lam[idx] - lam_center) / lam_scale
    if graph_variant:
        # the energy price is system-wide; supervise the composed estimate
        # (mean over nodes) rather than forcing every node to recover a
        # global quantity from its local neighborhood
        n = wins.lmp.shape[1]
        lam_hat = scale(reduce_sum(out["lam"], axis=1), 1.0 / n)
        mu_hat = reduce_sum(out["mu"], axis=-1)
        cong_target = wins.cong[idx]
    else:
        lam_hat = out["lam"]
        mu_hat = reduce_sum(out["mu"], axis=-1, keepdims=True)
        cong_target = wins.cong[idx]
    return (loss_energy(lam_hat, lam[:, None]),
            loss_congest(mu_hat, cong_target),
            loss_status(out["s"], wins.s[idx]))


def predict_composed(params: dict[str, np.ndarray], spec: ModelSpec,
                     basis: SpectralBasis | None, x: np.ndarray,
                     eval_batch: int = 256, lam_center: float = 0.0,
                     lam_scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Composed (LMP, flag) predictions, batched to bound memory; no gradients.

    ``lam_center``/``lam_scale`` undo the energy branch's standardized price
    units; pass the values stored with the checkpoint the params came from.
    """
    lmps, flags = [], []
    for start in range(0, x.shape[0], eval_batch):
        tape = Tape()
        leaves = {k: tape.constant(v) for k, v in params.items()}
        out = model_forward(tape.constant(x[start:start + eval_batch]),
                            leaves, spec, basis)
        lam_o, s_o, mu_o = out["lam"].data, out["s"].data, out["mu"].data
        if spec.kind == "mlp":
            lam_o, s_o, mu_o = (a[:, None, :] for a in (lam_o, s_o, mu_o))
        lmp, s_hat = compose_lmp(lam_o * lam_scale + lam_center, s_o, mu_o)
        lmps.append(lmp)
        flags.append(s_hat)
    return np.concatenate(lmps), np.concatenate(flags)


@dataclass(frozen=True)
class TrainResult:
    best_path: Path
    final_path: Path
    history_path: Path
    best_epoch: int
    best_rmse: float
    history: list[dict] = field(repr=False)


_HISTORY_COLS = ("epoch", "loss_energy", "loss_congest", "loss_status",
                 "loss_total", "test_mae", "test_rmse", "test_mape",
                 "test_s_accuracy")


def _param_norm_report(params: dict[str, np.ndarray], top: int = 5) -> str:
    norms = sorted(((float(np.abs(p).max()), k) for k, p in params.items()),
                   reverse=True)
    return ", ".join(f"{k}={v:.3e}" for v, k in norms[:top])


def train(dataset: Dataset, cfg: TrainConfig, kind: str, out_dir,
          basis: SpectralBasis | None = None, node: int | None = None,
          log=None) -> TrainResult:
    """Full training run; writes best.ckpt, final.ckpt, history.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_hist = 1 if kind == "gcn" else cfg.t_hist
    if kind == "mlp" and node is None:
        raise TrainingError("mlp is a per-node model: a node index is required")
    spec = ModelSpec(kind=kind, node_count=dataset.node_count, t_hist=t_hist,
                     k_order=cfg.k_order, channels=cfg.channels,
                     mu_width=cfg.mu_width, hidden_layers=cfg.hidden_layers,
                     node=node if kind == "mlp" else None)
    if spec.kind != "mlp" and basis is None:
        raise TrainingError(f"{kind} training needs the grid's spectral basis")

    mean_, std = norm_stats(dataset)
    lam_center, lam_scale = lam_stats(dataset)
    mlp_node = node if kind == "mlp" else None
    wins = build_windows(dataset, t_hist, "train", cfg.stride, mean_, std, mlp_node)
    test = build_windows(dataset, t_hist, "test", cfg.stride, mean_, std, mlp_node)
    graph_variant = kind != "mlp"

    params = init_params(spec, cfg.seed)
    adam = init_adam(params)
    best = {k: v.copy() for k, v in params.items()}
    best_epoch, best_rmse = -1, math.inf
    history: list[dict] = []

    m = wins.x.shape[0]
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng([cfg.seed, 5, epoch]).permutation(m)
        sums = np.zeros(4)
        for start in range(0, m, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            tape = Tape()
            leaves = {k: tape.param(v) for k, v in params.items()}
            out_t = model_forward(tape.constant(wins.x[idx]), leaves, spec, basis)
            e, c, s = batch_losses(out_t, wins, idx, graph_variant,
                                   lam_center, lam_scale)
            total = loss_total(e, c, s, cfg.loss_weights)
            values = np.array([e.data, c.data, s.data, total.data], dtype=float)
            if not np.all(np.isfinite(values)):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {start // cfg.batch_size}: "
                    f"energy={values[0]:.6g} congest={values[1]:.6g} "
                    f"status={values[2]:.6g}; target hours {wins.hours[idx][:8]}; "
                    f"largest params: {_param_norm_report(params)}")
            grads = tape.backward(total)
            adam_step(params, {k: grads.of(t) for k, t in leaves.items()},
                      adam, cfg.learning_rate)
            sums += values * idx.size
        avg = sums / m

        pred, s_hat = predict_composed(params, spec, basis, test.x,
                                       cfg.eval_batch, lam_center, lam_scale)
        report = compute_metrics(pred, test.lmp, s_hat, test.s)
        history.append({"epoch": epoch,
                        "loss_energy": avg[0], "loss_congest": avg[1],
                        "loss_status": avg[2], "loss_total": avg[3],
                        "test_mae": report.mae, "test_rmse": report.rmse,
                        "test_mape": report.mape,
                        "test_s_accuracy": report.s_accuracy})
        if report.rmse < best_rmse:
            best_rmse, best_epoch = report.rmse, epoch
            best = {k: v.copy() for k, v in params.items()}
        if log is not None:
            log(f"epoch {epoch:3d}  total {avg[3]:10.4f}  "
                f"test rmse {report.rmse:8.4f}  mape {report.mape:6.2f}%  "
                f"s-acc {report.s_accuracy:6.2f}%")

    history_path = out / "history.csv"
    with open(history_path, "w") as fh:
        fh.write(",".join(_HISTORY_COLS) + "\n")
        for row in history:
            fh.write(",".join(_fmt_cell(row[c]) for c in _HISTORY_COLS) + "\n")

    # checkpoints stay relocatable and run-deterministic: no local paths or
    # wall-clock values in here (provenance lives in the run manifest)
    common = dict(seed=cfg.seed, learning_rate=cfg.learning_rate,
                  epochs=cfg.epochs, batch_size=cfg.batch_size,
                  stride=cfg.stride, loss_weights=list(cfg.loss_weights),
                  best_epoch=best_epoch,
                  best_test_rmse=None if math.isinf(best_rmse) else best_rmse,
                  lam_center=lam_center, lam_scale=lam_scale)
    best_path = out / "best.ckpt"
    final_path = out / "final.ckpt"
    save_model_checkpoint(best_path, spec, best, mean_, std, basis,
                          dict(common, role="best"))
    save_model_checkpoint(final_path, spec, params, mean_, std, basis,
                          dict(common, role="final"))
    return TrainResult(best_path, final_path, history_path, best_epoch,
                       best_rmse, history)


def _fmt_cell(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.17g}"


def save_model_checkpoint(path, spec: ModelSpec, params: dict[str, np.ndarray],
                          mean_: np.ndarray, std: np.ndarray,
                          basis: SpectralBasis | None, extra: dict) -> None:
    arrays = {f"param.{k}": v for k, v in params.items()}
    arrays["norm.mean"] = mean_
    arrays["norm.std"] = std
    if basis is not None:
        arrays["basis.laplacian"] = basis.laplacian
        for k, poly in enumerate(basis.cheb_polys):
            arrays[f"basis.cheb{k}"] = poly
    manifest = dict(manifest_from_spec(spec), **extra)
    if basis is not None:
        manifest["lambda_max"] = basis.lambda_max
    save_checkpoint(path, manifest, arrays)


@dataclass(frozen=True)
class LoadedModel:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    basis: SpectralBasis | None
    manifest: dict

    @property
    def lam_center(self) -> float:
        return float(self.manifest.get("lam_center", 0.0))

    @property
    def lam_scale(self) -> float:
        return float(self.manifest.get("lam_scale", 1.0))

    def predict(self, x: np.ndarray,
                eval_batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Composed (LMP, flag) predictions in physical price units."""
        return predict_composed(self.params, self.spec, self.basis, x,
                                eval_batch, self.lam_center, self.lam_scale)


def load_model_checkpoint(path) -> LoadedModel:
    manifest, arrays = load_checkpoint(path)
    spec = spec_from_manifest(manifest)
    params = {k[len("param."):]: v for k, v in arrays.items()
              if k.startswith("param.")}
    missing = set(parameter_shapes(spec)) - set(params)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks parameters {sorted(missing)[:4]}")
    basis = None
    if "basis.laplacian" in arrays:
        polys = tuple(arrays[f"basis.cheb{k}"] for k in range(spec.k_order))
        lam_max = float(manifest["lambda_max"])
        basis = SpectralBasis(arrays["basis.laplacian"], lam_max,
                              polys[min(1, len(polys) - 1)], polys)
    return LoadedModel(spec, params, arrays["norm.mean"], arrays["norm.std"],
                       basis, manifest)
