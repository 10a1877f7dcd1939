"""Forecaster variants over hourly load windows.

Three architectures share the three-branch layout (lambda / s / mu heads with
output widths 1 / 2 / 16):

  astgcn  attention masks over time and nodes, then two spatial-temporal
          convolution blocks, then a per-node dense projection
  gcn     the same convolution stack on the latest hour only (T = 1),
          no attention
  mlp     a per-node dense stack over that node's own history

Graph variants consume windows shaped (..., N, T) -- node-major, any number of
leading batch axes. The mlp consumes (..., T) for a single node. All forward
functions return a dict of branch outputs {"lam": (..., N, 1), "s": (..., N, 2),
"mu": (..., N, 16)} as tape Tensors, so losses can backpropagate into the
parameter dict.

Checkpoints are a single binary file: magic, a length-prefixed JSON manifest
(sorted keys), then named little-endian float64 arrays in sorted name order.
No timestamps anywhere, so identical contents give identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import (Tape, Tensor, add, conv1d_time, matmul, relu, reshape,
                       row_softmax, sigmoid, transpose)
from .grid import SpectralBasis

VARIANTS = ("astgcn", "gcn", "mlp")
BRANCHES = ("lam", "s", "mu")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    node_count: int
    t_hist: int
    k_order: int = 3
    channels: int = 128
    mu_width: int = 16
    hidden_layers: int = 10   # mlp trunk depth
    node: int | None = None   # mlp: which node this instance forecasts

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown model kind {self.kind!r} (expected {VARIANTS})")
        if self.kind == "gcn" and self.t_hist != 1:
            raise ValueError("gcn takes only the latest loads; t_hist must be 1")
        for name in ("node_count", "t_hist", "k_order", "channels", "mu_width",
                     "hidden_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def branch_widths(self) -> dict[str, int]:
        return {"lam": 1, "s": 2, "mu": self.mu_width}


def parameter_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map for every trainable tensor of a variant."""
    n, t, c = spec.node_count, spec.t_hist, spec.channels
    shapes: dict[str, tuple[int, ...]] = {}
    if spec.kind == "mlp":
        shapes["trunk.w0"] = (t, c)
        shapes["trunk.b0"] = (1, c)
        for i in range(1, spec.hidden_layers):
            shapes[f"trunk.w{i}"] = (c, c)
            shapes[f"trunk.b{i}"] = (1, c)
        for b, q in spec.branch_widths.items():
            shapes[f"head.{b}.w"] = (c, q)
            shapes[f"head.{b}.b"] = (1, q)
        return shapes
    for b, q in spec.branch_widths.items():
        if spec.kind == "astgcn":
            shapes[f"{b}.att.u1"] = (n, 1)
            shapes[f"{b}.att.u2"] = (n, 1)
            shapes[f"{b}.att.ve"] = (t, t)
            shapes[f"{b}.att.be"] = (t, t)
            shapes[f"{b}.att.w1"] = (t, 1)
            shapes[f"{b}.att.w2"] = (t, 1)
            shapes[f"{b}.att.vs"] = (n, n)
            shapes[f"{b}.att.bs"] = (n, n)
        for blk, c_in in (("st1", 1), ("st2", c)):
            for k in range(spec.k_order):
                shapes[f"{b}.{blk}.theta{k}"] = (c_in, c)
            shapes[f"{b}.{blk}.phi"] = (3, c)
        shapes[f"{b}.fc.w"] = (t * c, q)
        # per-node bias: price deviations carry a large node-specific constant
        # that zero-mean standardized inputs cannot otherwise produce
        shapes[f"{b}.fc.b"] = (n, q)
    return shapes


def _swap_last(x: Tensor) -> Tensor:
    nd = x.data.ndim
    return transpose(x, (*range(nd - 2), nd - 1, nd - 2))


def _swap_node_time(x: Tensor) -> Tensor:
    nd = x.data.ndim
    return transpose(x, (*range(nd - 3), nd - 2, nd - 3, nd - 1))


def temporal_attention(chi: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Row-stochastic T x T mask from a (..., N, T) window."""
    left = matmul(_swap_last(chi), p["att.u1"])          # (..., T, 1)
    right = matmul(_swap_last(p["att.u2"]), chi)         # (..., 1, T)
    scores = matmul(p["att.ve"], sigmoid(add(matmul(left, right), p["att.be"])))
    return row_softmax(scores)


def spatial_attention(chi: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Row-stochastic N x N mask; row i weighs every node's influence on i."""
    left = matmul(chi, p["att.w1"])                      # (..., N, 1)
    right = matmul(_swap_last(p["att.w2"]), _swap_last(chi))   # (..., 1, N)
    scores = matmul(p["att.vs"], sigmoid(add(matmul(left, right), p["att.bs"])))
    return row_softmax(scores)


def apply_attention(chi: Tensor, e_mask: Tensor, s_mask: Tensor) -> Tensor:
    """Re-weight the window along time first, then across nodes."""
    mixed = matmul(chi, _swap_last(e_mask))
    return matmul(s_mask, mixed)


def graph_conv(x: Tensor, thetas: list[Tensor], cheb_polys) -> Tensor:
    """ReLU(sum_k T_k(L~) x theta_k) over (..., N, T, C_in) -> (..., N, T, C_out)."""
    if len(thetas) != len(cheb_polys):
        raise ValueError(f"{len(thetas)} channel maps for {len(cheb_polys)} "
                         "Chebyshev terms")
    xt = _swap_node_time(x)                              # (..., T, N, C_in)
    acc = None
    for theta_k, t_k in zip(thetas, cheb_polys):
        term = matmul(matmul(np.asarray(t_k), xt), theta_k)
        acc = term if acc is None else add(acc, term)
    return _swap_node_time(relu(acc))


def st_conv_block(x: Tensor, thetas: list[Tensor], phi: Tensor, cheb_polys) -> Tensor:
    """Graph conv, then a width-3 temporal conv per channel, then ReLU."""
    y = graph_conv(x, thetas, cheb_polys)
    y = conv1d_time(y, phi, axis=-2)
    return relu(y)


def _branch_params(params: dict[str, Tensor], branch: str) -> dict[str, Tensor]:
    prefix = branch + "."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def branch_forward(chi: Tensor, p: dict[str, Tensor], q: int, spec: ModelSpec,
                   basis: SpectralBasis, use_attention: bool) -> Tensor:
    """One branch: (optional) attention, two conv blocks, dense head -> (..., N, q)."""
    if chi.shape[-2:] != (spec.node_count, spec.t_hist):
        raise ValueError(f"window shape {chi.shape} does not end in "
                         f"({spec.node_count}, {spec.t_hist})")
    if use_attention:
        e_mask = temporal_attention(chi, p)
        s_mask = spatial_attention(chi, p)
        chi = apply_attention(chi, e_mask, s_mask)
    x = reshape(chi, (*chi.shape, 1))
    polys = basis.cheb_polys[:spec.k_order]
    for blk in ("st1", "st2"):
        thetas = [p[f"{blk}.theta{k}"] for k in range(spec.k_order)]
        x = st_conv_block(x, thetas, p[f"{blk}.phi"], polys)
    flat = reshape(x, (*x.shape[:-2], spec.t_hist * spec.channels))
    return add(matmul(flat, p["fc.w"]), p["fc.b"])


def astgcn_forward(chi: Tensor, params: dict[str, Tensor], spec: ModelSpec,
                   basis: SpectralBasis) -> dict[str, Tensor]:
    return {b: branch_forward(chi, _branch_params(params, b), q, spec, basis,
                              use_attention=True)
            for b, q in spec.branch_widths.items()}


def gcn_forward(latest: Tensor, params: dict[str, Tensor], spec: ModelSpec,
                basis: SpectralBasis) -> dict[str, Tensor]:
    """Same stack as astgcn on a (..., N, 1) window, attention disabled."""
    return {b: branch_forward(latest, _branch_params(params, b), q, spec, basis,
                              use_attention=False)
            for b, q in spec.branch_widths.items()}


def mlp_forward(history: Tensor, params: dict[str, Tensor],
                spec: ModelSpec) -> dict[str, Tensor]:
    """Per-node dense stack over (..., T); heads of width 1 / 2 / 16."""
    single = history.data.ndim == 1
    h = reshape(history, (1, spec.t_hist)) if single else history
    if h.shape[-1] != spec.t_hist:
        raise ValueError(f"history shape {history.shape} does not end in "
                         f"{spec.t_hist}")
    for i in range(spec.hidden_layers):
        h = relu(add(matmul(h, params[f"trunk.w{i}"]), params[f"trunk.b{i}"]))
    out = {b: add(matmul(h, params[f"head.{b}.w"]), params[f"head.{b}.b"])
           for b in BRANCHES}
    if single:
        return {b: reshape(t, (t.shape[-1],)) for b, t in out.items()}
    return out


def model_forward(window: Tensor, params: dict[str, Tensor], spec: ModelSpec,
                  basis: SpectralBasis | None = None) -> dict[str, Tensor]:
    """Dispatch on the variant kind; graph variants require a spectral basis."""
    if spec.kind == "mlp":
        return mlp_forward(window, params, spec)
    if basis is None:
        raise ValueError(f"{spec.kind} forward needs a spectral basis")
    if spec.kind == "astgcn":
        return astgcn_forward(window, params, spec, basis)
    return gcn_forward(window, params, spec, basis)


def attention_masks(window: np.ndarray, params_np: dict[str, np.ndarray],
                    spec: ModelSpec) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-branch (temporal T x T, spatial N x N) masks for one input window."""
    if spec.kind != "astgcn":
        raise ValueError(f"{spec.kind} model has no attention parameters")
    tape = Tape()
    chi = tape.constant(np.asarray(window, dtype=np.float64))
    out = {}
    for b in BRANCHES:
        p = {k: tape.constant(v) for k, v in
             _branch_params(params_np, b).items()}
        out[b] = (temporal_attention(chi, p).data.copy(),
                  spatial_attention(chi, p).data.copy())
    return out


def compose_lmp(lambda_out: np.ndarray, s_logits: np.ndarray,
                mu_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Combine branch outputs into (LMP per node, congestion flag).

    The energy price is system-wide, so the lambda branch's per-node outputs
    are averaged; the flag is the mean class-1 probability thresholded at 0.5;
    the congestion component enters only when the flag is on.
    """
    lambda_out = np.asarray(lambda_out, dtype=np.float64)
    s_logits = np.asarray(s_logits, dtype=np.float64)
    mu_out = np.asarray(mu_out, dtype=np.float64)
    lam_hat = lambda_out[..., 0].mean(axis=-1)
    z = s_logits - s_logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p1 = (e[..., 1] / e.sum(axis=-1)).mean(axis=-1)
    s_hat = (p1 > 0.5).astype(np.int64)
    mu_hat = mu_out.sum(axis=-1)
    lmp = lam_hat[..., None] + s_hat[..., None] * mu_hat
    return lmp, s_hat


_MAGIC = b"LMPCKPT1"


def save_checkpoint(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    """Manifest JSON + named float64 arrays, bytes fully determined by content."""
    payload = [_MAGIC]
    blob = json.dumps(manifest, sort_keys=True).encode()
    payload.append(struct.pack("<I", len(blob)))
    payload.append(blob)
    payload.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode()
        payload.append(struct.pack("<H", len(nb)))
        payload.append(nb)
        payload.append(struct.pack("<B", arr.ndim))
        payload.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        payload.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(payload))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(_MAGIC)

    def take(n):
        nonlocal off
        chunk = raw[off:off + n]
        if len(chunk) != n:
            raise ValueError(f"{path}: truncated checkpoint")
        off += n
        return chunk

    manifest = json.loads(take(struct.unpack("<I", take(4))[0]).decode())
    arrays = {}
    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}q", take(8 * ndim))
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    return manifest, arrays


def spec_from_manifest(manifest: dict) -> ModelSpec:
    node = manifest.get("node")
    return ModelSpec(kind=manifest["kind"], node_count=int(manifest["node_count"]),
                     t_hist=int(manifest["t_hist"]), k_order=int(manifest["k_order"]),
                     channels=int(manifest["channels"]),
                     mu_width=int(manifest["mu_width"]),
                     hidden_layers=int(manifest["hidden_layers"]),
                     node=None if node is None else int(node))


def manifest_from_spec(spec: ModelSpec) -> dict:
    return {"kind": spec.kind, "node_count": spec.node_count, "t_hist": spec.t_hist,
            "k_order": spec.k_order, "channels": spec.channels,
            "mu_width": spec.mu_width, "hidden_layers": spec.hidden_layers,
            "node": spec.node}
