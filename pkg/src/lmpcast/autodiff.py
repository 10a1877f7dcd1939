"""Reverse-mode automatic differentiation on dense float64 arrays.

A Tape records operations in creation order (which is already a valid
topological order); ``Tape.backward`` walks the records in reverse and
accumulates vector-Jacobian products. Only the operator set needed by the
forecasting models is provided. Everything is float64: the finite-difference
tolerances used to validate gradients are not reachable in single precision.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

# When enabled, every forward op asserts its output is finite. Cheap enough
# for tests, too slow to leave on during training.
_DEBUG_CHECK_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    global _DEBUG_CHECK_FINITE
    _DEBUG_CHECK_FINITE = bool(enabled)


class ShapeError(ValueError):
    """Operand shapes incompatible for the attempted op."""


class Tensor:
    """Dense float64 array plus its position in a computation tape.

    Tensors are immutable values: ops return new Tensors and never write
    into an input's buffer.
    """

    __slots__ = ("data", "tape", "tid", "requires_grad")

    def __init__(self, data, tape=None, requires_grad=False, tid=-1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
        self.tid = tid

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return elementwise_mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class TapeNode:
    """One recorded op: which tensors fed it and how to push grads back."""

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[int, ...], output: int,
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Computation graph for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._next_id = 0

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def param(self, data) -> Tensor:
        """Leaf tensor whose gradient will be tracked."""
        return Tensor(data, tape=self, requires_grad=True, tid=self._new_id())

    def constant(self, data) -> Tensor:
        """Leaf tensor treated as fixed data (no gradient)."""
        return Tensor(data, tape=self, requires_grad=False, tid=self._new_id())

    def _record(self, op, out_data, inputs, backward) -> Tensor:
        if _DEBUG_CHECK_FINITE and not np.all(np.isfinite(out_data)):
            raise FloatingPointError(f"non-finite output of op '{op}'")
        out = Tensor(out_data, tape=self, requires_grad=True, tid=self._new_id())
        self.nodes.append(TapeNode(op, tuple(t.tid for t in inputs), out.tid, backward))
        return out

    def backward(self, loss: Tensor) -> "Gradients":
        """Reverse sweep from a scalar loss; returns gradients per tensor."""
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        if loss.tape is not self:
            raise ValueError("backward: loss does not belong to this tape")
        grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            gout = grads.pop(node.output, None)
            if gout is None:
                continue
            for tid, gin in zip(node.inputs, node.backward(gout)):
                if gin is None:
                    continue
                acc = grads.get(tid)
                grads[tid] = gin if acc is None else acc + gin
        return Gradients(grads)


class Gradients:
    def __init__(self, by_id: dict[int, np.ndarray]):
        self._by_id = by_id

    def of(self, t: Tensor) -> np.ndarray:
        """Gradient for ``t``; zeros if the loss never reached it."""
        g = self._by_id.get(t.tid)
        return np.zeros_like(t.data) if g is None else g


def _tape_of(*tensors: Tensor) -> Tape:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = t.tape
    if tape is None:
        raise ValueError("no tape: wrap operands via tape.param/tape.constant")
    return tape


def _as_tensor(x, tape: Tape) -> Tensor:
    return x if isinstance(x, Tensor) else tape.constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b) -> Tensor:
    tape = _tape_of(*(t for t in (a, b) if isinstance(t, Tensor)))
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} + {b.shape}") from None
    if not (a.requires_grad or b.requires_grad):
        return tape.constant(out)
    ash, bsh = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(g, ash) if a.requires_grad else None,
                _unbroadcast(g, bsh) if b.requires_grad else None)

    return tape._record("add", out, (a, b), backward)


def elementwise_mul(a: Tensor, b) -> Tensor:
    tape = _tape_of(*(t for t in (a, b) if isinstance(t, Tensor)))
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"elementwise_mul: shapes {a.shape} * {b.shape}") from None
    if not (a.requires_grad or b.requires_grad):
        return tape.constant(out)
    adata, bdata, ash, bsh = a.data, b.data, a.shape, b.shape

    def backward(g):
        return (_unbroadcast(g * bdata, ash) if a.requires_grad else None,
                _unbroadcast(g * adata, bsh) if b.requires_grad else None)

    return tape._record("elementwise_mul", out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s
    if not a.requires_grad:
        return a.tape.constant(out)
    return a.tape._record("scale", out, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b) -> Tensor:
    tape = _tape_of(*(t for t in (a, b) if isinstance(t, Tensor)))
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data
    if not (a.requires_grad or b.requires_grad):
        return tape.constant(out)
    adata, bdata, ash, bsh = a.data, b.data, a.shape, b.shape

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bdata, -1, -2), ash)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(adata, -1, -2) @ g, bsh)
        return ga, gb

    return tape._record("matmul", out, (a, b), backward)


def sigmoid(a: Tensor) -> Tensor:
    # stable in both tails
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if not a.requires_grad:
        return a.tape.constant(out)
    return a.tape._record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    if not a.requires_grad:
        return a.tape.constant(out)
    mask = a.data > 0.0  # subgradient at 0 is taken as 0
    return a.tape._record("relu", out, (a,), lambda g: (g * mask,))


def row_softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, max-shifted for stability."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    if not a.requires_grad:
        return a.tape.constant(out)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return a.tape._record("row_softmax", out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    if not a.requires_grad:
        return a.tape.constant(out)
    orig = a.shape
    return a.tape._record("reshape", out, (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    if not a.requires_grad:
        return a.tape.constant(out)
    inv = tuple(np.argsort(axes))
    return a.tape._record("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if not a.requires_grad:
        return a.tape.constant(out)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._record("reduce_sum", out, (a,), backward)


def l1_norm(a: Tensor, axes=None) -> Tensor:
    """Sum of absolute values over ``axes`` (default: all elements)."""
    out = np.abs(a.data).sum(axis=axes)
    if not a.requires_grad:
        return a.tape.constant(out)
    sgn = np.sign(a.data)

    def backward(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (g * sgn,)

    return a.tape._record("l1_norm", out, (a,), backward)


def l2_norm(a: Tensor, axes=None) -> Tensor:
    """Euclidean norm over ``axes`` (default: the flattened tensor)."""
    out = np.sqrt((a.data ** 2).sum(axis=axes))
    if not a.requires_grad:
        return a.tape.constant(np.float64(out))
    adata = a.data

    def backward(g):
        safe = np.where(out == 0.0, 1.0, out)  # zero vector gets zero grad
        ratio = g / safe * np.where(out == 0.0, 0.0, 1.0)
        if axes is not None:
            ratio = np.expand_dims(ratio, axes)
        return (ratio * adata,)

    return a.tape._record("l2_norm", np.float64(out) if out.ndim == 0 else out,
                          (a,), backward)


def conv1d_time(a: Tensor, kernel, axis: int = 1) -> Tensor:
    """Depthwise 1-D convolution along ``axis`` with zero same-padding.

    ``kernel`` is (W,) applied to every channel, or (W, C) with one tap set
    per channel on the last axis. W must be odd so output length equals
    input length.
    """
    tape = _tape_of(*(t for t in (a, kernel) if isinstance(t, Tensor)))
    a = _as_tensor(a, tape)
    kernel = _as_tensor(kernel, tape)
    kd = kernel.data
    if kd.ndim not in (1, 2) or kd.shape[0] % 2 == 0:
        raise ShapeError(f"conv1d_time: kernel shape {kd.shape} (want odd W, 1-D or 2-D)")
    if kd.ndim == 2 and kd.shape[1] != a.shape[-1]:
        raise ShapeError(f"conv1d_time: kernel channels {kd.shape[1]} != input channels {a.shape[-1]}")
    width = kd.shape[0]
    pad = width // 2
    ax = axis % a.data.ndim
    T = a.shape[ax]

    def shifted(arr, d):
        # view of arr displaced by d along ax, with the destination slice it fills
        if d >= 0:
            src = tuple(slice(d, T) if i == ax else slice(None) for i in range(arr.ndim))
            dst = tuple(slice(0, T - d) if i == ax else slice(None) for i in range(arr.ndim))
        else:
            src = tuple(slice(0, T + d) if i == ax else slice(None) for i in range(arr.ndim))
            dst = tuple(slice(-d, T) if i == ax else slice(None) for i in range(arr.ndim))
        return src, dst

    out = np.zeros_like(a.data)
    for w in range(width):
        d = w - pad
        src, dst = shifted(a.data, d)
        out[dst] += a.data[src] * kd[w]
    if not (a.requires_grad or kernel.requires_grad):
        return tape.constant(out)
    adata = a.data

    def backward(g):
        ga = gk = None
        if a.requires_grad:
            ga = np.zeros_like(adata)
            for w in range(width):
                d = w - pad
                src, dst = shifted(ga, d)
                ga[src] += g[dst] * kd[w]
        if kernel.requires_grad:
            gk = np.zeros_like(kd)
            for w in range(width):
                d = w - pad
                src, dst = shifted(adata, d)
                prod = g[dst] * adata[src]
                if kd.ndim == 1:
                    gk[w] = prod.sum()
                else:
                    gk[w] = prod.reshape(-1, kd.shape[1]).sum(axis=0)
        return ga, gk

    return tape._record("conv1d_time", out, (a, kernel), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` are integer class ids of shape
    logits.shape[:-1]."""
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, labels[..., None].astype(np.intp), axis=-1)[..., 0]
    losses = logz - picked
    out = np.float64(losses.mean())
    if not logits.requires_grad:
        return logits.tape.constant(out)
    probs = np.exp(shifted - logz[..., None])
    onehot = np.zeros_like(x)
    np.put_along_axis(onehot, labels[..., None].astype(np.intp), 1.0, axis=-1)
    n = max(1, losses.size)

    def backward(g):
        return (float(g) * (probs - onehot) / n,)

    return logits.tape._record("cross_entropy", out, (logits,), backward)


def mean(a: Tensor) -> Tensor:
    return scale(reduce_sum(a), 1.0 / a.data.size)


def gradient_check(build, params: dict[str, np.ndarray], eps: float = 1e-5,
                   max_coords: int = 64, seed: int = 0) -> float:
    """Worst relative error between tape gradients and central differences.

    ``build(tape, leaves)`` constructs a scalar loss Tensor from a dict of
    leaf tensors matching ``params``. Large tensors are spot-checked on
    ``max_coords`` seeded random coordinates.
    """
    tape = Tape()
    leaves = {k: tape.param(v) for k, v in params.items()}
    grads = tape.backward(build(tape, leaves))
    analytic = {k: grads.of(t) for k, t in leaves.items()}

    def value_at(mutated: dict[str, np.ndarray]) -> float:
        t = Tape()
        lv = {k: t.constant(v) for k, v in mutated.items()}
        return build(t, lv).item()

    rng = np.random.default_rng(seed)
    worst = 0.0
    work = {k: v.astype(np.float64).copy() for k, v in params.items()}
    for name, arr in work.items():
        size = arr.size
        coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
        flat = arr.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = value_at(work)
            flat[idx] = orig - eps
            fm = value_at(work)
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[name].reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
            worst = max(worst, err)
    return worst
