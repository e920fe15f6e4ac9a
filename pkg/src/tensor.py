"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op records a node on its output (parents + a closure that
maps the upstream gradient to parent gradients). ``backward`` orders the
recorded nodes into a Tape and walks it once in reverse topological order,
summing gradients into the ``grad`` buffer of every leaf that requires them.
``sgd_step`` applies plain stochastic gradient descent and zeroes the buffers.

Conventions:
  - conv2d is a cross-correlation (no kernel flip), layout N×C×H×W.
  - variances are population (biased) variances.
  - no op mutates the value buffer of its inputs.
"""

from __future__ import annotations

import contextlib
import logging
from collections.abc import Callable, Iterable, Iterator, Sequence
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .config import LOSS_EPS
from .errors import NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward ops without recording anything (inference passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple[Tensor, ...], backward: BackwardFn) -> None:
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """Row-major float64 array plus optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None) -> None:
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError("tensor", "shape", "positive dimensions", arr.shape)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} constructed with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Node | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        record = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = record
        out._node = Node(op, parents, backward) if record else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return elementwise_mul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def as_tensor(value: Tensor | np.ndarray | float) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ─── Tape ───────────────────────────────────────────────────────────────────

class Tape:
    """
    Ordered record of the differentiable ops that produced ``root``.

    ``nodes`` lists every reachable tensor with parents before children, so
    iterating it backwards visits each node exactly once after all of its
    consumers have contributed their gradient.
    """

    def __init__(self, root: Tensor) -> None:
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                self.nodes.append(tensor)
                continue
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            stack.append((tensor, True))
            if tensor._node is not None:
                for parent in reversed(tensor._node.parents):
                    if id(parent) not in seen:
                        stack.append((parent, False))

    def run(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for tensor in reversed(self.nodes):
            grad = grads.pop(id(tensor), None)
            if grad is None:
                continue
            node = tensor._node
            if node is None:
                if tensor.requires_grad:
                    if grad.shape != tensor.shape:
                        raise ShapeError("backward", "grad", tensor.shape, grad.shape)
                    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
                continue
            for parent, parent_grad in zip(node.parents, node.backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
        # consumed
        for tensor in self.nodes:
            tensor._node = None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires a gradient."""
    if loss.data.size != 1:
        raise ShapeError("backward", "loss", "scalar", loss.shape)
    if loss._node is None:
        raise TapeError("backward called on a tensor that was not produced under an active tape")
    Tape(loss).run(np.ones_like(loss.data))


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """p ← p − lr·g for every parameter, then zero the gradient buffers."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    params = list(params)
    for p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in parameter {p.name or p.shape}; step aborted")
    for p in params:
        if p.grad is not None:
            p.data = p.data - lr * p.grad
        p.grad = None


# ─── Elementwise ────────────────────────────────────────────────────────────

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, "broadcast", a.shape, b.shape) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, "add", (a, b), _backward)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product with numpy broadcasting (b is typically a constant mask)."""
    _broadcast_shape("elementwise_mul", a, b)

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, "elementwise_mul", (a, b), _backward)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * positive,)

    return Tensor._from_op(np.where(positive, x.data, 0.0), "relu", (x,), _backward)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, "sigmoid", (x,), _backward)


# ─── Reductions ─────────────────────────────────────────────────────────────

def _axes(x: Tensor, axis: int | tuple[int, ...] | None) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(x.ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % x.ndim for a in axes)


def sum_all(x: Tensor) -> Tensor:
    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum()), "sum", (x,), _backward)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    axes = _axes(x, axis)
    count = int(np.prod([x.shape[a] for a in axes]))

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / count,)

    return Tensor._from_op(x.data.mean(axis=axes), "mean", (x,), _backward)


def var(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    """Population variance (divides by the reduced count)."""
    axes = _axes(x, axis)
    count = int(np.prod([x.shape[a] for a in axes]))
    centered = x.data - x.data.mean(axis=axes, keepdims=True)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (2.0 * centered * np.expand_dims(g, axes) / count,)

    return Tensor._from_op((centered * centered).mean(axis=axes), "var", (x,), _backward)


def amax(x: Tensor, axis: int = 0) -> Tensor:
    """Maximum along one axis; ties route the gradient to the first maximum."""
    axis = axis % x.ndim
    winner = np.expand_dims(np.argmax(x.data, axis=axis), axis)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, winner, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    out = np.take_along_axis(x.data, winner, axis=axis).squeeze(axis)
    return Tensor._from_op(out, "amax", (x,), _backward)


# ─── Structural ─────────────────────────────────────────────────────────────

def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat", "parts", "at least one tensor", 0)
    ndim = parts[0].ndim
    for part in parts[1:]:
        if part.ndim != ndim:
            raise ShapeError("concat", "ndim", ndim, part.ndim)
    axis = axis % ndim
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _backward(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", "non-concat axes", parts[0].shape, [p.shape for p in parts]) from None
    return Tensor._from_op(out, "concat", tuple(parts), _backward)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if not parts:
        raise ShapeError("stack", "parts", "at least one tensor", 0)
    for part in parts[1:]:
        if part.shape != parts[0].shape:
            raise ShapeError("stack", "shape", parts[0].shape, part.shape)

    def _backward(g: np.ndarray) -> list[np.ndarray]:
        return [g[i] for i in range(len(parts))]

    return Tensor._from_op(np.stack([p.data for p in parts]), "stack", tuple(parts), _backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError("reshape", "size", x.data.size, shape)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(x.shape),)

    return Tensor._from_op(x.data.reshape(shape), "reshape", (x,), _backward)


def take_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Select entries along the leading axis (gradient scatters back with summation)."""
    index = np.asarray(indices, dtype=np.intp)
    if index.size == 0:
        raise ShapeError("take_rows", "indices", "non-empty", 0)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return Tensor._from_op(x.data[index], "take_rows", (x,), _backward)


# ─── Layers' building blocks ────────────────────────────────────────────────

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[D] → W·x + b, or row-wise for x[N, D]."""
    if weight.ndim != 2:
        raise ShapeError("linear", "weight.ndim", 2, weight.ndim)
    out_dim, in_dim = weight.shape
    if x.shape[-1] != in_dim:
        raise ShapeError("linear", "D", in_dim, x.shape[-1])
    if bias.shape != (out_dim,):
        raise ShapeError("linear", "O", (out_dim,), bias.shape)
    x2 = x.data.reshape(-1, in_dim)

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g2 = g.reshape(-1, out_dim)
        return (g2 @ weight.data).reshape(x.shape), g2.T @ x2, g2.sum(axis=0)

    out = (x2 @ weight.data.T + bias.data).reshape(*x.shape[:-1], out_dim)
    return Tensor._from_op(out, "linear", (x, weight, bias), _backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation of x[C_in,H,W] or x[N,C_in,H,W] with weight[C_out,C_in,k,k].

    Output spatial size is (H + 2p − k) // s + 1 per axis.
    """
    if x.ndim not in (3, 4):
        raise ShapeError("conv2d", "input.ndim", "3 or 4", x.ndim)
    if weight.ndim != 4:
        raise ShapeError("conv2d", "weight.ndim", 4, weight.ndim)
    batched = x.ndim == 4
    x4 = x.data if batched else x.data[None]
    n, c_in, h, w = x4.shape
    c_out, w_in, k, k2 = weight.shape
    if w_in != c_in:
        raise ShapeError("conv2d", "C_in", c_in, w_in)
    if k != k2 or k % 2 == 0:
        raise ShapeError("conv2d", "k", "odd square kernel", (k, k2))
    if bias.shape != (c_out,):
        raise ShapeError("conv2d", "C_out", (c_out,), bias.shape)
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d", "stride/padding", "stride ≥ 1, padding ≥ 0", (stride, padding))
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError("conv2d", "H_out/W_out", "≥ 1", (h_out, w_out))

    padded = np.pad(x4, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    # im2col: rows (n, i, j), columns (c, ki, kj); kept for the weight gradient.
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h_out * w_out, c_in * k * k)
    w_mat = weight.data.reshape(c_out, c_in * k * k)
    out = (cols @ w_mat.T + bias.data).reshape(n, h_out, w_out, c_out)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def _backward(g: np.ndarray) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
        g4 = g if batched else g[None]
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
        grad_w = (g2.T @ cols).reshape(weight.shape)
        grad_b = g2.sum(axis=0)
        if not x.requires_grad:
            return None, grad_w, grad_b
        grad_windows = (g2 @ w_mat).reshape(n, h_out, w_out, c_in, k, k)
        grad_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += (
                    grad_windows[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        grad_x = grad_padded[:, :, padding:padding + h, padding:padding + w]
        return (grad_x if batched else grad_x[0]), grad_w, grad_b

    return Tensor._from_op(out if batched else out[0], "conv2d", (x, weight, bias), _backward)


def standardize(x: Tensor, axes: tuple[int, ...], eps: float) -> Tensor:
    """(x − μ) / √(σ² + eps) with μ, σ² taken over ``axes``; differentiable through the statistics."""
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=axes, keepdims=True) + eps)
    xhat = centered * inv_std

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        g_mean = g.mean(axis=axes, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return Tensor._from_op(xhat, "standardize", (x,), _backward)


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """γ_c·x + β_c on x[N,C,H,W]; γ/β are shared [C] or per-sample [N,C]."""
    if x.ndim != 4:
        raise ShapeError("channel_affine", "input.ndim", 4, x.ndim)
    n, c = x.shape[:2]
    if gamma.shape not in ((c,), (n, c)) or beta.shape != gamma.shape:
        raise ShapeError("channel_affine", "C", f"({c},) or ({n}, {c})", (gamma.shape, beta.shape))
    per_sample = gamma.ndim == 2
    g4 = gamma.data[..., None, None]
    b4 = beta.data[..., None, None]

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_gamma = (g * x.data).sum(axis=(2, 3))
        grad_beta = g.sum(axis=(2, 3))
        if not per_sample:
            grad_gamma = grad_gamma.sum(axis=0)
            grad_beta = grad_beta.sum(axis=0)
        return g * g4, grad_gamma, grad_beta

    return Tensor._from_op(x.data * g4 + b4, "channel_affine", (x, gamma, beta), _backward)


# ─── Loss ───────────────────────────────────────────────────────────────────

def bce_loss(p: Tensor, y: int | float) -> Tensor:
    """
    Binary cross-entropy −(y·ln p + (1−y)·ln(1−p)) on a probability clamped to
    [LOSS_EPS, 1 − LOSS_EPS]. The gradient is evaluated at the clamped value.
    """
    if p.data.size != 1:
        raise ShapeError("bce_loss", "p", "scalar", p.shape)
    pc = float(np.clip(p.data.reshape(-1)[0], LOSS_EPS, 1.0 - LOSS_EPS))
    target = float(y)
    loss = -(target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc))

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        dp = -target / pc + (1.0 - target) / (1.0 - pc)
        return (np.full(p.shape, float(g.reshape(-1)[0]) * dp),)

    return Tensor._from_op(np.asarray(loss), "bce_loss", (p,), _backward)
