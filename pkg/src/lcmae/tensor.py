"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (the transformer, the heads, the losses) is built from
the ops in this module, so the whole objective is differentiable end to end
and checkable against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DataError, NumericError, ShapeError

Array = np.ndarray


def _as_array(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    return a


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """n-d float64 array with an optional grad buffer and graph lineage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple["Tensor", ...] = (),
                 backward: Callable[[Array], None] | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents = parents
        self._backward = backward

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- grad bookkeeping ---------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: Array):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar; accumulates into .grad buffers."""
        if self.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, Array] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if parent.requires_grad or parent._backward is not None:
                        if id(parent) in grads:
                            grads[id(parent)] += pg
                        else:
                            grads[id(parent)] = pg

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        out_data = self.data + other.data

        def bwd(g):
            return ((self, _unbroadcast(g, self.shape)),
                    (other, _unbroadcast(g, other.shape)))

        return _node(out_data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: ((self, -g),))

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        other = _wrap(other)
        out_data = self.data * other.data

        def bwd(g):
            return ((self, _unbroadcast(g * other.data, self.shape)),
                    (other, _unbroadcast(g * self.data, other.shape)))

        return _node(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        out_data = self.data / other.data

        def bwd(g):
            return ((self, _unbroadcast(g / other.data, self.shape)),
                    (other, _unbroadcast(-g * self.data / other.data ** 2, other.shape)))

        return _node(out_data, (self, other), bwd)

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __pow__(self, p: float):
        out_data = self.data ** p

        def bwd(g):
            return ((self, g * p * self.data ** (p - 1)),)

        return _node(out_data, (self,), bwd)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        out_data = self.data[key]

        def bwd(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            return ((self, full),)

        return _node(out_data, (self,), bwd)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        src_shape = self.shape

        def bwd(g):
            return ((self, g.reshape(src_shape)),)

        return _node(out_data, (self,), bwd)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)

        def bwd(g):
            return ((self, g.transpose(inv)),)

        return _node(out_data, (self,), bwd)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        src_shape = self.shape

        def bwd(g):
            if axis is None:
                return ((self, np.broadcast_to(g, src_shape).copy()),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            return ((self, np.broadcast_to(gg, src_shape).copy()),)

        return _node(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- pointwise transcendental -------------------------------------------

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def bwd(g):
            return ((self, g * out_data),)

        return _node(out_data, (self,), bwd)

    def log(self) -> "Tensor":
        out_data = np.log(self.data)

        def bwd(g):
            return ((self, g / self.data),)

        return _node(out_data, (self,), bwd)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def bwd(g):
            return ((self, g * (1.0 - out_data ** 2)),)

        return _node(out_data, (self,), bwd)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def bwd(g):
            return ((self, g * 0.5 / out_data),)

        return _node(out_data, (self,), bwd)

    def clip_min(self, lo: float) -> "Tensor":
        """Elementwise max(x, lo); gradient passes only where x > lo."""
        out_data = np.maximum(self.data, lo)
        mask = (self.data > lo).astype(np.float64)

        def bwd(g):
            return ((self, g * mask),)

        return _node(out_data, (self,), bwd)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: Array, parents: tuple[Tensor, ...], bwd) -> Tensor:
    track = any(p.requires_grad or p._backward is not None for p in parents)
    if track:
        return Tensor(data, parents=parents, backward=bwd)
    return Tensor(data)


# ---------------------------------------------------------------------------
# free functions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return _node(out_data, (a, b), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append((t, g[tuple(sl)]))
        return tuple(out)

    return _node(out_data, tuple(tensors), bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Stable softmax along the final axis; rows sum to one."""
    x = _wrap(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    shift = x - Tensor(x.data.max(axis=-1, keepdims=True))
    e = shift.exp()
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match "
            f"last extent of {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gamma + beta


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    mask = (x.data > 0).astype(np.float64)
    out_data = x.data * mask

    def bwd(g):
        return ((x, g * mask),)

    return _node(out_data, (x,), bwd)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715  # tanh-approximation cubic coefficient


def gelu(x: Tensor) -> Tensor:
    x = _wrap(x)
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd ** 3)
    t = np.tanh(u)
    out_data = 0.5 * xd * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd ** 2)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * du
        return ((x, g * dx),)

    return _node(out_data, (x,), bwd)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ContractError(f"unknown activation kind: {kind!r}")


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Row-wise unit normalization; denominator floored at eps for zero rows."""
    x = _wrap(x)
    # clip before the sqrt: max(norm, eps) == sqrt(max(ss, eps^2)), and the
    # sqrt backward stays finite on all-zero rows
    norm = (x ** 2).sum(axis=-1, keepdims=True).clip_min(eps * eps).sqrt()
    return x / norm


@dataclass
class BatchNormState:
    """Learnable affine plus running statistics for one batch-norm layer."""
    gamma: Tensor
    beta: Tensor
    running_mean: Array
    running_var: Array
    momentum: float = 0.1
    mode: str = "training"  # "training" | "inference"
    update_running: bool = True

    @staticmethod
    def create(dim: int, momentum: float = 0.1) -> "BatchNormState":
        return BatchNormState(
            gamma=Tensor(np.ones(dim), requires_grad=True),
            beta=Tensor(np.zeros(dim), requires_grad=True),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
            momentum=momentum,
        )


def batch_norm(x: Tensor, state: BatchNormState, eps: float = 1e-5) -> Tensor:
    x = _wrap(x)
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects [batch, features], got {x.shape}")
    if state.mode == "training":
        if x.shape[0] < 2:
            raise DataError("batch_norm in training mode needs a batch of at least 2")
        mu = x.mean(axis=0, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=0, keepdims=True)
        if state.update_running:
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mu.data[0]
            state.running_var = (1 - m) * state.running_var + m * var.data[0]
        return (x - mu) / (var + eps).sqrt() * state.gamma + state.beta
    if state.mode == "inference":
        mu = Tensor(state.running_mean)
        var = Tensor(state.running_var)
        return (x - mu) / (var + eps).sqrt() * state.gamma + state.beta
    raise ContractError(f"unknown batch-norm mode: {state.mode!r}")


def gather_rows(x: Tensor, idx: Array) -> Tensor:
    """Select rows per sample: x[b, idx[b, j], :] -> out[b, j, :].

    Backward scatters gradients to the source positions and zeros elsewhere.
    """
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows expects x [b,n,d] and idx [b,k], got {x.shape} / {idx.shape}")
    n = x.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows index out of range [0, {n})")
    out_data = np.take_along_axis(x.data, idx[:, :, None], axis=1)

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (np.arange(x.shape[0])[:, None], idx), g)
        return ((x, full),)

    return _node(out_data, (x,), bwd)


def scatter_rows(x: Tensor, idx: Array, n: int) -> Tensor:
    """Inverse of gather_rows: place x[b, j, :] at out[b, idx[b, j], :], zeros elsewhere."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 3 or idx.shape != x.shape[:2]:
        raise ShapeError(f"scatter_rows expects x [b,k,d] and idx [b,k], got {x.shape} / {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"scatter_rows index out of range [0, {n})")
    b, _, d = x.shape
    out_data = np.zeros((b, n, d))
    np.add.at(out_data, (np.arange(b)[:, None], idx), x.data)

    def bwd(g):
        return ((x, np.take_along_axis(g, idx[:, :, None], axis=1)),)

    return _node(out_data, (x,), bwd)


def embed_rows(table: Tensor, idx: Array) -> Tensor:
    """Look up rows of a shared [n, d] table per sample: out[b, j, :] = table[idx[b, j], :]."""
    table = _wrap(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2 or idx.ndim != 2:
        raise ShapeError(f"embed_rows expects table [n,d] and idx [b,k], got {table.shape} / {idx.shape}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"embed_rows index out of range [0, {n})")
    out_data = table.data[idx]

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return ((table, full),)

    return _node(out_data, (table,), bwd)


# ---------------------------------------------------------------------------
# finite-difference oracle


def _rel_error(analytic: Array, numeric: Array) -> float:
    """Worst deviation relative to the gradient magnitudes.

    Denominator is max(|analytic|, |numeric|, 1e-8) where |.| is the largest
    entry of each gradient. A per-element denominator is not attainable in
    float64: central differences carry ~|f|*eps/h of absolute noise, which
    any near-zero coordinate would amplify past any tolerance.
    """
    denom = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / denom)


def grad_check(f: Callable[[Tensor], Tensor], x0, h: float = 1e-5) -> float:
    """Compare backward() against central differences; return worst relative error."""
    x0 = np.asarray(x0, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    y = f(x)
    if y.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise NumericError("grad_check: function value is not finite at x0")
    y.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        fp = float(f(Tensor(x0)).data)
        flat[i] = saved - h
        fm = float(f(Tensor(x0)).data)
        flat[i] = saved
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("grad_check: function not finite near x0")
        num_flat[i] = (fp - fm) / (2 * h)

    return _rel_error(analytic, numeric)


def grad_check_params(build_loss: Callable[[], Tensor],
                      params: dict[str, Tensor], h: float = 1e-5,
                      sample: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """grad_check over a whole named parameter set against one scalar loss.

    `build_loss` must rebuild the graph from the current parameter values on
    each call. When `sample` is given, only that many randomly chosen scalar
    coordinates per parameter are probed (the analytic side is always exact).
    """
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    if loss.size != 1:
        raise ContractError("grad_check_params requires a scalar-valued loss")
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            coords = rng.choice(flat.size, size=sample, replace=False)
        a_flat = analytic[name].reshape(-1)
        num = np.zeros(len(coords))
        for j, i in enumerate(coords):
            saved = flat[i]
            flat[i] = saved + h
            fp = float(build_loss().data)
            flat[i] = saved - h
            fm = float(build_loss().data)
            flat[i] = saved
            num[j] = (fp - fm) / (2 * h)
        worst = max(worst, _rel_error(a_flat[coords], num))
    return worst
