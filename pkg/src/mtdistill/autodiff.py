"""Tape-based reverse-mode autodiff over dense float64 arrays.

Only the handful of operations the multi-task networks need are provided:
affine layers, pointwise activations, elementwise add/scale/mul, and the
masked per-task losses.  Every forward op records a node on the
:class:`ComputeGraph` of its inputs; :func:`backward` sweeps that tape once
in reverse and accumulates gradients into the owning :class:`ParameterSet`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numba
import numpy as np

DTYPE = np.float64

ACTIVATIONS = ("tanh", "relu", "identity")


class DimensionError(ValueError):
    """Shape mismatch between an input and a layer."""


class NonFiniteError(ValueError):
    """A NaN or Inf reached an operation that requires finite values."""


class GraphConsumedError(RuntimeError):
    """backward() was called twice on the same graph."""


class DegenerateBatchError(ValueError):
    """Every sample of every task is masked out."""


class OptimizerStateError(ValueError):
    """Optimizer accumulators do not match the parameters."""


# --------------------------------------------------------------------------
# parameters


class ParameterSet:
    """Ordered named float64 arrays, each with a gradient slot of the same shape.

    After :meth:`pack` every value and gradient is a view into one contiguous
    buffer, so optimizers can update everything with a few vector operations.
    """

    def __init__(self, values: dict[str, np.ndarray] | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._flat: np.ndarray | None = None
        self._gflat: np.ndarray | None = None
        for name, arr in (values or {}).items():
            self.add(name, arr)

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=DTYPE)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self._flat = self._gflat = None

    def pack(self) -> None:
        total = sum(v.size for v in self.values.values())
        flat = np.empty(total, dtype=DTYPE)
        gflat = np.empty(total, dtype=DTYPE)
        off = 0
        for name, arr in self.values.items():
            n = arr.size
            flat[off:off + n] = arr.ravel()
            gflat[off:off + n] = self.grads[name].ravel()
            self.values[name] = flat[off:off + n].reshape(arr.shape)
            self.grads[name] = gflat[off:off + n].reshape(arr.shape)
            off += n
        self._flat, self._gflat = flat, gflat

    @property
    def flat(self) -> np.ndarray:
        if self._flat is None:
            self.pack()
        return self._flat

    @property
    def flat_grad(self) -> np.ndarray:
        if self._gflat is None:
            self.pack()
        return self._gflat

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def size(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def zero_grad(self) -> None:
        self.flat_grad.fill(0.0)

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for name, arr in self.values.items():
            out.add(name, arr)
            out.grads[name][...] = self.grads[name]
        out.pack()
        return out

    def subset(self, prefix: str) -> list[str]:
        return [n for n in self.values if n.startswith(prefix)]


# --------------------------------------------------------------------------
# tensors and the tape


class Tensor:
    """A dense float64 array living on a compute graph.

    ``shape`` and the row-major ``values`` view follow the array.  Tensors
    created with :meth:`ComputeGraph.constant` carry no gradient.
    """

    __slots__ = ("data", "grad", "graph", "requires_grad", "_param")

    def __init__(self, data: np.ndarray, graph: "ComputeGraph", requires_grad: bool):
        self.data = data
        self.graph = graph
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._param: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class ComputeGraph:
    """Tape of operations in the order they ran during one forward pass."""

    params: ParameterSet | None = None
    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def constant(self, value) -> Tensor:
        arr = np.asarray(value, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite input")
        return Tensor(arr, self, requires_grad=False)

    def parameter(self, name: str) -> Tensor:
        if self.params is None:
            raise ValueError("graph has no ParameterSet bound")
        t = Tensor(self.params.values[name], self, requires_grad=True)
        t._param = name
        return t

    def record(self, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
        needs = any(t.requires_grad for t in inputs)
        out = Tensor(data, self, requires_grad=needs)
        if needs:
            self.nodes.append(_Node(out, inputs, backward))
        return out


def _graph_of(*tensors: Tensor) -> ComputeGraph:
    g = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not g:
            raise ValueError("tensors belong to different graphs")
    return g


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    t.grad = g if t.grad is None else t.grad + g


def backward(graph: ComputeGraph, output: Tensor, seed=1.0) -> None:
    """Propagate ``seed`` from ``output`` back to every parameter on the tape.

    Gradients are added to ``graph.params.grads``; callers zero them between
    batches.  A graph can be swept once.
    """
    if graph.consumed:
        raise GraphConsumedError("graph already consumed by a previous backward()")
    graph.consumed = True
    if not output.requires_grad:
        return
    output.grad = np.broadcast_to(np.asarray(seed, dtype=DTYPE), output.shape).copy()
    param_grads = graph.params.grads if graph.params is not None else {}
    for node in reversed(graph.nodes):
        g = node.out.grad
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._param is not None:
                param_grads[inp._param] += gi
            else:
                _accumulate(inp, gi)
        node.out.grad = None


# --------------------------------------------------------------------------
# operations


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for x of shape [batch, d_in] and w of shape [d_in, d_out]."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"input shape {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    xd, wd = x.data, w.data
    need_x = x.requires_grad

    def back(g):
        gx = g @ wd.T if need_x else None
        gw = xd.T @ g
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _graph_of(*inputs).record(out, inputs, back)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return x.graph.record(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    y = np.where(pos, x.data, 0.0)
    return x.graph.record(y, (x,), lambda g: (np.where(pos, g, 0.0),))


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _graph_of(a, b).record(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _graph_of(a, b).record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return a.graph.record(a.data * c, (a,), lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a [1] tensor."""
    shape = a.shape
    return a.graph.record(np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))


def softmax(logits) -> np.ndarray:
    """Row-wise softmax of a [batch, K] array, stabilised by max subtraction."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=DTYPE)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("softmax of non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# masked losses


LOSS_KINDS = ("mse", "mae", "cross_entropy")


def _reduce_denominator(mask: np.ndarray, reduction: str) -> float:
    if reduction == "mean":
        return float(mask.sum())
    if reduction == "sum":
        return 1.0
    raise ValueError(f"unknown reduction {reduction!r}")


def masked_loss(pred: Tensor, target, mask, kind: str, reduction: str = "mean") -> Tensor:
    """Per-task loss over the unmasked rows of ``pred``.

    ``target`` holds regression values shaped like ``pred`` (or [n]) or class
    indices [n] for ``cross_entropy``; entries under a false mask bit are
    ignored and may hold anything finite.  With no unmasked rows the result
    is exactly 0 and nothing flows back.
    """
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    n = pred.shape[0]
    if mask.shape[0] != n:
        raise DimensionError(f"mask length {mask.shape[0]} != batch {n}")
    g_ = pred.graph
    if not mask.any():
        return g_.constant(np.zeros(1))
    denom = _reduce_denominator(mask, reduction)
    w = mask.astype(DTYPE)[:, None]
    p = pred.data

    if kind in ("mse", "mae"):
        t = np.asarray(target, dtype=DTYPE).reshape(p.shape)
        diff = np.where(mask[:, None], p - t, 0.0)
        if kind == "mse":
            val = (diff * diff).sum() / denom
            back = lambda g: ((g[0] * 2.0 / denom) * diff,)
        else:
            val = np.abs(diff).sum() / denom
            back = lambda g: ((g[0] / denom) * np.sign(diff),)
        return g_.record(np.array([val]), (pred,), back)

    if kind == "cross_entropy":
        idx = np.where(mask, np.asarray(target).reshape(-1), 0).astype(np.int64)
        if p.ndim != 2 or p.shape[1] < 2:
            raise DimensionError(f"cross_entropy needs [batch, K>=2] logits, got {p.shape}")
        if np.any(idx < 0) or np.any(idx >= p.shape[1]):
            raise ValueError("class index out of range")
        logp = log_softmax(p)
        rows = np.arange(n)
        val = -(logp[rows, idx] * mask).sum() / denom

        def back(g):
            d = np.exp(logp)
            d[rows, idx] -= 1.0
            return ((g[0] / denom) * d * w,)

        return g_.record(np.array([val]), (pred,), back)

    raise ValueError(f"unknown loss kind {kind!r}")


def masked_multitask_loss(preds: Sequence[Tensor], labels: Sequence, masks: Sequence,
                          kinds: Sequence[str], alpha: float = 1.0,
                          reduction: str = "mean") -> tuple[Tensor, list[float]]:
    """``L = L_task1 + alpha * L_task2`` (further tasks also weighted by ``alpha``).

    Returns the scalar loss tensor and the per-task loss values.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if not any(np.asarray(m, dtype=bool).any() for m in masks):
        raise DegenerateBatchError("every sample is masked for every task")
    terms = [masked_loss(p, y, m, k, reduction) for p, y, m, k in zip(preds, labels, masks, kinds)]
    per_task = [t.item() for t in terms]
    loss = terms[0]
    for t in terms[1:]:
        if alpha == 0.0:
            continue
        loss = add(loss, scale(t, alpha))
    return loss, per_task


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam moments and step counter for one ParameterSet.

    ``m`` and ``v`` hold one accumulator per parameter name; they are views
    into the flat buffers ``m_flat`` / ``v_flat`` that the update uses.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    m_flat: np.ndarray | None = field(default=None, repr=False)
    v_flat: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def fresh(cls, params: ParameterSet, **hyper) -> "OptimizerState":
        st = cls(**hyper)
        n = params.flat.size
        st.m_flat, st.v_flat = np.zeros(n), np.zeros(n)
        off = 0
        for name, arr in params.values.items():
            st.m[name] = st.m_flat[off:off + arr.size].reshape(arr.shape)
            st.v[name] = st.v_flat[off:off + arr.size].reshape(arr.shape)
            off += arr.size
        return st


def adam_step(params: ParameterSet, state: OptimizerState) -> None:
    """Bias-corrected Adam update, applied in place."""
    if list(state.m) != list(params.values) or any(
            state.m[k].shape != params.values[k].shape for k in state.m):
        raise OptimizerStateError("optimizer state does not match the parameters")
    p, g = params.flat, params.flat_grad
    m, v = state.m_flat, state.v_flat
    if m is None or m.shape != p.shape:
        raise OptimizerStateError("optimizer state does not match the parameters")
    state.step += 1
    t = state.step
    _adam_kernel(p, g, m, v, state.learning_rate, state.beta1, state.beta2, state.eps,
                 1.0 - state.beta1 ** t, 1.0 - state.beta2 ** t)


@numba.njit(cache=True, error_model="numpy")
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, c1, c2):
    step = lr / c1
    unbias = 1.0 / np.sqrt(c2)
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi) * unbias + eps)


# --------------------------------------------------------------------------
# verification


def gradient_check(params: ParameterSet, loss_fn: Callable[[ComputeGraph], Tensor],
                   perturbation: float = 1e-5, floor: float = 1e-6) -> float:
    """Largest relative gap between backprop and central differences.

    ``loss_fn`` builds a scalar loss on the graph it is given, reading
    parameters through ``graph.parameter``.  The relative error of a single
    entry is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps exact-zero
    gradients from being judged against central-difference roundoff (about
    1e-11 at the default perturbation).
    """
    if not 0 < perturbation <= 1e-2:
        raise ValueError("perturbation must lie in (0, 1e-2]")
    params.zero_grad()
    g = ComputeGraph(params)
    out = loss_fn(g)
    backward(g, out)
    analytic = {k: v.copy() for k, v in params.grads.items()}
    params.zero_grad()

    def value() -> float:
        return loss_fn(ComputeGraph(params)).item()

    worst = 0.0
    for name, arr in params.values.items():
        flat = arr.reshape(-1)
        an = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + perturbation
            up = value()
            flat[i] = orig - perturbation
            down = value()
            flat[i] = orig
            num = (up - down) / (2.0 * perturbation)
            err = abs(an[i] - num) / max(abs(an[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


def check_finite(arrays: Iterable[np.ndarray], what: str) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values in {what}")
