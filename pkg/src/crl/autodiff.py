"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors hold contiguous float64 data of rank <= 3.  Operations executed
under an active Tape append records in creation order (which is a
topological order), and backward() replays them once in reverse.
Broadcasting is restricted to scalar-with-tensor and row-vector
(1, n)-against-(B, n) patterns so every backward rule stays obvious.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

LOG_2PI = float(np.log(2.0 * np.pi))

_STATE = threading.local()


def _tape_stack() -> list:
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
    return _STATE.stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered operation records; owns one forward/backward pass."""

    def __init__(self):
        self.records: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, t: "Tensor") -> None:
        t.node_id = len(self.records)
        self.records.append(t)


class ShapeMismatch(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "name", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeMismatch(f"rank {arr.ndim} tensor not supported (max rank 3)")
        self.data = arr
        self.grad = None
        self.parents: tuple = ()
        self.backward_fn = None
        self.name = name
        self.requires_grad = requires_grad
        self.node_id = -1

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def const(data) -> Tensor:
    return Tensor(data)


def _make(out_data, parents, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        tape.record(out)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate chain-rule gradients of a scalar loss into every
    reachable tensor's grad slot (leaf parameters included)."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward requires an active Tape")
    loss.add_grad(np.ones_like(loss.data))
    for node in reversed(tape.records):
        if node.grad is None or node.backward_fn is None:
            continue
        node.backward_fn(node.grad)


# -- broadcasting helpers --------------------------------------------------------

def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _is_row_of(small: Tensor, big: Tensor) -> bool:
    return (
        small.data.ndim == 2
        and big.data.ndim == 2
        and small.shape[0] == 1
        and small.shape[1] == big.shape[1]
    )


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.data.shape:
        return g
    if t.data.size == 1:
        return np.full_like(t.data, g.sum())
    return g.sum(axis=0, keepdims=True)  # row-vector broadcast


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b) or _is_row_of(b, a) or _is_row_of(a, b):
        return
    raise ShapeMismatch(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- arithmetic ------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "add")
    out = a.data + b.data

    def back(g):
        a.add_grad(_reduce_to(g, a))
        b.add_grad(_reduce_to(g, b))

    return _make(out, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "sub")
    out = a.data - b.data

    def back(g):
        a.add_grad(_reduce_to(g, a))
        b.add_grad(_reduce_to(-g, b))

    return _make(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "mul")
    out = a.data * b.data

    def back(g):
        a.add_grad(_reduce_to(g * b.data, a))
        b.add_grad(_reduce_to(g * a.data, b))

    return _make(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: a.add_grad(-g))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(c * a.data, (a,), lambda g: a.add_grad(c * g))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def back(g):
        a.add_grad(g @ b.data.T)
        b.add_grad(a.data.T @ g)

    return _make(out, (a, b), back)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """x @ W^T + b with b a (1, out) row bias."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ShapeMismatch(f"affine: shape mismatch {x.shape} vs {W.shape}")
    if b.shape != (1, W.shape[0]):
        raise ShapeMismatch(f"affine: bias shape {b.shape} != (1, {W.shape[0]})")
    out = x.data @ W.data.T + b.data

    def back(g):
        x.add_grad(g @ W.data)
        W.add_grad(g.T @ x.data)
        b.add_grad(g.sum(axis=0, keepdims=True))

    return _make(out, (x, W, b), back)


# -- elementwise nonlinearities ----------------------------------------------------

def leaky_relu(x: Tensor, slope: float) -> Tensor:
    mask = x.data >= 0
    out = np.where(mask, x.data, slope * x.data)
    deriv = np.where(mask, 1.0, slope)
    return _make(out, (x,), lambda g: x.add_grad(g * deriv))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: x.add_grad(g * (1.0 - t * t)))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    sig = expit(x.data)
    return _make(out, (x,), lambda g: x.add_grad(g * sig))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _make(s, (x,), lambda g: x.add_grad(g * s * (1.0 - s)))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: x.add_grad(g * e))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: x.add_grad(2.0 * g * x.data))


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: x.add_grad(g * s))


# -- reductions --------------------------------------------------------------------

def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=axis is not None)

    def back(g):
        if axis is None:
            x.add_grad(np.full_like(x.data, g.reshape(-1)[0]))
        else:
            x.add_grad(np.broadcast_to(g, x.data.shape).copy())

    return _make(out, (x,), back)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]
    out = x.data.mean(axis=axis, keepdims=axis is not None)

    def back(g):
        if axis is None:
            x.add_grad(np.full_like(x.data, g.reshape(-1)[0] / count))
        else:
            x.add_grad(np.broadcast_to(g / count, x.data.shape).copy())

    return _make(out, (x,), back)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatch(f"transpose: need rank-2 input, got {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: x.add_grad(g.T))


def submatrix(x: Tensor, k: int) -> Tensor:
    """Leading principal k-by-k block of a square matrix."""
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeMismatch(f"submatrix: need a square matrix, got {x.shape}")
    out = x.data[:k, :k].copy()

    def back(g):
        full = np.zeros_like(x.data)
        full[:k, :k] = g
        x.add_grad(full)

    return _make(out, (x,), back)


def col(x: Tensor, i: int) -> Tensor:
    """Column slice (B, n) -> (B, 1)."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"col: need rank-2 input, got {x.shape}")
    out = x.data[:, i : i + 1].copy()

    def back(g):
        full = np.zeros_like(x.data)
        full[:, i : i + 1] = g
        x.add_grad(full)

    return _make(out, (x,), back)


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Row slice (B, n) -> (stop - start, n)."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"rows: need rank-2 input, got {x.shape}")
    out = x.data[start:stop].copy()

    def back(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        x.add_grad(full)

    return _make(out, (x,), back)


def gaussian_nll(x: Tensor, mean: Tensor, log_var: Tensor) -> Tensor:
    """Elementwise 0.5 * ((x - mean)^2 / exp(log_var) + log_var + log 2pi)."""
    _check_pair(x, mean, "gaussian_nll")
    _check_pair(x, log_var, "gaussian_nll")
    diff = x.data - mean.data
    inv = np.exp(-log_var.data)
    out = 0.5 * (diff * diff * inv + log_var.data + LOG_2PI)

    def back(g):
        d = g * diff * inv
        x.add_grad(_reduce_to(d, x))
        mean.add_grad(_reduce_to(-d, mean))
        log_var.add_grad(_reduce_to(g * 0.5 * (1.0 - diff * diff * inv), log_var))

    return _make(out, (x, mean, log_var), back)


# -- optimizer ---------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict = field(default_factory=dict)  # name -> (m, v)

    def ensure(self, p: Tensor) -> tuple[np.ndarray, np.ndarray]:
        if p.name not in self.moments:
            self.moments[p.name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        return self.moments[p.name]


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray] | None = None) -> list[Tensor]:
    """One bias-corrected Adam update, in place on the parameter data."""
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for parameter {p.name!r}")
        m, v = state.ensure(p)
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


# -- checkpoints ---------------------------------------------------------------------

def save_params(params: list[Tensor], directory: str, stem: str = "params") -> None:
    """Flat little-endian float64 binary plus a JSON sidecar mapping names
    to byte offsets and shapes."""
    os.makedirs(directory, exist_ok=True)
    ordered = sorted(params, key=lambda p: p.name)
    index = {}
    offset = 0
    with open(os.path.join(directory, f"{stem}.bin"), "wb") as fh:
        for p in ordered:
            raw = p.data.astype("<f8").tobytes()
            fh.write(raw)
            index[p.name] = {"offset": offset, "shape": list(p.shape)}
            offset += len(raw)
    with open(os.path.join(directory, f"{stem}.json"), "w") as fh:
        json.dump(index, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_params(params: list[Tensor], directory: str, stem: str = "params") -> None:
    with open(os.path.join(directory, f"{stem}.json")) as fh:
        index = json.load(fh)
    with open(os.path.join(directory, f"{stem}.bin"), "rb") as fh:
        blob = fh.read()
    for p in params:
        meta = index[p.name]
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=meta["offset"]).reshape(shape)
        p.data = arr.astype(np.float64).copy()
