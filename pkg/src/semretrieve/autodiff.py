"""Minimal reverse-mode differentiation on numpy arrays.

A :class:`Tape` records primitive applications in execution order; ``backward``
replays the records in reverse, accumulating gradients additively. Because
records are appended as ops execute, reverse record order is a reverse
topological order of the graph and every node is visited exactly once.

Training runs in float32; gradient checking runs the same ops in float64
(dtype follows the input tensors). All primitives are deterministic:
``dropout`` takes an integer seed rather than a shared generator so that
repeated forward passes reproduce the same mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr

from .errors import ContractViolation, DimensionError, TrainingError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A shaped numpy array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Single-threaded by contract; distinct tapes may run on distinct threads.
    """

    def __init__(self):
        self._records = []

    def record(self, out: Tensor, inputs, backward_fn) -> None:
        self._records.append((out, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of ``loss`` into every tensor on the tape."""
        if loss.data.size != 1:
            raise DimensionError("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self._records):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for tensor, grad in zip(inputs, grads):
                if grad is None:
                    continue
                if tensor.grad is None:
                    tensor.grad = grad.astype(tensor.data.dtype, copy=True)
                else:
                    tensor.grad += grad.astype(tensor.data.dtype, copy=False)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` to undo numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting (used for bias terms)."""
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    tape.record(out, (a, b), backward)
    return out


def mul(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    out = Tensor(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    tape.record(out, (a, b), backward)
    return out


def scale(tape: Tape, a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (not differentiated w.r.t. ``c``)."""
    out = Tensor(a.data * c)
    tape.record(out, (a,), lambda g: (g * c,))
    return out


def matmul(tape: Tape, a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    bd = b.data.T if transpose_b else b.data
    if a.data.shape[1] != bd.shape[0]:
        raise DimensionError(
            f"matmul inner dims differ: {a.data.shape} x {bd.shape}"
        )
    out = Tensor(a.data @ bd)

    def backward(g):
        if transpose_b:
            return g @ b.data, g.T @ a.data
        return g @ b.data.T, a.data.T @ g

    tape.record(out, (a, b), backward)
    return out


def gelu(tape: Tape, a: Tensor) -> Tensor:
    """Gaussian-CDF GELU: ``x * Phi(x)`` (not the tanh approximation)."""
    x = a.data
    cdf = ndtr(x)
    out = Tensor(x * cdf)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    tape.record(out, (a,), backward)
    return out


def tanh(tape: Tape, a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))

    def backward(g):
        return (g * (1.0 - out.data * out.data),)

    tape.record(out, (a,), backward)
    return out


def exp(tape: Tape, a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    tape.record(out, (a,), lambda g: (g * out.data,))
    return out


def log_sigmoid(tape: Tape, a: Tensor) -> Tensor:
    """Numerically stable ``log(sigmoid(x)) = -log(1 + exp(-x))``."""
    x = a.data
    out = Tensor(-np.logaddexp(np.zeros_like(x), -x))

    def backward(g):
        return (g * expit(-x),)

    tape.record(out, (a,), backward)
    return out


def layer_norm(tape: Tape, a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learnable gain and bias.

    The eps-stabilized denominator makes zero-variance rows well defined.
    """
    x = a.data
    if gain.data.shape != x.shape[-1:] or bias.data.shape != x.shape[-1:]:
        raise DimensionError("layer_norm gain/bias must match the last axis")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor(gain.data * xhat + bias.data)

    def backward(g):
        dxhat = g * gain.data
        m = x.shape[-1]
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(x.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        del m
        return dx, dgain, dbias

    tape.record(out, (a, gain, bias), backward)
    return out


def dropout(tape: Tape, a: Tensor, keep_prob: float, seed: int, train: bool) -> Tensor:
    """Inverted dropout; identity in eval mode.

    Takes an integer seed so repeated forward passes (e.g. finite differences)
    see the same mask. Scaling by 1/keep_prob keeps the expectation unbiased.
    """
    if not (0.0 < keep_prob <= 1.0):
        raise ContractViolation(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not train or keep_prob == 1.0:
        out = Tensor(a.data.copy())
        tape.record(out, (a,), lambda g: (g,))
        return out
    rng = np.random.Generator(np.random.PCG64(seed))
    mask = (rng.random(a.data.shape) < keep_prob).astype(a.data.dtype)
    mask /= keep_prob
    out = Tensor(a.data * mask)
    tape.record(out, (a,), lambda g: (g * mask,))
    return out


def l2_normalize(tape: Tape, a: Tensor) -> Tensor:
    """Normalize rows (last axis) to unit L2 norm."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, np.asarray(1e-12, dtype=x.dtype))
    y = x / norm
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * dot) / norm,)

    tape.record(out, (a,), backward)
    return out


def concat(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise DimensionError("concat operands must agree on leading axes")
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))
    na = a.data.shape[-1]

    def backward(g):
        return g[..., :na], g[..., na:]

    tape.record(out, (a, b), backward)
    return out


def slice_prefix(tape: Tape, a: Tensor, m: int) -> Tensor:
    """First ``m`` components of the last axis; backward scatters into the prefix."""
    if not (1 <= m <= a.data.shape[-1]):
        raise DimensionError(f"prefix width {m} out of range for {a.data.shape}")
    out = Tensor(a.data[..., :m].copy())

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., :m] = g
        return (full,)

    tape.record(out, (a,), backward)
    return out


def take_rows(tape: Tape, a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows by index; backward scatter-adds (duplicate rows accumulate)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    tape.record(out, (a,), backward)
    return out


def rowsum(tape: Tape, a: Tensor) -> Tensor:
    """Sum over the last axis."""
    out = Tensor(a.data.sum(axis=-1))

    def backward(g):
        return (np.broadcast_to(g[..., None], a.data.shape).copy(),)

    tape.record(out, (a,), backward)
    return out


def sum_all(tape: Tape, a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))
    tape.record(out, (a,), lambda g: (np.full_like(a.data, g),))
    return out


def mean_all(tape: Tape, a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.asarray(a.data.mean(), dtype=a.data.dtype))
    tape.record(out, (a,), lambda g: (np.full_like(a.data, g / n),))
    return out


def hashed_embedding_sum(
    tape: Tape,
    table: Tensor,
    indices: np.ndarray,
    values: np.ndarray,
    rows: np.ndarray,
    n_rows: int,
) -> Tensor:
    """Weighted row-gather-and-sum into ``n_rows`` outputs.

    ``out[r] = sum_j values[j] * table[indices[j]]`` over entries with
    ``rows[j] == r``. This is the sparse projection of a hashed bag of
    features; only touched table rows receive gradient.
    """
    if table.data.ndim != 2:
        raise DimensionError("embedding table must be 2-D")
    indices = np.asarray(indices, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.int64)
    vals = np.asarray(values, dtype=table.data.dtype)
    out_data = np.zeros((n_rows, table.data.shape[1]), dtype=table.data.dtype)
    np.add.at(out_data, rows, table.data[indices] * vals[:, None])
    out = Tensor(out_data)

    def backward(g):
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, indices, g[rows] * vals[:, None])
        return (dtable,)

    tape.record(out, (table,), backward)
    return out


def softmax_cross_entropy_rows(tape: Tape, logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row ``-log softmax(logits)[label]`` with a row-max shift for stability."""
    z = logits.data
    if z.ndim != 2:
        raise DimensionError("logits must be 2-D")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (z.shape[0],):
        raise DimensionError("one label per row required")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= z.shape[1]:
        raise ContractViolation("label index out of range")
    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    rows = np.arange(z.shape[0])
    out = Tensor(-log_probs[rows, labels])

    def backward(g):
        soft = expz / denom
        soft[rows, labels] -= 1.0
        return (soft * g[:, None],)

    tape.record(out, (logits,), backward)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam first/second moment estimates keyed by parameter name."""

    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place, from each param's ``.grad``.

    Parameters without a gradient (or flagged ``requires_grad=False``) are
    skipped. Raises :class:`TrainingError` naming the parameter if its
    gradient is non-finite.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, p in enumerate(params):
        if not p.requires_grad:
            continue
        key = p.name or f"param{i}"
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {key!r}")
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-parameter max error of analytic vs central-difference gradients.

    Errors are normalized by ``max(|analytic|, |numeric|, 1)`` so tiny
    gradients are compared absolutely rather than blowing up the ratio.
    """

    max_rel_err: dict
    tol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def grad_check(
    fn,
    inputs,
    tol: float = 1e-5,
    h: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Check ``fn(tape, *inputs) -> scalar Tensor`` against central differences.

    Inputs are copied to float64. When a tensor has more than ``max_entries``
    elements, a seeded random subset of coordinates is probed.
    """
    work = [
        Tensor(t.data.astype(np.float64), requires_grad=True, name=t.name or f"in{i}")
        for i, t in enumerate(inputs)
    ]
    tape = Tape()
    loss = fn(tape, *work)
    if loss.data.size != 1:
        raise DimensionError("grad_check requires a scalar-valued fn")
    tape.backward(loss)
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in work
    ]

    rng = np.random.Generator(np.random.PCG64(seed))
    errors: dict[str, float] = {}
    for t, a in zip(work, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            probe = rng.choice(n, size=max_entries, replace=False)
        else:
            probe = np.arange(n)
        worst = 0.0
        a_flat = a.reshape(-1)
        for j in probe:
            orig = flat[j]
            flat[j] = orig + h
            f_plus = float(fn(Tape(), *work).data)
            flat[j] = orig - h
            f_minus = float(fn(Tape(), *work).data)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(a_flat[j]), abs(numeric), 1.0)
            worst = max(worst, abs(a_flat[j] - numeric) / denom)
        errors[t.name] = worst
    return GradCheckReport(max_rel_err=errors, tol=tol)
