"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of operations the convolutional classifier needs are
provided. Operations record themselves onto the innermost active
:class:`Graph`; outside a graph they just compute values.

Most operations accept an optional leading batch axis so a mini-batch can
go through one call.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

PROB_CLAMP = 1e-12


class ShapeMismatch(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class GraphNotFinalized(RuntimeError):
    pass


class Tensor:
    """A value array with a gradient buffer of the same shape."""

    __slots__ = ("values", "grad", "name")

    def __init__(self, values, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        if any(d < 1 for d in self.values.shape):
            raise ShapeMismatch(f"tensor dims must be >= 1, got {self.values.shape}")
        self.grad = np.zeros_like(self.values)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f"{self.name}, " if self.name else ""
        return f"Tensor({label}shape={self.shape})"


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[], None]


_active: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar("active_graph", default=None)


class Graph:
    """Topologically ordered tape of operation records.

    Records are appended as operations run, so every record's inputs were
    produced before it. Use as a context manager to make it the recording
    target.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._token = None
        self._outputs: set[int] = set()

    def __enter__(self) -> "Graph":
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def add(self, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable[[], None]) -> None:
        self.records.append(_Record(inputs, output, backward))
        self._outputs.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs


def _record(inputs: tuple[Tensor, ...], output: Tensor, backward: Callable[[], None]) -> Tensor:
    graph = _active.get()
    if graph is not None:
        graph.add(inputs, output, backward)
    return output


def _result(values: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = np.zeros_like(values)
    out.name = None
    return out


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor in ``graph``.

    Gradients accumulate; zero parameter gradients between steps.
    """
    if loss.size != 1:
        raise ShapeMismatch("backward needs a scalar loss")
    if not graph.produced(loss):
        raise GraphNotFinalized("loss was not produced inside this graph")
    loss.grad += 1.0
    for rec in reversed(graph.records):
        rec.backward()


# --------------------------------------------------------------------- ops


def embed_lookup(table: Tensor, indices, padding_idx: int | None = None) -> Tensor:
    """Gather rows of ``table``; ``indices`` may be [N] or [B, N].

    Rows at ``padding_idx`` receive no gradient.
    """
    idx = np.asarray(indices, dtype=np.int64)
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise IndexOutOfRange(f"index outside [0, {rows})")
    out = _result(table.values[idx])

    def _backward() -> None:
        flat_idx = idx.reshape(-1)
        g = out.grad.reshape(-1, table.shape[1])
        if padding_idx is not None:
            keep = flat_idx != padding_idx
            flat_idx, g = flat_idx[keep], g[keep]
        np.add.at(table.grad, flat_idx, g)

    return _record((table,), out, _backward)


def conv_window(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid 1-D convolution over the word axis, before activation.

    Shapes: ``x`` [N, D] or [B, N, D]; ``w`` [K, D] or a bank [F, K, D];
    ``b`` [N-K+1] or [F, N-K+1]. Output is [(B,) (F,) N-K+1] where

        out[m] = sum_k sum_d x[m+k, d] * w[k, d] + b[m]
    """
    xv, wv = x.values, w.values
    single_x = xv.ndim == 2
    single_w = wv.ndim == 2
    if single_x:
        xv = xv[None]
    if single_w:
        wv = wv[None]
    if xv.ndim != 3 or wv.ndim != 3:
        raise ShapeMismatch(f"bad conv shapes x={x.shape} w={w.shape}")
    bsz, n, d = xv.shape
    f, k, dw = wv.shape
    if dw != d:
        raise ShapeMismatch(f"embedding dim {d} != filter dim {dw}")
    if n < k:
        raise ShapeMismatch(f"sequence length {n} shorter than kernel {k}")
    m = n - k + 1
    bv = b.values.reshape(f, m) if b.values.size == f * m else None
    if bv is None:
        raise ShapeMismatch(f"bias shape {b.shape} does not match ({f}, {m})")

    # acc[b, m, f]
    acc = np.zeros((bsz, m, f))
    for j in range(k):
        acc += xv[:, j : j + m, :] @ wv[:, j, :].T
    vals = acc.transpose(0, 2, 1) + bv
    if single_w:
        vals = vals[:, 0, :]
    if single_x:
        vals = vals[0]
    out = _result(np.ascontiguousarray(vals))

    def _backward() -> None:
        g = out.grad.reshape(bsz, f, m)
        b.grad += g.sum(axis=0).reshape(b.shape)
        gt = g.transpose(0, 2, 1)  # [B, M, F]
        g2 = gt.reshape(-1, f)
        gx = np.zeros((bsz, n, d))
        gw = np.zeros((f, k, d))
        for j in range(k):
            gx[:, j : j + m, :] += gt @ wv[:, j, :]
            gw[:, j, :] += g2.T @ xv[:, j : j + m, :].reshape(-1, d)
        x.grad += gx.reshape(x.shape)
        w.grad += gw.reshape(w.shape)

    return _record((x, w, b), out, _backward)


def relu(z: Tensor) -> Tensor:
    active = z.values > 0
    out = _result(np.where(active, z.values, 0.0))

    def _backward() -> None:
        z.grad += out.grad * active

    return _record((z,), out, _backward)


def max_over_time(h: Tensor) -> Tensor:
    """Max along the last axis. Ties go to the lowest index.

    A 1-D input yields a scalar (shape ``()``); higher ranks drop the last axis.
    """
    if h.shape[-1] < 1:
        raise ShapeMismatch("max_over_time needs at least one position")
    arg = np.argmax(h.values, axis=-1)
    vals = np.take_along_axis(h.values, arg[..., None], axis=-1)[..., 0]
    out = _result(np.asarray(vals, dtype=np.float64))

    def _backward() -> None:
        np.put_along_axis(
            h.grad,
            arg[..., None],
            np.take_along_axis(h.grad, arg[..., None], axis=-1) + out.grad[..., None],
            axis=-1,
        )

    return _record((h,), out, _backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    vals = np.concatenate([p.values for p in parts], axis=axis)
    out = _result(vals)
    ax = axis % vals.ndim
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def _backward() -> None:
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * vals.ndim
            sl[ax] = slice(lo, hi)
            p.grad += out.grad[tuple(sl)]

    return _record(tuple(parts), out, _backward)


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, shifted by the row max."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def dense_softmax(hhat: Tensor, mask: Tensor | None, W: Tensor, b: Tensor, scale: float = 1.0) -> Tensor:
    """Output layer: softmax((hhat * mask * scale) @ W + b).

    ``hhat`` is [L] or [B, L]; ``mask`` matches ``hhat`` (or is None for
    all-ones). ``scale`` lets the caller apply inverted-dropout rescaling
    while the mask itself stays binary.
    """
    hv = hhat.values
    if hv.shape[-1] != W.shape[0] or W.values.ndim != 2 or b.shape != (W.shape[1],):
        raise ShapeMismatch(f"hhat {hhat.shape}, W {W.shape}, b {b.shape}")
    if mask is not None and mask.shape != hhat.shape:
        raise ShapeMismatch(f"mask {mask.shape} != hhat {hhat.shape}")
    mv = np.ones_like(hv) if mask is None else mask.values
    dropped = hv * mv * scale
    y = softmax(dropped @ W.values + b.values)
    out = _result(y)

    def _backward() -> None:
        gy = out.grad
        gz = y * (gy - (gy * y).sum(axis=-1, keepdims=True))
        gz2 = gz.reshape(-1, W.shape[1])
        b.grad += gz2.sum(axis=0)
        W.grad += dropped.reshape(-1, W.shape[0]).T @ gz2
        gd = gz @ W.values.T
        hhat.grad += gd * mv * scale
        if mask is not None:
            mask.grad += gd * hv * scale

    inputs = (hhat, W, b) if mask is None else (hhat, mask, W, b)
    return _record(inputs, out, _backward)


def cross_entropy_loss(Y: Tensor, T, mode: str = "categorical") -> Tensor:
    """Mean cross-entropy of probability rows ``Y`` against one-hot ``T``.

    ``categorical``: -(1/R) sum_i sum_p t ln y.
    ``binary``: -(1/R) sum_i sum_p [t ln y + (1 - t) ln(1 - y)], each output
    treated as its own Bernoulli.
    Probabilities are clamped to [1e-12, 1 - 1e-12] before the log.
    """
    tv = T.values if isinstance(T, Tensor) else np.asarray(T, dtype=np.float64)
    yv = Y.values
    if yv.ndim == 1:
        yv, tv = yv[None], tv.reshape(1, -1)
    if yv.shape != tv.shape:
        raise ShapeMismatch(f"Y {Y.shape} vs T {tv.shape}")
    r = yv.shape[0]
    yc = np.clip(yv, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (yv > PROB_CLAMP) & (yv < 1.0 - PROB_CLAMP)
    if mode == "categorical":
        total = -(tv * np.log(yc)).sum()
        dy = -tv / yc
    elif mode == "binary":
        total = -(tv * np.log(yc) + (1 - tv) * np.log(1 - yc)).sum()
        dy = -tv / yc + (1 - tv) / (1 - yc)
    else:
        raise ValueError(f"unknown cross-entropy mode {mode!r}")
    loss_val = total / r
    if not np.isfinite(loss_val):
        raise NonFiniteLoss(f"cross-entropy evaluated to {loss_val}")
    out = _result(np.array(loss_val))

    def _backward() -> None:
        Y.grad += (out.grad * dy * inside / r).reshape(Y.shape)

    return _record((Y,), out, _backward)


def l2_penalty(W: Tensor, eta: float, mode: str = "squared") -> Tensor:
    """Weight decay term: ``eta * sum(w**2)`` or, in ``norm`` mode, ``eta * ||w||``."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    sq = float((W.values**2).sum())
    if mode == "squared":
        val = eta * sq
    elif mode == "norm":
        norm = np.sqrt(sq)
        val = eta * norm
    else:
        raise ValueError(f"unknown penalty mode {mode!r}")
    out = _result(np.array(val))

    def _backward() -> None:
        if mode == "squared":
            W.grad += out.grad * 2.0 * eta * W.values
        elif norm > 0:
            W.grad += out.grad * eta * W.values / norm

    return _record((W,), out, _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.values + b.values)

    def _backward() -> None:
        a.grad += out.grad
        b.grad += out.grad

    return _record((a, b), out, _backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _result(a.values.reshape(shape))

    def _backward() -> None:
        a.grad += out.grad.reshape(a.shape)

    return _record((a,), out, _backward)


def weighted_sum(a: Tensor, weights) -> Tensor:
    """Scalar ``sum(a * weights)`` for a constant weight array."""
    wv = np.broadcast_to(np.asarray(weights, dtype=np.float64), a.shape)
    out = _result(np.array(float((a.values * wv).sum())))

    def _backward() -> None:
        a.grad += out.grad * wv

    return _record((a,), out, _backward)
