"""Dense tensors with reverse-mode automatic differentiation.

Everything revolves around an explicit recording tape: each op executed while
a Tape is active appends one record, and ``Tape.backward`` replays the records
in exact reverse order. Leaf tensors (parameters, inputs) accumulate into
their ``.grad`` buffers across backward calls until ``zero_grad``; gradients
of tensors produced on the tape are cleared at the start of every backward.

Running ops with no active tape is the inference path: values are computed,
nothing is recorded.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def add_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("out", "backward")

    def __init__(self, out: Tensor, backward: Callable[[np.ndarray], None]):
        self.out = out
        self.backward = backward


class Tape:
    """Ordered operation record for one forward/backward pass.

    Confined to a single thread; use as a context manager::

        with Tape() as tape:
            loss = ...
            tape.backward(loss)
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._records.append(_Record(out, backward))

    def backward(self, root: Tensor) -> None:
        """Populate gradients of every tensor reachable from ``root``.

        Gradients of tape-produced tensors are reset first; leaf tensors
        (never an output on this tape) keep accumulating across calls.
        """
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
        for rec in self._records:
            rec.out.grad = None
        root.add_grad(np.ones_like(root.data))
        for rec in reversed(self._records):
            if rec.out.grad is not None:
                rec.backward(rec.out.grad)


def _finish(out: Tensor, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, backward)
    return out


def _require_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise ShapeError(f"{op} expects a 2-D tensor, got shape {t.data.shape}")


# ---------------------------------------------------------------------------
# arithmetic / structural ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.add_grad(g @ b.data.T)
        if b.requires_grad:
            b.add_grad(a.data.T @ g)

    return _finish(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a row-bias b of shape (n,) against a (m, n).

    No other broadcasting is supported.
    """
    bias_row = a.data.ndim == 2 and b.data.ndim == 1 and b.data.shape[0] == a.data.shape[1]
    if not bias_row and a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes disagree: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.add_grad(g)
        if b.requires_grad:
            b.add_grad(g.sum(axis=0) if bias_row else g)

    return _finish(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.add_grad(g * c)

    return _finish(out, (a,), backward)


_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation (differentiable everywhere)."""
    d = x.data
    d2 = d * d
    t = np.tanh(_GELU_C0 * (d + _GELU_C1 * (d2 * d)))
    out = Tensor(0.5 * d * (1.0 + t))

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            local = 0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * _GELU_C0 * (
                1.0 + 3.0 * _GELU_C1 * d2
            )
            x.add_grad(g * local)

    return _finish(out, (x,), backward)


LAYERNORM_EPS = 1e-5


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize each row of x to zero mean / unit variance, then apply gain and bias."""
    _require_2d(x, "layernorm")
    n = x.data.shape[1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layernorm gain/bias must have shape ({n},), got {gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain.add_grad((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias.add_grad(g.sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            dx = inv * (
                gy
                - gy.mean(axis=1, keepdims=True)
                - xhat * (gy * xhat).mean(axis=1, keepdims=True)
            )
            x.add_grad(dx)

    return _finish(out, (x, gain, bias), backward)


def gather_rows(m: Tensor, ids: Sequence[int]) -> Tensor:
    """Select rows of a 2-D tensor by index (embedding lookup / row extraction)."""
    _require_2d(m, "gather_rows")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= m.data.shape[0]):
        raise ShapeError(f"gather_rows index out of range for {m.data.shape[0]} rows")
    out = Tensor(m.data[idx])
    # plain fancy-index assignment suffices (and is much faster) when no row repeats
    unique = len(np.unique(idx)) == idx.size

    def backward(g: np.ndarray) -> None:
        if m.requires_grad:
            buf = np.zeros_like(m.data)
            if unique:
                buf[idx] = g
            else:
                np.add.at(buf, idx, g)
            m.add_grad(buf)

    return _finish(out, (m,), backward)


def concat_rows(*tensors: Tensor) -> Tensor:
    if not tensors:
        raise ShapeError("concat_rows needs at least one tensor")
    for t in tensors:
        _require_2d(t, "concat_rows")
    widths = {t.data.shape[1] for t in tensors}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows column counts disagree: {sorted(widths)}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))
    offsets = np.cumsum([0] + [t.data.shape[0] for t in tensors])

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.add_grad(g[lo:hi])

    return _finish(out, tensors, backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    _require_2d(x, "slice_rows")
    rows = x.data.shape[0]
    if not (0 <= start <= stop <= rows):
        raise ShapeError(f"slice_rows [{start}:{stop}] out of range for {rows} rows")
    out = Tensor(x.data[start:stop].copy())

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[start:stop] = g
            x.add_grad(buf)

    return _finish(out, (x,), backward)


# ---------------------------------------------------------------------------
# attention and loss
# ---------------------------------------------------------------------------


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, block_len: int) -> Tensor:
    """Multi-head causal self-attention over packed fixed-length blocks.

    q, k, v are (B * block_len, d). Attention is computed independently inside
    each consecutive block of ``block_len`` rows; row i of a block attends to
    rows 0..i of the same block.
    """
    for t, name in ((q, "q"), (k, "k"), (v, "v")):
        _require_2d(t, f"causal_attention {name}")
    if not (q.data.shape == k.data.shape == v.data.shape):
        raise ShapeError(
            f"causal_attention q/k/v shapes disagree: {q.data.shape}, {k.data.shape}, {v.data.shape}"
        )
    rows, d = q.data.shape
    if block_len <= 0 or rows % block_len:
        raise ShapeError(f"rows {rows} not divisible by block_len {block_len}")
    if d % n_heads:
        raise ShapeError(f"model width {d} not divisible by n_heads {n_heads}")
    nb = rows // block_len
    hd = d // n_heads
    scale_f = 1.0 / np.sqrt(hd)

    def split(t: Tensor) -> np.ndarray:
        # (rows, d) -> (nb * n_heads, block_len, hd) for batched matmul
        return np.ascontiguousarray(
            t.data.reshape(nb, block_len, n_heads, hd).transpose(0, 2, 1, 3)
        ).reshape(nb * n_heads, block_len, hd)

    def merge(a: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(
            a.reshape(nb, n_heads, block_len, hd).transpose(0, 2, 1, 3)
        ).reshape(rows, d)

    qh, kh, vh = split(q), split(k), split(v)
    scores = np.matmul(qh, kh.transpose(0, 2, 1))
    scores *= scale_f
    neg = np.finfo(scores.dtype).min
    causal = np.triu(np.full((block_len, block_len), neg, dtype=scores.dtype), k=1)
    scores += causal
    scores -= scores.max(axis=2, keepdims=True)
    np.exp(scores, out=scores)
    probs = scores / scores.sum(axis=2, keepdims=True)
    out = Tensor(merge(np.matmul(probs, vh)))

    def backward(g: np.ndarray) -> None:
        gh = split(Tensor(g))
        if v.requires_grad:
            v.add_grad(merge(np.matmul(probs.transpose(0, 2, 1), gh)))
        if q.requires_grad or k.requires_grad:
            dp = np.matmul(gh, vh.transpose(0, 2, 1))
            ds = probs * (dp - (dp * probs).sum(axis=2, keepdims=True))
            if q.requires_grad:
                q.add_grad(merge(np.matmul(ds, kh)) * scale_f)
            if k.requires_grad:
                k.add_grad(merge(np.matmul(ds.transpose(0, 2, 1), qh)) * scale_f)

    return _finish(out, (q, k, v), backward)


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int], loss_mask: Sequence[bool]) -> Tensor:
    """Mean negative log-likelihood over masked-in rows of a (T, V) logit matrix.

    Rows with loss_mask False contribute nothing: their targets are never read
    and their logit gradients are exactly zero.
    """
    _require_2d(logits, "softmax_cross_entropy")
    rows, vocab = logits.data.shape
    tgt = np.asarray(targets, dtype=np.intp)
    mask = np.asarray(loss_mask, dtype=bool)
    if tgt.shape != (rows,) or mask.shape != (rows,):
        raise ShapeError(
            f"targets/loss_mask must have length {rows}, got {tgt.shape} and {mask.shape}"
        )
    keep = np.flatnonzero(mask)
    if keep.size == 0:
        raise ValueError("softmax_cross_entropy: all positions masked out, mean undefined")
    sel_tgt = tgt[keep]
    if sel_tgt.min() < 0 or sel_tgt.max() >= vocab:
        raise ValueError(f"softmax_cross_entropy: target id out of range for vocab {vocab}")
    sel = logits.data[keep]
    m = sel.max(axis=1, keepdims=True)
    shifted = sel - m
    lse = np.log(np.exp(shifted).sum(axis=1)) + m[:, 0]
    nll = lse - sel[np.arange(keep.size), sel_tgt]
    out = Tensor(np.asarray(nll.mean(), dtype=logits.data.dtype))

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            e = np.exp(shifted)
            p = e / e.sum(axis=1, keepdims=True)
            p[np.arange(keep.size), sel_tgt] -= 1.0
            buf = np.zeros_like(logits.data)
            buf[keep] = p * (float(g) / keep.size)
            logits.add_grad(buf)

    return _finish(out, (logits,), backward)
