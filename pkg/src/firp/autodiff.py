"""Dense float32 tensors with reverse-mode automatic differentiation.

A define-by-run tape records every primitive applied while a ``Tape`` is
active; ``backward`` replays it once in reverse. Without an active tape the
same primitives run as plain numpy, which is the inference fast path.

All matrix products accumulate in float64 internally and round the result to
float32. This makes every output row a pure function of its own inputs,
independent of how many other rows share the call — the property that lets
cached incremental decoding reproduce batch forwards bit-for-bit.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, TrainingError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "zero_grads",
    "add",
    "mul",
    "scale",
    "matmul",
    "bmm",
    "transpose",
    "to_heads",
    "from_heads",
    "concat_rows",
    "concat_slots",
    "take_row",
    "slice_rows",
    "softmax",
    "masked_softmax",
    "rmsnorm",
    "silu",
    "embedding_lookup",
    "rotary_tables",
    "rotary_apply",
    "cross_entropy",
    "kl_divergence",
    "sum_all",
    "adamw_step",
    "AdamWState",
    "fast_matmul",
    "KL_EPS",
]

KL_EPS = 1e-9


class Tensor:
    """A float32 array plus gradient bookkeeping.

    Tensors are treated as immutable after construction; the only sanctioned
    in-place mutation is an optimizer update on a trainable parameter.
    """

    __slots__ = ("data", "requires_grad", "grad", "f64")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor initialised with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.f64: float | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        """Scalar value; scalar reductions retain their float64 result."""
        if self.f64 is not None:
            return self.f64
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data)

    @staticmethod
    def wrap(arr: np.ndarray) -> "Tensor":
        """Wrap an existing float32 array without copying or validating."""
        t = Tensor.__new__(Tensor)
        t.data = arr if arr.dtype == np.float32 else arr.astype(np.float32)
        t.requires_grad = False
        t.grad = None
        t.f64 = None
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications for one backward pass.

    A tape is confined to a single thread of execution; independent tapes may
    run concurrently. Entering the context activates recording, leaving it
    frees the recorded graph.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()
        self.nodes.clear()

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self.nodes.append(_Node(out, parents, backward_fn))


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _track(out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """Record ``out`` on the active tape if any parent participates in grads."""
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every tensor the tape touched.

    Each node is visited exactly once, in reverse recording order. Gradients
    accumulate into ``.grad`` (callers zero them between steps). Tensors not
    on the path to ``loss`` keep ``grad is None``, read as zero.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.out.grad
        if out_grad is None:
            continue
        parent_grads = node.backward_fn(out_grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g.astype(np.float32, copy=True)
            else:
                parent.grad = parent.grad + g.astype(np.float32, copy=False)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


_FAST_MATMUL = False


@contextmanager
def fast_matmul():
    """Run matrix products in plain float32 BLAS within the context.

    Faster, but output rows then depend on the batch shape at the last bit.
    Training loops use this; decoding paths must not, because the exactness
    of speculative verification rests on shape-independent row results.
    """
    global _FAST_MATMUL
    prev = _FAST_MATMUL
    _FAST_MATMUL = True
    try:
        yield
    finally:
        _FAST_MATMUL = prev


def _mm64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, rounded back to float32."""
    if _FAST_MATMUL:
        return np.matmul(a, b)
    return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(np.float32)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-d bias broadcast over rows."""
    if a.shape == b.shape:
        out = Tensor.wrap(a.data + b.data)
        if a.data.ndim == 0 and a.f64 is not None and b.f64 is not None:
            out.f64 = a.f64 + b.f64

        def back(g):
            return g, g

        return _track(out, (a, b), back)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = Tensor.wrap(a.data + b.data)
        lead = tuple(range(a.data.ndim - 1))

        def back(g):
            return g, g.sum(axis=lead)

        return _track(out, (a, b), back)
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor.wrap(a.data * b.data)

    def back(g):
        return g * b.data, g * a.data

    return _track(out, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor.wrap(a.data * np.float32(c))

    def back(g):
        return (g * np.float32(c),)

    return _track(out, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product ``[m,k] @ [k,n] -> [m,n]``."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor.wrap(_mm64(a.data, b.data))

    def back(g):
        return _mm64(g, b.data.T), _mm64(a.data.T, g)

    return _track(out, (a, b), back)


def bmm(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """Batched matrix product over a shared leading dimension."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    bd = b.data.transpose(0, 2, 1) if transpose_b else b.data
    if a.shape[2] != bd.shape[1]:
        raise DimensionError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor.wrap(_mm64(a.data, bd))

    def back(g):
        ga = _mm64(g, bd.transpose(0, 2, 1))
        gb = _mm64(a.data.transpose(0, 2, 1), g)
        if transpose_b:
            gb = gb.transpose(0, 2, 1)
        return ga, gb

    return _track(out, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor.wrap(np.ascontiguousarray(a.data.T))

    def back(g):
        return (np.ascontiguousarray(g.T),)

    return _track(out, (a,), back)


def to_heads(a: Tensor, n_heads: int) -> Tensor:
    """Split ``[seq, d]`` into per-head form ``[heads, seq, d/heads]``."""
    seq, d = a.shape
    if d % n_heads:
        raise DimensionError(f"to_heads: width {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    out = Tensor.wrap(np.ascontiguousarray(a.data.reshape(seq, n_heads, hd).transpose(1, 0, 2)))

    def back(g):
        return (np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(seq, d),)

    return _track(out, (a,), back)


def from_heads(a: Tensor) -> Tensor:
    """Merge ``[heads, seq, hd]`` back into ``[seq, heads*hd]``."""
    h, seq, hd = a.shape
    out = Tensor.wrap(np.ascontiguousarray(a.data.transpose(1, 0, 2)).reshape(seq, h * hd))

    def back(g):
        return (np.ascontiguousarray(g.reshape(seq, h, hd).transpose(1, 0, 2)),)

    return _track(out, (a,), back)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack two row blocks vertically."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows: incompatible shapes {a.shape} and {b.shape}")
    na = a.shape[0]
    out = Tensor.wrap(np.concatenate([a.data, b.data], axis=0))

    def back(g):
        return g[:na], g[na:]

    return _track(out, (a, b), back)


def concat_slots(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate per-head key/value blocks ``[H, s, hd]`` along the slot axis."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise DimensionError(f"concat_slots: incompatible shapes {a.shape} and {b.shape}")
    na = a.shape[1]
    out = Tensor.wrap(np.concatenate([a.data, b.data], axis=1))

    def back(g):
        return g[:, :na], g[:, na:]

    return _track(out, (a, b), back)


def take_row(a: Tensor, idx: int) -> Tensor:
    """Extract one row of a matrix as a 1-d tensor."""
    if a.data.ndim != 2 or not (0 <= idx < a.shape[0]):
        raise DimensionError(f"take_row: row {idx} invalid for shape {a.shape}")
    out = Tensor.wrap(a.data[idx].copy())

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _track(out, (a,), back)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[0]):
        raise DimensionError(f"slice_rows: [{start}:{stop}] invalid for shape {a.shape}")
    out = Tensor.wrap(a.data[start:stop].copy())

    def back(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _track(out, (a,), back)


def masked_softmax(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Row-wise softmax over the last axis; ``False`` mask entries get weight 0.

    ``mask`` is a boolean array broadcastable to ``x``. Rows with no admitted
    entry are a caller bug and raise loudly.
    """
    data = x.data.astype(np.float64)
    if mask is not None:
        if mask.dtype != np.bool_:
            raise ContractError("softmax mask must be boolean")
        data = np.where(mask, data, -np.inf)
        if not np.all(np.max(data, axis=-1) > -np.inf):
            raise ContractError("softmax row with every entry masked")
    m = np.max(data, axis=-1, keepdims=True)
    e = np.exp(data - m)
    s = np.sum(e, axis=-1, keepdims=True)
    # float64 reduction: masked entries are exact zeros, so after the cast
    # back to float32 the weights are insensitive to mask/column layout
    p = (e / s).astype(np.float32)
    out = Tensor.wrap(p)

    def back(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _track(out, (x,), back)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis; rows sum to one."""
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    return masked_softmax(x, None)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Root-mean-square normalisation over the last axis with a learned gain."""
    if x.shape[-1] != gain.shape[0] or gain.data.ndim != 1:
        raise DimensionError(f"rmsnorm: input {x.shape} vs gain {gain.shape}")
    d = x.shape[-1]
    ms = np.mean(np.square(x.data, dtype=np.float64), axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(ms + eps)).astype(np.float32)
    normed = x.data * inv
    out = Tensor.wrap(normed * gain.data)

    def back(g):
        gy = g * gain.data
        coeff = np.sum(gy * x.data, axis=-1, keepdims=True) * (inv.astype(np.float64) ** 3) / d
        gx = gy * inv - x.data * coeff.astype(np.float32)
        ggain = np.sum(g * normed, axis=tuple(range(x.data.ndim - 1)))
        return gx.astype(np.float32), ggain.astype(np.float32)

    return _track(out, (x, gain), back)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor.wrap(x.data * sig)

    def back(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _track(out, (x,), back)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of an embedding table by integer id."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"embedding ids must be 1-d, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding id out of range for table {table.shape}")
    out = Tensor.wrap(table.data[ids].copy())

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _track(out, (table,), back)


def rotary_tables(head_dim: int, max_positions: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """Precompute cos/sin tables ``[max_positions, head_dim/2]`` for rotations."""
    if head_dim % 2:
        raise DimensionError(f"rotary head dim must be even, got {head_dim}")
    half = head_dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.arange(max_positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def rotary_apply(x: Tensor, positions: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate per-head vectors ``[H, seq, hd]`` by each row's position angle.

    Adjacent coordinate pairs form the rotation planes. The backward pass is
    the inverse rotation applied to the incoming gradient.
    """
    h, seq, hd = x.shape
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (seq,):
        raise DimensionError(f"rotary positions {positions.shape} vs sequence {seq}")
    if positions.size and (positions.min() < 0 or positions.max() >= cos.shape[0]):
        raise ContractError("rotary position outside precomputed table")
    c = cos[positions][None, :, :]
    s = sin[positions][None, :, :]
    pairs = x.data.reshape(h, seq, hd // 2, 2)
    even, odd = pairs[..., 0], pairs[..., 1]
    rot = np.empty_like(pairs)
    rot[..., 0] = even * c - odd * s
    rot[..., 1] = even * s + odd * c
    out = Tensor.wrap(rot.reshape(h, seq, hd))

    def back(g):
        gp = g.reshape(h, seq, hd // 2, 2)
        ge, go = gp[..., 0], gp[..., 1]
        ung = np.empty_like(gp)
        ung[..., 0] = ge * c + go * s
        ung[..., 1] = -ge * s + go * c
        return (ung.reshape(h, seq, hd),)

    return _track(out, (x,), back)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy of ``[seq, vocab]`` logits vs target ids."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n, v = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise DimensionError(f"cross_entropy target id out of range for vocab {v}")
    x64 = logits.data.astype(np.float64)
    m = x64.max(axis=-1, keepdims=True)
    e = np.exp(x64 - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = x64 - m - np.log(z)
    loss = -logp[np.arange(n), targets].mean()
    out = Tensor.wrap(np.float32(loss))
    out.f64 = float(loss)
    probs = (e / z).astype(np.float32)

    def back(g):
        gl = probs.copy()
        gl[np.arange(n), targets] -= 1.0
        return (gl * (float(g) / n),)

    return _track(out, (logits,), back)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) between two probability rows, with q clamped at ``KL_EPS``.

    Entries with p == 0 contribute exactly zero.
    """
    if p.data.ndim != 1 or q.data.ndim != 1 or p.shape != q.shape:
        raise DimensionError(f"kl_divergence: incompatible shapes {p.shape} and {q.shape}")
    pc = np.maximum(p.data.astype(np.float64), KL_EPS)
    qc = np.maximum(q.data.astype(np.float64), KL_EPS)
    log_ratio = np.log(pc) - np.log(qc)
    terms = np.where(p.data > 0, p.data.astype(np.float64) * log_ratio, 0.0)
    total = float(terms.sum())
    out = Tensor.wrap(np.float32(total))
    out.f64 = total

    def back(g):
        gp = (log_ratio + 1.0).astype(np.float32)
        gq = np.where(p.data > 0, -(p.data.astype(np.float64) / qc), 0.0).astype(np.float32)
        return gp * float(g), gq * float(g)

    return _track(out, (p, q), back)


def sum_all(x: Tensor) -> Tensor:
    total = float(x.data.astype(np.float64).sum())
    out = Tensor.wrap(np.float32(total))
    out.f64 = total

    def back(g):
        return (np.full_like(x.data, float(g)),)

    return _track(out, (x,), back)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamWState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> AdamWState:
    """One decoupled-weight-decay Adam update, applied in place.

    Deterministic given identical inputs. Parameters missing from ``grads``
    (or with ``None`` gradients) are treated as zero-gradient.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= np.float32(lr) * update.astype(np.float32)
    return state


def finite_difference_gradient(
    loss_fn: Callable[[], float],
    param: Tensor,
    indices: Sequence[tuple[int, ...]],
    delta: float = 1e-3,
) -> np.ndarray:
    """Central finite differences of ``loss_fn`` w.r.t. selected entries of ``param``.

    Test oracle helper: perturbs entries in place and restores them.
    """
    out = np.zeros(len(indices), dtype=np.float64)
    for k, idx in enumerate(indices):
        orig = param.data[idx]
        param.data[idx] = orig + delta
        up = loss_fn()
        param.data[idx] = orig - delta
        down = loss_fn()
        param.data[idx] = orig
        out[k] = (up - down) / (2.0 * delta)
    return out
