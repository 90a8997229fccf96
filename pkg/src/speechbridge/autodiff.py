"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array; operations executed while a
:class:`Tape` is active record backward rules onto it. ``backward`` replays
the tape once, accumulating gradients additively into leaf tensors. Training
runs in float32, gradient checks and oracle tests in float64.

Design constraints:
  * single active tape, single-threaded construction and replay;
  * no double differentiation (backward rules are plain numpy);
  * gradient accumulation is additive, the caller zeroes grads per step.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import _backend as bk

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "gelu",
    "embedding",
    "concat_seq",
    "split_seq",
    "slice_seq",
    "masked_fill",
    "tsum",
    "tmean",
    "dropout",
    "softmax_last",
    "layer_norm",
    "conv1d_stride2",
    "cross_entropy_rows",
    "soft_cross_entropy_rows",
    "mse",
    "detach",
]


class Tensor:
    """A shaped real-valued array, optionally participating in a tape."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._tape: Optional["Tape"] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Topologically ordered record of operations for one backward pass."""

    _stack: list["Tape"] = []
    _grad_paused: int = 0

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._stack.pop()

    @classmethod
    def active(cls) -> Optional["Tape"]:
        if cls._grad_paused or not cls._stack:
            return None
        return cls._stack[-1]


class no_grad:
    """Context that suspends tape recording (teacher passes, decoding)."""

    def __enter__(self):
        Tape._grad_paused += 1
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._grad_paused -= 1


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    tape = Tape.active()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append((out, inputs, bwd))
        tape._produced.add(id(out))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    The tape is cleared afterwards; running backward twice on the same graph
    is rejected.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or id(loss) not in tape._produced:
        raise RuntimeError(
            "backward: loss is not attached to a live tape "
            "(double backward is unsupported)"
        )
    adjoint: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)
    }
    produced = tape._produced
    for out, inputs, bwd in reversed(tape.nodes):
        g = adjoint.pop(id(out), None)
        if g is None:
            continue
        grads = bwd(g)
        for inp, gi in zip(inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if id(inp) in produced:
                prev = adjoint.get(id(inp))
                adjoint[id(inp)] = gi if prev is None else prev + gi
            else:
                inp.grad = np.array(gi) if inp.grad is None else inp.grad + gi
    tape.nodes.clear()
    produced.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear algebra primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(c))
    return _record(out, (a,), lambda g: (g * a.data.dtype.type(c),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(
            f"matmul: inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def gelu(a: Tensor) -> Tensor:
    flat = np.ascontiguousarray(a.data.reshape(-1))
    out = Tensor(bk.gelu_fwd(flat).reshape(a.data.shape))

    def bwd(g):
        gx = bk.gelu_bwd(flat, np.ascontiguousarray(g.reshape(-1)))
        return (gx.reshape(a.data.shape),)

    return _record(out, (a,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"embedding: id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = Tensor(table.data[ids])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), bwd)


def concat_seq(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the sequence axis (axis 0)."""
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ValueError(
            f"concat_seq: trailing dimensions differ: {a.data.shape} vs {b.data.shape}"
        )
    n = a.data.shape[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0))
    return _record(out, (a, b), lambda g: (g[:n], g[n:]))


def slice_seq(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice ``a[start:stop]`` along the sequence axis."""
    if not (0 <= start <= stop <= a.data.shape[0]):
        raise ValueError(
            f"slice_seq: [{start}:{stop}] out of range for length {a.data.shape[0]}"
        )
    out = Tensor(a.data[start:stop])

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[start:stop] = g
        return (gx,)

    return _record(out, (a,), bwd)


def split_seq(a: Tensor, n: int) -> tuple[Tensor, Tensor]:
    """Split along the sequence axis at position ``n``; exact inverse of
    ``concat_seq`` at the recorded boundary."""
    return slice_seq(a, 0, n), slice_seq(a, n, a.data.shape[0])


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = Tensor(np.where(mask, a.data.dtype.type(value), a.data))
    return _record(out, (a,), lambda g: (np.where(mask, 0.0, g),))


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is not None and a.data.shape[axis] == 0:
        raise ValueError(f"sum: reduction over empty axis {axis} of shape {a.shape}")
    if axis is None and a.data.size == 0:
        raise ValueError("sum: reduction over empty tensor")
    out = Tensor(a.data.sum(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape),)

    return _record(out, (a,), bwd)


def tmean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    if n == 0:
        raise ValueError(f"mean: reduction over empty axis {axis} of shape {a.shape}")
    return scale(tsum(a, axis), 1.0 / n)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted-scaling dropout; train-mode only, never used in oracle tests."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    factor = a.data.dtype.type(1.0 / (1.0 - rate))
    out = Tensor(a.data * keep * factor)
    return _record(out, (a,), lambda g: (g * keep * factor,))


# ---------------------------------------------------------------------------
# normalization / loss primitives
# ---------------------------------------------------------------------------

def softmax_last(a: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted for stability."""
    if a.data.shape[-1] < 1:
        raise ValueError("softmax_last: last dimension must be >= 1")
    if a.data.size and np.isnan(a.data.min()):
        raise ValueError("softmax_last: NaN input rejected")
    v = a.data.shape[-1]
    flat = np.ascontiguousarray(a.data.reshape(-1, v))
    p = bk.softmax_rows(flat)
    out = Tensor(p.reshape(a.data.shape))

    def bwd(g):
        gx = bk.softmax_rows_bwd(p, np.ascontiguousarray(g.reshape(-1, v)))
        return (gx.reshape(a.data.shape),)

    return _record(out, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.data.shape[-1]
    if d == 0:
        raise ValueError("layer_norm: zero-length last dimension rejected")
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be > 0, got {eps}")
    flat = np.ascontiguousarray(a.data.reshape(-1, d))
    y, xhat, rstd = bk.layernorm_fwd(flat, gain.data, bias.data, eps)
    out = Tensor(y.reshape(a.data.shape))

    def bwd(g):
        gx, ggain, gbias = bk.layernorm_bwd(
            np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gain.data
        )
        return gx.reshape(a.data.shape), ggain, gbias

    return _record(out, (a, gain, bias), bwd)


def conv1d_stride2(seq: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Width-3, stride-2 1-D convolution over ``seq[L, D_in]``.

    One zero frame of symmetric padding on each side makes the output length
    exactly ceil(L/2) for every L >= 1.
    """
    if seq.data.ndim != 2 or seq.data.shape[0] == 0:
        raise ValueError(f"conv1d_stride2: need a nonempty [L, D_in] input, got {seq.shape}")
    if kernel.data.ndim != 3 or kernel.data.shape[0] != 3:
        raise ValueError(f"conv1d_stride2: kernel must be [3, D_in, D_out], got {kernel.shape}")
    if kernel.data.shape[1] != seq.data.shape[1]:
        raise ValueError(
            f"conv1d_stride2: input width {seq.data.shape[1]} does not match "
            f"kernel D_in {kernel.data.shape[1]}"
        )
    length = seq.data.shape[0]
    out_len = (length + 1) // 2
    padded = np.zeros((length + 2, seq.data.shape[1]), dtype=seq.data.dtype)
    padded[1:-1] = seq.data
    y = np.broadcast_to(bias.data, (out_len, kernel.data.shape[2])).copy()
    for k in range(3):
        y += padded[k : k + 2 * out_len : 2] @ kernel.data[k]

    out = Tensor(y)

    def bwd(g):
        gseq = gker = gbias = None
        if seq.requires_grad:
            gp = np.zeros_like(padded)
            for k in range(3):
                gp[k : k + 2 * out_len : 2] += g @ kernel.data[k].T
            gseq = gp[1:-1]
        if kernel.requires_grad:
            gker = np.stack(
                [padded[k : k + 2 * out_len : 2].T @ g for k in range(3)]
            )
        if bias.requires_grad:
            gbias = g.sum(axis=0)
        return gseq, gker, gbias

    return _record(out, (seq, kernel, bias), bwd)


def cross_entropy_rows(
    logits: Tensor,
    targets: np.ndarray,
    ignore: Optional[np.ndarray] = None,
) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unignored rows."""
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy_rows: logits must be [T, |V|], got {logits.shape}")
    rows, vocab = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (rows,):
        raise ValueError(
            f"cross_entropy_rows: {rows} rows but targets shape {targets.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(
            f"cross_entropy_rows: target id outside vocabulary of size {vocab}"
        )
    keep = np.ones(rows, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise ValueError("cross_entropy_rows: every position is ignored (empty loss)")
    flat = np.ascontiguousarray(logits.data)
    lse = bk.lse_rows(flat)
    nll = lse - flat[np.arange(rows), targets]
    out = Tensor(np.asarray(nll[keep].sum() / n_kept, dtype=logits.data.dtype))

    def bwd(g):
        p = bk.softmax_rows(flat)
        p[np.arange(rows), targets] -= 1.0
        p[~keep] = 0.0
        return (p * (g / n_kept),)

    return _record(out, (logits,), bwd)


def soft_cross_entropy_rows(logits: Tensor, soft_targets) -> Tensor:
    """Mean over rows of -sum_v q_v log p_v with q treated as a constant.

    ``soft_targets`` never receives gradient (stop-gradient contract); it may
    be a Tensor or a plain array.
    """
    q = soft_targets.data if isinstance(soft_targets, Tensor) else np.asarray(soft_targets)
    if logits.data.shape != q.shape:
        raise ValueError(
            f"soft_cross_entropy_rows: shapes differ: logits {logits.data.shape} "
            f"vs soft targets {q.shape}"
        )
    if q.size and q.min() < 0:
        raise ValueError("soft_cross_entropy_rows: negative soft-target entries rejected")
    row_sums = q.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-6):
        raise ValueError(
            "soft_cross_entropy_rows: soft-target rows must sum to 1 within 1e-6"
        )
    rows = q.shape[0]
    flat = np.ascontiguousarray(logits.data)
    lse = bk.lse_rows(flat)
    per_row = lse - (q * flat).sum(axis=1)
    out = Tensor(np.asarray(per_row.mean(), dtype=logits.data.dtype))

    def bwd(g):
        p = bk.softmax_rows(flat)
        return ((p - q) * (g / rows),)

    return _record(out, (logits,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared elementwise difference."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse: shapes differ: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = diff.size
    out = Tensor(np.asarray((diff * diff).sum() / n, dtype=a.data.dtype))
    return _record(
        out,
        (a, b),
        lambda g: (g * 2.0 * diff / n, g * (-2.0) * diff / n),
    )


def detach(a: Tensor) -> Tensor:
    return a.detach()


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of ``x`` (dropout or
    other stochastic ops are rejected by a repeat-evaluation probe).
    """
    with Tape():
        first = f(x)
    if first.data.size != 1:
        raise ValueError(f"grad_check: f must be scalar-valued, got shape {first.shape}")
    if not np.isfinite(first.data):
        raise ValueError("grad_check: f(x) is not finite")

    saved = x.grad
    x.grad = None
    x.requires_grad = True
    with Tape():
        second = f(x)
        if second.data != first.data:
            x.grad = saved
            raise ValueError("grad_check: f is not deterministic (dropout active?)")
        backward(second)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    x.grad = saved

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
