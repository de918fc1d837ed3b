"""Dense float64 tensors with reverse-mode gradients on an explicit tape.

Everything downstream (encoders, fusion, training) is built from the
operations in this module. Two properties are load-bearing:

* Reductions have a fixed summation order. ``matmul`` accumulates over the
  inner index in ascending order (the compiled kernel is bit-identical to a
  naive triple loop), so results are reproducible run to run and oracle
  comparisons in the tests can demand exact equality.
* All operations are pure functions of their inputs plus an explicit
  generator. Tensors are immutable once produced; the only sanctioned
  mutation is the optimizer updating parameter ``data`` between tapes.

Gradient recording uses a thread-local active-tape stack: while a ``Tape``
is entered, every operation appends a backward closure to it. A tape is
confined to one logical training step and must not be shared across
concurrent steps (each worker thread opens its own).
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numba import njit

from .errors import EvaluationError, ShapeError, ConfigError

_uid_counter = itertools.count()
_tape_stack = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_tape_stack, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A dense row-major float64 array with a shape and a unique identity."""

    __slots__ = ("data", "uid")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.uid = next(_uid_counter)

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

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, uid={self.uid})"

    # Convenience operators; all tape rules live in the module functions.
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


def tensor(data) -> Tensor:
    return Tensor(data)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape))


class Tape:
    """Ordered record of executed operations with per-tensor gradient accumulators.

    Replaying the tape backward visits each recorded operation exactly once,
    in reverse execution order. Gradients accumulate in ``_grads`` keyed by
    tensor uid and always match the tensor's shape.
    """

    def __init__(self):
        self._entries: list[Callable[["Tape"], None]] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_tape_stack, "stack", None)
        if stack is None:
            stack = []
            _tape_stack.stack = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.stack.pop()
        return False

    def _record(self, backward: Callable[["Tape"], None]) -> None:
        self._entries.append(backward)

    def _accumulate(self, t: Tensor, grad: np.ndarray) -> None:
        existing = self._grads.get(t.uid)
        if existing is None:
            # Always copy: the incoming array may be aliased by another
            # accumulator (an op can route one array to two inputs), and a
            # later in-place += on a shared object would corrupt both.
            self._grads[t.uid] = grad.copy()
        else:
            existing += grad

    def _take(self, t: Tensor) -> np.ndarray | None:
        """Pop the accumulated output gradient; None if nothing flowed here."""
        return self._grads.pop(t.uid, None)

    def backward(self, root: Tensor) -> None:
        """Seed the root (a scalar) with gradient 1 and replay backward."""
        if root.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        self._grads[root.uid] = np.ones_like(root.data)
        for entry in reversed(self._entries):
            entry(self)
        self._entries.clear()

    def grad(self, t: Tensor) -> np.ndarray:
        """The accumulated gradient for ``t`` (zeros if none flowed to it)."""
        g = self._grads.get(t.uid)
        if g is None:
            return np.zeros_like(t.data)
        return g

    def gradients(self, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
        return {name: self.grad(p) for name, p in params.items()}


# ---------------------------------------------------------------------------
# Compiled kernel. Loop order (i, l, j) keeps the per-element accumulation
# over l ascending while letting LLVM vectorize over j without reassociation,
# so the result is bit-identical to the naive (i, j, l) triple loop.
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _mm_kernel(a, b):  # pragma: no cover - exercised via matmul
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for l in range(k):
            ail = a[i, l]
            for j in range(n):
                out[i, j] += ail * b[l, j]
    return out


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _mm_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """C = A @ B with C[i,j] = sum over l (ascending) of A[i,l]*B[l,j]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = Tensor(_mm(a.data, b.data))
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, a=a, b=b, out=out):
            g = t._take(out)
            if g is None:
                return
            t._accumulate(a, _mm(g, b.data.T))
            t._accumulate(b, _mm(a.data.T, g))
        tape._record(backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise sum; also accepts a 1-D bias broadcast over the rows of a matrix."""
    bias = a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]
    if not bias and a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, a=a, b=b, out=out, bias=bias):
            g = t._take(out)
            if g is None:
                return
            t._accumulate(a, g)
            t._accumulate(b, g.sum(axis=0) if bias else g)
        tape._record(backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, a=a, b=b, out=out):
            g = t._take(out)
            if g is None:
                return
            t._accumulate(a, g)
            t._accumulate(b, -g)
        tape._record(backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, a=a, b=b, out=out):
            g = t._take(out)
            if g is None:
                return
            t._accumulate(a, g * b.data)
            t._accumulate(b, g * a.data)
        tape._record(backward)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, a=a, out=out, s=s):
            g = t._take(out)
            if g is None:
                return
            t._accumulate(a, g * s)
        tape._record(backward)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    out = Tensor(a.data.T.copy())
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, a=a, out=out):
            g = t._take(out)
            if g is None:
                return
            t._accumulate(a, g.T.copy())
        tape._record(backward)
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape).copy())
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, a=a, out=out):
            g = t._take(out)
            if g is None:
                return
            t._accumulate(a, g.reshape(a.shape))
        tape._record(backward)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Horizontal concatenation of matrices sharing a row count."""
    rows = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    tape = _active_tape()
    if tape is not None:
        widths = [p.shape[1] for p in parts]
        def backward(t: Tape, parts=tuple(parts), out=out, widths=widths):
            g = t._take(out)
            if g is None:
                return
            start = 0
            for p, w in zip(parts, widths):
                t._accumulate(p, g[:, start:start + w].copy())
                start += w
        tape._record(backward)
    return out


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D vectors of equal length into a matrix, one row each."""
    width = vectors[0].shape[0]
    for v in vectors:
        if v.ndim != 1 or v.shape[0] != width:
            raise ShapeError(f"stack_rows needs equal-length vectors: {[v.shape for v in vectors]}")
    out = Tensor(np.stack([v.data for v in vectors], axis=0))
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, vectors=tuple(vectors), out=out):
            g = t._take(out)
            if g is None:
                return
            for i, v in enumerate(vectors):
                t._accumulate(v, g[i].copy())
        tape._record(backward)
    return out


def row(a: Tensor, index: int) -> Tensor:
    """Select one row of a matrix as a 1-D vector."""
    if a.ndim != 2:
        raise ShapeError(f"row expects a matrix, got {a.shape}")
    out = Tensor(a.data[index].copy())
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, a=a, out=out, index=index):
            g = t._take(out)
            if g is None:
                return
            da = np.zeros_like(a.data)
            da[index] = g
            t._accumulate(a, da)
        tape._record(backward)
    return out


def col_slice(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"col_slice expects a matrix, got {a.shape}")
    out = Tensor(a.data[:, start:stop].copy())
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, a=a, out=out, start=start, stop=stop):
            g = t._take(out)
            if g is None:
                return
            da = np.zeros_like(a.data)
            da[:, start:stop] = g
            t._accumulate(a, da)
        tape._record(backward)
    return out


def row_slice(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"row_slice expects a matrix, got {a.shape}")
    out = Tensor(a.data[start:stop].copy())
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, a=a, out=out, start=start, stop=stop):
            g = t._take(out)
            if g is None:
                return
            da = np.zeros_like(a.data)
            da[start:stop] = g
            t._accumulate(a, da)
        tape._record(backward)
    return out


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Rows ``table[ids]``; the backward pass scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.intp)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got {table.shape}")
    out = Tensor(table.data[idx].copy())
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, table=table, out=out, idx=idx):
            g = t._take(out)
            if g is None:
                return
            dt = np.zeros_like(table.data)
            np.add.at(dt, idx, g)
            t._accumulate(table, dt)
        tape._record(backward)
    return out


def replace_rows(a: Tensor, indices: Sequence[int], v: Tensor) -> Tensor:
    """Copy of ``a`` with the given rows replaced by the vector ``v``."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.ndim != 2 or v.ndim != 1 or v.shape[0] != a.shape[1]:
        raise ShapeError(f"replace_rows shapes: a={a.shape}, v={v.shape}")
    data = a.data.copy()
    data[idx] = v.data
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, a=a, v=v, out=out, idx=idx):
            g = t._take(out)
            if g is None:
                return
            da = g.copy()
            da[idx] = 0.0
            t._accumulate(a, da)
            t._accumulate(v, g[idx].sum(axis=0))
        tape._record(backward)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, x=x, out=out, y=y):
            g = t._take(out)
            if g is None:
                return
            dot = (g * y).sum(axis=1, keepdims=True)
            t._accumulate(x, y * (g - dot))
        tape._record(backward)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice to zero mean / unit variance, then scale and shift.

    Accepts 1-D vectors or 2-D matrices (normalized per row). Constant slices
    come out as ``beta`` because ``eps`` dominates the zero variance.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params must be shape ({d},), got {gamma.shape}/{beta.shape}")
    xd = x.data if x.ndim == 2 else x.data.reshape(1, -1)
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    out = Tensor(y if x.ndim == 2 else y.reshape(-1))
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, x=x, gamma=gamma, beta=beta, out=out, xhat=xhat, inv=inv):
            g = t._take(out)
            if g is None:
                return
            g2 = g if g.ndim == 2 else g.reshape(1, -1)
            t._accumulate(gamma, (g2 * xhat).sum(axis=0))
            t._accumulate(beta, g2.sum(axis=0))
            dxhat = g2 * gamma.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
            t._accumulate(x, dx if x.ndim == 2 else dx.reshape(-1))
        tape._record(backward)
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU, applied element-wise."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    th = np.tanh(u)
    out = Tensor(0.5 * x.data * (1.0 + th))
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, x=x, out=out, th=th):
            g = t._take(out)
            if g is None:
                return
            du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
            dydx = 0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th * th) * du
            t._accumulate(x, g * dydx)
        tape._record(backward)
    return out


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero each element with probability ``rate`` and scale
    survivors by 1/(1-rate) during training; the identity otherwise."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode requires an explicit generator")
    keep = rng.random(x.shape) >= rate
    factor = 1.0 / (1.0 - rate)
    mask = keep * factor
    out = Tensor(x.data * mask)
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, x=x, out=out, mask=mask):
            g = t._take(out)
            if g is None:
                return
            t._accumulate(x, g * mask)
        tape._record(backward)
    return out


def mean_rows(x: Tensor) -> Tensor:
    """Mean over the row axis of a matrix, producing a 1-D vector."""
    if x.ndim != 2:
        raise ShapeError(f"mean_rows expects a matrix, got {x.shape}")
    n = x.shape[0]
    out = Tensor(x.data.mean(axis=0))
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, x=x, out=out, n=n):
            g = t._take(out)
            if g is None:
                return
            t._accumulate(x, np.broadcast_to(g / n, x.shape).copy())
        tape._record(backward)
    return out


def mean_all(x: Tensor) -> Tensor:
    """Mean over all elements, producing a scalar."""
    n = x.size
    out = Tensor(x.data.mean())
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, x=x, out=out, n=n):
            g = t._take(out)
            if g is None:
                return
            t._accumulate(x, np.full(x.shape, float(g) / n))
        tape._record(backward)
    return out


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum of same-shaped tensors (fixed accumulation order)."""
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def cross_entropy_logits(logits: Tensor, label: int) -> Tensor:
    """Negative log-likelihood of ``label`` computed from logits via log-sum-exp.

    Never takes the log of a stored probability; gradient w.r.t. the logits
    is softmax(logits) - one_hot(label).
    """
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy_logits expects a 1-D logit vector, got {logits.shape}")
    c = logits.shape[0]
    if not 0 <= label < c:
        from .errors import InputError
        raise InputError(f"label {label} out of range for {c} classes")
    m = logits.data.max()
    z = logits.data - m
    sum_exp = np.exp(z).sum()
    loss = m + np.log(sum_exp) - logits.data[label]
    out = Tensor(loss)
    tape = _active_tape()
    if tape is not None:
        probs = np.exp(z) / sum_exp
        def backward(t: Tape, logits=logits, out=out, probs=probs, label=label):
            g = t._take(out)
            if g is None:
                return
            d = probs.copy()
            d[label] -= 1.0
            t._accumulate(logits, d * float(g))
        tape._record(backward)
    return out


def unfold_windows(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Sliding windows of a [length x channels] signal, flattened row-major.

    Output row f is x[f*stride : f*stride+kernel, :] flattened as (offset,
    channel), which is the layout conv weights use. Frame count is
    floor((length - kernel)/stride) + 1.
    """
    if x.ndim != 2:
        raise ShapeError(f"unfold_windows expects [length x channels], got {x.shape}")
    length, channels = x.shape
    if kernel > length:
        raise ShapeError(
            f"input length {length} shorter than kernel {kernel}; need at least {kernel} samples"
        )
    frames = (length - kernel) // stride + 1
    idx = np.arange(frames)[:, None] * stride + np.arange(kernel)[None, :]
    win = x.data[idx]  # [frames, kernel, channels]
    out = Tensor(win.reshape(frames, kernel * channels))
    tape = _active_tape()
    if tape is not None:
        def backward(t: Tape, x=x, out=out, idx=idx, kernel=kernel, channels=channels):
            g = t._take(out)
            if g is None:
                return
            dx = np.zeros_like(x.data)
            np.add.at(dx, idx, g.reshape(-1, kernel, channels))
            t._accumulate(x, dx)
        tape._record(backward)
    return out


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, kernel: int, stride: int) -> Tensor:
    """Strided 1-D convolution of [length x in_ch] with weight [(kernel*in_ch) x out_ch]."""
    windows = unfold_windows(x, kernel, stride)
    if windows.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"conv1d weight rows {weight.shape[0]} != kernel*in_ch {windows.shape[1]}"
        )
    return add(matmul(windows, weight), bias)


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"non-finite values in {what}")


__all__ = [
    "Tensor", "Tape", "tensor", "zeros",
    "matmul", "add", "sub", "mul", "scale", "transpose", "reshape",
    "concat_cols", "stack_rows", "row", "col_slice", "row_slice",
    "gather_rows", "replace_rows", "softmax_rows", "layer_norm", "gelu",
    "dropout", "mean_rows", "mean_all", "add_n", "cross_entropy_logits",
    "unfold_windows", "conv1d", "check_finite",
]
