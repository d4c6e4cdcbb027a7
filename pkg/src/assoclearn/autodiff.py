"""Tape-based reverse-mode differentiation over numpy arrays.

Only the primitives needed by the association losses and the small
convolutional networks are provided.  A :class:`Tape` owns the precision
(float32 for training, float64 for gradient checks) and records every
primitive application in execution order, so the recorded list is always
topologically sorted.

    tape = Tape(np.float64)
    x = tape.parameter("x", [3.0])
    loss = sum_all(x * x)
    tape.gradient(loss)["x"]   # -> array([6.])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


@dataclass
class _Entry:
    op: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tensor:
    """An array bound to a node of a :class:`Tape`."""

    __slots__ = ("value", "tape", "node", "requires_grad")

    def __init__(self, value: np.ndarray, tape: "Tape", node: int, requires_grad: bool):
        self.value = value
        self.tape = tape
        self.node = node
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(self.tape.lift(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node}, dtype={self.value.dtype})"


class Tape:
    """Records primitive applications for a single backward sweep.

    ``record=False`` gives an inference-only tape: values are computed but
    nothing is kept for differentiation.
    """

    def __init__(self, dtype=np.float32, record: bool = True, check_finite: bool = True):
        self.dtype = np.dtype(dtype)
        self.record = record
        self.check_finite = check_finite
        self.entries: list[_Entry] = []
        self.parameters: dict[str, Tensor] = {}
        self._count = 0

    def _new_node(self) -> int:
        self._count += 1
        return self._count - 1

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=self.dtype), self, self._new_node(), False)

    def parameter(self, name: str, value) -> Tensor:
        """Leaf tensor that receives a gradient; one node per name."""
        if name in self.parameters:
            return self.parameters[name]
        t = Tensor(np.array(value, dtype=self.dtype), self, self._new_node(), self.record)
        self.parameters[name] = t
        return t

    def lift(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise ValueError("tensor belongs to a different tape")
            return x
        return self.constant(x)

    def _emit(self, op: str, value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
        # a finite sum implies finite entries; the full scan only runs on failure
        if self.check_finite and not np.isfinite(value.sum()) and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"{op} produced non-finite values")
        needs = self.record and any(t.requires_grad for t in inputs)
        out = Tensor(value, self, self._new_node(), needs)
        if needs:
            self.entries.append(_Entry(op, tuple(t.node for t in inputs), out.node, backward))
        return out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradient of a scalar ``loss`` for every node reachable from it."""
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.value)}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output, None)
            if g is None:
                continue
            for node, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + gi
                else:
                    grads[node] = gi
        return grads

    def gradient(self, loss: Tensor, wrt: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
        """Gradients of ``loss`` keyed by parameter name.

        Parameters that do not influence the loss get a zero array.
        """
        wrt = self.parameters if wrt is None else wrt
        grads = self.backward(loss)
        return {
            name: np.asarray(grads.get(t.node, np.zeros_like(t.value)), dtype=self.dtype).reshape(t.shape)
            for name, t in wrt.items()
        }


def _pair(a, b) -> tuple[Tensor, Tensor]:
    tape = a.tape if isinstance(a, Tensor) else b.tape
    return tape.lift(a), tape.lift(b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise and structural primitives


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.value + b.value
    return a.tape._emit(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def multiply(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    return a.tape._emit(
        "multiply", av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = x.value.dtype.type(c)
    return x.tape._emit("scale", x.value * c, (x,), lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.value.sum(), dtype=x.value.dtype).reshape(1)
    return x.tape._emit("sum", out, (x,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def mean_rows(x: Tensor) -> Tensor:
    """Average over axis 0: ``[r, c] -> [c]``."""
    r = x.shape[0]
    out = x.value.mean(axis=0)
    return x.tape._emit(
        "mean_rows", out, (x,),
        lambda g: (np.broadcast_to(g / r, x.shape).copy(),),
    )


def square_sum(x: Tensor) -> Tensor:
    xv = x.value
    out = np.asarray(np.sum(xv * xv), dtype=xv.dtype).reshape(1)
    return x.tape._emit("square_sum", out, (x,), lambda g: (2.0 * xv * g.reshape(()),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return x.tape._emit("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor) -> Tensor:
    if x.value.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return x.tape._emit("transpose", x.value.T, (x,), lambda g: (g.T,))


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    n = a.shape[0]
    a, b = _pair(a, b)
    out = np.concatenate([a.value, b.value], axis=0)
    return a.tape._emit("concat_rows", out, (a, b), lambda g: (g[:n], g[n:]))


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return a.tape._emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def dense(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ w + bias``."""
    x, w = _pair(x, w)
    bias = x.tape.lift(bias)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0] or bias.shape != (w.shape[1],):
        raise ShapeError(f"dense shape mismatch: x {x.shape}, w {w.shape}, bias {bias.shape}")
    xv, wv = x.value, w.value
    out = xv @ wv + bias.value
    return x.tape._emit("dense", out, (x, w, bias), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


def elu(x: Tensor) -> Tensor:
    """Exponential linear unit with alpha = 1."""
    neg = np.expm1(np.minimum(x.value, 0))
    # expm1(t) >= t, so the max picks x on the positive side and expm1 elsewhere
    out = np.maximum(x.value, neg)
    neg += 1
    return x.tape._emit("elu", out, (x,), lambda g: (g * neg,))


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax along the last axis of a matrix, max-shifted per row."""
    mv = m.value
    e = np.exp(mv - mv.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return m.tape._emit("softmax_rows", p, (m,), back)


def log_softmax_rows(m: Tensor) -> Tensor:
    mv = m.value
    shifted = mv - mv.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return m.tape._emit("log_softmax_rows", out, (m,), back)


def clamped_log(x: Tensor, floor: float) -> Tensor:
    """``log(max(x, floor))``; no gradient flows through clamped entries."""
    xv = x.value
    keep = xv > floor
    out = np.log(np.maximum(xv, floor))
    return x.tape._emit("clamped_log", out, (x,), lambda g: (np.where(keep, g / np.where(keep, xv, 1), 0),))


# spatial primitives (NHWC layout)


def same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    """Output extent and (before, after) padding for SAME mode."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _offsets(xp: np.ndarray, k: int, stride: int, oh: int, ow: int):
    """Strided views of ``xp`` for every window offset, in row-major order."""
    for i in range(k):
        for j in range(k):
            yield xp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride, :]


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """SAME-padded cross-correlation, plus a per-channel ``bias`` if given.

    x: [batch, h, w, cin]; kernels: [k, k, cin, cout].
    """
    x, kernels = _pair(x, kernels)
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if x.value.ndim != 4 or kernels.value.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and KKIO kernels, got {x.shape} and {kernels.shape}")
    b, h, w, cin = x.shape
    k, k2, kin, cout = kernels.shape
    if k != k2:
        raise ShapeError(f"conv2d kernels must be square, got {kernels.shape}")
    if kin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernels expect {kin}")
    if bias is not None:
        bias = x.tape.lift(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    oh, pt, pb = same_padding(h, k, stride)
    ow, pl, pr = same_padding(w, k, stride)
    xp = np.pad(x.value, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x.value
    n = b * oh * ow
    # im2col; columns ordered (ky, kx, cin) to match kernels.reshape(-1, cout)
    if cin == 1:
        cols_t = np.empty((k * k, b, oh, ow), dtype=xp.dtype)
        for idx, view in enumerate(_offsets(xp, k, stride, oh, ow)):
            cols_t[idx] = view[..., 0]
        cols = cols_t.reshape(k * k, n).T
    else:
        # one kernel row at a time: the k column offsets of a row form k*cin
        # contiguous values per output pixel
        cols = np.empty((b, oh, ow, k, k * cin), dtype=xp.dtype)
        for i in range(k):
            rows = xp[:, i:i + stride * (oh - 1) + 1:stride]
            win = np.lib.stride_tricks.sliding_window_view(rows, k, axis=2)[:, :, :stride * (ow - 1) + 1:stride]
            cols[:, :, :, i] = win.transpose(0, 1, 2, 4, 3).reshape(b, oh, ow, k * cin)
        cols = cols.reshape(n, k * k * cin)
    wmat = kernels.value.reshape(k * k * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.value
    out = out.reshape(b, oh, ow, cout)
    need_dx = x.requires_grad

    def back(g):
        g2 = g.reshape(n, cout)
        dw = (cols.T @ g2).reshape(kernels.shape)
        grads = [None, dw]
        if need_dx:
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for idx, view in enumerate(_offsets(dxp, k, stride, oh, ow)):
                view += (g2 @ wmat[idx * cin:(idx + 1) * cin].T).reshape(b, oh, ow, cin)
            grads[0] = dxp[:, pt:pt + h, pl:pl + w, :]
        if bias is not None:
            # a matrix-vector product; column sums of a tall matrix are slow in numpy
            grads.append(np.ones(n, dtype=g2.dtype) @ g2)
        return grads

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return x.tape._emit("conv2d", out, inputs, back)


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """SAME-padded max pooling; ties route the gradient to the first
    element of the window in row-major order."""
    if k < 1:
        raise ValueError(f"maxpool2d window must be >= 1, got {k}")
    stride = k if stride is None else stride
    if stride < 1:
        raise ValueError(f"maxpool2d stride must be >= 1, got {stride}")
    if x.value.ndim != 4:
        raise ShapeError(f"maxpool2d expects NHWC input, got {x.shape}")
    b, h, w, c = x.shape
    oh, pt, pb = same_padding(h, k, stride)
    ow, pl, pr = same_padding(w, k, stride)
    xp = x.value
    if pt + pb + pl + pr:
        xp = np.pad(xp, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
    out = None
    for view in _offsets(xp, k, stride, oh, ow):
        out = view.copy() if out is None else np.maximum(out, view, out=out)

    def back(g):
        overlap = stride < k
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        claimed = np.zeros(out.shape, dtype=bool)
        for view, dview in zip(_offsets(xp, k, stride, oh, ow), _offsets(dxp, k, stride, oh, ow)):
            hit = view == out
            hit &= ~claimed
            claimed |= hit
            if overlap:
                dview += hit * g
            else:
                np.multiply(hit, g, out=dview)
        return (dxp[:, pt:pt + h, pl:pl + w, :],)

    return x.tape._emit("maxpool2d", out, (x,), back)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``x`` (mutated in place and restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
