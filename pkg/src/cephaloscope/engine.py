"""Reverse-mode differentiable tensor core.

Operations record themselves on the active :class:`Tape` (if any).  Outside a
tape, every op is a plain numpy computation with no bookkeeping, which is what
inference and saliency export use.

Shapes are never broadcast implicitly: every binary op checks its operands and
raises :class:`ShapeError` on mismatch.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "get_dtype",
    "set_dtype",
    "precision",
    "conv2d",
    "depthwise_conv2d",
    "relu",
    "sigmoid",
    "global_avg_pool",
    "fully_connected",
    "concat_channels",
    "channel_affine",
    "channel_gate",
    "add",
    "sub",
    "scale",
    "absolute",
    "square",
    "sqrt",
    "total",
    "mean",
    "column",
    "dump_tensor",
    "load_tensor",
    "write_tensor",
    "read_tensor",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


_DTYPES = {"float64": np.float64, "float32": np.float32}
_state = {"dtype": np.float64}


def set_dtype(name: str) -> None:
    """Select the engine-wide real width ("float64" or "float32")."""
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


def get_dtype() -> type:
    return _state["dtype"]


class precision:
    """Context manager that temporarily switches the engine dtype."""

    def __init__(self, name: str):
        self.name = name
        self._saved = None

    def __enter__(self):
        self._saved = _state["dtype"]
        set_dtype(self.name)
        return self

    def __exit__(self, *exc):
        _state["dtype"] = self._saved
        return False


class Tensor:
    """An n-dimensional real array with an optional gradient.

    ``data`` is a numpy array in row-major order; image tensors are always
    laid out as [N, C, H, W].
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=get_dtype()) if not isinstance(data, np.ndarray) else data
        if arr.dtype != get_dtype():
            arr = arr.astype(get_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class _Record:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of executed primitives, replayed in reverse for gradients.

    Use as a context manager; tapes are thread-local, so each worker thread
    records onto its own tape::

        with Tape() as tape:
            loss = total(relu(x))
        tape.backward(loss)
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def _push(self, op, inputs, output, backward):
        self.records.append(_Record(op, inputs, output, backward))

    def _propagate(self, loss: Tensor, visit: Callable[[str], None] | None = None) -> dict:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            if visit is not None:
                visit(rec.op)
            g = grads.get(id(rec.output))
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return grads

    def _tracked(self) -> dict[int, Tensor]:
        seen: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad:
                    seen[id(t)] = t
            if rec.output.requires_grad:
                seen[id(rec.output)] = rec.output
        return seen

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/dt into ``t.grad`` for every tracked tensor.

        Tensors on the tape that do not influence ``loss`` receive zeros.
        """
        grads = self._propagate(loss)
        if loss.requires_grad:
            grads.setdefault(id(loss), np.ones_like(loss.data))
        for key, t in self._tracked().items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(t.data)
            if t.grad is None:
                t.grad = np.array(g, dtype=t.data.dtype, copy=True)
            else:
                t.grad += g

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Return d(loss)/d(source) arrays without touching any ``.grad``."""
        grads = self._propagate(loss)
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else g)
        return out


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = _active_tape()
    if tape is not None and needs:
        tape._push(op, inputs, out, backward)
    return out


def _expect_ndim(t: Tensor, ndim: int, what: str) -> None:
    if t.data.ndim != ndim:
        raise ShapeError(f"{what} must be {ndim}-D, got shape {t.shape}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------


def _conv_geometry(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    _, _, h, w = x.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return ho, wo


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # [N, C, Ho, Wo, kh, kw] view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _unpad(gp: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return gp
    return gp[:, :, padding:-padding, padding:-padding]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D convolution (cross-correlation), zero padding."""
    _expect_ndim(x, 4, "conv2d input")
    _expect_ndim(kernel, 4, "conv2d kernel")
    _expect_ndim(bias, 1, "conv2d bias")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {kc}")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {k} output channels")
    ho, wo = _conv_geometry(x.data, kh, kw, stride, padding)
    xp = _pad(x.data, padding)
    if kh == 1 and kw == 1:
        cols = xp[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        out = np.einsum("nchw,kc->nkhw", cols, kernel.data[:, :, 0, 0], optimize=True)
    else:
        win = _windows(xp, kh, kw, stride, ho, wo)
        out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def backward(g):
        gk = gx = None
        gb = g.sum(axis=(0, 2, 3))
        if kernel.requires_grad:
            if kh == 1 and kw == 1:
                gk = np.einsum("nkhw,nchw->kc", g, cols, optimize=True)[:, :, None, None]
            else:
                gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.einsum("nkhw,kc->nchw", g, kernel.data[:, :, i, j], optimize=True)
                    gp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += contrib
            gx = _unpad(gp, padding)
        return gx, gk, gb

    return _emit("conv2d", (x, kernel, bias), np.ascontiguousarray(out), backward)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution: channel c only sees kernel[c, 0]."""
    _expect_ndim(x, 4, "depthwise input")
    _expect_ndim(kernel, 4, "depthwise kernel")
    n, c, h, w = x.shape
    kc, one, kh, kw = kernel.shape
    if kc != c or one != 1:
        raise ShapeError(f"depthwise_conv2d: kernel {kernel.shape} does not fit {c} input channels")
    ho, wo = _conv_geometry(x.data, kh, kw, stride, padding)
    xp = _pad(x.data, padding)
    kern = kernel.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride]
            out += sl * kern[None, :, i, j, None, None]

    def backward(g):
        gx = gk = None
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for i in range(kh):
                for j in range(kw):
                    sl = xp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride]
                    gk[:, 0, i, j] = np.einsum("nchw,nchw->c", g, sl)
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += (
                        g * kern[None, :, i, j, None, None]
                    )
            gx = _unpad(gp, padding)
        return gx, gk

    return _emit("depthwise_conv2d", (x, kernel), out, backward)


# ---------------------------------------------------------------------------
# Pointwise and reductions
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0).astype(x.data.dtype), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # branch on sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def global_avg_pool(x: Tensor) -> Tensor:
    _expect_ndim(x, 4, "global_avg_pool input")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _emit("global_avg_pool", (x,), out, backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    _expect_ndim(x, 2, "fully_connected input")
    _expect_ndim(weight, 2, "fully_connected weight")
    o, d = weight.shape
    if x.shape[1] != d:
        raise ShapeError(f"fully_connected: input width {x.shape[1]} != weight width {d}")
    if bias.shape != (o,):
        raise ShapeError(f"fully_connected: bias shape {bias.shape} != ({o},)")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _emit("fully_connected", (x, weight, bias), out, backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _expect_ndim(a, 4, "concat_channels operand")
    _expect_ndim(b, 4, "concat_channels operand")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: N/H/W mismatch between {a.shape} and {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    return _emit("concat_channels", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def channel_affine(x: Tensor, gain: Tensor, shift: Tensor) -> Tensor:
    """Per-channel ``gain * x + shift`` on [N, C, H, W] input."""
    _expect_ndim(x, 4, "channel_affine input")
    c = x.shape[1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"channel_affine: gain {gain.shape} / shift {shift.shape} need ({c},)")
    out = x.data * gain.data[None, :, None, None] + shift.data[None, :, None, None]

    def backward(g):
        return (
            g * gain.data[None, :, None, None],
            np.einsum("nchw,nchw->c", g, x.data),
            g.sum(axis=(0, 2, 3)),
        )

    return _emit("channel_affine", (x, gain, shift), out, backward)


def channel_gate(x: Tensor, gate: Tensor) -> Tensor:
    """Scale each channel map of x[N, C, H, W] by gate[N, C]."""
    _expect_ndim(x, 4, "channel_gate input")
    if gate.shape != x.shape[:2]:
        raise ShapeError(f"channel_gate: gate {gate.shape} does not match {x.shape[:2]}")
    out = x.data * gate.data[:, :, None, None]

    def backward(g):
        return g * gate.data[:, :, None, None], np.einsum("nchw,nchw->nc", g, x.data)

    return _emit("channel_gate", (x, gate), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def scale(x: Tensor, factor: float) -> Tensor:
    f = float(factor)
    return _emit("scale", (x,), x.data * f, lambda g: (g * f,))


def absolute(x: Tensor) -> Tensor:
    # derivative at exactly 0 is 0
    sign = np.sign(x.data)
    return _emit("absolute", (x,), np.abs(x.data), lambda g: (g * sign,))


def square(x: Tensor) -> Tensor:
    return _emit("square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ValueError("sqrt of a negative value")
    out = np.sqrt(x.data)

    def backward(g):
        # derivative at 0 taken as 0 (the RMSE-at-perfect-fit case)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _emit("sqrt", (x,), out, backward)


def total(x: Tensor) -> Tensor:
    return _emit("total", (x,), np.array([x.data.sum()]), lambda g: (np.full_like(x.data, g[0]),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _emit("mean", (x,), np.array([x.data.mean()]), lambda g: (np.full_like(x.data, g[0] / n),))


def column(x: Tensor, j: int) -> Tensor:
    """Column j of a 2-D tensor, as a 1-D tensor."""
    _expect_ndim(x, 2, "column input")
    if not 0 <= j < x.shape[1]:
        raise ShapeError(f"column {j} out of range for shape {x.shape}")

    def backward(g):
        out = np.zeros_like(x.data)
        out[:, j] = g
        return (out,)

    return _emit("column", (x,), x.data[:, j].copy(), backward)


# ---------------------------------------------------------------------------
# Text dump format: shape line, then one value per line (17 significant digits)
# ---------------------------------------------------------------------------


def write_tensor(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    fh.write(" ".join(str(d) for d in arr.shape) + "\n")
    flat = arr.reshape(-1).astype(np.float64)
    fh.write("".join(f"{v:.17g}\n" for v in flat.tolist()))


def read_tensor(lines: Iterable[str]) -> np.ndarray:
    it = iter(lines)
    header = next(it).split()
    shape = tuple(int(s) for s in header)
    count = int(np.prod(shape)) if shape else 1
    values = [float(next(it)) for _ in range(count)]
    return np.array(values, dtype=np.float64).reshape(shape)


def dump_tensor(t: Tensor | np.ndarray, path) -> None:
    arr = t.data if isinstance(t, Tensor) else t
    with open(path, "w") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> Tensor:
    with open(path) as fh:
        return Tensor(read_tensor(fh))
