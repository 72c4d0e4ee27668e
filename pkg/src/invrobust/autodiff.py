"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Only the primitives the MNIST CNN and the input-gradient attacks need are
provided. Layout is NHWC for images and (kH, kW, Cin, Cout) for kernels.

Usage::

    with Tape() as tape:
        x = Tensor(images, requires_grad=True)
        loss = softmax_cross_entropy(model(x), onehot)
    grads = tape.backward(loss)
    grads[x]  # d loss / d images
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SUPPORTED_DTYPES = (np.float32, np.float64)

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Immutable n-dimensional array node.

    ``requires_grad`` marks leaves the caller wants gradients for. Results of
    operations inherit the flag from their inputs.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        # read-only view; the caller's array stays writable
        arr = arr.view()
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps output gradient -> tuple of input gradients (None where not needed)
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    A tape is owned by a single forward/backward pass. Entering it as a
    context manager makes it the recording target for the current thread.
    """

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.pop()

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def backward(self, loss: Tensor) -> "Gradients":
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        keep: dict[int, Tensor] = {id(loss): loss}
        for entry in reversed(self.entries):
            g_out = grads.get(id(entry.output))
            if g_out is None:
                continue
            g_in = entry.backward(g_out)
            for t, g in zip(entry.inputs, g_in):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    keep[key] = t
        return Gradients(grads, keep)


class Gradients:
    """Gradient lookup keyed by tensor identity.

    Tensors the loss does not depend on get a zero gradient.
    """

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._tensors.get(id(t)) is not t:
            return np.zeros(t.shape, dtype=t.dtype)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return self._tensors.get(id(t)) is t


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    needs_grad = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad)
    tape = _active_tape()
    if needs_grad and tape is not None:
        tape.record(TapeEntry(op, tuple(inputs), result, backward))
    return result


def _check_dtypes(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"mixed precision operands: {sorted(str(d) for d in dtypes)}")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# primitives


def conv_output_size(size: int, k: int, padding: str) -> int:
    if padding == "same":
        return size
    if padding == "valid":
        return size - k + 1
    raise ValueError(f"unknown padding {padding!r}")


def _same_pads(k: int) -> tuple[int, int]:
    # extra row/col goes after, as in the usual "same" convention
    total = k - 1
    return total // 2, total - total // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """2-D cross-correlation with stride 1 and a per-output-channel bias."""
    if x.data.ndim != 4 or kernel.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError(
            f"conv2d expects NHWC input, (kH,kW,Cin,Cout) kernel and 1-D bias; "
            f"got {x.shape}, {kernel.shape}, {bias.shape}"
        )
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has Cin={cin}, kernel expects {kcin}")
    if bias.shape[0] != cout:
        raise ShapeError(f"conv2d bias has {bias.shape[0]} entries, kernel has Cout={cout}")
    _check_dtypes(x, kernel, bias)
    if padding == "same":
        (pt, pb), (pl, pr) = _same_pads(kh), _same_pads(kw)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    oh, ow = conv_output_size(h, kh, padding), conv_output_size(w, kw, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w} with valid padding")

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    # (N, oh, ow, Cin, kh, kw) -> columns ordered (kh, kw, Cin) to match kernel layout
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * cin)
    wmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, oh, ow, cout) + bias.data
    if not kernel.requires_grad:
        del cols

    def backward(g):
        g2 = g.reshape(n * oh * ow, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            if cin < 8:
                gcols = (g2 @ wmat.T).reshape(n, oh, ow, kh, kw, cin)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i : i + oh, j : j + ow, :] += gcols[:, :, :, i, j, :]
            else:
                # wide inputs: one matmul per kernel offset beats the col2im scatter
                for i in range(kh):
                    for j in range(kw):
                        part = g2 @ kernel.data[i, j].T
                        gxp[:, i : i + oh, j : j + ow, :] += part.reshape(n, oh, ow, cin)
            gx = gxp[:, pt : pt + h, pl : pl + w, :]
        return gx, gk, gb

    return _emit("conv2d", (x, kernel, bias), out, backward)


def pool_output_size(size: int, stride: int) -> int:
    return (size - 2) // stride + 1


def maxpool2(x: Tensor, stride: int = 2) -> Tensor:
    """2x2 max pooling without padding.

    The gradient goes to the first maximal cell of each window in row-major
    order.
    """
    if stride not in (1, 2):
        raise ValueError(f"maxpool2 supports stride 1 or 2, got {stride}")
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 expects NHWC input, got shape {x.shape}")
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2 needs H, W >= 2, got {h}x{w}")
    oh, ow = pool_output_size(h, stride), pool_output_size(w, stride)

    if stride == 2:
        xc = x.data[:, : 2 * oh, : 2 * ow, :]
        # window cells in row-major order
        cells = [xc[:, di::2, dj::2, :] for di in (0, 1) for dj in (0, 1)]
    else:
        cells = [x.data[:, di : di + oh, dj : dj + ow, :] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(cells[0], cells[1]), np.maximum(cells[2], cells[3]))

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for k, cell in enumerate(cells):
            di, dj = divmod(k, 2)
            hit = cell == out
            if k:
                hit &= ~taken
            taken |= hit
            if stride == 2:
                gx[:, di : 2 * oh : 2, dj : 2 * ow : 2, :] = g * hit
            else:
                gx[:, di : di + oh, dj : dj + ow, :] += g * hit
        return (gx,)

    return _emit("maxpool2", (x,), out, backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(f"dense expects (N,D), (D,U), (U,); got {x.shape}, {weight.shape}, {bias.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense input width {x.shape[1]} does not match weight rows {weight.shape[0]}")
    if bias.shape[0] != weight.shape[1]:
        raise ShapeError(f"dense bias has {bias.shape[0]} entries, weight has {weight.shape[1]} columns")
    _check_dtypes(x, weight, bias)
    out = x.data @ weight.data + bias.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _emit("dense", (x, weight, bias), out, backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _emit("relu", (x,), out, backward)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading axis (row-major)."""
    n = x.shape[0]
    out = x.data.reshape(n, -1)

    def backward(g):
        return (g.reshape(x.shape),)

    return _emit("flatten", (x,), out, backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_one_hot(labels: np.ndarray) -> None:
    ok = np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)
    if not ok:
        raise ValueError("labels must be one-hot rows")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean cross-entropy of softmax(logits) against one-hot labels."""
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if logits.data.ndim != 2 or labels.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} must both be (N, K)")
    _check_one_hot(labels)
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = np.asarray(-(logp * labels).sum() / n, dtype=logits.dtype)

    def backward(g):
        return ((np.exp(logp) - labels) * (g / n),)

    return _emit("softmax_cross_entropy", (logits,), loss, backward)


def one_hot(labels, k: int = 10, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], k), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out
