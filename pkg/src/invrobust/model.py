"""The MNIST CNN, its RMSprop optimizer and binary checkpoints.

Architecture: conv 5x5x32 -> ReLU -> maxpool -> conv 5x5x64 -> ReLU ->
maxpool -> dense 1024 -> ReLU -> dense 10. Both convolutions use same
padding. With pool stride 2 the flatten width is 7*7*64 = 3136.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    conv2d,
    dense,
    flatten,
    maxpool2,
    pool_output_size,
    relu,
    softmax,
)

PARAM_NAMES = (
    "conv1/kernel",
    "conv1/bias",
    "conv2/kernel",
    "conv2/bias",
    "fc1/weight",
    "fc1/bias",
    "fc2/weight",
    "fc2/bias",
)

IMAGE_SHAPE = (28, 28, 1)
NUM_CLASSES = 10
DEFAULT_PARAM_COUNT = 3_274_634

CHECKPOINT_MAGIC = b"ADVT"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class DivergenceError(RuntimeError):
    """Non-finite values showed up in gradients or losses."""


class CheckpointError(ValueError):
    pass


def param_shapes(pool_stride: int = 2) -> dict[str, tuple[int, ...]]:
    side = pool_output_size(pool_output_size(28, pool_stride), pool_stride)
    flat = side * side * 64
    return {
        "conv1/kernel": (5, 5, 1, 32),
        "conv1/bias": (32,),
        "conv2/kernel": (5, 5, 32, 64),
        "conv2/bias": (64,),
        "fc1/weight": (flat, 1024),
        "fc1/bias": (1024,),
        "fc2/weight": (1024, NUM_CLASSES),
        "fc2/bias": (NUM_CLASSES,),
    }


@dataclass
class Network:
    params: dict[str, np.ndarray]
    pool_stride: int = 2

    def __post_init__(self):
        expected = param_shapes(self.pool_stride)
        if list(self.params) != list(PARAM_NAMES):
            raise ValueError(f"parameters must be exactly {PARAM_NAMES} in order")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name} has shape {self.params[name].shape}, expected {shape}")
        if self.pool_stride == 2 and self.num_params() != DEFAULT_PARAM_COUNT:
            raise AssertionError(f"parameter count {self.num_params()} != {DEFAULT_PARAM_COUNT}")

    @property
    def dtype(self):
        return self.params["conv1/kernel"].dtype

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "Network":
        return Network({k: v.copy() for k, v in self.params.items()}, self.pool_stride)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.pool_stride).encode())
        for name in PARAM_NAMES:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()


@dataclass
class RmspropState:
    accumulators: dict[str, np.ndarray]
    lr: float = 0.001
    rho: float = 0.9
    eps: float = 1e-7
    steps: int = 0

    @classmethod
    def fresh(cls, net: Network, lr: float = 0.001, rho: float = 0.9, eps: float = 1e-7) -> "RmspropState":
        acc = {k: np.zeros_like(v) for k, v in net.params.items()}
        return cls(acc, lr=lr, rho=rho, eps=eps)

    def copy(self) -> "RmspropState":
        return RmspropState({k: v.copy() for k, v in self.accumulators.items()}, self.lr, self.rho, self.eps, self.steps)


def init_network(seed: int, pool_stride: int = 2, dtype=np.float32) -> Network:
    """He-uniform for layers feeding a ReLU, Glorot-uniform for the output layer, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(pool_stride).items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[:-1]))
        fan_out = shape[-1]
        if name.startswith("fc2"):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        else:
            limit = np.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return Network(params, pool_stride)


def zero_network(pool_stride: int = 2, dtype=np.float32) -> Network:
    return Network({k: np.zeros(s, dtype=dtype) for k, s in param_shapes(pool_stride).items()}, pool_stride)


def parameter_tensors(net: Network, requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in net.params.items()}


def _check_images(images) -> None:
    shape = images.shape
    if len(shape) != 4 or tuple(shape[1:]) != IMAGE_SHAPE:
        raise ValueError(f"expected images of shape (N, 28, 28, 1), got {tuple(shape)}")


def forward(net: Network, images, params: dict[str, Tensor] | None = None) -> Tensor:
    """Logits for a batch of images.

    ``images`` may be an array or a Tensor (pass a Tensor with
    ``requires_grad=True`` to differentiate with respect to the input).
    ``params`` defaults to constant (non-differentiable) parameter tensors.
    """
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=net.dtype))
    _check_images(x)
    if x.dtype != net.dtype:
        x = Tensor(x.data.astype(net.dtype), requires_grad=x.requires_grad)
    p = params if params is not None else parameter_tensors(net, requires_grad=False)
    h = relu(conv2d(x, p["conv1/kernel"], p["conv1/bias"], "same"))
    h = maxpool2(h, net.pool_stride)
    h = relu(conv2d(h, p["conv2/kernel"], p["conv2/bias"], "same"))
    h = maxpool2(h, net.pool_stride)
    h = relu(dense(flatten(h), p["fc1/weight"], p["fc1/bias"]))
    return dense(h, p["fc2/weight"], p["fc2/bias"])


def logits(net: Network, images, batch_size: int = 500) -> np.ndarray:
    images = np.asarray(images)
    _check_images(images)
    chunks = [forward(net, images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
    if not chunks:
        return np.zeros((0, NUM_CLASSES), dtype=net.dtype)
    return np.concatenate(chunks)


def probabilities(net: Network, images, batch_size: int = 500) -> np.ndarray:
    return softmax(logits(net, images, batch_size))


def predict(net: Network, images, batch_size: int = 500) -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the smaller class index
    return logits(net, images, batch_size).argmax(axis=1)


def rmsprop_step(net: Network, grads: dict[str, np.ndarray], state: RmspropState) -> None:
    """Apply one RMSprop update in place to ``net`` and ``state``."""
    for name in PARAM_NAMES:
        g = grads[name]
        if g.shape != net.params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {net.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name} at optimizer step {state.steps}")
    for name in PARAM_NAMES:
        g = grads[name].astype(net.dtype, copy=False)
        acc = state.accumulators[name]
        acc *= state.rho
        acc += (1 - state.rho) * g * g
        net.params[name] -= state.lr * g / (np.sqrt(acc) + state.eps)
    state.steps += 1


# ---------------------------------------------------------------------------
# checkpoints
#
# little-endian: b"ADVT", u32 version, u32 tensor count, then per tensor:
# u32 name length, utf-8 name, u32 rank, u32 dims..., u32 element width
# (4 or 8 bytes, IEEE float), raw row-major data.


def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    width = arr.dtype.itemsize
    if width not in _DTYPE_CODES or arr.dtype.kind != "f":
        raise CheckpointError(f"cannot store {name} with dtype {arr.dtype}")
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(struct.pack("<I", width))
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[width]).tobytes())


def checkpoint_bytes(net: Network, state: RmspropState | None = None) -> bytes:
    tensors: list[tuple[str, np.ndarray]] = [(name, net.params[name]) for name in PARAM_NAMES]
    meta = np.array([net.pool_stride], dtype=np.float64)
    tensors.append(("meta/pool_stride", meta))
    if state is not None:
        tensors.extend((f"opt/{name}", state.accumulators[name]) for name in PARAM_NAMES)
        hyper = np.array([state.lr, state.rho, state.eps, state.steps], dtype=np.float64)
        tensors.append(("opt/hyper", hyper))
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    return buf.getvalue()


def save_checkpoint(net: Network, state: RmspropState | None, path) -> None:
    data = checkpoint_bytes(net, state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u32s(self, count: int) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def parse_checkpoint(data: bytes) -> tuple[Network, RmspropState | None]:
    r = _Reader(data)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})")
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = r.u32s(rank)
        width = r.u32()
        if width not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported element width {width}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * width
        arr = np.frombuffer(r.take(nbytes), dtype=_DTYPE_CODES[width]).reshape(dims)
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")
    missing = [n for n in PARAM_NAMES if n not in tensors]
    if missing or "meta/pool_stride" not in tensors:
        raise CheckpointError(f"checkpoint is missing tensors: {missing or ['meta/pool_stride']}")
    net = Network({n: tensors[n] for n in PARAM_NAMES}, int(tensors["meta/pool_stride"][0]))
    state = None
    if "opt/hyper" in tensors:
        lr, rho, eps, steps = tensors["opt/hyper"]
        acc = {n: tensors[f"opt/{n}"] for n in PARAM_NAMES}
        state = RmspropState(acc, lr=float(lr), rho=float(rho), eps=float(eps), steps=int(steps))
    return net, state


def load_checkpoint(path) -> tuple[Network, RmspropState | None]:
    with open(path, "rb") as f:
        data = f.read()
    return parse_checkpoint(data)
