"""Untargeted l-infinity projected gradient descent."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor, one_hot, softmax_cross_entropy
from .model import Network, forward, predict

LogitsFn = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float = 0.3
    steps: int = 40
    step_size: float | None = None  # None means epsilon / 10
    random_start: bool = True
    seed: int = 0
    # images per forward/backward chunk; fixed so results do not depend on input size
    chunk: int = 250

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 10


def _logits_fn(model) -> LogitsFn:
    if isinstance(model, Network):
        return lambda x: forward(model, x)
    return model


def input_gradient(model, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean cross-entropy)/d(images) for a Network or a Tensor -> logits callable."""
    fn = _logits_fn(model)
    with Tape() as tape:
        x = Tensor(images, requires_grad=True)
        out = fn(x)
        loss = softmax_cross_entropy(out, one_hot(labels, out.shape[1], dtype=out.dtype))
    return tape.backward(loss)[x]


def pgd_linf(model, images, labels, cfg: PgdConfig) -> np.ndarray:
    """Adversarial copies of ``images`` inside the epsilon ball and [0, 1].

    Each step ascends the sign of the loss gradient, then clamps into
    [x - eps, x + eps], then into [0, 1].
    """
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim < 2 or len(images) != len(labels):
        raise ValueError(f"{len(images)} images do not match {len(labels)} labels")
    dtype = images.dtype if images.dtype in (np.float32, np.float64) else np.float32
    x0 = images.astype(dtype, copy=False)
    eps = np.dtype(dtype).type(cfg.epsilon)
    if cfg.epsilon == 0:
        return x0.copy()
    alpha = np.dtype(dtype).type(cfg.alpha)
    lo = np.maximum(x0 - eps, 0)
    hi = np.minimum(x0 + eps, 1)
    rng = np.random.default_rng(cfg.seed)
    if cfg.random_start:
        noise = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape).astype(dtype)
        x = np.clip(x0 + noise, 0, 1)
    else:
        x = x0.copy()

    for _ in range(cfg.steps):
        for start in range(0, len(x), cfg.chunk):
            sl = slice(start, start + cfg.chunk)
            g = input_gradient(model, x[sl], labels[sl])
            step = x[sl] + alpha * np.sign(g)
            step = np.minimum(np.maximum(step, x0[sl] - eps), x0[sl] + eps)
            x[sl] = np.clip(step, 0, 1)
    # guard against rounding at the ball boundary
    return np.clip(x, lo, hi)


def attack_success_rate(net: Network, images, labels, cfg: PgdConfig) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("attack_success_rate needs at least one sample")
    adv = pgd_linf(net, images, labels, cfg)
    return float(np.mean(predict(net, adv) != labels))
