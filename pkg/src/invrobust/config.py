"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields

from .invariance import InvConfig
from .pgd import PgdConfig

LABEL_MODES = ("algorithm", "oracle", "file")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dtype: str = "float32"
    pool_stride: int = 2

    # standard training
    batch_size: int = 1024
    lr: float = 0.001
    rho: float = 0.9
    opt_eps: float = 1e-7
    max_epochs: int = 1000
    val_count: int = 5000
    reshuffle: bool = False

    # PGD used for evaluation and for the in-loop robustness probe
    pgd_epsilon: float = 0.3
    pgd_steps: int = 40
    pgd_step_size: float = 0.03
    pgd_random_start: bool = True
    attack_chunk: int = 250
    # PGD used to craft training examples; 0 means "same as pgd_*"
    train_pgd_steps: int = 0
    train_pgd_step_size: float = 0.0

    # adversarial training loop
    adv_per_iter: int = 1000
    adv_train_batch: int = 1000
    acc_t: float = 0.88
    i_max: int = 10000
    probe_size: int = 100
    probe_steps: int = 0  # 0 means pgd_steps
    report_every: int = 1
    clean_eval_size: int = 10000

    # invariance examples
    inv_epsilon: float = 0.3
    inv_translate: int = 3
    inv_rotations: str = "-20,-10,0,10,20"
    inv_pool: int = 50
    inv_require_change: bool = True
    oracle_k: int = 5
    inv_train_size: int = 500
    inv_test_size: int = 100
    label_mode: str = "oracle"

    # sequential invariance retraining
    retrain_increment: int = 20
    retrain_epochs: int = 5
    retrain_batch: int = 32

    def __post_init__(self):
        positive = [
            "batch_size", "max_epochs", "pgd_steps", "attack_chunk", "adv_per_iter", "adv_train_batch",
            "probe_size", "report_every", "clean_eval_size", "inv_pool", "oracle_k",
            "retrain_increment", "retrain_epochs", "retrain_batch",
        ]
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("val_count", "i_max", "inv_train_size", "inv_test_size", "train_pgd_steps", "probe_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.pool_stride not in (1, 2):
            raise ValueError(f"pool_stride must be 1 or 2, got {self.pool_stride}")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if not 0 <= self.acc_t <= 1:
            raise ValueError(f"acc_t must lie in [0, 1], got {self.acc_t}")
        self.inv_config()  # validates the invariance fields

    def pgd(self, seed: int | None = None) -> PgdConfig:
        return PgdConfig(
            epsilon=self.pgd_epsilon,
            steps=self.pgd_steps,
            step_size=self.pgd_step_size,
            random_start=self.pgd_random_start,
            seed=self.seed if seed is None else seed,
            chunk=self.attack_chunk,
        )

    def probe_pgd(self, seed: int | None = None) -> PgdConfig:
        cfg = self.pgd(seed)
        return dataclasses.replace(cfg, steps=self.probe_steps or self.pgd_steps)

    def train_pgd(self, seed: int) -> PgdConfig:
        cfg = self.pgd(seed)
        return dataclasses.replace(
            cfg,
            steps=self.train_pgd_steps or self.pgd_steps,
            step_size=self.train_pgd_step_size or self.pgd_step_size,
        )

    def inv_config(self) -> InvConfig:
        rotations = tuple(float(r) for r in self.inv_rotations.split(",") if r.strip())
        return InvConfig(
            epsilon=self.inv_epsilon,
            translate=self.inv_translate,
            rotations=rotations,
            pool=self.inv_pool,
            require_change=self.inv_require_change,
            seed=self.seed,
        )

    @property
    def np_dtype(self):
        import numpy as np

        return np.dtype(self.dtype)

    # -- serialization -------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        return dataclasses.replace(self, **parse_values(overrides))

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls().with_overrides(parse_lines(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_text(f.read())

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_text())


# Reduced profile for a single desktop CPU: fewer iterations, a 5-step attack
# to craft training examples, a 10-step probe measured every 20 iterations.
# Final evaluation still uses the full 40-step attack.
DESK_SCALE = {
    "i_max": "2000",
    "adv_per_iter": "500",
    "adv_train_batch": "100",
    "train_pgd_steps": "5",
    "train_pgd_step_size": "0.1",
    "probe_steps": "10",
    "report_every": "20",
}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_lines(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def parse_values(raw: dict[str, str]) -> dict[str, object]:
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    out: dict[str, object] = {}
    for key, value in raw.items():
        if key not in types:
            raise KeyError(f"unknown config key {key!r}")
        kind = types[key]
        if kind == "bool":
            low = str(value).lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"{key}: expected a boolean, got {value!r}")
            out[key] = low in ("true", "1", "yes")
        elif kind == "int":
            out[key] = int(value)
        elif kind == "float":
            out[key] = float(value)
        else:
            out[key] = str(value)
    return out
