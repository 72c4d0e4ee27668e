"""Standard training, PGD adversarial training, invariance retraining and simultaneous training.

Every pipeline is a deterministic function of the initial network, the data,
the ExperimentConfig and its seed.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, one_hot, softmax_cross_entropy
from .config import ExperimentConfig
from .data import ImageSet, next_batch, split_train_val
from .evaluation import CURVE_COLUMNS, Evaluator, RobustnessReport, _fmt
from .model import (
    DivergenceError,
    Network,
    RmspropState,
    forward,
    init_network,
    parameter_tensors,
    save_checkpoint,
)
from .pgd import pgd_linf

log = logging.getLogger(__name__)


@dataclass
class TraceRow:
    step: int
    report: RobustnessReport
    train_loss: float | None = None
    val_loss: float | None = None


@dataclass
class TrainingTrace:
    rows: list[TraceRow] = field(default_factory=list)
    terminal_checkpoint: str | None = None
    best_checkpoint: str | None = None
    best_criterion: str = ""
    best_step: int | None = None

    def append(self, row: TraceRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError(f"trace steps must increase: {row.step} after {self.rows[-1].step}")
        self.rows.append(row)

    def final_report(self) -> RobustnessReport:
        if not self.rows:
            raise ValueError("empty trace")
        return self.rows[-1].report

    def csv_text(self) -> str:
        lines = [",".join(CURVE_COLUMNS)]
        for r in self.rows:
            rep = r.report
            vals = (r.step, rep.clean_acc, rep.ptb_rob, rep.inv_rob, r.train_loss, r.val_loss)
            lines.append(",".join(_fmt(v) for v in vals))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.csv_text())

    @classmethod
    def read_csv(cls, path) -> "TrainingTrace":
        trace = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                def val(key):
                    return float(row[key]) if row.get(key) else None

                rep = RobustnessReport(
                    clean_acc=val("clean_acc"), ptb_rob=val("ptb_rob"), inv_rob=val("inv_rob"),
                    clean_count=1 if row.get("clean_acc") else 0,
                    ptb_count=1 if row.get("ptb_rob") else 0,
                    inv_count=1 if row.get("inv_rob") else 0,
                    step=int(row["step"]),
                )
                trace.rows.append(TraceRow(int(row["step"]), rep, val("train_loss"), val("val_loss")))
        return trace


@dataclass
class TrainResult:
    net: Network
    state: RmspropState
    trace: TrainingTrace
    best_net: Network | None = None


def _stream_seed(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) for p in parts])


def _sub_seed(*parts: int) -> int:
    return int(_stream_seed(*parts).generate_state(1)[0])


def gradient_step(net: Network, state: RmspropState, images: np.ndarray, labels: np.ndarray) -> float:
    """One RMSprop step on the batch-mean cross-entropy; returns the loss."""
    from .model import rmsprop_step

    with Tape() as tape:
        params = parameter_tensors(net, requires_grad=True)
        out = forward(net, images.astype(net.dtype, copy=False), params)
        loss = softmax_cross_entropy(out, one_hot(labels, 10, dtype=net.dtype))
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite training loss at optimizer step {state.steps}")
    grads = tape.backward(loss)
    rmsprop_step(net, {k: grads[t] for k, t in params.items()}, state)
    return value


def train_pass(net: Network, state: RmspropState, images: np.ndarray, labels: np.ndarray, batch: int) -> float:
    """One ordered pass over the arrays in mini-batches; returns mean loss."""
    total = 0.0
    for start in range(0, len(labels), batch):
        sl = slice(start, start + batch)
        total += gradient_step(net, state, images[sl], labels[sl]) * len(labels[sl])
    return total / max(len(labels), 1)


def mean_loss(net: Network, dataset: ImageSet, batch: int = 500) -> float:
    total = 0.0
    for start in range(0, len(dataset), batch):
        sl = slice(start, start + batch)
        out = forward(net, dataset.images[sl].astype(net.dtype, copy=False))
        loss = softmax_cross_entropy(out, one_hot(dataset.labels[sl], 10, dtype=net.dtype))
        total += float(loss.data) * len(dataset.labels[sl])
    return total / len(dataset)


def _save(net: Network, state: RmspropState, out_dir: str | None, name: str) -> str | None:
    if out_dir is None:
        return None
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    save_checkpoint(net, state, path)
    return path


def _fail(trace: TrainingTrace, out_dir: str | None, err: Exception) -> None:
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        trace.write_csv(os.path.join(out_dir, "trace.csv"))
    err.trace = trace  # type: ignore[attr-defined]


def fresh_state(net: Network, cfg: ExperimentConfig) -> RmspropState:
    return RmspropState.fresh(net, lr=cfg.lr, rho=cfg.rho, eps=cfg.opt_eps)


# ---------------------------------------------------------------------------
# standard training


def train_standard(
    cfg: ExperimentConfig,
    trainset: ImageSet,
    evaluator: Evaluator | None = None,
    out_dir: str | None = None,
) -> TrainResult:
    """Mini-batch RMSprop with patience-1 early stopping on validation loss.

    Returns the network from the epoch before validation loss first rose.
    With ``val_count = 0`` the training loss plays the validation role.
    """
    train, val = split_train_val(trainset, cfg.val_count, cfg.seed)
    net = init_network(cfg.seed, cfg.pool_stride, cfg.np_dtype)
    state = fresh_state(net, cfg)
    trace = TrainingTrace(best_criterion="val_loss")
    best = (net.copy(), state.copy())
    prev_val = math.inf
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.time()
        if cfg.reshuffle:
            order = np.random.default_rng(_stream_seed(cfg.seed, 1, epoch)).permutation(len(train))
        else:
            order = np.arange(len(train))
        try:
            train_loss = train_pass(net, state, train.images[order], train.labels[order], cfg.batch_size)
        except DivergenceError as err:
            _fail(trace, out_dir, err)
            raise
        val_loss = mean_loss(net, val) if len(val) else mean_loss(net, train)
        report = evaluator.report(net, epoch, inv=True) if evaluator else RobustnessReport(step=epoch)
        trace.append(TraceRow(epoch, report, train_loss, val_loss))
        log.info("epoch %d: train_loss=%.5f val_loss=%.5f clean=%s ptb=%s (%.0fs)", epoch, train_loss, val_loss,
                 _fmt(report.clean_acc), _fmt(report.ptb_rob), time.time() - t0)
        if val_loss > prev_val:
            break
        prev_val = val_loss
        best = (net.copy(), state.copy())
    net, state = best
    trace.best_step = epoch - 1 if val_loss > prev_val else epoch
    trace.terminal_checkpoint = _save(net, state, out_dir, "model.ckpt")
    trace.best_checkpoint = trace.terminal_checkpoint
    return TrainResult(net, state, trace)


# ---------------------------------------------------------------------------
# adversarial loops


def _adversarial_loop(
    net: Network,
    state: RmspropState,
    cfg: ExperimentConfig,
    trainset: ImageSet,
    evaluator: Evaluator,
    inv_train: ImageSet | None,
    out_dir: str | None,
) -> TrainResult:
    net = net.copy()
    state = state.copy()
    has_inv = inv_train is not None and len(inv_train) > 0
    trace = TrainingTrace(best_criterion="min(ptb_rob, inv_rob)" if has_inv else "ptb_rob")
    best_score = -math.inf
    best_net: Network | None = None
    probe_cfg = cfg.probe_pgd(_sub_seed(cfg.seed, 3))
    cursor = 0
    acc = 0.0
    i = 0
    # conjunction, so reaching the target ends the loop before i_max
    while acc <= cfg.acc_t and i < cfg.i_max:
        t0 = time.time()
        batch, cursor = next_batch(trainset, cursor, cfg.adv_per_iter)
        adv = pgd_linf(net, batch.images, batch.labels, cfg.train_pgd(_sub_seed(cfg.seed, 2, i)))
        if not np.all(np.isfinite(adv)):
            err = DivergenceError(f"non-finite attack output at iteration {i}; the network has diverged")
            _fail(trace, out_dir, err)
            raise err
        assert np.all(np.abs(adv - batch.images) <= cfg.pgd_epsilon + 1e-6)
        assert adv.min() >= 0 and adv.max() <= 1
        images, labels = adv, batch.labels
        if has_inv:
            images = np.concatenate([adv, inv_train.images.astype(adv.dtype)])
            labels = np.concatenate([batch.labels, inv_train.labels])
            perm = np.random.default_rng(_stream_seed(cfg.seed, 4, i)).permutation(len(labels))
            images, labels = images[perm], labels[perm]
        try:
            loss = train_pass(net, state, images, labels, cfg.adv_train_batch)
        except DivergenceError as err:
            _fail(trace, out_dir, err)
            raise
        i += 1
        # between reports the loop condition keeps the last probed value
        full = i % cfg.report_every == 0 or i == cfg.i_max
        report = evaluator.report(net, i, clean=full, ptb=full, inv=full, pgd=probe_cfg)
        trace.append(TraceRow(i, report, loss, None))
        if full:
            acc = report.ptb_rob
            score = acc if not has_inv else min(acc, report.inv_rob if report.inv_rob is not None else acc)
            if score > best_score:
                best_score = score
                best_net = net.copy()
                trace.best_step = i
        log.info("iter %d: loss=%.4f ptb=%s inv=%s clean=%s (%.1fs)", i, loss, _fmt(report.ptb_rob),
                 _fmt(report.inv_rob), _fmt(report.clean_acc), time.time() - t0)
    trace.terminal_checkpoint = _save(net, state, out_dir, "model.ckpt")
    if best_net is not None:
        trace.best_checkpoint = _save(best_net, state, out_dir, "best.ckpt")
    return TrainResult(net, state, trace, best_net)


def train_ptb_adversarial(
    net: Network,
    state: RmspropState,
    cfg: ExperimentConfig,
    trainset: ImageSet,
    evaluator: Evaluator,
    out_dir: str | None = None,
) -> TrainResult:
    """Repeat: PGD on the next batch against the current model, one training
    pass with the original labels, probe ptb-robustness; stop at ``acc_t`` or
    ``i_max`` iterations."""
    return _adversarial_loop(net, state, cfg, trainset, evaluator, None, out_dir)


def train_simultaneous(
    net: Network,
    state: RmspropState,
    cfg: ExperimentConfig,
    trainset: ImageSet,
    inv_train: ImageSet,
    evaluator: Evaluator,
    out_dir: str | None = None,
) -> TrainResult:
    """Adversarial training where every pass also covers the fixed invariance set."""
    return _adversarial_loop(net, state, cfg, trainset, evaluator, inv_train, out_dir)


def retrain_invariance(
    net: Network,
    state: RmspropState,
    inv_train: ImageSet,
    cfg: ExperimentConfig,
    evaluator: Evaluator,
    out_dir: str | None = None,
) -> TrainResult:
    """Introduce invariance examples in increments, retraining on the running set.

    Step ids count the examples introduced so far; step 0 is the base model.
    Optimizer state carries over from ``state``.
    """
    net = net.copy()
    state = state.copy()
    trace = TrainingTrace()
    trace.append(TraceRow(0, evaluator.report(net, 0)))
    total = len(inv_train)
    introduced = 0
    k = 0
    while introduced < total:
        k += 1
        introduced = min(total, introduced + cfg.retrain_increment)
        images = inv_train.images[:introduced]
        labels = inv_train.labels[:introduced]
        losses = []
        for epoch in range(cfg.retrain_epochs):
            perm = np.random.default_rng(_stream_seed(cfg.seed, 5, k, epoch)).permutation(introduced)
            try:
                losses.append(train_pass(net, state, images[perm], labels[perm], cfg.retrain_batch))
            except DivergenceError as err:
                _fail(trace, out_dir, err)
                raise
        report = evaluator.report(net, introduced)
        trace.append(TraceRow(introduced, report, losses[-1], None))
        log.info("retrain %d/%d: loss=%.4f clean=%s ptb=%s inv=%s", introduced, total, losses[-1],
                 _fmt(report.clean_acc), _fmt(report.ptb_rob), _fmt(report.inv_rob))
    trace.terminal_checkpoint = _save(net, state, out_dir, "model.ckpt")
    return TrainResult(net, state, trace)
