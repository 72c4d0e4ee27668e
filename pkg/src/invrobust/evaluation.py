"""Clean accuracy, ptb-/inv-robustness, combined robustness and report files."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .data import ImageSet
from .model import Network, predict
from .pgd import PgdConfig, pgd_linf

log = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-9
PSI_GRID = np.round(np.linspace(0.0, 1.0, 101), 2)


@dataclass(frozen=True)
class RobustnessReport:
    """Metric snapshot. A metric left as None was not measured."""

    clean_acc: float | None = None
    ptb_rob: float | None = None
    inv_rob: float | None = None
    clean_count: int = 0
    ptb_count: int = 0
    inv_count: int = 0
    step: int = 0
    config_hash: str = ""

    def __post_init__(self):
        for name in ("clean", "ptb", "inv"):
            value = getattr(self, f"{name}_acc" if name == "clean" else f"{name}_rob")
            count = getattr(self, f"{name}_count")
            if value is not None and (count <= 0 or not 0 <= value <= 1):
                raise ValueError(f"{name} metric {value} with count {count} is not a valid fraction")


def _fraction(hits: np.ndarray) -> float:
    return int(np.count_nonzero(hits)) / len(hits)


def eval_clean(net: Network, testset: ImageSet) -> float:
    if len(testset) == 0:
        raise ValueError("eval_clean needs a non-empty set")
    return _fraction(predict(net, testset.images) == testset.labels)


def eval_ptb(net: Network, sources: ImageSet, cfg: PgdConfig) -> float:
    if len(sources) == 0:
        raise ValueError("eval_ptb needs a non-empty set")
    adv = pgd_linf(net, sources.images, sources.labels, cfg)
    return _fraction(predict(net, adv) == sources.labels)


def eval_inv(net: Network, inv_testset: ImageSet) -> float:
    """Agreement between the network and the oracle labels carried by the set."""
    if len(inv_testset) == 0:
        raise ValueError("eval_inv needs a non-empty set")
    if inv_testset.labels is None:
        raise ValueError("eval_inv needs oracle labels")
    return _fraction(predict(net, inv_testset.images) == inv_testset.labels)


def select_probe(testset: ImageSet, size: int, seed: int) -> ImageSet:
    """Seed-chosen subset reused for every model in a comparison."""
    size = min(size, len(testset))
    idx = np.sort(np.random.default_rng(seed).permutation(len(testset))[:size])
    return testset.subset(idx)


@dataclass
class Evaluator:
    """Fixed evaluation sets plus the attack used to probe ptb-robustness."""

    clean_set: ImageSet
    ptb_sources: ImageSet
    pgd: PgdConfig
    inv_set: ImageSet | None = None
    config_hash: str = ""

    def ptb(self, net: Network, pgd: PgdConfig | None = None) -> float:
        return eval_ptb(net, self.ptb_sources, pgd or self.pgd)

    def report(self, net: Network, step: int = 0, clean: bool = True, ptb: bool = True, inv: bool = True,
               pgd: PgdConfig | None = None) -> RobustnessReport:
        has_inv = inv and self.inv_set is not None and len(self.inv_set) > 0
        return RobustnessReport(
            clean_acc=eval_clean(net, self.clean_set) if clean else None,
            ptb_rob=self.ptb(net, pgd) if ptb else None,
            inv_rob=eval_inv(net, self.inv_set) if has_inv else None,
            clean_count=len(self.clean_set) if clean else 0,
            ptb_count=len(self.ptb_sources) if ptb else 0,
            inv_count=len(self.inv_set) if has_inv else 0,
            step=step,
            config_hash=self.config_hash,
        )


# ---------------------------------------------------------------------------
# combined robustness


def combined_robustness(psi: float, report: RobustnessReport) -> float:
    """psi * inv_rob + (1 - psi) * ptb_rob."""
    if not 0 <= psi <= 1:
        raise ValueError(f"psi must lie in [0, 1], got {psi}")
    if report.ptb_rob is None or report.inv_rob is None:
        raise ValueError("combined robustness needs both ptb_rob and inv_rob")
    return psi * report.inv_rob + (1 - psi) * report.ptb_rob


@dataclass(frozen=True)
class Intersection:
    psi: float
    inside: bool  # whether psi lies in [0, 1]


def intersection_psi(a: RobustnessReport, b: RobustnessReport) -> Intersection | None:
    """Where the two combined-robustness lines cross, or None if they are parallel."""
    # line(psi) = ptb + psi * (inv - ptb)
    slope_diff = (a.inv_rob - a.ptb_rob) - (b.inv_rob - b.ptb_rob)
    if slope_diff == 0:
        return None
    psi = (b.ptb_rob - a.ptb_rob) / slope_diff
    return Intersection(psi, 0 <= psi <= 1)


@dataclass
class DominanceInterval:
    model: str
    lo: float
    hi: float


def dominance_intervals(reports: dict[str, RobustnessReport]) -> list[DominanceInterval]:
    """Split [0, 1] into the psi-intervals on which one model strictly dominates.

    Interval ends are the pairwise intersections; stretches where the best
    two lines are within the boundary tolerance are attributed to nobody.
    """
    names = list(reports)
    cuts = {0.0, 1.0}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            hit = intersection_psi(reports[a], reports[b])
            if hit is not None and hit.inside:
                cuts.add(hit.psi)
    cuts = sorted(cuts)
    intervals: list[DominanceInterval] = []
    for lo, hi in zip(cuts, cuts[1:]):
        if hi - lo <= BOUNDARY_TOL:
            continue
        mid = (lo + hi) / 2
        values = {n: combined_robustness(mid, r) for n, r in reports.items()}
        ranked = sorted(values, key=values.get, reverse=True)
        if len(ranked) > 1 and values[ranked[0]] - values[ranked[1]] <= BOUNDARY_TOL:
            continue
        if intervals and intervals[-1].model == ranked[0] and abs(intervals[-1].hi - lo) <= BOUNDARY_TOL:
            intervals[-1].hi = hi
        else:
            intervals.append(DominanceInterval(ranked[0], lo, hi))
    return intervals


# ---------------------------------------------------------------------------
# report files

CURVE_COLUMNS = ("step", "clean_acc", "ptb_rob", "inv_rob", "train_loss", "val_loss")


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_tradeoff_csv(reports: dict[str, RobustnessReport], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["psi", "model_name", "combined_robustness"])
        for psi in PSI_GRID:
            for name, rep in reports.items():
                w.writerow([f"{psi:.2f}", name, repr(combined_robustness(float(psi), rep))])


def summary_text(reports: dict[str, RobustnessReport]) -> str:
    lines = ["# models"]
    for name, r in reports.items():
        lines.append(f"{name}: clean_acc={_fmt(r.clean_acc)} ptb_rob={_fmt(r.ptb_rob)} inv_rob={_fmt(r.inv_rob)}")
    lines.append("# intersections")
    names = list(reports)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            hit = intersection_psi(reports[a], reports[b])
            if hit is None:
                lines.append(f"{a} x {b}: parallel")
            else:
                where = "" if hit.inside else " (outside [0, 1])"
                lines.append(f"{a} x {b}: psi={hit.psi:.6f}{where}")
    lines.append("# dominant intervals")
    for iv in dominance_intervals(reports):
        lines.append(f"{iv.model}: ({iv.lo:.6f}, {iv.hi:.6f})")
    return "\n".join(lines) + "\n"


def emit_reports(traces: dict, out_dir, terminal: dict[str, RobustnessReport] | None = None) -> dict[str, str]:
    """Write per-trace curve CSVs, the psi tradeoff CSV and a dominance summary.

    ``traces`` maps model name to a TrainingTrace (or None when only a
    terminal report exists); ``terminal`` overrides the end-point reports.
    """
    if not traces and not terminal:
        raise ValueError("emit_reports needs at least one trace or report")
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"cannot write to {out_dir}")
    written: dict[str, str] = {}
    finals: dict[str, RobustnessReport] = dict(terminal or {})
    for name, trace in traces.items():
        if trace is None:
            continue
        path = os.path.join(out_dir, f"curve-{name}.csv")
        trace.write_csv(path)
        written[f"curve-{name}"] = path
        if name not in finals:
            finals[name] = trace.final_report()
    path = os.path.join(out_dir, "tradeoff.csv")
    write_tradeoff_csv(finals, path)
    written["tradeoff"] = path
    path = os.path.join(out_dir, "summary.txt")
    with open(path, "w") as f:
        f.write(summary_text(finals))
    written["summary"] = path
    return written
