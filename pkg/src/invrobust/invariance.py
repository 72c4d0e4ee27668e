"""Model-independent invariance examples and the k-NN label oracle.

An example starts from a source digit, finds the closest training digits of
other classes, aligns each one to the source over a grid of small
translations and rotations, and keeps the best match clipped into the
l-infinity ball around the source. Nothing here looks at a network.
"""

from __future__ import annotations

import csv
import functools
import logging
import os
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .data import ImageSet, load_label_override, read_idx_images, read_idx_labels, write_idx

log = logging.getLogger(__name__)

SIDE = 28
PIXELS = SIDE * SIDE

METADATA_COLUMNS = (
    "index",
    "source_index",
    "source_label",
    "target_index",
    "target_class",
    "algo_label",
    "oracle_label",
    "linf_distance",
)


@dataclass(frozen=True)
class InvConfig:
    epsilon: float = 0.3
    translate: int = 3
    rotations: tuple[float, ...] = (-20.0, -10.0, 0.0, 10.0, 20.0)
    pool: int = 50
    # keep only examples whose oracle label differs from the source label
    require_change: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.pool < 1:
            raise ValueError(f"pool must be >= 1, got {self.pool}")
        if self.translate < 0:
            raise ValueError(f"translate must be >= 0, got {self.translate}")

    def transforms(self) -> list[tuple[int, int, float]]:
        """(dx, dy, degrees) grid with the identity first."""
        grid = [(0, 0, 0.0)]
        r = range(-self.translate, self.translate + 1)
        for deg in self.rotations:
            for dy in r:
                for dx in r:
                    if (dx, dy, float(deg)) != (0, 0, 0.0):
                        grid.append((dx, dy, float(deg)))
        return grid


@dataclass
class InvExample:
    image: np.ndarray  # (28, 28, 1)
    source_index: int
    source_label: int
    target_index: int
    target_class: int
    algo_label: int
    oracle_label: int
    transform: tuple[int, int, float] = (0, 0, 0.0)

    def linf_distance(self, source_image: np.ndarray) -> float:
        return float(np.abs(self.image - source_image).max())


# ---------------------------------------------------------------------------
# alignment


@functools.lru_cache(maxsize=32)
def _index_map(dx: int, dy: int, degrees: float) -> np.ndarray:
    """Flat source index for every output pixel; PIXELS marks zero fill.

    Output pixel (r, c) samples the target at the rotation-about-centre
    inverse of (r - dy, c - dx), rounded to the nearest pixel.
    """
    rows, cols = np.mgrid[0:SIDE, 0:SIDE].astype(np.float64)
    centre = (SIDE - 1) / 2
    y = rows - dy - centre
    x = cols - dx - centre
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    src_x = cos * x + sin * y + centre
    src_y = -sin * x + cos * y + centre
    ri = np.floor(src_y + 0.5).astype(np.int64)
    ci = np.floor(src_x + 0.5).astype(np.int64)
    inside = (ri >= 0) & (ri < SIDE) & (ci >= 0) & (ci < SIDE)
    flat = np.where(inside, ri * SIDE + ci, PIXELS)
    flat.setflags(write=False)
    return flat.ravel()


def transform_image(image: np.ndarray, dx: int, dy: int, degrees: float) -> np.ndarray:
    flat = np.append(np.asarray(image, dtype=np.float64).reshape(PIXELS), 0.0)
    return flat[_index_map(dx, dy, degrees)].reshape(SIDE, SIDE, 1).astype(np.asarray(image).dtype)


def _stacked_maps(cfg: InvConfig) -> np.ndarray:
    return np.stack([_index_map(*t) for t in cfg.transforms()])


def _align_many(targets: np.ndarray, source: np.ndarray, cfg: InvConfig):
    """Residual l2 distance for every (target, transform) pair: shape (P, T)."""
    maps = _stacked_maps(cfg)
    padded = np.concatenate([targets.reshape(len(targets), PIXELS), np.zeros((len(targets), 1), targets.dtype)], axis=1)
    src = source.reshape(PIXELS).astype(np.float64)
    moved = padded[:, maps].astype(np.float64)  # (P, T, PIXELS)
    dist = np.sqrt(((moved - src) ** 2).sum(axis=2))
    return dist, moved


def align(target_image, source_image, cfg: InvConfig) -> tuple[np.ndarray, float, tuple[int, int, float]]:
    """Best grid transform of ``target_image`` onto ``source_image``.

    Returns (aligned target, l2 distance to the source, (dx, dy, degrees)).
    """
    target = np.asarray(target_image).reshape(1, SIDE, SIDE, 1)
    dist, moved = _align_many(target, np.asarray(source_image), cfg)
    best = int(np.argmin(dist[0]))
    aligned = moved[0, best].reshape(SIDE, SIDE, 1).astype(np.asarray(target_image).dtype)
    return aligned, float(dist[0, best]), cfg.transforms()[best]


# ---------------------------------------------------------------------------
# k-NN label oracle


def _k_smallest(d: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries ordered by (value, index)."""
    k = min(k, len(d))
    if k == len(d):
        return np.argsort(d, kind="stable")
    part = np.argpartition(d, k - 1)[:k]
    thr = d[part].max()
    below = np.flatnonzero(d < thr)
    ties = np.flatnonzero(d == thr)[: k - len(below)]
    chosen = np.concatenate([below, ties])
    return chosen[np.lexsort((chosen, d[chosen]))]


def _vote(neighbour_labels: np.ndarray) -> int:
    counts = np.bincount(neighbour_labels, minlength=10)
    top = np.flatnonzero(counts == counts.max())
    if len(top) == 1:
        return int(top[0])
    # tie: the tied class whose member is nearest wins
    for lab in neighbour_labels:
        if lab in top:
            return int(lab)
    raise AssertionError("unreachable")


def oracle_knn(image, reference: ImageSet, k: int, exclude: Iterable[int] = ()) -> int:
    """Majority label among the k nearest reference images (l2)."""
    return KnnOracle(reference, k)(image, exclude)


class KnnOracle:
    """Stand-in for human labelers: k-NN vote over a reference set."""

    def __init__(self, reference: ImageSet, k: int = 5):
        if len(reference) == 0:
            raise ValueError("the k-NN oracle needs a non-empty reference set")
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        self.reference = reference
        self.k = k
        self._flat = reference.images.reshape(len(reference), PIXELS).astype(np.float64)
        self._sq = (self._flat**2).sum(axis=1)

    def distances(self, image) -> np.ndarray:
        q = np.asarray(image, dtype=np.float64).reshape(PIXELS)
        d2 = self._sq - 2 * self._flat @ q + q @ q
        return np.maximum(d2, 0)

    def __call__(self, image, exclude: Iterable[int] = ()) -> int:
        d = self.distances(image)
        keep = np.ones(len(d), dtype=bool)
        keep[np.fromiter(exclude, dtype=np.int64)] = False
        if not keep.any():
            raise ValueError("every reference image is excluded")
        pos = np.flatnonzero(keep)
        nearest = pos[_k_smallest(d[pos], self.k)]
        return _vote(self.reference.labels[nearest])


# ---------------------------------------------------------------------------
# generation

Oracle = Callable[..., int]


def _call_oracle(oracle: Oracle, image: np.ndarray, exclude: tuple[int, ...]) -> int:
    if isinstance(oracle, KnnOracle):
        return oracle(image, exclude)
    return int(oracle(image))


class _Candidates:
    """Raw-l2 nearest neighbours of a query among the training images."""

    def __init__(self, trainset: ImageSet):
        self.trainset = trainset
        self.flat = trainset.images.reshape(len(trainset), PIXELS).astype(np.float64)
        self.sq = (self.flat**2).sum(axis=1)

    def nearest_other_class(self, image: np.ndarray, label: int, pool: int) -> np.ndarray:
        q = image.reshape(PIXELS).astype(np.float64)
        d = np.maximum(self.sq - 2 * self.flat @ q + q @ q, 0)
        d[self.trainset.labels == label] = np.inf
        n_other = int(np.count_nonzero(self.trainset.labels != label))
        if n_other == 0:
            raise ValueError(f"no training images with a class other than {label}")
        return _k_smallest(d, min(pool, n_other))


@functools.lru_cache(maxsize=4)
def _candidates(trainset: ImageSet) -> _Candidates:
    # ImageSet hashes by identity
    return _Candidates(trainset)


def generate_invariance_example(
    source_index: int,
    trainset: ImageSet,
    cfg: InvConfig,
    oracle: Oracle,
    sources: ImageSet | None = None,
) -> InvExample:
    """Craft one invariance example from ``sources[source_index]``.

    ``sources`` defaults to ``trainset``; candidates always come from
    ``trainset``.
    """
    sources = trainset if sources is None else sources
    x = sources.images[source_index]
    y = int(sources.labels[source_index])
    cand = _candidates(trainset)
    pool_idx = cand.nearest_other_class(x, y, cfg.pool)
    dist, moved = _align_many(trainset.images[pool_idx], x, cfg)
    flat_best = int(np.argmin(dist))
    p, t = divmod(flat_best, dist.shape[1])
    aligned = moved[p, t].reshape(SIDE, SIDE, 1)
    xd = x.astype(np.float64)
    lo = np.maximum(xd - cfg.epsilon, 0.0)
    hi = np.minimum(xd + cfg.epsilon, 1.0)
    image = np.clip(aligned, lo, hi).astype(x.dtype)
    # float32 rounding must not leave the ball
    image = np.clip(image, np.maximum(x - np.float32(cfg.epsilon), 0), np.minimum(x + np.float32(cfg.epsilon), 1))
    target_index = int(pool_idx[p])
    same_set = sources is trainset
    exclude = (int(source_index), target_index) if same_set else (target_index,)
    oracle_label = _call_oracle(oracle, image, exclude)
    return InvExample(
        image=image,
        source_index=int(source_index),
        source_label=y,
        target_index=target_index,
        target_class=int(trainset.labels[target_index]),
        algo_label=y,
        oracle_label=oracle_label,
        transform=cfg.transforms()[t],
    )


def example_labels(examples: list[InvExample], label_mode: str, override: dict[int, int] | None = None) -> np.ndarray:
    if label_mode == "algorithm":
        return np.array([e.algo_label for e in examples], dtype=np.int64)
    if label_mode == "oracle":
        return np.array([e.oracle_label for e in examples], dtype=np.int64)
    if label_mode == "file":
        if override is None:
            raise ValueError("label_mode 'file' needs a label override")
        missing = [i for i in range(len(examples)) if i not in override]
        if missing:
            raise ValueError(f"label override has no entry for example indices {missing[:10]}"
                             + (" ..." if len(missing) > 10 else ""))
        return np.array([override[i] for i in range(len(examples))], dtype=np.int64)
    raise ValueError(f"unknown label mode {label_mode!r}")


def as_image_set(examples: list[InvExample], label_mode: str, override: dict[int, int] | None = None) -> ImageSet:
    labels = example_labels(examples, label_mode, override)
    if examples:
        images = np.stack([e.image for e in examples])
    else:
        images = np.zeros((0, SIDE, SIDE, 1), dtype=np.float32)
    ids = np.array([e.source_index for e in examples], dtype=np.int64)
    return ImageSet(images, labels, "generated", ids)


def build_inv_dataset(
    trainset: ImageSet,
    count: int,
    cfg: InvConfig,
    oracle: Oracle,
    label_mode: str = "oracle",
    override: dict[int, int] | None = None,
    sources: ImageSet | None = None,
    exclude_sources: Iterable[int] = (),
) -> tuple[ImageSet, list[InvExample]]:
    """Generate ``count`` examples from seed-ordered sources.

    With ``cfg.require_change`` sources whose example keeps the source label
    under the oracle are skipped until ``count`` examples are collected.
    """
    sources = trainset if sources is None else sources
    if count < 0:
        raise ValueError("count must be >= 0")
    excluded = set(int(i) for i in exclude_sources)
    order = [int(i) for i in np.random.default_rng(cfg.seed).permutation(len(sources)) if int(i) not in excluded]
    if count > len(order):
        raise ValueError(f"asked for {count} examples but only {len(order)} sources are available")
    examples: list[InvExample] = []
    tried = 0
    for idx in order:
        if len(examples) == count:
            break
        ex = generate_invariance_example(idx, trainset, cfg, oracle, sources)
        tried += 1
        assert ex.linf_distance(sources.images[idx]) <= cfg.epsilon + 1e-6
        if cfg.require_change and ex.oracle_label == ex.source_label:
            continue
        examples.append(ex)
    if len(examples) < count:
        raise ValueError(f"only {len(examples)} of {count} examples could be generated from {tried} sources")
    if tried:
        log.info("invariance set: %d examples from %d sources", len(examples), tried)
    return as_image_set(examples, label_mode, override), examples


def label_change_fraction(examples: list[InvExample]) -> float:
    if not examples:
        return 0.0
    return float(np.mean([e.oracle_label != e.source_label for e in examples]))


# ---------------------------------------------------------------------------
# export / import: IDX pair plus metadata CSV


def export_inv_set(examples: list[InvExample], sources: ImageSet, prefix, label_mode: str = "oracle",
                   override: dict[int, int] | None = None) -> dict[str, str]:
    """Write ``<prefix>-images.idx``, ``<prefix>-labels.idx`` and ``<prefix>-meta.csv``."""
    paths = inv_set_paths(prefix)
    write_idx(as_image_set(examples, label_mode, override), paths["images"], paths["labels"], exact=True)
    with open(paths["meta"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METADATA_COLUMNS)
        for i, e in enumerate(examples):
            w.writerow([
                i, e.source_index, e.source_label, e.target_index, e.target_class,
                e.algo_label, e.oracle_label, f"{e.linf_distance(sources.images[e.source_index]):.6f}",
            ])
    return paths


def inv_set_paths(prefix) -> dict[str, str]:
    prefix = os.fspath(prefix)
    return {"images": f"{prefix}-images.idx", "labels": f"{prefix}-labels.idx", "meta": f"{prefix}-meta.csv"}


def load_inv_set(prefix, label_override_csv=None) -> list[InvExample]:
    """Read an exported set back; an ``index,label`` CSV replaces oracle labels.

    This is also the import path for externally crafted test sets.
    """
    paths = inv_set_paths(prefix)
    images = read_idx_images(paths["images"])
    labels = read_idx_labels(paths["labels"])
    if len(images) != len(labels):
        raise ValueError(f"{paths['images']} and {paths['labels']} disagree on the sample count")
    examples = []
    with open(paths["meta"], newline="") as f:
        rows = list(csv.DictReader(f))
    if len(rows) != len(images):
        raise ValueError(f"{paths['meta']} has {len(rows)} rows for {len(images)} images")
    for row, img in zip(rows, images):
        examples.append(InvExample(
            image=img,
            source_index=int(row["source_index"]),
            source_label=int(row["source_label"]),
            target_index=int(row["target_index"]),
            target_class=int(row["target_class"]),
            algo_label=int(row["algo_label"]),
            oracle_label=int(row["oracle_label"]),
        ))
    if label_override_csv is not None:
        override = load_label_override(label_override_csv, size=len(examples))
        for i, lab in override.items():
            examples[i].oracle_label = lab
    return examples
