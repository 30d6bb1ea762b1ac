"""Predictor vectors for land-cover transitions.

A predictor vector for pixel ``(i, j)`` at target date ``t`` is laid out as::

    [one-hot class at t-1 (K)] [neighborhood class frequencies at t-1 (K)] [env]

Numeric environmental layers are standardized with statistics frozen from the
estimation samples; categorical layers are expanded one-hot.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import _accel
from .grid import MISSING, Dataset, EnvLayer, LandCoverGrid

WEIGHTINGS = ("counts", "exp_distance")


class EmptySampleError(ValueError):
    pass


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Square neighborhood of Chebyshev radius ``size`` around a pixel, center excluded."""
    size: int
    weighting: str = "counts"
    include_center: bool = False

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("neighborhood size must be >= 1")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if self.include_center:
            raise ValueError("the center pixel is never part of its neighborhood")


@dataclass
class FeatureVector:
    prev_class_onehot: np.ndarray
    neigh_freq: np.ndarray
    env: np.ndarray
    degenerate: bool = False

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.prev_class_onehot, self.neigh_freq, self.env])

    def __len__(self):
        return self.prev_class_onehot.size + self.neigh_freq.size + self.env.size


class Sample(NamedTuple):
    x: np.ndarray
    target: int
    position: tuple[int, int]
    date_index: int


# ---------------------------------------------------------------------------
# Raster-wide kernels
# ---------------------------------------------------------------------------

def frontier_pixels(cover: LandCoverGrid | np.ndarray, order: int = 4) -> np.ndarray:
    """Pixels with at least one valid neighbor of another class within ``order``."""
    cells = cover.cells if isinstance(cover, LandCoverGrid) else np.asarray(cover)
    if order < 1:
        raise ValueError("frontier order must be >= 1")
    return _accel.frontier(cells, order)


def frequency_map(cover: LandCoverGrid | np.ndarray, class_count: int,
                  spec: NeighborhoodSpec) -> np.ndarray:
    """Neighborhood frequencies for every pixel, shape ``(rows, cols, K)``.

    In ``counts`` mode the entries are neighbor counts per class. In
    ``exp_distance`` mode they are e^-d weights normalized to sum to one; pixels
    without any valid neighbor keep an all-zero row.
    """
    cells = cover.cells if isinstance(cover, LandCoverGrid) else np.asarray(cover)
    weighted = spec.weighting == "exp_distance"
    sums = _accel.class_sums(cells, class_count, spec.size, weighted)
    if not weighted:
        return sums
    total = sums.sum(axis=2, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        freq = np.where(total > 0, sums / np.where(total > 0, total, 1.0), 0.0)
    return freq


def neighborhood_frequencies(cover: LandCoverGrid, pos: tuple[int, int],
                             spec: NeighborhoodSpec, class_count: int) -> np.ndarray:
    i, j = pos
    if cover.cells[i, j] == MISSING:
        raise ValueError(f"pixel {pos} is missing")
    return frequency_map(cover, class_count, spec)[i, j].copy()


# ---------------------------------------------------------------------------
# Environmental encoding
# ---------------------------------------------------------------------------

@dataclass
class EnvEncoder:
    """Frozen encoding of the environmental layers into feature columns."""
    kinds: list[str] = field(default_factory=list)
    category_counts: list[int] = field(default_factory=list)
    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scale: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def width(self) -> int:
        return sum(1 if k == "numeric" else c
                   for k, c in zip(self.kinds, self.category_counts))

    @classmethod
    def fit(cls, layers: Sequence[EnvLayer], rows: np.ndarray, cols: np.ndarray) -> "EnvEncoder":
        kinds = [layer.kind for layer in layers]
        counts = [layer.category_count if layer.kind == "categorical" else 0 for layer in layers]
        numeric = [layer for layer in layers if layer.kind == "numeric"]
        mean = np.zeros(len(numeric))
        scale = np.ones(len(numeric))
        for r, layer in enumerate(numeric):
            values = layer.cells[rows, cols]
            if values.size:
                mean[r] = values.mean()
                sd = values.std()
                # constant layers standardize to 0
                scale[r] = sd if sd > 0 else 1.0
        return cls(kinds, counts, mean, scale)

    def encode(self, layers: Sequence[EnvLayer], rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        if [layer.kind for layer in layers] != self.kinds:
            raise ValueError("environmental layers do not match the fitted encoder")
        out = np.zeros((len(rows), self.width))
        col = 0
        r = 0
        for layer, count in zip(layers, self.category_counts):
            if layer.kind == "numeric":
                out[:, col] = (layer.cells[rows, cols] - self.mean[r]) / self.scale[r]
                col += 1
                r += 1
            else:
                cat = layer.cells[rows, cols]
                hit = (cat >= 1) & (cat <= count)
                out[np.nonzero(hit)[0], col + cat[hit] - 1] = 1.0
                col += count
        return out


def feature_width(class_count: int, encoder: EnvEncoder) -> int:
    return 2 * class_count + encoder.width


def eligible_mask(d: Dataset) -> np.ndarray:
    """Pixels valid in every cover and every environmental layer."""
    mask = d.valid_mask()
    for layer in d.env_layers:
        mask &= layer.valid
    return mask


def feature_matrix(d: Dataset, date_index: int, rows: np.ndarray, cols: np.ndarray,
                   spec: NeighborhoodSpec, encoder: EnvEncoder,
                   freq: np.ndarray | None = None) -> np.ndarray:
    """Predictor rows for target date ``date_index`` at the given pixels."""
    if date_index < 1 or date_index >= d.dates + 1:
        raise ValueError(f"target date index {date_index} out of range")
    prev = d.covers[date_index - 1]
    k = d.class_count
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    prev_cls = prev.cells[rows, cols]
    if np.any(prev_cls == MISSING):
        raise ValueError("feature requested at a missing pixel")
    if freq is None:
        freq = frequency_map(prev, k, spec)
    out = np.zeros((rows.size, 2 * k + encoder.width))
    out[np.arange(rows.size), prev_cls - 1] = 1.0
    out[:, k:2 * k] = freq[rows, cols]
    out[:, 2 * k:] = encoder.encode(d.env_layers, rows, cols)
    return out


def assemble_features(d: Dataset, date_index: int, pos: tuple[int, int],
                      spec: NeighborhoodSpec, encoder: EnvEncoder | None = None) -> FeatureVector:
    """Predictor vector for one pixel.

    Without an explicit ``encoder`` numeric layers are standardized over all
    eligible pixels of ``d``.
    """
    i, j = pos
    if date_index < 1:
        raise ValueError("date index must be >= 1")
    if d.covers[date_index - 1].cells[i, j] == MISSING:
        raise ValueError(f"pixel {pos} is missing at date {date_index - 1}")
    if encoder is None:
        r, c = np.nonzero(eligible_mask(d))
        encoder = EnvEncoder.fit(d.env_layers, r, c)
    x = feature_matrix(d, date_index, np.array([i]), np.array([j]), spec, encoder)[0]
    k = d.class_count
    neigh = x[k:2 * k]
    return FeatureVector(x[:k], neigh, x[2 * k:], degenerate=not neigh.any())


# ---------------------------------------------------------------------------
# Training sets
# ---------------------------------------------------------------------------

@dataclass
class SampleSet:
    """Design matrix plus targets and provenance of each row."""
    X: np.ndarray
    target: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    dates: np.ndarray
    class_count: int
    spec: NeighborhoodSpec
    encoder: EnvEncoder

    def __len__(self) -> int:
        return self.target.size

    def __getitem__(self, n: int) -> Sample:
        return Sample(self.X[n], int(self.target[n]),
                      (int(self.rows[n]), int(self.cols[n])), int(self.dates[n]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[n] for n in range(len(self)))

    def onehot_targets(self) -> np.ndarray:
        y = np.zeros((len(self), self.class_count))
        y[np.arange(len(self)), self.target - 1] = 1.0
        return y

    def subset(self, index: np.ndarray) -> "SampleSet":
        return SampleSet(self.X[index], self.target[index], self.rows[index],
                         self.cols[index], self.dates[index], self.class_count,
                         self.spec, self.encoder)

    def to_csv(self, path) -> None:
        q = self.X.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["i", "j", "t", "target"] + [f"x{m}" for m in range(q)])
            for n in range(len(self)):
                writer.writerow([self.rows[n], self.cols[n], self.dates[n], self.target[n]]
                                + [repr(float(v)) for v in self.X[n]])


def _check_transitions(d: Dataset, transitions) -> list[tuple[int, int]]:
    out = []
    for t0, t1 in transitions:
        if t1 != t0 + 1:
            raise ValueError(f"transition ({t0}, {t1}) is not between consecutive dates")
        if t0 < 0 or t1 >= d.dates:
            raise ValueError(f"transition ({t0}, {t1}) outside 0..{d.dates - 1}")
        out.append((int(t0), int(t1)))
    return out


def build_training_set(d: Dataset, transitions, spec: NeighborhoodSpec, *,
                       frontier_only: bool = False, frontier_order: int = 4,
                       max_samples: int | None = None, seed: int = 0,
                       encoder: EnvEncoder | None = None) -> SampleSet:
    """Collect one sample per eligible pixel per transition.

    Pixels are enumerated transition by transition in row-major order. When
    ``max_samples`` is smaller than the eligible count, a uniform subsample
    without replacement is drawn with ``seed`` and kept in enumeration order.
    The environmental encoder is fitted on the retained samples unless given.
    """
    transitions = _check_transitions(d, transitions)
    base = eligible_mask(d)
    parts = []
    for t0, t1 in transitions:
        mask = base & frontier_pixels(d.covers[t0], frontier_order) if frontier_only else base
        r, c = np.nonzero(mask)
        parts.append((np.full(r.size, t1), r, c))
    dates = np.concatenate([p[0] for p in parts]).astype(np.int64)
    rows = np.concatenate([p[1] for p in parts]).astype(np.int64)
    cols = np.concatenate([p[2] for p in parts]).astype(np.int64)
    if dates.size == 0:
        raise EmptySampleError("no eligible pixels for the requested transitions")

    if max_samples is not None and max_samples < dates.size:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(dates.size, size=max_samples, replace=False))
        dates, rows, cols = dates[keep], rows[keep], cols[keep]

    if encoder is None:
        encoder = EnvEncoder.fit(d.env_layers, rows, cols)
    k = d.class_count
    X = np.zeros((dates.size, 2 * k + encoder.width))
    target = np.zeros(dates.size, dtype=np.int64)
    for t1 in np.unique(dates):
        sel = np.nonzero(dates == t1)[0]
        X[sel] = feature_matrix(d, int(t1), rows[sel], cols[sel], spec, encoder)
        target[sel] = d.covers[t1].cells[rows[sel], cols[sel]]
    return SampleSet(X, target, rows, cols, dates, k, spec, encoder)
