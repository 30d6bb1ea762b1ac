"""Seeded synthetic landscapes with a known transition law.

Random streams are numpy ``PCG64`` generators seeded through
``SeedSequence([seed, stream])``; stream 0 draws the law coefficients,
stream 1 the initial map, stream 2 the environmental layers and stream
``10 + t`` the transition into date ``t``. PCG64 and SeedSequence are
specified bit-exactly by numpy, so datasets are identical across platforms.

Dynamics
--------
``linear_logit``
    ``score_k = persistence * [prev == k] + neighbor_weight * n_k
    + env_weight * sum_r g_kr * env_r`` where ``n_k`` counts class-``k``
    pixels in the square ring of radius ``effective_radius`` (center
    excluded, truncated at the border) and ``g`` is drawn from stream 0.
    The next class is drawn from ``softmax(score)``.
``xor_gate``
    ``A = env_1 > 0``, ``B = env_2 > 0``; the class advances cyclically
    (``k -> k mod K + 1``) where ``A xor B`` holds and persists elsewhere.
    Needs at least two environmental layers.

After drawing, each label is replaced with probability ``noise`` by a
uniformly chosen *other* class.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .grid import (Dataset, EnvLayer, LandCoverGrid, format_keyvalue,
                   parse_keyvalue)

DYNAMICS = ("linear_logit", "xor_gate")


@dataclass(frozen=True)
class GeneratorSpec:
    rows: int = 60
    cols: int = 60
    K: int = 4
    dates: int = 4
    dynamics: str = "linear_logit"
    effective_radius: int = 1
    env_layer_count: int = 1
    noise: float = 0.0
    seed: int = 0
    persistence: float = 2.0
    neighbor_weight: float = 0.25
    env_weight: float = 1.0
    patch_scale: float = 3.0
    env_scale: float = 6.0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid dimensions must be positive")
        if self.dates < 2:
            raise ValueError("need at least 2 dates")
        if self.dynamics not in DYNAMICS:
            raise ValueError(f"dynamics must be one of {DYNAMICS}")
        if self.effective_radius < 1:
            raise ValueError("effective_radius must be >= 1")
        if not 0.0 <= self.noise <= 0.5:
            raise ValueError("noise must lie in [0, 0.5]")
        if self.dynamics == "xor_gate" and self.env_layer_count < 2:
            raise ValueError("xor_gate needs env_layer_count >= 2")

    def to_text(self) -> str:
        return format_keyvalue((k, str(v)) for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "GeneratorSpec":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in parse_keyvalue(text):
            if key not in types:
                raise ValueError(f"unknown generator key {key!r}")
            kind = types[key]
            kwargs[key] = value if kind == "str" else (int(value) if kind == "int" else float(value))
        return cls(**kwargs)

    @classmethod
    def read(cls, path: str | os.PathLike) -> "GeneratorSpec":
        with open(path) as fh:
            return cls.from_text(fh.read())


def _rng(spec: GeneratorSpec, stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, stream])


def _env_coefficients(spec: GeneratorSpec) -> np.ndarray:
    return _rng(spec, 0).normal(size=(spec.K, spec.env_layer_count))


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.normal(size=shape), sigma=sigma, mode="reflect")
    sd = f.std()
    return (f - f.mean()) / (sd if sd > 0 else 1.0)


def _ring_counts(cells: np.ndarray, K: int, radius: int) -> np.ndarray:
    kernel = np.ones((2 * radius + 1, 2 * radius + 1))
    kernel[radius, radius] = 0.0
    out = np.empty(cells.shape + (K,))
    for k in range(K):
        out[..., k] = ndimage.correlate((cells == k + 1).astype(np.float64), kernel,
                                        mode="constant", cval=0.0)
    return out


def law_probs(spec: GeneratorSpec, prev: np.ndarray, env: list[np.ndarray]) -> np.ndarray:
    """Noise-free conditional law of the next class, shape ``(rows, cols, K)``."""
    K = spec.K
    onehot = (prev[..., None] == np.arange(1, K + 1)).astype(np.float64)
    if spec.dynamics == "xor_gate":
        shift = (env[0] > 0) ^ (env[1] > 0)
        nxt = np.where(shift, prev % K + 1, prev)
        return (nxt[..., None] == np.arange(1, K + 1)).astype(np.float64)
    score = spec.persistence * onehot
    score = score + spec.neighbor_weight * _ring_counts(prev, K, spec.effective_radius)
    if env:
        g = _env_coefficients(spec)
        score = score + spec.env_weight * np.einsum("rij,kr->ijk", np.stack(env), g)
    score -= score.max(axis=-1, keepdims=True)
    e = np.exp(score)
    return e / e.sum(axis=-1, keepdims=True)


def noisy_probs(spec: GeneratorSpec, probs: np.ndarray) -> np.ndarray:
    """Marginal law after uniform label flips with probability ``noise``."""
    return (1.0 - spec.noise) * probs + spec.noise * (1.0 - probs) / (spec.K - 1)


def _draw(spec: GeneratorSpec, probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    K = spec.K
    cum = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])
    cls = np.minimum((u[..., None] >= cum).sum(axis=-1), K - 1) + 1
    flip = rng.random(cls.shape) < spec.noise
    offset = rng.integers(1, K, size=cls.shape)
    return np.where(flip, (cls - 1 + offset) % K + 1, cls)


def generate(spec: GeneratorSpec) -> Dataset:
    shape = (spec.rows, spec.cols)
    init_rng = _rng(spec, 1)
    fields0 = np.stack([_smooth_field(init_rng, shape, spec.patch_scale) for _ in range(spec.K)])
    cells = np.argmax(fields0, axis=0) + 1

    env_rng = _rng(spec, 2)
    env = [_smooth_field(env_rng, shape, spec.env_scale) for _ in range(spec.env_layer_count)]

    covers = [LandCoverGrid(cells, date_label="0")]
    for t in range(1, spec.dates):
        probs = law_probs(spec, cells, env)
        cells = _draw(spec, probs, _rng(spec, 10 + t))
        covers.append(LandCoverGrid(cells, date_label=str(t)))
    layers = [EnvLayer(f"env{r + 1}", "numeric", e) for r, e in enumerate(env)]
    return Dataset(spec.K, covers, layers, [f"class{k}" for k in range(1, spec.K + 1)])


def _check(spec: GeneratorSpec, d: Dataset, from_date: int):
    if d.class_count != spec.K or d.shape != (spec.rows, spec.cols):
        raise ValueError("dataset does not match the generator spec")
    if len(d.env_layers) != spec.env_layer_count:
        raise ValueError("dataset does not match the generator spec (env layers)")
    if not 0 <= from_date < d.dates:
        raise ValueError(f"from_date {from_date} outside 0..{d.dates - 1}")


def transition_probs(spec: GeneratorSpec, d: Dataset, from_date: int) -> np.ndarray:
    """Per-pixel law of ``cover[from_date + 1]`` given ``d``, noise included."""
    _check(spec, d, from_date)
    env = [layer.cells for layer in d.env_layers]
    return noisy_probs(spec, law_probs(spec, d.covers[from_date].cells, env))


def bayes_predict(spec: GeneratorSpec, d: Dataset, from_date: int) -> LandCoverGrid:
    """Argmax of the true law (ties to the smallest class id)."""
    _check(spec, d, from_date)
    env = [layer.cells for layer in d.env_layers]
    probs = law_probs(spec, d.covers[from_date].cells, env)
    return LandCoverGrid(np.argmax(probs, axis=-1) + 1, date_label=f"bayes{from_date + 1}")


def bayes_error(spec: GeneratorSpec, d: Dataset, from_date: int) -> float:
    if from_date + 1 >= d.dates:
        raise ValueError("no realized map after from_date")
    pred = bayes_predict(spec, d, from_date)
    return float(np.mean(pred.cells != d.covers[from_date + 1].cells))
