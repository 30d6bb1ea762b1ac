"""One-hidden-layer perceptron with sigmoid hidden units and linear outputs.

``forward(x)_k = sum_i w2[k, i] * sigmoid(<x, w1[i]> + b1[i])``, fitted on the
squared error against one-hot targets with a full-batch first-order method
(nonlinear conjugate gradients, or plain gradient descent with a fixed
learning rate), early stopping on a held-out split and several restarts.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from ._textmodel import (ModelFormatError, context_lines, fmt_reals, one,
                         parse_context, parse_records, reals)
from .features import EnvEncoder, NeighborhoodSpec, SampleSet
from .polyreg import argmax_rule

MAGIC = "terracast-mlp"
OPTIMIZERS = ("cg", "gd")


class TrainError(RuntimeError):
    pass


@dataclass(eq=False)
class MlpWeights:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    spec: NeighborhoodSpec | None = None
    encoder: EnvEncoder | None = None

    def __post_init__(self):
        self.w1 = np.atleast_2d(np.asarray(self.w1, dtype=np.float64))
        self.b1 = np.asarray(self.b1, dtype=np.float64).reshape(-1)
        self.w2 = np.atleast_2d(np.asarray(self.w2, dtype=np.float64))
        if self.b1.size != self.w1.shape[0] or self.w2.shape[1] != self.w1.shape[0]:
            raise ValueError("inconsistent layer shapes")

    @property
    def q(self) -> int:
        return self.w1.shape[1]

    @property
    def q2(self) -> int:
        return self.w1.shape[0]

    @property
    def K(self) -> int:
        return self.w2.shape[0]

    def copy(self) -> "MlpWeights":
        return MlpWeights(self.w1.copy(), self.b1.copy(), self.w2.copy(),
                          spec=self.spec, encoder=self.encoder)

    def __eq__(self, other):
        if not isinstance(other, MlpWeights):
            return NotImplemented
        return (np.array_equal(self.w1, other.w1) and np.array_equal(self.b1, other.b1)
                and np.array_equal(self.w2, other.w2))


@dataclass(frozen=True)
class TrainConfig:
    q2: int = 8
    restarts: int = 5
    max_epochs: int = 2000
    patience: int = 20
    learning_rate: float = 0.05
    validation_fraction: float = 0.25
    seed: int = 0
    optimizer: str = "cg"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.q2 < 1 or self.restarts < 1:
            raise ValueError("q2 and restarts must be >= 1")
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")


@dataclass
class RestartReport:
    seed: int
    failed: bool
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    epochs_run: int = 0
    val_history: list[float] = field(default_factory=list)


@dataclass
class TrainReport:
    restarts: list[RestartReport]
    best_restart: int

    @property
    def best_val_loss(self) -> float:
        return self.restarts[self.best_restart].best_val_loss


def _hidden(w: MlpWeights, X: np.ndarray) -> np.ndarray:
    return expit(X @ w.w1.T + w.b1)


def forward(w: MlpWeights, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.q:
        raise ValueError(f"input width {x.shape[-1]} does not match model width {w.q}")
    return _hidden(w, x) @ w.w2.T


def predict(w: MlpWeights, x):
    cls = argmax_rule(forward(w, x))
    return int(cls) if np.ndim(cls) == 0 else cls


def _unpack(samples, K=None):
    if isinstance(samples, SampleSet):
        return samples.X, samples.onehot_targets()
    X, y = samples
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if y.ndim == 1:
        if K is None:
            raise ValueError("K is required with integer targets")
        Y = np.zeros((y.size, K))
        Y[np.arange(y.size), y - 1] = 1.0
        return X, Y
    return X, y.astype(np.float64)


def _loss(w, X, Y) -> float:
    r = Y - _hidden(w, X) @ w.w2.T
    return float(np.sum(r * r))


def _grad(w, X, Y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    A = _hidden(w, X)
    R = A @ w.w2.T - Y
    g2 = 2.0 * R.T @ A
    dZ = (2.0 * R @ w.w2) * A * (1.0 - A)
    return dZ.T @ X, dZ.sum(axis=0), g2


def loss(w: MlpWeights, samples) -> float:
    """Sum over samples and classes of squared (one-hot target - output)."""
    X, Y = _unpack(samples, w.K)
    return _loss(w, X, Y)


def grad(w: MlpWeights, samples) -> MlpWeights:
    """Exact gradient of :func:`loss`, returned in weight shape."""
    X, Y = _unpack(samples, w.K)
    g1, gb, g2 = _grad(w, X, Y)
    return MlpWeights(g1, gb, g2)


def init_weights(q: int, q2: int, K: int, rng: np.random.Generator) -> MlpWeights:
    """Uniform in [-0.5, 0.5] scaled by 1/sqrt(fan-in) per layer."""
    w1 = rng.uniform(-0.5, 0.5, size=(q2, q)) / np.sqrt(q)
    b1 = rng.uniform(-0.5, 0.5, size=q2) / np.sqrt(q)
    w2 = rng.uniform(-0.5, 0.5, size=(K, q2)) / np.sqrt(q2)
    return MlpWeights(w1, b1, w2)


class _EarlyStop:
    """Tracks the best validation snapshot; raises StopIteration when patience runs out."""

    def __init__(self, w0, X_val, Y_val, patience, report):
        self.X_val, self.Y_val, self.patience, self.report = X_val, Y_val, patience, report
        self.best = w0.copy()
        val = _loss(w0, X_val, Y_val)
        report.best_epoch, report.best_val_loss = 0, val
        report.val_history.append(val)
        self.since = 0

    def __call__(self, w, epoch):
        val = _loss(w, self.X_val, self.Y_val)
        rep = self.report
        rep.epochs_run = epoch
        rep.val_history.append(val)
        if not np.isfinite(val):
            rep.failed = True
            raise StopIteration
        if val < rep.best_val_loss:
            self.best, self.since = w.copy(), 0
            rep.best_epoch, rep.best_val_loss = epoch, val
        else:
            self.since += 1
            if self.since >= self.patience:
                raise StopIteration


def _pack(w: MlpWeights) -> np.ndarray:
    return np.concatenate([w.w1.ravel(), w.b1, w.w2.ravel()])


def _unpack_vector(v: np.ndarray, q: int, q2: int, K: int) -> MlpWeights:
    a, b = q2 * q, q2 * q + q2
    return MlpWeights(v[:a].reshape(q2, q), v[a:b], v[b:].reshape(K, q2))


def descend(w0: MlpWeights, X_train, Y_train, X_val, Y_val, *, max_epochs: int, patience: int,
            learning_rate: float = 0.05, optimizer: str = "cg",
            seed: int = 0) -> tuple[MlpWeights | None, RestartReport]:
    """Minimize the mean squared error on the training rows with early stopping.

    An epoch is one gradient-descent step or one conjugate-gradient iteration;
    epoch 0 is the initial point. Returns the snapshot with the lowest
    validation loss, or ``None`` with ``failed=True`` if the loss blew up.
    """
    report = RestartReport(seed=seed, failed=False)
    stopper = _EarlyStop(w0, X_val, Y_val, patience, report)
    n = X_train.shape[0]
    with np.errstate(over="ignore", invalid="ignore"):
        if optimizer == "gd":
            w = w0.copy()
            step = learning_rate / n
            try:
                for epoch in range(1, max_epochs + 1):
                    g1, gb, g2 = _grad(w, X_train, Y_train)
                    w.w1 -= step * g1
                    w.b1 -= step * gb
                    w.w2 -= step * g2
                    stopper(w, epoch)
            except StopIteration:
                pass
        else:
            q, q2, K = w0.q, w0.q2, w0.K

            def objective(v):
                w = _unpack_vector(v, q, q2, K)
                g1, gb, g2 = _grad(w, X_train, Y_train)
                return _loss(w, X_train, Y_train) / n, np.concatenate(
                    [g1.ravel(), gb, g2.ravel()]) / n

            def callback(intermediate_result):
                stopper(_unpack_vector(intermediate_result.x, q, q2, K), report.epochs_run + 1)

            minimize(objective, _pack(w0), jac=True, method="CG", callback=callback,
                     options={"maxiter": max_epochs, "gtol": 1e-12})
    if report.failed:
        return None, report
    best = stopper.best
    best.spec, best.encoder = w0.spec, w0.encoder
    return best, report


def split_indices(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random (train, validation) index split, each kept in ascending order."""
    n_val = min(n - 1, max(1, int(round(fraction * n))))
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_restart(samples, cfg: TrainConfig, restart: int, K: int | None = None):
    """One restart with seed ``cfg.seed + restart``."""
    X, Y = _unpack(samples, K)
    seed = cfg.seed + restart
    rng = np.random.default_rng(seed)
    tr, va = split_indices(X.shape[0], cfg.validation_fraction, rng)
    w0 = init_weights(X.shape[1], cfg.q2, Y.shape[1], rng)
    if isinstance(samples, SampleSet):
        w0.spec, w0.encoder = samples.spec, samples.encoder
    return descend(w0, X[tr], Y[tr], X[va], Y[va], max_epochs=cfg.max_epochs,
                   patience=cfg.patience, learning_rate=cfg.learning_rate,
                   optimizer=cfg.optimizer, seed=seed)


def _restart_job(args):
    return train_restart(*args)


def train_all(samples, cfg: TrainConfig, K: int | None = None, jobs: int = 1):
    """Every restart's outcome, in restart order (``jobs`` worker processes)."""
    X, _ = _unpack(samples, K)
    if X.shape[0] < 10:
        raise TrainError("need at least 10 samples")
    args = [(samples, cfg, r, K) for r in range(cfg.restarts)]
    if jobs <= 1 or cfg.restarts == 1:
        return [_restart_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_restart_job, args))


def train(samples, cfg: TrainConfig, K: int | None = None,
          jobs: int = 1) -> tuple[MlpWeights, TrainReport]:
    """Train ``cfg.restarts`` networks and keep the lowest validation loss."""
    outcomes = train_all(samples, cfg, K, jobs)
    reports = [rep for _, rep in outcomes]
    ok = [r for r, (w, _) in enumerate(outcomes) if w is not None]
    if not ok:
        raise TrainError("all restarts diverged (learning rate too high?)")
    best = min(ok, key=lambda r: (reports[r].best_val_loss, r))
    return outcomes[best][0], TrainReport(reports, best)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save(w: MlpWeights, path: str | os.PathLike) -> None:
    lines = [f"{MAGIC} 1", f"q {w.q}", f"q2 {w.q2}", f"K {w.K}"]
    lines += context_lines(w.spec, w.encoder)
    lines += ["w1 " + fmt_reals(row) for row in w.w1]
    lines.append("b1 " + fmt_reals(w.b1))
    lines += ["w2 " + fmt_reals(row) for row in w.w2]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load(path: str | os.PathLike) -> MlpWeights:
    with open(path) as fh:
        records = parse_records(fh.read(), MAGIC)
    q = int(one(records, "q", 1)[0])
    q2 = int(one(records, "q2", 1)[0])
    K = int(one(records, "K", 1)[0])
    w1 = [reals(r) for r in records.get("w1", [])]
    w2 = [reals(r) for r in records.get("w2", [])]
    if len(w1) != q2 or any(r.size != q for r in w1) or len(w2) != K or any(r.size != q2 for r in w2):
        raise ModelFormatError("weight rows do not match the declared dimensions")
    spec, encoder = parse_context(records)
    return MlpWeights(np.array(w1), reals(one(records, "b1", q2)), np.array(w2),
                      spec=spec, encoder=encoder)
