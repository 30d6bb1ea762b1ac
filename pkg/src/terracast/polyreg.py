"""Penalized polychotomous (multinomial logistic) regression.

For predictor vector ``x = [onehot (K), counts (K), env]`` the linear score of
class ``k < K`` is::

    theta_k = alpha_k + sum_l beta_kl * counts_l + sum_r gamma_kr * other_r

where ``other`` is the one-hot previous class followed by the environmental
columns (so ``p = K + q_env``), and ``theta_K = 0``. The fit maximizes::

    sum_n log P(c_n | x_n) - eps * sum_n sum_k (theta_nk - mean_k' theta_nk')^2

by safeguarded Newton-Raphson starting from all-zero coefficients.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._textmodel import (ModelFormatError, context_lines, fmt_reals, one,
                         parse_context, parse_records, reals)
from .features import EnvEncoder, NeighborhoodSpec, SampleSet

MAGIC = "terracast-polyreg"


class FitError(RuntimeError):
    pass


def param_count(K: int, p: int) -> int:
    """Number of free parameters, ``K^2 + (K-1) p - 1``."""
    if K < 2 or p < 0:
        raise ValueError("need K >= 2 and p >= 0")
    return K * K + (K - 1) * p - 1


@dataclass(eq=False)
class PolyregParams:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    spec: NeighborhoodSpec | None = None
    encoder: EnvEncoder | None = None

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        km1 = self.alpha.size
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(km1, km1 + 1)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if self.gamma.ndim != 2:
            self.gamma = self.gamma.reshape(km1, -1)
        if self.gamma.shape[0] != km1:
            raise ValueError("gamma must have K-1 rows")

    @property
    def K(self) -> int:
        return self.alpha.size + 1

    @property
    def p(self) -> int:
        return self.gamma.shape[1]

    @property
    def q(self) -> int:
        return self.K + self.p

    @classmethod
    def zeros(cls, K: int, p: int, **context) -> "PolyregParams":
        return cls(np.zeros(K - 1), np.zeros((K - 1, K)), np.zeros((K - 1, p)), **context)

    # canonical flattening: alpha, then beta row-major, then gamma row-major
    def flatten(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta.ravel(), self.gamma.ravel()])

    @classmethod
    def from_flat(cls, delta, K: int, p: int, **context) -> "PolyregParams":
        delta = np.asarray(delta, dtype=np.float64)
        if delta.size != param_count(K, p):
            raise ValueError(f"expected {param_count(K, p)} parameters, got {delta.size}")
        a = K - 1
        b = a + (K - 1) * K
        return cls(delta[:a], delta[a:b].reshape(K - 1, K), delta[b:].reshape(K - 1, p), **context)

    def coef_matrix(self) -> np.ndarray:
        """Rows ``[alpha_k, beta_k., gamma_k.]`` against design columns ``[1, counts, other]``."""
        return np.hstack([self.alpha[:, None], self.beta, self.gamma])

    def __eq__(self, other):
        if not isinstance(other, PolyregParams):
            return NotImplemented
        return np.array_equal(self.flatten(), other.flatten()) and self.K == other.K


@dataclass
class FitReport:
    converged: bool
    iterations: int
    final_objective: float
    gradient_norm: float
    step_halvings: int
    objective_trace: list[float] = field(default_factory=list)
    message: str = ""


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def design(X: np.ndarray, K: int) -> np.ndarray:
    """Columns ``[1, counts (K), onehot (K), env]`` from feature rows."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] < 2 * K:
        raise ValueError(f"feature width {X.shape[1]} < 2K = {2 * K}")
    return np.hstack([np.ones((X.shape[0], 1)), X[:, K:2 * K], X[:, :K], X[:, 2 * K:]])


def _theta_from_design(W: np.ndarray, Z: np.ndarray) -> np.ndarray:
    return np.hstack([Z @ W.T, np.zeros((Z.shape[0], 1))])


def theta(params: PolyregParams, x) -> np.ndarray:
    """Linear scores; one row per feature row, reference class last and zero."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.q:
        raise ValueError(f"feature width {x.shape[-1]} does not match model width {params.q}")
    out = _theta_from_design(params.coef_matrix(), design(x, params.K))
    return out[0] if x.ndim == 1 else out


def softmax(th: np.ndarray) -> np.ndarray:
    z = th - th.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def class_probs(params: PolyregParams, x) -> np.ndarray:
    return softmax(theta(params, x))


def argmax_rule(scores) -> np.ndarray:
    """Index (1-based class id) of the largest score; ties go to the smallest id."""
    return np.argmax(np.asarray(scores), axis=-1) + 1


def predict(params: PolyregParams, x):
    cls = argmax_rule(theta(params, x))
    return int(cls) if np.ndim(cls) == 0 else cls


def _unpack(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, SampleSet):
        return samples.X, samples.target
    X, y = samples
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)


def _objective_terms(W, Z, y, eps):
    """Per-sample contributions to the penalized log-likelihood."""
    th = _theta_from_design(W, Z)
    u = th - th.mean(axis=1, keepdims=True)
    return th[np.arange(len(y)), y - 1] - logsumexp(th, axis=1) - eps * np.sum(u * u, axis=1)


def _objective(W, Z, y, eps):
    return math.fsum(_objective_terms(W, Z, y, eps))


def _residual(W, Z, y, eps):
    th = _theta_from_design(W, Z)
    pi = softmax(th)
    u = th - th.mean(axis=1, keepdims=True)
    r = -pi - 2.0 * eps * u
    r[np.arange(len(y)), y - 1] += 1.0
    return r[:, :-1], pi[:, :-1]


def _flat_order(K: int, D: int) -> np.ndarray:
    """Positions in ``W.ravel()`` of the canonical parameter order."""
    idx = np.arange((K - 1) * D).reshape(K - 1, D)
    return np.concatenate([idx[:, 0], idx[:, 1:1 + K].ravel(), idx[:, 1 + K:].ravel()])


def _grad_W(W, Z, y, eps):
    r, _ = _residual(W, Z, y, eps)
    return r.T @ Z


def _hess_W(W, Z, y, eps):
    K = W.shape[0] + 1
    D = Z.shape[1]
    _, pi = _residual(W, Z, y, eps)
    V = (pi[:, :, None] * Z[:, None, :]).reshape(Z.shape[0], -1)
    H = V.T @ V
    for k in range(K - 1):
        blk = slice(k * D, (k + 1) * D)
        H[blk, blk] -= Z.T @ (pi[:, k:k + 1] * Z)
    centering = np.eye(K - 1) - 1.0 / K
    H -= 2.0 * eps * np.kron(centering, Z.T @ Z)
    return H


def _prepare(params, samples):
    X, y = _unpack(samples)
    Z = design(X, params.K)
    if Z.shape[1] != 1 + params.K + params.p:
        raise ValueError("sample width does not match the parameter dimensions")
    return Z, y


def penalized_loglik(params: PolyregParams, samples, eps: float) -> float:
    Z, y = _prepare(params, samples)
    return float(_objective(params.coef_matrix(), Z, y, eps))


def penalized_grad(params: PolyregParams, samples, eps: float) -> np.ndarray:
    """Gradient w.r.t. the canonical flat parameter vector."""
    Z, y = _prepare(params, samples)
    G = _grad_W(params.coef_matrix(), Z, y, eps)
    return G.ravel()[_flat_order(params.K, Z.shape[1])]


def penalized_hessian(params: PolyregParams, samples, eps: float) -> np.ndarray:
    Z, y = _prepare(params, samples)
    H = _hess_W(params.coef_matrix(), Z, y, eps)
    order = _flat_order(params.K, Z.shape[1])
    H = H[np.ix_(order, order)]
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _ascent_step(H: np.ndarray, g: np.ndarray, max_ramps: int = 40) -> tuple[np.ndarray, float]:
    """Solve ``(H - lam D) step = -g`` with ``D = diag(-H)``; lam > 0 only if needed."""
    A = -H
    d = np.sqrt(np.clip(np.diag(A), 0.0, None))
    d[d == 0] = 1.0
    A = A / d[:, None] / d[None, :]
    b = g / d
    lam = 0.0
    for _ in range(max_ramps):
        try:
            L = np.linalg.cholesky(A + lam * np.eye(A.shape[0]))
        except np.linalg.LinAlgError:
            L = None
        if L is not None and np.min(np.diag(L)) ** 2 > 1e-10:
            x = np.linalg.solve(L.T, np.linalg.solve(L, b))
            return x / d, lam
        lam = 1e-10 if lam == 0.0 else lam * 10.0
    raise FitError("Newton system stayed singular after damping")


def fit(samples, eps: float, tol: float = 1e-8, max_iter: int = 100, seed: int = 0,
        K: int | None = None) -> tuple[PolyregParams, FitReport]:
    """Maximize the penalized log-likelihood from the all-zero model.

    ``seed`` is accepted for interface symmetry; the procedure is deterministic.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if isinstance(samples, SampleSet):
        K = samples.class_count
        context = dict(spec=samples.spec, encoder=samples.encoder)
    else:
        if K is None:
            raise ValueError("K is required when fitting raw arrays")
        context = {}
    X, y = _unpack(samples)
    if len(y) == 0:
        raise FitError("no samples")
    Z = design(X, K)
    D = Z.shape[1]
    W = np.zeros((K - 1, D))
    terms = _objective_terms(W, Z, y, eps)
    obj = math.fsum(terms)
    trace = [obj]
    halvings = 0
    converged = False
    it = 0
    stalled = 0
    message = "max_iter reached"
    g = _grad_W(W, Z, y, eps).ravel()
    while True:
        gnorm = float(np.max(np.abs(g)))
        if not np.isfinite(obj) or not np.isfinite(gnorm):
            raise FitError("non-finite objective")
        if gnorm <= tol:
            converged, message = True, "gradient tolerance reached"
            break
        if it >= max_iter:
            break
        step, _ = _ascent_step(_hess_W(W, Z, y, eps), g)
        # rounding bound of a per-sample difference sum at this magnitude
        noise = 8.0 * np.finfo(np.float64).eps * math.fsum(np.abs(terms))
        t = 1.0
        for _ in range(60):
            W_new = W + t * step.reshape(W.shape)
            terms_new = _objective_terms(W_new, Z, y, eps)
            gain = math.fsum(terms_new - terms)
            g_new = _grad_W(W_new, Z, y, eps).ravel()
            if np.isfinite(gain) and gain >= 0.0:
                break
            # a change the objective cannot resolve counts as ascent when the
            # gradient shrinks; it is recorded as no change
            if abs(gain) <= noise and np.max(np.abs(g_new)) < gnorm:
                gain = 0.0
                break
            t *= 0.5
            halvings += 1
        else:
            message = "no ascent step at machine precision"
            break
        it += 1
        stalled = stalled + 1 if gain <= noise else 0
        W, terms, obj, g = W_new, terms_new, obj + gain, g_new
        trace.append(obj)
        if stalled >= 3:
            gnorm = float(np.max(np.abs(g)))
            converged = gnorm <= tol
            message = "objective stalled at machine precision"
            break

    delta = W.ravel()[_flat_order(K, D)]
    params = PolyregParams.from_flat(delta, K, D - 1 - K, **context)
    return params, FitReport(converged, it, float(obj), gnorm, halvings, trace, message)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save(params: PolyregParams, path: str | os.PathLike) -> None:
    lines = [f"{MAGIC} 1", f"K {params.K}", f"p {params.p}", f"q {params.q}"]
    lines += context_lines(params.spec, params.encoder)
    lines.append("alpha " + fmt_reals(params.alpha))
    lines += ["beta " + fmt_reals(row) for row in params.beta]
    lines += ["gamma " + fmt_reals(row) for row in params.gamma]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load(path: str | os.PathLike) -> PolyregParams:
    with open(path) as fh:
        records = parse_records(fh.read(), MAGIC)
    K = int(one(records, "K", 1)[0])
    p = int(one(records, "p", 1)[0])
    beta = records.get("beta", [])
    gamma = records.get("gamma", [])
    if len(beta) != K - 1 or len(gamma) != K - 1:
        raise ModelFormatError("expected K-1 beta and gamma rows")
    spec, encoder = parse_context(records)
    return PolyregParams(reals(one(records, "alpha", K - 1)),
                         np.array([reals(r) for r in beta]).reshape(K - 1, K),
                         np.array([reals(r) for r in gamma]).reshape(K - 1, p),
                         spec=spec, encoder=encoder)
