"""Linear learners with strictly convex, differentiable training objectives.

Weights are stored as ``[intercept, coef_1, ..., coef_d]``.  The training
objective of every kind is

    mean_i loss(y_i, b + x_i . w) + reg_strength * ||w||^2

with the intercept left unpenalized.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import (
    DimensionMismatch,
    EmptyEvaluationSet,
    InvalidConfig,
    SingularSystem,
)

__all__ = [
    "LearnerKind",
    "LossKind",
    "LearnerSpec",
    "FittedModel",
    "fit",
    "fit_ridge_batch",
    "predict",
    "decide",
    "pointwise_loss",
    "empirical_loss",
    "objective",
    "objective_grad",
    "fitting_loss",
]


class LearnerKind(str, enum.Enum):
    RIDGE = "ridge"
    LOGISTIC_L2 = "logistic_l2"
    SQUARED_HINGE_L2 = "squared_hinge_l2"


class LossKind(str, enum.Enum):
    SQUARED_ERROR = "squared_error"
    LOG_LOSS = "log_loss"
    SQUARED_HINGE = "squared_hinge"
    ZERO_ONE = "zero_one"


_FIT_LOSS = {
    LearnerKind.RIDGE: LossKind.SQUARED_ERROR,
    LearnerKind.LOGISTIC_L2: LossKind.LOG_LOSS,
    LearnerKind.SQUARED_HINGE_L2: LossKind.SQUARED_HINGE,
}


def fitting_loss(kind) -> LossKind:
    return _FIT_LOSS[LearnerKind(kind)]


@dataclass(frozen=True)
class LearnerSpec:
    kind: LearnerKind = LearnerKind.RIDGE
    reg_strength: float = 0.1
    max_iter: int = 100
    tol: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "kind", LearnerKind(self.kind))
        if self.reg_strength < 0:
            raise InvalidConfig("reg_strength must be >= 0")
        if not self.tol > 0:
            raise InvalidConfig("tol must be > 0")
        if self.max_iter < 1:
            raise InvalidConfig("max_iter must be >= 1")


@dataclass(frozen=True, eq=False)
class FittedModel:
    weights: np.ndarray
    spec: LearnerSpec
    converged: bool = True
    final_grad_norm: float = 0.0
    n_iter: int = 0

    @property
    def intercept(self) -> float:
        return float(self.weights[0])

    @property
    def coef(self) -> np.ndarray:
        return self.weights[1:]


def _augment(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return np.column_stack([np.ones(X.shape[0]), X])


def pointwise_loss(kind, scores, y) -> np.ndarray:
    kind = LossKind(kind)
    s = np.asarray(scores, dtype=float)
    y = np.asarray(y, dtype=float)
    if kind is LossKind.SQUARED_ERROR:
        return (s - y) ** 2
    if kind is LossKind.LOG_LOSS:
        return np.logaddexp(0.0, -y * s)
    if kind is LossKind.SQUARED_HINGE:
        return np.maximum(0.0, 1.0 - y * s) ** 2
    return (decide(s) != y).astype(float)


def _dloss(kind, s, y):
    """First and second derivative of the pointwise fitting loss in the score."""
    if kind is LossKind.SQUARED_ERROR:
        return 2.0 * (s - y), np.full_like(s, 2.0)
    if kind is LossKind.LOG_LOSS:
        q = expit(-y * s)
        return -y * q, q * (1.0 - q)
    m = np.maximum(0.0, 1.0 - y * s)
    return -2.0 * y * m, 2.0 * (m > 0)


def objective(spec: LearnerSpec, weights, X, y) -> float:
    """Regularized empirical risk minimized by :func:`fit`."""
    w = np.asarray(weights, dtype=float)
    s = _augment(X) @ w
    data = pointwise_loss(fitting_loss(spec.kind), s, y).mean()
    return float(data + spec.reg_strength * w[1:] @ w[1:])


def objective_grad(spec: LearnerSpec, weights, X, y) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    Xa = _augment(X)
    d1, _ = _dloss(fitting_loss(spec.kind), Xa @ w, np.asarray(y, dtype=float))
    g = Xa.T @ d1 / Xa.shape[0]
    g[1:] += 2.0 * spec.reg_strength * w[1:]
    return g


def _fit_ridge(spec, Xa, y):
    n, p = Xa.shape
    if spec.reg_strength > 0:
        G = Xa.T @ Xa / n
        idx = np.arange(1, p)
        G[idx, idx] += spec.reg_strength
        try:
            w = np.linalg.solve(G, Xa.T @ y / n)
        except np.linalg.LinAlgError:
            raise SingularSystem("ridge normal equations are singular") from None
    else:
        w, _, rank, _ = np.linalg.lstsq(Xa, y, rcond=None)
        if rank < min(n, p):
            raise SingularSystem(f"design rank {rank} < {min(n, p)} with reg_strength=0")
    g = objective_grad(spec, w, Xa[:, 1:], y)
    return FittedModel(w, spec, True, float(np.linalg.norm(g)), 1)


def _fit_newton(spec, Xa, y):
    loss = fitting_loss(spec.kind)
    n, p = Xa.shape
    J = np.ones(p)
    J[0] = 0.0
    lam = spec.reg_strength

    def f(w):
        return pointwise_loss(loss, Xa @ w, y).mean() + lam * w[1:] @ w[1:]

    w = np.zeros(p)
    fw = f(w)
    gnorm = np.inf
    it = 0
    for it in range(1, spec.max_iter + 1):
        d1, d2 = _dloss(loss, Xa @ w, y)
        g = Xa.T @ d1 / n + 2.0 * lam * J * w
        gnorm = float(np.linalg.norm(g))
        if gnorm <= spec.tol:
            return FittedModel(w, spec, True, gnorm, it - 1)
        H = (Xa.T * d2) @ Xa / n
        H[np.diag_indices(p)] += 2.0 * lam * J + 1e-12 * (1.0 + np.trace(H) / p)
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(H, g, rcond=None)[0]
        if not g @ step < 0:
            step = -g
        t = 1.0
        while True:
            w_new = w + t * step
            f_new = f(w_new)
            if f_new <= fw + 1e-4 * t * (g @ step) or t < 1e-12:
                break
            t *= 0.5
        if f_new > fw:
            break
        w, fw = w_new, f_new
    d1, _ = _dloss(loss, Xa @ w, y)
    g = Xa.T @ d1 / n + 2.0 * lam * J * w
    gnorm = float(np.linalg.norm(g))
    return FittedModel(w, spec, gnorm <= spec.tol, gnorm, it)


def fit(spec: LearnerSpec, features, labels) -> FittedModel:
    """Minimize the regularized empirical risk of ``spec`` from zero weights.

    Ridge is solved in closed form; the classifiers use damped Newton
    iterations.  Non-convergence is reported through ``converged`` rather
    than raised.
    """
    Xa = _augment(features)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if Xa.shape[0] == 0:
        raise EmptyEvaluationSet("cannot fit on zero samples")
    if y.shape[0] != Xa.shape[0]:
        raise DimensionMismatch("features and labels differ in length")
    if spec.kind is not LearnerKind.RIDGE and not np.all(np.abs(y) == 1):
        raise InvalidConfig("classification learners need labels in {-1, +1}")
    if spec.kind is LearnerKind.RIDGE:
        return _fit_ridge(spec, Xa, y)
    return _fit_newton(spec, Xa, y)


def fit_ridge_batch(spec: LearnerSpec, X, y) -> np.ndarray:
    """Closed-form ridge weights for a stack of training sets.

    ``X`` has shape ``(B, n, d)`` and ``y`` shape ``(B, n)``; returns
    ``(B, d + 1)``.  Requires ``reg_strength > 0``.
    """
    if spec.kind is not LearnerKind.RIDGE or spec.reg_strength <= 0:
        raise InvalidConfig("batched fitting needs a ridge learner with reg_strength > 0")
    X = np.asarray(X, dtype=float)
    B, n, d = X.shape
    Xa = np.concatenate([np.ones((B, n, 1)), X], axis=2)
    G = np.einsum("bni,bnj->bij", Xa, Xa) / n
    idx = np.arange(1, d + 1)
    G[:, idx, idx] += spec.reg_strength
    r = np.einsum("bni,bn->bi", Xa, y) / n
    try:
        return np.linalg.solve(G, r[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise SingularSystem("batched ridge normal equations are singular") from None


def predict(model: FittedModel, features) -> np.ndarray:
    """Affine scores ``b + X w``."""
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[1] != model.weights.size - 1:
        raise DimensionMismatch(
            f"model expects {model.weights.size - 1} features, got {X.shape[1]}"
        )
    return model.weights[0] + X @ model.weights[1:]


def decide(scores) -> np.ndarray:
    """Class decision; a zero score predicts +1."""
    return np.where(np.asarray(scores) >= 0, 1.0, -1.0)


def empirical_loss(model: FittedModel, features, labels, loss) -> float:
    y = np.asarray(labels, dtype=float).reshape(-1)
    if y.size == 0:
        raise EmptyEvaluationSet("no evaluation samples")
    return float(pointwise_loss(loss, predict(model, features), y).mean())
