"""Least squares and the monotone trend-filtered quadratic program.

``constrained_solve`` minimizes

    ||A e - b||^2 + lam * ||D e||^2

over nonincreasing and/or nonnegative ``e`` with ``D`` a finite-difference
operator.  It runs scaled-form ADMM (exact quadratic x-step, projection
z-step) and periodically polishes with a warm-started active-set NNLS in the
differences ``e_j - e_{j+1}``, accepting a candidate once it is feasible and
satisfies the KKT conditions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.optimize import isotonic_regression

from .errors import InvalidConfig, TooShort

__all__ = [
    "TrendFilterConfig",
    "SolveResult",
    "least_squares",
    "difference_operator",
    "project_feasible",
    "kkt_residual",
    "penalized_objective",
    "constrained_solve",
]


@dataclass(frozen=True)
class TrendFilterConfig:
    order: int = 4
    lam: float = 0.1
    monotone: bool = True
    nonneg: bool = True
    max_iter: int = 5000
    tol: float = 1e-8

    def __post_init__(self):
        if self.order < 1:
            raise InvalidConfig("difference order must be >= 1")
        if self.lam < 0:
            raise InvalidConfig("lam must be >= 0")
        if not self.tol > 0:
            raise InvalidConfig("tol must be > 0")


@dataclass(frozen=True, eq=False)
class SolveResult:
    solution: np.ndarray
    residual_norm: float
    converged: bool
    iterations: int
    condition: float = float("nan")
    rank_deficient: bool = False
    kkt: float = float("nan")
    history: Optional[np.ndarray] = field(default=None, repr=False)


def _check(A, b):
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    if A.ndim != 2 or A.shape[0] != b.shape[0]:
        raise InvalidConfig(f"incompatible system shapes {A.shape} and {b.shape}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise InvalidConfig("system contains non-finite entries")
    return A, b


def _lstsq(M, rhs, refine: int = 2):
    """Truncated-SVD least squares with residuals recomputed in extended precision.

    The refinement steps recover most of the accuracy lost in the first solve
    of an ill-conditioned system; they leave the minimum-norm character of the
    solution intact because every correction lies in the row space.
    """
    U, sv, Vt = np.linalg.svd(M, full_matrices=False)
    cut = sv[0] * max(M.shape) * np.finfo(float).eps if sv.size else 0.0
    rank = int(np.sum(sv > cut))
    inv = np.zeros_like(sv)
    inv[:rank] = 1.0 / sv[:rank]

    def apply(r):
        return Vt.T @ (inv * (U.T @ r))

    x = apply(rhs)
    if refine and rank:
        Ml = M.astype(np.longdouble)
        rl = np.asarray(rhs, dtype=np.longdouble)
        for _ in range(refine):
            x = x + apply((rl - Ml @ x.astype(np.longdouble)).astype(float))
    cond = float(sv[0] / sv[-1]) if sv.size and sv[-1] > 0 else float("inf")
    return x, rank, cond


def least_squares(A, b) -> SolveResult:
    """Minimize ``||A e - b||`` by an SVD-based orthogonal factorization.

    A rank-deficient ``A`` yields the minimum-norm minimizer with
    ``rank_deficient`` set.
    """
    A, b = _check(A, b)
    x, rank, cond = _lstsq(A, b)
    return SolveResult(
        x, float(np.linalg.norm(A @ x - b)), True, 1, cond, rank < A.shape[1]
    )


def difference_operator(order: int, length: int) -> np.ndarray:
    """``(length - order) x length`` matrix of ``order``-th forward differences."""
    if order < 0:
        raise InvalidConfig("order must be >= 0")
    if length <= order:
        raise TooShort(f"need length > order, got length={length}, order={order}")
    return np.diff(np.eye(length), n=order, axis=0)


def project_feasible(x, monotone: bool, nonneg: bool) -> np.ndarray:
    """Euclidean projection onto {nonincreasing} and/or {>= 0}.

    For the intersection, clipping the isotonic fit at zero is the exact
    projection.
    """
    x = np.asarray(x, dtype=float)
    if monotone:
        x = isotonic_regression(x, increasing=False).x
    if nonneg:
        x = np.maximum(x, 0.0)
    return x


def penalized_objective(A, b, D, lam, e) -> float:
    r = A @ e - b
    out = float(r @ r)
    if lam and D is not None:
        de = D @ e
        out += lam * float(de @ de)
    return out


def _gradient(A, b, D, lam, e):
    g = 2.0 * A.T @ (A @ e - b)
    if lam and D is not None:
        g += 2.0 * lam * D.T @ (D @ e)
    return g


def kkt_residual(A, b, D, lam, e, monotone: bool, nonneg: bool) -> float:
    """Scaled natural residual of the KKT system at ``e``.

    With ``delta_j = e_j - e_{j+1}`` (and ``delta_last = e_last``) the
    monotone problem is a bound-constrained problem in ``delta`` whose
    gradient is the cumulative sum of the gradient in ``e``.  The residual is
    ``max_j |min(delta_j, h_j)|`` on constrained coordinates and ``|h_j|`` on
    free ones, with both terms scaled to be dimensionless.
    """
    e = np.asarray(e, dtype=float)
    g = _gradient(A, b, D, lam, e)
    gscale = max(1.0, float(np.max(np.abs(2.0 * A.T @ b))))
    escale = 1.0 + float(np.max(np.abs(e)))
    if monotone:
        delta = np.append(-np.diff(e), e[-1]) / escale
        h = np.cumsum(g) / gscale
        constrained = np.ones(e.size, dtype=bool)
        constrained[-1] = nonneg
    elif nonneg:
        delta, h = e / escale, g / gscale
        constrained = np.ones(e.size, dtype=bool)
    else:
        return float(np.max(np.abs(g)) / gscale)
    r = np.where(constrained, np.minimum(delta, h), h)
    return float(np.max(np.abs(r)))


def _polish(A, b, D, lam, z, cfg, tau, max_steps=None):
    """Warm-started Lawson-Hanson active-set refinement of the iterate ``z``.

    The problem is rewritten in ``delta`` (successive decrements, see
    :func:`kkt_residual`), where it is least squares with sign constraints.
    Coordinates of ``z`` whose ``delta`` exceeds ``tau`` start passive; the
    usual step-back keeps every iterate feasible.  Returns ``(None, nan)``
    if the step budget runs out.
    """
    q = z.size
    if cfg.monotone:
        AT = np.cumsum(A, axis=1)
        DT = np.cumsum(D, axis=1) if D is not None else None
        delta0 = np.append(-np.diff(z), z[-1])
        constrained = np.ones(q, dtype=bool)
        constrained[-1] = cfg.nonneg
    else:
        AT, DT, delta0 = A, D, z
        constrained = np.ones(q, dtype=bool)
    if DT is not None and lam:
        M = np.vstack([AT, np.sqrt(lam) * DT])
        rhs = np.concatenate([b, np.zeros(DT.shape[0])])
    else:
        M, rhs = AT, b
    gscale = max(1.0, float(np.max(np.abs(2.0 * A.T @ b))))
    passive = ~constrained | (delta0 > tau)
    x = np.where(passive, delta0, 0.0)
    x[constrained] = np.maximum(x[constrained], 0.0)
    if max_steps is None:
        max_steps = 3 * q + 10
    cond = float("nan")

    def solve(mask):
        out = np.zeros(q)
        if mask.any():
            out[mask] = scipy.linalg.lstsq(M[:, mask], rhs, lapack_driver="gelsy")[0]
        return out

    steps = 0
    while steps < max_steps:
        s = solve(passive)
        steps += 1
        while True:
            bad = constrained & passive & (s <= 0)
            if not bad.any():
                break
            ratio = x[bad] / (x[bad] - s[bad])
            alpha = float(np.min(ratio))
            x = x + alpha * (s - x)
            drop = constrained & passive & (x <= 1e-15 * (1.0 + np.abs(x).max()))
            drop[np.flatnonzero(bad)[int(np.argmin(ratio))]] = True
            passive &= ~drop
            x[~passive] = 0.0
            s = solve(passive)
            steps += 1
            if steps >= max_steps:
                return None, cond
        x = s
        w = -2.0 * M.T @ (M @ x - rhs) / gscale
        cand = constrained & ~passive & (w > cfg.tol)
        if not cand.any():
            e = np.cumsum(x[::-1])[::-1] if cfg.monotone else x
            if passive.any():
                sv = np.linalg.svd(M[:, passive], compute_uv=False)
                cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
            return e, cond
        passive[int(np.argmax(np.where(cand, w, -np.inf)))] = True
    return None, cond


def _feasible(e, cfg, scale):
    tiny = 1e-12 * scale
    if cfg.monotone and np.any(np.diff(e) > tiny):
        return False
    if cfg.nonneg and np.any(e < -tiny):
        return False
    return True


def constrained_solve(A, b, cfg: TrendFilterConfig, debug: bool = False,
                      rho: Optional[float] = None) -> SolveResult:
    """Trend-filtered least squares under monotone / nonnegativity constraints.

    Without constraints the penalized problem is solved directly.  The
    returned solution is always feasible: the last step projects onto the
    constraint set.  With ``debug`` the objective of the best feasible
    iterate is recorded per iteration and checked to be nonincreasing.
    """
    A, b = _check(A, b)
    q = A.shape[1]
    D = difference_operator(cfg.order, q) if cfg.lam > 0 else None
    lam = cfg.lam if D is not None else 0.0

    if not (cfg.monotone or cfg.nonneg):
        if D is not None:
            M = np.vstack([A, np.sqrt(lam) * D])
            rhs = np.concatenate([b, np.zeros(D.shape[0])])
        else:
            M, rhs = A, b
        x, rank, cond = _lstsq(M, rhs)
        kkt = kkt_residual(A, b, D, lam, x, False, False)
        return SolveResult(x, float(np.linalg.norm(A @ x - b)), True, 0, cond,
                           rank < q, kkt)

    H = 2.0 * A.T @ A
    if D is not None:
        H += 2.0 * lam * D.T @ D
    c = 2.0 * A.T @ b
    if rho is None:
        rho = max(float(np.trace(H)) / q, 1e-10)
    factor = scipy.linalg.cho_factor(H + rho * np.eye(q))

    def proj(v):
        return project_feasible(v, cfg.monotone, cfg.nonneg)

    z = proj(np.zeros(q))
    u = np.zeros(q)
    best = z.copy()
    best_obj = penalized_objective(A, b, D, lam, z)
    history = [best_obj] if debug else None
    sqrt_q = np.sqrt(q)
    converged = False
    polished = None
    cond = float("nan")
    next_polish = 40
    it = 0
    for it in range(1, cfg.max_iter + 1):
        x = scipy.linalg.cho_solve(factor, c + rho * (z - u))
        z_old = z
        z = proj(x + u)
        u += x - z

        obj = penalized_objective(A, b, D, lam, z)
        if obj < best_obj:
            best, best_obj = z.copy(), obj
        if debug:
            history.append(best_obj)
            assert history[-1] <= history[-2], "best feasible objective increased"

        if it % 10 == 0 or it == cfg.max_iter:
            r = np.linalg.norm(x - z)
            s = rho * np.linalg.norm(z - z_old)
            eps_pri = cfg.tol * (sqrt_q + max(np.linalg.norm(x), np.linalg.norm(z)))
            eps_dual = cfg.tol * (sqrt_q + rho * np.linalg.norm(u))
            small = r <= eps_pri and s <= eps_dual
            if it >= next_polish or small or it == cfg.max_iter:
                next_polish = 2 * it
                scale = 1.0 + float(np.max(np.abs(z)))
                cand, ccond = _polish(A, b, D, lam, z, cfg, 1e-6 * scale)
                if (
                    cand is not None
                    and _feasible(cand, cfg, scale)
                    and kkt_residual(A, b, D, lam, cand, cfg.monotone, cfg.nonneg) <= cfg.tol
                ):
                    polished, cond = cand, ccond
                    converged = True
                    break
            if small and kkt_residual(A, b, D, lam, z, cfg.monotone, cfg.nonneg) <= cfg.tol:
                converged = True
                break
            # residual balancing
            if r > 10.0 * s or s > 10.0 * r:
                f = 2.0 if r > s else 0.5
                rho *= f
                u /= f
                factor = scipy.linalg.cho_factor(H + rho * np.eye(q))

    sol = proj(polished if polished is not None else best)
    if debug and polished is not None:
        history.append(min(best_obj, penalized_objective(A, b, D, lam, sol)))
    kkt = kkt_residual(A, b, D, lam, sol, cfg.monotone, cfg.nonneg)
    return SolveResult(
        sol,
        float(np.linalg.norm(A @ sol - b)),
        converged,
        it,
        cond,
        False,
        kkt,
        np.asarray(history) if debug else None,
    )
