"""Binomial design matrices, basis reductions and column sketches.

Row ``i`` of the design holds the Binomial(n, p_i) pmf, i.e. the degree-n
Bernstein basis evaluated at ``p_i``, so ``A @ e`` evaluates the Bernstein
polynomial with coefficients ``e`` on the grid.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Chebyshev, Polynomial
from scipy.spatial.distance import cdist
from scipy.special import gammaln

from .errors import InvalidConfig, InvalidK, InvalidP0, OutOfRange, RankDeficientSketch

__all__ = [
    "PGrid",
    "make_pgrid",
    "corruption_level",
    "BinomialDesign",
    "binomial_design",
    "bernstein_eval",
    "BasisKind",
    "BasisSpec",
    "BasisMatrix",
    "basis_matrix",
    "basis_design",
    "basis_at",
    "SketchedDesign",
    "sketch_design",
    "sketch_error_bound",
    "save_matrix_csv",
]


@dataclass(frozen=True, eq=False)
class PGrid:
    p0: float
    levels: np.ndarray

    def __post_init__(self):
        lv = np.array(self.levels, dtype=float)
        if lv.size < 2:
            raise InvalidConfig("grid needs at least two levels")
        if lv[0] != self.p0 or lv[-1] != 1.0 or np.any(np.diff(lv) <= 0):
            raise InvalidConfig("grid must increase strictly from p0 to 1")
        lv.flags.writeable = False
        object.__setattr__(self, "levels", lv)

    @property
    def m(self) -> int:
        return self.levels.size


def make_pgrid(p0: float, m: int, spacing: str = "uniform") -> PGrid:
    """``m`` uniformly spaced corruption levels from ``p0`` to 1 inclusive."""
    if not 0.0 <= p0 < 1.0:
        raise InvalidP0(f"p0={p0} must lie in [0, 1)")
    if m < 2:
        raise InvalidConfig("m must be >= 2")
    if spacing != "uniform":
        raise InvalidConfig(f"unsupported spacing {spacing!r}")
    lv = np.linspace(p0, 1.0, m)
    lv[0], lv[-1] = p0, 1.0
    return PGrid(float(p0), lv)


def corruption_level(p_i: float, p0: float) -> float:
    """Mixing weight of the leak pool that lifts leakage from ``p0`` to ``p_i``."""
    if not p0 < 1.0:
        raise OutOfRange("p0 must be < 1")
    if not (p0 - 1e-12 <= p_i <= 1.0 + 1e-12):
        raise OutOfRange(f"p_i={p_i} outside [p0, 1]")
    return float(min(1.0, max(0.0, (p_i - p0) / (1.0 - p0))))


@dataclass(frozen=True, eq=False)
class BinomialDesign:
    matrix: np.ndarray
    n: int
    grid: PGrid


def _pmf_rows(n: int, p: np.ndarray) -> np.ndarray:
    j = np.arange(n + 1)
    out = np.zeros((p.size, n + 1))
    log_c = gammaln(n + 1) - gammaln(j + 1) - gammaln(n - j + 1)
    for r, pr in enumerate(p):
        if pr == 0.0:
            out[r, 0] = 1.0
        elif pr == 1.0:
            out[r, n] = 1.0
        else:
            lp = log_c + j * np.log(pr) + (n - j) * np.log1p(-pr)
            row = np.exp(lp - lp.max())
            out[r] = row / row.sum()
    return out


def binomial_design(n: int, grid: PGrid) -> BinomialDesign:
    """``A[i, j] = P(Binomial(n, p_i) = j)`` computed in log space, rows renormalized."""
    if n < 1:
        raise InvalidConfig("n must be >= 1")
    A = _pmf_rows(int(n), grid.levels)
    A.flags.writeable = False
    return BinomialDesign(A, int(n), grid)


def bernstein_eval(coeffs, p):
    """Evaluate the Bernstein polynomial with ``coeffs`` at ``p`` by De Casteljau.

    ``p`` may be a scalar or an array; the result has the shape of ``p``.
    """
    b = np.asarray(coeffs, dtype=float)
    p_arr = np.asarray(p, dtype=float)
    x = p_arr.reshape(-1, 1)
    b = np.broadcast_to(b, (x.shape[0], b.size)).copy()
    for r in range(b.shape[1] - 1, 0, -1):
        b[:, :r] = (1.0 - x) * b[:, :r] + x * b[:, 1 : r + 1]
    out = b[:, 0]
    return float(out[0]) if p_arr.ndim == 0 else out.reshape(p_arr.shape)


# -- basis reduction -----------------------------------------------------------

class BasisKind(str, enum.Enum):
    MONOMIAL = "monomial"
    CHEBYSHEV = "chebyshev"


@dataclass(frozen=True)
class BasisSpec:
    kind: BasisKind = BasisKind.CHEBYSHEV
    degree: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kind", BasisKind(self.kind))
        if self.degree < 1:
            raise InvalidConfig("basis degree must be >= 1")


@dataclass(frozen=True, eq=False)
class BasisMatrix:
    psi: np.ndarray
    spec: BasisSpec


def _power_coeffs(spec: BasisSpec) -> np.ndarray:
    """Column j holds the power-series coefficients of psi_j on [0, 1]."""
    s = spec.degree
    C = np.zeros((s + 1, s + 1))
    for j in range(s + 1):
        if spec.kind is BasisKind.MONOMIAL:
            C[j, j] = 1.0
        else:
            poly = Chebyshev.basis(j, domain=[0.0, 1.0]).convert(kind=Polynomial)
            C[: j + 1, j] = poly.coef
    return C


def basis_at(spec: BasisSpec, x) -> np.ndarray:
    """Evaluate psi_0..psi_s at points ``x`` in [0, 1]; shape ``(len(x), s + 1)``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if spec.kind is BasisKind.MONOMIAL:
        return np.vander(x, spec.degree + 1, increasing=True)
    return np.polynomial.chebyshev.chebvander(2.0 * x - 1.0, spec.degree)


def basis_matrix(spec: BasisSpec, n: int) -> BasisMatrix:
    psi = basis_at(spec, np.arange(n + 1) / n)
    psi.flags.writeable = False
    return BasisMatrix(psi, spec)


def _stirling2(s: int) -> np.ndarray:
    S = np.zeros((s + 1, s + 1))
    S[0, 0] = 1.0
    for j in range(1, s + 1):
        for k in range(1, j + 1):
            S[j, k] = k * S[j - 1, k] + S[j - 1, k - 1]
    return S


def basis_design(spec: BasisSpec, grid: PGrid, n: int) -> np.ndarray:
    """The product ``A @ Psi`` without forming the ``m x (n + 1)`` design.

    Entry ``(i, j)`` is ``E[psi_j(K / n)]`` for ``K ~ Binomial(n, p_i)``.  The
    raw moments ``E[(K/n)^r]`` follow from factorial moments through
    Stirling numbers of the second kind, so the cost is ``O(m s^2)`` and
    independent of ``n``.
    """
    s = spec.degree
    p = grid.levels
    S2 = _stirling2(s)
    # falling(n, k) / n^k
    ratio = np.cumprod(np.concatenate([[1.0], 1.0 - np.arange(s) / n]))
    ratio[np.arange(s + 1) > n] = 0.0
    M = np.zeros((p.size, s + 1))
    for r in range(s + 1):
        for k in range(r + 1):
            if S2[r, k]:
                M[:, r] += S2[r, k] * ratio[k] * p**k * float(n) ** (k - r)
    return M @ _power_coeffs(spec)


# -- column sketching -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SketchedDesign:
    S: np.ndarray
    partition: np.ndarray
    medoids: np.ndarray
    epsilon: float
    k: int

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.partition, minlength=self.k + 1)


def sketch_design(A: BinomialDesign, k: int) -> SketchedDesign:
    """Replace runs of adjacent columns by their medoid column.

    Column 0 is its own group.  Columns 1..n are cut into ``k`` contiguous
    runs whose sizes differ by at most one, larger runs first.  Medoid ties
    go to the lowest column index.
    """
    M = A.matrix
    n = M.shape[1] - 1
    if not 1 <= k <= n:
        raise InvalidK(f"k={k} must lie in [1, {n}]")
    base, extra = divmod(n, k)
    sizes = [base + 1] * extra + [base] * (k - extra)
    partition = np.zeros(n + 1, dtype=np.int64)
    medoids = np.zeros(k + 1, dtype=np.int64)
    start = 1
    for g, size in enumerate(sizes, start=1):
        cols = np.arange(start, start + size)
        partition[cols] = g
        block = M[:, cols].T
        total = cdist(block, block).sum(axis=1)
        medoids[g] = cols[int(np.argmin(total))]
        start += size
    S = M[:, medoids]
    epsilon = float(np.max(np.linalg.norm(M - S[:, partition], axis=0)))
    S.flags.writeable = False
    partition.flags.writeable = False
    return SketchedDesign(S, partition, medoids, epsilon, int(k))


def sketch_error_bound(sk: SketchedDesign, e0: float, n: int) -> float:
    """``epsilon * n * ||s'|| * e0`` with ``s'`` the first row of the left pseudoinverse of S."""
    if e0 < 0:
        raise InvalidConfig("e0 must be non-negative")
    S = sk.S
    if np.linalg.matrix_rank(S) < S.shape[1]:
        raise RankDeficientSketch("sketched design lacks full column rank")
    s_row = np.linalg.pinv(S)[0]
    return float(sk.epsilon * n * np.linalg.norm(s_row) * e0)


def save_matrix_csv(path, M) -> None:
    np.savetxt(path, np.atleast_2d(M), delimiter=",", fmt="%.17e")

