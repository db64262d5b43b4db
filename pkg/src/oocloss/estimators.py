"""Estimators of the out-of-cluster loss and the leakage hypothesis test.

Three estimators are provided: a naive IID k-fold estimate that ignores
clusters, leave-one-cluster-out on an oracle or approximate clustering, and
the binomial block bootstrap (``b3_collect`` + ``b3_estimate``), which
raises the leakage level on purpose by mixing held-out samples into
bootstrap training sets and then inverts the binomial design.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import learners as L
from .data_core import (
    ClusteredDataset,
    CorruptedSplit,
    Direction,
    LeakageConfig,
    PartitionModelConfig,
    draw_partition_samples,
    inject_leakage,
    loco_split,
    mixture_resample,
)
from .design import (
    BasisSpec,
    PGrid,
    basis_at,
    basis_design,
    binomial_design,
    corruption_level,
    make_pgrid,
    sketch_design,
)
from .errors import (
    EmptyEvaluationSet,
    GridTooSmall,
    InsufficientData,
    InvalidConfig,
    SingularSystem,
    TooFewSamples,
)
from .solvers import SolveResult, TrendFilterConfig, constrained_solve, least_squares

__all__ = [
    "Method",
    "B3Config",
    "BootstrapTrace",
    "LossCurveEstimate",
    "TestResult",
    "FoldPlan",
    "SweepResult",
    "estimate_naive_iid",
    "estimate_loco",
    "level_means",
    "b3_collect",
    "b3_estimate",
    "make_test_folds",
    "leakage_ttest",
    "run_leakage_test",
    "oracle_e0",
    "sweep_leakage",
    "default_m",
]


# -- baselines -----------------------------------------------------------------

def _resolve_loss(learner: L.LearnerSpec, loss) -> L.LossKind:
    return L.fitting_loss(learner.kind) if loss is None else L.LossKind(loss)


def _fit_eval(learner, loss, X_tr, y_tr, X_ev, y_ev) -> float:
    model = L.fit(learner, X_tr, y_tr)
    return L.empirical_loss(model, X_ev, y_ev, loss)


def estimate_naive_iid(ds: ClusteredDataset, learner: L.LearnerSpec, loss=None,
                       folds: int = 5, seed: int = 0) -> float:
    """k-fold cross-validation with folds assigned uniformly at random.

    Returns the mean over folds of the held-out mean loss.
    """
    if folds < 2:
        raise InvalidConfig("folds must be >= 2")
    n = ds.n_samples
    if n < folds:
        raise TooFewSamples(f"{n} samples cannot fill {folds} folds")
    loss = _resolve_loss(learner, loss)
    perm = np.random.default_rng(seed).permutation(n)
    out = []
    for held in np.array_split(perm, folds):
        mask = np.ones(n, dtype=bool)
        mask[held] = False
        out.append(_fit_eval(learner, loss, ds.features[mask], ds.labels[mask],
                             ds.features[held], ds.labels[held]))
    return float(np.mean(out))


def estimate_loco(ds: ClusteredDataset, learner: L.LearnerSpec, loss=None,
                  use_approx: bool = False, held_out_cluster: int = 1) -> float:
    """Train on every cluster but ``held_out_cluster`` and average its loss.

    ``use_approx`` selects the approximate clustering, which is how leakage
    enters this estimator.
    """
    loss = _resolve_loss(learner, loss)
    c = ds.clusters(use_approx)
    if np.unique(c).size < 2:
        raise TooFewSamples("leave-one-cluster-out needs at least two clusters")
    split = loco_split(ds, held_out_cluster, use_approx)
    return _fit_eval(learner, loss,
                     ds.features[split.train_indices], ds.labels[split.train_indices],
                     ds.features[split.valid_indices], ds.labels[split.valid_indices])


# -- binomial block bootstrap --------------------------------------------------

class Method(str, enum.Enum):
    EXACT = "exact"
    T4MONO = "t4mono"
    BASIS = "basis"
    SKETCH = "sketch"


def default_m(method, n_prime: int) -> int:
    """Number of leakage levels: ``2 (n' + 1)`` for the exact solve, else 10."""
    return 2 * (n_prime + 1) if Method(method) is Method.EXACT else 10


@dataclass(frozen=True)
class B3Config:
    """Bootstrap and solve settings.

    ``m`` (or an explicit ``grid``) fixes the leakage levels; when both are
    omitted :func:`default_m` applies.  Trials are generated in blocks of
    ``block_size``; block ``b`` of level ``i`` draws from the stream
    ``SeedSequence(seed, spawn_key=(i, b))`` so results do not depend on the
    thread count.  With ``common_draws`` the stream ignores the level
    index, coupling the resamples across levels.
    """

    n_prime: int = 6
    t: int = 200
    method: Method = Method.EXACT
    m: Optional[int] = None
    grid: Optional[PGrid] = None
    trend_filter: TrendFilterConfig = TrendFilterConfig()
    basis: BasisSpec = BasisSpec()
    sketch_k: Optional[int] = None
    sketch_filter: TrendFilterConfig = TrendFilterConfig(order=4, lam=0.01)
    learner: L.LearnerSpec = L.LearnerSpec()
    loss: Optional[L.LossKind] = None
    seed: int = 0
    block_size: int = 512
    max_redraws: int = 10
    common_draws: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.loss is not None:
            object.__setattr__(self, "loss", L.LossKind(self.loss))
        if self.n_prime < 1:
            raise InvalidConfig("n_prime must be >= 1")
        if self.t < 1:
            raise InvalidConfig("t must be >= 1")
        if self.m is not None and self.m < 2:
            raise InvalidConfig("m must be >= 2")
        if self.block_size < 1 or self.max_redraws < 0:
            raise InvalidConfig("block_size must be >= 1 and max_redraws >= 0")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must be a 64-bit unsigned integer")

    @property
    def groups(self) -> int:
        """Sketch group count; defaults to ``min(7, n')``."""
        return min(7, self.n_prime) if self.sketch_k is None else self.sketch_k

    @property
    def eval_loss(self) -> L.LossKind:
        return _resolve_loss(self.learner, self.loss)

    def resolve_grid(self, p0: float) -> PGrid:
        if self.grid is not None:
            if abs(self.grid.p0 - p0) > 1e-12:
                raise InvalidConfig(f"grid starts at {self.grid.p0}, split has p0={p0}")
            return self.grid
        return make_pgrid(p0, self.m or default_m(self.method, self.n_prime))


@dataclass(frozen=True, eq=False)
class BootstrapTrace:
    b_bar: np.ndarray
    per_level_losses: np.ndarray
    grid: PGrid
    fit_failures: int = 0
    nonconverged: int = 0

    @property
    def p_prime(self) -> np.ndarray:
        return np.array([corruption_level(p, self.grid.p0) for p in self.grid.levels])


@dataclass(frozen=True, eq=False)
class LossCurveEstimate:
    e0_hat: float
    method: Method
    residual: float
    trace: BootstrapTrace
    curve: Optional[np.ndarray] = None
    coefficients: Optional[np.ndarray] = None
    basis: Optional[BasisSpec] = None
    solve: Optional[SolveResult] = field(default=None, repr=False)


class _Pools:
    """Dataset views shared by all bootstrap blocks."""

    def __init__(self, ds, corrupted, cfg):
        self.X = ds.features
        self.y = ds.labels
        self.train = corrupted.train
        self.valid = corrupted.valid
        self.pos = np.full(ds.n_samples, -1, dtype=np.int64)
        self.pos[self.valid] = np.arange(self.valid.size)
        self.Xv = self.X[self.valid]
        self.yv = self.y[self.valid]
        self.loss = cfg.eval_loss
        self.learner = cfg.learner
        self.batched = cfg.learner.kind is L.LearnerKind.RIDGE and cfg.learner.reg_strength > 0


def _block_losses(pools: _Pools, idx: np.ndarray):
    """Held-out losses for the bootstrap training sets ``idx`` (B x n').

    Returns per-trial losses (NaN where the learner failed or nothing is
    left to validate on), a mask of empty validation remainders and the
    count of non-converged fits.
    """
    B = idx.shape[0]
    keep = np.ones((B, pools.valid.size), dtype=bool)
    pos = pools.pos[idx]
    rows = np.repeat(np.arange(B), idx.shape[1])
    hit = pos.reshape(-1) >= 0
    keep[rows[hit], pos.reshape(-1)[hit]] = False
    counts = keep.sum(axis=1)
    empty = counts == 0
    nonconv = 0
    W = None
    if pools.batched:
        try:
            W = L.fit_ridge_batch(pools.learner, pools.X[idx], pools.y[idx])
        except SingularSystem:
            W = None
    if W is None:
        W = np.full((B, pools.X.shape[1] + 1), np.nan)
        for r in range(B):
            try:
                model = L.fit(pools.learner, pools.X[idx[r]], pools.y[idx[r]])
            except SingularSystem:
                continue
            W[r] = model.weights
            nonconv += not model.converged
    scores = W[:, :1] + W[:, 1:] @ pools.Xv.T
    pl = L.pointwise_loss(pools.loss, scores, pools.yv[None, :])
    with np.errstate(invalid="ignore", divide="ignore"):
        losses = np.where(keep, pl, 0.0).sum(axis=1) / counts
    losses[empty] = np.nan
    return losses, empty, nonconv


def _run_block(pools, cfg, level, p_prime, block, size):
    key = (block,) if cfg.common_draws else (level, block)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=key))
    n = cfg.n_prime
    idx = mixture_resample(pools.train, pools.valid, p_prime, size * n, rng).reshape(size, n)
    losses, empty, nonconv = _block_losses(pools, idx)
    failures = 0
    for attempt in range(1, cfg.max_redraws + 1):
        if not empty.any():
            break
        redo = np.flatnonzero(empty)
        rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=key + (attempt,)))
        idx2 = mixture_resample(pools.train, pools.valid, p_prime, redo.size * n, rng)
        l2, e2, nc2 = _block_losses(pools, idx2.reshape(redo.size, n))
        losses[redo] = l2
        empty[redo] = e2
        nonconv += nc2
    failures += int(empty.sum())
    failures += int(np.sum(np.isnan(losses) & ~empty))
    return losses, failures, nonconv


def level_means(per_level) -> np.ndarray:
    """Row means ignoring NaN, with exactly rounded sums so trial order cannot matter."""
    rows = np.atleast_2d(np.asarray(per_level, dtype=float))
    return np.array([math.fsum(r[~np.isnan(r)]) / np.sum(~np.isnan(r)) for r in rows])


def b3_collect(ds: ClusteredDataset, corrupted: CorruptedSplit, cfg: B3Config,
               threads: int = 1) -> BootstrapTrace:
    """Bootstrap losses at each leakage level of the grid.

    At level ``p_i`` every trial draws ``n'`` training indices from the
    mixture of the corrupted training fold (weight ``1 - p'``) and the
    validation fold (weight ``p'``), fits the learner and evaluates it on
    the validation fold minus the distinct samples it trained on.  Trials
    whose remainder is empty are redrawn up to ``max_redraws`` times and
    otherwise counted as failures and excluded from the mean.
    """
    if corrupted.direction is not Direction.VALID_TO_TRAIN:
        raise InvalidConfig("the bootstrap corrects validation-to-train leakage only")
    if corrupted.valid.size == 0:
        raise EmptyEvaluationSet("validation fold is empty")
    grid = cfg.resolve_grid(corrupted.p0)
    pools = _Pools(ds, corrupted, cfg)
    bs = cfg.block_size
    sizes = [min(bs, cfg.t - s) for s in range(0, cfg.t, bs)]
    tasks = [
        (i, corruption_level(p, grid.p0), b, size)
        for i, p in enumerate(grid.levels)
        for b, size in enumerate(sizes)
    ]

    def work(task):
        return _run_block(pools, cfg, *task)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, tasks))
    else:
        results = [work(tk) for tk in tasks]

    per_level = np.empty((grid.m, cfg.t))
    failures = nonconv = 0
    for (i, _, b, size), (losses, f, nc) in zip(tasks, results):
        per_level[i, b * bs : b * bs + size] = losses
        failures += f
        nonconv += nc
    if np.any(np.all(np.isnan(per_level), axis=1)):
        raise EmptyEvaluationSet("every bootstrap trial failed at some leakage level")
    b_bar = level_means(per_level)
    per_level.flags.writeable = False
    b_bar.flags.writeable = False
    return BootstrapTrace(b_bar, per_level, grid, failures, nonconv)


def _expand_groups(values, partition):
    return np.asarray(values)[partition]


def b3_estimate(trace: BootstrapTrace, cfg: B3Config) -> LossCurveEstimate:
    """Solve the binomial system built from ``trace`` with the configured method."""
    grid = trace.grid
    b = np.asarray(trace.b_bar, dtype=float)
    n = cfg.n_prime
    method = cfg.method
    if method is Method.BASIS:
        s = cfg.basis.degree
        if grid.m < s + 1:
            raise GridTooSmall(f"{grid.m} levels cannot determine {s + 1} coefficients")
        AP = basis_design(cfg.basis, grid, n)
        res = least_squares(AP, b)
        xi = res.solution
        e0 = float(basis_at(cfg.basis, [0.0])[0] @ xi)
        curve = basis_at(cfg.basis, np.arange(n + 1) / n) @ xi
        return LossCurveEstimate(e0, method, res.residual_norm, trace, curve, xi, cfg.basis, res)

    A = binomial_design(n, grid).matrix
    if method is Method.EXACT:
        if grid.m < n + 1:
            raise GridTooSmall(f"{grid.m} levels cannot determine {n + 1} unknowns")
        res = least_squares(A, b)
        curve = res.solution
    elif method is Method.T4MONO:
        res = constrained_solve(A, b, cfg.trend_filter)
        curve = res.solution
    else:
        sk = sketch_design(binomial_design(n, grid), cfg.groups)
        # unknowns are per-group values; the group sums solve S e' = b
        S_scaled = sk.S * sk.group_sizes[None, :]
        f = cfg.sketch_filter
        if f.lam > 0 and f.order >= S_scaled.shape[1]:
            f = TrendFilterConfig(order=1, lam=f.lam, monotone=f.monotone,
                                  nonneg=f.nonneg, max_iter=f.max_iter, tol=f.tol)
        res = constrained_solve(S_scaled, b, f)
        curve = _expand_groups(res.solution, sk.partition)
        resid = float(np.linalg.norm(A @ curve - b))
        return LossCurveEstimate(float(res.solution[0]), method, resid, trace, curve,
                                 res.solution, None, res)
    return LossCurveEstimate(float(curve[0]), method, res.residual_norm, trace, curve,
                             None, None, res)


# -- leakage hypothesis test -----------------------------------------------------

@dataclass(frozen=True)
class TestResult:
    __test__ = False  # keep pytest from collecting it

    t_stat: float
    dof: float
    p_value: float
    reject: bool
    alpha: float
    z_means: tuple
    z_vars: tuple
    fold_counts: tuple


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Index arrays of the disjoint folds; one row per fold."""

    train_T: np.ndarray
    train_V: np.ndarray
    valid: np.ndarray


def make_test_folds(corrupted: CorruptedSplit, n_prime: int, n_T: int = 10,
                    n_T_prime: int = 10, n_V: Optional[int] = None,
                    seed: int = 0) -> FoldPlan:
    """Sample disjoint folds without replacement.

    ``n_T`` training folds of size ``n_prime`` come from the corrupted
    training fold, ``n_T_prime`` from the validation fold, and each of the
    ``n_T + n_T_prime`` training folds gets its own validation fold of size
    ``n_V`` drawn from the remaining validation samples.
    """
    nt, nv = corrupted.train.size, corrupted.valid.size
    if n_prime < 1 or n_T < 1 or n_T_prime < 1:
        raise InvalidConfig("fold sizes and counts must be >= 1")
    if n_V is None:
        n_V = nv // (2 * (n_T + n_T_prime))
    if n_V < 1:
        raise InsufficientData(
            f"validation fold of {nv} samples too small for {n_T + n_T_prime} folds",
            nt // n_prime, 0)
    need_v = n_T_prime * n_prime + (n_T + n_T_prime) * n_V
    if n_T * n_prime > nt or need_v > nv:
        max_T = min(nt // n_prime, max(0, (nv - n_T_prime * (n_prime + n_V)) // n_V))
        max_Tp = max(0, (nv - n_T * n_V) // (n_prime + n_V))
        raise InsufficientData(
            f"need {n_T * n_prime} training and {need_v} validation samples, "
            f"have {nt} and {nv}; reduce fold counts (max n_T={max_T}, "
            f"max n_T_prime={max_Tp} at these sizes) or fold sizes",
            max_T, max_Tp)
    rng = np.random.default_rng(seed)
    t_perm = rng.permutation(corrupted.train)
    v_perm = rng.permutation(corrupted.valid)
    train_T = t_perm[: n_T * n_prime].reshape(n_T, n_prime)
    cut = n_T_prime * n_prime
    train_V = v_perm[:cut].reshape(n_T_prime, n_prime)
    valid = v_perm[cut : cut + (n_T + n_T_prime) * n_V].reshape(n_T + n_T_prime, n_V)
    return FoldPlan(train_T, train_V, valid)


def leakage_ttest(z, z_prime, alpha: float = 0.05) -> TestResult:
    """One-sided Welch test of ``mean(z) > mean(z_prime)``.

    Degrees of freedom follow Welch-Satterthwaite.  When both samples have
    zero variance the statistic is 0 (equal means, p-value 1 by
    convention) or infinite.
    """
    z = np.asarray(z, dtype=float)
    zp = np.asarray(z_prime, dtype=float)
    if z.size < 2 or zp.size < 2:
        raise TooFewSamples("each sample needs at least two losses")
    if not 0.0 < alpha < 1.0:
        raise InvalidConfig("alpha must lie in (0, 1)")
    n1, n2 = z.size, zp.size
    m1, m2 = float(z.mean()), float(zp.mean())
    v1, v2 = float(z.var(ddof=1)), float(zp.var(ddof=1))
    a, c = v1 / n1, v2 / n2
    if a + c == 0.0:
        dof = float(n1 + n2 - 2)
        if m1 == m2:
            t_stat, p = 0.0, 1.0
        else:
            t_stat = math.copysign(math.inf, m1 - m2)
            p = 0.0 if m1 > m2 else 1.0
    else:
        t_stat = (m1 - m2) / math.sqrt(a + c)
        dof = (a + c) ** 2 / (a**2 / (n1 - 1) + c**2 / (n2 - 1))
        p = float(stats.t.sf(t_stat, dof))
    return TestResult(t_stat, dof, p, bool(p < alpha), alpha, (m1, m2), (v1, v2), (n1, n2))


def run_leakage_test(ds: ClusteredDataset, corrupted: CorruptedSplit,
                     learner: L.LearnerSpec, loss=None, n_prime: Optional[int] = None,
                     n_T: int = 10, n_T_prime: int = 10, n_V: Optional[int] = None,
                     alpha: float = 0.05, seed: int = 0) -> TestResult:
    """Train on disjoint folds of each side and compare the validation losses.

    Without ``n_prime`` the largest training-fold size that fits is used.
    """
    loss = _resolve_loss(learner, loss)
    nv = corrupted.valid.size
    if n_V is None:
        n_V = nv // (2 * (n_T + n_T_prime))
    if n_prime is None:
        n_prime = min(corrupted.train.size // n_T,
                      (nv - (n_T + n_T_prime) * n_V) // n_T_prime)
        n_prime = max(n_prime, 1)
    plan = make_test_folds(corrupted, n_prime, n_T, n_T_prime, n_V, seed)
    X, y = ds.features, ds.labels

    def losses(train_rows, valid_rows):
        return np.array([_fit_eval(learner, loss, X[tr], y[tr], X[va], y[va])
                         for tr, va in zip(train_rows, valid_rows)])

    z = losses(plan.train_T, plan.valid[:n_T])
    zp = losses(plan.train_V, plan.valid[n_T:])
    return leakage_ttest(z, zp, alpha)


# -- Monte Carlo harness -------------------------------------------------------

def oracle_e0(cfg: PartitionModelConfig, learner: L.LearnerSpec, loss=None,
              train_size: Optional[int] = None, reps: int = 200, n_eval: int = 2000,
              seed: int = 0) -> tuple[float, float]:
    """Monte Carlo out-of-cluster loss of the partition model.

    Each repetition trains on ``train_size`` fresh samples of cluster 1 and
    evaluates on ``n_eval`` fresh samples of cluster 2.  Returns the mean
    and its standard error.
    """
    loss = _resolve_loss(learner, loss)
    train_size = cfg.n_train if train_size is None else train_size
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    out = np.empty(reps)
    for r in range(reps):
        X1, y1 = draw_partition_samples(cfg, 1, train_size, rng)
        X2, y2 = draw_partition_samples(cfg, 2, n_eval, rng)
        out[r] = _fit_eval(learner, loss, X1, y1, X2, y2)
    return float(out.mean()), float(out.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0


@dataclass(frozen=True, eq=False)
class SweepResult:
    p0: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    isotonic: np.ndarray
    isotonic_residual: float
    second_diff: np.ndarray

    @property
    def curve_range(self) -> float:
        return float(self.mean.max() - self.mean.min())


def sweep_leakage(ds: ClusteredDataset, p0_values: Sequence[float], trials: int,
                  learner: L.LearnerSpec, loss=None, held_out_cluster: int = 1,
                  seed: int = 0, threads: int = 1) -> SweepResult:
    """Mean validation loss after injecting leakage at each ``p0``.

    Trial ``r`` uses the same leakage stream at every ``p0``, so the moved
    sets are nested across the sweep.  The isotonic (nonincreasing) fit of
    the mean curve, its maximum absolute residual and the discrete second
    differences are returned as diagnostics.
    """
    from .solvers import project_feasible

    loss = _resolve_loss(learner, loss)
    p0s = np.asarray(p0_values, dtype=float)
    if p0s.size == 0 or np.any((p0s < 0) | (p0s >= 1)):
        raise InvalidConfig("p0 values must lie in [0, 1)")
    if trials < 1:
        raise InvalidConfig("trials must be >= 1")
    split = loco_split(ds, held_out_cluster)
    X, y = ds.features, ds.labels

    def one(task):
        k, r = task
        seed_r = int(np.random.SeedSequence(seed, spawn_key=(r,)).generate_state(1, np.uint64)[0])
        cs = inject_leakage(split, LeakageConfig(float(p0s[k]), Direction.VALID_TO_TRAIN, seed_r))
        if cs.valid.size == 0:
            return np.nan
        return _fit_eval(learner, loss, X[cs.train], y[cs.train], X[cs.valid], y[cs.valid])

    tasks = [(k, r) for k in range(p0s.size) for r in range(trials)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            vals = list(ex.map(one, tasks))
    else:
        vals = [one(tk) for tk in tasks]
    V = np.array(vals).reshape(p0s.size, trials)
    mean = np.nanmean(V, axis=1)
    cnt = np.sum(~np.isnan(V), axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        stderr = np.where(cnt > 1, np.nanstd(V, axis=1, ddof=1) / np.sqrt(cnt), 0.0) \
            if trials > 1 else np.zeros(p0s.size)
    iso = project_feasible(mean, monotone=True, nonneg=False)
    resid = float(np.max(np.abs(mean - iso)))
    sd = mean[:-2] - 2 * mean[1:-1] + mean[2:] if p0s.size >= 3 else np.zeros(0)
    return SweepResult(p0s, mean, stderr, iso, resid, sd)
