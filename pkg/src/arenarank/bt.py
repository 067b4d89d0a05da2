"""Reweighted Bradley-Terry fitting, robust intervals and approximate ranks."""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import expit
from scipy.stats import chi2, norm

from .core import BattleLog
from .errors import (
    BootstrapError,
    InsufficientDataError,
    NonIdentifiableError,
    NotPositiveDefiniteError,
    SingularInformationError,
)

logger = logging.getLogger(__name__)

DEFAULT_RIDGE = 1e-6
GRAD_TOL = 1e-8
MAX_ITER = 500


@dataclass(frozen=True)
class PairStats:
    """Per-pair weighted sufficient statistics of a battle log.

    ``w = 1 / sample_prob`` per record, optionally multiplied by a resampling
    count. Only pairs with at least one record are kept.
    """

    first: np.ndarray
    second: np.ndarray
    w: np.ndarray  # sum w
    wh: np.ndarray  # sum w * h
    w2: np.ndarray  # sum w^2
    w2h: np.ndarray  # sum w^2 * h
    w2h2: np.ndarray  # sum w^2 * h^2
    n_models: int
    T: int

    @classmethod
    def from_log(cls, log: BattleLog, counts: np.ndarray | None = None, model_map: np.ndarray | None = None):
        n_models = log.models.n_models
        first, second = log.first, log.second
        if model_map is not None:
            first, second = model_map[first], model_map[second]
            n_models = int(model_map.max()) + 1
        w = 1.0 / log.sample_prob
        h = log.outcome
        c = np.ones(len(log)) if counts is None else np.asarray(counts, dtype=float)
        key = first * n_models + second
        uniq, inv = np.unique(key, return_inverse=True)

        def agg(values):
            return np.bincount(inv, weights=values, minlength=len(uniq))

        stats = cls(
            first=uniq // n_models,
            second=uniq % n_models,
            w=agg(c * w),
            wh=agg(c * w * h),
            w2=agg(c * w * w),
            w2h=agg(c * w * w * h),
            w2h2=agg(c * w * w * h * h),
            n_models=n_models,
            T=int(round(c.sum())),
        )
        keep = stats.w > 0
        if keep.all():
            return stats
        return cls(
            stats.first[keep], stats.second[keep], stats.w[keep], stats.wh[keep],
            stats.w2[keep], stats.w2h[keep], stats.w2h2[keep], n_models, stats.T,
        )


def _laplacian(first, second, weights, n):
    """Sum over pairs of ``weights * (e_second - e_first)(e_second - e_first)^T``."""
    L = np.zeros((n, n))
    np.add.at(L, (first, first), weights)
    np.add.at(L, (second, second), weights)
    np.add.at(L, (first, second), -weights)
    np.add.at(L, (second, first), -weights)
    return L


def _softplus(x):
    return np.logaddexp(0.0, x)


def bt_objective(x: np.ndarray, stats: PairStats, ridge: float) -> float:
    """Mean weighted soft-label cross-entropy plus ``ridge * ||x||^2``.

    ``x`` holds the free coordinates; the anchor coefficient is fixed at 0.
    """
    xi = np.concatenate(([0.0], x))
    d = xi[stats.second] - xi[stats.first]
    # -log sigmoid(d) = softplus(-d); -log(1 - sigmoid(d)) = softplus(d)
    loss = stats.wh * _softplus(-d) + (stats.w - stats.wh) * _softplus(d)
    return float(loss.sum() / stats.T + ridge * np.dot(x, x))


def bt_gradient(x: np.ndarray, stats: PairStats, ridge: float) -> np.ndarray:
    xi = np.concatenate(([0.0], x))
    d = xi[stats.second] - xi[stats.first]
    g = (stats.w * expit(d) - stats.wh) / stats.T
    grad = np.bincount(stats.second, g, stats.n_models) - np.bincount(stats.first, g, stats.n_models)
    return grad[1:] + 2.0 * ridge * x


def bt_hessian(x: np.ndarray, stats: PairStats, ridge: float) -> np.ndarray:
    xi = np.concatenate(([0.0], x))
    p = expit(xi[stats.second] - xi[stats.first])
    H = _laplacian(stats.first, stats.second, stats.w * p * (1.0 - p) / stats.T, stats.n_models)
    return H[1:, 1:] + 2.0 * ridge * np.eye(stats.n_models - 1)


def _check_identifiable(stats: PairStats, names) -> None:
    """Raise unless the 'beat' digraph is strongly connected (unique finite MLE)."""
    n = stats.n_models
    lost_first = stats.wh > 0  # second model earned some credit
    lost_second = (stats.w - stats.wh) > 0
    rows = np.concatenate((stats.second[lost_first], stats.first[lost_second]))
    cols = np.concatenate((stats.first[lost_first], stats.second[lost_second]))
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    n_comp, labels = connected_components(graph, directed=True, connection="strong")
    if n_comp > 1:
        groups = [[names[i] for i in np.flatnonzero(labels == c)] for c in range(n_comp)]
        raise NonIdentifiableError(
            "the maximum-likelihood estimate does not exist (perfect separation between "
            f"model groups {groups}); refit with a positive ridge"
        )


def _newton(stats: PairStats, ridge: float, x0=None, tol=GRAD_TOL, max_iter=MAX_ITER):
    k = stats.n_models - 1
    x = np.zeros(k) if x0 is None else np.array(x0, dtype=float)
    f = bt_objective(x, stats, ridge)
    grad = bt_gradient(x, stats, ridge)
    it = 0
    while it < max_iter and np.max(np.abs(grad), initial=0.0) >= tol:
        it += 1
        H = bt_hessian(x, stats, ridge)
        try:
            c = np.linalg.cholesky(H)
            step = np.linalg.solve(c.T, np.linalg.solve(c, grad))
        except np.linalg.LinAlgError:
            step = grad
        t = 1.0
        for _ in range(60):
            x_new = x - t * step
            f_new = bt_objective(x_new, stats, ridge)
            if f_new <= f:
                break
            t *= 0.5
        else:
            break
        x, f = x_new, f_new
        grad = bt_gradient(x, stats, ridge)
    gnorm = float(np.max(np.abs(grad), initial=0.0))
    return x, f, gnorm, it


@dataclass(frozen=True)
class BtFit:
    """Fitted Bradley-Terry coefficients.

    ``xi[0] == 0`` (anchor). ``models`` lists the ids of the fitted models in
    coefficient order; models without battles are listed in ``dropped``.
    """

    xi: np.ndarray
    sandwich_cov: np.ndarray | None
    grad_norm: float
    iterations: int
    ridge: float
    models: tuple[str, ...]
    n_battles: np.ndarray
    T: int
    objective: float
    converged: bool
    dropped: tuple[str, ...] = ()
    model_map: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_models(self) -> int:
        return len(self.xi)


def _model_map(log: BattleLog):
    counts = log.battles_per_model()
    kept = np.flatnonzero(counts > 0)
    dropped = tuple(log.models.ids[i] for i in np.flatnonzero(counts == 0))
    mapping = np.full(log.models.n_models, -1, dtype=np.int64)
    mapping[kept] = np.arange(len(kept))
    return mapping, kept, dropped, counts[kept]


def fit_bt(
    log: BattleLog,
    ridge: float = DEFAULT_RIDGE,
    *,
    tol: float = GRAD_TOL,
    max_iter: int = MAX_ITER,
    with_covariance: bool = True,
) -> BtFit:
    """Inverse-probability-weighted Bradley-Terry maximum likelihood.

    Minimizes ``(1/T) sum_t ell(H_t, sigmoid(xi[second] - xi[first])) / P_t
    + ridge * ||xi||^2`` over the free coordinates by damped Newton.
    Models that never appear are dropped (with a warning) before fitting.

    Raises:
        NonIdentifiableError: ``ridge == 0`` and the data are perfectly separated.
        InsufficientDataError: fewer records than fitted models.
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    mapping, kept, dropped, n_battles = _model_map(log)
    if dropped:
        warnings.warn(f"dropping models with no battles: {list(dropped)}", stacklevel=2)
    names = tuple(log.models.ids[i] for i in kept)
    if len(kept) < 2:
        raise InsufficientDataError("need battles between at least two models")
    if len(log) < len(kept):
        raise InsufficientDataError(f"need at least as many battles ({len(log)}) as models ({len(kept)})")
    stats = PairStats.from_log(log, model_map=mapping if dropped else None)
    if ridge == 0:
        _check_identifiable(stats, names)
    x, f, gnorm, it = _newton(stats, ridge, tol=tol, max_iter=max_iter)
    converged = gnorm < tol
    if not converged:
        warnings.warn(f"Bradley-Terry fit did not converge (max |grad| = {gnorm:.3g})", stacklevel=2)
    xi = np.concatenate(([0.0], x))
    cov = None
    if with_covariance:
        try:
            cov = _sandwich(stats, x, ridge, names)
        except SingularInformationError as exc:
            warnings.warn(str(exc), stacklevel=2)
    return BtFit(
        xi=xi,
        sandwich_cov=cov,
        grad_norm=gnorm,
        iterations=it,
        ridge=ridge,
        models=names,
        n_battles=n_battles,
        T=len(log),
        objective=f,
        converged=converged,
        dropped=dropped,
        model_map=mapping,
    )


def _sandwich(stats: PairStats, x: np.ndarray, ridge: float, names) -> np.ndarray:
    n = stats.n_models
    graph = coo_matrix((np.ones(len(stats.first)), (stats.first, stats.second)), shape=(n, n))
    n_comp, labels = connected_components(graph, directed=False)
    if n_comp > 1:
        cluster = [names[i] for i in np.flatnonzero(labels != labels[0])]
        raise SingularInformationError(
            f"information matrix is singular: models {cluster} are never compared with the anchor's group",
            cluster,
        )
    xi = np.concatenate(([0.0], x))
    p = expit(xi[stats.second] - xi[stats.first])
    H = bt_hessian(x, stats, ridge)
    q = (p * p * stats.w2 - 2.0 * p * stats.w2h + stats.w2h2) / stats.T
    G = _laplacian(stats.first, stats.second, q, n)[1:, 1:]
    try:
        H_inv = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        raise SingularInformationError("information matrix is singular", names[1:]) from None
    cov = H_inv @ G @ H_inv / stats.T
    return (cov + cov.T) / 2.0


def sandwich_covariance(fit: BtFit, log: BattleLog) -> np.ndarray:
    """Robust covariance ``(1/T) H^-1 G H^-1`` of the free coefficients.

    ``H`` is the Hessian of the mean objective at ``fit.xi`` and ``G`` the mean
    outer product of per-record weighted score vectors.
    """
    use_map = fit.model_map is not None and np.any(fit.model_map < 0)
    stats = PairStats.from_log(log, model_map=fit.model_map if use_map else None)
    return _sandwich(stats, fit.xi[1:], fit.ridge, fit.models)


@dataclass(frozen=True)
class ScoreIntervals:
    models: tuple[str, ...]
    estimate: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    simultaneous: bool
    alpha: float
    method: str = "sandwich"

    def __len__(self) -> int:
        return len(self.models)

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo


def _free_sd(fit: BtFit, cov: np.ndarray | None) -> np.ndarray:
    cov = fit.sandwich_cov if cov is None else cov
    if cov is None:
        raise SingularInformationError("fit has no covariance; see sandwich_covariance")
    return np.sqrt(np.concatenate(([0.0], np.clip(np.diag(cov), 0.0, None))))


def marginal_intervals(fit: BtFit, cov: np.ndarray | None = None, alpha: float = 0.05) -> ScoreIntervals:
    """Per-coordinate normal intervals without multiplicity correction."""
    half = norm.ppf(1.0 - alpha / 2.0) * _free_sd(fit, cov)
    return ScoreIntervals(fit.models, fit.xi.copy(), fit.xi - half, fit.xi + half, False, alpha)


def simultaneous_set(fit: BtFit, cov: np.ndarray | None = None, alpha: float = 0.05) -> ScoreIntervals:
    """Axis-aligned bounding box of the chi-square CLT ellipsoid.

    The ellipsoid is ``{xi : (xi_hat - xi)^T cov^-1 (xi_hat - xi) <= chi2_{1-alpha, M-1}}``;
    its extent along coordinate m is ``sqrt(chi2 * cov_mm)``.
    """
    cov = fit.sandwich_cov if cov is None else cov
    if cov is None:
        raise SingularInformationError("fit has no covariance; see sandwich_covariance")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("covariance is not positive definite") from None
    q = chi2.ppf(1.0 - alpha, fit.n_models - 1)
    half = np.sqrt(q) * _free_sd(fit, cov)
    return ScoreIntervals(fit.models, fit.xi.copy(), fit.xi - half, fit.xi + half, True, alpha)


def _replicate_seed(seed: int, replicate: int, attempt: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(replicate, attempt))


def bootstrap_intervals(
    log: BattleLog,
    B: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
    *,
    ridge: float = DEFAULT_RIDGE,
    fit: BtFit | None = None,
    workers: int = 1,
    max_retries: int = 10,
) -> ScoreIntervals:
    """Pivot bootstrap intervals ``(2 xi_hat - q_hi, 2 xi_hat - q_lo)``.

    Each replicate resamples records with replacement using its own seed
    derived from ``(seed, replicate)``, so results do not depend on ``workers``.
    A replicate that loses a model entirely is redrawn.
    """
    if B < 100:
        raise ValueError("bootstrap needs B >= 100 replicates")
    if fit is None:
        fit = fit_bt(log, ridge, with_covariance=False)
    mapping = fit.model_map
    T = len(log)
    n = fit.n_models
    use_map = mapping is not None and np.any(mapping < 0)
    first = mapping[log.first] if use_map else log.first
    second = mapping[log.second] if use_map else log.second

    def replicate(r: int) -> np.ndarray:
        for attempt in range(max_retries + 1):
            rng = np.random.default_rng(_replicate_seed(seed, r, attempt))
            counts = np.bincount(rng.integers(0, T, T), minlength=T)
            seen = np.bincount(first, counts, n) + np.bincount(second, counts, n)
            if np.all(seen > 0):
                break
        else:
            raise BootstrapError(f"replicate {r} dropped a model in {max_retries + 1} attempts")
        stats = PairStats.from_log(log, counts=counts, model_map=mapping if use_map else None)
        x, _, _, _ = _newton(stats, fit.ridge, x0=fit.xi[1:])
        return np.concatenate(([0.0], x))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            draws = np.array(list(pool.map(replicate, range(B))))
    else:
        draws = np.array([replicate(r) for r in range(B)])
    q_lo = np.quantile(draws, alpha / 2.0, axis=0)
    q_hi = np.quantile(draws, 1.0 - alpha / 2.0, axis=0)
    return ScoreIntervals(fit.models, fit.xi.copy(), 2 * fit.xi - q_hi, 2 * fit.xi - q_lo, False, alpha, "bootstrap")


@dataclass(frozen=True)
class RankRow:
    model: str
    score: float
    lo: float
    hi: float
    rank_lower: int
    rank_upper: int


@dataclass(frozen=True)
class RankingReport:
    """Approximate ranks.

    ``rank_lower`` is optimistic: with a simultaneous set it is, with
    probability >= 1 - alpha, no worse than the true rank of every model.
    ``rank_upper`` is the pessimistic counterpart, so
    ``rank_lower <= true rank <= rank_upper``.
    """

    rows: list[RankRow]
    alpha: float
    simultaneous: bool

    @property
    def rank_lower(self) -> np.ndarray:
        return np.array([r.rank_lower for r in self.rows])

    @property
    def rank_upper(self) -> np.ndarray:
        return np.array([r.rank_upper for r in self.rows])


def approximate_ranks(intervals: ScoreIntervals) -> RankingReport:
    """``R_m = 1 + #{m' : lo_m' > hi_m}`` and ``U_m = 1 + #{m' != m : hi_m' > lo_m}``."""
    lo, hi = intervals.lo, intervals.hi
    above = lo[None, :] > hi[:, None]  # [m, m']: m' certainly better than m
    maybe_above = hi[None, :] > lo[:, None]
    np.fill_diagonal(maybe_above, False)
    lower = 1 + above.sum(axis=1)
    upper = 1 + maybe_above.sum(axis=1)
    rows = [
        RankRow(m, float(s), float(a), float(b), int(r), int(u))
        for m, s, a, b, r, u in zip(intervals.models, intervals.estimate, lo, hi, lower, upper)
    ]
    return RankingReport(rows, intervals.alpha, intervals.simultaneous)


def true_ranks(scores: np.ndarray) -> np.ndarray:
    """``1 + #{m' : s_m' > s_m}`` (ties share the better rank)."""
    scores = np.asarray(scores)
    return 1 + (scores[None, :] > scores[:, None]).sum(axis=1)
