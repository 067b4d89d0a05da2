"""Synthetic battles and the simulation experiments.

Every experiment is a pure function of its config: each trial draws from
named substreams of ``cfg.seed`` (see :mod:`arenarank.rng`), so trials can run
in any order or in parallel with identical results.
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .bt import (
    BtFit,
    approximate_ranks,
    bootstrap_intervals,
    fit_bt,
    marginal_intervals,
    simultaneous_set,
    true_ranks,
)
from .core import BattleLog, ModelRegistry, pair_arrays
from .rng import generator, substream
from .sampler import ActiveSampler
from .win_matrix import estimate_win_matrix, interval_width_profile

logger = logging.getLogger(__name__)

SAMPLING = ("uniform", "adaptive")


@dataclass(frozen=True)
class SimConfig:
    M: int = 10
    gamma: float = 2.0
    T: int = 20_000
    trials: int = 200
    alpha: float = 0.05
    seed: int = 0
    sampling: str = "uniform"
    scale: float = 4.0
    floor_delta: float = 0.05
    ridge: float = 1e-6
    bootstrap: bool = False
    boot_reps: int = 200
    workers: int = 1

    def __post_init__(self):
        if self.M < 2 or self.T < 1 or self.trials < 1:
            raise ValueError("M >= 2, T >= 1 and trials >= 1 are required")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.sampling not in SAMPLING:
            raise ValueError(f"sampling must be one of {SAMPLING}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


def draw_coefficients(M: int, gamma: float, scale: float = 4.0, seed=None) -> np.ndarray:
    """``M`` i.i.d. beta(1/gamma, 1/gamma) draws times ``scale``, shifted so entry 0 is 0."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    rng = np.random.default_rng(seed)
    raw = rng.beta(1.0 / gamma, 1.0 / gamma, size=M) * scale
    return raw - raw[0]


def synthetic_registry(M: int) -> ModelRegistry:
    width = len(str(M - 1))
    return ModelRegistry(f"m{k:0{width}d}" for k in range(M))


def synthesize_battles(
    xi,
    T: int,
    sampling: str = "uniform",
    seed: int = 0,
    *,
    floor_delta: float = 0.05,
    models: ModelRegistry | None = None,
) -> BattleLog:
    """Battles under the logistic model ``P(H = 1) = sigmoid(xi[second] - xi[first])``.

    Pair draws and outcome draws use separate substreams of ``seed``; uniform
    and adaptive runs with the same seed share outcome randomness and agree
    exactly until the adaptive warm-up ends.
    """
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise ValueError("coefficients must be finite")
    if sampling not in SAMPLING:
        raise ValueError(f"sampling must be one of {SAMPLING}")
    M = len(xi)
    models = models or synthetic_registry(M)
    if T == 0:
        return BattleLog.empty(models)
    k, prob, h = _simulate(xi, T, sampling, seed, floor_delta)
    first, second = pair_arrays(M)
    return BattleLog(models, first[k], second[k], h, prob, np.arange(T))


def _simulate(xi, T, sampling, seed, floor_delta, grid=None):
    """Core simulation loop; with ``grid`` also returns mean win-matrix widths there."""
    M = len(xi)
    first, second = pair_arrays(M)
    theta = expit(xi[second] - xi[first])
    n_pairs = len(theta)
    u_out = generator(seed, "outcomes").random(T)
    pair_rng = generator(seed, "pairs")
    if sampling == "uniform":
        k = np.minimum((pair_rng.random(T) * n_pairs).astype(np.int64), n_pairs - 1)
        prob = np.full(T, 1.0 / n_pairs)
        h = (u_out < theta[k]).astype(float)
        widths = None if grid is None else _grid_widths(k, h, prob, n_pairs, grid)
        return (k, prob, h) if grid is None else (k, prob, h, widths)

    sampler = ActiveSampler(M, floor_delta, pair_rng)
    k = np.empty(T, dtype=np.int64)
    prob = np.empty(T)
    h = np.empty(T)
    z = norm.ppf(0.975)
    grid_set = {} if grid is None else {int(g): i for i, g in enumerate(grid)}
    widths = np.empty(len(grid_set))
    for t in range(T):
        kt, pt = sampler.draw_index()
        ht = 1.0 if u_out[t] < theta[kt] else 0.0
        sampler.observe(kt, ht, pt)
        k[t], prob[t], h[t] = kt, pt, ht
        if t + 1 in grid_set:
            w = np.where(sampler.n_obs > 0, 2 * z * np.sqrt(sampler.sigma_diag / sampler.T), 1.0)
            widths[grid_set[t + 1]] = w.mean()
    return (k, prob, h) if grid is None else (k, prob, h, widths)


def _grid_widths(k, h, prob, n_pairs, grid, alpha=0.05):
    z = norm.ppf(1 - alpha / 2)
    x = h / prob
    out = np.empty(len(grid))
    for i, g in enumerate(grid):
        g = int(g)
        sx = np.bincount(k[:g], x[:g], n_pairs)
        sx2 = np.bincount(k[:g], x[:g] ** 2, n_pairs)
        n = np.bincount(k[:g], minlength=n_pairs)
        sigma = np.clip(sx2 / g - (sx / g) ** 2, 0, None)
        out[i] = np.where(n > 0, 2 * z * np.sqrt(sigma / g), 1.0).mean()
    return out


# ---------------------------------------------------------------- coverage


@dataclass
class TrialResult:
    true_xi: np.ndarray
    fit: BtFit
    covered: np.ndarray  # per free coordinate, marginal sandwich intervals
    widths: np.ndarray
    simultaneous_covered: bool
    rank_violation: bool
    boot_covered: np.ndarray | None = None
    boot_widths: np.ndarray | None = None


def run_trial(cfg: SimConfig, trial: int) -> TrialResult:
    xi = draw_coefficients(cfg.M, cfg.gamma, cfg.scale, substream(cfg.seed, trial, "coefficients"))
    log = synthesize_battles(
        xi, cfg.T, cfg.sampling, int(substream(cfg.seed, trial, "battles").generate_state(1)[0]),
        floor_delta=cfg.floor_delta,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_bt(log, cfg.ridge)
    if fit.dropped or fit.sandwich_cov is None:
        raise RuntimeError(f"trial {trial}: T={cfg.T} too small for M={cfg.M}")
    marg = marginal_intervals(fit, alpha=cfg.alpha)
    sim = simultaneous_set(fit, alpha=cfg.alpha)
    covered = (marg.lo <= xi) & (xi <= marg.hi)
    sim_cov = bool(np.all((sim.lo <= xi) & (xi <= sim.hi)))
    violation = bool(np.any(approximate_ranks(sim).rank_lower > true_ranks(xi)))
    result = TrialResult(xi, fit, covered[1:], marg.widths[1:], sim_cov, violation)
    if cfg.bootstrap:
        seed = int(substream(cfg.seed, trial, "bootstrap").generate_state(1)[0])
        boot = bootstrap_intervals(log, cfg.boot_reps, cfg.alpha, seed, fit=fit)
        result.boot_covered = ((boot.lo <= xi) & (xi <= boot.hi))[1:]
        result.boot_widths = boot.widths[1:]
    return result


def _map_trials(cfg: SimConfig, fn, n: int):
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            return list(pool.map(lambda t: fn(cfg, t), range(n)))
    return [fn(cfg, t) for t in range(n)]


def _mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


@dataclass
class CoverageSummary:
    config: dict
    coverage: float
    coverage_se: float
    width: float
    width_se: float
    simultaneous_coverage: float
    rank_violation_rate: float
    per_model_coverage: list[float]
    bootstrap_coverage: float | None = None
    bootstrap_width: float | None = None
    trials: list[TrialResult] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "trials"}
        return d

    def plot_rows(self) -> list[tuple]:
        m = self.config["M"]
        rows = [
            (m, "sandwich_coverage", self.coverage, self.coverage - 2 * self.coverage_se, self.coverage + 2 * self.coverage_se),
            (m, "sandwich_width", self.width, self.width - 2 * self.width_se, self.width + 2 * self.width_se),
            (m, "simultaneous_coverage", self.simultaneous_coverage, None, None),
            (m, "rank_violation_rate", self.rank_violation_rate, None, None),
        ]
        if self.bootstrap_coverage is not None:
            rows.append((m, "bootstrap_coverage", self.bootstrap_coverage, None, None))
            rows.append((m, "bootstrap_width", self.bootstrap_width, None, None))
        return rows


def run_coverage_experiment(cfg: SimConfig) -> CoverageSummary:
    """Coverage and width of sandwich (and optionally bootstrap) intervals.

    Per-coordinate coverage uses the uncorrected marginal intervals over the
    free coefficients; the simultaneous set is scored by joint coverage and by
    whether any lower approximate rank exceeds the true rank.
    """
    results = _map_trials(cfg, run_trial, cfg.trials)
    covered = np.array([r.covered for r in results])
    widths = np.array([r.widths.mean() for r in results])
    cov_mean, cov_se = _mean_se(covered.mean(axis=1))
    width_mean, width_se = _mean_se(widths)
    summary = CoverageSummary(
        config=asdict(cfg),
        coverage=cov_mean,
        coverage_se=cov_se,
        width=width_mean,
        width_se=width_se,
        simultaneous_coverage=float(np.mean([r.simultaneous_covered for r in results])),
        rank_violation_rate=float(np.mean([r.rank_violation for r in results])),
        per_model_coverage=[float(c) for c in covered.mean(axis=0)],
        trials=results,
    )
    if cfg.bootstrap:
        summary.bootstrap_coverage = float(np.mean([r.boot_covered.mean() for r in results]))
        summary.bootstrap_width = float(np.mean([r.boot_widths.mean() for r in results]))
    return summary


# -------------------------------------------------------------- efficiency


@dataclass
class EfficiencySummary:
    config: dict
    grid: list[int]
    uniform_width: list[float]
    adaptive_width: list[float]
    uniform_width_se: list[float]
    adaptive_width_se: list[float]
    checkpoints: list[int]
    uniform_score_width: list[float]
    adaptive_score_width: list[float]
    target_width: float
    samples_to_target: dict
    ratio: float | None

    def to_dict(self) -> dict:
        return asdict(self)

    def width_at(self, T: int, policy: str) -> float:
        curve = self.uniform_width if policy == "uniform" else self.adaptive_width
        return curve[self.grid.index(T)]

    def plot_rows(self) -> list[tuple]:
        rows = []
        for name in ("uniform", "adaptive"):
            mean = getattr(self, f"{name}_width")
            se = getattr(self, f"{name}_width_se")
            for x, y, s in zip(self.grid, mean, se):
                rows.append((x, f"winmatrix_{name}", y, y - 2 * s, y + 2 * s))
        for name in ("uniform", "adaptive"):
            for x, y in zip(self.checkpoints, getattr(self, f"{name}_score_width")):
                rows.append((x, f"score_{name}", y, None, None))
        return rows


def crossing_point(grid, widths, target: float) -> float | None:
    """Smallest T (linearly interpolated on the grid) where ``widths <= target``."""
    grid = np.asarray(grid, dtype=float)
    widths = np.asarray(widths, dtype=float)
    below = np.flatnonzero(widths <= target)
    if len(below) == 0:
        return None
    i = below[0]
    if i == 0:
        return float(grid[0])
    x0, x1, y0, y1 = grid[i - 1], grid[i], widths[i - 1], widths[i]
    return float(x0 + (y0 - target) * (x1 - x0) / (y0 - y1))


def _score_width(k, prob, h, M, T, ridge, alpha):
    first, second = pair_arrays(M)
    log = BattleLog(synthetic_registry(M), first[k[:T]], second[k[:T]], h[:T], prob[:T], np.arange(T))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_bt(log, ridge)
    if fit.sandwich_cov is None or fit.dropped:
        return float("nan")
    return float(marginal_intervals(fit, alpha=alpha).widths[1:].mean())


def _efficiency_seed(cfg: SimConfig, s: int, grid, checkpoints):
    xi = draw_coefficients(cfg.M, cfg.gamma, cfg.scale, substream(cfg.seed, s, "coefficients"))
    battle_seed = int(substream(cfg.seed, s, "battles").generate_state(1)[0])
    out = {}
    for policy in SAMPLING:
        k, prob, h, widths = _simulate(xi, cfg.T, policy, battle_seed, cfg.floor_delta, grid)
        scores = [_score_width(k, prob, h, cfg.M, c, cfg.ridge, cfg.alpha) for c in checkpoints]
        out[policy] = (widths, np.array(scores))
    return out


def run_efficiency_experiment(
    cfg: SimConfig,
    checkpoints=None,
    *,
    resolution: int = 200,
    target_width: float = 0.2,
) -> EfficiencySummary:
    """Paired uniform-vs-adaptive runs on common ground truth.

    For each of ``cfg.trials`` seeds, both policies see the same coefficients
    and the same outcome uniforms. Mean win-matrix interval width (95%) is
    tracked every ``resolution`` battles up to ``cfg.T``; BT score widths are
    computed at ``checkpoints``.
    """
    if checkpoints is None:
        step = max(cfg.T // 10, 1)
        checkpoints = list(range(step, cfg.T + 1, step))
    checkpoints = [int(c) for c in checkpoints if c <= cfg.T]
    grid = sorted(set(range(resolution, cfg.T + 1, resolution)) | set(checkpoints))
    runs = _map_trials(cfg, lambda c, s: _efficiency_seed(c, s, grid, checkpoints), cfg.trials)
    summary = {}
    for policy in SAMPLING:
        w = np.array([r[policy][0] for r in runs])
        sc = np.array([r[policy][1] for r in runs])
        se = w.std(axis=0, ddof=1) / np.sqrt(len(w)) if len(w) > 1 else np.zeros(w.shape[1])
        summary[policy] = (w.mean(axis=0), se, np.nanmean(sc, axis=0) if len(sc) else sc)
    crossings = {p: crossing_point(grid, summary[p][0], target_width) for p in SAMPLING}
    ratio = None
    if crossings["uniform"] is not None and crossings["adaptive"] is not None:
        ratio = crossings["uniform"] / crossings["adaptive"]
    return EfficiencySummary(
        config=asdict(cfg),
        grid=list(grid),
        uniform_width=summary["uniform"][0].tolist(),
        adaptive_width=summary["adaptive"][0].tolist(),
        uniform_width_se=summary["uniform"][1].tolist(),
        adaptive_width_se=summary["adaptive"][1].tolist(),
        checkpoints=checkpoints,
        uniform_score_width=summary["uniform"][2].tolist(),
        adaptive_score_width=summary["adaptive"][2].tolist(),
        target_width=target_width,
        samples_to_target=crossings,
        ratio=ratio,
    )


# ------------------------------------------------------------------ replay


@dataclass
class ReplaySnapshot:
    T: int
    fit: BtFit
    marginal: object
    simultaneous: object
    winmatrix_mean_width: float
    median_width: float


def replay(log: BattleLog, checkpoints, *, alpha: float = 0.05, ridge: float = 1e-6) -> list[ReplaySnapshot]:
    """Refit on growing prefixes of ``log``.

    Checkpoints past the end of the log are truncated to its length (with a
    warning); duplicates after truncation are dropped.
    """
    if len(log) == 0:
        raise ValueError("replay needs a nonempty log")
    cps = []
    for c in checkpoints:
        c = int(c)
        if c > len(log):
            warnings.warn(f"checkpoint {c} beyond log length {len(log)}; truncated", stacklevel=2)
            c = len(log)
        if c < 1:
            raise ValueError("checkpoints must be positive")
        if c not in cps:
            cps.append(c)
    snapshots = []
    for c in sorted(cps):
        prefix = log.prefix(c)
        fit = fit_bt(prefix, ridge)
        marg = marginal_intervals(fit, alpha=alpha)
        simul = simultaneous_set(fit, alpha=alpha)
        est = estimate_win_matrix(prefix, alpha)
        snapshots.append(
            ReplaySnapshot(
                c, fit, marg, simul,
                float(interval_width_profile(est).mean()),
                float(np.median(marg.widths[1:])),
            )
        )
    return snapshots
