"""Inverse-probability-weighted win-matrix estimation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .core import BattleLog, PairKey, pair_arrays, pair_index
from .errors import InsufficientDataError


@dataclass(frozen=True)
class WinMatrixEstimate:
    """Per-pair IPW means and CLT intervals, indexed by dense pair index.

    ``theta_hat[k]`` estimates the probability that the second model of pair
    ``k`` is preferred. Unsampled pairs carry the vacuous interval ``[0, 1]``.
    """

    theta_hat: np.ndarray
    sigma_hat: np.ndarray
    n_obs: np.ndarray
    T: int
    lo: np.ndarray
    hi: np.ndarray
    alpha: float
    n_models: int
    cov: np.ndarray | None = None

    @property
    def pairs(self) -> list[PairKey]:
        first, second = pair_arrays(self.n_models)
        return [PairKey(int(a), int(b)) for a, b in zip(first, second)]

    @property
    def observed(self) -> np.ndarray:
        return self.n_obs > 0

    def entry(self, pair: PairKey) -> dict:
        k = pair_index(pair.first, pair.second, self.n_models)
        return {
            "theta_hat": float(self.theta_hat[k]),
            "sigma_hat": float(self.sigma_hat[k]),
            "n_obs": int(self.n_obs[k]),
            "lo": float(self.lo[k]),
            "hi": float(self.hi[k]),
        }


def ipw_sums(pair_idx: np.ndarray, outcome: np.ndarray, prob: np.ndarray, n_pairs: int):
    """Per-pair ``(sum X, sum X^2, count)`` with ``X = H / P``."""
    x = outcome / prob
    sx = np.bincount(pair_idx, weights=x, minlength=n_pairs)
    sx2 = np.bincount(pair_idx, weights=x * x, minlength=n_pairs)
    n = np.bincount(pair_idx, minlength=n_pairs)
    return sx, sx2, n


def normal_intervals(theta_hat, sigma_hat, n_obs, T, alpha):
    z = norm.ppf(1.0 - alpha / 2.0)
    half = z * np.sqrt(sigma_hat / T)
    lo = np.where(n_obs > 0, theta_hat - half, 0.0)
    hi = np.where(n_obs > 0, theta_hat + half, 1.0)
    return lo, hi


def estimate_win_matrix(log: BattleLog, alpha: float = 0.05, *, full_cov: bool = False) -> WinMatrixEstimate:
    """IPW estimate of the win matrix with per-entry normal intervals.

    ``theta_hat(a) = mean_t X_t(a)`` and ``sigma_hat(a) = mean_t (X_t(a) - theta_hat(a))**2``
    where the mean runs over *all* T records (``X_t(a) = 0`` off pair ``a``).
    With ``full_cov`` the full |A| x |A| covariance is attached; its
    off-diagonal entries are ``-theta_hat(a) * theta_hat(b)`` because at most
    one pair is served per round.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    T = len(log)
    if T == 0:
        raise InsufficientDataError("cannot estimate a win matrix from an empty log")
    n_pairs = log.models.n_pairs
    k = log.pair_idx
    x = log.outcome / log.sample_prob
    theta = np.bincount(k, weights=x, minlength=n_pairs) / T
    n_obs = np.bincount(k, minlength=n_pairs)
    # two-pass: on-pair squared deviations plus the (T - n) rounds where X = 0
    dev = np.bincount(k, weights=(x - theta[k]) ** 2, minlength=n_pairs)
    sigma = (dev + (T - n_obs) * theta**2) / T
    lo, hi = normal_intervals(theta, sigma, n_obs, T, alpha)
    cov = None
    if full_cov:
        cov = -np.outer(theta, theta)
        np.fill_diagonal(cov, sigma)
    return WinMatrixEstimate(theta, sigma, n_obs, T, lo, hi, alpha, log.models.n_models, cov)


def interval_width_profile(est: WinMatrixEstimate) -> np.ndarray:
    """Interval width per pair; unsampled pairs report width 1."""
    return np.where(est.n_obs > 0, est.hi - est.lo, 1.0)
