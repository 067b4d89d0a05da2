"""Active pair selection targeting win-matrix interval width."""
from __future__ import annotations

import numpy as np

from .core import BattleLog, BattleRecord, PairKey, pair_arrays, pair_index

DEFAULT_FLOOR = 0.05
WARMUP_OBS = 2


def pair_probabilities(sigma_diag, n_obs, floor_delta: float = DEFAULT_FLOOR) -> np.ndarray:
    """Sampling distribution over pairs.

    Raw weight ``sqrt(sigma / n) - sqrt(sigma / (n + 1))`` is the expected
    shrinkage of a pair's interval from one more observation; the result
    mixes the normalized weights with a uniform floor of total mass
    ``floor_delta``. All-zero weights give the uniform distribution.
    """
    sigma = np.asarray(sigma_diag, dtype=float)
    n = np.asarray(n_obs, dtype=float)
    if not 0.0 <= floor_delta <= 1.0:
        raise ValueError("floor_delta must lie in [0, 1]")
    k = len(sigma)
    root = np.sqrt(np.clip(sigma, 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        w = root / np.sqrt(n) - root / np.sqrt(n + 1.0)
    w = np.where(np.isfinite(w) & (w > 0), w, 0.0)
    total = w.sum()
    if total <= 0:
        return np.full(k, 1.0 / k)
    return (1.0 - floor_delta) * w / total + floor_delta / k


class ActiveSampler:
    """Streaming sampler state.

    Keeps per-pair ``sum X``, ``sum X^2`` (``X = H / P``) and counts so the
    win-matrix covariance diagonal is available after every update. Until
    every pair has ``WARMUP_OBS`` observations, pairs are drawn uniformly.
    """

    def __init__(self, n_models: int, floor_delta: float = DEFAULT_FLOOR, seed=None, warmup_obs: int = WARMUP_OBS):
        if not 0.0 <= floor_delta <= 1.0:
            raise ValueError("floor_delta must lie in [0, 1]")
        self.n_models = n_models
        self.n_pairs = n_models * (n_models - 1) // 2
        if self.n_pairs < 1:
            raise ValueError("need at least two models")
        self.floor_delta = floor_delta
        self.warmup_obs = warmup_obs
        self.rng = np.random.default_rng(seed)
        self.sum_x = np.zeros(self.n_pairs)
        self.sum_x2 = np.zeros(self.n_pairs)
        self.n_obs = np.zeros(self.n_pairs, dtype=np.int64)
        self.T = 0
        self._first, self._second = pair_arrays(n_models)

    @classmethod
    def from_log(cls, log: BattleLog, floor_delta: float = DEFAULT_FLOOR, seed=None) -> "ActiveSampler":
        s = cls(log.models.n_models, floor_delta, seed)
        k = log.pair_idx
        x = log.outcome / log.sample_prob
        s.sum_x += np.bincount(k, x, s.n_pairs)
        s.sum_x2 += np.bincount(k, x * x, s.n_pairs)
        s.n_obs += np.bincount(k, minlength=s.n_pairs)
        s.T = len(log)
        return s

    @property
    def sigma_diag(self) -> np.ndarray:
        if self.T == 0:
            return np.zeros(self.n_pairs)
        mean = self.sum_x / self.T
        return np.clip(self.sum_x2 / self.T - mean * mean, 0.0, None)

    @property
    def theta_hat(self) -> np.ndarray:
        return self.sum_x / max(self.T, 1)

    @property
    def in_warmup(self) -> bool:
        return bool(self.n_obs.min() < self.warmup_obs)

    def probabilities(self) -> np.ndarray:
        if self.in_warmup:
            return np.full(self.n_pairs, 1.0 / self.n_pairs)
        return pair_probabilities(self.sigma_diag, self.n_obs, self.floor_delta)

    def draw_index(self) -> tuple[int, float]:
        u = self.rng.random()
        if self.in_warmup:
            # same mapping as vectorized uniform sampling, so paired runs coincide
            return min(int(u * self.n_pairs), self.n_pairs - 1), 1.0 / self.n_pairs
        p = self.probabilities()
        k = int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"))
        k = min(k, self.n_pairs - 1)
        return k, float(p[k])

    def draw(self) -> tuple[PairKey, float]:
        """Draw the next pair; returns it with the exact probability it was drawn with."""
        k, p = self.draw_index()
        return PairKey(int(self._first[k]), int(self._second[k])), p

    def observe(self, k: int, outcome: float, prob: float) -> None:
        x = outcome / prob
        self.sum_x[k] += x
        self.sum_x2[k] += x * x
        self.n_obs[k] += 1
        self.T += 1

    def update(self, record: BattleRecord) -> "ActiveSampler":
        k = pair_index(record.pair.first, record.pair.second, self.n_models)
        self.observe(k, record.outcome, record.sample_prob)
        return self
