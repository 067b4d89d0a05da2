"""Nonparametric Bradley-Terry score: averaged log-odds along model chains.

For a full win matrix ``theta[i, j]`` (probability that model ``j`` is
preferred to model ``i``; ``theta[j, i] = 1 - theta[i, j]``, diagonal 1/2)
the score of model ``m`` averages, over every chain of pairings that visits
all models once and ends at ``m``, the anchor log-odds of the chain's first
model plus the log-odds along each link. The average collapses to

    s_m = 1/(M-1) * sum_{m' != m} [ logit theta[m', m] + logit theta[0, m'] ]

which equals ``xi_m - xi_0`` whenever ``theta`` comes from BT coefficients.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logit

from .core import pair_arrays
from .errors import ValidationError

CLAMP = 1e-9
FORMS = ("log", "literal")


@dataclass(frozen=True)
class FullWinMatrix:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
            raise ValidationError("win matrix must be square")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def M(self) -> int:
        return self.theta.shape[0]

    @classmethod
    def from_pairs(cls, values, n_models: int) -> "FullWinMatrix":
        """Build from canonical-pair entries (dense pair order), applying the
        ``theta[j, i] = 1 - theta[i, j]`` and diagonal-1/2 conventions."""
        values = np.asarray(values, dtype=float)
        first, second = pair_arrays(n_models)
        theta = np.full((n_models, n_models), 0.5)
        theta[first, second] = values
        theta[second, first] = 1.0 - values
        return cls(theta)

    @classmethod
    def from_coefficients(cls, xi) -> "FullWinMatrix":
        """Logistic win matrix ``theta[i, j] = e^xi_j / (e^xi_i + e^xi_j)``."""
        xi = np.asarray(xi, dtype=float)
        return cls(1.0 / (1.0 + np.exp(xi[:, None] - xi[None, :])))

    def upper(self) -> np.ndarray:
        first, second = pair_arrays(self.M)
        return self.theta[first, second]


@dataclass(frozen=True)
class NpBtScore:
    s: np.ndarray
    gradient: np.ndarray | None = None  # shape (M, n_pairs)


def _clamped_upper(w: FullWinMatrix) -> np.ndarray:
    vals = w.upper()
    if np.isnan(vals).any() or np.isnan(w.theta).any():
        raise ValidationError("win matrix contains NaN")
    bad = (vals < CLAMP) | (vals > 1.0 - CLAMP)
    if bad.any():
        warnings.warn(f"clamping {int(bad.sum())} win-matrix entries into [{CLAMP}, 1 - {CLAMP}]", stacklevel=3)
        vals = np.clip(vals, CLAMP, 1.0 - CLAMP)
    return vals


def np_bt_score(w: FullWinMatrix, *, form: str = "log", gradient: bool = False) -> NpBtScore:
    """Closed-form nonparametric BT score.

    ``form="log"`` (default) is the chain average above. ``form="literal"``
    reproduces the unnormalized variant in which the anchor term enters as
    plain odds ``theta / (1 - theta)`` rather than log-odds; it does not
    recover BT coefficients and is kept only for comparison.
    """
    if form not in FORMS:
        raise ValueError(f"form must be one of {FORMS}")
    M = w.M
    vals = _clamped_upper(w)
    full = FullWinMatrix.from_pairs(vals, M).theta
    L = logit(full)
    np.fill_diagonal(L, 0.0)
    link = L.sum(axis=0)  # sum_{m'} logit theta[m', m]
    if form == "log":
        anchor = L[0]
        s = (link + anchor.sum() - anchor) / (M - 1)
    else:
        odds = full[0] / (1.0 - full[0])  # odds theta[0, 0] = 1 by the diagonal convention
        s = link + odds.sum() - odds
    grad = np_bt_gradient(w, form=form, _vals=vals) if gradient else None
    return NpBtScore(s, grad)


def np_bt_gradient(w: FullWinMatrix, *, form: str = "log", _vals=None) -> np.ndarray:
    """Jacobian ``d s_m / d theta(a)`` over canonical pairs ``a``, shape ``(M, |A|)``.

    For the log form, with ``a = (i, j)``, ``i < j``:
    ``(1{j = m} - 1{i = m} + 1{i = 0, j != m}) / (theta(a) (1 - theta(a))) / (M - 1)``.
    """
    if form not in FORMS:
        raise ValueError(f"form must be one of {FORMS}")
    M = w.M
    vals = _clamped_upper(w) if _vals is None else _vals
    first, second = pair_arrays(M)
    m = np.arange(M)[:, None]
    dlogit = 1.0 / (vals * (1.0 - vals))
    link = ((second == m).astype(float) - (first == m)) * dlogit
    anchor_pair = (first == 0) & (second != m)
    if form == "log":
        return (link + anchor_pair * dlogit) / (M - 1)
    return link + anchor_pair / (1.0 - vals) ** 2


def chain_average_score(w: FullWinMatrix, max_models: int = 6) -> np.ndarray:
    """Score by explicit enumeration of every chain ending at each model.

    A chain to ``m`` is an ordering of the other ``M - 1`` models followed by
    ``m``; its value is ``logit theta[0, g_1]`` plus the log-odds of every
    link. Factorial cost, so limited to small ``M``; used to check the
    closed form.
    """
    M = w.M
    if M > max_models:
        raise ValueError(f"chain enumeration is limited to M <= {max_models}")
    L = logit(FullWinMatrix.from_pairs(w.upper(), M).theta)
    np.fill_diagonal(L, 0.0)
    s = np.zeros(M)
    for m in range(M):
        others = [k for k in range(M) if k != m]
        total, count = 0.0, 0
        for order in itertools.permutations(others):
            chain = list(order) + [m]
            total += L[0, chain[0]] + sum(L[a, b] for a, b in zip(chain, chain[1:]))
            count += 1
        s[m] = total / count
    return s


def delta_method_sd(score: NpBtScore, sigma_hat: np.ndarray, T: int) -> np.ndarray:
    """Approximate standard deviation of each score from the win-matrix
    covariance diagonal, ``sqrt(sum_a grad^2 * sigma_aa / T)``."""
    if score.gradient is None:
        raise ValueError("score was computed without gradient")
    return np.sqrt((score.gradient**2 * sigma_hat[None, :]).sum(axis=1) / T)
