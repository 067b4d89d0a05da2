"""Pairwise-preference ranking: IPW win matrices, Bradley-Terry leaderboards
with robust intervals, active pair sampling and voter anomaly detection."""

__version__ = "0.1.0"

from .bt import (
    BtFit,
    RankingReport,
    ScoreIntervals,
    approximate_ranks,
    bootstrap_intervals,
    fit_bt,
    marginal_intervals,
    sandwich_covariance,
    simultaneous_set,
)
from .core import BattleLog, BattleRecord, ModelRegistry, PairKey, canonicalize_pair, parse_log, serialize_log
from .errors import InputError, NonIdentifiableError, StatisticalError
from .np_bt import FullWinMatrix, np_bt_gradient, np_bt_score
from .sampler import ActiveSampler, pair_probabilities
from .anomaly import detect_anomalies, exchangeability_pvalue, fisher_statistic, fisher_threshold
from .win_matrix import WinMatrixEstimate, estimate_win_matrix

__all__ = [
    "ActiveSampler",
    "BattleLog",
    "BattleRecord",
    "BtFit",
    "FullWinMatrix",
    "InputError",
    "ModelRegistry",
    "NonIdentifiableError",
    "PairKey",
    "RankingReport",
    "ScoreIntervals",
    "StatisticalError",
    "WinMatrixEstimate",
    "approximate_ranks",
    "bootstrap_intervals",
    "canonicalize_pair",
    "detect_anomalies",
    "estimate_win_matrix",
    "exchangeability_pvalue",
    "fisher_statistic",
    "fisher_threshold",
    "fit_bt",
    "marginal_intervals",
    "np_bt_gradient",
    "np_bt_score",
    "pair_probabilities",
    "parse_log",
    "sandwich_covariance",
    "serialize_log",
    "simultaneous_set",
]
