"""Sequential anomalous-voter detection.

Each vote gets a rank p-value against the historical outcomes of the same
pair; per voter the p-values are combined with Fisher's statistic and tested
at five secret checkpoints with a Bonferroni split of alpha.
"""
from __future__ import annotations

import bisect
import hashlib
import hmac
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.stats import chi2

from .core import BattleLog, PairKey

N_CHECKPOINTS = 5
HORIZON = 100

NORMAL, ANOMALOUS, PENDING = "normal", "anomalous", "pending"


class HistoryPool:
    """Per-pair sorted multisets of historical outcomes (append-only)."""

    def __init__(self):
        self._outcomes: dict[PairKey, list[float]] = defaultdict(list)

    @classmethod
    def from_log(cls, log: BattleLog) -> "HistoryPool":
        pool = cls()
        for rec in log:
            pool.add(rec.pair, rec.outcome)
        return pool

    def copy(self) -> "HistoryPool":
        other = HistoryPool()
        for pair, xs in self._outcomes.items():
            other._outcomes[pair] = list(xs)
        return other

    def add(self, pair: PairKey, outcome: float) -> None:
        if not 0.0 <= outcome <= 1.0:
            raise ValueError("outcomes must lie in [0, 1]")
        bisect.insort(self._outcomes[PairKey(*pair)], float(outcome))

    def size(self, pair: PairKey) -> int:
        return len(self._outcomes.get(PairKey(*pair), ()))

    def count_at_least(self, pair: PairKey, value: float) -> int:
        xs = self._outcomes.get(PairKey(*pair), [])
        return len(xs) - bisect.bisect_left(xs, value)

    def count_at_most(self, pair: PairKey, value: float) -> int:
        return bisect.bisect_right(self._outcomes.get(PairKey(*pair), []), value)


def exchangeability_pvalue(pool: HistoryPool, pair: PairKey, outcome: float, *, mirrored: bool = False) -> float:
    """``(1 + #{h in pool : h >= outcome}) / (|pool| + 1)``.

    ``mirrored=True`` tests the opposite tail (``h <= outcome``).
    """
    n = pool.size(pair)
    hits = pool.count_at_most(pair, outcome) if mirrored else pool.count_at_least(pair, outcome)
    return (1 + hits) / (n + 1)


def fisher_statistic(p_values: Iterable[float]) -> float:
    p = np.asarray(list(p_values), dtype=float)
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError("p-values must lie in (0, 1]")
    return float(-2.0 * np.log(p).sum())


def fisher_threshold(j: int, alpha: float, n_checkpoints: int = N_CHECKPOINTS) -> float:
    return float(chi2.ppf(1.0 - alpha / n_checkpoints, 2 * j))


def draw_checkpoints(secret_key: str | bytes, voter_key: str, n: int = N_CHECKPOINTS, horizon: int = HORIZON) -> tuple[int, ...]:
    """Keyed, reproducible choice of ``n`` distinct checkpoints in ``1..horizon``."""
    key = secret_key.encode() if isinstance(secret_key, str) else secret_key
    digest = hmac.new(key, str(voter_key).encode(), hashlib.sha256).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "big"))
    picks = rng.choice(horizon, size=n, replace=False) + 1
    return tuple(sorted(int(j) for j in picks))


@dataclass
class VoterLedger:
    voter_key: str
    checkpoints: tuple[int, ...]
    alpha: float = 0.1
    p_values: list[float] = field(default_factory=list)
    fisher_stats: dict[int, float] = field(default_factory=dict)
    verdict: str = PENDING
    first_firing: int | None = None

    def __post_init__(self):
        cps = tuple(self.checkpoints)
        if list(cps) != sorted(set(cps)):
            raise ValueError("checkpoints must be sorted and distinct")
        self.checkpoints = cps

    @property
    def horizon(self) -> int:
        return max(self.checkpoints)

    @property
    def votes_seen(self) -> int:
        return len(self.p_values)

    def record(self, p: float) -> None:
        if not 0.0 < p <= 1.0:
            raise ValueError("p-value must lie in (0, 1]")
        self.p_values.append(float(p))
        j = len(self.p_values)
        if j in self.checkpoints:
            self.fisher_stats[j] = fisher_statistic(self.p_values)

    @property
    def max_statistic(self) -> float:
        return max(self.fisher_stats.values(), default=0.0)


def evaluate_voter(ledger: VoterLedger) -> str:
    """Verdict from the checkpoints reached so far; also stored on the ledger."""
    ledger.first_firing = None
    for j in ledger.checkpoints:
        if j > ledger.votes_seen:
            break
        m_j = ledger.fisher_stats.get(j)
        if m_j is None:
            m_j = fisher_statistic(ledger.p_values[:j])
            ledger.fisher_stats[j] = m_j
        if m_j >= fisher_threshold(j, ledger.alpha, len(ledger.checkpoints)):
            ledger.first_firing = j
            ledger.verdict = ANOMALOUS
            return ANOMALOUS
    ledger.verdict = NORMAL if ledger.votes_seen >= ledger.horizon else PENDING
    return ledger.verdict


@dataclass(frozen=True)
class VoterReport:
    voter_key: str
    votes_seen: int
    checkpoints: tuple[int, ...]
    max_M: float
    first_firing_checkpoint: int | None
    verdict: str


def detect_anomalies(
    log: BattleLog,
    secret_key: str | bytes,
    alpha: float = 0.1,
    *,
    reference: HistoryPool | None = None,
    mirrored: bool = False,
    horizon: int = HORIZON,
) -> list[VoterReport]:
    """Replay ``log`` in time order and test every voter.

    Each vote is scored against the pool as it stood when the vote arrived,
    excluding that voter's own earlier votes. ``reference`` seeds the pool
    with an external population. Votes past ``horizon`` are not scored;
    records without a voter key only feed the pool.
    """
    pool = HistoryPool() if reference is None else reference.copy()
    own: dict[str, HistoryPool] = defaultdict(HistoryPool)
    ledgers: dict[str, VoterLedger] = {}
    totals: dict[str, int] = defaultdict(int)
    for rec in log:
        voter = rec.voter_key
        if voter is not None:
            ledger = ledgers.get(voter)
            if ledger is None:
                ledger = ledgers[voter] = VoterLedger(voter, draw_checkpoints(secret_key, voter, horizon=horizon), alpha)
            if ledger.votes_seen < horizon:
                mine = own[voter]
                n = pool.size(rec.pair) - mine.size(rec.pair)
                if mirrored:
                    hits = pool.count_at_most(rec.pair, rec.outcome) - mine.count_at_most(rec.pair, rec.outcome)
                else:
                    hits = pool.count_at_least(rec.pair, rec.outcome) - mine.count_at_least(rec.pair, rec.outcome)
                ledger.record((1 + hits) / (n + 1))
            totals[voter] += 1
            own[voter].add(rec.pair, rec.outcome)
        pool.add(rec.pair, rec.outcome)
    reports = []
    for voter in sorted(ledgers):
        ledger = ledgers[voter]
        verdict = evaluate_voter(ledger)
        reports.append(
            VoterReport(voter, totals[voter], ledger.checkpoints, ledger.max_statistic, ledger.first_firing, verdict)
        )
    return reports
