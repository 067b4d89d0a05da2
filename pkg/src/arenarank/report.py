"""Leaderboard assembly and deterministic, atomic output writing."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .bt import BtFit, RankingReport, ScoreIntervals

PLOT_COLUMNS = ("x", "series", "y", "y_lo", "y_hi")
LEADERBOARD_COLUMNS = ("model", "xi", "xi_centered", "lo", "hi", "rank_lower", "rank_upper", "n_battles")


def _plain(value):
    """JSON/CSV-safe scalar: numpy types to Python, non-finite floats to None."""
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if np.isfinite(value) else None
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    return value


def leaderboard(intervals: ScoreIntervals, ranks: RankingReport, n_battles: Sequence[int]) -> list[dict]:
    """Rows sorted best-first; ``xi_centered`` recenters scores to mean 0 for display."""
    est = np.asarray(intervals.estimate)
    center = est.mean()
    rows = []
    for k, rank in enumerate(ranks.rows):
        rows.append(
            {
                "model": rank.model,
                "xi": float(est[k]),
                "xi_centered": float(est[k] - center),
                "lo": float(intervals.lo[k]),
                "hi": float(intervals.hi[k]),
                "rank_lower": rank.rank_lower,
                "rank_upper": rank.rank_upper,
                "n_battles": int(n_battles[k]),
            }
        )
    rows.sort(key=lambda r: (-r["xi"], r["model"]))
    return rows


def interval_plot_rows(series: Iterable[ScoreIntervals], names: Iterable[str]) -> list[tuple]:
    rows = []
    for name, iv in zip(names, series):
        for model, y, lo, hi in zip(iv.models, iv.estimate, iv.lo, iv.hi):
            rows.append((model, name, y, lo, hi))
    return rows


def _fmt(value) -> str:
    value = _plain(value)
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_csv(columns: Sequence[str], rows: Iterable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        if isinstance(row, dict):
            row = [row.get(c) for c in columns]
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def to_json(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=False) + "\n"


def fit_summary(fit: BtFit) -> dict:
    return {
        "models": list(fit.models),
        "dropped": list(fit.dropped),
        "xi": fit.xi,
        "ridge": fit.ridge,
        "iterations": fit.iterations,
        "grad_norm": fit.grad_norm,
        "converged": fit.converged,
        "T": fit.T,
    }


def write_atomic(outputs: dict[Path, str]) -> list[Path]:
    """Write every ``path -> text`` pair, or none of them.

    All contents go to temporary files in the destination directories first;
    they are renamed into place only once every write succeeded.
    """
    staged = []
    try:
        for path, text in outputs.items():
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            staged.append((tmp, path))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, path in staged:
        os.replace(tmp, path)
    return [p for _, p in staged]
