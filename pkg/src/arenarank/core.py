"""Battle-log types, parsing and the canonical pair index.

A battle is stored in canonical orientation: ``pair.first < pair.second`` and
``outcome == 1`` means the human preferred ``pair.second``.
"""
from __future__ import annotations

import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import InvalidPairError, LogParseError, SchemaError, ValidationError

logger = logging.getLogger(__name__)

WINNER_OUTCOMES = {"model_b": 1.0, "model_a": 0.0, "tie": 0.5, "both_bad": 0.5}


@dataclass(frozen=True)
class ModelId:
    id: str
    index: int


class PairKey(NamedTuple):
    first: int
    second: int


class ModelRegistry:
    """Bijection between model id strings and dense indices ``0..M-1``.

    Index 0 is the anchor model for Bradley-Terry fits.
    """

    def __init__(self, ids: Iterable[str]):
        ids = tuple(str(i) for i in ids)
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise SchemaError(f"duplicate model ids in registry: {dupes}")
        self._ids = ids
        self._index = {m: k for k, m in enumerate(ids)}

    @classmethod
    def from_json(cls, fp: IO[str] | str) -> "ModelRegistry":
        data = json.loads(fp) if isinstance(fp, str) else json.load(fp)
        if not isinstance(data, list) or not all(isinstance(x, str) for x in data):
            raise SchemaError("model registry must be a JSON array of strings")
        return cls(data)

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def n_models(self) -> int:
        return len(self._ids)

    @property
    def n_pairs(self) -> int:
        m = len(self._ids)
        return m * (m - 1) // 2

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, model_id: str) -> bool:
        return model_id in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ModelRegistry) and self._ids == other._ids

    def __repr__(self) -> str:
        return f"ModelRegistry({list(self._ids)!r})"

    def __getitem__(self, model_id: str) -> ModelId:
        try:
            return ModelId(model_id, self._index[model_id])
        except KeyError:
            raise SchemaError(f"unknown model id {model_id!r}") from None

    def model(self, index: int) -> ModelId:
        return ModelId(self._ids[index], index)

    def pairs(self) -> list[PairKey]:
        """All canonical pairs in dense-index order."""
        first, second = pair_arrays(len(self._ids))
        return [PairKey(int(a), int(b)) for a, b in zip(first, second)]

    def pair_label(self, pair: PairKey) -> tuple[str, str]:
        return self._ids[pair.first], self._ids[pair.second]


def pair_arrays(n_models: int) -> tuple[np.ndarray, np.ndarray]:
    """``(first, second)`` index arrays of every canonical pair, in dense order."""
    return np.triu_indices(n_models, 1)


def pair_index(first, second, n_models: int):
    """Dense index of canonical pair(s) ``(first, second)``; vectorized."""
    first = np.asarray(first)
    second = np.asarray(second)
    idx = first * (2 * n_models - first - 1) // 2 + (second - first - 1)
    return int(idx) if idx.ndim == 0 else idx


def canonicalize_pair(a: ModelId, b: ModelId, outcome: float) -> tuple[PairKey, float]:
    """Orient ``(a, b)`` so the lower index comes first, flipping the outcome if needed."""
    if a.index == b.index:
        raise InvalidPairError(f"self-pair is not a comparison: {a.id!r}")
    if a.index < b.index:
        return PairKey(a.index, b.index), outcome
    return PairKey(b.index, a.index), 1.0 - outcome


@dataclass(frozen=True)
class BattleRecord:
    time_index: int
    pair: PairKey
    outcome: float
    sample_prob: float
    voter_key: str | None = None
    timestamp: str | None = None


@dataclass(frozen=True, eq=False)
class BattleLog:
    """Columnar, immutable battle log.

    Records are held as parallel arrays so estimators can work on the whole
    log at once; :attr:`records` materializes :class:`BattleRecord` objects.
    """

    models: ModelRegistry
    first: np.ndarray
    second: np.ndarray
    outcome: np.ndarray
    sample_prob: np.ndarray
    time_index: np.ndarray
    voter: tuple = field(default=())
    timestamp: tuple = field(default=())

    def __post_init__(self):
        n = len(self.first)
        cols = {
            "first": np.asarray(self.first, dtype=np.int64),
            "second": np.asarray(self.second, dtype=np.int64),
            "outcome": np.asarray(self.outcome, dtype=float),
            "sample_prob": np.asarray(self.sample_prob, dtype=float),
            "time_index": np.asarray(self.time_index, dtype=np.int64),
        }
        for name, arr in cols.items():
            if arr.shape != (n,):
                raise ValidationError(f"column {name!r} has shape {arr.shape}, expected ({n},)")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        voter = tuple(self.voter) if len(self.voter) else (None,) * n
        timestamp = tuple(self.timestamp) if len(self.timestamp) else (None,) * n
        if len(voter) != n or len(timestamp) != n:
            raise ValidationError("voter/timestamp columns do not match record count")
        object.__setattr__(self, "voter", voter)
        object.__setattr__(self, "timestamp", timestamp)
        self._validate()

    def _validate(self):
        m = self.models.n_models
        if len(self.first) == 0:
            return
        if np.any(self.first >= self.second):
            raise ValidationError("pairs must be canonical (first < second)")
        if self.first.min() < 0 or self.second.max() >= m:
            raise SchemaError("pair references a model outside the registry")
        if np.any(~(self.sample_prob > 0)) or np.any(self.sample_prob > 1):
            bad = int(np.flatnonzero(~((self.sample_prob > 0) & (self.sample_prob <= 1)))[0])
            raise ValidationError(f"sample_prob must lie in (0, 1]; record {bad} has {self.sample_prob[bad]}")
        if np.any(~((self.outcome >= 0) & (self.outcome <= 1))):
            raise ValidationError("outcomes must lie in [0, 1]")
        if np.any(np.diff(self.time_index) <= 0):
            raise ValidationError("time_index must be strictly increasing")

    @classmethod
    def empty(cls, models: ModelRegistry) -> "BattleLog":
        z = np.zeros(0)
        return cls(models, z, z, z, z, z)

    @classmethod
    def from_records(cls, models: ModelRegistry, records: Sequence[BattleRecord]) -> "BattleLog":
        return cls(
            models,
            first=[r.pair.first for r in records],
            second=[r.pair.second for r in records],
            outcome=[r.outcome for r in records],
            sample_prob=[r.sample_prob for r in records],
            time_index=[r.time_index for r in records],
            voter=tuple(r.voter_key for r in records),
            timestamp=tuple(r.timestamp for r in records),
        )

    def __len__(self) -> int:
        return len(self.first)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BattleLog):
            return NotImplemented
        return (
            self.models == other.models
            and all(
                np.array_equal(getattr(self, c), getattr(other, c))
                for c in ("first", "second", "outcome", "sample_prob", "time_index")
            )
            and self.voter == other.voter
            and self.timestamp == other.timestamp
        )

    def __iter__(self) -> Iterator[BattleRecord]:
        for k in range(len(self)):
            yield self.record(k)

    def record(self, k: int) -> BattleRecord:
        return BattleRecord(
            time_index=int(self.time_index[k]),
            pair=PairKey(int(self.first[k]), int(self.second[k])),
            outcome=float(self.outcome[k]),
            sample_prob=float(self.sample_prob[k]),
            voter_key=self.voter[k],
            timestamp=self.timestamp[k],
        )

    @property
    def records(self) -> list[BattleRecord]:
        return list(self)

    @property
    def pair_idx(self) -> np.ndarray:
        return pair_index(self.first, self.second, self.models.n_models)

    def take(self, idx) -> "BattleLog":
        """Sub-log of the records at ``idx`` (must keep time order)."""
        idx = np.asarray(idx, dtype=np.int64)
        return BattleLog(
            self.models,
            self.first[idx],
            self.second[idx],
            self.outcome[idx],
            self.sample_prob[idx],
            self.time_index[idx],
            tuple(self.voter[i] for i in idx),
            tuple(self.timestamp[i] for i in idx),
        )

    def prefix(self, n: int) -> "BattleLog":
        return self.take(np.arange(min(n, len(self))))

    def battles_per_model(self) -> np.ndarray:
        m = self.models.n_models
        return np.bincount(self.first, minlength=m) + np.bincount(self.second, minlength=m)


def _outcome_from_line(obj: dict, lineno: int, both_bad: str) -> float | None:
    if "winner" in obj and obj["winner"] is not None:
        winner = obj["winner"]
        if winner not in WINNER_OUTCOMES:
            raise LogParseError(f"unknown winner {winner!r}", lineno)
        if winner == "both_bad" and both_bad == "drop":
            return None
        return WINNER_OUTCOMES[winner]
    if "outcome" in obj:
        try:
            value = float(obj["outcome"])
        except (TypeError, ValueError):
            raise LogParseError("outcome must be a number", lineno) from None
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f"line {lineno}: outcome {value} outside [0, 1]")
        return value
    raise LogParseError("missing 'winner' field", lineno)


def parse_log(
    stream: IO[bytes] | IO[str] | bytes | str,
    registry: ModelRegistry | None = None,
    *,
    both_bad: str = "tie",
) -> BattleLog:
    """Parse a JSON-lines battle log.

    Args:
        stream: binary or text stream (or raw content) of UTF-8 JSON lines.
        registry: closed model registry. When omitted, indices are assigned
            in order of first appearance.
        both_bad: ``"tie"`` maps "both_bad" votes to 0.5, ``"drop"`` skips them.

    Raises:
        LogParseError: malformed line (carries the 1-based line number).
        SchemaError: unknown model id with a closed registry.
        ValidationError: non-positive sampling probability and similar.
    """
    if both_bad not in ("tie", "drop"):
        raise ValueError("both_bad must be 'tie' or 'drop'")
    if isinstance(stream, (bytes, str)):
        stream = io.BytesIO(stream.encode("utf-8") if isinstance(stream, str) else stream)

    ids: list[str] = list(registry.ids) if registry is not None else []
    index = {m: k for k, m in enumerate(ids)}
    rows = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LogParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict):
            raise LogParseError("expected a JSON object", lineno)
        try:
            a, b = str(obj["model_a"]), str(obj["model_b"])
        except KeyError as exc:
            raise LogParseError(f"missing field {exc.args[0]!r}", lineno) from None
        for name in (a, b):
            if name not in index:
                if registry is not None:
                    raise SchemaError(f"line {lineno}: unknown model id {name!r}")
                index[name] = len(ids)
                ids.append(name)
        if a == b:
            raise InvalidPairError(f"line {lineno}: self-pair {a!r}")
        outcome = _outcome_from_line(obj, lineno, both_bad)
        if outcome is None:
            continue
        p = obj.get("p")
        if p is not None:
            try:
                p = float(p)
            except (TypeError, ValueError):
                raise LogParseError("p must be a number", lineno) from None
            if not 0.0 < p <= 1.0:
                raise ValidationError(f"line {lineno}: sample_prob must lie in (0, 1], got {p}")
        user = obj.get("user")
        rows.append((index[a], index[b], outcome, p, None if user is None else str(user), obj.get("ts")))

    models = registry if registry is not None else ModelRegistry(ids)
    n = len(rows)
    first = np.empty(n, dtype=np.int64)
    second = np.empty(n, dtype=np.int64)
    outcome = np.empty(n)
    prob = np.empty(n)
    missing_p = 0
    default_p = 1.0 / models.n_pairs if models.n_pairs else 1.0
    for k, (ia, ib, h, p, _, _) in enumerate(rows):
        pair, h = canonicalize_pair(ModelId("", ia), ModelId("", ib), h)
        first[k], second[k], outcome[k] = pair.first, pair.second, h
        if p is None:
            missing_p += 1
            p = default_p
        prob[k] = p
    if missing_p:
        warnings.warn(
            f"{missing_p} record(s) lack a sampling probability; using uniform 1/{models.n_pairs}",
            stacklevel=2,
        )
    return BattleLog(
        models,
        first,
        second,
        outcome,
        prob,
        np.arange(n, dtype=np.int64),
        tuple(r[4] for r in rows),
        tuple(r[5] for r in rows),
    )


def serialize_log(log: BattleLog) -> str:
    """Render ``log`` back to JSON lines in canonical orientation."""
    reverse = {v: k for k, v in WINNER_OUTCOMES.items() if k != "both_bad"}
    ids = log.models.ids
    lines = []
    for rec in log:
        obj: dict = {}
        if rec.timestamp is not None:
            obj["ts"] = rec.timestamp
        obj["model_a"] = ids[rec.pair.first]
        obj["model_b"] = ids[rec.pair.second]
        if rec.outcome in reverse:
            obj["winner"] = reverse[rec.outcome]
        else:
            obj["outcome"] = rec.outcome
        obj["p"] = rec.sample_prob
        if rec.voter_key is not None:
            obj["user"] = rec.voter_key
        lines.append(json.dumps(obj))
    return "".join(line + "\n" for line in lines)
