import io
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from arenarank.core import (
    BattleLog,
    ModelId,
    ModelRegistry,
    PairKey,
    canonicalize_pair,
    pair_arrays,
    pair_index,
    parse_log,
    serialize_log,
)
from arenarank.errors import InvalidPairError, LogParseError, SchemaError, ValidationError


def lines(*objs):
    return "".join(json.dumps(o) + "\n" for o in objs).encode()


def test_parse_maps_winner_and_canonicalizes():
    reg = ModelRegistry(["y", "x"])
    log = parse_log(io.BytesIO(lines({"model_a": "x", "model_b": "y", "winner": "model_b", "p": 0.1})), reg)
    rec = log.record(0)
    # x has index 1, y index 0, so the pair flips and so does the outcome
    assert rec.pair == PairKey(0, 1)
    assert rec.outcome == 0.0
    assert rec.sample_prob == 0.1


def test_parse_first_appearance_order():
    log = parse_log(lines({"model_a": "x", "model_b": "y", "winner": "model_b", "p": 0.1}))
    assert log.models.ids == ("x", "y")
    assert log.record(0).outcome == 1.0


def test_tie_and_both_bad():
    data = lines(
        {"model_a": "a", "model_b": "b", "winner": "tie", "p": 1},
        {"model_a": "a", "model_b": "b", "winner": "both_bad", "p": 1},
    )
    assert list(parse_log(data).outcome) == [0.5, 0.5]
    assert len(parse_log(data, both_bad="drop")) == 1


def test_malformed_line_reports_line_number():
    data = b'{"model_a": "a", "model_b": "b", "winner": "tie", "p": 1}\n{oops\n{"model_a": "a", "model_b": "b", "winner": "tie", "p": 1}\n'
    with pytest.raises(LogParseError) as exc:
        parse_log(data)
    assert exc.value.lineno == 2
    assert "line 2" in str(exc.value)


def test_unknown_model_with_closed_registry():
    with pytest.raises(SchemaError):
        parse_log(lines({"model_a": "a", "model_b": "z", "winner": "tie", "p": 1}), ModelRegistry(["a", "b"]))


@pytest.mark.parametrize("p", [0, -0.2, 1.5])
def test_bad_sample_prob(p):
    with pytest.raises(ValidationError):
        parse_log(lines({"model_a": "a", "model_b": "b", "winner": "tie", "p": p}))


def test_missing_p_defaults_to_uniform():
    with pytest.warns(UserWarning, match="sampling probability"):
        log = parse_log(lines(
            {"model_a": "a", "model_b": "b", "winner": "tie"},
            {"model_a": "a", "model_b": "c", "winner": "tie"},
        ))
    assert np.allclose(log.sample_prob, 1 / 3)


def test_canonicalize_examples():
    assert canonicalize_pair(ModelId("c", 3), ModelId("a", 1), 1.0) == (PairKey(1, 3), 0.0)
    assert canonicalize_pair(ModelId("a", 1), ModelId("c", 3), 0.5) == (PairKey(1, 3), 0.5)
    with pytest.raises(InvalidPairError):
        canonicalize_pair(ModelId("b", 2), ModelId("b", 2), 1.0)


def test_duplicate_registry_ids():
    with pytest.raises(SchemaError):
        ModelRegistry(["a", "b", "a"])


@given(st.integers(2, 30))
def test_pair_index_is_dense_order(m):
    first, second = pair_arrays(m)
    assert np.array_equal(pair_index(first, second, m), np.arange(len(first)))


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4), st.sampled_from([0.0, 0.5, 1.0]),
                          st.floats(0.01, 1.0)), min_size=1, max_size=30))
def test_serialize_roundtrip(rows):
    rows = [r for r in rows if r[0] != r[1]]
    if not rows:
        return
    reg = ModelRegistry([f"m{k}" for k in range(5)])
    winners = {1.0: "model_b", 0.0: "model_a", 0.5: "tie"}
    text = lines(*[{"model_a": f"m{a}", "model_b": f"m{b}", "winner": winners[h], "p": p, "user": "u"}
                   for a, b, h, p in rows])
    log = parse_log(text, reg)
    again = parse_log(serialize_log(log), reg)
    assert log == again


def test_log_is_immutable():
    log = parse_log(lines({"model_a": "a", "model_b": "b", "winner": "tie", "p": 1}))
    with pytest.raises(ValueError):
        log.outcome[0] = 1.0


def test_prefix_and_battles_per_model():
    data = lines(*[{"model_a": "a", "model_b": "b", "winner": "tie", "p": 1}] * 3,
                 {"model_a": "b", "model_b": "c", "winner": "tie", "p": 1})
    log = parse_log(data)
    assert len(log.prefix(2)) == 2
    assert list(log.battles_per_model()) == [3, 4, 1]
    assert isinstance(BattleLog.empty(log.models), BattleLog)
