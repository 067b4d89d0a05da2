import json
import subprocess
import sys

import numpy as np
import pytest

from arenarank.cli import build_parser, dispatch
from arenarank.core import serialize_log
from arenarank.sim import draw_coefficients, synthesize_battles


@pytest.fixture
def log_path(tmp_path):
    xi = draw_coefficients(5, 2.0, 2.0, seed=0)
    log = synthesize_battles(xi, 3000, seed=0)
    # attach voters so detect has work to do
    text = serialize_log(log).splitlines()
    lines = []
    for t, line in enumerate(text):
        obj = json.loads(line)
        obj["user"] = f"u{t % 20}"
        lines.append(json.dumps(obj))
    path = tmp_path / "log.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def run(tmp_path, *argv):
    return dispatch([*map(str, argv), "--out-dir", str(tmp_path / "out"), "--seed", "7"])


def test_rank_writes_leaderboard_and_manifest(tmp_path, log_path):
    assert run(tmp_path, "rank", "--alpha", "0.05", "--interval", "sandwich", log_path) == 0
    board = json.loads((tmp_path / "out" / "leaderboard.json").read_text())
    assert {"model", "xi", "lo", "hi", "rank_lower", "rank_upper", "n_battles"} <= set(board[0])
    manifest = json.loads((tmp_path / "out" / "rank_manifest.json").read_text())
    assert manifest["seed"] == 7
    assert manifest["config"]["ridge"] == 1e-6
    assert len(manifest["inputs"][str(log_path)]) == 64
    plot = (tmp_path / "out" / "intervals_plot.csv").read_text().splitlines()
    assert plot[0] == "x,series,y,y_lo,y_hi"


@pytest.mark.parametrize("argv", [
    ["rank", "--method", "npbt"],
    ["rank", "--interval", "bootstrap", "--boot-reps", "100", "--multiplicity", "none"],
    ["winmatrix"],
    ["winmatrix", "--format", "json"],
    ["sample-plan", "-k", "4"],
    ["detect", "--secret-key", "k"],
    ["replay", "--checkpoints", "1000,3000"],
])
def test_subcommands_succeed(tmp_path, log_path, argv):
    assert run(tmp_path, *argv, log_path) == 0


def test_winmatrix_columns(tmp_path, log_path):
    run(tmp_path, "winmatrix", log_path)
    header = (tmp_path / "out" / "winmatrix.csv").read_text().splitlines()[0]
    assert header == "pair_first,pair_second,theta_hat,sigma_hat,n_obs,lo,hi"


def test_missing_file_exit_1_no_outputs(tmp_path):
    assert run(tmp_path, "rank", tmp_path / "missing.jsonl") == 1
    assert not (tmp_path / "out").exists()


def test_unknown_subcommand(capsys):
    assert dispatch(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_separation_without_ridge_exit_2(tmp_path):
    path = tmp_path / "sep.jsonl"
    path.write_text('{"model_a": "a", "model_b": "b", "winner": "model_b", "p": 1}\n' * 3)
    assert run(tmp_path, "rank", "--ridge", "0", path) == 2
    assert not (tmp_path / "out").exists()


def test_detect_requires_key(tmp_path, log_path):
    assert run(tmp_path, "detect", log_path) == 1


def test_manifest_hides_secret(tmp_path, log_path):
    run(tmp_path, "detect", "--secret-key", "hunter2", log_path)
    assert "hunter2" not in (tmp_path / "out" / "detect_manifest.json").read_text()


def test_config_file_and_override(tmp_path, log_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("alpha = 0.2\nboth_bad = drop\n")
    assert run(tmp_path, "winmatrix", "--config", cfg, log_path) == 0
    m = json.loads((tmp_path / "out" / "winmatrix_manifest.json").read_text())
    assert m["config"]["alpha"] == 0.2 and m["config"]["both_bad"] == "drop"
    assert run(tmp_path, "winmatrix", "--config", cfg, "--alpha", "0.01", log_path) == 0
    m = json.loads((tmp_path / "out" / "winmatrix_manifest.json").read_text())
    assert m["config"]["alpha"] == 0.01
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert run(tmp_path, "winmatrix", "--config", cfg, log_path) == 1


def test_seed_drawn_and_recorded(tmp_path, log_path):
    assert dispatch(["sample-plan", str(log_path), "--out-dir", str(tmp_path)]) == 0
    seed = json.loads((tmp_path / "sample-plan_manifest.json").read_text())["seed"]
    assert isinstance(seed, int)


def test_simulate_coverage_twice_identical(tmp_path):
    argv = ["simulate", "coverage", "--m", "5", "--gamma", "2", "--trials", "10", "-T", "2000", "--seed", "7"]
    outs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        assert dispatch(argv + ["--out-dir", str(d)]) == 0
        outs.append({p.name: p.read_bytes() for p in d.iterdir()})
    assert outs[0] == outs[1]


def test_help_lists_every_flag_with_default():
    _, leaves = build_parser()
    for name, leaf in leaves.items():
        text = leaf.format_help()
        options = [a for a in leaf._actions if a.option_strings and a.dest != "help"]
        for action in options:
            assert action.help, (name, action.dest)
            assert action.option_strings[-1] in text
        assert text.count("(default:") == len(options), name


def test_help_via_subprocess():
    out = subprocess.run([sys.executable, "-m", "arenarank.cli", "simulate", "efficiency", "--help"],
                         capture_output=True, text=True, check=True).stdout
    out = " ".join(out.split())
    assert "--target-width" in out and "(default: 0.2)" in out
