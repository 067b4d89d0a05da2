"""Acceptance checks, one test per criterion, each printing a PASS/FAIL line."""
import itertools
import json
import time

import numpy as np

from arenarank.anomaly import HistoryPool, detect_anomalies, exchangeability_pvalue
from arenarank.bt import PairStats, bootstrap_intervals, bt_gradient, bt_objective, fit_bt, marginal_intervals
from arenarank.cli import dispatch
from arenarank.core import BattleLog, ModelRegistry, PairKey, pair_arrays, serialize_log
from arenarank.np_bt import FullWinMatrix, np_bt_gradient, np_bt_score
from arenarank.sim import (
    SimConfig,
    draw_coefficients,
    run_coverage_experiment,
    run_efficiency_experiment,
    synthesize_battles,
)
from conftest import make_log, report_criterion


def test_criterion_1_two_model_closed_form(two_model_log):
    start = time.perf_counter()
    fit = fit_bt(two_model_log, ridge=0.0)
    elapsed = time.perf_counter() - start
    err = abs(fit.xi[1] - np.log(3))
    ok = report_criterion(1, err < 1e-6 and elapsed < 1.0, f"|xi - ln 3| = {err:.2e}, {elapsed * 1e3:.1f} ms")
    assert ok


def test_criterion_2_coverage():
    s = run_coverage_experiment(SimConfig(M=10, gamma=2.0, scale=4.0, T=20_000, trials=200, alpha=0.05, seed=2024))
    ok = 0.91 <= s.coverage <= 0.985 and s.rank_violation_rate <= 0.08
    report_criterion(2, ok, f"coverage {s.coverage:.4f} in [0.91, 0.985], rank violations {s.rank_violation_rate:.3f} <= 0.08")
    assert ok


def test_criterion_3_width_grows_with_models():
    widths = {}
    for M in (5, 20):
        widths[M] = run_coverage_experiment(SimConfig(M=M, T=20_000, trials=20, seed=3)).width
    ok = widths[20] > widths[5]
    report_criterion(3, ok, f"mean width M=20 {widths[20]:.4f} > M=5 {widths[5]:.4f}")
    assert ok


def test_criterion_4_bootstrap_vs_sandwich():
    xi = draw_coefficients(10, 2.0, 4.0, seed=4)
    log = synthesize_battles(xi, 100_000, seed=4)
    fit = fit_bt(log)
    sand = marginal_intervals(fit).widths[1:]
    boot = bootstrap_intervals(log, B=1000, seed=4, fit=fit).widths[1:]
    rel = np.abs(boot - sand) / sand
    cov = run_coverage_experiment(SimConfig(M=10, T=2000, trials=100, seed=44, bootstrap=True, boot_reps=200))
    ok = rel.max() <= 0.15 and cov.coverage >= 0.90 and cov.bootstrap_coverage >= 0.90
    report_criterion(
        4, ok,
        f"max relative width gap {rel.max():.3f} <= 0.15 at T=100k; coverage at T=2k "
        f"sandwich {cov.coverage:.3f}, bootstrap {cov.bootstrap_coverage:.3f} (>= 0.90)",
    )
    assert ok


def test_criterion_5_adaptive_efficiency():
    # the uniform curve needs ~30k battles to reach width 0.2 at M = 20, so run to 40k
    cfg = SimConfig(M=20, T=40_000, trials=20, seed=5, scale=4.0, floor_delta=0.05)
    checkpoints = list(range(2000, 20_001, 2000))
    s = run_efficiency_experiment(cfg, [], resolution=500, target_width=0.2)
    need = {p: ("never" if v is None else f"{v:.0f}") for p, v in s.samples_to_target.items()}
    gaps = [s.width_at(c, "adaptive") - s.width_at(c, "uniform") for c in checkpoints]
    dominated = all(g <= 0 for g in gaps)
    ratio = s.ratio if s.ratio is not None else float("nan")
    ok = dominated and ratio >= 1.15
    report_criterion(
        5, ok,
        f"adaptive - uniform width at 2k..20k = [{', '.join(f'{g:+.4f}' for g in gaps)}] (need all <= 0); "
        f"samples to width 0.2 uniform {need['uniform']}, adaptive {need['adaptive']}, "
        f"ratio {ratio:.3f} (need >= 1.15)",
    )
    assert ok


def path_sum(theta):
    M = theta.shape[0]
    lg = np.log(theta / (1 - theta))
    out = np.zeros(M)
    for m in range(M):
        vals = []
        for order in itertools.permutations([k for k in range(M) if k != m]):
            chain = list(order) + [m]
            v = 0.0 if chain[0] == 0 else lg[0, chain[0]]
            vals.append(v + sum(lg[a, b] for a, b in zip(chain, chain[1:])))
        out[m] = np.mean(vals)
    return out


def test_criterion_6_npbt_recovery():
    rng = np.random.default_rng(6)
    worst_rec = 0.0
    for _ in range(20):
        xi = rng.normal(scale=1.5, size=6)
        s = np_bt_score(FullWinMatrix.from_coefficients(xi)).s
        worst_rec = max(worst_rec, np.abs((s[:, None] - s[None, :]) - (xi[:, None] - xi[None, :])).max())
    worst_path = 0.0
    for _ in range(20):
        w = FullWinMatrix.from_pairs(rng.uniform(0.05, 0.95, 3), 3)
        worst_path = max(worst_path, np.abs(np_bt_score(w).s - path_sum(w.theta)).max())
    ok = worst_rec < 1e-9 and worst_path < 1e-10
    report_criterion(6, ok, f"max difference error {worst_rec:.1e} < 1e-9; closed form vs path sum {worst_path:.1e} < 1e-10")
    assert ok


def test_criterion_7_pvalue_super_uniform():
    rng = np.random.default_rng(7)
    p = np.empty(10_000)
    levels = np.array([0.0, 0.5, 1.0])
    for i in range(10_000):
        n = int(rng.integers(0, 60))
        probs = rng.dirichlet(np.ones(3))
        hist = rng.choice(levels, n, p=probs)
        pool = HistoryPool()
        for h in hist:
            pool.add(PairKey(0, 1), h)
        p[i] = exchangeability_pvalue(pool, PairKey(0, 1), rng.choice(levels, p=probs))
    grid = np.linspace(0.01, 1.0, 100)
    excess = max(np.mean(p <= t) - t for t in grid)
    ok = excess <= 0.02
    report_criterion(7, ok, f"max_t P(p <= t) - t = {excess:.4f} <= 0.02 over 10,000 null draws")
    assert ok


def detector_population(seed, n_anomalous=25, n_null=25, M=10):
    """Strongest-first crowd log followed by interleaved test voters.

    Anomalous voters always credit the second (weaker) model; null voters
    vote like the crowd. Every test voter casts 50 to 100 votes.
    """
    rng = np.random.default_rng(seed)
    xi = np.sort(draw_coefficients(M, 2.0, 4.0, seed=seed))[::-1]
    first, second = pair_arrays(M)
    theta = 1 / (1 + np.exp(xi[first] - xi[second]))
    n_bg = 200 * len(first)
    k = rng.integers(0, len(first), n_bg)
    bg = make_log(first[k], second[k], (rng.random(n_bg) < theta[k]).astype(float), None,
                  [f"m{i}" for i in range(M)])
    voters = [(f"anom{i:02d}", True) for i in range(n_anomalous)] + [(f"null{i:02d}", False) for i in range(n_null)]
    queue = []
    for name, bad in voters:
        queue += [(name, bad)] * int(rng.integers(50, 101))
    order = rng.permutation(len(queue))
    k = rng.integers(0, len(first), len(queue))
    h = np.empty(len(queue))
    vkeys = []
    for t, idx in enumerate(order):
        name, bad = queue[idx]
        h[t] = 1.0 if bad else float(rng.random() < theta[k[t]])
        vkeys.append(name)
    test = make_log(first[k], second[k], h, None, [f"m{i}" for i in range(M)], tuple(vkeys))
    return HistoryPool.from_log(bg), test


def test_criterion_8_detector():
    reference, log = detector_population(8)
    reports = detect_anomalies(log, "acceptance-key", 0.1, reference=reference)
    flagged = {r.voter_key: r.verdict == "anomalous" for r in reports}
    tpr = np.mean([v for k, v in flagged.items() if k.startswith("anom")])
    tnr = np.mean([not v for k, v in flagged.items() if k.startswith("null")])
    ok = tpr >= 0.8 and tnr >= 0.6
    report_criterion(8, ok, f"TPR {tpr:.2f} >= 0.8, TNR {tnr:.2f} >= 0.6 (25 + 25 voters, alpha 0.1)")
    assert ok


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-8))


def test_criterion_9_gradients():
    rng = np.random.default_rng(9)
    eps = 1e-6
    worst_bt = worst_np = 0.0
    for _ in range(20):
        M = int(rng.integers(3, 8))
        log = synthesize_battles(rng.normal(size=M), 300, seed=int(rng.integers(1 << 30)))
        log = make_log(log.first, log.second, log.outcome, rng.uniform(0.05, 1, len(log)), list(log.models.ids))
        stats = PairStats.from_log(log)
        x = rng.normal(size=M - 1)
        fd = np.array([(bt_objective(x + e, stats, 1e-3) - bt_objective(x - e, stats, 1e-3)) / (2 * eps)
                       for e in np.eye(M - 1) * eps])
        worst_bt = max(worst_bt, rel_err(bt_gradient(x, stats, 1e-3), fd))
    for _ in range(20):
        M = int(rng.integers(3, 8))
        vals = rng.uniform(0.1, 0.9, M * (M - 1) // 2)
        J = np_bt_gradient(FullWinMatrix.from_pairs(vals, M))
        fd = np.zeros_like(J)
        for k in range(len(vals)):
            up, dn = vals.copy(), vals.copy()
            up[k] += eps
            dn[k] -= eps
            fd[:, k] = (np_bt_score(FullWinMatrix.from_pairs(up, M)).s - np_bt_score(FullWinMatrix.from_pairs(dn, M)).s) / (2 * eps)
        mask = np.abs(fd) > 1e-8
        worst_np = max(worst_np, rel_err(J[mask], fd[mask]) if mask.any() else 0.0)
        assert np.allclose(J[~mask], 0.0, atol=1e-8)
    ok = worst_bt < 1e-5 and worst_np < 1e-5
    report_criterion(9, ok, f"max relative error BT {worst_bt:.1e}, np-BT {worst_np:.1e} (< 1e-5, 20 points each)")
    assert ok


def test_criterion_10_determinism(tmp_path):
    xi = draw_coefficients(5, 2.0, 3.0, seed=10)
    log = synthesize_battles(xi, 3000, seed=10)
    rows = [json.loads(line) for line in serialize_log(log).splitlines()]
    for t, row in enumerate(rows):
        row["user"] = f"u{t % 25}"
    path = tmp_path / "log.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    runs = [
        ["rank", str(path)],
        ["rank", str(path), "--method", "npbt"],
        ["rank", str(path), "--interval", "bootstrap", "--boot-reps", "100"],
        ["winmatrix", str(path)],
        ["sample-plan", str(path), "-k", "20"],
        ["detect", str(path), "--secret-key", "s"],
        ["replay", str(path), "--checkpoints", "500,1500,3000"],
        ["simulate", "coverage", "--m", "5", "--gamma", "2", "--trials", "10", "-T", "2000"],
        ["simulate", "efficiency", "--m", "5", "--trials", "2", "-T", "2000", "--resolution", "500"],
    ]
    mismatched = []
    for i, argv in enumerate(runs):
        outputs = []
        for rep in range(2):
            out = tmp_path / f"run{i}_{rep}"
            assert dispatch(argv + ["--seed", "7", "--out-dir", str(out), "--threads", str(1 + 2 * rep)]) == 0
            outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        if outputs[0] != outputs[1]:
            mismatched.append(" ".join(argv[:2]))
    ok = not mismatched
    report_criterion(10, ok, f"{len(runs)} subcommand runs byte-identical across repeats and thread counts"
                     + (f"; mismatched: {mismatched}" if mismatched else ""))
    assert ok
