"""Command-line entry point.

Exit codes: 0 success, 1 input or validation error, 2 the data cannot
support the requested estimate (e.g. separation without a ridge).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np
from scipy.stats import chi2, norm

from . import __version__
from .anomaly import detect_anomalies
from .bt import (
    approximate_ranks,
    bootstrap_intervals,
    fit_bt,
    marginal_intervals,
    sandwich_covariance,
    simultaneous_set,
    ScoreIntervals,
)
from .core import ModelRegistry, parse_log
from .errors import InputError, StatisticalError
from .np_bt import FullWinMatrix, delta_method_sd, np_bt_score
from .report import (
    LEADERBOARD_COLUMNS,
    PLOT_COLUMNS,
    fit_summary,
    interval_plot_rows,
    leaderboard,
    to_csv,
    to_json,
    write_atomic,
)
from .rng import fresh_seed, generator
from .sampler import ActiveSampler
from .sim import SimConfig, replay, run_coverage_experiment, run_efficiency_experiment
from .win_matrix import estimate_win_matrix

logger = logging.getLogger("arenarank")

EXIT_OK, EXIT_INPUT, EXIT_STATISTICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--format", choices=("json", "csv"), default=None,
                   help="format of tabular outputs; unset uses each subcommand's native format")
    g.add_argument("--seed", type=int, default=None, help="master seed; drawn from system entropy if omitted")
    g.add_argument("--config", default=None, help="JSON object or 'key = value' file of flag defaults")
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")
    g.add_argument("--out-dir", default=".", help="directory receiving all outputs")
    g.add_argument("-v", "--verbose", action="store_true", default=False, help="log progress to stderr")
    return p


def _log_input(p):
    p.add_argument("log", help="battle log (JSON lines)")
    p.add_argument("--registry", default=None, help="JSON array of model ids fixing index order")
    p.add_argument("--both-bad", choices=("tie", "drop"), default="tie", help="treatment of 'both_bad' votes")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    common = _common()
    parser = _Parser(prog="arenarank", description="Pairwise-preference ranking toolkit.", formatter_class=_Formatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True, metavar="COMMAND")
    leaves = {}

    p = sub.add_parser("rank", parents=[common], formatter_class=_Formatter,
                       help="Bradley-Terry leaderboard with intervals and approximate ranks")
    _log_input(p)
    p.add_argument("--alpha", type=float, default=0.05, help="miscoverage level")
    p.add_argument("--method", choices=("bt", "npbt"), default="bt", help="score: parametric or nonparametric BT")
    p.add_argument("--interval", choices=("sandwich", "bootstrap"), default="sandwich", help="interval construction")
    p.add_argument("--multiplicity", choices=("none", "chi2"), default="chi2",
                   help="chi2: simultaneous set (valid ranks); none: per-model intervals")
    p.add_argument("--ridge", type=float, default=1e-6, help="ridge penalty on free coefficients")
    p.add_argument("--boot-reps", type=int, default=1000, help="bootstrap replicates")
    p.add_argument("--npbt-form", choices=("log", "literal"), default="log", help="nonparametric score variant")
    leaves["rank"] = p

    p = sub.add_parser("winmatrix", parents=[common], formatter_class=_Formatter,
                       help="IPW win-matrix estimate with per-entry intervals")
    _log_input(p)
    p.add_argument("--alpha", type=float, default=0.05, help="miscoverage level")
    leaves["winmatrix"] = p

    p = sub.add_parser("sample-plan", parents=[common], formatter_class=_Formatter,
                       help="next pair assignments from the active sampling rule")
    _log_input(p)
    p.add_argument("-k", "--next", type=int, default=10, dest="next", help="number of assignments")
    p.add_argument("--floor", type=float, default=0.05, help="uniform exploration mass")
    leaves["sample-plan"] = p

    p = sub.add_parser("detect", parents=[common], formatter_class=_Formatter,
                       help="flag anomalous voters")
    _log_input(p)
    p.add_argument("--secret-key", required=False, default=None, help="secret key randomizing checkpoints; required")
    p.add_argument("--alpha", type=float, default=0.1, help="per-voter level")
    p.add_argument("--mirrored", action="store_true", default=False, help="test the low tail instead")
    p.add_argument("--horizon", type=int, default=100, help="checkpoints are drawn from 1..horizon")
    leaves["detect"] = p

    p = sub.add_parser("simulate", formatter_class=_Formatter, help="simulation experiments")
    simsub = p.add_subparsers(dest="experiment", parser_class=_Parser, required=True, metavar="EXPERIMENT")
    for name, m_default, t_default, trials_default in (("coverage", 10, 20000, 200), ("efficiency", 20, 20000, 20)):
        q = simsub.add_parser(name, parents=[common], formatter_class=_Formatter,
                              help=f"{name} experiment")
        q.add_argument("--m", type=int, default=m_default, help="number of models")
        q.add_argument("--gamma", type=float, default=2.0, help="coefficients ~ beta(1/gamma, 1/gamma)")
        q.add_argument("--scale", type=float, default=4.0, help="multiplier on coefficient draws")
        q.add_argument("--battles", "-T", type=int, default=t_default, help="battles per trial")
        q.add_argument("--trials", type=int, default=trials_default, help="independent trials (seeds)")
        q.add_argument("--alpha", type=float, default=0.05, help="miscoverage level")
        q.add_argument("--ridge", type=float, default=1e-6, help="ridge penalty")
        q.add_argument("--floor", type=float, default=0.05, help="adaptive sampler exploration mass")
        leaves[f"simulate-{name}"] = q
    leaves["simulate-coverage"].add_argument("--sampling", choices=("uniform", "adaptive"), default="uniform",
                                             help="pair sampling policy")
    leaves["simulate-coverage"].add_argument("--bootstrap", action="store_true", default=False,
                                             help="also score pivot-bootstrap intervals")
    leaves["simulate-coverage"].add_argument("--boot-reps", type=int, default=200, help="bootstrap replicates")
    eff = leaves["simulate-efficiency"]
    eff.add_argument("--checkpoints", default=None, help="comma-separated T values; unset uses 10 even steps up to --battles")
    eff.add_argument("--resolution", type=int, default=200, help="width-curve grid step")
    eff.add_argument("--target-width", type=float, default=0.2, help="win-matrix width for samples-to-precision")

    p = sub.add_parser("replay", parents=[common], formatter_class=_Formatter,
                       help="refit on growing prefixes of a log")
    _log_input(p)
    p.add_argument("--checkpoints", required=False, default=None, help="comma-separated prefix lengths; unset uses the full log")
    p.add_argument("--alpha", type=float, default=0.05, help="miscoverage level")
    p.add_argument("--ridge", type=float, default=1e-6, help="ridge penalty")
    leaves["replay"] = p
    return parser, leaves


def _load_config(path: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            data[key] = value
    if not isinstance(data, dict):
        raise InputError(f"{path}: config must be an object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _apply_config(leaf: argparse.ArgumentParser, config: dict) -> None:
    known = {a.dest: a for a in leaf._actions}
    unknown = sorted(set(config) - set(known))
    if unknown:
        raise InputError(f"unknown config keys: {unknown}")
    for key, value in config.items():
        action = known[key]
        if isinstance(action, argparse._StoreTrueAction) and isinstance(value, str):
            value = value.strip().lower() in ("1", "true", "yes", "on")
        elif not isinstance(value, str) and action.type is not None and value is not None:
            value = action.type(value)
        leaf.set_defaults(**{key: value})


def parse_args(argv):
    parser, leaves = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        name = args.command if args.command != "simulate" else f"simulate-{args.experiment}"
        _apply_config(leaves[name], _load_config(args.config))
        args = parser.parse_args(argv)
    return args


def _digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_log(args):
    registry = None
    if args.registry:
        with open(args.registry, encoding="utf-8") as fh:
            registry = ModelRegistry.from_json(fh)
    with open(args.log, "rb") as fh:
        return parse_log(fh, registry, both_bad=args.both_bad)


def _fmt(args, natural: str) -> str:
    return args.format or natural


def _table(args, natural, columns, rows, stem):
    fmt = _fmt(args, natural)
    text = to_csv(columns, rows) if fmt == "csv" else to_json([dict(zip(columns, r)) if not isinstance(r, dict) else r for r in rows])
    return f"{stem}.{fmt}", text


# ---------------------------------------------------------------- commands


def cmd_rank(args):
    log = _load_log(args)
    if args.method == "npbt":
        return _rank_npbt(args, log)
    fit = fit_bt(log, args.ridge)
    if fit.sandwich_cov is None:
        sandwich_covariance(fit, log)  # raises with the offending cluster
    marginal = marginal_intervals(fit, alpha=args.alpha)
    simultaneous = simultaneous_set(fit, alpha=args.alpha)
    if args.interval == "bootstrap":
        marginal = bootstrap_intervals(
            log, args.boot_reps, args.alpha, args.seed, fit=fit, workers=args.threads
        )
        if args.multiplicity == "chi2":
            warnings.warn("bootstrap intervals are per-model; reported rank bounds are not simultaneous", stacklevel=1)
        reported = marginal
    else:
        reported = simultaneous if args.multiplicity == "chi2" else marginal
    ranks = approximate_ranks(reported)
    rows = leaderboard(reported, ranks, fit.n_battles)
    name, text = _table(args, "json", LEADERBOARD_COLUMNS, rows, "leaderboard")
    plot = to_csv(PLOT_COLUMNS, interval_plot_rows(
        [marginal, simultaneous], [f"{marginal.method}_uncorrected", "sandwich_chi2"]))
    extra = {"fit": fit_summary(fit), "simultaneous": reported.simultaneous, "rank_semantics": _RANK_NOTE}
    return {name: text, "intervals_plot.csv": plot}, extra


_RANK_NOTE = (
    "rank_lower = 1 + #{models whose interval lies entirely above}; "
    "rank_upper = 1 + #{other models whose interval reaches above this model's lower end}; "
    "under simultaneous coverage rank_lower <= true rank <= rank_upper"
)


def _rank_npbt(args, log):
    est = estimate_win_matrix(log, args.alpha)
    M = log.models.n_models
    theta = np.where(est.observed, est.theta_hat, 0.5)
    if not est.observed.all():
        warnings.warn(f"{int((~est.observed).sum())} pair(s) unobserved; filled with 1/2", stacklevel=1)
    score = np_bt_score(FullWinMatrix.from_pairs(theta, M), form=args.npbt_form, gradient=True)
    sd = delta_method_sd(score, est.sigma_hat, est.T)
    z = norm.ppf(1 - args.alpha / 2)
    q = np.sqrt(chi2.ppf(1 - args.alpha, M - 1))
    marginal = ScoreIntervals(log.models.ids, score.s, score.s - z * sd, score.s + z * sd, False, args.alpha, "delta")
    simultaneous = ScoreIntervals(log.models.ids, score.s, score.s - q * sd, score.s + q * sd, True, args.alpha, "delta")
    reported = simultaneous if args.multiplicity == "chi2" else marginal
    ranks = approximate_ranks(reported)
    rows = leaderboard(reported, ranks, log.battles_per_model())
    name, text = _table(args, "json", LEADERBOARD_COLUMNS, rows, "leaderboard")
    plot = to_csv(PLOT_COLUMNS, interval_plot_rows([marginal, simultaneous], ["delta_uncorrected", "delta_chi2"]))
    extra = {"simultaneous": reported.simultaneous, "rank_semantics": _RANK_NOTE, "intervals": "delta method (approximate)"}
    return {name: text, "intervals_plot.csv": plot}, extra


def cmd_winmatrix(args):
    log = _load_log(args)
    est = estimate_win_matrix(log, args.alpha)
    ids = log.models.ids
    rows = [
        (ids[p.first], ids[p.second], est.theta_hat[k], est.sigma_hat[k], est.n_obs[k], est.lo[k], est.hi[k])
        for k, p in enumerate(est.pairs)
    ]
    cols = ("pair_first", "pair_second", "theta_hat", "sigma_hat", "n_obs", "lo", "hi")
    name, text = _table(args, "csv", cols, rows, "winmatrix")
    return {name: text}, {"T": est.T}


def cmd_sample_plan(args):
    log = _load_log(args)
    sampler = ActiveSampler.from_log(log, args.floor, generator(args.seed, "sample-plan"))
    ids = log.models.ids
    rows = []
    for r in range(1, args.next + 1):
        pair, prob = sampler.draw()
        rows.append((r, f"{ids[pair.first]}|{ids[pair.second]}", prob))
    name, text = _table(args, "csv", ("rank", "pair", "probability"), rows, "sample_plan")
    return {name: text}, {"warmup": sampler.in_warmup}


def cmd_detect(args):
    if not args.secret_key:
        raise InputError("detect requires --secret-key")
    log = _load_log(args)
    reports = detect_anomalies(log, args.secret_key, args.alpha, mirrored=args.mirrored, horizon=args.horizon)
    rows = [
        (r.voter_key, r.votes_seen, " ".join(map(str, r.checkpoints)), r.max_M, r.first_firing_checkpoint, r.verdict)
        for r in reports
    ]
    cols = ("voter_key", "votes_seen", "checkpoints", "max_M", "first_firing_checkpoint", "verdict")
    name, text = _table(args, "csv", cols, rows, "detect")
    counts = {v: sum(r.verdict == v for r in reports) for v in ("anomalous", "normal", "pending")}
    return {name: text}, {"verdicts": counts}


def _sim_config(args, sampling="uniform", **extra) -> SimConfig:
    return SimConfig(
        M=args.m, gamma=args.gamma, T=args.battles, trials=args.trials, alpha=args.alpha, seed=args.seed,
        sampling=sampling, scale=args.scale, floor_delta=args.floor, ridge=args.ridge, workers=args.threads, **extra,
    )


def cmd_simulate(args):
    if args.experiment == "coverage":
        cfg = _sim_config(args, args.sampling, bootstrap=args.bootstrap, boot_reps=args.boot_reps)
        summary = run_coverage_experiment(cfg)
    else:
        cps = None if args.checkpoints is None else _int_list(args.checkpoints)
        summary = run_efficiency_experiment(_sim_config(args), cps, resolution=args.resolution,
                                            target_width=args.target_width)
    d = summary.to_dict()
    d["config"].pop("workers", None)
    stem = args.experiment
    return {f"{stem}_summary.json": to_json(d), f"{stem}_plot.csv": to_csv(PLOT_COLUMNS, summary.plot_rows())}, {}


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise InputError(f"expected comma-separated integers, got {text!r}") from None


def cmd_replay(args):
    log = _load_log(args)
    cps = [len(log)] if args.checkpoints is None else _int_list(args.checkpoints)
    snaps = replay(log, cps, alpha=args.alpha, ridge=args.ridge)
    out = []
    plot = []
    for s in snaps:
        ranks = approximate_ranks(s.simultaneous)
        out.append({
            "T": s.T,
            "winmatrix_mean_width": s.winmatrix_mean_width,
            "median_width": s.median_width,
            "leaderboard": leaderboard(s.simultaneous, ranks, s.fit.n_battles),
        })
        for iv, series in ((s.marginal, "uncorrected"), (s.simultaneous, "chi2")):
            for model, y, lo, hi in zip(iv.models, iv.estimate, iv.lo, iv.hi):
                plot.append((s.T, f"{model}:{series}", y, lo, hi))
        plot.append((s.T, "winmatrix_mean_width", s.winmatrix_mean_width, None, None))
    return {"replay_summary.json": to_json(out), "replay_plot.csv": to_csv(PLOT_COLUMNS, plot)}, {}


COMMANDS = {
    "rank": cmd_rank,
    "winmatrix": cmd_winmatrix,
    "sample-plan": cmd_sample_plan,
    "detect": cmd_detect,
    "simulate": cmd_simulate,
    "replay": cmd_replay,
}


def _manifest(args, outputs, extra) -> str:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("threads", "verbose", "out_dir")}
    if config.get("secret_key"):
        # never persist the key itself; the digest still pins the run
        config["secret_key"] = "sha256:" + hashlib.sha256(config["secret_key"].encode()).hexdigest()
    inputs = {}
    for key in ("log", "registry", "config"):
        path = getattr(args, key, None)
        if path:
            inputs[path] = _digest(path)
    name = args.command if args.command != "simulate" else f"simulate {args.experiment}"
    return to_json({
        "subcommand": name,
        "version": __version__,
        "seed": args.seed,
        "config": config,
        "inputs": inputs,
        "outputs": sorted(outputs),
        **extra,
    })


def _format_warning(message, category, filename, lineno, line=None):
    return f"arenarank: warning: {message}\n"


def dispatch(argv=None) -> int:
    try:
        args = parse_args(argv)
    except InputError as exc:
        print(f"arenarank: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    warnings.formatwarning = _format_warning
    if args.seed is None:
        args.seed = fresh_seed()
    try:
        outputs, extra = COMMANDS[args.command](args)
        out_dir = Path(args.out_dir)
        name = args.command if args.command != "simulate" else args.experiment
        files = {out_dir / fname: text for fname, text in outputs.items()}
        files[out_dir / f"{name}_manifest.json"] = _manifest(args, outputs, extra)
        for path in write_atomic(files):
            print(path)
    except (InputError, OSError) as exc:
        print(f"arenarank: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StatisticalError as exc:
        print(f"arenarank: statistical failure: {exc}", file=sys.stderr)
        return EXIT_STATISTICAL
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
