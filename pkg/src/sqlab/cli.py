"""Command-line entry point.

Exit codes: 0 success, 1 validation or usage error, 2 a named check failed,
3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import sys
import traceback
from pathlib import Path

from sqlab import __version__, privacy
from sqlab.analysts import NonAdaptiveRandom, ReconstructionProbe, run_trials
from sqlab.config import sign_aggregation_preset, load_experiment
from sqlab.core import Population, Universe
from sqlab.errors import SQLabError, ValidationError
from sqlab.harness import _atomic_write, run_experiment
from sqlab.mechanisms import LAPLACE, NAIVE, PMW, OracleConfig
from sqlab import verify

EXIT_OK, EXIT_INVALID, EXIT_CHECK_FAILED, EXIT_INTERNAL = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (default 0)")
    g.add_argument("--trials", type=int, default=argparse.SUPPRESS, help="number of trials")
    g.add_argument("--out", default=argparse.SUPPRESS, help="write the result here instead of stdout")
    g.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS, help="output format")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="sqlab", description=__doc__.splitlines()[0], parents=[common],
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"sqlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", parents=[common], help="run an experiment config file")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("sizes", parents=[common], help="sample-size formulas over a parameter grid")
    p.add_argument("--tau", type=float, nargs="+", required=True)
    p.add_argument("--beta", type=float, nargs="+", required=True)
    p.add_argument("--m", type=int, nargs="+", default=[None])
    p.add_argument("--r", type=int, nargs="+", default=[None])
    p.add_argument("--epsilon", type=float, nargs="+", default=[None])
    p.add_argument("--delta", type=float, nargs="+", default=[None])
    u = p.add_mutually_exclusive_group()
    u.add_argument("--log-universe", type=float, nargs="+", default=None, help="ln |X|")
    u.add_argument("--universe-size", type=int, nargs="+", default=None, help="|X|")
    p.add_argument("--C", type=float, default=privacy.DEFAULT_C)
    p.add_argument("--formula", nargs="+", choices=sorted(privacy.FORMULAS), default=None)

    vp = sub.add_parser("verify", parents=[common], help="numeric and Monte Carlo checks")
    vsub = vp.add_subparsers(dest="family", required=True, parser_class=_Parser)
    v = vsub.add_parser("moments", parents=[common], help="exact moments and Bernoulli domination")
    v = vsub.add_parser("bounds", parents=[common], help="moment-bound grid and tail bounds vs exact tails")
    v = vsub.add_parser("transfer", parents=[common], help="final-query generalization under a mechanism")
    v.add_argument("--mechanism", choices=(NAIVE, LAPLACE), default=LAPLACE)
    v.add_argument("--strategy", choices=("probe", "non_adaptive"), default="probe")
    v.add_argument("--tau", type=float, default=0.2)
    v.add_argument("--beta", type=float, default=0.05)
    v.add_argument("--n", type=int, default=None, help="default: ceil(12 ln(4/beta)/tau^2)")
    v.add_argument("--universe-size", type=int, default=4096)
    v.add_argument("--m-probe", type=int, default=1000)
    v.add_argument("--workers", type=int, default=None)

    ap = sub.add_parser("attack", parents=[common], help="reconstruction probe against one mechanism")
    ap.add_argument("mechanism", choices=(NAIVE, LAPLACE, PMW))
    ap.add_argument("--n", type=int, default=None, help="default: 100 for naive, corollary sizing otherwise")
    ap.add_argument("--universe-size", type=int, default=1024)
    ap.add_argument("--m-probe", type=int, default=4000)
    ap.add_argument("--tau", type=float, default=0.2)
    ap.add_argument("--beta", type=float, default=0.05)
    ap.add_argument("--C", type=float, default=privacy.DEFAULT_C)
    ap.add_argument("--gap", type=float, default=0.2, help="gap threshold")
    ap.add_argument("--fraction", type=float, default=0.9, help="required fraction of trials")
    ap.add_argument("--workers", type=int, default=None)

    dp = sub.add_parser("demo", parents=[common], help="canned experiments")
    dsub = dp.add_subparsers(dest="demo", required=True, parser_class=_Parser)
    d = dsub.add_parser("appendix-a", parents=[common], help="sign aggregation against a naive oracle")
    d.add_argument("--d", type=int, default=10000)
    d.add_argument("--n", type=int, default=100)
    d.add_argument("--mc-trials", type=int, default=1000)
    d.add_argument("--workers", type=int, default=1)
    return parser


def _opt(args, name, default):
    return getattr(args, name, default)


def _emit(args, rows: list, columns: list, stdout) -> None:
    """Write dict rows as CSV or JSON to --out (atomically) or stdout."""
    if _opt(args, "format", "csv") == "json":
        text = json.dumps(rows, indent=2, default=str) + "\n"
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])
        text = buf.getvalue()
    out = _opt(args, "out", None)
    if out:
        _atomic_write([(Path(out), text)])
    else:
        stdout.write(text)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _report_checks(failed: list, stdout) -> int:
    for name, detail in failed:
        stdout.write(f"CHECK FAILED {name}: {detail}\n")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_run(args, stdout) -> int:
    cfg = load_experiment(args.config)
    changes = {}
    for flag, key in (("seed", "seed"), ("trials", "trials"), ("out", "output")):
        if hasattr(args, flag):
            changes[key] = getattr(args, flag)
    if args.workers:
        changes["workers"] = args.workers
    cfg = cfg.replace(**changes)
    result = run_experiment(cfg)
    _print_result(args, result, stdout)
    return _report_checks([(c.name, f"{c.value:.6g} outside {c.bound}") for c in result.checks if not c.passed],
                          stdout)


def _print_result(args, result, stdout):
    if _opt(args, "format", "csv") == "json":
        stdout.write(json.dumps({"summary": result.metadata["summary"], "checks": result.metadata["checks"],
                                 "csv": str(result.csv_path) if result.csv_path else None}, indent=2) + "\n")
    else:
        if result.csv_path is None:
            stdout.write(result.csv_text)
        for c in result.checks:
            stdout.write(c.line() + "\n")


def cmd_sizes(args, stdout) -> int:
    if args.universe_size is not None:
        logs = [math.log(s) for s in args.universe_size]
    elif args.log_universe is not None:
        logs = args.log_universe
    else:
        logs = [None]
    formulas = args.formula or list(privacy.FORMULAS)
    rows = []
    for tau, beta, m, lx, r, eps, delta in itertools.product(args.tau, args.beta, args.m, logs, args.r,
                                                             args.epsilon, args.delta):
        for key in formulas:
            try:
                value = privacy.sample_size_formula(key, tau, beta, m=m, log_universe=lx, r=r, epsilon=eps,
                                                    delta=delta)
                n = privacy.required_sample_size(key, tau, beta, m=m, log_universe=lx, r=r, C=args.C,
                                                 epsilon=eps, delta=delta)
            except privacy.MissingParameter:
                continue
            desc, uses_c = privacy.FORMULAS[key]
            rows.append({"formula": key, "description": desc, "tau": tau, "beta": beta, "m": m,
                         "log_universe": lx, "r": r, "epsilon": eps, "delta": delta,
                         "C": args.C if uses_c else 1.0, "value": value, "n": n})
    _emit(args, rows, ["formula", "description", "tau", "beta", "m", "log_universe", "r", "epsilon", "delta",
                       "C", "value", "n"], stdout)
    return EXIT_OK


def _rows_of(checks) -> list:
    return [{c: getattr(r, c) for c in verify.CHECK_COLUMNS} for r in checks]


def cmd_verify(args, stdout) -> int:
    seed = _opt(args, "seed", 0)
    if args.family == "moments":
        trials = _opt(args, "trials", 200_000)
        rows = []
        for n, p in ((10, 0.5), (37, 0.2), (200, 0.9)):
            got = verify.binomial_moment(n, p, 1)
            rows.append(verify.CheckRow("moment_k1_equals_p", f"n={n};p={p}", got, p, abs(got - p) <= 1e-12 * p))
            got2 = verify.binomial_moment(n, p, 2)
            want2 = p * p + p * (1 - p) / n
            rows.append(verify.CheckRow("moment_k2_closed_form", f"n={n};p={p}", got2, want2,
                                        abs(got2 - want2) <= 1e-12 * want2))
        for law in ("uniform", "bernoulli", "constant"):
            rep = verify.check_bernoulli_domination(20, 0.5, 4, trials, seed, law)
            rows.append(verify.CheckRow(f"bernoulli_domination:{law}", "n=20;p=0.5;k=4",
                                        rep.estimate, rep.moment + 3 * rep.se, rep.holds, trials, int(not rep.holds)))
    elif args.family == "bounds":
        rows = verify.moment_grid() + verify.bound_oracle_rows()
    else:
        rows = [_verify_transfer(args, seed).row()]
    _emit(args, _rows_of(rows), list(verify.CHECK_COLUMNS), stdout)
    failed = [r for r in rows if not r.holds]
    summary = {}
    for r in failed:
        summary.setdefault(r.check_id, []).append(r)
    return _report_checks([(cid, f"{len(rs)} case(s) exceed the bound, first {rs[0].parameters}: "
                                 f"{rs[0].lhs:.6g} > {rs[0].bound:.6g}") for cid, rs in summary.items()], stdout)


def _verify_transfer(args, seed):
    tau, beta = args.tau, args.beta
    n = args.n or privacy._ceil(privacy.pure_transfer_requirement(tau, beta))
    pop = Population.uniform(Universe.indexed(args.universe_size))
    if args.strategy == "probe":
        strategy = ReconstructionProbe(args.m_probe)
    else:
        strategy = NonAdaptiveRandom(args.m_probe + 1)
    if args.mechanism == LAPLACE:
        eps = privacy.calibrate_epsilon_pure(tau, beta, n)
        cfg = OracleConfig(LAPLACE, tau=tau, beta=beta, m=strategy.query_count, epsilon=eps)
    else:
        cfg = OracleConfig(NAIVE, tau=tau, beta=beta, m=strategy.query_count)
    return verify.transfer_check(cfg, strategy, pop, n, _opt(args, "trials", 500), seed, workers=args.workers)


def attack_config(mechanism, tau, beta, m_probe, universe_size, C, n=None):
    """(OracleConfig, n) for the probe attack; DP arms are sized by their corollary with eps = tau/2."""
    m = m_probe + 1
    if mechanism == NAIVE:
        return OracleConfig(NAIVE, tau=tau, beta=beta, m=m), n or 100
    if mechanism == LAPLACE:
        n = n or privacy.required_sample_size("laplace_sq", tau, beta, m=m, C=C)
    else:
        n = n or privacy.required_sample_size("pmw_sq", tau, beta, log_universe=math.log(universe_size), C=C)
    return OracleConfig(mechanism, tau=tau, beta=beta, m=m, epsilon=tau / 2.0, C=C), n


def cmd_attack(args, stdout) -> int:
    cfg, n = attack_config(args.mechanism, args.tau, args.beta, args.m_probe, args.universe_size, args.C, args.n)
    strict = args.mechanism == NAIVE
    if strict and args.universe_size < 2 * n:
        raise ValidationError(f"|X| = {args.universe_size} < 2n = {2 * n}")
    pop = Population.uniform(Universe.indexed(args.universe_size))
    trials = _opt(args, "trials", 20)
    outcomes = run_trials(pop, n, cfg, ReconstructionProbe(args.m_probe, strict=False), _opt(args, "seed", 0),
                          trials, workers=args.workers)
    rows = [{"mechanism": args.mechanism, "trial": o.trial, "n": n, "completed": o.completed,
             "reported": o.reported, "true": o.true, "gap": o.gap, "gap_exceeds": bool(o.gap > args.gap)}
            for o in outcomes]
    _emit(args, rows, ["mechanism", "trial", "n", "completed", "reported", "true", "gap", "gap_exceeds"], stdout)
    if args.mechanism == NAIVE:
        hits = sum(o.completed and o.gap > args.gap for o in outcomes)
        name, want = "attack_succeeds", f"gap > {args.gap}"
    else:
        hits = sum(o.completed and o.gap <= args.gap for o in outcomes)
        name, want = "dp_protects", f"gap <= {args.gap}"
    ok = trials == 0 or hits >= args.fraction * trials
    detail = f"{want} in {hits}/{trials} trials, need >= {args.fraction:.0%}"
    return _report_checks([] if ok else [(name, detail)], stdout)


def cmd_demo(args, stdout) -> int:
    cfg = sign_aggregation_preset(args.d, args.n, _opt(args, "trials", 20), _opt(args, "seed", 0), args.mc_trials)
    cfg = cfg.replace(workers=args.workers, output=_opt(args, "out", None))
    result = run_experiment(cfg)
    _print_result(args, result, stdout)
    return _report_checks([(c.name, f"mean {c.value:.6g} outside {c.bound}") for c in result.checks
                           if not c.passed], stdout)


COMMANDS = {"run": cmd_run, "sizes": cmd_sizes, "verify": cmd_verify, "attack": cmd_attack, "demo": cmd_demo}


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        stderr.write(f"{exc}\n")
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    try:
        return COMMANDS[args.command](args, stdout)
    except ValidationError as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_INVALID
    except SQLabError as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_INTERNAL
    except Exception:  # noqa: BLE001
        stderr.write("internal error:\n" + traceback.format_exc())
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
