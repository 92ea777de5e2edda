"""Command-line pipeline: simulate, fit, uncertainty, solve, filter, evaluate.

Every command writes ``<out>.manifest.json`` next to its main output.  The
manifest records the resolved argument vector, so ``trustpomdp rerun
<manifest>`` repeats the run bit for bit.

Exit codes: 0 success, 2 configuration, 3 data, 4 convergence,
5 likelihood, 6 numerical.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

from . import __version__
from ._validation import check_params
from .evaluation import LogisticFit, belief_to_survey, fit_linear, fit_logistic, monte_carlo_compare
from .exceptions import ConfigError, OutOfRangeError, SingularHessianError, TrustPomdpError
from .iohmm import baum_welch_fit, forward_filter, laplace_uncertainty, log_likelihood
from .model import (
    REFERENCE_ENV,
    REFERENCE_PARAMS,
    load_env,
    load_params,
    read_trial_log,
    save_params,
    write_trial_log,
)
from .simulant import policy_from_spec, simulate_dataset
from .solver import solve

logger = logging.getLogger("trustpomdp")

SEED_ENV_VAR = "TRUST_POMDP_SEED"


# -- shared option handling ------------------------------------------------------

def _resolve_seed(value):
    if value is not None:
        return value
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR}={raw!r} is not an integer") from None


def _load_model(args):
    """Parameters and environment from ``--params``/``--env``, validated."""
    params, env = REFERENCE_PARAMS, None
    if args.params:
        params, env = load_params(args.params)
    if getattr(args, "env", None):
        env = load_env(args.env)
    env = REFERENCE_ENV if env is None else env
    check_params(params, env)
    return params, env


def _read_log(path):
    if not Path(path).is_file():
        raise ConfigError(f"{path}: trial log not found")
    return read_trial_log(path)


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def _manifest_path(out) -> Path:
    return Path(str(out) + ".manifest.json")


def _resolved_argv(args, parser_map) -> list[str]:
    """Argument vector with every default filled in (seed included)."""
    argv = [args.command]
    for action in parser_map[args.command]._actions:
        if not action.option_strings or action.dest in ("help",):
            continue
        value = getattr(args, action.dest, None)
        flag = action.option_strings[-1]
        if isinstance(action, argparse._StoreTrueAction):
            if value:
                argv.append(flag)
        elif value is not None:
            argv += [flag, str(value)]
    return argv


def _write_manifest(args, parser_map, inputs, outputs, started):
    manifest = {
        "command": args.command,
        "argv": _resolved_argv(args, parser_map),
        "config": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)},
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "python": sys.version.split()[0],
        "duration_s": time.perf_counter() - started,
    }
    _write_json(_manifest_path(args.out), manifest)


# -- commands -------------------------------------------------------------------

def cmd_simulate(args):
    params, env = _load_model(args)
    policy = policy_from_spec(args.policy)
    if args.episodes < 0 or args.trials < 0:
        raise ConfigError("--episodes and --trials must be nonnegative")
    data = simulate_dataset(params, env, policy, args.episodes, args.trials, args.seed, n_jobs=args.threads)
    write_trial_log(args.out, data)
    print(f"wrote {sum(len(ep) for ep in data)} records in {len(data)} episodes to {args.out}")
    return {"params": args.params, "env": args.env}, [args.out]


def cmd_fit(args):
    episodes = _read_log(args.log)
    init = None
    if args.init:
        init, _ = load_params(args.init)
        check_params(init)
    env = load_env(args.env) if args.env else REFERENCE_ENV
    params, diag = baum_welch_fit(episodes, init, max_iter=args.max_iter, tol=args.tol, seed=args.seed,
                                  restarts=args.restarts, strict=args.strict, n_jobs=args.threads)
    save_params(args.out, params, env)
    diag_path = str(args.out) + ".diagnostics.json"
    report = diag.to_dict()
    report["monotone"] = diag.is_monotone()
    _write_json(diag_path, report)
    print(f"log-likelihood {diag.log_likelihood:.6f} (restart {diag.restart_index}, "
          f"{diag.iterations} iterations, monotone={diag.is_monotone()})")
    if diag.missing_contexts:
        print("missing contexts: " + ", ".join(diag.missing_contexts))
    return {"log": args.log, "init": args.init, "env": args.env}, [args.out, diag_path]


def cmd_uncertainty(args):
    params, _ = _load_model(args)
    episodes = _read_log(args.log)
    try:
        report = laplace_uncertainty(params, episodes, args.step, allow_pseudo=args.allow_pseudo)
    except SingularHessianError:
        print("hint: rerun with --allow-pseudo for pseudo-inverse errors", file=sys.stderr)
        raise
    Path(args.out).write_text(report.to_csv(literal=args.literal_formula))
    if report.singular:
        print("warning: singular curvature, pseudo-inverse errors reported", file=sys.stderr)
    print(f"log-likelihood {log_likelihood(params, episodes):.6f}; wrote {len(report.entries)} rows to {args.out}")
    return {"params": args.params, "log": args.log}, [args.out]


def cmd_solve(args):
    params, env = _load_model(args)
    if args.gamma is not None and not 0.0 <= args.gamma < 1.0:
        raise ConfigError(f"--gamma must lie in [0, 1), got {args.gamma}")
    if args.grid_bins < 2:
        raise ConfigError("--grid-bins must be at least 2")
    policy = solve(params, env, args.grid_bins, args.tol, args.gamma, args.projection)
    policy.save(args.out)
    for line in policy.summary():
        print(line)
    return {"params": args.params, "env": args.env}, [args.out]


def cmd_filter(args):
    params, _ = _load_model(args)
    episodes = _read_log(args.log)
    survey = None
    if args.survey_map:
        try:
            survey = LogisticFit.from_dict(json.loads(Path(args.survey_map).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{args.survey_map}: {exc}") from None
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode_id", "t", "belief"] + (["survey"] if survey else []))
        for ep in episodes:
            traj = forward_filter(params, ep)
            for rec, b in zip(ep, traj.beliefs[1:]):
                row = [rec.episode_id, rec.t, repr(float(b))]
                if survey:
                    try:
                        row.append(repr(belief_to_survey(survey, float(b))))
                    except OutOfRangeError:
                        row.append("nan")
                writer.writerow(row)
    print(f"filtered {len(episodes)} episodes into {args.out}")
    return {"params": args.params, "log": args.log, "survey_map": args.survey_map}, [args.out]


def cmd_evaluate(args):
    params, env = _load_model(args)
    if args.p_complex_high is not None:
        env = env.replace(p_complex_high=args.p_complex_high)
        check_params(params, env)
    pol_a = policy_from_spec(args.policy_a)
    pol_b = policy_from_spec(args.policy_b)
    report = monte_carlo_compare(params, env, pol_a, pol_b, args.participants, args.trials, args.seed,
                                 n_jobs=args.threads)
    _write_json(args.out, report.to_dict())
    samples = str(args.out) + ".samples.csv"
    Path(samples).write_text(report.samples_csv())
    (ma, mb), (xa, xb) = report.medians, report.means
    la, lb = report.labels
    print(f"median {la}: {ma:.3f}  {lb}: {mb:.3f}")
    print(f"mean   {la}: {xa:.3f}  {lb}: {xb:.3f}")
    print(f"t = {report.t:.4f}, p = {report.p:.4g}")
    return {"params": args.params, "env": args.env}, [args.out, samples]


def cmd_curve_fit(args):
    try:
        with open(args.points, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    except OSError as exc:
        raise ConfigError(f"{args.points}: {exc.strerror}") from None
    try:
        points = [(float(r[0]), float(r[1])) for r in rows]
    except (ValueError, IndexError):
        # tolerate one header row
        try:
            points = [(float(r[0]), float(r[1])) for r in rows[1:]]
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"{args.points}: expected two numeric columns ({exc})") from None
    if args.model == "logistic":
        fit = fit_logistic(points)
        data = fit.to_dict()
    else:
        lin = fit_linear(points)
        data = {"slope": lin.slope, "intercept": lin.intercept, "rss": lin.rss}
    data["model"] = args.model
    _write_json(args.out, data)
    print(", ".join(f"{k}={v}" for k, v in data.items() if k != "model"))
    return {"points": args.points}, [args.out]


def cmd_rerun(args):
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        argv = list(manifest["argv"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"{args.manifest}: not a run manifest ({exc!r})") from None
    if args.out_override:
        i = argv.index("--out")
        argv[i + 1] = args.out_override
    return main(argv)


# -- parser ----------------------------------------------------------------------

def _common(p, *, model=True, seed=False, threads=False):
    if model:
        p.add_argument("--params", help="ModelParams JSON (default: reference parameters)")
        p.add_argument("--env", help="EnvConfig JSON (default: embedded in --params, else reference)")
    if seed:
        p.add_argument("--seed", type=int, default=None, help=f"master seed (default: ${SEED_ENV_VAR} or 0)")
    if threads:
        p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("--out", required=True, help="output path")


def build_parser():
    parser = argparse.ArgumentParser(prog="trustpomdp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["simulate"] = sub.add_parser("simulate", help="simulate trial logs with the synthetic supervisor")
    _common(p, seed=True, threads=True)
    p.add_argument("--policy", default="static:0.10,0.33",
                   help="static:pL,pH | threshold:policy.json | always-auto | always-assist")
    p.add_argument("--episodes", type=int, default=33)
    p.add_argument("--trials", type=int, default=71)
    p.set_defaults(func=cmd_simulate)

    p = subs["fit"] = sub.add_parser("fit", help="fit the trust IOHMM to a trial log")
    _common(p, model=False, seed=True, threads=True)
    p.add_argument("--log", required=True, help="JSON-lines trial log")
    p.add_argument("--env", help="EnvConfig JSON stored with the fitted parameters")
    p.add_argument("--init", help="ModelParams JSON used as the first start")
    p.add_argument("--restarts", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--strict", action="store_true", help="fail on unobserved (complexity, action) contexts")
    p.set_defaults(func=cmd_fit)

    p = subs["uncertainty"] = sub.add_parser("uncertainty", help="Laplace standard errors at fitted parameters")
    _common(p)
    p.add_argument("--log", required=True)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--literal-formula", action="store_true", help="add the sqrt(diag(-H)) column")
    p.add_argument("--allow-pseudo", action="store_true", help="report pseudo-inverse errors when singular")
    p.set_defaults(func=cmd_uncertainty)

    p = subs["solve"] = sub.add_parser("solve", help="solve the belief MDP for the assistance policy")
    _common(p)
    p.add_argument("--grid-bins", type=int, default=101)
    p.add_argument("--gamma", type=float, default=None, help="discount (default: from env)")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--projection", choices=("linear", "nearest"), default="linear")
    p.set_defaults(func=cmd_solve)

    p = subs["filter"] = sub.add_parser("filter", help="filtered trust beliefs per trial")
    _common(p)
    p.add_argument("--log", required=True)
    p.add_argument("--survey-map", help="logistic fit JSON; adds a survey-score column")
    p.set_defaults(func=cmd_filter)

    p = subs["evaluate"] = sub.add_parser("evaluate", help="Monte Carlo comparison of two policies")
    _common(p, seed=True, threads=True)
    p.add_argument("--policy-a", required=True)
    p.add_argument("--policy-b", default="always-auto")
    p.add_argument("--participants", type=int, default=1000)
    p.add_argument("--trials", type=int, default=40)
    p.add_argument("--p-complex-high", type=float, default=None, help="override env complexity probability")
    p.set_defaults(func=cmd_evaluate)

    p = subs["curve-fit"] = sub.add_parser("curve-fit", help="fit a logistic or linear survey mapping")
    _common(p, model=False)
    p.add_argument("--points", required=True, help="CSV with columns r,y")
    p.add_argument("--model", choices=("logistic", "linear"), default="logistic")
    p.set_defaults(func=cmd_curve_fit)

    p = subs["rerun"] = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", dest="out_override", help="write to a different output path")
    p.set_defaults(func=cmd_rerun)
    return parser, subs


def main(argv=None) -> int:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            return args.func(args)
        if hasattr(args, "seed"):
            args.seed = _resolve_seed(args.seed)
        if hasattr(args, "threads") and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        started = time.perf_counter()
        inputs, outputs = args.func(args)
        _write_manifest(args, subs, inputs, outputs, started)
    except TrustPomdpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
