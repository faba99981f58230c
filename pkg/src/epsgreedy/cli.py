"""Command-line interface: ``epsgreedy {simulate,oracle,replay,report,presets}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The default worker count comes from the ``EPSGREEDY_THREADS`` environment
variable (1 when unset); outputs never depend on it.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import RunConfig, canonical_json, config_hash, list_presets, load_config
from .errors import ConfigError, LogFormatError
from .experiment import (
    Targets,
    _generator,
    aggregate,
    compute_targets,
    least_false_oracle,
    run_experiment,
)
from .replay import load_log, make_synthetic_log, replay_run

__all__ = ["main", "build_parser", "THREADS_ENV"]

THREADS_ENV = "EPSGREEDY_THREADS"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

PARAM_COLUMNS = ["replication", "t", "arm", "coordinate", "estimate", "se", "ci_lo", "ci_hi",
                 "target", "covered"]
VALUE_COLUMNS = ["replication", "t", "estimator", "estimate", "se", "ci_lo", "ci_hi", "target",
                 "covered", "floored", "policy_value", "optimal_value_common"]
REGRET_COLUMNS = ["replication", "t", "R", "R1", "R2"]
FPRIME_COLUMNS = ["replication", "t", "coordinate", "fprime"]

NOTES = {
    "common_draws": "the expected value of the policy in force is integrated over one common "
                    "set of covariate draws per checkpoint, shared by all replications",
}


class UsageError(Exception):
    """Bad command-line usage detected after parsing."""


# --- output helpers -------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if v != v else repr(v)
    return str(v)


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    """Header plus rows; floats in shortest round-trip form, missing values empty."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in columns])


def write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg_dict: dict | None, files: list[str],
                   wall: float, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict) if cfg_dict is not None else None,
        "wall_time_seconds": round(wall, 3),
        "files": [{"name": f, "sha256": _sha256(out / f)} for f in files],
    }
    if extra:
        manifest.update(extra)
    write_json(out / "manifest.json", manifest)


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _threads(arg: int | None) -> int:
    if arg is not None:
        n = arg
    else:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _load(args, **overrides) -> RunConfig:
    return load_config(args.config, args.preset, overrides)


def _target_key(cfg: RunConfig) -> str:
    """Hash of the configuration fields the targets depend on."""
    d = cfg.to_dict()
    return config_hash({k: d[k] for k in ("covariates", "reward", "base_seed", "oracle_n", "value_n")})


# --- commands -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    start = time.perf_counter()
    cfg = _load(args, T=args.T, reps=args.reps, base_seed=args.seed)
    threads = _threads(args.threads)
    out = _out_dir(args.out)
    targets = None
    if args.oracle:
        try:
            cached = json.loads(Path(args.oracle).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read oracle cache {args.oracle}: {exc}", "oracle") from None
        if cached.get("target_key") != _target_key(cfg):
            raise ConfigError("oracle cache was computed for a different model or seed", "oracle")
        targets = Targets.from_dict(cached["targets"])
    res = run_experiment(cfg.experiment, threads=threads, targets=targets)

    write_csv(out / "params.csv", res.params, PARAM_COLUMNS)
    write_csv(out / "value.csv", res.values, VALUE_COLUMNS)
    write_csv(out / "regret.csv", res.regret, REGRET_COLUMNS)
    files = ["params.csv", "value.csv", "regret.csv"]
    if res.fprime:
        rows = [{"replication": rep, "t": t, "coordinate": j, "fprime": v}
                for rep in sorted(res.fprime) for t in sorted(res.fprime[rep])
                for j, v in enumerate(res.fprime[rep][t])]
        write_csv(out / "fprime.csv", rows, FPRIME_COLUMNS)
        files.append("fprime.csv")
    cfg_dict = cfg.to_dict()
    report = {
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "tool_version": __version__,
        "targets": res.targets.to_dict(),
        "summary": res.report,
        "notes": NOTES,
    }
    write_json(out / "report.json", report)
    files.append("report.json")
    write_manifest(out, "simulate", cfg_dict, files, time.perf_counter() - start,
                   {"threads": threads})
    _print_simulate_summary(res)
    return EXIT_OK


def _print_simulate_summary(res) -> None:
    t_last = res.config.checkpoints[-1]
    print(f"reps={res.config.reps} T={res.config.T} targets={res.targets.source}")
    for row in res.report["params"]:
        if row["t"] == t_last:
            ratio = row["se_ratio"]
            print(f"  t={t_last} arm={row['arm']} j={row['coordinate']} bias={row['bias']:+.5f} "
                  f"coverage={row['coverage']:.3f} se/mcsd="
                  + (f"{ratio:.3f}" if ratio is not None else "n/a"))
    for row in res.report["values"]:
        if row["t"] == t_last and "coverage" in row:
            print(f"  value {row['estimator']}: bias={row['bias']:+.5f} coverage={row['coverage']:.3f}")


def cmd_oracle(args) -> int:
    cfg = _load(args, base_seed=args.seed)
    exp = cfg.experiment
    targets = compute_targets(exp)
    payload = {"target_key": _target_key(cfg), "config": cfg.to_dict(),
               "targets": targets.to_dict()}
    if not exp.reward.is_linear:
        payload["oracle_n"] = exp.oracle_n
    else:
        # the fit still documents that the oracle recovers a linear truth
        check = least_false_oracle(exp.reward, exp.cov, exp.oracle_n, exp.base_seed)
        payload["linear_check"] = {
            "beta0": [float(v) for v in check.beta0], "beta1": [float(v) for v in check.beta1],
            "beta0_se": [float(v) for v in check.se0], "beta1_se": [float(v) for v in check.se1],
        }
    print(json.dumps(targets.to_dict(), indent=2, sort_keys=True))
    if args.out:
        path = Path(args.out)
        if path.parent and not path.parent.exists():
            raise UsageError(f"directory {path.parent} does not exist")
        write_json(path, payload)
    return EXIT_OK


def cmd_replay(args) -> int:
    start = time.perf_counter()
    if (args.log is None) == (args.make_synthetic is None):
        raise UsageError("give exactly one of --log or --make-synthetic")
    cfg = _load(args, base_seed=args.seed)
    exp = cfg.experiment
    out = _out_dir(args.out)
    files = []
    if args.make_synthetic is not None:
        n = args.make_synthetic
        if n < 1:
            raise UsageError("--make-synthetic needs a positive row count")
        log_path = out / "synthetic_log.csv"
        make_synthetic_log(exp.reward, exp.cov, n, _generator(exp.base_seed, 5), log_path,
                           p=cfg.replay.p, reward_mode=cfg.replay.reward_mode)
        files.append(log_path.name)
    else:
        log_path = Path(args.log)
        if not log_path.is_file():
            raise UsageError(f"log file {log_path} not found")
    report = replay_run(load_log(log_path), exp.policy, exp.base_seed, kernel=exp.kernel,
                        level=exp.level, keep_trajectory=True)
    d = len(report.beta0) if report.beta0 else exp.dim
    cols = ["t", "line"] + [f"x{j}" for j in range(1, d + 1)] + ["a", "y", "pi", "eps", "greedy"]
    write_csv(out / "matched.csv", report.trajectory, cols)
    cfg_dict = cfg.to_dict()
    write_json(out / "replay.json", {"config": cfg_dict, "config_hash": config_hash(cfg_dict),
                                     "tool_version": __version__, "log": log_path.name,
                                     "report": report.to_dict()})
    files += ["matched.csv", "replay.json"]
    write_manifest(out, "replay", cfg_dict, files, time.perf_counter() - start)
    r = report
    print(f"records={r.n_total} matched={r.n_matched} ({r.match_fraction:.4f})")
    print(f"matched mean={r.matched_value_mean:.5f} baseline mean={r.baseline_value_mean:.5f} "
          f"lift={r.lift:+.5f} (se {r.lift_se:.5f})")
    if r.ipw_value is not None:
        print(f"IPW value={r.ipw_value:.5f} (se {r.ipw_se:.5f})")
    else:
        print("estimates not ready: too few matched records per arm")
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.dir)
    needed = ["params.csv", "value.csv", "regret.csv"]
    for name in needed:
        if not (src / name).is_file():
            raise UsageError(f"{src / name} not found")
    try:
        P = pd.read_csv(src / "params.csv")
        V = pd.read_csv(src / "value.csv")
        R = pd.read_csv(src / "regret.csv")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot parse CSV input: {exc}") from None
    for df, cols, name in ((P, PARAM_COLUMNS, "params.csv"), (V, VALUE_COLUMNS, "value.csv"),
                           (R, REGRET_COLUMNS, "regret.csv")):
        missing = [c for c in cols if c not in df.columns]
        if missing:
            raise UsageError(f"{name} lacks columns: {', '.join(missing)}")
    summary = aggregate(P, V, R)
    if args.out:
        write_json(Path(args.out), {"summary": summary})
    else:
        print(canonical_json(summary))
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in list_presets():
        print(name)
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def _add_config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--config", help="path to a JSON configuration file")
    g.add_argument("--preset", help="name of a bundled configuration (see `presets`)")
    p.add_argument("--seed", type=int, default=None, help="override base_seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epsgreedy", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run Monte Carlo replications and write CSV/JSON outputs")
    _add_config_args(p)
    p.add_argument("--reps", type=int, default=None, help="override the replication count")
    p.add_argument("--T", type=int, default=None, help="override the horizon")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker processes (default ${THREADS_ENV} or 1)")
    p.add_argument("--oracle", default=None, help="reuse targets cached by `oracle --out`")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle", help="compute coefficient targets and the optimal value")
    _add_config_args(p)
    p.add_argument("--out", default=None, help="write the targets to this JSON file")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("replay", help="evaluate the policy on a logged randomized dataset")
    _add_config_args(p)
    p.add_argument("--log", default=None, help="CSV log with header x1..xd,a,y,p")
    p.add_argument("--make-synthetic", type=int, default=None, metavar="N",
                   help="generate an N-row uniform log from the configured model, then replay it")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("report", help="re-summarize the CSV outputs of a simulate run")
    p.add_argument("dir", help="directory holding params.csv, value.csv and regret.csv")
    p.add_argument("--out", default=None, help="write the summary JSON here instead of stdout")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("presets", help="list bundled configurations")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, LogFormatError, UsageError) as exc:
        print(f"epsgreedy {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failure: report, do not dump a traceback
        print(f"epsgreedy {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME



def main_entry() -> None:
    """Console-script wrapper that turns the return code into the process exit status."""
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
