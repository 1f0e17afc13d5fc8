"""``condist`` command line: verification sweeps and training runs.

Exit codes: 0 success, 1 verification or training failure, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .checks import EQUIVALENCE_COLUMNS, SELFTEST_SUITES, cramer_selftest, equivalence_case, equivalence_passed
from .mdp import InvalidMdp, build_counterexample, load_mdp, stochastic_chain
from .operators import value_iteration, verify_counterexample
from .trainer import EpisodicEnv, TrainerConfig, TrainingError, q_values, train

log = logging.getLogger("condist")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
ENV_KEYS = {"env", "R", "r", "mdp_file", "start_state", "seeds"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump_json(doc, path: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in columns})


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("CONDIST_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"CONDIST_THREADS must be an integer, got {cap!r}")
    return max(1, min(n, n_jobs))


def _map(fn, items: list) -> list:
    """Ordered map, fanned out over processes when more than one worker is allowed."""
    workers = worker_count(len(items))
    if workers == 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*items)))


# --------------------------------------------------------------------------- verify-counterexample

def cmd_verify_counterexample(args) -> int:
    if not (math.isfinite(args.R) and args.R > 0):
        raise UsageError("--R must be a positive finite number")
    if not 0.0 < args.gamma < 1.0:
        raise UsageError("--gamma must lie in (0, 1)")
    try:
        rep = verify_counterexample(args.R, args.r, eps=args.eps, beta=args.beta, gamma=args.gamma)
    except ValueError as err:
        raise UsageError(str(err))
    doc = rep.to_dict()
    _dump_json(doc, args.out)
    log.info("optimal=%s th=%s tphi=%s", rep.optimal_action, rep.th_action, rep.tphi_action)
    return EXIT_OK if rep.passed else EXIT_FAIL


# --------------------------------------------------------------------------- equivalence

def cmd_equivalence(args) -> int:
    if args.n_mdps < 1:
        raise UsageError("--n-mdps must be at least 1")
    if args.k_max < 1:
        raise UsageError("--k-max must be at least 1")
    rows = _map(equivalence_case, [(i, args.seed, args.k_max, args.family) for i in range(args.n_mdps)])
    if args.out:
        _write_csv(args.out, EQUIVALENCE_COLUMNS, rows)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=EQUIVALENCE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in EQUIVALENCE_COLUMNS})
    bad = [r["instance"] for r in rows if not equivalence_passed(r)]
    log.info("%d instances, worst deviation %.3g", len(rows), max(r["max_dev"] for r in rows))
    if bad:
        log.error("instances above tolerance: %s", bad)
        return EXIT_FAIL
    return EXIT_OK


# --------------------------------------------------------------------------- cramer-selftest

def cmd_cramer_selftest(args) -> int:
    if args.n_cases < 1:
        raise UsageError("--n-cases must be at least 1")
    summary, failure = cramer_selftest(args.n_cases, args.seed, args.inject_fault)
    doc = {"seed": args.seed, "n_cases": args.n_cases, "passed": failure is None, **summary}
    if failure is not None:
        doc["failure"] = failure
    _dump_json(doc, None)
    return EXIT_OK if failure is None else EXIT_FAIL


# --------------------------------------------------------------------------- train

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_train_config(path: str, overrides: list[str], steps: int | None) -> tuple[dict, TrainerConfig]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise UsageError(f"config is not valid JSON: {err}")
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        doc[key] = _parse_value(value)
    if steps is not None:
        doc["total_steps"] = steps
    env = {k: doc[k] for k in ENV_KEYS if k in doc}
    env.setdefault("env", "chain")
    env.setdefault("seeds", [0])
    if not isinstance(env["seeds"], list) or not env["seeds"] or not all(isinstance(s, int) for s in env["seeds"]):
        raise UsageError("seeds must be a nonempty list of integers")
    try:
        cfg = TrainerConfig.from_dict({k: v for k, v in doc.items() if k not in ENV_KEYS})
    except (TypeError, ValueError) as err:
        raise UsageError(f"bad trainer settings: {err}")
    return env, cfg


def build_env_mdp(env: dict, gamma: float):
    kind = env["env"]
    try:
        if kind == "chain":
            return stochastic_chain(gamma=gamma)
        if kind == "counterexample":
            return build_counterexample(float(env.get("R", 10.0)), env.get("r"), gamma=gamma)
        if kind == "file":
            return load_mdp(env["mdp_file"])
    except (InvalidMdp, ValueError, KeyError, OSError) as err:
        raise UsageError(f"cannot build environment: {err}")
    raise UsageError(f"unknown env {kind!r} (expected chain, counterexample or file)")


def _train_seed(env: dict, cfg_dict: dict, seed: int, out_dir: str) -> dict:
    cfg = TrainerConfig.from_dict({**cfg_dict, "seed": seed})
    mdp = build_env_mdp(env, cfg.gamma)
    rec = train(EpisodicEnv(mdp, int(env.get("start_state", 0)), cfg.max_episode_steps), cfg)
    rec.write_csv(Path(out_dir) / f"seed_{seed}.csv")
    Q_star, _ = value_iteration(mdp, tol=1e-12)
    live = mdp.nonterminal_states
    Q = q_values(rec.params, cfg.phi)
    policy = np.argmax(Q, axis=1)
    optimal = np.argmax(Q_star, axis=1)
    agree = float(np.mean(policy[live] == optimal[live]))
    visited = rec.visited if rec.visited is not None else np.zeros_like(Q, dtype=bool)
    err = float(np.abs(Q - Q_star)[visited].max()) if visited.any() else None
    return {
        "seed": seed, "diverged": rec.diverged, "diagnostics": rec.diagnostics,
        "episodes": len(rec.rows), "final_alpha": rec.params.alpha,
        "policy": policy[live].tolist(), "optimal_policy": optimal[live].tolist(), "policy_agreement": agree,
        "q_values": Q[live].tolist(), "max_q_error_visited": err,
        "returns": [row["return"] for row in rec.rows],
    }


def _aggregate(results: list[dict]) -> list[dict]:
    n = max((len(r["returns"]) for r in results), default=0)
    rows = []
    for i in range(n):
        vals = [r["returns"][i] for r in results if i < len(r["returns"])]
        rows.append({"episode": i, "n_seeds": len(vals), "mean_return": float(np.mean(vals)),
                     "min_return": float(min(vals)), "max_return": float(max(vals))})
    return rows


def cmd_train(args) -> int:
    env, cfg = load_train_config(args.config, args.set or [], args.steps)
    build_env_mdp(env, cfg.gamma)  # surface config errors before any work
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise UsageError(f"cannot create output directory: {err}")
    cfg_dict = cfg.to_dict()
    results = _map(_train_seed, [(env, cfg_dict, s, str(out)) for s in env["seeds"]])
    _write_csv(out / "aggregate.csv", ["episode", "n_seeds", "mean_return", "min_return", "max_return"],
               _aggregate(results))
    for r in results:
        del r["returns"]
    summary = {
        "env": env, "config": cfg_dict, "seeds": results,
        "policy_agreement": float(np.mean([r["policy_agreement"] for r in results])),
        "optimal_seeds": sum(r["policy_agreement"] == 1.0 for r in results),
        "diverged_seeds": [r["seed"] for r in results if r["diverged"]],
    }
    _dump_json(summary, str(out / "summary.json"))
    if summary["diverged_seeds"]:
        log.error("training diverged for seeds %s", summary["diverged_seeds"])
        return EXIT_FAIL
    log.info("policy agreement %.3f", summary["policy_agreement"])
    return EXIT_OK


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="condist", description="Conjugated distributional RL toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("verify-counterexample", help="check the transformed-operator counterexample")
    p.add_argument("--R", type=float, required=True, help="large reward of the risky action (> 0)")
    p.add_argument("--r", type=float, default=None, help="sure reward; defaults to the interval midpoint")
    p.add_argument("--eps", type=float, default=0.001)
    p.add_argument("--beta", type=float, default=1.99)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_verify_counterexample)

    p = sub.add_parser("equivalence", help="random-MDP sweep of the expectation equivalences")
    p.add_argument("--n-mdps", type=int, default=100)
    p.add_argument("--k-max", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family", choices=["single", "dense"], default="single",
                   help="single: one non-terminal outcome per row (exact iteration stays small)")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_equivalence)

    p = sub.add_parser("cramer-selftest", help="metric, invariance, oracle and gradient checks")
    p.add_argument("--n-cases", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", choices=SELFTEST_SUITES, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_cramer_selftest)

    p = sub.add_parser("train", help="train C2D agents on a tabular environment")
    p.add_argument("config", help="JSON config (env keys plus trainer settings)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    p.add_argument("--steps", type=int, default=None, help="override total_steps")
    p.set_defaults(func=cmd_train)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as err:
        sys.stderr.write(f"condist: error: {err}\n")
        return EXIT_USAGE
    except TrainingError as err:
        sys.stderr.write(f"condist: training failed: {err}\n")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
