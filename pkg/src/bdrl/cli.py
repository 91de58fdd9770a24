"""Command-line entry point: ``bdrl [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from .experiment import ConfigError, ExperimentConfig, SWEEP_KEYS, run, sweep

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("bdrl")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bdrl", description="Boosted distributional RL experiments.")
    p.add_argument("--config", metavar="PATH", help="JSON config file; flags override it")
    p.add_argument("--algo", choices=["bdrl", "drl", "qlearning"])
    p.add_argument("--divergence", choices=["w2", "kl", "js"])
    p.add_argument("--lambda", dest="lam", type=float, metavar="R")
    p.add_argument("--epsilon", type=str, metavar="R", help="projection tolerance; 'inf' disables it")
    p.add_argument("--rho", type=float, metavar="R")
    p.add_argument("--alpha-floor", type=float, metavar="R")
    p.add_argument("--groups", metavar="INT|auto")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--agents", type=int)
    p.add_argument("--seed", type=int, metavar="UINT64")
    p.add_argument("--workers", type=int)
    p.add_argument("--mc-samples", type=int, help="Monte Carlo rollouts per agent for batch means")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--sweep", action="append", default=[], metavar="KEY=V1,V2,...",
                   help=f"sweep one of {', '.join(SWEEP_KEYS)}; repeat for a grid")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _merge(args: argparse.Namespace) -> Dict[str, Any]:
    d: Dict[str, Any] = {}
    if args.config:
        try:
            with open(args.config) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("--config", str(exc)) from None
        if not isinstance(d, dict):
            raise ConfigError("--config", "top level must be an object")

    def sub(key):
        return d.setdefault(key, {})

    if args.algo:
        d["algo"] = args.algo
    if args.seed is not None:
        d["seed"] = args.seed
    if args.agents is not None:
        sub("cohort")["n_agents"] = args.agents
    if args.groups is not None:
        sub("grouping")["k"] = "auto" if args.groups == "auto" else _to_int(args.groups, "--groups")
    t = None
    for flag, key in (("lam", "lam"), ("epochs", "epochs"), ("batch_size", "minibatch_size"),
                      ("divergence", "divergence_penalty"), ("workers", "workers")):
        v = getattr(args, flag)
        if v is not None:
            t = sub("training")
            t[key] = v
    for flag in ("epsilon", "rho", "alpha_floor"):
        v = getattr(args, flag)
        if v is not None:
            sub("training").setdefault("projection", {})[flag] = v
    if args.mc_samples is not None:
        sub("evaluation")["mc_samples"] = args.mc_samples
    if args.out:
        d["out_dir"] = args.out
    for item in args.sweep:
        key, sep, vals = item.partition("=")
        if not sep or not vals:
            raise ConfigError("--sweep", f"expected KEY=V1,V2,..., got {item!r}")
        sub("sweep")[key.strip()] = [v.strip() for v in vals.split(",")]
    return d


def _to_int(v: str, path: str) -> int:
    try:
        return int(v)
    except ValueError:
        raise ConfigError(path, f"expected an integer or 'auto', got {v!r}") from None


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.from_dict(_merge(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg.out_dir is None:
        print("config error: out_dir: an output directory is required (--out)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if cfg.sweep:
            results = sweep(cfg)
        else:
            results = [({}, run(cfg))]
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.exception("run failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for point, rep in results:
        label = ",".join(f"{k}={v}" for k, v in point.items()) or "run"
        vul = [s for lab, s in rep.group_rows if lab == "vulnerable"]
        print(f"{label}: {len(rep.agents)} agents, config {rep.config_hash[:12]}, "
              f"vulnerable mean returns " + ", ".join(f"g{s.group}={s.mean_return:.3f}" for s in vul))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
