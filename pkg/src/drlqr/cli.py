"""Command-line front end: ``drlqr {verify,entropic,sgd,diagnose,eval}``.

Exit codes: 0 success, 2 config error, 3 instability, 4 non-convergence,
1 anything else.  Failures print one JSON line on stderr, e.g.
``{"error": "instability", "message": "...", "run_id": "M10_s003"}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import experiments
from .config import ConfigError, ExperimentConfig
from .control_core import ConvergenceError, InstabilityError
from .systems import DimensionError

EXIT_CODES = {"config": 2, "instability": 3, "convergence": 4, "internal": 1}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drlqr", description="Policy gradient for domain-randomized LQR.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "verify": "discount annealing over (M, seed); gap of J_DR versus M",
        "entropic": "entropic-risk policy gradient",
        "sgd": "stochastic gradient descent against a batch baseline",
        "diagnose": "heterogeneity, boundedness and iteration-budget report",
        "eval": "cost and gradient of one gain on the config's sample set",
    }
    for name, text in helps.items():
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="YAML config; omitted keys take their defaults")
        s.add_argument("--seeds", type=int, help="number of seeds expanded from master_seed")
        s.add_argument("--out", help="output directory")
        s.add_argument("--threads", type=int, help="worker threads for independent runs")
        if name == "eval":
            g = s.add_mutually_exclusive_group(required=True)
            g.add_argument("--gain", help='raw-frame gain as JSON, e.g. "[[-20, -6]]"')
            g.add_argument("--gain-file", help="JSON file holding a gain matrix")
            s.add_argument("--m", type=int, help="sample count (default: first verify.m_list entry)")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seeds is not None:
        cfg.seeds = args.seeds
    if args.out is not None:
        cfg.out_dir = args.out
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg.validate()


def _read_gain(args) -> np.ndarray:
    try:
        text = args.gain if args.gain is not None else open(args.gain_file).read()
        return np.atleast_2d(np.asarray(json.loads(text), dtype=float))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read gain: {exc}") from None


def _category(exc: BaseException) -> str:
    if isinstance(exc, experiments.RunFailed) and exc.__cause__ is not None:
        return _category(exc.__cause__)
    if isinstance(exc, (ConfigError, DimensionError)):
        return "config"
    if isinstance(exc, InstabilityError):
        return "instability"
    if isinstance(exc, ConvergenceError):
        return "convergence"
    return "internal"


def run(args) -> None:
    cfg = load_config(args)
    if args.command == "verify":
        art = experiments.run_verify(cfg)
        for g in art.extra["gap_vs_m"]:
            print(f"M = {g['m']:>5}: median J_DR gap {g['median']:.6g} [{g['q25']:.6g}, {g['q75']:.6g}]")
    elif args.command == "entropic":
        art = experiments.run_entropic(cfg)
        for row in art.summary:
            print(f"{row['run_id']}: J_ER {row['j_er_final']:.6g}, grad {row['grad_norm_final']:.3e}, "
                  f"converged {row['converged']}")
    elif args.command == "sgd":
        art = experiments.run_sgd(cfg)
        print(f"SGD mean final J_DR {art.extra['mean_final_j_dr']:.6g}; "
              f"batch baseline {art.extra['baseline_j_dr']:.6g}")
    elif args.command == "diagnose":
        _, text = experiments.run_diagnose(cfg)
        print(text)
        return
    else:
        result = experiments.run_eval(cfg, _read_gain(args), args.m)
        print(json.dumps(result))
        if not result["stabilizing"]:
            raise InstabilityError(f"gain is not stabilizing (max rho = {result['max_rho']:.6g})")
        return
    print(f"artifacts written to {art.out_dir}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run(args)
    except Exception as exc:
        category = _category(exc)
        payload = {"error": category, "message": str(exc)}
        if isinstance(exc, experiments.RunFailed):
            payload["run_id"] = exc.run_id
        print(json.dumps(payload), file=sys.stderr)
        if category == "internal" and args.verbose:
            raise
        return EXIT_CODES[category]
    return 0


if __name__ == "__main__":
    sys.exit(main())
