"""``framelet-mp`` command line.

Exit codes: 0 success, 1 a checked inequality or accuracy floor failed,
2 bad input (flags, config file, dataset files).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from importlib import metadata

from . import __version__
from ._kernels import BACKEND
from .errors import DimensionError, ParseError
from .experiments import COMMANDS, write_json

logger = logging.getLogger("framelet_mp")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INPUT = 2

RUN_RECORD = "run.json"
TOOL = "framelet-mp"
_NOT_PARAMS = {"command", "out", "config", "verbose"}


def _common_parser():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mode", choices=("exact", "cheb"), default="exact")
    g.add_argument("--degree", type=int, default=32, help="Chebyshev degree per filter factor")
    g.add_argument("--bank", choices=("haar", "nu"), default="haar")
    g.add_argument("--levels", type=int, default=2, help="framelet levels J")
    g.add_argument("--out", default="fmp_out", help="output directory")
    g.add_argument("--config", help="JSON file of option values; flags given explicitly win")
    g.add_argument("--data", help="dataset directory (graph.edges, features.csv, labels.csv, splits.json)")
    g.add_argument("--ode-rtol", type=float, default=1e-5)
    g.add_argument("--ode-atol", type=float, default=1e-7)
    g.add_argument("--ode-steps", type=int, default=8)
    g.add_argument("--ode-method", choices=("dopri5", "rk4"), default="dopri5")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def _training_args(p, epochs, patience, layers=2):
    p.add_argument("--model", choices=("fmp", "fmp-ode", "gcn"), default="fmp")
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--weight-decay", type=float, default=1e-3)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--layers", type=int, default=layers)
    p.add_argument("--optimizer", choices=("adam", "adamax"), default="adam")
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--patience", type=int, default=patience)
    p.add_argument("--ode-horizon", type=float, default=1.0)


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(prog=TOOL, description="Graph framelet transforms and framelet message passing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("energy-evolution", parents=[common], help="Dirichlet energy across GCN layers and FMP-ODE time")
    p.add_argument("--layers", type=int, default=50)
    p.add_argument("--trace-bound", type=float, default=0.05)
    p.add_argument("--gcn-norm", type=float, default=0.9, help="spectral norm of the random GCN weights")
    p.add_argument("--gcn-width", type=int, default=16, help="hidden width of the GCN layers")
    subs["energy-evolution"] = p

    p = sub.add_parser("node-classify", parents=[common], help="train and evaluate over several seeds")
    p.add_argument("--synthetic", action="store_true", help="use the two-class SBM")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--min-accuracy", type=float, default=None, help="exit 1 when the mean test accuracy is lower")
    _training_args(p, epochs=1000, patience=100)
    subs["node-classify"] = p

    p = sub.add_parser("tightness-report", parents=[common], help="frame bounds of the exact operator set")
    p.add_argument("--probes", type=int, default=16)
    subs["tightness-report"] = p

    p = sub.add_parser("stability-probe", parents=[common], help="perturbation growth against the stability constant")
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--perturb", type=float, default=1e-3)
    p.add_argument("--probes", type=int, default=1)
    p.add_argument("--theta-scale", type=float, default=0.5)
    subs["stability-probe"] = p

    p = sub.add_parser("energy-sandwich", parents=[common], help="one-step energy bounds over random PSD trials")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--trace-bound", type=float, default=1.0)
    subs["energy-sandwich"] = p

    p = sub.add_parser("sweep", parents=[common], help="seeded random hyperparameter search")
    p.add_argument("--budget", type=int, default=20)
    _training_args(p, epochs=200, patience=50)
    subs["sweep"] = p

    p = sub.add_parser("gen-sbm", parents=[common], help="write a two-class SBM dataset directory")
    p.add_argument("--nodes", type=int, default=100)
    p.add_argument("--p-in", type=float, default=0.9)
    p.add_argument("--p-out", type=float, default=0.1)
    p.add_argument("--mu", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=2.0)
    subs["gen-sbm"] = p

    p = sub.add_parser("replay", help="re-run a command from its run.json record")
    p.add_argument("record", help="path to run.json")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    subs["replay"] = p
    return parser, subs


class InputError(ValueError):
    pass


def _apply_config(parser, subs, argv, args):
    if not getattr(args, "config", None):
        return args
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise InputError("config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    known = set(vars(args)) - _NOT_PARAMS
    unknown = set(cfg) - known
    if unknown:
        raise InputError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    subs[args.command].set_defaults(**cfg)
    return parser.parse_args(argv)


def params_of(args):
    params = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_PARAMS}
    if params.get("data"):
        params["data"] = os.path.abspath(params["data"])
    return params


def versions():
    out = {"framelet_mp": __version__, "python": platform.python_version(), "backend": BACKEND}
    for pkg in ("numpy", "scipy", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def config_hash(command, params):
    blob = json.dumps({"command": command, "params": params}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def provenance(command, params):
    return {
        "tool": TOOL,
        "command": command,
        "seed": params.get("seed"),
        "params": params,
        "configHash": config_hash(command, params),
        "versions": versions(),
    }


def execute(command, params, out):
    """Run one command into ``out`` and write its provenance record; returns the exit code."""
    os.makedirs(out, exist_ok=True)
    report, ok = COMMANDS[command](params, out)
    write_json(provenance(command, params), os.path.join(out, RUN_RECORD))
    if not ok:
        logger.error("%s: check failed, see %s", command, out)
    return EXIT_OK if ok else EXIT_FAILED


def load_record(path):
    try:
        with open(path) as fh:
            rec = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read run record {path}: {exc}") from None
    if rec.get("tool") != TOOL or rec.get("command") not in COMMANDS:
        raise InputError(f"{path} is not a {TOOL} run record")
    if rec.get("configHash") != config_hash(rec["command"], rec["params"]):
        raise InputError(f"{path}: config hash does not match its parameters")
    return rec


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "replay":
            rec = load_record(args.record)
            return execute(rec["command"], rec["params"], args.out)
        args = _apply_config(parser, subs, argv, args)
        return execute(args.command, params_of(args), args.out)
    except (InputError, ParseError, DimensionError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"{TOOL}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except AssertionError as exc:
        print(f"{TOOL}: check failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
