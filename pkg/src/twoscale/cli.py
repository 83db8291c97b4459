"""Command-line interface: ``twoscale <command> [options]``.

Every command writes its outputs and a ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 computation failed (or validation did not pass),
2 bad configuration or unreadable model file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .averaging import AveragedFlow, mckean_vlasov_flow
from .core import ToleranceConfig
from .model import ModelConfigError, load_model, retrial_model, toy_model, validate, wlan_model
from .simulator import TiltSpec, initial_state, occupation, simulate

logger = logging.getLogger("twoscale")

BUILTINS = {"retrial": retrial_model, "wlan": wlan_model, "toy": toy_model}


class ConfigError(ValueError):
    """Invalid command-line configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# argument helpers


def _number(text):
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"not a number: {text!r}") from None
    return int(v) if v.is_integer() and "." not in text and "e" not in text.lower() else v


def _parse_param(item):
    if "=" not in item:
        raise ConfigError(f"--param expects key=value, got {item!r}")
    key, val = item.split("=", 1)
    if "," in val:
        return key.strip(), tuple(_number(v) for v in val.split(","))
    return key.strip(), _number(val)


def _vector(text, n, name):
    if text is None:
        return np.full(n, 1.0 / n)
    try:
        v = np.array([float(s) for s in text.split(",")])
    except ValueError:
        raise ConfigError(f"--{name}: expected comma-separated numbers") from None
    if v.size != n:
        raise ConfigError(f"--{name}: expected {n} entries, got {v.size}")
    if v.min() < 0 or abs(v.sum() - 1.0) > 1e-9:
        raise ConfigError(f"--{name}: must be a probability vector")
    return v


def _positive(args, *names):
    for name in names:
        v = getattr(args, name, None)
        if v is not None and not v > 0:
            raise ConfigError(f"--{name.replace('_', '-')} must be positive")


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("TWOSCALE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"TWOSCALE_SEED is not an integer: {env!r}") from None


def _load(args):
    if (args.model is None) == (args.builtin is None):
        raise ConfigError("give exactly one of --model or --builtin")
    if args.model is not None:
        if args.param:
            raise ConfigError("--param only applies to --builtin models")
        return load_model(args.model)
    params = dict(_parse_param(p) for p in args.param)
    try:
        return BUILTINS[args.builtin](**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad parameters for {args.builtin}: {exc}") from None


def _tilt(model, alpha, g):
    a = np.zeros(model.nx) if alpha is None else np.array([float(s) for s in alpha.split(",")])
    gg = np.zeros(model.ny) if g is None else np.array([float(s) for s in g.split(",")])
    if a.size != model.nx or gg.size != model.ny:
        raise ConfigError("tilt dimensions do not match the model")
    return TiltSpec(a, gg)


def _env_index(model, text):
    labels = [str(v) for v in model.fast_graph.vertices]
    if str(text) in labels:
        return labels.index(str(text))
    try:
        k = int(text)
    except ValueError:
        raise ConfigError(f"unknown environment state {text!r}") from None
    if not 0 <= k < model.ny:
        raise ConfigError(f"environment index {k} out of range")
    return k


class _Outputs:
    """Tracks files written by a command so they can be removed on failure."""

    def __init__(self, root):
        self.root = Path(root)
        self.created_root = not self.root.exists()
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def path(self, name):
        p = self.root / name
        self.files.append(p)
        return p

    def discard(self):
        for p in self.files:
            p.unlink(missing_ok=True)
        if self.created_root and not any(self.root.iterdir()):
            self.root.rmdir()


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args, model, out, seed):
    report = validate(model, samples=args.samples, seed=seed)
    with open(out.path("validation.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    return 0 if report.passes() else 1


def cmd_simulate(args, model, out, seed):
    _positive(args, "N", "T", "grid_step")
    nu = _vector(args.nu, model.nx, "nu")
    env = _env_index(model, args.env)
    path = simulate(model, args.N, initial_state(model, args.N, nu, env), args.T, seed)
    path.to_csv(out.path("path.csv"), model.slow_graph.vertices, model.fast_graph.vertices)
    occupation(path, args.grid_step, model.ny).to_csv(out.path("occupation.csv"), model.fast_graph.vertices)
    return 0


def cmd_ode(args, model, out, seed):
    _positive(args, "T", "step")
    flow = mckean_vlasov_flow(model, _vector(args.nu, model.nx, "nu"), args.T, args.step)
    flow.to_csv(out.path("flow.csv"))
    return 0


def cmd_rate(args, model, out, seed):
    from .ratefn import path_rate

    _positive(args, "T", "step")
    if args.flow is not None:
        flow = AveragedFlow.from_csv(args.flow)
        if flow.mu.shape[1] != model.nx or flow.pi.shape[1] != model.ny:
            raise ConfigError("flow file does not match the model dimensions")
    else:
        flow = mckean_vlasov_flow(model, _vector(args.nu, model.nx, "nu"), args.T, args.step)
    tol = ToleranceConfig(solver_grad_tol=args.grad_tol, quadrature_step=flow.step)
    report = path_rate(model, flow.mu, flow.pi, flow.step, tol)
    report.to_json(out.path("rate.json"))
    report.optimizers_to_csv(out.path("optimizers.csv"), model.slow_graph.vertices, model.fast_graph.vertices)
    return 0


def cmd_probe(args, model, out, seed):
    from . import probe

    _positive(args, "T", "replicas", "delta", "window", "grid_step")
    nu = _vector(args.nu, model.nx, "nu")
    Ns = [int(n) for n in args.Ns.split(",")]
    if min(Ns) < 1:
        raise ConfigError("--Ns must be positive")
    if args.kind == "averaging":
        rep = probe.averaging_check(model, nu, Ns, args.T, args.replicas, seed, args.grid_step, threads=args.threads)
        data = rep.to_dict()
    elif args.kind == "occupation":
        data = [
            probe.occupation_check(model, nu, N, args.T, args.window, args.replicas, seed, threads=args.threads).to_dict()
            for N in Ns
        ]
    else:
        tilt = _tilt(model, args.alpha, args.g)
        rep = probe.exponent_probe(
            model, nu, tilt, args.delta, Ns, args.replicas, seed, args.T, grid_step=args.grid_step, threads=args.threads
        )
        rep.hits_to_csv(out.path("tube_hits.csv"))
        data = rep.to_dict()
    with open(out.path(f"probe_{args.kind}.json"), "w") as fh:
        json.dump(data, fh, indent=1)
    return 0


def cmd_martingale(args, model, out, seed):
    from .probe import martingale_battery

    _positive(args, "N", "T", "replicas")
    alphas = args.alpha or [None]
    gs = args.g or [None] * len(alphas)
    if len(gs) != len(alphas):
        raise ConfigError("give --alpha and --g the same number of times")
    tilts = [_tilt(model, a, g) for a, g in zip(alphas, gs)]
    if any(t.sup_norm() > 0.5 for t in tilts):
        raise ConfigError("tilts must have sup-norm at most 0.5")
    rep = martingale_battery(
        model, args.N, args.T, tilts, args.replicas, seed, compensator=args.compensator, threads=args.threads
    )
    with open(out.path("martingale.json"), "w") as fh:
        json.dump(rep.to_dict(), fh, indent=1)
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "ode": cmd_ode,
    "rate": cmd_rate,
    "probe": cmd_probe,
    "martingale": cmd_martingale,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", help="JSON model file")
    common.add_argument("--builtin", choices=sorted(BUILTINS))
    common.add_argument("--param", action="append", default=[], metavar="K=V", help="builtin parameter (repeatable)")
    common.add_argument("--seed", type=int, help="random seed (default: $TWOSCALE_SEED or 0)")
    common.add_argument("--out", default="twoscale_out", help="output directory")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="twoscale", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", parents=[common], help="check model assumptions")
    s.add_argument("--samples", type=int, default=256)

    s = sub.add_parser("simulate", parents=[common], help="simulate one path")
    s.add_argument("--N", type=int, required=True)
    s.add_argument("--T", type=float, required=True)
    s.add_argument("--nu", help="initial law, comma-separated (default uniform)")
    s.add_argument("--env", default=0, help="initial environment state (label or index)")
    s.add_argument("--grid-step", type=float, default=0.01)

    s = sub.add_parser("ode", parents=[common], help="integrate the McKean-Vlasov flow")
    s.add_argument("--T", type=float, required=True)
    s.add_argument("--step", type=float, default=1e-3)
    s.add_argument("--nu")

    s = sub.add_parser("rate", parents=[common], help="rate functional of a path")
    s.add_argument("--flow", help="CSV with t, mu_*, pi_*/theta_* columns (default: McKean-Vlasov flow)")
    s.add_argument("--T", type=float, default=1.0)
    s.add_argument("--step", type=float, default=1e-3)
    s.add_argument("--nu")
    s.add_argument("--grad-tol", type=float, default=1e-8)

    s = sub.add_parser("probe", parents=[common], help="Monte Carlo probes")
    s.add_argument("--kind", choices=["averaging", "occupation", "exponent"], required=True)
    s.add_argument("--Ns", default="100,400,1600")
    s.add_argument("--T", type=float, default=1.0)
    s.add_argument("--replicas", type=int, default=50)
    s.add_argument("--nu")
    s.add_argument("--window", type=float, default=0.1)
    s.add_argument("--delta", type=float, default=0.08)
    s.add_argument("--grid-step", type=float, default=0.01)
    s.add_argument("--alpha", help="slow tilt, comma-separated")
    s.add_argument("--g", help="environment tilt, comma-separated")

    s = sub.add_parser("martingale", parents=[common], help="exponential martingale check")
    s.add_argument("--N", type=int, required=True)
    s.add_argument("--T", type=float, required=True)
    s.add_argument("--replicas", type=int, default=10_000)
    s.add_argument("--alpha", action="append", help="slow tilt (repeatable, one per tilt)")
    s.add_argument("--g", action="append", help="environment tilt (repeatable)")
    s.add_argument("--compensator", choices=["full", "no_tau"], default="full")
    return p


def _versions():
    import numba
    import scipy

    return {
        "twoscale": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    start = time.perf_counter()
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        seed = _seed(args)
        model = _load(args)
    except (ConfigError, ModelConfigError, OSError) as exc:
        print(f"twoscale: error: {exc}", file=sys.stderr)
        return 2
    out = _Outputs(args.out)
    try:
        code = COMMANDS[args.command](args, model, out, seed)
    except ConfigError as exc:
        out.discard()
        print(f"twoscale: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # module failures surface as exit code 1
        out.discard()
        print(f"twoscale: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    config = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    config["seed"] = seed
    manifest = {
        "command": args.command,
        "config": config,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "model": model.name,
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - start,
        "outputs": [p.name for p in out.files],
        "exit_code": code,
    }
    with open(out.root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, default=str)
    return code


if __name__ == "__main__":
    sys.exit(main())
