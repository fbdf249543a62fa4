"""Command-line pipeline: generate | train | rollout | validate | replay.

Options resolve as built-in defaults < ``--config`` file (YAML/JSON mapping of
option names) < explicit flags.  Every output gets a provenance sidecar
holding the fully resolved options, which ``replay`` re-executes.

Exit codes: 0 success, 2 configuration error, 3 numerical/simulation failure,
4 training divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import PairDataset, build_pairs
from .errors import (
    ConfigurationError,
    IntegrationBlowup,
    NumericalInstability,
    RolloutDiverged,
    SFMLError,
    ShapeError,
    TrainingDiverged,
    UnsupportedSystemError,
)
from .flow import FlowModel
from .metrics import compare, derive_seed, rollout_ensemble
from .svg import paths_plot
from .systems import get_system
from .train import TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DIVERGED = 0, 2, 3, 4

DEFAULTS = {
    "generate": {"system": None, "pairs": 40_000, "T": 1.0, "dt": 1e-4, "lag": 0.01, "seed": None,
                 "out": None, "domain": None, "csv": False},
    "train": {"data": None, "iters": 200_000, "batch": 30_000, "seed": None, "out": None,
              "checkpoint_every": 1000, "layers": 5, "lr_base": 3e-4, "lr_max": 5e-4,
              "val_fraction": 0.1, "hypernetwork_only": False, "no_standardize": False},
    "rollout": {"model": None, "x0": None, "T": None, "steps": None, "paths": 10, "seed": None, "out": None,
                "plot": True},
    "validate": {"model": None, "system": None, "x0": None, "T": 4.0, "ensemble": 10_000, "checkpoints": "",
                 "seed": None, "out": None, "dt": 1e-4, "self_test": False},
}


class CLIError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _floats(text, name):
    if text is None or text == "":
        return []
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise CLIError(f"--{name}: expected comma-separated numbers, got {text!r}") from None


def _domain(text):
    """``"a,b;c,d;..."`` (or a list of pairs) -> list of intervals."""
    if text is None:
        return None
    if isinstance(text, list):
        return [tuple(map(float, iv)) for iv in text]
    try:
        return [tuple(float(v) for v in part.split(",")) for part in str(text).split(";")]
    except ValueError:
        raise CLIError(f"--domain: cannot parse {text!r}") from None


def resolve(command: str, ns: argparse.Namespace) -> dict:
    opts = dict(DEFAULTS[command])
    if getattr(ns, "config", None):
        data = yaml.safe_load(Path(ns.config).read_text()) or {}
        data = data.get(command, data)
        unknown = set(data) - set(opts) - {"threads"}
        if unknown:
            raise CLIError(f"unknown options in {ns.config}: {sorted(unknown)}")
        opts.update({k: v for k, v in data.items() if k in opts})
    for key in opts:
        val = getattr(ns, key, None)
        if val is not None:
            opts[key] = val
    if opts.get("seed") is None:
        raise CLIError("--seed is required (no implicit entropy)")
    if opts.get("out") is None:
        raise CLIError("--out is required")
    return opts


def write_sidecar(path: Path, command: str, opts: dict) -> Path:
    side = Path(str(path) + ".provenance.json") if not Path(path).is_dir() else Path(path) / "provenance.json"
    side.write_text(json.dumps({"command": command, "options": opts, "version": __version__},
                               indent=2, sort_keys=True))
    return side


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(opts: dict) -> int:
    if opts["system"] is None:
        raise CLIError("--system is required")
    if int(opts["pairs"]) < 1:
        raise CLIError("--pairs must be at least 1")
    try:
        spec = get_system(opts["system"])
    except UnsupportedSystemError as exc:
        raise CLIError(str(exc)) from None
    try:
        ds = build_pairs(spec, int(opts["pairs"]), float(opts["T"]), float(opts["lag"]), int(opts["seed"]),
                         float(opts["dt"]), _domain(opts["domain"]))
    except ConfigurationError as exc:
        raise CLIError(str(exc)) from None
    except IntegrationBlowup as exc:
        raise CLIError(f"integration blew up on trajectory {exc.trajectory}: {exc}", EXIT_NUMERIC) from None
    out = Path(opts["out"])
    ds.save(out)
    if opts["csv"]:
        ds.to_csv(out.with_suffix(out.suffix + ".csv"))
    write_sidecar(out, "generate", opts)
    print(f"wrote {ds.M} pairs ({ds.meta['n_trajectories']} bursts of {ds.pairs_per_trajectory}) to {out}")
    return EXIT_OK


def cmd_train(opts: dict) -> int:
    if opts["data"] is None:
        raise CLIError("--data is required")
    try:
        ds = PairDataset.load(opts["data"])
    except (OSError, ShapeError, ValueError) as exc:
        raise CLIError(f"cannot read dataset {opts['data']}: {exc}") from None
    try:
        cfg = TrainConfig(
            iterations=int(opts["iters"]), batch_size=int(opts["batch"]), seed=int(opts["seed"]),
            checkpoint_every=int(opts["checkpoint_every"]), n_layers=int(opts["layers"]),
            base_lr=float(opts["lr_base"]), max_lr=float(opts["lr_max"]),
            val_fraction=float(opts["val_fraction"]), autoregressive=not opts["hypernetwork_only"],
            standardize=not opts["no_standardize"],
        )
    except ConfigurationError as exc:
        raise CLIError(str(exc)) from None
    out = Path(opts["out"])
    try:
        model, report = train(ds, cfg)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            exc.last_good.save(out / "last_good")
        raise CLIError(f"training diverged at iteration {exc.iteration}: {exc}", EXIT_DIVERGED) from None
    model.save(out)
    # the last iterate alongside the best-validation one
    if report.final_params is not None:
        model.with_params(report.final_params).save(out / "final")
    report.to_csv(out / "report.csv")
    write_sidecar(out, "train", opts)
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    final_val = report.rows[-1]["nll_val"]
    print(f"final validation NLL {final_val!r} (best {report.best_val_nll!r} at iteration {report.best_iteration})")
    return EXIT_OK


def _load_model(path) -> FlowModel:
    try:
        return FlowModel.load(path)
    except (OSError, ShapeError, ValueError, KeyError) as exc:
        raise CLIError(f"cannot read model {path}: {exc}") from None


def cmd_rollout(opts: dict) -> int:
    model = _load_model(opts["model"])
    x0 = _floats(opts["x0"], "x0")
    if len(x0) != model.dim:
        raise CLIError(f"--x0 needs {model.dim} values")
    lag = model.lag or 0.01
    if opts["steps"] is not None:
        n_steps = int(opts["steps"])
    elif opts["T"] is not None:
        n_steps = round(float(opts["T"]) / lag)
    else:
        raise CLIError("give --T or --steps")
    n_paths = int(opts["paths"])
    if n_steps < 0 or n_paths < 1:
        raise CLIError("--steps must be >= 0 and --paths >= 1")
    try:
        paths = rollout_ensemble(model, np.array(x0), n_steps, n_paths, derive_seed(int(opts["seed"]), 7))
    except (RolloutDiverged, NumericalInstability) as exc:
        raise CLIError(f"rollout diverged at step {getattr(exc, 'step', '?')}: {exc}", EXIT_NUMERIC) from None
    out = Path(opts["out"])
    t = np.arange(n_steps + 1) * lag
    with out.open("w") as fh:
        fh.write(",".join(["path", "step", "t"] + [f"x{j + 1}" for j in range(model.dim)]) + "\n")
        for i in range(n_paths):
            for k in range(n_steps + 1):
                fh.write(",".join([str(i), str(k), repr(float(t[k]))] + [repr(float(v)) for v in paths[i, k]]) + "\n")
    if opts["plot"] and n_steps > 0:
        for j in range(model.dim):
            paths_plot(out.with_name(f"{out.stem}_x{j + 1}.svg"), t, paths[: min(n_paths, 50), :, j],
                       title=f"sFML sample paths of x{j + 1}", ylabel=f"x{j + 1}")
    write_sidecar(out, "rollout", opts)
    print(f"wrote {n_paths} paths of {n_steps} steps to {out}")
    return EXIT_OK


def cmd_validate(opts: dict) -> int:
    if opts["system"] is None:
        raise CLIError("--system is required")
    try:
        spec = get_system(opts["system"])
    except UnsupportedSystemError as exc:
        raise CLIError(str(exc)) from None
    model = None
    if not opts["self_test"]:
        if opts["model"] is None:
            raise CLIError("--model is required unless --self-test is given")
        model = _load_model(opts["model"])
        if model.dim != spec.dim_slow:
            raise CLIError(f"model has {model.dim} slow coordinates, {spec.id} has {spec.dim_slow}")
    x0 = _floats(opts["x0"], "x0")
    if len(x0) != spec.dim_slow:
        raise CLIError(f"--x0 needs {spec.dim_slow} values")
    checkpoints = _floats(opts["checkpoints"], "checkpoints")
    try:
        report = compare(model, spec, np.array(x0), float(opts["T"]), int(opts["ensemble"]), checkpoints,
                         int(opts["seed"]), float(opts["dt"]), self_test=bool(opts["self_test"]))
    except ShapeError as exc:
        raise CLIError(str(exc)) from None
    except (IntegrationBlowup, RolloutDiverged, NumericalInstability) as exc:
        raise CLIError(str(exc), EXIT_NUMERIC) from None
    out = Path(opts["out"])
    report.write(out)
    write_sidecar(out, "validate", opts)
    s = report.summary()
    print(json.dumps(s, indent=2))
    if opts["self_test"] and s["max_ks"] and max(s["max_ks"]) > s["ks_critical_0.01"]:
        print("self-test: KS above critical value", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "rollout": cmd_rollout, "validate": cmd_validate}


def cmd_replay(sidecar, out=None) -> int:
    try:
        record = json.loads(Path(sidecar).read_text())
        command, opts = record["command"], dict(record["options"])
    except (OSError, ValueError, KeyError) as exc:
        raise CLIError(f"cannot read sidecar {sidecar}: {exc}") from None
    if command not in COMMANDS:
        raise CLIError(f"sidecar names unknown command {command!r}")
    if out is not None:
        opts["out"] = str(out)
    return COMMANDS[command](opts)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfml", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML/JSON file of option values")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--threads", type=int, help="cap on BLAS threads")

    g = sub.add_parser("generate", help="simulate bursts and write a pair dataset")
    common(g)
    g.add_argument("--system")
    g.add_argument("--pairs", type=int)
    g.add_argument("--T", type=float)
    g.add_argument("--dt", type=float)
    g.add_argument("--lag", type=float)
    g.add_argument("--domain", help='initial-condition box, e.g. "-1.5,2;-1,1.6"')
    g.add_argument("--csv", action="store_true", default=None)

    t = sub.add_parser("train", help="fit the conditional flow")
    common(t)
    t.add_argument("--data")
    t.add_argument("--iters", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--lr-base", dest="lr_base", type=float)
    t.add_argument("--lr-max", dest="lr_max", type=float)
    t.add_argument("--val-fraction", dest="val_fraction", type=float)
    t.add_argument("--hypernetwork-only", dest="hypernetwork_only", action="store_true", default=None)
    t.add_argument("--no-standardize", dest="no_standardize", action="store_true", default=None)

    r = sub.add_parser("rollout", help="sample paths from a trained model")
    common(r)
    r.add_argument("--model")
    r.add_argument("--x0")
    r.add_argument("--T", type=float)
    r.add_argument("--steps", type=int)
    r.add_argument("--paths", type=int)
    r.add_argument("--no-plot", dest="plot", action="store_false", default=None)

    v = sub.add_parser("validate", help="compare model and ground-truth ensembles")
    common(v)
    v.add_argument("--model")
    v.add_argument("--system")
    v.add_argument("--x0")
    v.add_argument("--T", type=float)
    v.add_argument("--ensemble", type=int)
    v.add_argument("--checkpoints")
    v.add_argument("--dt", type=float)
    v.add_argument("--self-test", dest="self_test", action="store_true", default=None)

    rp = sub.add_parser("replay", help="re-run the command recorded in a provenance sidecar")
    rp.add_argument("sidecar")
    rp.add_argument("--out")
    rp.add_argument("--threads", type=int)
    return p


def _thread_limit(n):
    if not n:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        with _thread_limit(getattr(ns, "threads", None)):
            if ns.command == "replay":
                return cmd_replay(ns.sidecar, ns.out)
            return COMMANDS[ns.command](resolve(ns.command, ns))
    except CLIError as exc:
        print(f"sfml {ns.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigurationError, ShapeError, UnsupportedSystemError) as exc:
        print(f"sfml {ns.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SFMLError as exc:
        print(f"sfml {ns.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
