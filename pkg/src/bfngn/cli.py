"""Command-line front end.

Commands: ``verify``, ``sweep``, ``wave`` and ``linear-demo``. Parameters
come from an optional INI file (one section per command, flat keys) and are
overridden by flags. Every CSV is accompanied by ``<out>.json`` holding the
resolved configuration, its SHA-256 hash and the seeds, which is enough to
replay the run byte for byte.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__

FLOAT_FMT = "%.8e"

DEFAULTS = {
    "verify": {"seed": "0"},
    "sweep": {"seeds": "7", "gains": "0:5:0.1", "noise": "false", "noise_scale": "1.0",
              "t_final": "60", "n_steps": "6000", "model_error": "true"},
    "wave": {"seed": "0", "n_iters": "4", "h": "0.01", "t_final": "20", "dt": "1e-3",
             "kappa": "2", "schedule": "constant", "noise": "true", "noise_scale": "0.1",
             "init": "zero", "prior": "zero", "warmup_sweeps": "0", "beta": "1"},
    "linear-demo": {"seed": "0", "kappa": "0.5", "max_iters": "100", "tol": "1e-12",
                    "noise_scale": "0.1", "delta": "1e-2", "t_final": "20", "n_steps": "2000"},
}


class UsageError(ValueError):
    """Invalid configuration value."""


def n_threads() -> int:
    """Worker cap from ``BFN_THREADS`` (default 1)."""
    raw = os.environ.get("BFN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"BFN_THREADS must be an integer, got {raw!r}") from exc
    return max(n, 1)


def parse_bool(value: str) -> bool:
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {value!r}")


def parse_float_list(value: str) -> list[float]:
    """``"a:b:step"`` (inclusive of ``b``) or a comma-separated list."""
    value = str(value).strip()
    if ":" in value:
        try:
            a, b, step = (float(v) for v in value.split(":"))
        except ValueError as exc:
            raise UsageError(f"range must be start:stop:step, got {value!r}") from exc
        if step <= 0:
            raise UsageError("range step must be positive")
        n = int(np.floor((b - a) / step + 1e-9)) + 1
        return [round(a + k * step, 12) for k in range(n)]
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected numbers, got {value!r}") from exc


def parse_int_list(value: str) -> list[int]:
    value = str(value).strip()
    try:
        if ".." in value:
            a, b = (int(v) for v in value.split(".."))
            return list(range(a, b + 1))
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected integers, got {value!r}") from exc


def load_config(command: str, path: str | None, overrides: dict) -> dict:
    """Defaults, then the command's INI section, then non-empty flag overrides."""
    cfg = dict(DEFAULTS[command])
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise UsageError(f"cannot read config file {path}")
        if parser.has_section(command):
            for key, val in parser.items(command):
                if key not in cfg:
                    raise UsageError(f"unknown key {key!r} in section [{command}]")
                cfg[key] = val
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = str(val)
    return cfg


def config_hash(command: str, cfg: dict) -> str:
    blob = json.dumps({"command": command, **cfg}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def write_csv(path, header: list[str], rows, int_cols=()) -> None:
    """Fixed-format CSV: integers verbatim, floats with 9 significant digits."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for j, v in enumerate(row):
            cells.append(str(int(v)) if j in int_cols else FLOAT_FMT % float(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def write_metadata(out, command: str, cfg: dict, extra: dict | None = None) -> Path:
    meta = {"command": command, "version": __version__, "config": cfg,
            "config_sha256": config_hash(command, cfg)}
    if extra:
        meta.update(extra)
    path = Path(str(out) + ".json")
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def _check_writable(out) -> None:
    parent = Path(out).resolve().parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise UsageError(f"output directory {parent} is not writable")


def cmd_verify(args, adjoint_fn=None) -> int:
    from .numerics import weighted_adjoint
    from .verify import run_suites

    cfg = load_config("verify", args.config, {"seed": args.seed})
    results = run_suites(args.only, seed=int(cfg["seed"]),
                         adjoint_fn=adjoint_fn or weighted_adjoint)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  cases={r.cases}  worst_margin={r.worst:.3e}")
    report = {"passed": all(r.passed for r in results),
              "checks": [r.as_dict() for r in results]}
    text = json.dumps(report, indent=2)
    if args.out:
        _check_writable(args.out)
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    from .experiments.oscillator import OscillatorSetup, run_oscillator_sweep

    cfg = load_config("sweep", args.config, {"seeds": args.seed})
    gains = parse_float_list(cfg["gains"])
    if not gains:
        raise UsageError("no gains given")
    if any(g < 0 for g in gains):
        raise UsageError("gains must be nonnegative")
    seeds = parse_int_list(cfg["seeds"])
    setup = OscillatorSetup(t_final=float(cfg["t_final"]), n_steps=int(cfg["n_steps"]),
                            noise_scale=float(cfg["noise_scale"]))
    noise = parse_bool(cfg["noise"])
    model_error = parse_bool(cfg["model_error"])
    out = args.out or "sweep.csv"
    _check_writable(out)

    def one(seed):
        table = run_oscillator_sweep(seed, gains, noise=noise, setup=setup,
                                     model_error=model_error)
        return [(k, e, seed) for k, e in table]

    with ThreadPoolExecutor(max_workers=min(n_threads(), len(seeds))) as pool:
        parts = list(pool.map(one, seeds))
    rows = [r for part in parts for r in part]
    write_csv(out, ["kappa", "err", "seed"], rows, int_cols=(2,))
    write_metadata(out, "sweep", cfg, {"seeds": seeds,
                                       "grid": {"t_final": setup.t_final,
                                                "n_steps": setup.n_steps}})
    return 0


def _wave_gain(cfg: dict):
    kappa = float(cfg["kappa"])
    if kappa < 0:
        raise UsageError("kappa must be nonnegative")
    schedule = cfg["schedule"].strip().lower()
    if schedule == "constant":
        return kappa
    if schedule == "harmonic":
        return lambda j: kappa / j
    raise UsageError(f"schedule must be 'constant' or 'harmonic', got {schedule!r}")


def cmd_wave(args) -> int:
    from .bilinear import write_parameter_csv
    from .experiments.wave import WaveSetup, run_wave_experiment

    cfg = load_config("wave", args.config, {"seed": args.seed})
    setup = WaveSetup(h=float(cfg["h"]), t_final=float(cfg["t_final"]), dt=float(cfg["dt"]),
                      kappa=float(cfg["kappa"]), noise=parse_bool(cfg["noise"]),
                      noise_scale=float(cfg["noise_scale"]))
    n_iters = int(cfg["n_iters"])
    if n_iters < 1:
        raise UsageError("n_iters must be >= 1")
    for key in ("init", "prior"):
        if cfg[key] not in ("zero", "truth"):
            raise UsageError(f"{key} must be 'zero' or 'truth', got {cfg[key]!r}")
    out = args.out or "wave.csv"
    _check_writable(out)
    table, _, history = run_wave_experiment(
        int(cfg["seed"]), n_iters, kappa=_wave_gain(cfg), setup=setup, init=cfg["init"],
        warmup_sweeps=int(cfg["warmup_sweeps"]), beta=float(cfg["beta"]),
        prior=cfg["prior"])
    write_csv(out, ["iteration", "param_err", "displ_err", "vel_err"], table, int_cols=(0,))
    write_parameter_csv(history, str(out) + ".theta.csv")
    grid = setup.grid
    write_metadata(out, "wave", cfg, {"seeds": [int(cfg["seed"])],
                                      "grid": {"t_final": grid.t_final, "n_steps": grid.n_steps,
                                               "h": setup.h}})
    return 0


def cmd_linear_demo(args) -> int:
    from .linear import oracle_minimize, run_linear
    from .verify import noisy_problem

    cfg = load_config("linear-demo", args.config, {"seed": args.seed})
    seed = int(cfg["seed"])
    sys_, grid, spec, _, _ = noisy_problem(seed, float(cfg["noise_scale"]), float(cfg["delta"]),
                                           float(cfg["kappa"]), t_final=float(cfg["t_final"]),
                                           n_steps=int(cfg["n_steps"]))
    oracle = oracle_minimize(spec, sys_, grid)
    _, history = run_linear(spec, sys_, spec.kappa, grid, max_iters=int(cfg["max_iters"]),
                            tol=float(cfg["tol"]), oracle=oracle)
    out = args.out or "linear_demo.csv"
    _check_writable(out)
    rows = [(r["iteration"], r["kappa"], r["cost"], r["err_zeta"], r["err_theta"])
            for r in history]
    write_csv(out, ["iteration", "kappa", "cost", "err_zeta", "err_theta"], rows, int_cols=(0,))
    write_metadata(out, "linear-demo", cfg, {"seeds": [seed],
                                             "grid": {"t_final": grid.t_final,
                                                      "n_steps": grid.n_steps}})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bfngn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("verify", "run the randomized verification suites"),
        ("sweep", "oscillator source estimation over a gain sweep"),
        ("wave", "wave-equation inverse potential problem"),
        ("linear-demo", "linear joint estimation against the direct minimizer"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI file; section [%s]" % name)
        p.add_argument("--seed", help="seed (sweep: list such as 1,2,3 or 0..19)")
        p.add_argument("--out", help="output path")
        if name == "verify":
            from .verify import SUITES

            p.add_argument("--only", choices=SUITES, help="run a single suite")
    return parser


COMMANDS = {"verify": cmd_verify, "sweep": cmd_sweep, "wave": cmd_wave,
            "linear-demo": cmd_linear_demo}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    from .linear import InstabilityError, NonIdentifiableError

    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except (InstabilityError, NonIdentifiableError) as exc:
        print(f"bfngn {args.command}: estimation failed: {exc}", file=sys.stderr)
        return 3
    return 2


if __name__ == "__main__":
    sys.exit(main())
