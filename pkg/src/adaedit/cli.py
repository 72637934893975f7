"""Command-line drivers: single edits, reconstructions, schedule/temperature
sweeps, solver-order studies, and ablation grids.

All commands are deterministic byte-for-byte given the config (the manifest
timestamp is the one exception). Exit codes: 0 success, 2 config error,
3 runtime divergence, 4 acceptance-check failure.

Configs are JSON documents mirroring EditConfig field names; single scalar
fields can be overridden with --set key=value, and the ADAEDIT_SEED
environment variable overrides the seed last.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import typing
from dataclasses import dataclass, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .errors import ConfigError, DivergenceError
from .models import AnalyticLinearFlow
from .latent import Latent
from .perturbation import PerturbationConfig, channel_report_rows
from .pipeline import (RESULT_COLUMNS, EditConfig, config_hash,
                       generate_source_latent, run_ablation_grid, run_edit,
                       run_reconstruction, summarize_result)
from .schedules import InjectionSchedule, schedule_to_csv
from .solvers import SOLVER_KINDS, TimeGrid, integrate_forward

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_CHECK_FAILED = 4

FLOAT_FMT = "{:.17g}"

SWEEP_FAMILIES = ("binary", "sigmoid", "cosine", "linear")
ORDER_LADDER = (10, 20, 40)
EULER_ORDER_BAND = (0.7, 1.3)
MIDPOINT_ORDER_BAND = (1.7, 2.3)

# result.csv trails the reserved perceptual-metric columns, emitted empty
RESERVED_COLUMNS = ("lpips", "clip")


@dataclass
class RunManifest:
    """Provenance for one command invocation; timestamp excluded from hashes."""

    command: str
    config_path: Optional[str]
    out_dir: str
    config_hash: str
    timestamp: str
    version: str
    outputs: List[str]


def fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return FLOAT_FMT.format(float(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def _set_parsers():
    hints = typing.get_type_hints(EditConfig)
    parsers = {}
    for f in fields(EditConfig):
        hint = hints[f.name]
        origin = typing.get_origin(hint)
        args = typing.get_args(hint)
        if origin is typing.Union and type(None) in args:
            inner = [a for a in args if a is not type(None)][0]
        else:
            inner = hint
        parsers[f.name] = (inner, origin is typing.Union and type(None) in args)
    return parsers


_SET_PARSERS = _set_parsers()


def parse_set_value(name: str, raw: str):
    if name not in _SET_PARSERS:
        raise ConfigError(name, "unknown config field")
    inner, optional = _SET_PARSERS[name]
    if optional and raw.lower() in ("none", "null"):
        return None
    if inner is int:
        return int(raw)
    if inner is float:
        return float(raw)
    if inner is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(name, f"expected a boolean, got '{raw}'")
    if inner is str:
        return raw
    # remaining fields are token-id tuples
    return tuple(int(tok) for tok in raw.split(",") if tok)


def load_config(config_path: Optional[str], sets: Sequence[str],
                env=os.environ) -> EditConfig:
    data = {}
    if config_path is not None:
        try:
            data = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise ConfigError("config", f"cannot read '{config_path}': {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON in '{config_path}': {exc}")
        if not isinstance(data, dict):
            raise ConfigError("config", "top-level JSON value must be an object")
    cfg = EditConfig.from_dict(data)
    for item in sets:
        if "=" not in item:
            raise ConfigError("set", f"expected key=value, got '{item}'")
        key, raw = item.split("=", 1)
        cfg = replace(cfg, **{key: parse_set_value(key, raw)})
    seed_env = env.get("ADAEDIT_SEED")
    if seed_env is not None:
        try:
            cfg = replace(cfg, seed=int(seed_env))
        except ValueError:
            raise ConfigError("seed", f"ADAEDIT_SEED must be an integer, got '{seed_env}'")
    cfg.validate()
    return cfg


def write_manifest(out_dir: Path, command: str, config_path: Optional[str],
                   cfg_hash: str, outputs: List[str]) -> None:
    manifest = RunManifest(
        command=command,
        config_path=config_path,
        out_dir=str(out_dir),
        config_hash=cfg_hash,
        timestamp=datetime.now(timezone.utc).isoformat(),
        version=__version__,
        outputs=sorted(outputs),
    )
    payload = {
        "command": manifest.command,
        "config_path": manifest.config_path,
        "out_dir": manifest.out_dir,
        "config_hash": manifest.config_hash,
        "timestamp": manifest.timestamp,
        "version": manifest.version,
        "outputs": manifest.outputs,
    }
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _result_row(summary: dict, extras: Sequence[str] = ()) -> list:
    row = [summary[col] for col in RESULT_COLUMNS]
    row.extend(summary.get(name, "") for name in extras)
    row.extend("" for _ in RESERVED_COLUMNS)
    return row


def _result_header(extras: Sequence[str] = ()) -> list:
    return list(RESULT_COLUMNS) + list(extras) + list(RESERVED_COLUMNS)


def _write_mask_csv(path: Path, mask) -> None:
    hard = set(mask.hard)
    rows = [(i, mask.soft[i], int(i in hard)) for i in range(mask.soft.size)]
    write_csv(path, ["token", "soft", "hard"], rows)


def _write_channels_csv(path: Path, result, cfg: EditConfig) -> None:
    pcfg = PerturbationConfig(cfg.alpha, cfg.tau, cfg.perturbation_mode)
    rows = channel_report_rows(result.channel_gaps, result.channel_weights, pcfg)
    write_csv(path, ["channel", "d_c", "alpha_c", "blend_weight"], rows)


def cmd_edit(config_path: Optional[str], out_dir: str, sets: Sequence[str] = ()) -> int:
    cfg = load_config(config_path, sets)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = generate_source_latent(cfg)
    result = run_edit(source, cfg.source_conditioning(), cfg.target_conditioning(), cfg)

    summary = summarize_result("000", cfg, result)
    write_csv(out / "result.csv", _result_header(), [_result_row(summary)])
    _write_mask_csv(out / "mask.csv", result.mask)
    _write_channels_csv(out / "channels.csv", result, cfg)
    schedule_to_csv(InjectionSchedule(
        cfg.schedule, cfg.total_steps, cfg.injection_steps, cfg.sharpness,
        cfg.sigmoid_midpoint, cfg.activity_threshold), out / "schedule.csv")
    write_manifest(out, "edit", config_path, config_hash(cfg),
                   ["result.csv", "mask.csv", "channels.csv", "schedule.csv"])
    return EXIT_OK


def cmd_reconstruct(config_path: Optional[str], out_dir: str,
                    sets: Sequence[str] = ()) -> int:
    cfg = load_config(config_path, sets)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = generate_source_latent(cfg)
    recon = run_reconstruction(source, cfg.source_conditioning(), cfg)

    from .diagnostics import psnr, ssim
    peak = float(np.ptp(source.data)) or 1.0
    summary = {
        "run_id": "000", "schedule": cfg.schedule, "T": cfg.total_steps,
        "T_inj": cfg.injection_steps, "delta_base": cfg.delta_base,
        "alpha": cfg.alpha, "tau": cfg.tau, "solver": cfg.solver,
        "psnr": psnr(source, recon, peak=peak), "ssim": ssim(source, recon, peak=peak),
        "max_step_delta": "", "velocity_jump": "",
        "evals": "",
    }
    write_csv(out / "result.csv", _result_header(), [_result_row(summary)])
    write_manifest(out, "reconstruct", config_path, config_hash(cfg), ["result.csv"])
    return EXIT_OK


def cmd_sweep_schedule(config_path: Optional[str], out_dir: str,
                       sets: Sequence[str] = ()) -> int:
    base = load_config(config_path, sets)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = generate_source_latent(base)
    rows = []
    curve_rows = []
    for index, family in enumerate(SWEEP_FAMILIES):
        cfg = replace(base, schedule=family)
        cfg.validate()
        result = run_edit(source, cfg.source_conditioning(), cfg.target_conditioning(), cfg)
        rows.append(_result_row(summarize_result(f"{index:03d}", cfg, result)))
        schedule = InjectionSchedule(
            family, cfg.total_steps, cfg.injection_steps, cfg.sharpness,
            cfg.sigmoid_midpoint, cfg.activity_threshold)
        curve_rows.extend(
            (step, family, schedule.weights[step]) for step in range(cfg.total_steps))
    write_csv(out / "sweep.csv", _result_header(), rows)
    write_csv(out / "schedule_curves.csv", ["step", "family", "weight"], curve_rows)
    write_manifest(out, "sweep-schedule", config_path, config_hash(base),
                   ["sweep.csv", "schedule_curves.csv"])
    return EXIT_OK


def cmd_sweep_temperature(config_path: Optional[str], out_dir: str,
                          taus: Sequence[float], sets: Sequence[str] = ()) -> int:
    base = load_config(config_path, sets)
    if not taus:
        raise ConfigError("taus", "temperature list must not be empty")
    for tau in taus:
        if not tau > 0.0:
            raise ConfigError("tau", f"must be positive, got {tau}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = generate_source_latent(base)
    header = (["run_id", "tau", "alpha_var"]
              + [f"alpha_{c}" for c in range(base.channels)])
    rows = []
    for index, tau in enumerate(taus):
        cfg = replace(base, tau=float(tau))
        cfg.validate()
        result = run_edit(source, cfg.source_conditioning(), cfg.target_conditioning(), cfg)
        alpha = result.channel_weights.alpha
        rows.append([f"{index:03d}", float(tau), float(alpha.var())] + list(alpha))
    write_csv(out / "temperature.csv", header, rows)
    write_manifest(out, "sweep-temperature", config_path, config_hash(base),
                   ["temperature.csv"])
    return EXIT_OK


def solver_order_table() -> List[dict]:
    """Fitted global-error order per solver on the analytic flow ladder."""
    flow = AnalyticLinearFlow(decay=-1.0, drift=np.zeros(2))
    z0 = Latent(np.ones((1, 4, 2)))
    exact = flow.closed_form(z0, 0.0, 1.0)
    table = []
    for kind in SOLVER_KINDS:
        errors = []
        for steps in ORDER_LADDER:
            tr = integrate_forward(flow, z0, TimeGrid.uniform(steps), kind)
            errors.append(float(np.max(np.abs(tr.final.data - exact.data))))
        order = float(-np.polyfit(np.log(ORDER_LADDER), np.log(errors), 1)[0])
        table.append({"solver": kind, "order": order, "errors": errors})
    return table


def cmd_solver_order(out_dir: str) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = solver_order_table()
    header = ["solver", "order"] + [f"err_{steps}" for steps in ORDER_LADDER]
    rows = [[entry["solver"], entry["order"]] + entry["errors"] for entry in table]
    write_csv(out / "orders.csv", header, rows)
    write_manifest(out, "solver-order", None, config_hash(EditConfig()), ["orders.csv"])
    orders = {entry["solver"]: entry["order"] for entry in table}
    euler_ok = EULER_ORDER_BAND[0] <= orders["euler"] <= EULER_ORDER_BAND[1]
    midpoint_ok = MIDPOINT_ORDER_BAND[0] <= orders["midpoint"] <= MIDPOINT_ORDER_BAND[1]
    if not (euler_ok and midpoint_ok):
        print(f"solver order check failed: euler={orders['euler']:.3f} "
              f"midpoint={orders['midpoint']:.3f}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _parse_axis(spec: str) -> Tuple[str, list]:
    if "=" not in spec:
        raise ConfigError("axis", f"expected key=v1,v2,..., got '{spec}'")
    key, raw = spec.split("=", 1)
    values = [parse_set_value(key, item) for item in raw.split(",") if item]
    if not values:
        raise ConfigError(key, "axis has no values")
    return key, values


def cmd_ablate(config_path: Optional[str], out_dir: str, axis_specs: Sequence[str],
               sets: Sequence[str] = ()) -> int:
    base = load_config(config_path, sets)
    axes = {}
    for spec in axis_specs:
        key, values = _parse_axis(spec)
        axes[key] = values
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = generate_source_latent(base)
    rows = run_ablation_grid(
        source, (base.source_conditioning(), base.target_conditioning()), base, axes)
    extras = [name for name in axes
              if name not in ("schedule", "total_steps", "injection_steps",
                              "delta_base", "alpha", "tau", "solver")]
    write_csv(out / "ablation.csv", _result_header(extras),
              [_result_row(row, extras) for row in rows])
    write_manifest(out, "ablate", config_path, config_hash(base), ["ablation.csv"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaedit",
        description="Deterministic desk-scale editing runs, sweeps and solver checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", default=None, help="JSON config path")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override a scalar config field")
        p.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("edit", help="run one edit"))
    common(sub.add_parser("reconstruct", help="invert and resample the source"))
    common(sub.add_parser("sweep-schedule", help="compare all schedule families"))
    p_tau = sub.add_parser("sweep-temperature", help="sweep the channel softmax temperature")
    common(p_tau)
    p_tau.add_argument("--taus", default="0.5,1.0,2.0",
                       help="comma-separated temperatures")
    common(sub.add_parser("solver-order", help="convergence orders on the analytic flow"),
           config=False)
    p_ab = sub.add_parser("ablate", help="Cartesian product over config axes")
    common(p_ab)
    p_ab.add_argument("--axis", action="append", default=[], metavar="KEY=V1,V2",
                      help="axis values, repeatable")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "edit":
            return cmd_edit(args.config, args.out, args.set)
        if args.command == "reconstruct":
            return cmd_reconstruct(args.config, args.out, args.set)
        if args.command == "sweep-schedule":
            return cmd_sweep_schedule(args.config, args.out, args.set)
        if args.command == "sweep-temperature":
            try:
                taus = [float(item) for item in args.taus.split(",") if item]
            except ValueError:
                raise ConfigError("taus", f"expected comma-separated floats, got '{args.taus}'")
            return cmd_sweep_temperature(args.config, args.out, taus, args.set)
        if args.command == "solver-order":
            return cmd_solver_order(args.out)
        if args.command == "ablate":
            return cmd_ablate(args.config, args.out, args.axis, args.set)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
