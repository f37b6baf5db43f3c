"""Command-line entry point.

Subcommands: ``run``, ``sweep``, ``curves``, ``validate``, ``fixtures``.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .csvio import (
    CsvFormatError,
    write_columns,
    write_controller_trace,
    write_estimator_trace,
    write_metrics,
    write_trace,
)
from .metrics import trace_metrics
from .pv_model import EnvState, derive_base_params, five_params_at, mpp_from_params, pv_current
from .sim import ConfigError, ScenarioConfig, run_scenario, validate_config

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

FIXTURE_FILES = ("rocof_1hz_58.csv", "rocof_2hz_59.csv")


def _data_dir() -> Path:
    return Path(str(resources.files("pvtrack") / "data"))


def bundled_configs() -> dict[str, Path]:
    return {p.stem: p for p in sorted((_data_dir() / "configs").glob("*.json"))}


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def parse_value(text: str) -> Any:
    """JSON literal when it parses (numbers, true/false/null, objects), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items: Sequence[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        out[key.strip()] = parse_value(value.strip())
    return out


def _resolve_paths(node: Any, base: Path) -> Any:
    """Make every relative ``path`` entry absolute against ``base``."""
    if isinstance(node, dict):
        out = {}
        for k, v in node.items():
            if k == "path" and isinstance(v, str) and not os.path.isabs(v):
                out[k] = str((base / v).resolve())
            else:
                out[k] = _resolve_paths(v, base)
        return out
    if isinstance(node, list):
        return [_resolve_paths(v, base) for v in node]
    return node


def locate_config(ref: str) -> Path:
    """A file path, or the name of a bundled config (``sunny``, ``cloudy``...)."""
    p = Path(ref)
    if p.is_file():
        return p
    named = bundled_configs()
    if ref in named:
        return named[ref]
    if p.suffix == ".json" and p.stem in named and not p.parent.parts:
        return named[p.stem]
    raise ConfigError(f"config {ref!r} not found (bundled configs: {', '.join(named)})")


def load_config(ref: str | None, overrides: Sequence[str] = (), seed: int | None = None) -> ScenarioConfig:
    if ref is None:
        cfg = ScenarioConfig()
    else:
        path = locate_config(ref)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        sim = data.get("sim")
        if isinstance(sim, dict):
            data["sim"] = _resolve_paths(sim, path.parent.resolve())
        cfg = ScenarioConfig.from_dict(data)
    ov = parse_overrides(overrides)
    if seed is not None:
        ov["sim.seed"] = seed
    if ov:
        cfg = cfg.with_overrides(ov)
    if ref is not None:
        cfg.sim = _resolve_sim_paths(cfg)
    return cfg


def _resolve_sim_paths(cfg: ScenarioConfig):
    # paths given through --set are taken relative to the working directory
    s = cfg.sim
    for name in ("irradiance", "temperature", "setpoint"):
        setattr(s, name, _resolve_paths(getattr(s, name), Path.cwd()))
    return s


def write_config(path: Path, cfg: ScenarioConfig) -> None:
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def run_one(cfg: ScenarioConfig, out: Path) -> dict:
    """Run a scenario and write its files into ``out``; returns the metrics row."""
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.json", cfg)
    trace = run_scenario(cfg)
    write_trace(out / "trace.csv", trace)
    write_controller_trace(out / "controller.csv", trace)
    write_estimator_trace(out / "estimator.csv", trace)
    m = trace_metrics(trace, cfg.metrics.ripple_window, cfg.fppt.dp_th)
    row = m.row(cfg.name)
    write_metrics(out / "metrics.csv", [row])
    return row


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    _raise_problems(cfg)
    row = run_one(cfg, Path(args.out))
    print(f"{cfg.name}: wrote {args.out} (tracking_error={row['tracking_error']:.4g})")
    return EXIT_OK


def _raise_problems(cfg: ScenarioConfig) -> None:
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("; ".join(problems))


def _combo_name(combo: dict[str, Any]) -> str:
    parts = []
    for k, v in combo.items():
        text = json.dumps(v) if not isinstance(v, str) else v
        parts.append(f"{k}={text}")
    safe = "_".join(parts)
    return "".join(c if c.isalnum() or c in "._=-" else "-" for c in safe)


def parse_grid(items: Sequence[str]) -> list[dict[str, Any]]:
    """``key=v1,v2`` items to the cross product of override dicts."""
    keys, values = [], []
    for item in items:
        key, sep, rhs = item.partition("=")
        if not sep or not rhs:
            raise ConfigError(f"grid entry {item!r} is not of the form section.key=v1,v2,...")
        keys.append(key.strip())
        values.append([parse_value(v.strip()) for v in rhs.split(",")])
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def _sweep_job(job: tuple[dict, str]) -> dict:
    data, out = job
    return run_one(ScenarioConfig.from_dict(data), Path(out))


def cmd_sweep(args) -> int:
    base = load_config(args.config, args.set, args.seed)
    combos = parse_grid(args.grid) if args.grid else [{}]
    jobs = []
    for combo in combos:
        name = _combo_name(combo) or base.name
        cfg = base.with_overrides({**combo, "name": name})
        _raise_problems(cfg)
        jobs.append((cfg.to_dict(), str(Path(args.out) / name)))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    Path(args.out).mkdir(parents=True, exist_ok=True)
    write_metrics(Path(args.out) / "metrics.csv", rows)
    print(f"sweep: {len(rows)} run(s) written to {args.out}")
    return EXIT_OK


def g_grid(step: float = 0.04, g_max: float = 1.0) -> np.ndarray:
    if not 0 < step <= g_max:
        raise ConfigError("need 0 < g-step <= g-max")
    n = int(round(g_max / step))
    return np.round(step * np.arange(1, n + 1), 12)


def curve_families(cfg: ScenarioConfig, grid: np.ndarray, lambdaT: float = 1.0, points: int = 400) -> tuple[dict, dict]:
    """P-V, I-V and Kph-V families (long format) and the per-level MPP."""
    d = cfg.model.datasheet()
    b = derive_base_params(d)
    fam: dict[str, list] = {"G": [], "V": [], "I": [], "P": [], "Kph": []}
    mpp_cols: dict[str, list] = {"G": [], "Vmp": [], "Imp": [], "Pmp": []}
    for G in grid:
        p = five_params_at(b, EnvState(float(G), lambdaT), d)
        if p is None:
            continue
        vmp, imp, pmp = mpp_from_params(p)
        for c, v in zip(mpp_cols, (G, vmp, imp, pmp)):
            mpp_cols[c].append(v)
        v_top = d.Voc0 * 1.2
        for V in np.linspace(0.0, v_top, points):
            I = pv_current(p, float(V))
            if I < 0:
                break
            for c, v in zip(fam, (G, V, I, V * I, I / p.Iph)):
                fam[c].append(v)
    return fam, mpp_cols


def cmd_curves(args) -> int:
    cfg = load_config(args.config, args.set, None)
    grid = g_grid(args.g_step, args.g_max)
    fam, mp = curve_families(cfg, grid, args.lambdaT, args.points)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_columns(out / "curves.csv", fam)
    write_columns(out / "mpp.csv", mp)
    print(f"curves: {len(grid)} irradiance levels written to {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    problems = validate_config(cfg)
    if problems:
        for p in problems:
            print(f"violation: {p}")
        return EXIT_CONFIG
    print("OK")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    out = Path(args.out)
    (out / "configs").mkdir(parents=True, exist_ok=True)
    for name in FIXTURE_FILES:
        shutil.copyfile(_data_dir() / name, out / name)
    for name, path in bundled_configs().items():
        shutil.copyfile(path, out / "configs" / f"{name}.json")
    print(f"fixtures written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pvtrack", description="PV power-setpoint tracking simulator")
    ap.add_argument("--version", action="version", version=f"pvtrack {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required: bool, out: bool = True, seed: bool = True):
        p.add_argument("--config", required=config_required, metavar="PATH",
                       help="JSON config file or bundled config name")
        if out:
            p.add_argument("--out", required=True, metavar="DIR", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. sim.duration=120 (repeatable)")
        if seed:
            p.add_argument("--seed", type=int, default=None, metavar="N", help="override sim.seed")

    p = sub.add_parser("run", help="run one scenario")
    common(p, True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the cross product of --grid overrides")
    common(p, True)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="values to sweep for one key (repeatable)")
    p.add_argument("--jobs", type=int, default=1, help="parallel processes (one run each)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("curves", help="emit P-V, I-V and Kph-V curve families")
    common(p, False, seed=False)
    p.add_argument("--g-step", type=float, default=0.04, help="irradiance step in p.u.")
    p.add_argument("--g-max", type=float, default=1.0)
    p.add_argument("--lambdaT", type=float, default=1.0, help="normalized cell temperature")
    p.add_argument("--points", type=int, default=400, help="voltage points per curve")
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("validate", help="check a config and report violations")
    common(p, True, out=False)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("fixtures", help="write bundled ROCOF traces and example configs")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_fixtures)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CsvFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
