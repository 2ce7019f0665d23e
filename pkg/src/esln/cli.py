"""Command-line entry point: ``esln --scenario NAME [--set key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 unreliable result.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from pathlib import Path

import numpy as np

from .config import SCENARIOS, ConfigError, RunConfig, load_config, parse_overrides
from .ensemble import (EnsembleResult, asymptote_estimate, correlation_study,
                       diagnostics, lz_limit, modified_lz_limit, run_ensemble,
                       thermal_reference, variance_scan)

__all__ = ["main", "run_scenario", "PRESETS", "OBSERVABLE_HEADER"]

OBSERVABLE_HEADER = ["t", "sx_mean", "sx_err", "sy_mean", "sy_err", "sz_mean", "sz_err",
                     "trace_re", "trace_im", "trace_err"]

# scenario defaults, applied beneath any file or command-line values
PRESETS = {
    "correlations": {"t_max": 2.0},
    "stationary": {},
    "decay": {"init": "pure_up", "t_max": 15.0},
    "lz": {"alpha": 0.01, "kappa": 5.0, "epsilon0": 0.0, "t0": -10.0, "t_max": 10.0},
    "calibrate": {"alpha": 0.0, "kappa": 5.0, "epsilon0": 0.0, "t0": -10.0, "t_max": 10.0},
    "variance-scan": {"delta": 0.0, "epsilon0": 0.0, "t_max": 10.0, "n_samples": 10000},
}


def _fmt(x: float) -> str:
    return repr(float(x))


def write_observables(path: Path, res: EnsembleResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(OBSERVABLE_HEADER)
        for n, t in enumerate(res.times):
            w.writerow([_fmt(t), _fmt(res.mean_sx[n]), _fmt(res.err_sx[n]),
                        _fmt(res.mean_sy[n]), _fmt(res.err_sy[n]),
                        _fmt(res.mean_sz[n]), _fmt(res.err_sz[n]),
                        _fmt(res.mean_trace[n].real), _fmt(res.mean_trace[n].imag),
                        _fmt(res.err_trace[n])])


def _meta(cfg: RunConfig, res: EnsembleResult | None, wall: float, extra=()) -> str:
    lines = ["[config]", cfg.to_text().rstrip(), "", "[run]", f"seed = {cfg.seed}",
             f"wall_time_s = {wall:.3f}"]
    if res is not None:
        lines += [f"n_samples = {res.n_samples}", f"n_excluded = {res.n_excluded}",
                  f"n_diverged = {res.n_diverged}",
                  f"n_pathological = {res.n_pathological}",
                  f"n_replaced = {res.n_replaced}",
                  f"unreliable = {str(res.unreliable).lower()}",
                  f"normalisation = {res.normalisation!r}",
                  f"max_guide = {res.max_guide!r}",
                  f"n_spiking = {res.spike_times.size}",
                  f"first_spike_t = {float(res.spike_times.min()) if res.spike_times.size else math.nan!r}",
                  f"max_trace_drift = {res.max_trace_drift!r}"]
    lines += list(extra)
    return "\n".join(lines) + "\n"


def _window(cfg: RunConfig):
    a = cfg.window_start if math.isfinite(cfg.window_start) else 0.35 * cfg.t_max
    b = cfg.window_end if math.isfinite(cfg.window_end) else cfg.t_max
    return a, b


def run_scenario(name: str, cfg: RunConfig, out_dir=None) -> tuple[int, list[Path]]:
    """Run one scenario, write its files and return ``(exit code, paths)``."""
    if name not in SCENARIOS:
        raise ConfigError("scenario", f"unknown scenario {name!r}")
    out = Path(out_dir if out_dir is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    written: list[Path] = []
    res = None
    extra: list[str] = []
    code = 0

    if name == "correlations":
        rows = correlation_study(cfg)
        p = out / "correlations.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["pair", "t", "t_prime", "target_re", "target_im",
                        "estimate_re", "estimate_im", "stderr", "z"])
            for r in rows:
                w.writerow([r.pair, _fmt(r.t), _fmt(r.t_prime), _fmt(r.target.real),
                            _fmt(r.target.imag), _fmt(r.estimate.real),
                            _fmt(r.estimate.imag), _fmt(r.stderr), _fmt(r.z)])
        written.append(p)
        extra = ["[correlations]", f"max_z = {max(r.z for r in rows if r.pair not in ('nu_nu', 'nu_mu'))!r}",
                 f"max_null = {max(abs(r.estimate) for r in rows if r.pair in ('nu_nu', 'nu_mu'))!r}"]
    elif name == "calibrate":
        p = out / "calibration.csv"
        limit = lz_limit(cfg.delta, cfg.kappa)
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t0", "modified_limit", "lz_limit", "deviation"])
            for t0 in cfg.t0_list:
                mod = modified_lz_limit(cfg.delta, cfg.kappa, t0, t_max=cfg.t_max,
                                        dt=cfg.dt)
                w.writerow([_fmt(t0), _fmt(mod), _fmt(limit), _fmt(mod - limit)])
        written.append(p)
    elif name == "variance-scan":
        rows = variance_scan(cfg)
        p = out / "scan.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["r_nu_eta", "trace_stderr"])
            for r, e in rows:
                w.writerow([_fmt(r), "" if e is None else _fmt(e)])
        written.append(p)
    else:
        res = run_ensemble(cfg)
        p = out / "observables.csv"
        write_observables(p, res)
        written.append(p)
        if name == "decay":
            ref, ref_err = thermal_reference(cfg)
            extra = ["[thermal_reference]",
                     f"sx = {ref[0]!r}", f"sx_err = {ref_err[0]!r}",
                     f"sy = {ref[1]!r}", f"sy_err = {ref_err[1]!r}",
                     f"sz = {ref[2]!r}", f"sz_err = {ref_err[2]!r}",
                     f"sz_final = {res.mean_sz[-1]!r}", f"sz_final_err = {res.err_sz[-1]!r}"]
        elif name == "lz":
            window = _window(cfg)
            mean, err = asymptote_estimate(res, window, n_batches=res.n_batches)
            d_r, q = diagnostics(cfg.bath(), cfg.drive(), cfg.grid())
            summary = [f"window = {window[0]!r},{window[1]!r}", f"asymptote = {mean!r}",
                       f"asymptote_err = {err!r}",
                       f"lz_limit = {lz_limit(cfg.delta, cfg.kappa)!r}",
                       f"modified_lz_limit = {modified_lz_limit(cfg.delta, cfg.kappa, cfg.t0, t_max=cfg.t_max, dt=cfg.dt)!r}",
                       f"delta_r = {d_r!r}", f"q = {q!r}"]
            p = out / "asymptote.txt"
            p.write_text("\n".join(summary) + "\n", encoding="utf-8")
            written.append(p)
        if res.unreliable:
            code = 3

    meta = out / "meta.txt"
    meta.write_text(_meta(cfg, res, time.perf_counter() - start, extra), encoding="utf-8")
    written.append(meta)
    return code, written


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esln", description="Spin-boson ESLN simulator")
    p.add_argument("--config", metavar="PATH", help="flat key=value config file")
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--samples", type=int, help="number of trajectories")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--workers", type=int, help="worker processes")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    return p


def resolve_config(args) -> RunConfig:
    file_values = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            file_values = parse_overrides(fh.read().splitlines())
    cli_values = parse_overrides(args.set)
    scenario = args.scenario or cli_values.get("scenario") or file_values.get("scenario") \
        or RunConfig.scenario
    values = dict(PRESETS.get(scenario, {}))
    values.update(file_values)
    values.update(cli_values)
    values["scenario"] = scenario
    for key, val in (("n_samples", args.samples), ("seed", args.seed),
                     ("workers", args.workers), ("out", args.out)):
        if val is not None:
            values[key] = val
    return load_config(None, (), **values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        code, paths = run_scenario(cfg.scenario, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    for path in paths:
        print(path)
    if code == 3:
        print("result unreliable: exclusion fraction above 1%", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
