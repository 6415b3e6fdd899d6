"""Command-line driver: one subcommand per experiment.

Each run reads an optional key=value config file, applies command-line
overrides, computes everything, and only then writes its outputs: CSV
data files plus a ``manifest.txt`` recording seed, parameters, library
versions and wall time.  Wall time never appears in the CSV files, so
reruns with the same seed are byte-identical regardless of thread count.

Exit codes: 0 success, 1 configuration/validation error, 2 numerical
failure (solver breakdown, degenerate geometry, driver giving up).
"""

from __future__ import annotations

import argparse
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .experiments import (
    ConfigError,
    DarcySampler,
    ExperimentConfig,
    MaternNormSampler,
    PRefinementSampler,
    _CONFIG_FIELDS,
    build_config,
    calibrate_lognormal,
    parse_config_file,
    parse_levels,
    resources_for,
    run_covariance,
)
from .fem import FemError
from .mesh import MeshError, build_hierarchy, radius_ratios, save_mesh
from .mlmc import (
    MlmcError,
    estimate_rates,
    level_table,
    mlmc_run,
    standard_mc_run,
    telescoping_check,
    level_csv_text,
    format_summary,
)
from .spde import SolverError
from .supermesh import SupermeshError, build_supermesh

__all__ = ["main"]

OUTER_AREA = 4.0


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad flags as config errors (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def _add_config_flags(sub):
    sub.add_argument("--config", help="key=value file; flags override it")
    flags = {
        "nu": float, "sigma": float, "lam": float, "degree": int,
        "base_nx": int, "num_levels": int, "amplitude": float,
        "mesh_seed": int, "seed": int, "levels": str, "N": int,
        "epsilons": str, "nx": int, "start_level": int, "initial_N": int,
        "max_mc_samples": int, "broken": str, "tol": float,
        "threads": int, "out": str,
    }
    for name, kind in flags.items():
        sub.add_argument(f"--{name.replace('_', '-')}", type=kind,
                         dest=name, default=None)


def _build_parser():
    parser = _Parser(prog="maternmlmc",
                     description="Matern-field MLMC experiment suite")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("hierarchy", "build the mesh hierarchy; report h, quality, "
                      "supermesh sizes; save the meshes"),
        ("matern-convergence", "norm-difference decay of coupled Matern "
                               "fields across levels (fit vs log h)"),
        ("covariance", "empirical vs analytic Matern covariance curve"),
        ("telescope", "telescoping consistency ratio T per level"),
        ("rates", "Darcy MLMC decay/growth rates (fit vs level)"),
        ("mlmc", "adaptive MLMC on the lognormal Darcy problem "
                 "(first entry of --epsilons)"),
        ("mc-compare", "MLMC vs single-level MC cost over the epsilon sweep"),
        ("p-refine", "degree-based levels P1..P3 on the coarsest mesh"),
    ]:
        _add_config_flags(subs.add_parser(name, help=help_text))
    return parser


def _config_from_args(args) -> ExperimentConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {
        name: getattr(args, name)
        for name in _CONFIG_FIELDS
        if getattr(args, name, None) is not None
    }
    overrides["experiment"] = args.command
    return build_config(file_values, overrides)


def _level_range(config, default_lo):
    """Levels to visit: an explicit range wins, capped to the hierarchy."""
    spec = config.levels or f"{default_lo}..{config.num_levels}"
    lo, hi = parse_levels(spec, default_lo=default_lo,
                          default_hi=config.num_levels)
    if lo < 2:
        raise ConfigError("level differences need levels >= 2")
    return list(range(lo, hi + 1))


def _band(var, N):
    """Three-sigma band of an MC mean: 3 sqrt(var / N)."""
    return 3.0 * math.sqrt(var / N)


def _write(out_dir: Path, name: str, text: str) -> Path:
    path = out_dir / name
    path.write_text(text)
    return path


def _rates_text(rr) -> str:
    return (
        f"alpha        {float(rr.alpha)!r}\n"
        f"alpha_stderr {float(rr.alpha_stderr)!r}\n"
        f"beta         {float(rr.beta)!r}\n"
        f"beta_stderr  {float(rr.beta_stderr)!r}\n"
        f"gamma        {float(rr.gamma)!r}\n"
        f"gamma_stderr {float(rr.gamma_stderr)!r}\n"
        f"x            {','.join(repr(float(v)) for v in rr.x)}\n"
    )


def _print_level_table(table):
    print("level        Y (+-3s)                V            cost")
    for i, lev in enumerate(table.levels):
        band = _band(table.var_diff[i], table.N if np.isscalar(table.N)
                     else table.N[i])
        print(f"  {int(lev)}   {table.mean_diff[i]:+.6e} "
              f"(+-{band:.2e})   {table.var_diff[i]:.4e}   "
              f"{table.cost_per_sample[i]:.0f}")


# ---------------------------------------------------------------------------
# subcommand runners: compute first, write at the end, return written paths


def _run_hierarchy(config, out_dir):
    if config.levels:
        _, num_levels = parse_levels(config.levels, default_lo=1)
    else:
        num_levels = config.num_levels
    hier = build_hierarchy(
        num_levels=num_levels,
        base_nx=config.base_nx,
        amplitude=config.amplitude,
        seed=config.mesh_seed,
    )
    rows = []
    for lev in range(1, num_levels + 1):
        outer = hier.pair(lev).outer
        rr_min, rr_max = radius_ratios(outer)
        row = {
            "level": lev, "cells": outer.num_cells, "h": hier.h(lev),
            "rr_min": rr_min, "rr_max": rr_max,
            "sm_cells": "", "sm_ratio": "",
        }
        if lev >= 2:
            sm = build_supermesh(outer, hier.pair(lev - 1).outer)
            area_defect = abs(sm.areas.sum() - OUTER_AREA) / OUTER_AREA
            if area_defect > 1e-9:
                raise SupermeshError(
                    f"supermesh area defect {area_defect:.2e} at level {lev}")
            row["sm_cells"] = sm.num_cells
            row["sm_ratio"] = sm.num_cells / outer.num_cells
        rows.append(row)

    print("level   cells      h     RR range      n_S   n_S/n_l")
    for r in rows:
        ratio = f"{r['sm_ratio']:.3f}" if r["sm_ratio"] != "" else "     -"
        n_s = f"{r['sm_cells']:7d}" if r["sm_cells"] != "" else "      -"
        print(f"  {r['level']}   {r['cells']:7d}  {r['h']:.4f}  "
              f"[{r['rr_min']:.3f}, {r['rr_max']:.3f}]  {n_s}  {ratio}")

    lines = ["level,cells,h,rr_min,rr_max,supermesh_cells,supermesh_ratio"]
    for r in rows:
        ratio = repr(float(r["sm_ratio"])) if r["sm_ratio"] != "" else ""
        lines.append(
            f"{r['level']},{r['cells']},{float(r['h'])!r},"
            f"{float(r['rr_min'])!r},{float(r['rr_max'])!r},"
            f"{r['sm_cells']},{ratio}"
        )
    written = [_write(out_dir, "hierarchy.csv", "\n".join(lines) + "\n")]
    for lev in range(1, num_levels + 1):
        pair = hier.pair(lev)
        for tag, mesh in (("outer", pair.outer), ("inner", pair.inner)):
            path = out_dir / f"level{lev}_{tag}.txt"
            save_mesh(mesh, path)
            written.append(path)
    return written


def _run_matern_convergence(config, out_dir):
    res = resources_for(config)
    sampler = MaternNormSampler(res, broken=config.broken)
    levels = _level_range(config, default_lo=3)
    x = np.array([-math.log2(res.hierarchy.h(lev)) for lev in levels])
    rr = estimate_rates(sampler, levels, config.N, config.seed,
                        x_values=x, threads=config.threads)
    _print_level_table(rr)
    print(f"alpha = {rr.alpha:.3f} +- {rr.alpha_stderr:.3f}  (slope vs log h)")
    print(f"beta  = {rr.beta:.3f} +- {rr.beta_stderr:.3f}")
    return [
        _write(out_dir, "levels.csv", level_csv_text(rr)),
        _write(out_dir, "rates.txt", _rates_text(rr)),
    ]


def _run_rates(config, out_dir):
    res = resources_for(config)
    sampler = DarcySampler(res, calibrate_lognormal())
    levels = _level_range(config, default_lo=2)
    rr = estimate_rates(sampler, levels, config.N, config.seed,
                        threads=config.threads)
    _print_level_table(rr)
    print(f"alpha = {rr.alpha:.3f} +- {rr.alpha_stderr:.3f}  (vs level)")
    print(f"beta  = {rr.beta:.3f} +- {rr.beta_stderr:.3f}")
    print(f"gamma = {rr.gamma:.3f} +- {rr.gamma_stderr:.3f}")
    return [
        _write(out_dir, "levels.csv", level_csv_text(rr)),
        _write(out_dir, "rates.txt", _rates_text(rr)),
    ]


def _run_covariance(config, out_dir):
    curve, exact = run_covariance(
        config.matern, config.nx, config.N, config.seed,
        threads=config.threads, solver_config=config.solver,
    )
    dev = np.abs(curve.estimate - exact)
    band = 3.0 * curve.stderr + 0.02
    print("r       empirical     exact        |diff|    3*stderr+slack")
    for i in range(len(curve.radii)):
        print(f"{curve.radii[i]:.3f}  {curve.estimate[i]:+.6f}   "
              f"{exact[i]:+.6f}   {dev[i]:.5f}   {band[i]:.5f}")
    print(f"max deviation {dev.max():.5f}; within band: {(dev <= band).all()}")
    lines = ["r,empirical,exact,stderr"]
    for i in range(len(curve.radii)):
        lines.append(f"{float(curve.radii[i])!r},{float(curve.estimate[i])!r},"
                     f"{float(exact[i])!r},{float(curve.stderr[i])!r}")
    return [_write(out_dir, "covariance.csv", "\n".join(lines) + "\n")]


def _run_telescope(config, out_dir):
    res = resources_for(config)
    sampler = MaternNormSampler(res, broken=config.broken)
    levels = _level_range(config, default_lo=2)
    results = [
        telescoping_check(sampler, lev, config.N, config.seed,
                          threads=config.threads)
        for lev in levels
    ]
    for r in results:
        print(f"level {r.level}: T = {r.T:.3f}   "
              f"a = {r.coupled_mean:+.4e} (+-{3*math.sqrt(r.coupled_var):.1e})  "
              f"b = {r.fine_mean:+.4e}  c = {r.coarse_mean:+.4e}")
    print(f"all T < 1: {all(r.T < 1.0 for r in results)}")
    lines = ["level,T,a,b,c,va,vb,vc,N"]
    for r in results:
        lines.append(
            f"{r.level},{float(r.T)!r},{float(r.coupled_mean)!r},"
            f"{float(r.fine_mean)!r},{float(r.coarse_mean)!r},"
            f"{float(r.coupled_var)!r},{float(r.fine_var)!r},"
            f"{float(r.coarse_var)!r},{r.N}"
        )
    return [_write(out_dir, "telescope.csv", "\n".join(lines) + "\n")]


def _run_mlmc(config, out_dir):
    res = resources_for(config)
    sampler = DarcySampler(res, calibrate_lognormal())
    epsilon = config.epsilon_list[0]
    result = mlmc_run(
        sampler, epsilon, config.seed,
        initial_N=config.initial_N,
        start_level=config.start_level,
        threads=config.threads,
    )
    summary = format_summary(result)
    print(summary, end="")
    print(f"estimate band  +-{3 * result.stat_error!r} (3 sigma)")
    return [
        _write(out_dir, "levels.csv", level_csv_text(result)),
        _write(out_dir, "summary.txt", summary),
    ]


def _run_mc_compare(config, out_dir):
    res = resources_for(config)
    sampler = DarcySampler(res, calibrate_lognormal())
    runs = []
    for epsilon in config.epsilon_list:
        r = mlmc_run(
            sampler, epsilon, config.seed,
            initial_N=config.initial_N,
            start_level=config.start_level,
            threads=config.threads,
        )
        mc = standard_mc_run(
            sampler, epsilon, int(r.levels[-1]), config.seed,
            max_samples=config.max_mc_samples, threads=config.threads,
        )
        runs.append((epsilon, r, mc))
        print(f"eps={epsilon:.1e}: levels={r.num_levels} "
              f"mlmc_cost={r.total_cost:.3e} mc_cost={mc.total_cost:.3e} "
              f"ratio={mc.total_cost / r.total_cost:.1f}")
    eps2 = [eps**2 * r.total_cost for eps, r, _ in runs]
    print(f"eps^2 * C_tot spread: {max(eps2) / min(eps2):.3f}")
    smallest = min(runs, key=lambda t: t[0])
    print(f"cost ratio at eps={smallest[0]:.1e}: "
          f"{smallest[2].total_cost / smallest[1].total_cost:.1f}")

    lines = ["epsilon,mlmc_levels,mlmc_cost,mlmc_estimate,"
             "mc_level,mc_N_required,mc_cost,mc_estimate,cost_ratio"]
    for epsilon, r, mc in runs:
        lines.append(
            f"{float(epsilon)!r},{r.num_levels},{float(r.total_cost)!r},"
            f"{float(r.estimate)!r},{mc.level},{mc.N_required},"
            f"{float(mc.total_cost)!r},{float(mc.estimate)!r},"
            f"{float(mc.total_cost / r.total_cost)!r}"
        )
    written = [_write(out_dir, "mc_compare.csv", "\n".join(lines) + "\n")]
    for epsilon, r, _ in runs:
        written.append(_write(out_dir, f"levels_eps{epsilon:.0e}.csv",
                              level_csv_text(r)))
    return written


def _run_p_refine(config, out_dir):
    hier = build_hierarchy(
        num_levels=1,
        base_nx=config.base_nx,
        amplitude=config.amplitude,
        seed=config.mesh_seed,
    )
    sampler = PRefinementSampler(hier.pair(1), config.matern,
                                 calibrate_lognormal(),
                                 degrees=(1, 2, 3),
                                 solver_config=config.solver)
    table = level_table(sampler, [1, 2, 3], config.N, config.seed,
                        threads=config.threads)
    print("degree       Y (+-3s)                V            cost")
    for i, lev in enumerate(table.levels):
        band = _band(table.var_diff[i], table.N[i])
        print(f"  {int(lev)}   {table.mean_diff[i]:+.6e} "
              f"(+-{band:.2e})   {table.var_diff[i]:.4e}   "
              f"{table.cost_per_sample[i]:.0f}")
    diffs = np.abs(table.mean_diff[1:])
    vars_ = table.var_diff[1:]
    print(f"|Y| decreasing in degree: {bool((np.diff(diffs) < 0).all())}")
    print(f"V decreasing in degree: {bool((np.diff(vars_) < 0).all())}")
    return [_write(out_dir, "levels.csv", level_csv_text(table))]


_RUNNERS = {
    "hierarchy": _run_hierarchy,
    "matern-convergence": _run_matern_convergence,
    "covariance": _run_covariance,
    "telescope": _run_telescope,
    "rates": _run_rates,
    "mlmc": _run_mlmc,
    "mc-compare": _run_mc_compare,
    "p-refine": _run_p_refine,
}


def _write_manifest(out_dir, config, wall_seconds):
    lines = [f"experiment    {config.experiment}"]
    for name in _CONFIG_FIELDS:
        if name != "experiment":
            lines.append(f"{name:13s} {getattr(config, name)}")
    lines += [
        f"package       maternmlmc {__version__}",
        f"python        {platform.python_version()}",
        f"numpy         {np.__version__}",
        f"scipy         {scipy.__version__}",
        f"wall_seconds  {wall_seconds:.3f}",
    ]
    _write(out_dir, "manifest.txt", "\n".join(lines) + "\n")


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        config = _config_from_args(args)
        out_dir = Path(config.out)
        t0 = time.time()
        out_dir.mkdir(parents=True, exist_ok=True)
        written = _RUNNERS[args.command](config, out_dir)
        _write_manifest(out_dir, config, time.time() - t0)
        for path in written:
            print(f"wrote {path}")
        print(f"wrote {out_dir / 'manifest.txt'}")
    except (ConfigError, MeshError, FemError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (SolverError, SupermeshError, MlmcError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
