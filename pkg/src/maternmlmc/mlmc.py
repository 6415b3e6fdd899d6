"""Multilevel Monte Carlo driver.

Estimates E[P] by the telescoping sum over level differences
Y_l = E[P_l - P_{l-1}] (with P_0 = 0), spending most samples on cheap
coarse levels: N_l is chosen to minimize total cost subject to the
statistical error budget, and levels are added until the extrapolated
bias falls under its budget.  The driver is generic over a LevelSampler
that produces coupled pairs (P_l, P_{l-1}) from shared randomness plus a
per-sample cost in deterministic work units.

Sample n of level l always draws from the substream keyed by (l, n), so
results are bitwise reproducible for a given seed regardless of thread
count or of how sampling is batched.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .rng import substream

__all__ = [
    "LevelSampler",
    "MlmcError",
    "MlmcResult",
    "RatesResult",
    "LevelTable",
    "TelescopeResult",
    "McResult",
    "fit_line",
    "optimal_allocation",
    "mlmc_run",
    "level_table",
    "estimate_rates",
    "telescoping_check",
    "standard_mc_run",
    "level_csv_text",
    "write_level_csv",
    "format_summary",
]

# substream family tags, so the sample pools of the different estimators
# never overlap for one seed
_KIND_COUPLED = 0
_KIND_FINE_SINGLE = 1
_KIND_COARSE_SINGLE = 2
_KIND_MC = 3


class MlmcError(RuntimeError):
    pass


@runtime_checkable
class LevelSampler(Protocol):
    """Per-level sampler contract.

    ``sample(level, rng)`` returns (P_level, P_{level-1}, cost) where both
    values are computed from the same underlying sample point; level 1
    returns (P_1, 0.0, cost).  ``sample_single(level, rng)`` returns
    (P_level, cost) from an independent (uncoupled) draw.  Costs are
    deterministic work units.
    """

    num_levels: int

    def sample(self, level: int, rng) -> tuple: ...

    def sample_single(self, level: int, rng) -> tuple: ...


def _ordered_map(fn, items, threads):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def fit_line(x, y):
    """Least-squares line fit: (slope, intercept, slope standard error)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2:
        raise MlmcError("need at least 2 points to fit a line")
    xc = x - x.mean()
    sxx = xc @ xc
    if sxx == 0.0:
        raise MlmcError("degenerate fit: all abscissae equal")
    slope = (xc @ y) / sxx
    intercept = y.mean() - slope * x.mean()
    if len(x) > 2:
        rss = np.sum((y - intercept - slope * x) ** 2)
        stderr = math.sqrt(rss / (len(x) - 2) / sxx)
    else:
        stderr = float("nan")
    return float(slope), float(intercept), stderr


def optimal_allocation(epsilon, variances, costs):
    """N_l = ceil(2 eps^-2 sqrt(V_l/C_l) sum_k sqrt(V_k C_k)).

    Minimizes total cost subject to sum V_l/N_l <= eps^2/2.  Levels with
    zero variance get 0 (no further samples needed).
    """
    V = np.asarray(variances, dtype=np.float64)
    C = np.asarray(costs, dtype=np.float64)
    if epsilon <= 0:
        raise MlmcError("epsilon must be positive")
    if (V < 0).any() or (C <= 0).any():
        raise MlmcError("need V >= 0 and C > 0")
    total = np.sum(np.sqrt(V * C))
    return np.ceil(2.0 / epsilon**2 * np.sqrt(V / C) * total).astype(np.int64)


@dataclass
class _LevelPool:
    """All coupled samples drawn so far for one level, in draw order."""

    diffs: list
    fines: list
    costs: list

    def extend(self, sampler, level, seed, upto, threads):
        start = len(self.diffs)
        if upto <= start:
            return

        def draw(n):
            rng = substream(seed, _KIND_COUPLED, level, n)
            return sampler.sample(level, rng)

        batch = _ordered_map(draw, range(start, upto), threads)
        for n, (fine, coarse, cost) in enumerate(batch, start=start):
            if not (np.isfinite(fine) and np.isfinite(coarse)):
                raise MlmcError(f"non-finite sample at level {level}, index {n}")
            self.diffs.append(fine - coarse)
            self.fines.append(fine)
            self.costs.append(cost)


@dataclass
class MlmcResult:
    estimate: float
    epsilon: float
    seed: int
    levels: np.ndarray          # sampler levels used, ascending
    N: np.ndarray
    mean_diff: np.ndarray       # Y_l
    var_diff: np.ndarray        # V_l
    mean_fine: np.ndarray
    var_fine: np.ndarray
    cost_per_sample: np.ndarray
    alpha: float
    bias: float
    stat_error: float           # sqrt(sum V_l / N_l)
    total_cost: float

    @property
    def num_levels(self):
        return len(self.levels)


def _pool_stats(pools):
    N = np.array([len(p.diffs) for p in pools], dtype=np.int64)
    Y = np.array([np.mean(p.diffs) for p in pools])
    V = np.array([np.var(p.diffs, ddof=1) if len(p.diffs) > 1 else 0.0
                  for p in pools])
    mean_fine = np.array([np.mean(p.fines) for p in pools])
    var_fine = np.array([np.var(p.fines, ddof=1) if len(p.fines) > 1 else 0.0
                         for p in pools])
    C = np.array([np.mean(p.costs) for p in pools])
    return N, Y, V, mean_fine, var_fine, C


def _fit_decay(values, floor=0.5):
    """Decay rate of |values_l| over the difference levels (l >= 2),
    floored so extrapolations below stay finite; returns None if fewer
    than two nonzero entries exist."""
    levels = np.arange(2, len(values) + 1)
    mags = np.abs(np.asarray(values)[1:])
    keep = mags > 0
    if keep.sum() < 2:
        return None
    slope, _, _ = fit_line(levels[keep], np.log2(mags[keep]))
    return max(-slope, floor)


def _bias_estimate(Y, alpha):
    """|Y_L|/(2^alpha - 1), robustified against a lucky-small last sample
    by also extrapolating the two previous differences forward."""
    L = len(Y)
    terms = [abs(Y[-1])]
    for j in (1, 2):
        if L - j >= 2:  # level 1 is not a difference
            terms.append(abs(Y[-1 - j]) / 2.0 ** (alpha * j))
    return max(terms) / (2.0**alpha - 1.0)


def mlmc_run(sampler, epsilon, seed, initial_levels=3, initial_N=100,
             min_level_N=2, level_cap=10, start_level=1,
             threads=1) -> MlmcResult:
    """Adaptive MLMC to root-mean-square tolerance ``epsilon``.

    Warm-up draws ``initial_N`` coupled samples on the first
    ``initial_levels`` levels, then alternates optimal reallocation with
    bias-driven level addition until sum(V_l/N_l) <= eps^2/2 and
    |Y_L|/(2^alpha - 1) <= eps/sqrt(2).  A newly added level is sized by
    the allocation formula with its variance and cost extrapolated from
    the fitted decay (never fewer than ``min_level_N`` samples), so fine
    levels are not burdened with a fixed-size pilot.  ``start_level``
    lets estimator level 1 map to a finer sampler level (dropping overly
    coarse meshes).  Each sample's substream key is a fixed function of
    (estimator level, sample index), so results for a given seed are
    independent of batching and thread count.
    """
    if epsilon <= 0:
        raise MlmcError("epsilon must be positive")
    if not (1 <= start_level <= sampler.num_levels):
        raise MlmcError(f"start_level {start_level} outside sampler range")
    max_levels = min(level_cap, sampler.num_levels - start_level + 1)
    if initial_levels > max_levels:
        initial_levels = max_levels

    class _Shifted:
        """View of the sampler with levels renumbered from start_level."""

        def __init__(self, base, offset):
            self._base = base
            self._offset = offset
            self.num_levels = base.num_levels - offset

        def sample(self, level, rng):
            if level == 1:
                value, cost = self._base.sample_single(1 + self._offset, rng)
                return value, 0.0, cost
            return self._base.sample(level + self._offset, rng)

        def sample_single(self, level, rng):
            return self._base.sample_single(level + self._offset, rng)

    shifted = _Shifted(sampler, start_level - 1) if start_level > 1 else sampler

    pools = [_LevelPool([], [], []) for _ in range(initial_levels)]
    for lev, pool in enumerate(pools, start=1):
        pool.extend(shifted, lev, seed, initial_N, threads)

    while True:
        N, Y, V, mean_fine, var_fine, C = _pool_stats(pools)
        target = optimal_allocation(epsilon, V, C)
        if (target > N).any():
            for lev, pool in enumerate(pools, start=1):
                pool.extend(shifted, lev, seed, int(target[lev - 1]), threads)
            continue

        alpha = _fit_decay(Y)
        if Y[-1] == 0.0:
            bias = 0.0
        elif alpha is None:
            bias = abs(Y[-1])
            alpha = float("nan")
        else:
            bias = _bias_estimate(Y, alpha)

        if bias <= epsilon / math.sqrt(2.0):
            break
        if len(pools) >= max_levels:
            raise MlmcError(
                f"bias {bias:.3e} > {epsilon / math.sqrt(2):.3e} but the "
                f"level cap ({max_levels}) is reached"
            )
        # size the new level from extrapolated variance and cost rather
        # than a fixed pilot; the reallocation pass above corrects it
        # once real samples exist
        beta = _fit_decay(V, floor=0.5)
        V_new = V[-1] / (2.0**beta if beta is not None else 2.0)
        C_new = C[-1] * (C[-1] / C[-2] if len(C) >= 2 and C[-2] > 0 else 4.0)
        target = optimal_allocation(epsilon, np.append(V, V_new),
                                    np.append(C, C_new))
        pools.append(_LevelPool([], [], []))
        pools[-1].extend(shifted, len(pools), seed,
                         max(int(target[-1]), min_level_N), threads)

    N, Y, V, mean_fine, var_fine, C = _pool_stats(pools)
    return MlmcResult(
        estimate=float(np.sum(Y)),
        epsilon=epsilon,
        seed=seed,
        levels=np.arange(start_level, start_level + len(pools)),
        N=N,
        mean_diff=Y,
        var_diff=V,
        mean_fine=mean_fine,
        var_fine=var_fine,
        cost_per_sample=C,
        alpha=float(alpha) if alpha is not None else float("nan"),
        bias=float(bias),
        stat_error=float(np.sqrt(np.sum(V / N))),
        total_cost=float(sum(sum(p.costs) for p in pools)),
    )


# ---------------------------------------------------------------------------
# rate estimation

@dataclass
class RatesResult:
    levels: np.ndarray
    x: np.ndarray               # fit abscissa (level number or -log2 h)
    N: int
    mean_diff: np.ndarray
    var_diff: np.ndarray
    mean_fine: np.ndarray
    var_fine: np.ndarray
    cost_per_sample: np.ndarray
    alpha: float
    beta: float
    gamma: float
    alpha_stderr: float
    beta_stderr: float
    gamma_stderr: float


@dataclass
class LevelTable:
    """Raw per-level statistics from a fixed number of coupled samples."""

    levels: np.ndarray
    N: np.ndarray
    mean_diff: np.ndarray
    var_diff: np.ndarray
    mean_fine: np.ndarray
    var_fine: np.ndarray
    cost_per_sample: np.ndarray


def level_table(sampler, levels, N_per_level, seed, threads=1) -> LevelTable:
    """N coupled samples on each listed level; no fitting."""
    levels = list(levels)
    pools = []
    for lev in levels:
        pool = _LevelPool([], [], [])
        pool.extend(sampler, lev, seed, N_per_level, threads)
        pools.append(pool)
    N, Y, V, mean_fine, var_fine, C = _pool_stats(pools)
    return LevelTable(levels=np.asarray(levels), N=N, mean_diff=Y,
                      var_diff=V, mean_fine=mean_fine, var_fine=var_fine,
                      cost_per_sample=C)


def estimate_rates(sampler, levels, N_per_level, seed, x_values=None,
                   threads=1) -> RatesResult:
    """Fit decay/growth rates from N coupled samples on each given level.

    Regresses log2|Y_l|, log2 V_l and log2 C_l against ``x_values``
    (default: the level numbers, giving the 2^{-alpha l} convention;
    pass -log2(h_l) to fit against mesh size instead).  Returns slopes
    as positive rates (alpha, beta, gamma) with standard errors.
    """
    levels = list(levels)
    if len(levels) < 3:
        raise MlmcError("need at least 3 levels for a rate fit")
    x = np.asarray(levels if x_values is None else x_values, dtype=np.float64)
    if len(x) != len(levels):
        raise MlmcError("x_values must match levels")

    table = level_table(sampler, levels, N_per_level, seed, threads)
    Y, V = table.mean_diff, table.var_diff
    mean_fine, var_fine, C = table.mean_fine, table.var_fine, table.cost_per_sample

    if (np.abs(Y) == 0.0).any() or (V == 0.0).any():
        raise MlmcError("degenerate fit: zero mean difference or variance")
    a, _, a_se = fit_line(x, np.log2(np.abs(Y)))
    b, _, b_se = fit_line(x, np.log2(V))
    g, _, g_se = fit_line(x, np.log2(C))
    return RatesResult(
        levels=np.asarray(levels), x=x, N=N_per_level,
        mean_diff=Y, var_diff=V, mean_fine=mean_fine, var_fine=var_fine,
        cost_per_sample=C,
        alpha=-a, beta=-b, gamma=g,
        alpha_stderr=a_se, beta_stderr=b_se, gamma_stderr=g_se,
    )


# ---------------------------------------------------------------------------
# telescoping diagnostic

@dataclass
class TelescopeResult:
    level: int
    N: int
    T: float
    coupled_mean: float         # a = mean of P_l - P_{l-1}, coupled
    fine_mean: float            # b = mean of P_l, independent singles
    coarse_mean: float          # c = mean of P_{l-1}, independent singles
    coupled_var: float          # estimator variances (sample var / N)
    fine_var: float
    coarse_var: float


def telescoping_check(sampler, level, N, seed, threads=1) -> TelescopeResult:
    """Consistency ratio T = |a - b + c| / (3 (sqrt V_a + sqrt V_b + sqrt V_c)).

    a, b, c are independent MC estimates of E[P_l - P_{l-1}], E[P_l] and
    E[P_{l-1}]; the V are their estimator variances.  Under a correct
    coupling a - b + c has mean zero, so T > 1 (a three-sigma-style
    deviation) indicates the coupled pair does not telescope.  Returns
    T = 0 when the numerator is below 1e-14 (exact cancellation).
    """
    if level < 2:
        raise MlmcError("telescoping check needs level >= 2")

    def draw_coupled(n):
        fine, coarse, _ = sampler.sample(level, substream(seed, _KIND_COUPLED, level, n))
        return fine - coarse

    def draw_fine(n):
        value, _ = sampler.sample_single(level, substream(seed, _KIND_FINE_SINGLE, level, n))
        return value

    def draw_coarse(n):
        value, _ = sampler.sample_single(level - 1, substream(seed, _KIND_COARSE_SINGLE, level, n))
        return value

    a_vals = np.array(_ordered_map(draw_coupled, range(N), threads))
    b_vals = np.array(_ordered_map(draw_fine, range(N), threads))
    c_vals = np.array(_ordered_map(draw_coarse, range(N), threads))
    if not np.isfinite(a_vals).all() or not np.isfinite(b_vals).all() \
            or not np.isfinite(c_vals).all():
        raise MlmcError(f"non-finite sample in telescoping check, level {level}")
    a, b, c = a_vals.mean(), b_vals.mean(), c_vals.mean()
    va = a_vals.var(ddof=1) / N
    vb = b_vals.var(ddof=1) / N
    vc = c_vals.var(ddof=1) / N
    numer = abs(a - b + c)
    if numer < 1e-14:
        T = 0.0
    else:
        T = numer / (3.0 * (math.sqrt(va) + math.sqrt(vb) + math.sqrt(vc)))
    return TelescopeResult(level=level, N=N, T=float(T),
                           coupled_mean=float(a), fine_mean=float(b),
                           coarse_mean=float(c), coupled_var=float(va),
                           fine_var=float(vb), coarse_var=float(vc))


# ---------------------------------------------------------------------------
# single-level baseline

@dataclass
class McResult:
    estimate: float
    epsilon: float
    seed: int
    level: int
    N_required: int             # ceil(2 V / eps^2) from the pilot
    N_run: int                  # samples actually drawn (capped)
    variance: float
    cost_per_sample: float
    total_cost: float           # N_required * cost_per_sample
    total_cost_run: float


def standard_mc_run(sampler, epsilon, finest_level, seed, pilot_N=100,
                    max_samples=None, threads=1) -> McResult:
    """Single-level MC on the finest level, sized from a pilot run.

    The pilot estimates the variance, fixing N = ceil(2 V / eps^2) for a
    statistical error of eps/sqrt(2) (matching the MLMC split).  The
    recorded total cost is N times the measured per-sample cost even when
    ``max_samples`` caps the draws actually taken — the cap changes the
    achieved standard error, never the reported cost of reaching eps.
    """
    if epsilon <= 0:
        raise MlmcError("epsilon must be positive")

    def draw(n):
        return sampler.sample_single(finest_level, substream(seed, _KIND_MC, finest_level, n))

    pilot = _ordered_map(draw, range(pilot_N), threads)
    values = [v for v, _ in pilot]
    costs = [c for _, c in pilot]
    variance = float(np.var(values, ddof=1))
    N_required = max(pilot_N, int(math.ceil(2.0 * variance / epsilon**2)))
    N_run = N_required if max_samples is None else min(N_required, max_samples)
    if N_run > pilot_N:
        extra = _ordered_map(draw, range(pilot_N, N_run), threads)
        values.extend(v for v, _ in extra)
        costs.extend(c for _, c in extra)
    values = np.array(values)
    if not np.isfinite(values).all():
        raise MlmcError("non-finite sample in MC baseline")
    cost_per_sample = float(np.mean(costs))
    return McResult(
        estimate=float(values.mean()),
        epsilon=epsilon,
        seed=seed,
        level=finest_level,
        N_required=N_required,
        N_run=N_run,
        variance=float(np.var(values, ddof=1)),
        cost_per_sample=cost_per_sample,
        total_cost=N_required * cost_per_sample,
        total_cost_run=float(np.sum(costs)),
    )


# ---------------------------------------------------------------------------
# output

def level_csv_text(result) -> str:
    """Per-level table: level, N, mean_diff, var_diff, mean_fine, var_fine, cost."""
    if isinstance(result, RatesResult):
        N = np.full(len(result.levels), result.N)
    else:
        N = result.N
    lines = ["level,N,mean_diff,var_diff,mean_fine,var_fine,cost"]
    for i, lev in enumerate(result.levels):
        lines.append(
            f"{int(lev)},{int(N[i])},{float(result.mean_diff[i])!r},"
            f"{float(result.var_diff[i])!r},{float(result.mean_fine[i])!r},"
            f"{float(result.var_fine[i])!r},"
            f"{float(result.cost_per_sample[i])!r}"
        )
    return "\n".join(lines) + "\n"


def write_level_csv(result, path):
    with open(path, "w") as fh:
        fh.write(level_csv_text(result))


def format_summary(result: MlmcResult) -> str:
    lines = [
        f"estimate      {float(result.estimate)!r}",
        f"epsilon       {float(result.epsilon)!r}",
        f"seed          {result.seed}",
        f"levels        {result.levels.tolist()}",
        f"N             {result.N.tolist()}",
        f"alpha         {float(result.alpha)!r}",
        f"bias          {float(result.bias)!r}",
        f"stat_error    {float(result.stat_error)!r}",
        f"total_cost    {float(result.total_cost)!r}",
    ]
    return "\n".join(lines) + "\n"
