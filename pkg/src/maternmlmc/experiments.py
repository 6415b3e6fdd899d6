"""Experiment suite: the desk-scale studies wired as level samplers.

Everything here composes the lower layers into the estimators the driver
consumes: Gaussian fields are sampled on an outer domain D (so boundary
artifacts stay away from the region of interest), restricted to the inner
domain G, and fed either directly into the squared L2 norm functional or
into a lognormal Darcy flow solve whose output functional is ||q||^2.

Costs are reported in deterministic work units: the number of unknowns of
each linear solve a sample triggers, summed.  Wall-clock time never enters
results (only run manifests), keeping outputs machine-independent and
bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, fields as dataclass_fields

import numpy as np

from .fem import (
    Field,
    FunctionSpace,
    assemble_weighted_stiffness,
    embedded_dof_map,
    evaluation_matrix,
    l2_norm_sq,
)
from .mesh import MeshHierarchy, build_hierarchy, generate_structured, _embed
from .mlmc import _ordered_map
from .rng import substream
from .spde import (
    CovarianceCurve,
    MaternParams,
    MaternSolver,
    SolverConfig,
    empirical_covariance,
    matern_covariance,
    pcg_solve,
)
from .supermesh import build_supermesh, nested_supermesh_view
from .whitenoise import CoupledWhiteNoiseSampler, WhiteNoiseSampler

__all__ = [
    "OUTER_BOX",
    "INNER_BOX",
    "ConfigError",
    "ExperimentConfig",
    "parse_config_file",
    "parse_levels",
    "LognormalCoefficient",
    "calibrate_lognormal",
    "HierarchyResources",
    "MaternNormSampler",
    "DarcySampler",
    "PRefinementSampler",
    "solve_darcy",
    "run_covariance",
    "covariance_probes",
]

OUTER_BOX = (-1.0, 1.0, -1.0, 1.0)
INNER_BOX = (-0.5, 0.5, -0.5, 0.5)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

@dataclass
class ExperimentConfig:
    """Shared knobs for all experiments; subcommands use what they need."""

    experiment: str = ""
    nu: float = 1.0
    sigma: float = 1.0
    lam: float = 0.2
    degree: int = 0             # 0 = derive from nu (P1 for nu=1, P2 for nu=3)
    base_nx: int = 4
    num_levels: int = 6
    amplitude: float = 0.2
    mesh_seed: int = 1
    seed: int = 0
    levels: str = ""            # "2..6" or "6"; empty = experiment default
    N: int = 2000
    epsilons: str = "4e-5,2e-5,1e-5"
    nx: int = 56                # covariance validation mesh (h ~ 0.05)
    start_level: int = 1
    initial_N: int = 100
    max_mc_samples: int = 20000
    broken: str = "none"        # none | independent | interpolated
    tol: float = 1e-12
    threads: int = 1
    out: str = "results"

    def __post_init__(self):
        if self.nu <= 0 or self.sigma <= 0 or self.lam <= 0:
            raise ConfigError("nu, sigma, lam must be positive")
        if self.base_nx < 1 or self.num_levels < 1:
            raise ConfigError("base_nx and num_levels must be >= 1")
        if self.N < 2:
            raise ConfigError("N must be >= 2")
        if self.broken not in ("none", "independent", "interpolated"):
            raise ConfigError(f"unknown broken mode {self.broken!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.degree < 0 or self.degree > 3:
            raise ConfigError("degree must be 1..3 (or 0 for automatic)")

    @property
    def matern(self) -> MaternParams:
        return MaternParams(self.sigma, self.nu, self.lam)

    @property
    def space_degree(self) -> int:
        """P1 for nu=1, P2 for nu=3 (degree k, the field regularity),
        capped at the supported cubic elements; explicit override wins."""
        if self.degree:
            return self.degree
        return min(self.matern.k, 3)

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(tol=self.tol)

    @property
    def epsilon_list(self):
        try:
            eps = [float(tok) for tok in self.epsilons.split(",") if tok.strip()]
        except ValueError as err:
            raise ConfigError(f"bad epsilons {self.epsilons!r}") from err
        if not eps or any(e <= 0 for e in eps):
            raise ConfigError("epsilons must be positive numbers")
        return eps


_CONFIG_FIELDS = {f.name: f.type for f in dataclass_fields(ExperimentConfig)}


def parse_config_file(path) -> dict:
    """key=value lines; '#' starts a comment; unknown keys are errors."""
    raw = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def build_config(file_values: dict, overrides: dict) -> ExperimentConfig:
    """Defaults < config file < explicit command-line values."""
    merged = {}
    for key, value in {**file_values, **overrides}.items():
        if value is None:
            continue
        kind = _CONFIG_FIELDS[key]
        caster = {"int": int, "float": float, "str": str}[
            kind if isinstance(kind, str) else kind.__name__
        ]
        try:
            merged[key] = caster(value)
        except ValueError as err:
            raise ConfigError(f"bad value for {key}: {value!r}") from err
    return ExperimentConfig(**merged)


def parse_levels(spec: str, default_lo=2, default_hi=None):
    """'a..b' -> (a, b); a bare integer n -> (default_lo, n)."""
    spec = spec.strip()
    try:
        if ".." in spec:
            lo_str, hi_str = spec.split("..", 1)
            lo, hi = int(lo_str), int(hi_str)
        else:
            hi = int(spec)
            lo = default_lo
    except ValueError as err:
        raise ConfigError(f"bad level range {spec!r}") from err
    if default_hi is not None:
        hi = min(hi, default_hi)
    if lo > hi or lo < 1:
        raise ConfigError(f"bad level range {spec!r}")
    return lo, hi


# ---------------------------------------------------------------------------
# lognormal coefficient calibration

@dataclass(frozen=True)
class LognormalCoefficient:
    """exp(mu + sigma * u_hat) with u_hat a unit-variance field."""

    mu: float
    sigma: float


def calibrate_lognormal(mean=1.0, std=0.2) -> LognormalCoefficient:
    """Moments of a lognormal: exp(mu + s^2/2) = mean and
    (exp(s^2) - 1) exp(2 mu + s^2) = std^2, solved in closed form."""
    if mean <= 0 or std <= 0:
        raise ConfigError("mean and std must be positive")
    s_sq = math.log(1.0 + (std / mean) ** 2)
    mu = math.log(mean) - 0.5 * s_sq
    return LognormalCoefficient(mu=mu, sigma=math.sqrt(s_sq))


# ---------------------------------------------------------------------------
# per-level resources

class _Level:
    def __init__(self, pair, degree, params, solver_config):
        self.pair = pair
        self.outer_space = FunctionSpace(pair.outer, degree)
        self.inner_space = FunctionSpace(pair.inner, degree)
        self.dof_map = embedded_dof_map(self.outer_space, self.inner_space,
                                        pair.cell_map)
        self.noise = WhiteNoiseSampler(self.outer_space)
        self.matern = MaternSolver(self.outer_space, params, solver_config)
        # deterministic work units: unknowns per elliptic solve, k solves
        self.work = params.k * len(self.matern.free_dofs)

    def restrict(self, u: Field) -> Field:
        return Field(self.inner_space, u.coefficients[self.dof_map])

    def norm_sq_G(self, u: Field) -> float:
        return l2_norm_sq(self.restrict(u))


class HierarchyResources:
    """Lazy per-level spaces, solvers and coupled samplers on a hierarchy.

    Everything heavy (supermeshes, assembled operators, factorizations) is
    built once on first use and shared by all samplers, which is also what
    makes repeated solves cheap: the level operators never change.
    """

    def __init__(self, hierarchy: MeshHierarchy, degree: int,
                 params: MaternParams, solver_config: SolverConfig):
        self.hierarchy = hierarchy
        self.degree = degree
        self.params = params
        self.solver_config = solver_config
        self._levels = {}
        self._coupled = {}
        self._interp = {}
        # sampler threads touch the caches concurrently; constructing a
        # level twice would hand out spaces with different identities
        self._lock = threading.Lock()

    @property
    def num_levels(self):
        return self.hierarchy.num_levels

    def level(self, ell) -> _Level:
        with self._lock:
            if ell not in self._levels:
                self._levels[ell] = _Level(self.hierarchy.pair(ell),
                                           self.degree, self.params,
                                           self.solver_config)
            return self._levels[ell]

    def coupled(self, ell) -> CoupledWhiteNoiseSampler:
        """Coupled white-noise sampler for the (ell, ell-1) mesh pair."""
        fine, coarse = self.level(ell), self.level(ell - 1)
        with self._lock:
            if ell not in self._coupled:
                sm = build_supermesh(fine.pair.outer, coarse.pair.outer)
                self._coupled[ell] = CoupledWhiteNoiseSampler(
                    fine.outer_space, coarse.outer_space, sm, method="affine"
                )
            return self._coupled[ell]

    def interpolator(self, ell):
        """Point-evaluation of level-ell fields at level-(ell-1) dofs (used
        only by the deliberately broken coupling)."""
        fine, coarse = self.level(ell), self.level(ell - 1)
        with self._lock:
            if ell not in self._interp:
                self._interp[ell] = evaluation_matrix(
                    fine.outer_space, coarse.outer_space.dof_coords
                )
            return self._interp[ell]


def resources_for(config: ExperimentConfig) -> HierarchyResources:
    hierarchy = build_hierarchy(
        base_nx=config.base_nx,
        num_levels=config.num_levels,
        amplitude=config.amplitude,
        seed=config.mesh_seed,
        outer_box=OUTER_BOX,
        inner_box=INNER_BOX,
    )
    return HierarchyResources(hierarchy, config.space_degree, config.matern,
                              config.solver)


# ---------------------------------------------------------------------------
# Matérn norm sampler

class MaternNormSampler:
    """LevelSampler for P_l = ||u_l||^2_{L2(G)} with u_l the Matérn field.

    ``broken`` deliberately destroys the coupling for negative controls:
    'independent' draws separate noise for the two members (wrecks the
    variance decay but keeps the telescoping means consistent), while
    'interpolated' replaces the coarse member by the point interpolation
    of the fine field (wrong coarse marginal law, so the telescoping sum
    itself becomes inconsistent).
    """

    def __init__(self, resources: HierarchyResources, broken="none"):
        if broken not in ("none", "independent", "interpolated"):
            raise ConfigError(f"unknown broken mode {broken!r}")
        self.resources = resources
        self.broken = broken
        self.num_levels = resources.num_levels

    def _field(self, ell, noise):
        return self.resources.level(ell).matern.sample(noise)

    def sample(self, level, rng):
        res = self.resources
        if level == 1:
            value, cost = self.sample_single(1, rng)
            return value, 0.0, cost
        fine, coarse = res.level(level), res.level(level - 1)
        cost = fine.work + coarse.work
        if self.broken == "independent":
            u_f = self._field(level, fine.noise.sample(rng))
            u_c = self._field(level - 1, coarse.noise.sample(rng))
        elif self.broken == "interpolated":
            u_f = self._field(level, fine.noise.sample(rng))
            u_c = Field(coarse.outer_space,
                        res.interpolator(level) @ u_f.coefficients)
            cost = fine.work
        else:
            pair = res.coupled(level).sample(rng)
            u_f = self._field(level, pair.fine)
            u_c = self._field(level - 1, pair.coarse)
        return fine.norm_sq_G(u_f), coarse.norm_sq_G(u_c), cost

    def sample_single(self, level, rng):
        lev = self.resources.level(level)
        u = self._field(level, lev.noise.sample(rng))
        return lev.norm_sq_G(u), lev.work


# ---------------------------------------------------------------------------
# Darcy flow

def solve_darcy(space: FunctionSpace, u_hat: Field,
                coeff: LognormalCoefficient,
                config: SolverConfig = SolverConfig()):
    """-div(exp(mu + sigma u_hat) grad q) = 1 on the space's mesh,
    homogeneous Dirichlet; returns (q, work units of the solve)."""
    if u_hat.space is not space:
        raise ConfigError("u_hat must live on the Darcy space")
    log_coeff = Field(space, coeff.mu + coeff.sigma * u_hat.coefficients)
    A = assemble_weighted_stiffness(space, log_coeff).tocsr()
    free = np.setdiff1d(np.arange(space.num_dofs), space.boundary_dofs,
                        assume_unique=True)
    A_ff = A[free][:, free].tocsr()
    load = space.mass_matrix() @ np.ones(space.num_dofs)
    q_free, _ = pcg_solve(A_ff, load[free], config)
    q = np.zeros(space.num_dofs)
    q[free] = q_free
    return Field(space, q), len(free)


class DarcySampler:
    """LevelSampler for P_l = ||q_l||^2_{L2(G)}: the Matérn field enters a
    lognormal diffusion coefficient, q solves the unit-source flow problem
    on G with zero boundary values."""

    def __init__(self, resources: HierarchyResources,
                 coeff: LognormalCoefficient = calibrate_lognormal()):
        self.resources = resources
        self.coeff = coeff
        self.num_levels = resources.num_levels
        self._darcy = {}

    def _level_solve(self, ell, u_outer: Field):
        lev = self.resources.level(ell)
        cache = self._darcy.get(ell)
        if cache is None:
            space = lev.inner_space
            free = np.setdiff1d(np.arange(space.num_dofs), space.boundary_dofs,
                                assume_unique=True)
            load = space.mass_matrix() @ np.ones(space.num_dofs)
            cache = self._darcy[ell] = (space, free, load[free])
        space, free, load_free = cache
        u_hat = lev.restrict(u_outer)
        log_coeff = Field(space, self.coeff.mu
                          + self.coeff.sigma * u_hat.coefficients)
        A = assemble_weighted_stiffness(space, log_coeff).tocsr()
        A_ff = A[free][:, free].tocsr()
        q_free, _ = pcg_solve(A_ff, load_free, self.resources.solver_config)
        q = np.zeros(space.num_dofs)
        q[free] = q_free
        return l2_norm_sq(Field(space, q)), len(free)

    def sample(self, level, rng):
        res = self.resources
        if level == 1:
            value, cost = self.sample_single(1, rng)
            return value, 0.0, cost
        pair = res.coupled(level).sample(rng)
        u_f = res.level(level).matern.sample(pair.fine)
        u_c = res.level(level - 1).matern.sample(pair.coarse)
        p_f, w_f = self._level_solve(level, u_f)
        p_c, w_c = self._level_solve(level - 1, u_c)
        cost = res.level(level).work + res.level(level - 1).work + w_f + w_c
        return p_f, p_c, cost

    def sample_single(self, level, rng):
        lev = self.resources.level(level)
        u = lev.matern.sample(lev.noise.sample(rng))
        value, w = self._level_solve(level, u)
        return value, lev.work + w


# ---------------------------------------------------------------------------
# p-refinement on a fixed mesh

class PRefinementSampler:
    """Levels are polynomial degrees on one fixed (coarse) mesh; the
    white-noise coupling across degrees needs no supermesh because the two
    spaces share the mesh.  Functional: Darcy ||q||^2 as in DarcySampler."""

    def __init__(self, pair, params: MaternParams,
                 coeff: LognormalCoefficient = calibrate_lognormal(),
                 degrees=(1, 2, 3),
                 solver_config: SolverConfig = SolverConfig()):
        if any(d not in (1, 2, 3) for d in degrees):
            raise ConfigError(f"unsupported degrees {degrees}")
        self.degrees = tuple(degrees)
        self.num_levels = len(self.degrees)
        self.coeff = coeff
        self.solver_config = solver_config
        self._levels = [
            _Level(pair, degree, params, solver_config) for degree in degrees
        ]
        sm = nested_supermesh_view(pair.outer, pair.outer)
        self._coupled = [
            CoupledWhiteNoiseSampler(
                self._levels[i].outer_space, self._levels[i - 1].outer_space,
                sm, method="affine",
            )
            for i in range(1, len(self._levels))
        ]
        self._darcy = [None] * len(self._levels)

    def _solve(self, index, u_outer):
        lev = self._levels[index]
        if self._darcy[index] is None:
            space = lev.inner_space
            free = np.setdiff1d(np.arange(space.num_dofs), space.boundary_dofs,
                                assume_unique=True)
            load = space.mass_matrix() @ np.ones(space.num_dofs)
            self._darcy[index] = (free, load[free])
        free, load_free = self._darcy[index]
        space = lev.inner_space
        u_hat = lev.restrict(u_outer)
        log_coeff = Field(space, self.coeff.mu
                          + self.coeff.sigma * u_hat.coefficients)
        A = assemble_weighted_stiffness(space, log_coeff).tocsr()
        A_ff = A[free][:, free].tocsr()
        q_free, _ = pcg_solve(A_ff, load_free, self.solver_config)
        q = np.zeros(space.num_dofs)
        q[free] = q_free
        return l2_norm_sq(Field(space, q)), len(free)

    def sample(self, level, rng):
        if level == 1:
            value, cost = self.sample_single(1, rng)
            return value, 0.0, cost
        pair = self._coupled[level - 2].sample(rng)
        fine, coarse = self._levels[level - 1], self._levels[level - 2]
        u_f = fine.matern.sample(pair.fine)
        u_c = coarse.matern.sample(pair.coarse)
        p_f, w_f = self._solve(level - 1, u_f)
        p_c, w_c = self._solve(level - 2, u_c)
        return p_f, p_c, fine.work + coarse.work + w_f + w_c

    def sample_single(self, level, rng):
        lev = self._levels[level - 1]
        u = lev.matern.sample(lev.noise.sample(rng))
        value, w = self._solve(level - 1, u)
        return value, lev.work + w


# ---------------------------------------------------------------------------
# covariance validation

def covariance_probes(anchor, r_max=0.4, count=10):
    """Probes east of the anchor at ``count`` radii linearly spaced in
    [0, r_max] (the r = 0 probe measures the variance)."""
    radii = np.linspace(0.0, r_max, count)
    anchor = np.asarray(anchor, dtype=np.float64)
    return np.column_stack([anchor[0] + radii, np.full(count, anchor[1])])


def run_covariance(params: MaternParams, nx, N, seed, anchor=(0.0, 0.0),
                   r_max=0.4, probes=10, threads=1,
                   solver_config: SolverConfig = SolverConfig()):
    """Empirical-vs-analytic covariance on a structured embedded mesh.

    Samples N Matérn fields on D, restricts them to G and estimates
    Cov(u(anchor), u(probe)) at probes east of the anchor.  Returns
    (CovarianceCurve, exact values).  Only valid for parameters with
    integer k; half-integer smoothness has no elliptic sampler and is
    validated against its closed form instead.
    """
    pair = _embed(generate_structured(nx, box=OUTER_BOX), INNER_BOX)
    degree = min(params.k, 3)
    lev = _Level(pair, degree, params, solver_config)

    def draw(n):
        rng = substream(seed, 0, n)
        u = lev.matern.sample(lev.noise.sample(rng))
        return lev.restrict(u).coefficients

    rows = _ordered_map(draw, range(N), threads)
    points = covariance_probes(anchor, r_max, probes)
    curve = empirical_covariance(lev.inner_space, np.asarray(rows),
                                 anchor, points)
    exact = matern_covariance(curve.radii, params)
    return curve, exact
