"""Matern Gaussian field sampling on non-nested simplicial meshes, with
multilevel Monte Carlo drivers over a lognormal Darcy flow problem.

The layers, bottom up: ``rng`` (splittable counter-based streams),
``mesh`` (triangulations, refinement, perturbed hierarchies), ``fem``
(Lagrange spaces and assembly), ``supermesh`` (exact common refinements),
``whitenoise`` (element-local factorized white-noise sampling, coupled
across mesh pairs), ``spde`` (Whittle-SPDE Matern solver and covariance),
``mlmc`` (adaptive estimator, rates, diagnostics), ``experiments``
(problem wiring) and ``cli`` (subcommand driver).
"""

__version__ = "0.1.0"

from .mesh import (
    Mesh,
    MeshError,
    MeshHierarchy,
    build_hierarchy,
    generate_structured,
    perturb_interior,
    refine_uniform,
)
from .fem import Field, FemError, FunctionSpace
from .supermesh import Supermesh, SupermeshError, build_supermesh
from .whitenoise import (
    CoupledWhiteNoiseSampler,
    WhiteNoiseSampler,
    assemble_mixed_mass,
)
from .spde import (
    MaternParams,
    MaternSolver,
    SolverConfig,
    SolverError,
    bessel_k,
    matern_covariance,
)
from .mlmc import (
    MlmcError,
    estimate_rates,
    mlmc_run,
    standard_mc_run,
    telescoping_check,
)
from .experiments import (
    ConfigError,
    DarcySampler,
    ExperimentConfig,
    MaternNormSampler,
    PRefinementSampler,
    calibrate_lognormal,
    run_covariance,
    solve_darcy,
)
from .rng import substream

__all__ = [
    "__version__",
    "Mesh",
    "MeshError",
    "MeshHierarchy",
    "build_hierarchy",
    "generate_structured",
    "perturb_interior",
    "refine_uniform",
    "Field",
    "FemError",
    "FunctionSpace",
    "Supermesh",
    "SupermeshError",
    "build_supermesh",
    "CoupledWhiteNoiseSampler",
    "WhiteNoiseSampler",
    "assemble_mixed_mass",
    "MaternParams",
    "MaternSolver",
    "SolverConfig",
    "SolverError",
    "bessel_k",
    "matern_covariance",
    "MlmcError",
    "estimate_rates",
    "mlmc_run",
    "standard_mc_run",
    "telescoping_check",
    "ConfigError",
    "DarcySampler",
    "ExperimentConfig",
    "MaternNormSampler",
    "PRefinementSampler",
    "calibrate_lognormal",
    "run_covariance",
    "solve_darcy",
    "substream",
]
