"""Acceptance gate: the nine headline checks for the sampling/MLMC stack.

Each test prints one PASS/FAIL line (visible with ``pytest -s`` or on
failure) and asserts the same condition, including its wall-clock budget.
The heavyweight statistical checks pin every knob (mesh seed, sample seed,
level window, sample counts) so reruns are bit-reproducible.
"""

import math
import time

import numpy as np
import pytest

from maternmlmc.cli import main as cli_main
from maternmlmc.experiments import (
    INNER_BOX,
    OUTER_BOX,
    DarcySampler,
    ExperimentConfig,
    HierarchyResources,
    MaternNormSampler,
    calibrate_lognormal,
    resources_for,
    run_covariance,
)
from maternmlmc.fem import FunctionSpace
from maternmlmc.mesh import (
    build_hierarchy,
    generate_structured,
    perturb_interior,
    refine_uniform,
)
from maternmlmc.mlmc import (
    estimate_rates,
    mlmc_run,
    standard_mc_run,
    telescoping_check,
)
from maternmlmc.rng import substream
from maternmlmc.spde import MaternParams, SolverConfig, matern_covariance
from maternmlmc.supermesh import build_supermesh
from maternmlmc.whitenoise import (
    CoupledWhiteNoiseSampler,
    WhiteNoiseSampler,
    assemble_mixed_mass,
    local_mass_blocks,
)


def report(num, name, ok, seconds, detail=""):
    verdict = "PASS" if ok else "FAIL"
    tail = f"  [{detail}]" if detail else ""
    print(f"criterion {num} ({name}): {verdict} in {seconds:.1f}s{tail}")


# ---------------------------------------------------------------------------
# shared hierarchy: seven levels, the deepest any criterion needs

@pytest.fixture(scope="module")
def hier7():
    return build_hierarchy(num_levels=7, base_nx=4, amplitude=0.2, seed=1,
                           outer_box=OUTER_BOX, inner_box=INNER_BOX)


@pytest.fixture(scope="module")
def res02(hier7):
    # production Matern parameters: sigma = 1, nu = 1, lambda = 0.2
    return HierarchyResources(hier7, 1, MaternParams(1.0, 1.0, 0.2),
                              SolverConfig(tol=1e-12))


@pytest.fixture(scope="module")
def darcy(res02):
    return DarcySampler(res02, calibrate_lognormal(mean=1.0, std=0.2))


def test_criterion_1_exact_coupling_algebra():
    t0 = time.perf_counter()
    coarse = generate_structured(8, box=OUTER_BOX)
    fine = perturb_interior(refine_uniform(coarse), amplitude=0.2, seed=1)
    fs, cs = FunctionSpace(fine, 1), FunctionSpace(coarse, 1)
    sm = build_supermesh(fine, coarse)
    M_f, M_c, M_fc = local_mass_blocks(fs, cs, sm)

    # change-of-basis identity per supermesh cell
    lemma = np.einsum("nji,njk->nik", M_fc, np.linalg.solve(M_f, M_fc))
    lemma_err = float(np.abs(lemma - M_c).max())

    # scattering the per-cell blocks reassembles each parent's mass matrix
    def reassemble(blocks, space):
        dofs = space.cell_dofs[sm.parents_for(space.mesh)]
        M = np.zeros((space.num_dofs, space.num_dofs))
        np.add.at(M, (dofs[:, :, None], dofs[:, None, :]), blocks)
        return M

    fine_err = float(np.abs(
        reassemble(M_f, fs) - fs.mass_matrix().toarray()).max())
    coarse_err = float(np.abs(
        reassemble(M_c, cs) - cs.mass_matrix().toarray()).max())

    dt = time.perf_counter() - t0
    ok = lemma_err <= 1e-10 and max(fine_err, coarse_err) <= 1e-12 and dt < 10
    report(1, "exact coupling algebra", ok, dt,
           f"lemma {lemma_err:.1e}, reassembly "
           f"{max(fine_err, coarse_err):.1e}")
    assert lemma_err <= 1e-10
    assert fine_err <= 1e-12 and coarse_err <= 1e-12
    assert dt < 10


def test_criterion_2_white_noise_law():
    t0 = time.perf_counter()
    N = 100_000
    seed = 123

    def block_ok(emp, exact, var_rows, var_cols, n_samples):
        # Var(b_i b_j) = C_ii C_jj + C_ij^2 for joint Gaussians
        stderr = np.sqrt((np.outer(var_rows, var_cols) + exact**2)
                         / n_samples)
        return float(np.mean(np.abs(emp - exact) <= 5.0 * stderr))

    # single-mesh law on a perturbed 25-dof mesh
    mesh = perturb_interior(generate_structured(4, box=OUTER_BOX),
                            amplitude=0.2, seed=2)
    space = FunctionSpace(mesh, 1)
    B = WhiteNoiseSampler(space).sample_many(substream(seed, 0), N)
    M = space.mass_matrix().toarray()
    frac_single = block_ok(B.T @ B / N, M, np.diag(M), np.diag(M), N)

    # coupled law on a non-nested 25 + 16 dof pair
    fine = generate_structured(4, box=OUTER_BOX)
    coarse = generate_structured(3, box=OUTER_BOX)
    fs, cs = FunctionSpace(fine, 1), FunctionSpace(coarse, 1)
    sampler = CoupledWhiteNoiseSampler(fs, cs, build_supermesh(fine, coarse))
    B_f, B_c = sampler.sample_many(substream(seed, 1), N)
    M_f = fs.mass_matrix().toarray()
    M_c = cs.mass_matrix().toarray()
    M_fc = assemble_mixed_mass(fs, cs, sampler.supermesh).toarray()
    frac_fine = block_ok(B_f.T @ B_f / N, M_f, np.diag(M_f), np.diag(M_f), N)
    frac_coarse = block_ok(B_c.T @ B_c / N, M_c, np.diag(M_c), np.diag(M_c),
                           N)
    frac_cross = block_ok(B_f.T @ B_c / N, M_fc, np.diag(M_f), np.diag(M_c),
                          N)

    dt = time.perf_counter() - t0
    fracs = (frac_single, frac_fine, frac_coarse, frac_cross)
    ok = all(f >= 0.99 for f in fracs) and dt < 120
    report(2, "white-noise law", ok, dt,
           "within 5 sigma: single {:.4f}, fine {:.4f}, coarse {:.4f}, "
           "cross {:.4f}".format(*fracs))
    for frac in fracs:
        assert frac >= 0.99
    assert dt < 120


def test_criterion_3_supermesh_conservation_and_size(hier7):
    results = []
    for lev in range(2, 7):
        fine = hier7.pair(lev).outer
        coarse = hier7.pair(lev - 1).outer
        t0 = time.perf_counter()
        sm = build_supermesh(fine, coarse)
        dt = time.perf_counter() - t0
        defect = abs(float(sm.areas.sum()) - 4.0) / 4.0
        ratio = sm.num_cells / fine.num_cells
        results.append((lev, defect, ratio, dt))

    ok = all(defect <= 1e-10 and ratio <= 4.0 and dt < 30
             for _, defect, ratio, dt in results)
    worst = max(results, key=lambda r: r[1])
    report(3, "supermesh conservation and size", ok,
           sum(r[3] for r in results),
           f"max area defect {worst[1]:.1e}, "
           f"max ratio {max(r[2] for r in results):.3f}, "
           f"max build {max(r[3] for r in results):.1f}s")
    for lev, defect, ratio, dt in results:
        assert defect <= 1e-10, f"area defect {defect} at level {lev}"
        assert ratio <= 4.0, f"supermesh ratio {ratio} at level {lev}"
        assert dt < 30, f"supermesh build {dt:.1f}s at level {lev}"


def test_criterion_4_matern_covariance_curve():
    t0 = time.perf_counter()
    # nu = 1/2: the sampler-independent closed form
    radii = np.linspace(0.0, 0.4, 10)
    half = MaternParams(sigma=1.0, nu=0.5, lam=0.2)
    closed = half.sigma**2 * np.exp(-half.kappa * radii)
    closed_err = float(np.abs(matern_covariance(radii, half) - closed).max())

    # nu = 1: empirical curve on the h ~ 0.05 structured validation mesh
    params = MaternParams(sigma=1.0, nu=1.0, lam=0.2)
    curve, exact = run_covariance(params, nx=56, N=2000, seed=0)
    dev = np.abs(curve.estimate - exact)
    band = 3.0 * curve.stderr + 0.02

    dt = time.perf_counter() - t0
    ok = closed_err < 1e-12 and bool((dev <= band).all()) and dt < 600
    report(4, "Matern covariance curve", ok, dt,
           f"nu=1/2 closed-form {closed_err:.1e}, nu=1 max dev "
           f"{dev.max():.4f} vs band {band.min():.4f}..{band.max():.4f}")
    assert closed_err < 1e-12
    assert (dev <= band).all()
    assert dt < 600


def test_criterion_5_norm_convergence_rates(hier7):
    t0 = time.perf_counter()
    # lambda = 2.0: the coarsest level must resolve the correlation length
    # for the asymptotic h^2 / h^4 rates to show inside a 4-level window
    res = HierarchyResources(hier7, 1, MaternParams(1.0, 1.0, 2.0),
                             SolverConfig(tol=1e-12))
    sampler = MaternNormSampler(res)
    levels = [3, 4, 5, 6]
    x = np.array([-math.log2(hier7.h(lev)) for lev in levels])
    rr = estimate_rates(sampler, levels, N_per_level=2000, seed=0, x_values=x)

    dt = time.perf_counter() - t0
    ok = 1.5 <= rr.alpha <= 2.5 and 3.2 <= rr.beta <= 4.8 and dt < 900
    report(5, "norm convergence rates", ok, dt,
           f"alpha {rr.alpha:.3f}+-{rr.alpha_stderr:.3f}, "
           f"beta {rr.beta:.3f}+-{rr.beta_stderr:.3f}")
    assert 1.5 <= rr.alpha <= 2.5
    assert 3.2 <= rr.beta <= 4.8
    assert dt < 900


def test_criterion_6_telescoping_consistency(res02):
    t0 = time.perf_counter()
    t_nu1 = [telescoping_check(MaternNormSampler(res02), lev, N=2000, seed=0)
             for lev in (2, 3, 4, 5)]

    res_nu3 = resources_for(ExperimentConfig(nu=3.0, num_levels=4))
    t_nu3 = [telescoping_check(MaternNormSampler(res_nu3), lev, N=2000,
                               seed=0)
             for lev in (2, 3, 4)]

    control = MaternNormSampler(res02, broken="interpolated")
    t_bad = [telescoping_check(control, lev, N=2000, seed=0)
             for lev in (2, 3, 4)]

    dt = time.perf_counter() - t0
    worst_good = max(r.T for r in t_nu1 + t_nu3)
    best_bad = max(r.T for r in t_bad)
    ok = worst_good < 1.0 and best_bad > 1.0 and dt < 1200
    report(6, "telescoping consistency", ok, dt,
           f"max T good {worst_good:.3f}, max T broken {best_bad:.1f}")
    for r in t_nu1 + t_nu3:
        assert r.T < 1.0, f"T = {r.T} at level {r.level}"
    assert best_bad > 1.0
    assert dt < 1200


def test_criterion_7_darcy_mlmc_rates(darcy):
    t0 = time.perf_counter()
    rr = estimate_rates(darcy, levels=[4, 5, 6, 7], N_per_level=500, seed=0)
    dt = time.perf_counter() - t0
    ok = (1.5 <= rr.alpha <= 2.5 and 3.2 <= rr.beta <= 4.8
          and 1.7 <= rr.gamma <= 2.3 and dt < 1800)
    report(7, "Darcy MLMC rates", ok, dt,
           f"alpha {rr.alpha:.3f}, beta {rr.beta:.3f}, gamma {rr.gamma:.3f}")
    assert 1.5 <= rr.alpha <= 2.5
    assert 3.2 <= rr.beta <= 4.8
    assert 1.7 <= rr.gamma <= 2.3
    assert dt < 1800


def test_criterion_8_mlmc_efficiency(darcy):
    t0 = time.perf_counter()
    epsilons = [4e-5, 2e-5, 1e-5]
    runs = [mlmc_run(darcy, eps, seed=0, initial_N=10) for eps in epsilons]
    eps2_cost = [eps**2 * run.total_cost for eps, run in zip(epsilons, runs)]
    spread = max(eps2_cost) / min(eps2_cost)

    smallest = runs[-1]
    mc = standard_mc_run(darcy, epsilons[-1],
                         finest_level=int(smallest.levels[-1]), seed=0,
                         max_samples=2000)
    ratio = mc.total_cost / smallest.total_cost

    dt = time.perf_counter() - t0
    ok = (spread < 2.0 and smallest.num_levels >= 4 and ratio > 10
          and dt < 3600)
    report(8, "MLMC efficiency", ok, dt,
           f"eps^2*C spread {spread:.2f}, levels {smallest.num_levels}, "
           f"MC/MLMC cost ratio {ratio:.1f}")
    assert spread < 2.0
    assert smallest.num_levels >= 4
    assert ratio > 10
    assert dt < 3600


def test_criterion_9_determinism_across_threads(tmp_path, capsys):
    t0 = time.perf_counter()
    jobs = {
        "hierarchy": ["--num-levels", "2"],
        "matern-convergence": ["--num-levels", "4", "--levels", "2..4",
                               "--N", "40", "--lam", "0.8"],
        "covariance": ["--nx", "8", "--N", "60"],
        "telescope": ["--num-levels", "3", "--levels", "2..3", "--N", "200",
                      "--seed", "11"],
        "rates": ["--num-levels", "4", "--levels", "2..4", "--N", "40"],
        "mlmc": ["--num-levels", "3", "--epsilons", "5e-3",
                 "--initial-N", "8"],
        "mc-compare": ["--num-levels", "3", "--epsilons", "5e-3",
                       "--initial-N", "8", "--max-mc-samples", "60"],
        "p-refine": ["--N", "30"],
    }
    mismatches = []
    for command, args in jobs.items():
        outputs = {}
        for threads in ("1", "4"):
            out = tmp_path / f"{command}-t{threads}"
            rc = cli_main([command, *args, "--threads", threads,
                           "--out", str(out)])
            capsys.readouterr()
            assert rc == 0, f"{command} failed with threads={threads}"
            outputs[threads] = {
                p.name: p.read_bytes()
                for p in sorted(out.iterdir()) if p.name != "manifest.txt"
            }
        if outputs["1"] != outputs["4"]:
            mismatches.append(command)

    dt = time.perf_counter() - t0
    ok = not mismatches
    report(9, "determinism across threads", ok, dt,
           "all byte-identical" if ok else f"mismatch: {mismatches}")
    assert not mismatches
