"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The lines are collected in ``conftest.ACCEPTANCE_LINES`` and repeated in the
terminal summary. The training experiments run once per module.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from diffusionnet import cli
from diffusionnet.experiments import (
    run_ablation, run_eig_sweep, run_orientation, run_robustness, verify_eigen, verify_gradients,
    verify_heat_kernel, verify_invariance)
from diffusionnet.geometry import (DEFAULT_K_NEIGHBORS, BumpySphereConfig, Shape, bumpy_sphere,
                                   flat_grid, icosphere, normalized)
from diffusionnet.network import NetworkConfig
from diffusionnet.operators import build_cotan_laplacian, build_mass_matrix
from diffusionnet.spectral import (HKS_TIMES, dense_eigenbasis, dense_heat_oracle,
                                   diffuse_implicit, diffuse_spectral, solve_eigenbasis)
from diffusionnet.training import TrainConfig, default_train_config, learning_rate


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def quantities(report, *names):
    return ", ".join(report.get(n).describe() for n in names)


@pytest.fixture(scope="module")
def orientation():
    return run_orientation()


@pytest.fixture(scope="module")
def ablation():
    return run_ablation()


@pytest.fixture(scope="module")
def eig_sweep():
    return run_eig_sweep()


@pytest.fixture(scope="module")
def robustness():
    return run_robustness()


def small_meshes():
    """Meshes with V <= 300: spheres, bumpy spheres and an open grid."""
    out = {"icosphere2": icosphere(2), "grid15": normalized(Shape(flat_grid(15))).geometry}
    for s in range(3):
        out[f"bumpy{s}"] = normalized(bumpy_sphere(BumpySphereConfig(subdiv=2), seed=s)).geometry
    return out


def test_criterion_01_heat_kernel():
    rep = verify_heat_kernel()
    ok = rep.passed and rep.wall_time <= 120
    record(1, ok, f"{quantities(rep, 'relative_l2_error', 'total_heat')}, "
                  f"{rep.wall_time:.1f} s (<= 120 s)")


def test_criterion_02_scheme_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    spectral_err, ratios = 0.0, {}
    for name, mesh in small_meshes().items():
        assert mesh.n_vertices <= 300
        L, m = build_cotan_laplacian(mesh), build_mass_matrix(mesh)
        B = dense_eigenbasis(L, m)
        u = rng.normal(size=(mesh.n_vertices, 3))
        for t in (1e-3, 0.025, 0.1, 1.0):
            spectral_err = max(spectral_err, np.abs(
                diffuse_spectral(u, t, B, m) - dense_heat_oracle(L, m, t) @ u).max())
        if name.startswith("grid"):
            continue  # lambda t ~ 1 there: outside the first-order regime, see README
        smooth = B.evecs[:, 1:4].sum(axis=1)
        for t in (0.1, 0.05, 0.025):
            err = [np.abs(diffuse_implicit(smooth, tt, L, m)
                          - dense_heat_oracle(L, m, tt) @ smooth).max() for tt in (t, t / 2)]
            ratios[(name, t)] = err[0] / err[1]
    r = np.array(list(ratios.values()))
    ok = spectral_err <= 1e-6 and np.all((r >= 3) & (r <= 5))
    record(2, ok, f"full-basis max abs {spectral_err:.2e} (<= 1e-6), implicit error ratio "
                  f"in [{r.min():.3f}, {r.max():.3f}] (within [3, 5]), "
                  f"{time.perf_counter() - t0:.1f} s")


def test_criterion_03_conservation():
    mesh = normalized(bumpy_sphere(BumpySphereConfig(subdiv=2), seed=5)).geometry
    L, m = build_cotan_laplacian(mesh), build_mass_matrix(mesh)
    B = solve_eigenbasis(L, m, 32)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        u = rng.exponential(size=mesh.n_vertices) * rng.uniform(0.1, 10)  # heat-like, total > 0
        t = 10 ** rng.uniform(-4, 1)
        total = m @ u
        for out in (diffuse_implicit(u, t, L, m), diffuse_spectral(u, t, B, m)):
            worst = max(worst, abs(m @ out - total) / total)
    record(3, worst <= 1e-10, f"max relative drift {worst:.2e} over 100 trials x 2 schemes "
                              f"(<= 1e-10)")


def test_criterion_04_finite_differences():
    rep = verify_gradients()
    net = [q for q in rep.quantities if q.name.startswith("network_")]
    ok = rep.passed and rep.wall_time <= 60
    worst_op = max(q.value for q in rep.quantities if q.name.startswith("op."))
    record(4, ok, f"ops max rel err {worst_op:.2e}, network max rel err "
                  f"{max(q.value for q in net):.2e} (<= 1e-4, includes time and A), "
                  f"{rep.wall_time:.1f} s (<= 60 s)")


def test_criterion_05_invariance(orientation):
    rep = verify_invariance()
    trained = orientation.get("mirror_output_diff.complex_A")
    ok = rep.passed and trained.passed
    record(5, ok, quantities(rep, "permutation_max_abs", "frame_max_abs", "rigid_max_abs",
                             "mirror_real_A_max_abs")
           + f", trained complex-A mirror difference {trained.value:.3g} (> 1e-3)")


def test_criterion_06_eigen():
    rep = verify_eigen()
    worst = lambda key: max(q.value for q in rep.quantities if q.name.endswith(key))
    record(6, rep.passed, f"residual {worst('max_residual'):.1e} (<= 1e-7), orthonormality "
                          f"{worst('orthonormality_error'):.1e} (<= 1e-6), sphere l<=2 rel err "
                          f"{max(worst('l1_relative_error'), worst('l2_relative_error')):.4f} "
                          f"(<= 0.05), two-component "
                          f"{quantities(rep, 'two_components.lambda_1')}")


def test_criterion_07_orientation(orientation):
    ok = (orientation.get("test_acc.complex_A").passed and orientation.get("test_acc.real_A").passed
          and orientation.wall_time <= 15 * 60)
    record(7, ok, f"{quantities(orientation, 'test_acc.complex_A', 'test_acc.real_A')}, "
                  f"{orientation.wall_time:.0f} s (<= 900 s)")


def test_criterion_08_ablation(ablation):
    ok = ablation.passed and ablation.wall_time <= 30 * 60
    record(8, ok, f"{quantities(ablation, 'gap.full_minus_no_diffusion', 'gap.full_minus_no_gradient_features')}, "
                  f"full {ablation.get('test_acc.full').value:.2f}%, {ablation.wall_time:.0f} s "
                  f"(<= 1800 s)")


def test_criterion_09_robustness(robustness):
    ok = robustness.passed and robustness.wall_time <= 30 * 60
    record(9, ok, f"mesh {robustness.get('test_acc.mesh').value:.2f}%, "
                  f"{quantities(robustness, 'drop.refined_mesh', 'drop.point_cloud')}, "
                  f"{robustness.wall_time:.0f} s (<= 1800 s)")


def test_criterion_10_eig_sweep(eig_sweep):
    accs = ", ".join(f"k={k} {eig_sweep.get(f'test_acc.k{k}').value:.2f}%" for k in (8, 32, 128))
    record(10, eig_sweep.passed, f"{accs}; {quantities(eig_sweep, 'gap.k128_minus_k8')}")


def test_criterion_11_default_hyperparameters():
    tc = TrainConfig()
    defaults = cli.build_parser().parse_args(["precompute", "--input", "x", "--out", "y"])
    snapshot = {
        "lr": tc.lr, "decay_factor": tc.decay_factor, "decay_every": tc.decay_every,
        "epochs": tc.epochs, "batch_size": tc.batch_size,
        "lr_epoch_51": learning_rate(tc, 51), "lr_epoch_151": learning_rate(tc, 151),
        "adam": (tc.beta1, tc.beta2, tc.eps), "k": NetworkConfig().k,
        "cli_k": defaults.k, "knn": DEFAULT_K_NEIGHBORS, "cli_knn": defaults.knn,
        "hks_count": len(HKS_TIMES), "hks_range": (HKS_TIMES[0], HKS_TIMES[-1]),
        "hks_log_spaced": bool(np.allclose(np.diff(np.log(HKS_TIMES)), np.log(100) / 15)),
        "classification_smoothing": default_train_config("classification").label_smoothing,
        "segmentation_smoothing": default_train_config().label_smoothing,
    }
    expected = {
        "lr": 0.001, "decay_factor": 0.5, "decay_every": 50, "epochs": 200, "batch_size": 1,
        "lr_epoch_51": 0.0005, "lr_epoch_151": 0.000125, "adam": (0.9, 0.999, 1e-8), "k": 128,
        "cli_k": 128, "knn": 30, "cli_knn": 30, "hks_count": 16, "hks_range": (0.01, 1.0),
        "hks_log_spaced": True, "classification_smoothing": 0.2, "segmentation_smoothing": 0.0,
    }
    diff = {k: (snapshot[k], v) for k, v in expected.items()
            if not np.allclose(snapshot[k], v, rtol=1e-15, atol=0)}
    record(11, not diff, "default config snapshot matches" if not diff else f"mismatch {diff}")
