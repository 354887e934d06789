import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from diffusionnet.geometry import BumpySphereConfig, SurfaceMesh, bumpy_sphere, icosphere, normalized
from diffusionnet.operators import build_cotan_laplacian, build_mass_matrix, compute_operators
from diffusionnet.spectral import (
    HKS_TIMES, EigenBasis, EigenSolveError, compute_hks, dense_eigenbasis, dense_heat_oracle,
    diffuse_implicit, diffuse_spectral, eigen_residuals, solve_eigenbasis)


def operators(mesh):
    return build_cotan_laplacian(mesh), build_mass_matrix(mesh)


@pytest.fixture(scope="module")
def bumpy():
    s = normalized(bumpy_sphere(BumpySphereConfig(subdiv=2), seed=0))
    L, m = operators(s.geometry)
    return s, L, m, dense_eigenbasis(L, m)


class TestEigenbasis:
    def test_constant_mode(self):
        mesh = icosphere(2)
        L, m = operators(mesh)
        B = solve_eigenbasis(L, m, 10)
        assert abs(B.evals[0]) < 1e-8
        npt.assert_allclose(np.abs(B.evecs[:, 0]), 1 / np.sqrt(m.sum()), rtol=1e-8)

    def test_dense_and_lanczos_paths_agree(self):
        mesh = icosphere(3)
        L, m = operators(mesh)
        a = solve_eigenbasis(L, m, 20)
        b = solve_eigenbasis(L, m, 20, dense_max_v=0)
        npt.assert_allclose(a.evals, b.evals, atol=1e-9)
        # compare spanned subspaces through the M-weighted projector
        Pa = a.evecs @ (a.evecs.T * m)
        Pb = b.evecs @ (b.evecs.T * m)
        npt.assert_allclose(Pa[:, :50], Pb[:, :50], atol=1e-7)

    def test_residual_and_orthonormality(self):
        mesh = icosphere(4)
        L, m = operators(mesh)
        B = solve_eigenbasis(L, m, 32)
        assert eigen_residuals(L, m, B).max() <= 1e-7
        npt.assert_allclose(B.evecs.T @ (m[:, None] * B.evecs), np.eye(32), atol=1e-6)
        assert np.all(np.diff(B.evals) >= 0) and B.evals[0] >= -1e-8

    def test_sign_convention(self):
        mesh = icosphere(2)
        B = solve_eigenbasis(*operators(mesh), 8)
        idx = np.abs(B.evecs).argmax(axis=0)
        assert np.all(B.evecs[idx, np.arange(8)] > 0)

    def test_sphere_spectrum(self):
        B = solve_eigenbasis(*operators(icosphere(3)), 9)
        npt.assert_allclose(B.evals[1:4], 2.0, rtol=0.05)
        npt.assert_allclose(B.evals[4:9], 6.0, rtol=0.05)

    def test_disconnected_components(self):
        a = icosphere(1)
        two = SurfaceMesh(np.vstack([a.positions, a.positions + 5.0]),
                          np.vstack([a.faces, a.faces + a.n_vertices]))
        B = solve_eigenbasis(*operators(two), 3)
        npt.assert_allclose(B.evals[:2], 0.0, atol=1e-8)
        assert B.evals[2] > 0.5

    def test_k_too_large(self):
        L, m = operators(icosphere(0))
        with pytest.raises(EigenSolveError):
            solve_eigenbasis(L, m, 12)

    def test_dense_eigenbasis_matches_truncated(self, bumpy):
        _, L, m, full = bumpy
        B = solve_eigenbasis(L, m, 12)
        npt.assert_allclose(B.evals, full.evals[:12], atol=1e-10)


class TestDiffusion:
    def test_full_basis_matches_dense_oracle(self, bumpy):
        s, L, m, B = bumpy
        u = np.random.default_rng(0).normal(size=(s.n_vertices, 3))
        for t in (0.0, 0.01, 0.1, 1.0):
            exact = dense_heat_oracle(L, m, t) @ u
            npt.assert_allclose(diffuse_spectral(u, t, B, m), exact, atol=1e-6)

    def test_oracle_matches_expm(self, bumpy):
        s, L, m, _ = bumpy
        A = L.toarray() / m[:, None]
        npt.assert_allclose(dense_heat_oracle(L, m, 0.05), expm(-0.05 * A), atol=1e-10)

    def test_oracle_identity_and_semigroup(self, bumpy):
        _, L, m, _ = bumpy
        npt.assert_allclose(dense_heat_oracle(L, m, 0.0), np.eye(len(m)), atol=1e-12)
        H = dense_heat_oracle
        npt.assert_allclose(H(L, m, 0.03) @ H(L, m, 0.07), H(L, m, 0.1), atol=1e-8)

    def test_oracle_size_limit(self):
        L, m = operators(icosphere(4))
        with pytest.raises(ValueError):
            dense_heat_oracle(L, m, 0.1)

    @pytest.mark.parametrize("t", [0.1, 0.05, 0.025])
    def test_implicit_step_is_first_order(self, bumpy, t):
        # local error ~ t^2 for smooth data, so halving t cuts it ~4x
        s, L, m, B = bumpy
        u = B.evecs[:, 1:4].sum(axis=1)
        err = [np.abs(diffuse_implicit(u, tt, L, m) - dense_heat_oracle(L, m, tt) @ u).max()
               for tt in (t, t / 2)]
        assert 3.0 <= err[0] / err[1] <= 5.0

    @pytest.mark.parametrize("j", [1, 5, 20])
    def test_implicit_step_on_eigenmode(self, bumpy, j):
        # on an eigenvector the step is exactly 1 / (1 + lambda t), so the
        # error ratio is a function of lambda t alone and tends to 4 as it shrinks
        s, L, m, B = bumpy
        lam, phi = B.evals[j], B.evecs[:, j]
        f = lambda x: abs(np.exp(-x) - 1 / (1 + x))
        for t in (0.1, 0.05, 0.025):
            npt.assert_allclose(diffuse_implicit(phi, t, L, m), phi / (1 + lam * t), atol=1e-12)
            err = [np.abs(diffuse_implicit(phi, tt, L, m) - np.exp(-lam * tt) * phi).max()
                   for tt in (t, t / 2)]
            npt.assert_allclose(err[0] / err[1], f(lam * t) / f(lam * t / 2), rtol=1e-6)

    def test_truncation_error_non_increasing(self, bumpy):
        s, L, m, B = bumpy
        u = np.random.default_rng(1).normal(size=s.n_vertices)
        exact = dense_heat_oracle(L, m, 0.02) @ u
        errs = []
        for k in (8, 16, 32, 64, 128, s.n_vertices):
            Bk = EigenBasis(B.evals[:k], B.evecs[:, :k])
            errs.append(np.sqrt(m @ (diffuse_spectral(u, 0.02, Bk, m) - exact) ** 2))
        assert np.all(np.diff(errs) <= 1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 10.0))
    def test_conservation(self, seed, t):
        u = np.random.default_rng(seed).normal(size=(_CONS["m"].size, 2))
        total = _CONS["m"] @ u
        for out in (diffuse_implicit(u, t, _CONS["L"], _CONS["m"]),
                    diffuse_spectral(u, t, _CONS["B"], _CONS["m"])):
            npt.assert_allclose(_CONS["m"] @ out, total, rtol=1e-10, atol=1e-12)

    def test_implicit_t_zero_exact(self, bumpy):
        _, L, m, _ = bumpy
        u = np.random.default_rng(0).normal(size=(len(m), 2))
        npt.assert_array_equal(diffuse_implicit(u, 0.0, L, m), u)

    def test_spectral_t_zero_is_projection(self, bumpy):
        _, L, m, B = bumpy
        Bk = EigenBasis(B.evals[:10], B.evecs[:, :10])
        u = np.random.default_rng(0).normal(size=len(m))
        proj = Bk.evecs @ (Bk.evecs.T @ (m * u))
        npt.assert_allclose(diffuse_spectral(u, 0.0, Bk, m), proj, atol=1e-12)

    def test_long_time_tends_to_mean(self, bumpy):
        _, L, m, _ = bumpy
        u = np.random.default_rng(0).normal(size=len(m))
        out = diffuse_implicit(u, 1e6, L, m)
        npt.assert_allclose(out, (m @ u) / m.sum(), atol=1e-3)

    def test_per_channel_times(self, bumpy):
        _, L, m, B = bumpy
        u = np.random.default_rng(0).normal(size=(len(m), 2))
        both = diffuse_spectral(u, [0.01, 0.2], B, m)
        npt.assert_allclose(both[:, 1], diffuse_spectral(u[:, 1], 0.2, B, m))

    def test_negative_time_rejected(self, bumpy):
        _, L, m, B = bumpy
        with pytest.raises(ValueError):
            diffuse_implicit(np.ones(len(m)), -1.0, L, m)
        with pytest.raises(ValueError):
            diffuse_spectral(np.ones(len(m)), -1.0, B, m)

    def test_dirichlet_energy_decays(self, bumpy):
        _, L, m, B = bumpy
        u = np.random.default_rng(2).normal(size=len(m))
        energy = [diffuse_spectral(u, t, B, m) @ (L @ diffuse_spectral(u, t, B, m))
                  for t in (0.0, 0.001, 0.01, 0.1)]
        assert np.all(np.diff(energy) <= 1e-10 * energy[0])


def _conservation_fixture():
    mesh = normalized(bumpy_sphere(BumpySphereConfig(subdiv=1), seed=2)).geometry
    L, m = operators(mesh)
    return {"L": L, "m": m, "B": solve_eigenbasis(L, m, 20)}


_CONS = _conservation_fixture()


class TestHKS:
    def test_default_times(self):
        assert len(HKS_TIMES) == 16
        npt.assert_allclose(HKS_TIMES[[0, -1]], [0.01, 1.0])
        npt.assert_allclose(np.diff(np.log(HKS_TIMES)), np.log(100) / 15)

    def test_positive_and_shape(self, bumpy):
        _, L, m, B = bumpy
        h = compute_hks(EigenBasis(B.evals[:32], B.evecs[:, :32]))
        assert h.values.shape == (len(m), 16) and np.all(h.values > 0)

    def test_long_time_limit(self, bumpy):
        _, L, m, B = bumpy
        h = compute_hks(B, times=[1e4])
        npt.assert_allclose(h.values[:, 0], 1.0 / m.sum(), rtol=1e-8)

    def test_rigid_invariance(self):
        s = normalized(bumpy_sphere(BumpySphereConfig(subdiv=2), seed=1))
        R = np.linalg.qr(np.random.default_rng(3).normal(size=(3, 3)))[0]
        moved = s.with_positions(s.positions @ R.T + [0.3, -1.0, 2.0])
        a = compute_hks(compute_operators(s, k=32).basis).values
        b = compute_hks(compute_operators(moved, k=32).basis).values
        npt.assert_allclose(a, b, atol=1e-5)

    def test_rejects_non_positive_times(self, bumpy):
        with pytest.raises(ValueError):
            compute_hks(bumpy[3], times=[0.0, 1.0])
