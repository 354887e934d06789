"""Generalized Laplacian eigenproblem, heat diffusion and heat kernel signatures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

EIGEN_SHIFT = -1e-8
DENSE_MAX_V = 512
RESIDUAL_TOL = 1e-7
HKS_TIMES = np.logspace(-2.0, 0.0, 16)


class EigenSolveError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class EigenBasis:
    evals: np.ndarray
    evecs: np.ndarray

    @property
    def k(self):
        return len(self.evals)


@dataclass(frozen=True, eq=False)
class HKSFeatures:
    values: np.ndarray
    times: np.ndarray


def _mass_vector(M):
    if sp.issparse(M):
        return np.asarray(M.diagonal(), dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    return np.diag(M).copy() if M.ndim == 2 else M


def eigen_residuals(L, M, basis):
    """Relative residuals ``|L phi - lam M phi| / |M phi|`` per eigenpair."""
    m = _mass_vector(M)
    Mphi = m[:, None] * basis.evecs
    R = L @ basis.evecs - basis.evals[None, :] * Mphi
    return np.linalg.norm(R, axis=0) / np.linalg.norm(Mphi, axis=0)


def _fix_signs(evecs):
    # largest-magnitude entry positive, so repeated solves agree
    idx = np.abs(evecs).argmax(axis=0)
    s = np.sign(evecs[idx, np.arange(evecs.shape[1])])
    s[s == 0] = 1.0
    return evecs * s


def solve_eigenbasis(L, M, k, sigma=EIGEN_SHIFT, dense_max_v=DENSE_MAX_V, maxiter=None):
    """Smallest ``k`` eigenpairs of ``L phi = lam M phi``, M-orthonormal.

    Shapes with at most ``dense_max_v`` vertices use a dense symmetric
    solver. Larger ones use ARPACK's shift-invert Lanczos around ``sigma``;
    the inner solves factor ``L - sigma M``.
    """
    L = sp.csr_matrix(L)
    m = _mass_vector(M)
    V = L.shape[0]
    if not 0 < k < V:
        raise EigenSolveError(f"basis size k={k} must satisfy 0 < k < V={V}")
    if V <= dense_max_v:
        lam, phi = scipy.linalg.eigh(L.toarray(), np.diag(m), subset_by_index=[0, k - 1])
    else:
        Mm = sp.diags(m).tocsc()
        try:
            lam, phi = spla.eigsh(L.tocsc(), k=k, M=Mm, sigma=sigma, which="LM",
                                  tol=0.0, maxiter=maxiter)
        except spla.ArpackNoConvergence as exc:
            raise EigenSolveError(
                f"Lanczos did not converge: {len(exc.eigenvalues)}/{k} pairs found") from None
    order = np.argsort(lam)
    lam, phi = lam[order], phi[:, order]
    # re-orthonormalize against M and refresh the Rayleigh quotients
    C = phi.T @ (m[:, None] * phi)
    R = np.linalg.cholesky(0.5 * (C + C.T))
    phi = scipy.linalg.solve_triangular(R, phi.T, lower=True).T
    lam = np.einsum("vi,vi->i", phi, L @ phi)
    order = np.argsort(lam)
    basis = EigenBasis(lam[order], _fix_signs(phi[:, order]))
    res = eigen_residuals(L, m, basis)
    if np.any(res > RESIDUAL_TOL):
        raise EigenSolveError(
            f"eigen residual {res.max():.3e} exceeds {RESIDUAL_TOL:g} (pair {int(res.argmax())})")
    return basis


def dense_eigenbasis(L, M):
    """All ``V`` eigenpairs by a dense generalized solve (small shapes only)."""
    L = L.toarray() if sp.issparse(L) else np.asarray(L, dtype=np.float64)
    V = L.shape[0]
    if V > DENSE_MAX_V:
        raise ValueError(f"dense eigenbasis limited to V <= {DENSE_MAX_V}, got {V}")
    lam, phi = scipy.linalg.eigh(L, np.diag(_mass_vector(M)))
    return EigenBasis(lam, _fix_signs(phi))


def diffuse_implicit(u, t, L, M, rtol=1e-10):
    """One implicit Euler step per channel: solve ``(M + t_c L) x = M u_c``.

    Sparse LU with up to three rounds of iterative refinement; raises if
    the normwise backward error stays above ``rtol``.
    """
    u = np.asarray(u, dtype=np.float64)
    squeeze = u.ndim == 1
    U = u[:, None] if squeeze else u
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (U.shape[1],))
    if np.any(t < 0):
        raise ValueError("diffusion times must be non-negative")
    m = _mass_vector(M)
    L = sp.csc_matrix(L)
    Mm = sp.diags(m, format="csc")
    out = U.copy()
    for c in range(U.shape[1]):
        if t[c] == 0.0:
            continue
        A = (Mm + t[c] * L).tocsc()
        b = m * U[:, c]
        lu = spla.splu(A)
        x = lu.solve(b)
        Anorm = spla.norm(A, np.inf)
        for sweep in range(4):  # up to three refinements, helps when t is large
            r = b - A @ x
            # normwise backward error; the plain |r|/|b| has a floor ~ cond(A) eps
            res = np.abs(r).max() / (Anorm * np.abs(x).max() + np.abs(b).max())
            if res <= rtol or sweep == 3:
                break
            x = x + lu.solve(r)
        if res > rtol:
            raise np.linalg.LinAlgError(f"implicit solve backward error {res:.2e} > {rtol:g}")
        out[:, c] = x
    return out[:, 0] if squeeze else out


def diffuse_spectral(u, t, basis, M):
    """Diffuse in the truncated eigenbasis: ``Phi (exp(-lam t) * Phi^T M u)``."""
    u = np.asarray(u, dtype=np.float64)
    squeeze = u.ndim == 1
    U = u[:, None] if squeeze else u
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (U.shape[1],))
    if np.any(t < 0):
        raise ValueError("diffusion times must be non-negative")
    m = _mass_vector(M)
    coefs = basis.evecs.T @ (m[:, None] * U)
    coefs *= np.exp(-np.outer(basis.evals, t))
    out = basis.evecs @ coefs
    return out[:, 0] if squeeze else out


def dense_heat_oracle(L, M, t):
    """Dense ``expm(-t M^{-1} L)`` by scaling and squaring.

    Deliberately avoids any eigendecomposition so it stays independent of the
    spectral route it is used to check.
    """
    L = L.toarray() if sp.issparse(L) else np.asarray(L, dtype=np.float64)
    V = L.shape[0]
    if V > DENSE_MAX_V:
        raise ValueError(f"dense heat oracle limited to V <= {DENSE_MAX_V}, got {V}")
    m = _mass_vector(M)
    return scipy.linalg.expm(-t * (L / m[:, None]))


def compute_hks(basis, times=None):
    """Heat kernel signature ``sum_i exp(-lam_i t) phi_i(v)^2``."""
    times = HKS_TIMES if times is None else np.asarray(times, dtype=np.float64)
    if np.any(times <= 0):
        raise ValueError("HKS times must be positive")
    weights = np.exp(-np.outer(basis.evals, times))
    return HKSFeatures(values=(basis.evecs ** 2) @ weights, times=times.copy())
