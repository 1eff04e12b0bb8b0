"""Shared finite-difference building blocks on uniform cell-centered grids.

All field arrays are cell-centered with shape (n,)*dim; the box boundary
lies on cell faces. Dirichlet data on the box boundary is imposed through
odd ghost reflection (face value = 0), which keeps every assembled
operator symmetric.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class LinearSolveError(RuntimeError):
    """Raised when a sparse linear solve stagnates or diverges."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


def integrate(field: np.ndarray, h: float) -> float:
    """Midpoint-rule integral of a cell-centered field over the box."""
    return float(field.sum()) * h ** field.ndim


def central_gradient(field: np.ndarray, h: float) -> list[np.ndarray]:
    """Componentwise central-difference gradient (one-sided at the rim)."""
    grads = np.gradient(field, h)
    if field.ndim == 1:
        return [grads]
    return list(grads)


def gradient_norm(field: np.ndarray, h: float) -> np.ndarray:
    comps = central_gradient(field, h)
    return np.sqrt(sum(g * g for g in comps))


def diffusion_matrix(coef: np.ndarray, h: float) -> sp.csr_matrix:
    """Assemble -div(coef grad u) with u = 0 on the box faces.

    Face coefficients are arithmetic averages of the adjacent cells; the
    boundary faces use the one-sided cell value over the half-cell gap,
    so the matrix is symmetric positive definite.
    """
    shape = coef.shape
    n_cells = coef.size
    idx = np.arange(n_cells).reshape(shape)
    inv_h2 = 1.0 / (h * h)

    rows, cols, vals = [], [], []
    diag = np.zeros(n_cells)

    for ax in range(coef.ndim):
        lo = [slice(None)] * coef.ndim
        hi = [slice(None)] * coef.ndim
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        i_lo = idx[tuple(lo)].ravel()
        i_hi = idx[tuple(hi)].ravel()
        c_face = 0.5 * (coef[tuple(lo)].ravel() + coef[tuple(hi)].ravel()) * inv_h2

        np.add.at(diag, i_lo, c_face)
        np.add.at(diag, i_hi, c_face)
        rows.append(i_lo)
        cols.append(i_hi)
        vals.append(-c_face)
        rows.append(i_hi)
        cols.append(i_lo)
        vals.append(-c_face)

        # boundary faces: ghost value is the odd reflection, face value 0
        for side in (0, -1):
            edge = [slice(None)] * coef.ndim
            edge[ax] = side
            i_edge = idx[tuple(edge)].ravel()
            np.add.at(diag, i_edge, 2.0 * coef[tuple(edge)].ravel() * inv_h2)

    rows.append(np.arange(n_cells))
    cols.append(np.arange(n_cells))
    vals.append(diag)

    a = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_cells, n_cells),
    )
    return a.tocsr()


def divergence_matrix(shape: tuple[int, ...], h: float) -> sp.csr_matrix:
    """Central-difference divergence acting on stacked vector components.

    Maps a flat vector [v_0; v_1; ...] (component-major, each of size N)
    to the scalar divergence of size N. Ghost values across the box faces
    are the odd reflection of the first interior cell, consistent with a
    homogeneous Dirichlet velocity.
    """
    dim = len(shape)
    n_cells = int(np.prod(shape))
    idx = np.arange(n_cells).reshape(shape)
    inv_2h = 1.0 / (2.0 * h)

    rows, cols, vals = [], [], []
    for ax in range(dim):
        lo = [slice(None)] * dim
        hi = [slice(None)] * dim
        lo[ax] = slice(None, -2)
        hi[ax] = slice(2, None)
        mid = [slice(None)] * dim
        mid[ax] = slice(1, -1)
        i_mid = idx[tuple(mid)].ravel()
        rows.append(i_mid)
        cols.append(ax * n_cells + idx[tuple(hi)].ravel())
        vals.append(np.full(i_mid.size, inv_2h))
        rows.append(i_mid)
        cols.append(ax * n_cells + idx[tuple(lo)].ravel())
        vals.append(np.full(i_mid.size, -inv_2h))

        # low edge: (v_1 - v_ghost)/2h with v_ghost = -v_0
        first = [slice(None)] * dim
        first[ax] = 0
        second = [slice(None)] * dim
        second[ax] = 1
        i_first = idx[tuple(first)].ravel()
        rows += [i_first, i_first]
        cols += [ax * n_cells + idx[tuple(second)].ravel(), ax * n_cells + i_first]
        vals += [np.full(i_first.size, inv_2h), np.full(i_first.size, inv_2h)]

        # high edge: (v_ghost - v_{n-2})/2h with v_ghost = -v_{n-1}
        last = [slice(None)] * dim
        last[ax] = -1
        prev = [slice(None)] * dim
        prev[ax] = -2
        i_last = idx[tuple(last)].ravel()
        rows += [i_last, i_last]
        cols += [ax * n_cells + i_last, ax * n_cells + idx[tuple(prev)].ravel()]
        vals += [np.full(i_last.size, -inv_2h), np.full(i_last.size, -inv_2h)]

    a = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_cells, dim * n_cells),
    )
    return a.tocsr()


def upwind_flux_divergence(z: np.ndarray, v_comps: list[np.ndarray], h: float) -> np.ndarray:
    """div(z v) by first-order upwind face fluxes.

    Face velocities are arithmetic averages; box-boundary faces carry zero
    velocity (odd ghost of the no-slip field), so the scheme conserves
    total mass exactly: the flux differences telescope to zero.
    """
    out = np.zeros_like(z)
    for ax, v in enumerate(v_comps):
        lo = [slice(None)] * z.ndim
        hi = [slice(None)] * z.ndim
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        u_face = 0.5 * (v[tuple(lo)] + v[tuple(hi)])
        flux = np.maximum(u_face, 0.0) * z[tuple(lo)] + np.minimum(u_face, 0.0) * z[tuple(hi)]
        np.add.at(out, tuple(hi), -flux / h)
        np.add.at(out, tuple(lo), flux / h)
    return out


def face_dissipation(z: np.ndarray, coef: np.ndarray, h: float) -> float:
    """Quadratic form z^T A z of diffusion_matrix(coef), scaled to an integral.

    Equals the discrete energy-dissipation integral of coef |grad z|^2 with
    the same face averaging and boundary treatment as the assembled matrix.
    """
    total = 0.0
    inv_h2 = 1.0 / (h * h)
    for ax in range(z.ndim):
        lo = [slice(None)] * z.ndim
        hi = [slice(None)] * z.ndim
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        c_face = 0.5 * (coef[tuple(lo)] + coef[tuple(hi)])
        dz = z[tuple(hi)] - z[tuple(lo)]
        total += float((c_face * dz * dz).sum()) * inv_h2
        for side in (0, -1):
            edge = [slice(None)] * z.ndim
            edge[ax] = side
            total += float((2.0 * coef[tuple(edge)] * z[tuple(edge)] ** 2).sum()) * inv_h2
    return total * h ** z.ndim


def neumann_laplacian(z: np.ndarray, h: float) -> np.ndarray:
    """Zero-flux Laplacian (even ghost reflection); conserves the integral."""
    out = np.zeros_like(z)
    inv_h2 = 1.0 / (h * h)
    for ax in range(z.ndim):
        padded = np.concatenate(
            [
                np.take(z, [0], axis=ax),
                z,
                np.take(z, [-1], axis=ax),
            ],
            axis=ax,
        )
        lo = [slice(None)] * z.ndim
        mid = [slice(None)] * z.ndim
        hi = [slice(None)] * z.ndim
        lo[ax] = slice(None, -2)
        mid[ax] = slice(1, -1)
        hi[ax] = slice(2, None)
        out += (
            padded[tuple(lo)] - 2.0 * padded[tuple(mid)] + padded[tuple(hi)]
        ) * inv_h2
    return out


def solve_sparse(
    a: sp.csr_matrix,
    b: np.ndarray,
    *,
    tol: float = 1e-8,
    solver: str = "auto",
    maxiter: int = 5000,
) -> tuple[np.ndarray, int, float]:
    """Solve a sparse SPD system; returns (x, iterations, relative residual).

    solver: "direct" (sparse LU), "cg" (CG + incomplete-LU preconditioner),
    or "auto" (direct below 70k unknowns, cg above). The CG path raises
    LinearSolveError with the residual history if it fails to reach tol.
    """
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(b), 0, 0.0

    if solver == "auto":
        solver = "direct" if b.size <= 70_000 else "cg"

    if solver == "direct":
        lu = spla.splu(a.tocsc())
        x = lu.solve(b)
        residual = float(np.linalg.norm(a @ x - b)) / b_norm
        return x, 1, residual

    if solver != "cg":
        raise ValueError(f"unknown solver '{solver}'")

    ilu = spla.spilu(a.tocsc(), drop_tol=1e-5, fill_factor=15.0)
    precond = spla.LinearOperator(a.shape, ilu.solve)
    history: list[float] = []

    def track(xk):
        history.append(float(np.linalg.norm(a @ xk - b)) / b_norm)

    x, info = spla.cg(a, b, rtol=tol, atol=0.0, maxiter=maxiter, M=precond, callback=track)
    residual = float(np.linalg.norm(a @ x - b)) / b_norm
    if info != 0 or residual > tol:
        raise LinearSolveError(
            f"iterative solve stagnated: residual {residual:.3e} after "
            f"{len(history)} iterations (target {tol:.1e})",
            history,
        )
    return x, len(history), residual
