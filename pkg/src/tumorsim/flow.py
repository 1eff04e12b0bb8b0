"""Penalized Brinkman flow on the reference box.

Momentum balance with the impermeability penalty, in strong form:

    -div(mu_w grad v) + (mu_w / K) v + grad(sigma)
        + (1/eps) delta_w(phi) |grad phi| ((v - V).n) n = 0   in B,
    sigma = -lambda_pen (div v - g),      v = 0 on the box faces.

Eliminating sigma yields a symmetric positive definite system in v alone:
the grad-div term is assembled as lambda_pen D^T D with D the central
divergence, so the discrete energy identity holds exactly. Only the
normal velocity component is penalized; the tangential part is left
natural, which realizes the stress-free slip condition weakly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import _ops
from .domain import Grid, LevelSetField, BoundaryVelocity, interface_normal, smoothed_indicator
from .model import ModelParams, CoefficientFields
from ._ops import LinearSolveError


class FlowSolverError(RuntimeError):
    """Linear solver stagnation or an unusable penalty/grid combination."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


@dataclass(frozen=True)
class FlowState:
    """Velocity components (dim, *shape) and mean-zero pressure."""

    v: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True)
class FlowSolveReport:
    residual: float
    div_error: float
    penalty_flux: float
    iterations: int


def divergence_target(C, P, D, ls: LevelSetField, params: ModelParams) -> np.ndarray:
    """Growth-driven divergence g = (K_B C P - K_R D) / rho_f inside the tumor.

    Masked by the smoothed tumor indicator so g vanishes where phi >= w.
    """
    h_ind, _ = smoothed_indicator(ls)
    return (params.K_B * C * P - params.K_R * D) / params.rho_f * (1.0 - h_ind)


def _penalty_weight(ls: LevelSetField) -> tuple[np.ndarray, np.ndarray]:
    """delta_w(phi) |grad phi| and the unit normals (surface measure weight)."""
    _, delta = smoothed_indicator(ls)
    if not np.any(delta > 0.0):
        return delta, np.zeros((ls.grid.dim,) + ls.grid.shape)
    normals, _ = interface_normal(ls)
    gnorm = _ops.gradient_norm(ls.phi, ls.grid.h)
    return delta * gnorm, normals


# exterior grad-div weight relative to the tumor value; the healthy tissue
# must stay a soft absorber for the global growth mismatch independently
# of the omega sweep
DIV_WEIGHT_OUTSIDE = 1e-3


def pressure_penalty_field(ls: LevelSetField, lam_pen: float) -> np.ndarray:
    """Grad-div weight: lam_pen in the tumor, nearly released outside.

    The divergence constraint binds where the mixture constraint lives; in
    a closed box the integral of div v vanishes while the integral of g
    does not, so net growth needs an absorber. De-weighting the healthy
    tissue parks the incompatibility there instead of polluting the tumor.
    """
    h_ind, _ = smoothed_indicator(ls)
    return lam_pen * (DIV_WEIGHT_OUTSIDE + (1.0 - DIV_WEIGHT_OUTSIDE) * (1.0 - h_ind))


def assemble_brinkman_system(
    g: np.ndarray,
    ls: LevelSetField,
    v_boundary: list[np.ndarray],
    coeffs: CoefficientFields,
    params: ModelParams,
    *,
    lam_pen: float,
    body_force: list[np.ndarray] | None = None,
):
    """Build (A, b, div_matrix) for the penalty-eliminated Brinkman system."""
    grid = ls.grid
    dim, n = grid.dim, grid.n_cells
    n_cells = n ** dim

    visc = _ops.diffusion_matrix(coeffs.mu_omega, grid.h)
    darcy = sp.diags(np.tile((coeffs.mu_omega / params.K_perm).ravel(), dim))
    blocks = sp.block_diag([visc] * dim, format="csr")

    lam_field = pressure_penalty_field(ls, lam_pen)
    div = _ops.divergence_matrix(grid.shape, grid.h)
    grad_div = div.T @ sp.diags(lam_field.ravel()) @ div

    weight, normals = _penalty_weight(ls)
    coef = (weight / params.eps_penalty).ravel()
    pen_rows, pen_cols, pen_vals = [], [], []
    base = np.arange(n_cells)
    for a in range(dim):
        for b_ in range(dim):
            vals = coef * normals[a].ravel() * normals[b_].ravel()
            nz = vals != 0.0
            if nz.any():
                pen_rows.append(a * n_cells + base[nz])
                pen_cols.append(b_ * n_cells + base[nz])
                pen_vals.append(vals[nz])
    if pen_vals:
        pen = sp.coo_matrix(
            (np.concatenate(pen_vals), (np.concatenate(pen_rows), np.concatenate(pen_cols))),
            shape=(dim * n_cells, dim * n_cells),
        ).tocsr()
    else:
        pen = sp.csr_matrix((dim * n_cells, dim * n_cells))

    a_mat = (blocks + darcy + grad_div + pen).tocsr()

    # rhs: -grad(lambda g) moved right (grad = -D^T), penalty pull, body force
    b_vec = div.T @ (lam_field.ravel() * g.ravel())
    v_dot_n = sum(v_boundary[a] * normals[a] for a in range(dim))
    pull = (weight / params.eps_penalty) * v_dot_n
    for a in range(dim):
        b_vec[a * n_cells:(a + 1) * n_cells] += (pull * normals[a]).ravel()
    if body_force is not None:
        for a in range(dim):
            b_vec[a * n_cells:(a + 1) * n_cells] += body_force[a].ravel()
    return a_mat, b_vec, div


def solve_flow(
    g: np.ndarray,
    ls: LevelSetField,
    velocity: BoundaryVelocity,
    coeffs: CoefficientFields,
    params: ModelParams,
    t: float,
    *,
    lam_pen: float | None = None,
    tol_lin: float = 1e-8,
    solver: str = "auto",
    body_force: list[np.ndarray] | None = None,
) -> tuple[FlowState, FlowSolveReport]:
    """Solve for (v, sigma); see the module docstring for the system.

    lam_pen defaults to 1e4 mu. Raises FlowSolverError when the penalty
    overwhelms the elliptic part beyond double-precision headroom (advising
    a larger eps) or when the iterative solver stagnates.
    """
    grid = ls.grid
    dim = grid.dim
    if lam_pen is None:
        lam_pen = 1e4 * params.mu

    weight, _ = _penalty_weight(ls)
    pen_max = float(weight.max()) / params.eps_penalty
    visc_min = float(coeffs.mu_omega.min()) * 2.0 * dim / grid.h ** 2
    if pen_max > 1e12 * max(visc_min, 1e-300):
        eps_min = float(weight.max()) / (1e12 * visc_min)
        raise FlowSolverError(
            f"penalty stiffness {pen_max:.2e} makes the system numerically "
            f"singular at h = {grid.h:.3g}; use eps_penalty >= {eps_min:.2e}"
        )

    v_bnd = velocity.evaluate(t, grid)
    a_mat, b_vec, div = assemble_brinkman_system(
        g, ls, v_bnd, coeffs, params, lam_pen=lam_pen, body_force=body_force
    )
    try:
        x, iterations, residual = _ops.solve_sparse(a_mat, b_vec, tol=tol_lin, solver=solver)
    except LinearSolveError as err:
        raise FlowSolverError(str(err), err.history) from err

    n_cells = grid.n_cells ** dim
    v = np.stack([x[a * n_cells:(a + 1) * n_cells].reshape(grid.shape) for a in range(dim)])

    div_v = (div @ x).reshape(grid.shape)
    lam_field = pressure_penalty_field(ls, lam_pen)
    sigma = -lam_field * (div_v - g)
    sigma = sigma - sigma.mean()

    h_ind, _ = smoothed_indicator(ls)
    mismatch = (div_v - g) ** 2 * (1.0 - h_ind)
    div_error = float(np.sqrt(grid.integrate(mismatch)))
    flux = boundary_flux_norm(v, velocity, ls, t)

    state = FlowState(v=v, sigma=sigma)
    report = FlowSolveReport(
        residual=residual, div_error=div_error, penalty_flux=flux, iterations=iterations
    )
    return state, report


def boundary_flux_norm(
    v: np.ndarray, velocity: BoundaryVelocity, ls: LevelSetField, t: float
) -> float:
    """Diffuse surface integral of |(v - V).n|^2 over the interface band."""
    grid = ls.grid
    weight, normals = _penalty_weight(ls)
    if not np.any(weight > 0.0):
        return 0.0
    v_bnd = velocity.evaluate(t, grid)
    rel_n = sum((v[a] - v_bnd[a]) * normals[a] for a in range(grid.dim))
    return grid.integrate(weight * rel_n ** 2)


def flow_energy_balance(
    state: FlowState,
    g: np.ndarray,
    ls: LevelSetField,
    velocity: BoundaryVelocity,
    coeffs: CoefficientFields,
    params: ModelParams,
    t: float,
    *,
    lam_pen: float,
) -> tuple[float, float]:
    """Both sides of the discrete work identity v^T A v = v^T b.

    lhs: viscous + Darcy + grad-div + penalty quadratic forms; rhs: the
    pressure-source and penalty drive. Recomputed from the fields, not the
    solver internals, so agreement certifies the assembled solve.
    """
    grid = ls.grid
    dim = grid.dim
    h_d = grid.h ** dim

    visc = sum(
        _ops.face_dissipation(state.v[a], coeffs.mu_omega, grid.h) for a in range(dim)
    )
    darcy = grid.integrate(coeffs.mu_omega / params.K_perm * sum(state.v[a] ** 2 for a in range(dim)))

    lam_field = pressure_penalty_field(ls, lam_pen).ravel()
    div = _ops.divergence_matrix(grid.shape, grid.h)
    x = np.concatenate([state.v[a].ravel() for a in range(dim)])
    div_v = div @ x
    graddiv = float(div_v @ (lam_field * div_v)) * h_d

    weight, normals = _penalty_weight(ls)
    v_bnd = velocity.evaluate(t, grid)
    v_n = sum(state.v[a] * normals[a] for a in range(dim))
    big_v_n = sum(v_bnd[a] * normals[a] for a in range(dim))
    pen = grid.integrate(weight / params.eps_penalty * v_n ** 2)

    lhs = visc + darcy + graddiv + pen
    # v . (D^T lambda g) = (D v) . (lambda g)
    rhs = float(div_v @ (lam_field * g.ravel())) * h_d
    rhs += grid.integrate(weight / params.eps_penalty * big_v_n * v_n)
    return lhs, rhs
