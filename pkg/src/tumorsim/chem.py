"""Semi-implicit diffusion steps for the nutrient and the drug.

Diffusion is backward Euler with the cutoff coefficient field; the
consumption sink is frozen at the previous values, so it enters as a
nonnegative diagonal and the maximum principle survives:

    (I + dt (-div(nu_w grad) + k + relax)) Z_new = Z_old

with zero Dirichlet data on the box faces. The relax diagonal is
H_w(phi)/eps_chem and drives both species to zero in the healthy tissue,
realizing the moving-interface Dirichlet condition diffusely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import _ops
from .domain import Grid, LevelSetField, smoothed_indicator
from .model import ModelParams, CoefficientFields
from ._ops import LinearSolveError


class ChemError(RuntimeError):
    """Linear solve failure or a max-principle breach in the inputs."""


@dataclass(frozen=True)
class ChemFields:
    C: np.ndarray
    W: np.ndarray


def _implicit_step(z, k_sink, nu_field, ls, dt, eps_chem, tol, solver):
    grid = ls.grid
    if float(np.min(k_sink)) < -1e-12 * max(1.0, float(np.abs(k_sink).max())):
        raise ChemError(
            "negative consumption coefficient: previous field exceeded its ceiling "
            "(maximum principle breached upstream)"
        )
    h_ind, _ = smoothed_indicator(ls)
    relax = h_ind / eps_chem
    diff = _ops.diffusion_matrix(nu_field, grid.h)
    a_mat = (sp.eye(z.size, format="csr")
             + dt * (diff + sp.diags(np.maximum(k_sink, 0.0).ravel() + relax.ravel())))
    try:
        x, _, _ = _ops.solve_sparse(a_mat.tocsr(), z.ravel(), tol=tol, solver=solver)
    except LinearSolveError as err:
        raise ChemError(str(err)) from err
    return x.reshape(grid.shape)


def step_nutrient(
    C: np.ndarray,
    P: np.ndarray,
    Q: np.ndarray,
    coeffs: CoefficientFields,
    ls: LevelSetField,
    params: ModelParams,
    dt: float,
    *,
    eps_chem: float | None = None,
    tol: float = 1e-10,
    solver: str = "auto",
) -> np.ndarray:
    """One nutrient step; sink k = K_1 K_P P C_old + K_2 K_Q (C_bar - C_old) Q."""
    if eps_chem is None:
        eps_chem = params.eps_penalty
    k_sink = params.K_1 * params.K_P * P * C + params.K_2 * params.K_Q * (params.C_bar - C) * Q
    return _implicit_step(C, k_sink, coeffs.nu1_omega, ls, dt, eps_chem, tol, solver)


def step_drug(
    W: np.ndarray,
    P: np.ndarray,
    Q: np.ndarray,
    coeffs: CoefficientFields,
    ls: LevelSetField,
    params: ModelParams,
    dt: float,
    *,
    eps_chem: float | None = None,
    tol: float = 1e-10,
    solver: str = "auto",
) -> np.ndarray:
    """One drug step; sink k = mu_1 G1(W_old) P + mu_2 G2(W_old) Q >= 0."""
    if eps_chem is None:
        eps_chem = params.eps_penalty
    k_sink = params.mu_1 * params.g1(W) * P + params.mu_2 * params.g2(W) * Q
    return _implicit_step(W, k_sink, coeffs.nu2_omega, ls, dt, eps_chem, tol, solver)


def energy_monitor(
    z_new: np.ndarray,
    z_old: np.ndarray,
    nu_field: np.ndarray,
    grid: Grid,
    dt: float,
    tol_factor: float = 1e-8,
) -> tuple[float, float, bool]:
    """Discrete energy inequality check for one diffusion step.

    Returns (E, Diss, ok) with E = integral of z_new^2 / 2, Diss the
    face-consistent integral of nu |grad z_new|^2, and ok true when
    (E_new - E_old)/dt + Diss <= tol_factor * energy scale. Both sinks are
    nonnegative, so the continuous inequality holds with zero right side.
    """
    e_new = 0.5 * grid.integrate(z_new * z_new)
    e_old = 0.5 * grid.integrate(z_old * z_old)
    diss = _ops.face_dissipation(z_new, nu_field, grid.h)
    scale = max(e_new, e_old, diss * dt, 1e-300)
    ok = (e_new - e_old) / dt + diss <= tol_factor * scale
    return e_new, diss, bool(ok)


def leakage_chem(chem: ChemFields, ls: LevelSetField) -> float:
    """Nutrient plus drug mass in the healthy tissue {phi > w}."""
    outside = ls.phi > ls.width
    return ls.grid.integrate(np.where(outside, chem.C + chem.W, 0.0))
