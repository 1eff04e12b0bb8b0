"""Explicit transport-reaction step for the three cell densities.

Each phase Z in {P, Q, D} advances under

    dZ/dt + div(Z v) = G_Z + eta Laplacian(Z)

with first-order conservative upwind fluxes, explicit reactions, and an
optional artificial-viscosity Laplacian (zero-flux at the box rim so it
conserves mass). Results are clamped to [0, rho_f] and the clamped mass
is returned for the diagnostics budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _ops
from .domain import LevelSetField
from .model import ModelParams, sources


class CflError(RuntimeError):
    """Requested dt exceeds the stable step for the explicit scheme."""


@dataclass(frozen=True)
class CellFields:
    P: np.ndarray
    Q: np.ndarray
    D: np.ndarray

    def total(self) -> np.ndarray:
        return self.P + self.Q + self.D


@dataclass(frozen=True)
class CellStepStats:
    """Bookkeeping from one step, consumed by the diagnostics record."""

    clamped_mass: float
    min_before_clamp: float
    max_before_clamp: float
    source_integral: float


def cfl_dt(
    v: np.ndarray | None,
    params: ModelParams,
    h: float,
    *,
    dim: int,
    dt_max: float,
    safety: float = 0.5,
) -> float:
    """Stable explicit step: safety * min over advection, diffusion, reaction.

    Pieces with no constraint (zero velocity, eta = 0, zero rates) drop
    out; with none left the configured dt_max is returned.
    """
    if h <= 0:
        raise CflError("grid spacing must be positive")
    pieces = []
    if v is not None:
        vmax = float(np.sqrt((v * v).sum(axis=0)).max())
        if vmax > 0.0:
            pieces.append(h / vmax)
    if params.eta > 0.0:
        pieces.append(h * h / (2.0 * dim * params.eta))
    rate = params.reaction_rate_bound()
    if rate > 0.0:
        pieces.append(1.0 / rate)
    if not pieces:
        return dt_max
    return min(safety * min(pieces), dt_max)


def step_cells(
    cells: CellFields,
    v: np.ndarray,
    C: np.ndarray,
    W: np.ndarray,
    ls: LevelSetField,
    params: ModelParams,
    dt: float,
    *,
    cfl_limit: float | None = None,
) -> tuple[CellFields, CellStepStats]:
    """Advance (P, Q, D) by one explicit step.

    Rejects dt above the CFL limit when one is supplied, and any NaN in
    the update. Outside the tumor the sources only shuffle mass between
    phases or decay it (C and W vanish there), so no exterior growth.
    """
    if cfl_limit is not None and dt > cfl_limit * (1.0 + 1e-12):
        raise CflError(f"dt = {dt:.4g} exceeds the stable step {cfl_limit:.4g}")
    grid = ls.grid
    v_comps = [v[a] for a in range(grid.dim)]

    g_p, g_q, g_d = sources(cells.P, cells.Q, cells.D, C, W, params)
    new = []
    for z, g_z in ((cells.P, g_p), (cells.Q, g_q), (cells.D, g_d)):
        rhs = -_ops.upwind_flux_divergence(z, v_comps, grid.h) + g_z
        if params.eta > 0.0:
            rhs = rhs + params.eta * _ops.neumann_laplacian(z, grid.h)
        new.append(z + dt * rhs)

    stacked = np.stack(new)
    if not np.all(np.isfinite(stacked)):
        raise FloatingPointError("non-finite cell density after transport step")

    min_raw = float(stacked.min())
    max_raw = float(stacked.max())
    clamped = np.clip(stacked, 0.0, params.rho_f)
    clamped_mass = grid.integrate(np.abs(stacked - clamped).sum(axis=0))
    source_integral = grid.integrate(g_p + g_q + g_d)

    result = CellFields(P=clamped[0], Q=clamped[1], D=clamped[2])
    stats = CellStepStats(
        clamped_mass=clamped_mass,
        min_before_clamp=min_raw,
        max_before_clamp=max_raw,
        source_integral=source_integral,
    )
    return result, stats


def leakage(cells: CellFields, ls: LevelSetField) -> float:
    """Cell mass sitting in the healthy tissue {phi > w}."""
    outside = ls.phi > ls.width
    return ls.grid.integrate(np.where(outside, cells.total(), 0.0))
