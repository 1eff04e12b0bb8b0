"""Coupled time stepping and runtime diagnostics.

One step runs: advect phi -> rebuild cutoff coefficients -> Brinkman solve
with the growth divergence target -> explicit cell transport -> implicit
nutrient and drug steps. The flow/cells/chem stages optionally repeat as
Picard sweeps until the velocity settles. Every step emits a
DiagnosticsRecord carrying the bound, energy, leakage, and penalty
monitors that the acceptance suite checks.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, fields as dc_fields, replace

import numpy as np

from . import cells as cells_mod
from . import chem as chem_mod
from . import flow as flow_mod
from .domain import (
    BoundaryVelocity,
    DomainError,
    Grid,
    LevelSetField,
    advect_levelset,
    reinitialize,
    smoothed_indicator,
)
from .model import CoefficientFields, ModelParams, coefficient_fields


class SimulationError(RuntimeError):
    """A sub-solver failed; the message names the stage."""


REFERENCE_H = 1.0 / 64.0


def default_lambda_pen(mu: float, h: float) -> float:
    """Grad-div weight 1e4 mu at the reference spacing, scaled as 1/h^2.

    The grid scaling keeps the divergence-constraint residual (and with it
    the mixture-sum drift, which is proportional to sigma/lambda) at the
    discretization scale, so refinement studies see it vanish.
    """
    return 1e4 * mu * (REFERENCE_H / h) ** 2


@dataclass(frozen=True)
class NumericsParams:
    """Scheme knobs, all configurable, defaults chosen for the desk scale."""

    eps_chem: float | None = None      # None: follow eps_penalty
    lambda_pen: float | None = None    # None: default_lambda_pen(mu, h)
    picard_sweeps: int = 3
    picard_tol: float = 1e-6
    cfl_safety: float = 0.5
    dt_max: float = 5e-3
    reinit_every: int = 10
    smoothing_k: float = 1.5
    tol_lin: float = 1e-8
    solver: str = "auto"
    advect_scheme: str = "upwind1"


@dataclass(frozen=True)
class SimState:
    t: float
    grid: Grid
    phi: LevelSetField
    cells: cells_mod.CellFields
    chem: chem_mod.ChemFields
    flow: flow_mod.FlowState
    step_index: int = 0


@dataclass(frozen=True)
class DiagnosticsRecord:
    """Per-step scalar monitors; declaration order fixes the CSV columns."""

    t: float
    total_mass_P: float
    total_mass_Q: float
    total_mass_D: float
    sum_drift: float
    min_P: float
    max_P: float
    min_Q: float
    max_Q: float
    min_D: float
    max_D: float
    min_C: float
    max_C: float
    min_W: float
    max_W: float
    penalty_flux: float
    leakage_cells: float
    leakage_chem: float
    energy_C: float
    diss_C: float
    energy_W: float
    diss_W: float
    div_error: float
    clamp_budget: float
    flow_residual: float
    flow_iterations: int

    def is_finite(self) -> bool:
        return all(np.isfinite(getattr(self, f.name)) for f in dc_fields(self))


DIAGNOSTIC_COLUMNS = tuple(f.name for f in dc_fields(DiagnosticsRecord))


def check_bounds(record: DiagnosticsRecord, params: ModelParams,
                 w_max_initial: float | None = None) -> list[str]:
    """Violations of the density sandwich, the ceilings, and the energy law.

    Empty list means the step honors 0 <= P,Q,D <= rho_f, 0 <= C <= C_bar,
    0 <= W <= max W_0, and both dissipation inequalities, all within
    1e-10 of the respective scale.
    """
    out: list[str] = []
    tol_rho = 1e-10 * params.rho_f
    tol_c = 1e-10 * params.C_bar
    for name in ("P", "Q", "D"):
        lo = getattr(record, f"min_{name}")
        hi = getattr(record, f"max_{name}")
        if lo < -tol_rho:
            out.append(f"{name} fell below 0: min = {lo:.6e}")
        if hi > params.rho_f + tol_rho:
            out.append(f"{name} exceeded rho_f = {params.rho_f}: max = {hi:.6e}")
    if record.min_C < -tol_c:
        out.append(f"C fell below 0: min = {record.min_C:.6e}")
    if record.max_C > params.C_bar + tol_c:
        out.append(f"C exceeded C_bar = {params.C_bar}: max = {record.max_C:.6e}")
    if record.min_W < -1e-10:
        out.append(f"W fell below 0: min = {record.min_W:.6e}")
    if w_max_initial is not None and record.max_W > w_max_initial * (1.0 + 1e-10) + 1e-30:
        out.append(f"W exceeded its initial max {w_max_initial}: {record.max_W:.6e}")
    if not record.is_finite():
        out.append("non-finite diagnostic value")
    return out


def _field_extrema(state: SimState):
    c = state.cells
    ch = state.chem
    return dict(
        min_P=float(c.P.min()), max_P=float(c.P.max()),
        min_Q=float(c.Q.min()), max_Q=float(c.Q.max()),
        min_D=float(c.D.min()), max_D=float(c.D.max()),
        min_C=float(ch.C.min()), max_C=float(ch.C.max()),
        min_W=float(ch.W.min()), max_W=float(ch.W.max()),
    )


def sum_drift(state: SimState, params: ModelParams) -> float:
    """max over the tumor interior {phi <= -w} of |P + Q + D - rho_f|."""
    inside = state.phi.phi <= -state.phi.width
    if not inside.any():
        return 0.0
    total = state.cells.total()
    return float(np.abs(total[inside] - params.rho_f).max())


def coupled_step(
    state: SimState,
    params: ModelParams,
    velocity: BoundaryVelocity,
    numerics: NumericsParams,
    dt: float,
) -> tuple[SimState, DiagnosticsRecord]:
    """Advance the coupled system by dt and report the step's monitors."""
    grid = state.grid
    eps_chem = numerics.eps_chem if numerics.eps_chem is not None else params.eps_penalty
    lam_pen = numerics.lambda_pen if numerics.lambda_pen is not None \
        else default_lambda_pen(params.mu, grid.h)

    try:
        phi_new = advect_levelset(state.phi, velocity, state.t, dt, numerics.advect_scheme)
        if numerics.reinit_every > 0 and (state.step_index + 1) % numerics.reinit_every == 0:
            phi_new = reinitialize(phi_new)
    except DomainError as err:
        raise SimulationError(f"level-set stage: {err}") from err

    coeffs = coefficient_fields(params, phi_new)
    t_new = state.t + dt

    cells_cur = state.cells
    chem_cur = state.chem
    flow_state = state.flow
    report = None
    clamp_budget = 0.0
    v_prev = None

    sweeps = max(1, numerics.picard_sweeps)
    for sweep in range(sweeps):
        # g from the step-start densities and the sweep-updated nutrient:
        # the transport sources see exactly rho_f * g pointwise, which is
        # what keeps P+Q+D pinned to rho_f
        g = flow_mod.divergence_target(chem_cur.C, state.cells.P, state.cells.D, phi_new, params)
        try:
            flow_state, report = flow_mod.solve_flow(
                g, phi_new, velocity, coeffs, params, t_new,
                lam_pen=lam_pen, tol_lin=numerics.tol_lin, solver=numerics.solver,
            )
        except flow_mod.FlowSolverError as err:
            raise SimulationError(f"flow stage: {err}") from err

        hard_limit = cells_mod.cfl_dt(
            flow_state.v, params, grid.h, dim=grid.dim, dt_max=np.inf, safety=1.0,
        )
        try:
            cells_new, cell_stats = cells_mod.step_cells(
                state.cells, flow_state.v, chem_cur.C, chem_cur.W,
                phi_new, params, dt, cfl_limit=hard_limit,
            )
        except (cells_mod.CflError, FloatingPointError) as err:
            raise SimulationError(
                f"cell transport stage at step {state.step_index}: {err}"
            ) from err

        try:
            c_new = chem_mod.step_nutrient(
                state.chem.C, cells_new.P, cells_new.Q, coeffs, phi_new, params, dt,
                eps_chem=eps_chem, solver=numerics.solver,
            )
            w_new = chem_mod.step_drug(
                state.chem.W, cells_new.P, cells_new.Q, coeffs, phi_new, params, dt,
                eps_chem=eps_chem, solver=numerics.solver,
            )
        except chem_mod.ChemError as err:
            raise SimulationError(f"chemistry stage: {err}") from err

        cells_cur = cells_new
        chem_cur = chem_mod.ChemFields(C=c_new, W=w_new)
        clamp_budget = cell_stats.clamped_mass

        v_flat = flow_state.v.ravel()
        if v_prev is not None:
            scale = max(float(np.linalg.norm(v_flat)), 1e-300)
            if float(np.linalg.norm(v_flat - v_prev)) / scale <= numerics.picard_tol:
                break
        v_prev = v_flat.copy()

    new_state = SimState(
        t=t_new, grid=grid, phi=phi_new, cells=cells_cur, chem=chem_cur,
        flow=flow_state, step_index=state.step_index + 1,
    )
    if not (np.all(np.isfinite(chem_cur.C)) and np.all(np.isfinite(chem_cur.W))
            and np.all(np.isfinite(flow_state.v))):
        raise SimulationError(
            f"non-finite field detected after step {new_state.step_index}"
        )

    e_c, diss_c, _ = chem_mod.energy_monitor(chem_cur.C, state.chem.C, coeffs.nu1_omega, grid, dt)
    e_w, diss_w, _ = chem_mod.energy_monitor(chem_cur.W, state.chem.W, coeffs.nu2_omega, grid, dt)

    record = DiagnosticsRecord(
        t=t_new,
        total_mass_P=grid.integrate(cells_cur.P),
        total_mass_Q=grid.integrate(cells_cur.Q),
        total_mass_D=grid.integrate(cells_cur.D),
        sum_drift=sum_drift(new_state, params),
        **_field_extrema(new_state),
        penalty_flux=report.penalty_flux,
        leakage_cells=cells_mod.leakage(cells_cur, phi_new),
        leakage_chem=chem_mod.leakage_chem(chem_cur, phi_new),
        energy_C=e_c,
        diss_C=diss_c,
        energy_W=e_w,
        diss_W=diss_w,
        div_error=report.div_error,
        clamp_budget=clamp_budget,
        flow_residual=report.residual,
        flow_iterations=report.iterations,
    )
    return new_state, record


@dataclass
class RunResult:
    state: SimState
    records: list[DiagnosticsRecord]
    violations: list[str]
    exit_code: int
    wall_time: float


def run_simulation(
    state: SimState,
    params: ModelParams,
    velocity: BoundaryVelocity,
    numerics: NumericsParams,
    t_end: float,
    *,
    w_max_initial: float | None = None,
    on_snapshot=None,
    snapshot_every: int = 0,
    wall_budget_s: float | None = None,
) -> RunResult:
    """March from state.t to t_end with CFL-adaptive steps.

    on_snapshot(state) fires at step 0, every snapshot_every steps, and at
    the end. Exit codes: 0 clean, 2 bound violation seen, 3 solver failure,
    4 wall budget exceeded (state checkpointed through on_snapshot).
    """
    t_start = _time.perf_counter()
    records: list[DiagnosticsRecord] = []
    violations: list[str] = []
    if w_max_initial is None:
        w_max_initial = float(state.chem.W.max())

    if on_snapshot is not None:
        on_snapshot(state)

    exit_code = 0
    guard_r = 0.95 * state.grid.half_extent
    while state.t < t_end - 1e-14:
        if wall_budget_s is not None and _time.perf_counter() - t_start > wall_budget_s:
            exit_code = 4
            break
        dt = cells_mod.cfl_dt(
            state.flow.v, params, state.grid.h,
            dim=state.grid.dim, dt_max=numerics.dt_max, safety=numerics.cfl_safety,
        )
        vmax_bnd = velocity.max_speed(state.t, state.grid)
        if vmax_bnd > 0.0:
            dt = min(dt, 0.9 * numerics.cfl_safety * state.grid.h / vmax_bnd)
        dt = min(dt, t_end - state.t)

        try:
            state, record = coupled_step(state, params, velocity, numerics, dt)
        except SimulationError:
            exit_code = 3
            raise
        records.append(record)
        step_violations = check_bounds(record, params, w_max_initial)
        if step_violations:
            violations.extend(f"step {state.step_index}: {v}" for v in step_violations)
            exit_code = 2

        band = state.phi.band()
        if band.any() and float(state.grid.radius()[band].max()) > guard_r:
            raise SimulationError(
                "interface band reached the box rim; enlarge the box or shrink V"
            )

        if on_snapshot is not None and snapshot_every > 0 \
                and state.step_index % snapshot_every == 0:
            on_snapshot(state)

    if on_snapshot is not None and (snapshot_every == 0 or state.step_index % snapshot_every != 0):
        on_snapshot(state)
    return RunResult(
        state=state, records=records, violations=violations,
        exit_code=exit_code, wall_time=_time.perf_counter() - t_start,
    )
