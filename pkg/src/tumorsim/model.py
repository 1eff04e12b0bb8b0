"""Model parameters, cutoff coefficient fields, and reaction source terms.

Cell-phase transfers follow the rate structure
    P -> Q at K_Q (C_bar - C),   Q -> P at K_P C,
    P -> D at K_A (C_bar - C),   Q -> D at K_D (C_bar - C),
    births K_B C, dead-cell clearance K_R, drug kill i_k G_k(W).
All rates are nondimensional; the config carries the single time scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import LevelSetField, smoothed_indicator


class ParamError(ValueError):
    """One or more parameter constraints violated."""


def _g_michaelis(w):
    return w / (1.0 + w)


def _g_linear_capped(w):
    # slope 1 at the origin, smooth saturation at 1
    return 1.0 - np.exp(-w)


def _g_logistic(w):
    return np.tanh(0.5 * w)


def _g_zero(w):
    return np.zeros_like(np.asarray(w, dtype=float))


DRUG_RESPONSES = {
    "michaelis": (_g_michaelis, 1.0),
    "linear_capped": (_g_linear_capped, 1.0),
    "logistic": (_g_logistic, 1.0),
    "zero": (_g_zero, 0.0),
}

# keys that may be defaulted when omitted (numerical scheme, not physics)
SCHEME_DEFAULTS = {
    "eps_penalty": 1e-3,
    "omega": 1e-2,
    "eta": 0.0,
    "G1_kind": "michaelis",
    "G2_kind": "michaelis",
}

RATE_KEYS = ("K_B", "K_Q", "K_A", "K_P", "K_D", "K_R", "K_1", "K_2",
             "mu_1", "mu_2", "i_1", "i_2")
POSITIVE_KEYS = ("C_bar", "rho_f", "mu", "K_perm", "nu_1", "nu_2")


@dataclass(frozen=True)
class ModelParams:
    K_B: float
    K_Q: float
    K_A: float
    K_P: float
    K_D: float
    K_R: float
    K_1: float
    K_2: float
    mu_1: float
    mu_2: float
    i_1: float
    i_2: float
    C_bar: float
    rho_f: float
    mu: float
    K_perm: float
    nu_1: float
    nu_2: float
    eps_penalty: float = 1e-3
    omega: float = 1e-2
    eta: float = 0.0
    G1_kind: str = "michaelis"
    G2_kind: str = "michaelis"

    def g1(self, w):
        return DRUG_RESPONSES[self.G1_kind][0](w)

    def g2(self, w):
        return DRUG_RESPONSES[self.G2_kind][0](w)

    @property
    def g1_max(self) -> float:
        return DRUG_RESPONSES[self.G1_kind][1]

    @property
    def g2_max(self) -> float:
        return DRUG_RESPONSES[self.G2_kind][1]

    def reaction_rate_bound(self) -> float:
        """Largest per-species loss rate over admissible fields.

        Bounds the stiffness of the cell sources for the explicit step:
        with 0 <= C <= C_bar and G_k <= G_k_max the loss coefficients are
        at most the values combined here.
        """
        loss_p = (self.K_Q + self.K_A) * self.C_bar + self.i_1 * self.g1_max
        loss_q = (self.K_P + self.K_D) * self.C_bar + self.i_2 * self.g2_max
        loss_d = self.K_R
        gain_p = self.K_B * self.C_bar
        return max(loss_p, loss_q, loss_d, gain_p)


def validate_params(raw: dict) -> tuple[ModelParams, list[str]]:
    """Build ModelParams from a key-value map.

    Returns (params, warnings). Scheme keys fall back to SCHEME_DEFAULTS
    with a recorded warning; physical rates and constants must be present.
    Raises ParamError listing every violation at once.
    """
    violations: list[str] = []
    warnings: list[str] = []
    values: dict = {}

    for key in RATE_KEYS + POSITIVE_KEYS:
        if key not in raw:
            violations.append(f"missing required parameter '{key}'")
    unknown = set(raw) - set(RATE_KEYS) - set(POSITIVE_KEYS) - set(SCHEME_DEFAULTS)
    for key in sorted(unknown):
        violations.append(f"unknown parameter '{key}'")

    for key in RATE_KEYS:
        if key in raw:
            val = float(raw[key])
            if val < 0:
                violations.append(f"{key} must be nonnegative, got {val}")
            values[key] = val
    for key in POSITIVE_KEYS:
        if key in raw:
            val = float(raw[key])
            if val <= 0:
                violations.append(f"{key} must be positive, got {val}")
            values[key] = val

    for key, default in SCHEME_DEFAULTS.items():
        if key in raw:
            values[key] = raw[key] if isinstance(default, str) else float(raw[key])
        else:
            values[key] = default
            warnings.append(f"{key} defaulted to {default!r}")

    if "eps_penalty" in values and not isinstance(values["eps_penalty"], str):
        if values["eps_penalty"] <= 0:
            violations.append("eps_penalty must be positive")
    if "omega" in values:
        om = values["omega"]
        if not (0.0 < om <= 1.0):
            violations.append(f"omega must lie in (0, 1], got {om}")
    if "eta" in values and values["eta"] < 0:
        violations.append("eta must be nonnegative")
    for key in ("G1_kind", "G2_kind"):
        if values.get(key) not in DRUG_RESPONSES:
            violations.append(
                f"{key} must be one of {sorted(DRUG_RESPONSES)}, got {values.get(key)!r}"
            )

    if violations:
        raise ParamError("; ".join(violations))
    return ModelParams(**values), warnings


@dataclass(frozen=True)
class CoefficientFields:
    """Cutoff viscosity and diffusivities: full value in the tumor, omega-scaled outside."""

    mu_omega: np.ndarray
    nu1_omega: np.ndarray
    nu2_omega: np.ndarray


def coefficient_fields(params: ModelParams, ls: LevelSetField) -> CoefficientFields:
    """Ramp each coefficient from its tumor value down to omega times it.

    ramp = omega + (1 - omega)(1 - H_w(phi)) equals 1 for phi <= -w and
    omega for phi >= w, so omega*mu <= mu_omega <= mu holds everywhere.
    """
    h_ind, _ = smoothed_indicator(ls)
    ramp = params.omega + (1.0 - params.omega) * (1.0 - h_ind)
    return CoefficientFields(
        mu_omega=params.mu * ramp,
        nu1_omega=params.nu_1 * ramp,
        nu2_omega=params.nu_2 * ramp,
    )


def _check_same_shape(*fields):
    shapes = {f.shape for f in fields}
    if len(shapes) > 1:
        raise ParamError(f"fields live on different grids: {sorted(shapes)}")


def sources(P, Q, D, C, W, params: ModelParams):
    """Reaction sources (G_P, G_Q, G_D) for the three cell phases.

    Their sum telescopes to K_B C P - K_R D pointwise: every transfer term
    appears once with each sign, only births and clearance survive.
    """
    _check_same_shape(P, Q, D, C, W)
    starv = params.C_bar - C
    kill_p = params.i_1 * params.g1(W) * P
    kill_q = params.i_2 * params.g2(W) * Q

    g_p = (params.K_B * C - params.K_Q * starv - params.K_A * starv) * P \
        + params.K_P * C * Q - kill_p
    g_q = params.K_Q * starv * P - (params.K_P * C + params.K_D * starv) * Q - kill_q
    g_d = params.K_A * starv * P + params.K_D * starv * Q - params.K_R * D \
        + kill_p + kill_q
    return g_p, g_q, g_d


def nutrient_consumption(C, P, Q, params: ModelParams):
    """Sink (K_1 K_P C P + K_2 K_Q (C_bar - C) Q) C; nonnegative on admissible fields."""
    _check_same_shape(C, P, Q)
    return (params.K_1 * params.K_P * C * P
            + params.K_2 * params.K_Q * (params.C_bar - C) * Q) * C


def drug_consumption(W, P, Q, params: ModelParams):
    """Sink (mu_1 G1(W) P + mu_2 G2(W) Q) W; vanishes with W."""
    _check_same_shape(W, P, Q)
    return (params.mu_1 * params.g1(W) * P + params.mu_2 * params.g2(W) * Q) * W
