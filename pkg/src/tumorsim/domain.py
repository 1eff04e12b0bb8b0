"""Reference box, Cartesian grid, and level-set tracking of the tumor domain.

The tumor occupies {phi < 0} inside the fixed box B = [-E, E]^d where
E = grid.half_extent; the healthy tissue is {phi > 0}. All initial shapes
and the prescribed boundary velocity must be supported in {|x| < E/2},
so the box rim never carries signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from ._ops import central_gradient, gradient_norm, integrate


class DomainError(ValueError):
    """Invalid geometry, velocity preset, or time-step request."""


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered mesh of the reference box.

    half_extent is the half-width of the box (twice the support radius
    allowed for initial data and boundary velocity). Cell centers sit at
    -half_extent + (i + 1/2) h with h = 2 half_extent / n_cells.
    """

    dim: int
    n_cells: int
    half_extent: float

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise DomainError(f"dim must be 2 or 3, got {self.dim}")
        if self.n_cells < 8:
            raise DomainError(f"need at least 8 cells per axis, got {self.n_cells}")
        if self.half_extent <= 0:
            raise DomainError("half_extent must be positive")

    @property
    def h(self) -> float:
        return 2.0 * self.half_extent / self.n_cells

    @property
    def support_radius(self) -> float:
        """Radius inside which all data and V must live (half of the box)."""
        return 0.5 * self.half_extent

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_cells,) * self.dim

    def axis_centers(self) -> np.ndarray:
        return -self.half_extent + (np.arange(self.n_cells) + 0.5) * self.h

    def coords(self) -> list[np.ndarray]:
        """Cell-center coordinate arrays, one per axis, each of grid shape."""
        ax = self.axis_centers()
        return list(np.meshgrid(*([ax] * self.dim), indexing="ij"))

    def radius(self) -> np.ndarray:
        return np.sqrt(sum(c * c for c in self.coords()))

    def integrate(self, field_arr: np.ndarray) -> float:
        return integrate(field_arr, self.h)


def _plateau(r: np.ndarray, r_flat: float, r_zero: float) -> np.ndarray:
    """C^1 cutoff: 1 for r <= r_flat, 0 for r >= r_zero, cubic in between."""
    u = np.clip((r - r_flat) / (r_zero - r_flat), 0.0, 1.0)
    return 1.0 - u * u * (3.0 - 2.0 * u)


@dataclass(frozen=True)
class BoundaryVelocity:
    """Prescribed velocity V(t, x) moving the tumor boundary.

    Presets: zero, translation (constant vector under the cutoff),
    radial_expansion (V = rate * x inside the plateau), rotation (2D rigid
    rotation, divergence-free), user (one expression per component with
    variables x, y, z, r, t and numpy functions).

    Every preset is multiplied by a C^1 radial cutoff that is identically 1
    for |x| <= plateau_frac * support_radius and 0 for |x| >= cut_frac *
    support_radius, so V is compactly supported in {|x| < support_radius}.
    """

    preset: str
    params: dict = field(default_factory=dict)
    plateau_frac: float = 0.7
    cut_frac: float = 0.95

    def evaluate(self, t: float, grid: Grid) -> list[np.ndarray]:
        coords = grid.coords()
        r = grid.radius()
        r_support = grid.support_radius
        cut = _plateau(r, self.plateau_frac * r_support, self.cut_frac * r_support)

        if self.preset == "zero":
            return [np.zeros(grid.shape) for _ in range(grid.dim)]
        if self.preset == "translation":
            u = self.params["vector"]
            if len(u) != grid.dim:
                raise DomainError("translation vector length must match grid.dim")
            return [u_i * cut for u_i in u]
        if self.preset == "radial_expansion":
            rate = self.params["rate"]
            scale = self.params.get("scale", self.plateau_frac * r_support)
            cut_s = _plateau(r, scale, self.cut_frac * r_support)
            return [rate * c * cut_s for c in coords]
        if self.preset == "rotation":
            if grid.dim != 2:
                raise DomainError("rotation preset is 2D only")
            rate = self.params["rate"]
            x, y = coords
            return [-rate * y * cut, rate * x * cut]
        if self.preset == "user":
            return self._evaluate_user(t, grid, coords, r, cut)
        raise DomainError(f"unknown velocity preset '{self.preset}'")

    def _evaluate_user(self, t, grid, coords, r, cut):
        exprs = self.params["exprs"]
        if len(exprs) != grid.dim:
            raise DomainError("need one expression per velocity component")
        names = {"x": coords[0], "y": coords[1], "r": r, "t": t, "np": np,
                 "sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt,
                 "pi": np.pi}
        if grid.dim == 3:
            names["z"] = coords[2]
        comps = []
        for expr in exprs:
            val = eval(expr, {"__builtins__": {}}, names)  # noqa: S307 - config-owned expression
            comps.append(np.broadcast_to(np.asarray(val, dtype=float), grid.shape) * cut)
        outside = r >= grid.support_radius
        for comp in comps:
            if np.any(np.abs(comp[outside]) > 0.0):
                raise DomainError("user velocity must vanish for |x| >= support radius")
        return comps

    def max_speed(self, t: float, grid: Grid) -> float:
        comps = self.evaluate(t, grid)
        return float(np.sqrt(sum(c * c for c in comps)).max())


@dataclass(frozen=True)
class LevelSetField:
    """Scalar field phi on the grid; tumor = {phi < 0}, interface = {phi = 0}."""

    grid: Grid
    phi: np.ndarray
    smoothing_k: float = 1.5

    def __post_init__(self):
        if self.phi.shape != self.grid.shape:
            raise DomainError("phi shape does not match grid")
        if self.smoothing_k < 1.0:
            raise DomainError("smoothing width must be at least one cell")

    @property
    def width(self) -> float:
        """Diffuse-interface half-width w = k h."""
        return self.smoothing_k * self.grid.h

    def band(self, mult: float = 3.0) -> np.ndarray:
        return np.abs(self.phi) <= mult * self.width


# ---------------------------------------------------------------------------
# shape construction


def _sphere_distance(coords, center, radius):
    return np.sqrt(sum((c - c0) ** 2 for c, c0 in zip(coords, center))) - radius


def init_levelset(shape_spec: dict, grid: Grid, smoothing_k: float = 1.5) -> LevelSetField:
    """Signed distance to a sphere / ellipsoid / union of spheres.

    The shape must lie strictly inside {|x| < support_radius}; touching or
    exceeding that ball is rejected. Non-sphere shapes are redistanced so
    the band satisfies the signed-distance tolerance.
    """
    kind = shape_spec["kind"]
    coords = grid.coords()
    r_support = grid.support_radius

    if kind == "sphere":
        center = np.asarray(shape_spec["center"], dtype=float)
        radius = float(shape_spec["radius"])
        _check_inside(np.linalg.norm(center) + radius, r_support, "sphere")
        phi = _sphere_distance(coords, center, radius)
    elif kind == "ellipsoid":
        center = np.asarray(shape_spec["center"], dtype=float)
        semiaxes = np.asarray(shape_spec["semiaxes"], dtype=float)
        if np.any(semiaxes <= 0):
            raise DomainError("ellipsoid semiaxes must be positive")
        _check_inside(np.linalg.norm(center) + semiaxes.max(), r_support, "ellipsoid")
        q = np.sqrt(sum(((c - c0) / a) ** 2 for c, c0, a in zip(coords, center, semiaxes)))
        phi = (q - 1.0) * semiaxes.min()
    elif kind == "spheres":
        parts = shape_spec["spheres"]
        if not parts:
            raise DomainError("union needs at least one sphere")
        dists = []
        for center, radius in parts:
            center = np.asarray(center, dtype=float)
            _check_inside(np.linalg.norm(center) + float(radius), r_support, "sphere in union")
            dists.append(_sphere_distance(coords, center, float(radius)))
        phi = np.minimum.reduce(dists)
    else:
        raise DomainError(f"unknown shape kind '{kind}'")

    ls = LevelSetField(grid, phi, smoothing_k)
    return reinitialize(ls)


def _check_inside(extent: float, r_support: float, what: str) -> None:
    if extent >= r_support:
        raise DomainError(
            f"{what} reaches |x| = {extent:.4g} but must stay inside the "
            f"support ball |x| < {r_support:.4g}"
        )


# ---------------------------------------------------------------------------
# transport


def _one_sided_differences(phi: np.ndarray, h: float, axis: int):
    """Backward and forward differences with edge replication."""
    padded = np.concatenate(
        [np.take(phi, [0], axis=axis), phi, np.take(phi, [-1], axis=axis)], axis=axis
    )
    mid = [slice(None)] * phi.ndim
    lo = [slice(None)] * phi.ndim
    hi = [slice(None)] * phi.ndim
    mid[axis] = slice(1, -1)
    lo[axis] = slice(None, -2)
    hi[axis] = slice(2, None)
    d_minus = (padded[tuple(mid)] - padded[tuple(lo)]) / h
    d_plus = (padded[tuple(hi)] - padded[tuple(mid)]) / h
    return d_minus, d_plus


def _minmod(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    same_sign = a * b > 0
    return np.where(same_sign, np.where(np.abs(a) < np.abs(b), a, b), 0.0)


def _eno2_differences(phi: np.ndarray, h: float, axis: int):
    padded = np.concatenate(
        [np.take(phi, [0, 0], axis=axis), phi, np.take(phi, [-1, -1], axis=axis)],
        axis=axis,
    )
    sl = lambda a, b: tuple(
        slice(2 + a, None if b == 0 else -2 + b) if ax == axis else slice(None)
        for ax in range(phi.ndim)
    )
    center = padded[sl(0, 0)]
    left = padded[sl(-1, -1)]
    right = padded[sl(1, 1)]
    left2 = padded[sl(-2, -2)]
    right2 = padded[sl(2, 2)]
    d2_m = (center - 2.0 * left + left2) / (h * h)
    d2_0 = (right - 2.0 * center + left) / (h * h)
    d2_p = (right2 - 2.0 * right + center) / (h * h)
    d_minus = (center - left) / h + 0.5 * h * _minmod(d2_m, d2_0)
    d_plus = (right - center) / h - 0.5 * h * _minmod(d2_0, d2_p)
    return d_minus, d_plus


def _advection_rhs(phi, v_comps, h, scheme):
    rhs = np.zeros_like(phi)
    for ax, v in enumerate(v_comps):
        if scheme == "eno2":
            d_minus, d_plus = _eno2_differences(phi, h, ax)
        else:
            d_minus, d_plus = _one_sided_differences(phi, h, ax)
        rhs -= np.maximum(v, 0.0) * d_minus + np.minimum(v, 0.0) * d_plus
    return rhs


def advect_levelset(
    ls: LevelSetField,
    velocity: BoundaryVelocity,
    t: float,
    dt: float,
    scheme: str = "upwind1",
) -> LevelSetField:
    """One transport step of phi by the prescribed velocity.

    scheme "upwind1" is forward Euler with first-order upwind differences;
    "eno2" is Heun time stepping with second-order ENO differences. The
    step is rejected if dt exceeds 0.9 h / max|V|.
    """
    grid = ls.grid
    v_comps = velocity.evaluate(t, grid)
    vmax = float(np.sqrt(sum(c * c for c in v_comps)).max())
    if vmax > 0.0:
        dt_adm = 0.9 * grid.h / vmax
        if dt > dt_adm * (1.0 + 1e-12):
            raise DomainError(
                f"advection dt = {dt:.4g} violates CFL; admissible dt <= {dt_adm:.4g}"
            )
    if vmax == 0.0:
        return ls

    k1 = _advection_rhs(ls.phi, v_comps, grid.h, scheme)
    if scheme == "upwind1":
        phi_new = ls.phi + dt * k1
    elif scheme == "eno2":
        mid = ls.phi + dt * k1
        v_comps_new = velocity.evaluate(t + dt, grid)
        k2 = _advection_rhs(mid, v_comps_new, grid.h, scheme)
        phi_new = ls.phi + 0.5 * dt * (k1 + k2)
    else:
        raise DomainError(f"unknown advection scheme '{scheme}'")
    return replace(ls, phi=phi_new)


# ---------------------------------------------------------------------------
# reinitialization (Godunov Hamiltonian with a subcell interface fix)


def has_zero_crossing(phi: np.ndarray) -> bool:
    if phi.min() > 0.0 or phi.max() < 0.0:
        return False
    for ax in range(phi.ndim):
        lo = [slice(None)] * phi.ndim
        hi = [slice(None)] * phi.ndim
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        if np.any(phi[tuple(lo)] * phi[tuple(hi)] <= 0.0):
            return True
    return False


def _kink_cells(phi: np.ndarray, h: float) -> np.ndarray:
    """Cells on an along-axis extremum of phi (medial skeleton or ridge).

    The gradient of a distance field is genuinely discontinuous across the
    medial axis, and smooth extrema carry a vanishing axis derivative;
    either way no finite-difference norm can read 1 there.
    """
    kink = np.zeros(phi.shape, dtype=bool)
    for ax in range(phi.ndim):
        d_minus, d_plus = _one_sided_differences(phi, h, ax)
        kink |= d_minus * d_plus <= 0.0
    return kink


def band_distance_error(ls: LevelSetField, band_mult: float = 3.0) -> float:
    """max over the band of | |grad phi| - 1 |, central differences.

    Skeleton kink cells are excluded: the distance gradient jumps across
    the medial axis, so the deviation there is geometry, not a defect of
    the field.
    """
    band = ls.band(band_mult) & ~_kink_cells(ls.phi, ls.grid.h)
    if not band.any():
        return 0.0
    gn = gradient_norm(ls.phi, ls.grid.h)
    return float(np.abs(gn[band] - 1.0).max())


def _godunov_gradient(phi, h, sign):
    """Godunov upwind |grad phi| for the redistancing Hamiltonian."""
    total = np.zeros_like(phi)
    for ax in range(phi.ndim):
        d_minus, d_plus = _one_sided_differences(phi, h, ax)
        pos = np.maximum(np.maximum(d_minus, 0.0) ** 2, np.minimum(d_plus, 0.0) ** 2)
        neg = np.maximum(np.minimum(d_minus, 0.0) ** 2, np.maximum(d_plus, 0.0) ** 2)
        total += np.where(sign > 0, pos, neg)
    return np.sqrt(total)


def reinitialize(
    ls: LevelSetField,
    tol: float = 0.1,
    max_iters: int = 400,
) -> LevelSetField:
    """Restore the signed-distance property near the interface.

    Interface-adjacent cells are pinned by a subcell distance estimate from
    the incoming field, so the zero set moves by at most ~h/2; remaining
    band cells relax under the Godunov redistancing Hamiltonian. A field
    already within tol returns unchanged, which makes repeated passes
    idempotent (the exact signed distance is a fixed point). Strongly
    distorted inputs get extra rounds with refreshed subcell targets.
    """
    if not has_zero_crossing(ls.phi):
        raise DomainError("level set has no zero crossing: tumor vanished or fills the box")
    if band_distance_error(ls) <= tol:
        return ls
    out = ls
    for _ in range(3):
        out = _reinitialize_once(out, tol, max_iters)
        if band_distance_error(out) <= tol:
            return out
    raise DomainError(
        f"reinitialization stalled at band error "
        f"{band_distance_error(out):.3f} (tolerance {tol})"
    )


def _reinitialize_once(ls: LevelSetField, tol: float, max_iters: int) -> LevelSetField:
    phi0 = ls.phi

    grid = ls.grid
    h = grid.h

    # cells with a sign change across any face
    interface = np.zeros(phi0.shape, dtype=bool)
    for ax in range(phi0.ndim):
        lo = [slice(None)] * phi0.ndim
        hi = [slice(None)] * phi0.ndim
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        change = phi0[tuple(lo)] * phi0[tuple(hi)] <= 0.0
        interface[tuple(lo)] |= change
        interface[tuple(hi)] |= change

    # subcell target distance for interface cells
    grads0 = central_gradient(phi0, h)
    gnorm0 = np.sqrt(sum(g * g for g in grads0))
    target = phi0 / np.maximum(gnorm0, 1e-12)

    sign = np.where(phi0 >= 0.0, 1.0, -1.0)
    smoothed_sign = phi0 / np.sqrt(phi0 * phi0 + h * h)
    dtau = 0.5 * h

    phi = phi0.copy()
    best = np.inf
    stalled = 0
    for _ in range(max_iters):
        gn = _godunov_gradient(phi, h, sign)
        update = phi - dtau * smoothed_sign * (gn - 1.0)
        update[interface] = phi[interface] - (dtau / h) * (
            sign[interface] * np.abs(phi[interface]) - target[interface]
        )
        phi = update
        candidate = replace(ls, phi=phi)
        err = band_distance_error(candidate)
        if err <= 0.8 * tol:
            return candidate
        if err < best - 1e-12:
            best = err
            stalled = 0
        else:
            stalled += 1
            if stalled >= 40:
                break
    return replace(ls, phi=phi)


# ---------------------------------------------------------------------------
# geometry derived from phi


def interface_normal(ls: LevelSetField) -> tuple[np.ndarray, np.ndarray]:
    """Unit outward normal grad(phi)/|grad(phi)| and a degenerate-cell mask.

    Cells in the band where |grad phi| < 1e-10 are flagged and filled from
    the nearest non-degenerate cell. Returns (normals, flags) with normals
    of shape (dim, *grid.shape).
    """
    grid = ls.grid
    grads = central_gradient(ls.phi, grid.h)
    gnorm = np.sqrt(sum(g * g for g in grads))
    degenerate = gnorm < 1e-10
    flags = degenerate & ls.band()

    safe = np.maximum(gnorm, 1e-300)
    normals = np.stack([g / safe for g in grads])
    if degenerate.any():
        if degenerate.all():
            raise DomainError("gradient of phi vanishes everywhere; no normal direction")
        _, nearest = ndimage.distance_transform_edt(degenerate, return_indices=True)
        fill_idx = tuple(nearest[i][degenerate] for i in range(grid.dim))
        for comp in range(grid.dim):
            normals[comp][degenerate] = normals[comp][fill_idx]
    return normals, flags


def smoothed_indicator(ls: LevelSetField) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed healthy-tissue indicator H and its derivative delta.

    H = 0 for phi <= -w, H = 1 for phi >= w, cosine ramp between;
    delta = dH/dphi >= 0 is supported in |phi| <= w and realizes surface
    integrals as volume integrals of delta |grad phi|.
    """
    w = ls.width
    u = np.clip(ls.phi / w, -1.0, 1.0)
    h_ind = 0.5 * (1.0 + u + np.sin(np.pi * u) / np.pi)
    delta = np.where(
        np.abs(ls.phi) < w, (1.0 + np.cos(np.pi * u)) / (2.0 * w), 0.0
    )
    return h_ind, delta


def tumor_volume(ls: LevelSetField) -> float:
    h_ind, _ = smoothed_indicator(ls)
    return ls.grid.integrate(1.0 - h_ind)


def tumor_centroid(ls: LevelSetField) -> np.ndarray:
    h_ind, _ = smoothed_indicator(ls)
    w_field = 1.0 - h_ind
    vol = ls.grid.integrate(w_field)
    return np.array([ls.grid.integrate(c * w_field) / vol for c in ls.grid.coords()])


def interface_area(ls: LevelSetField) -> float:
    _, delta = smoothed_indicator(ls)
    return ls.grid.integrate(delta * gradient_norm(ls.phi, ls.grid.h))
