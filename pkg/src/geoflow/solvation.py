"""Diffuse-interface biomolecular solvation.

The solute is represented by a surface function S in [0, 1] (1 inside the
molecule). The electrostatic potential solves a generalized
Poisson-Boltzmann equation with the S-blended dielectric, and S itself
relaxes under a Laplace-Beltrami gradient flow of the total solvation free
energy. The solvation free energy is reported as a same-grid difference
against a vacuum reference so the grid self-energy of the spread point
charges cancels exactly.

Unit conventions: lengths in Angstrom, energies in kcal/mol, charges in
elementary charges, the stored potential in k_B T / e. All unit bridging
goes through the Coulomb constant on SolvationParams, so a unit audit only
has to look here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GridError, NumericalError
from .grid import (
    Boundary,
    Grid3D,
    ScalarField3D,
    VectorField3D,
    div3d,
    grad3d,
    default_grad_eta,
)

__all__ = [
    "Atom",
    "IonSpecies",
    "SolvationParams",
    "EnergyBreakdown",
    "GpbeResult",
    "SolvationState",
    "SolvateConfig",
    "spread_charges",
    "build_vdw_attractive",
    "dielectric_of_S",
    "coulomb_boundary_values",
    "solve_gpbe",
    "potential_V",
    "physical_potential_V",
    "lb_flow_step",
    "total_energy",
    "polar_solvation_energy",
    "born_energy_analytic",
    "sphere_surface_function",
    "initial_surface_function",
    "vdw_core_indicator",
    "run_solvation",
    "COULOMB_KCAL_A_E2",
    "KBT_ROOM",
]

# e^2 / (4 pi eps0) in kcal/mol * Angstrom per elementary charge squared
COULOMB_KCAL_A_E2 = 332.0637133
# k_B * 298.15 K in kcal/mol
KBT_ROOM = 0.5924849


@dataclass(frozen=True)
class Atom:
    position: tuple[float, float, float]
    charge: float                 # elementary charges
    radius: float                 # vdW radius, Angstrom
    lj_epsilon: float = 0.15      # LJ well depth, kcal/mol
    lj_sigma: float = 3.0         # LJ sigma, Angstrom
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(x) for x in self.position))
        if self.radius <= 0:
            raise ValueError(f"atom radius must be positive, got {self.radius}")
        if self.lj_sigma <= 0:
            raise ValueError(f"LJ sigma must be positive, got {self.lj_sigma}")
        if self.lj_epsilon < 0:
            raise ValueError(f"LJ epsilon must be >= 0, got {self.lj_epsilon}")


@dataclass(frozen=True)
class IonSpecies:
    charge: float          # elementary charges
    concentration: float   # number density, Angstrom^-3

    def __post_init__(self):
        if self.concentration < 0:
            raise ValueError("ion concentration must be >= 0")


@dataclass(frozen=True)
class SolvationParams:
    epsilon_m: float = 1.0
    epsilon_s: float = 78.0
    gamma: float = 0.0            # surface tension, kcal/mol/A^2
    pressure: float = 0.0         # kcal/mol/A^3
    rho0: float = 0.0             # solvent bulk density, A^-3
    kbt: float = KBT_ROOM         # kcal/mol
    ions: tuple[IonSpecies, ...] = ()
    boltzmann_clamp: float = 50.0
    coulomb: float = COULOMB_KCAL_A_E2

    def __post_init__(self):
        if not (self.epsilon_s >= self.epsilon_m > 0):
            raise ValueError(
                f"need epsilon_s >= epsilon_m > 0, got {self.epsilon_s}, {self.epsilon_m}"
            )
        if min(self.gamma, self.pressure, self.rho0) < 0:
            raise ValueError("gamma, pressure and rho0 must be >= 0")
        if self.kbt <= 0 or self.boltzmann_clamp <= 0 or self.coulomb <= 0:
            raise ValueError("kbt, boltzmann_clamp and coulomb must be positive")
        object.__setattr__(self, "ions", tuple(self.ions))
        net = sum(i.charge * i.concentration for i in self.ions)
        scale = max(1.0, sum(abs(i.charge) * i.concentration for i in self.ions))
        if abs(net) > 1e-12 * scale:
            raise ValueError(f"ion species are not electroneutral: sum q_i c_i = {net:.3e}")

    @property
    def source_scale(self) -> float:
        """Multiplies charge density (e/A^3) into the kT/e potential equation."""
        return 4.0 * math.pi * self.coulomb / self.kbt

    @property
    def energy_scale(self) -> float:
        """kbt^2 / (4 pi C): converts the reduced energy density to kcal/mol/A^3."""
        return self.kbt * self.kbt / (4.0 * math.pi * self.coulomb)


@dataclass
class EnergyBreakdown:
    surface: float
    pressure: float
    dispersion: float
    polar: float
    ion: float
    total: float = field(default=float("nan"))
    g_ref: float = field(default=float("nan"))
    delta_g: float = field(default=float("nan"))

    def __post_init__(self):
        parts = self.surface + self.pressure + self.dispersion + self.polar + self.ion
        if math.isnan(self.total):
            self.total = parts
        elif abs(self.total - parts) > 1e-10 * max(1.0, abs(parts)):
            raise ValueError("EnergyBreakdown total does not match the sum of its parts")
        if not math.isnan(self.g_ref) and math.isnan(self.delta_g):
            self.delta_g = self.total - self.g_ref


@dataclass
class GpbeResult:
    phi: ScalarField3D
    residuals: list[float]
    converged: bool
    cg_iterations: int


@dataclass
class SolvationState:
    surface: ScalarField3D
    phi: ScalarField3D
    energies: EnergyBreakdown
    trace: list[dict]
    converged: bool
    cycles: int


# ---------------------------------------------------------------------------
# charge spreading and potentials of the fixed solute


def spread_charges(atoms: list[Atom], grid: Grid3D) -> ScalarField3D:
    """Trilinear spreading of point charges onto grid nodes (density e/A^3).

    The discrete integral (sum * cell volume) equals the total charge exactly.
    """
    if not atoms:
        raise ValueError("spread_charges needs at least one atom")
    rho = np.zeros(grid.dims)
    inv_vol = 1.0 / grid.cell_volume
    for atom in atoms:
        t = [(atom.position[d] - grid.origin[d]) / grid.spacing[d] for d in range(3)]
        i0 = [int(np.floor(v)) for v in t]
        frac = [t[d] - i0[d] for d in range(3)]
        for d in range(3):
            if not (2 <= t[d] <= grid.dims[d] - 3):
                raise GridError(
                    f"atom at {atom.position} is closer than 2h to the grid boundary"
                )
        wx = (1.0 - frac[0], frac[0])
        wy = (1.0 - frac[1], frac[1])
        wz = (1.0 - frac[2], frac[2])
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = wx[dx] * wy[dy] * wz[dz]
                    if w != 0.0:
                        rho[i0[0] + dx, i0[1] + dy, i0[2] + dz] += atom.charge * w * inv_vol
    return ScalarField3D(grid, rho)


def build_vdw_attractive(atoms: list[Atom], grid: Grid3D,
                         cutoff_sigmas: float = 10.0) -> ScalarField3D:
    """WCA attractive tail of the Lennard-Jones potential, summed over atoms.

    u(r) = -eps for r < 2^(1/6) sigma, the plain LJ otherwise, truncated to
    zero beyond cutoff_sigmas * sigma.
    """
    u = np.zeros(grid.dims)
    x, y, z = grid.coords()
    for atom in atoms:
        sig, eps = atom.lj_sigma, atom.lj_epsilon
        if eps == 0.0:
            continue
        r = np.sqrt(
            (x - atom.position[0]) ** 2
            + (y - atom.position[1]) ** 2
            + (z - atom.position[2]) ** 2
        )
        rmin = 2.0 ** (1.0 / 6.0) * sig
        with np.errstate(divide="ignore", over="ignore"):
            sr6 = (sig / np.maximum(r, 1e-12)) ** 6
            tail = 4.0 * eps * (sr6 * sr6 - sr6)
        contrib = np.where(r < rmin, -eps, tail)
        contrib[r > cutoff_sigmas * sig] = 0.0
        u += contrib
    return ScalarField3D(grid, u)


def dielectric_of_S(S: ScalarField3D, epsilon_m: float, epsilon_s: float) -> ScalarField3D:
    """Linear blend eps = (1 - S) eps_s + S eps_m."""
    v = S.values
    if v.min() < -1e-9 or v.max() > 1.0 + 1e-9:
        raise ValueError(f"surface function out of [0,1]: range [{v.min()}, {v.max()}]")
    return ScalarField3D(S.grid, (1.0 - v) * epsilon_s + v * epsilon_m)


def debye_kappa(params: SolvationParams) -> float:
    """Inverse Debye length (1/A) of the linearized ionic screening."""
    s = sum(i.concentration * i.charge ** 2 for i in params.ions)
    return math.sqrt(params.source_scale * s / params.epsilon_s)


def coulomb_boundary_values(atoms: list[Atom], grid: Grid3D, params: SolvationParams,
                            vacuum: bool = False) -> ScalarField3D:
    """Screened-Coulomb Dirichlet data on the grid boundary (kT/e units).

    For the solvated solve the superposition of single-ion Debye-Hueckel
    potentials; for the vacuum reference the bare eps=1 Coulomb potential.
    Interior nodes are filled with zeros (only the boundary ring is read).
    """
    vals = np.zeros(grid.dims)
    ring = np.zeros(grid.dims, dtype=bool)
    for d in range(3):
        sl = [slice(None)] * 3
        sl[d] = 0
        ring[tuple(sl)] = True
        sl[d] = -1
        ring[tuple(sl)] = True
    x, y, z = grid.coords()
    eps = 1.0 if vacuum else params.epsilon_s
    kappa = 0.0 if vacuum else debye_kappa(params)
    xs, ys, zs = (np.broadcast_to(c, grid.dims)[ring] for c in (x, y, z))
    acc = np.zeros(xs.shape)
    pref = params.coulomb / (params.kbt * eps)
    for atom in atoms:
        r = np.sqrt(
            (xs - atom.position[0]) ** 2
            + (ys - atom.position[1]) ** 2
            + (zs - atom.position[2]) ** 2
        )
        r = np.maximum(r, 1e-6)
        acc += pref * atom.charge * np.exp(-kappa * r) / r
    vals[ring] = acc
    return ScalarField3D(grid, vals)


# ---------------------------------------------------------------------------
# generalized Poisson-Boltzmann solver


def _face_averages(eps: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # harmonic face averages: exact two-material series flux in 1D, much
    # more accurate than arithmetic means across sharp dielectric steps
    def harm(a, b):
        return 2.0 * a * b / (a + b)

    fx = harm(eps[:-1, :, :], eps[1:, :, :])
    fy = harm(eps[:, :-1, :], eps[:, 1:, :])
    fz = harm(eps[:, :, :-1], eps[:, :, 1:])
    return fx, fy, fz


def _apply_elliptic(U, faces, c, spacing, out):
    """out = -div(eps grad U) + c U on interior nodes (ring left untouched)."""
    fx, fy, fz = faces
    hx2, hy2, hz2 = (h * h for h in spacing)
    interior = (slice(1, -1), slice(1, -1), slice(1, -1))
    if c is None:
        out[interior] = 0.0
    else:
        out[interior] = c[interior] * U[interior]
    out[1:-1, :, :] += (
        fx[:-1, :, :] * (U[1:-1, :, :] - U[:-2, :, :])
        + fx[1:, :, :] * (U[1:-1, :, :] - U[2:, :, :])
    ) / hx2
    out[:, 1:-1, :] += (
        fy[:, :-1, :] * (U[:, 1:-1, :] - U[:, :-2, :])
        + fy[:, 1:, :] * (U[:, 1:-1, :] - U[:, 2:, :])
    ) / hy2
    out[:, :, 1:-1] += (
        fz[:, :, :-1] * (U[:, :, 1:-1] - U[:, :, :-2])
        + fz[:, :, 1:] * (U[:, :, 1:-1] - U[:, :, 2:])
    ) / hz2
    return out


def _interior_mask(dims) -> np.ndarray:
    m = np.zeros(dims, dtype=bool)
    m[1:-1, 1:-1, 1:-1] = True
    return m


def _cg_elliptic(faces, c, b, U0, ring_values, spacing, tol, max_iter):
    """Jacobi-preconditioned CG for -div(eps grad U) + c U = b, Dirichlet ring."""
    dims = b.shape
    inner = _interior_mask(dims)
    hx2, hy2, hz2 = (h * h for h in spacing)
    fx, fy, fz = faces
    diag = np.ones(dims)
    diag[1:-1, :, :] = (fx[:-1, :, :] + fx[1:, :, :]) / hx2
    diag[:, 1:-1, :] += (fy[:, :-1, :] + fy[:, 1:, :]) / hy2
    diag[:, :, 1:-1] += (fz[:, :, :-1] + fz[:, :, 1:]) / hz2
    if c is not None:
        diag += c
    diag[~inner] = 1.0

    U = U0.copy()
    U[~inner] = ring_values[~inner]
    work = np.zeros(dims)
    r = np.zeros(dims)
    _apply_elliptic(U, faces, c, spacing, work)
    r[inner] = b[inner] - work[inner]
    z = r / diag
    p = z.copy()
    rz = float((r * z).sum())
    bnorm = float(np.linalg.norm(b[inner]))
    if bnorm == 0.0:
        bnorm = 1.0
    n_it = 0
    for n_it in range(1, max_iter + 1):
        _apply_elliptic(p, faces, c, spacing, work)
        work[~inner] = 0.0
        alpha = rz / float((p * work).sum())
        U += alpha * p
        r -= alpha * work
        res = float(np.linalg.norm(r[inner]))
        if res <= tol * bnorm:
            break
        z = r / diag
        rz_new = float((r * z).sum())
        p = z + (rz_new / rz) * p
        rz = rz_new
    return U, n_it


def _clamped_exp(arg: np.ndarray, clamp: float) -> np.ndarray:
    return np.exp(np.clip(arg, -clamp, clamp))


def _ion_source(S, phi, params):
    """(1-S) sum_i c_i q_i exp(-q_i phi), phi in kT/e, clamped exponents."""
    out = np.zeros(phi.shape)
    for ion in params.ions:
        out += ion.concentration * ion.charge * _clamped_exp(-ion.charge * phi,
                                                             params.boltzmann_clamp)
    return (1.0 - S) * out


def _ion_source_derivative(S, phi, params):
    out = np.zeros(phi.shape)
    for ion in params.ions:
        out += ion.concentration * ion.charge ** 2 * _clamped_exp(
            -ion.charge * phi, params.boltzmann_clamp)
    return (1.0 - S) * out


def solve_gpbe(S: ScalarField3D, rho_m: ScalarField3D, params: SolvationParams,
               phi_init: ScalarField3D | None = None, tol: float = 1e-8,
               max_iter: int = 40, boundary_values: ScalarField3D | None = None,
               cg_tol: float = 1e-10, cg_max_iter: int = 20000) -> GpbeResult:
    """Solve -div(eps(S) grad phi) = scale * [S rho_m + (1-S) sum c q exp(-q phi)].

    phi is in kT/e units; scale = 4 pi C / kbt bridges e/A^3 charge density.
    Damped fixed point: the Boltzmann term is linearized about the current
    iterate and the resulting SPD variable-coefficient system is solved by
    Jacobi-preconditioned CG. Boltzmann exponents are clamped. The returned
    residual history is monotone over accepted damped iterations.
    """
    grid = S.grid
    if grid.boundary != Boundary.DIRICHLET_ZERO:
        raise GridError("solve_gpbe expects a dirichlet_zero grid")
    if rho_m.grid != grid:
        raise GridError("S and rho_m live on different grids")
    eps = dielectric_of_S(S, params.epsilon_m, params.epsilon_s)
    faces = _face_averages(eps.values)
    alpha = params.source_scale
    Sv = S.values
    ring = np.zeros(grid.dims) if boundary_values is None else boundary_values.values
    phi = np.zeros(grid.dims) if phi_init is None else phi_init.values.copy()

    fixed_source = alpha * Sv * rho_m.values

    def residual_norm(phi_arr):
        work = np.zeros(grid.dims)
        _apply_elliptic(phi_arr, faces, None, grid.spacing, work)
        src = fixed_source + alpha * _ion_source(Sv, phi_arr, params)
        inner = _interior_mask(grid.dims)
        scale = max(float(np.linalg.norm(src[inner])), 1e-300)
        return float(np.linalg.norm((work - src)[inner])) / scale

    total_cg = 0
    if not params.ions:
        phi_full, n_cg = _cg_elliptic(faces, None, fixed_source, phi, ring,
                                      grid.spacing, cg_tol, cg_max_iter)
        res = residual_norm(phi_full)
        return GpbeResult(ScalarField3D(grid, phi_full), [res], res <= max(tol, 1e-6), n_cg)

    # set the ring before measuring the initial nonlinear residual
    inner = _interior_mask(grid.dims)
    phi[~inner] = ring[~inner]
    residuals = [residual_norm(phi)]
    converged = False
    for _ in range(max_iter):
        nl = _ion_source(Sv, phi, params)
        nl_d = alpha * _ion_source_derivative(Sv, phi, params)
        b = fixed_source + alpha * nl + nl_d * phi
        cand, n_cg = _cg_elliptic(faces, nl_d, b, phi, ring, grid.spacing,
                                  cg_tol, cg_max_iter)
        total_cg += n_cg
        omega = 1.0
        accepted = False
        while omega >= 1.0 / 64.0:
            trial = phi + omega * (cand - phi)
            res = residual_norm(trial)
            if res < residuals[-1]:
                phi = trial
                residuals.append(res)
                accepted = True
                break
            omega *= 0.5
        if not accepted:
            break
        if residuals[-1] <= tol:
            converged = True
            break
    return GpbeResult(ScalarField3D(grid, phi), residuals, converged, total_cg)


# ---------------------------------------------------------------------------
# energies and the surface-function flow


def potential_V(phi: ScalarField3D, S: ScalarField3D, params: SolvationParams,
                u_att: ScalarField3D, rho_m: ScalarField3D | None = None,
                dielectric_gradient_factor: float = 1.0) -> ScalarField3D:
    """Driving potential of the Laplace-Beltrami flow, literal form:

    V = -p + rho0 U - rho_m phi + f/2 (eps_m - eps_s) |grad phi|^2
        - kbt sum_i c_i (exp(-q_i phi / kbt) - 1)

    with f = dielectric_gradient_factor. S does not enter the formula; it is
    accepted to mirror the flow-update call signature.
    """
    del S
    g = phi.grid
    v = np.full(g.dims, -params.pressure)
    v += params.rho0 * u_att.values
    if rho_m is not None:
        v -= rho_m.values * phi.values
    gn2 = grad3d(phi).norm2()
    v += 0.5 * dielectric_gradient_factor * (params.epsilon_m - params.epsilon_s) * gn2
    for ion in params.ions:
        v -= params.kbt * ion.concentration * (
            _clamped_exp(-ion.charge * phi.values / params.kbt, params.boltzmann_clamp) - 1.0
        )
    return ScalarField3D(g, v)


def physical_potential_V(phi_kte: ScalarField3D, S: ScalarField3D,
                         params: SolvationParams, u_att: ScalarField3D,
                         rho_m: ScalarField3D) -> ScalarField3D:
    """V in kcal/mol/A^3 from the stored kT/e potential.

    Scales phi to energy units and normalizes the dielectric-pressure term
    by 1/(4 pi C) so that V equals -dG_tot/dS (without the curvature term).
    """
    phi_energy = ScalarField3D(phi_kte.grid, params.kbt * phi_kte.values)
    return potential_V(
        phi_energy, S, params, u_att, rho_m,
        dielectric_gradient_factor=1.0 / (4.0 * math.pi * params.coulomb),
    )


def total_energy(S: ScalarField3D, phi: ScalarField3D, params: SolvationParams,
                 u_att: ScalarField3D, rho_m: ScalarField3D,
                 g_ref: float = float("nan")) -> EnergyBreakdown:
    """All energy groups of the solvation functional by nodal quadrature.

    phi is the stored kT/e potential. The polar group is
    S rho_m kbt phi - (kbt^2 / 8 pi C) eps(S) |grad phi|^2; the ion group is
    -(1-S) kbt sum_i c_i (exp(-q_i phi) - 1).
    """
    g = S.grid
    vol = g.cell_volume
    Sv = S.values
    grad_s = grad3d(S).norm2()
    surface = params.gamma * float(np.sqrt(grad_s).sum()) * vol
    pressure = params.pressure * float(Sv.sum()) * vol
    dispersion = params.rho0 * float(((1.0 - Sv) * u_att.values).sum()) * vol

    eps = dielectric_of_S(S, params.epsilon_m, params.epsilon_s).values
    gn2 = grad3d(phi).norm2()
    coul_norm = params.kbt ** 2 / (8.0 * math.pi * params.coulomb)
    polar = float(
        (Sv * rho_m.values * params.kbt * phi.values - coul_norm * eps * gn2).sum()
    ) * vol

    ion = 0.0
    for sp in params.ions:
        ion -= params.kbt * sp.concentration * float(
            ((1.0 - Sv) * (_clamped_exp(-sp.charge * phi.values,
                                        params.boltzmann_clamp) - 1.0)).sum()
        ) * vol
    return EnergyBreakdown(surface, pressure, dispersion, polar, ion, g_ref=g_ref)


def lb_flow_step(S: ScalarField3D, V: ScalarField3D, gamma: float, dt: float,
                 eta: float | None = None,
                 core: ScalarField3D | None = None) -> ScalarField3D:
    """One explicit step of the generalized Laplace-Beltrami flow.

    S' = S + dt |grad S|_eta [ div(gamma grad S / |grad S|_eta) + V ],
    clamped back into [0, 1] and, when a solute core indicator is supplied,
    held at 1 inside the hard van der Waals region.
    """
    if gamma <= 0:
        raise ValueError("lb_flow_step needs gamma > 0")
    g = S.grid
    h = min(g.spacing)
    bound = h * h / (6.0 * gamma)
    if dt > bound * (1.0 + 1e-12):
        raise NumericalError(
            f"flow step dt={dt:g} violates the stability bound h^2/(6 gamma)={bound:g}"
        )
    if eta is None:
        eta = default_grad_eta(g)
    gv = grad3d(S)
    norm = np.sqrt(gv.norm2() + eta * eta)
    unit = VectorField3D(g, gamma * gv.values / norm[..., None])
    curv = div3d(unit).values
    new = S.values + dt * norm * (curv + V.values)
    np.clip(new, 0.0, 1.0, out=new)
    if core is not None:
        np.maximum(new, core.values, out=new)
    return ScalarField3D(g, new)


# ---------------------------------------------------------------------------
# solute geometry helpers


def sphere_surface_function(grid: Grid3D, center, radius: float,
                            width: float = 0.0) -> ScalarField3D:
    """Sphere indicator, sharp (width = 0) or tanh-smoothed over `width`."""
    x, y, z = grid.coords()
    d = radius - np.sqrt(
        (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2
    )
    if width <= 0:
        vals = (d >= 0).astype(np.float64)
    else:
        vals = 0.5 * (1.0 + np.tanh(d / width))
    return ScalarField3D(grid, np.broadcast_to(vals, grid.dims).copy())


def initial_surface_function(atoms: list[Atom], grid: Grid3D,
                             inflation: float = 1.4) -> ScalarField3D:
    """Smoothed indicator of the union of vdW spheres inflated by `inflation`."""
    h = min(grid.spacing)
    x, y, z = grid.coords()
    best = np.full(grid.dims, -np.inf)
    for atom in atoms:
        d = (atom.radius + inflation) - np.sqrt(
            (x - atom.position[0]) ** 2
            + (y - atom.position[1]) ** 2
            + (z - atom.position[2]) ** 2
        )
        np.maximum(best, d, out=best)
    return ScalarField3D(grid, 0.5 * (1.0 + np.tanh(best / (2.0 * h))))


def vdw_core_indicator(atoms: list[Atom], grid: Grid3D) -> ScalarField3D:
    """Sharp indicator of the union of vdW spheres (the flow's hard core)."""
    x, y, z = grid.coords()
    inside = np.zeros(grid.dims, dtype=bool)
    for atom in atoms:
        d2 = (
            (x - atom.position[0]) ** 2
            + (y - atom.position[1]) ** 2
            + (z - atom.position[2]) ** 2
        )
        inside |= d2 <= atom.radius ** 2
    return ScalarField3D(grid, inside.astype(np.float64))


def born_energy_analytic(charge: float, radius: float, epsilon_m: float,
                         epsilon_s: float, coulomb: float = COULOMB_KCAL_A_E2) -> float:
    """Closed-form Born solvation energy (kcal/mol)."""
    return -(coulomb * charge * charge / (2.0 * radius)) * (1.0 / epsilon_m - 1.0 / epsilon_s)


def electrostatic_solution_energy(S: ScalarField3D, phi: ScalarField3D,
                                  params: SolvationParams,
                                  rho_m: ScalarField3D) -> tuple[float, float]:
    """Polar and ion energies evaluated in the at-solution (half q phi) form.

    At a GPBE solution the energy functional collapses to
    (kbt/2) int S rho phi - kbt int (1-S) sum_i c_i [ (q_i/2) phi e^{-q_i phi}
    + e^{-q_i phi} - 1 ]. Unlike the raw functional, this form is free of the
    gradient-quadrature error on the singular self-field, so same-grid
    differences cancel the spread-charge self-energy cleanly.
    """
    vol = S.grid.cell_volume
    polar = 0.5 * params.kbt * float((S.values * rho_m.values * phi.values).sum()) * vol
    ion = 0.0
    for sp in params.ions:
        boltz = _clamped_exp(-sp.charge * phi.values, params.boltzmann_clamp)
        term = (sp.charge / 2.0) * phi.values * boltz + boltz - 1.0
        ion -= params.kbt * sp.concentration * float(
            ((1.0 - S.values) * term).sum()) * vol
    return polar, ion


def polar_solvation_energy(S: ScalarField3D, atoms: list[Atom],
                           params: SolvationParams, tol: float = 1e-8,
                           cg_tol: float = 1e-10) -> tuple[float, GpbeResult, GpbeResult]:
    """Polar (+ ionic) solvation energy as a same-grid solvated-vacuum difference.

    Both solves spread the charges identically and the energies use the
    at-solution form, so the divergent grid self-energy cancels in the
    difference (this is the Born-ion observable).
    """
    grid = S.grid
    rho = spread_charges(atoms, grid)

    bv = coulomb_boundary_values(atoms, grid, params)
    solv = solve_gpbe(S, rho, params, tol=tol, boundary_values=bv, cg_tol=cg_tol)
    polar_s, ion_s = electrostatic_solution_energy(S, solv.phi, params, rho)

    vac_params = replace(params, epsilon_m=1.0, epsilon_s=1.0, ions=())
    bv0 = coulomb_boundary_values(atoms, grid, vac_params, vacuum=True)
    vac = solve_gpbe(S, rho, vac_params, tol=tol, boundary_values=bv0, cg_tol=cg_tol)
    polar_v, _ = electrostatic_solution_energy(S, vac.phi, vac_params, rho)

    dg = (polar_s + ion_s) - polar_v
    return dg, solv, vac


# ---------------------------------------------------------------------------
# outer relaxation loop


@dataclass
class SolvateConfig:
    atoms: list[Atom]
    params: SolvationParams
    h: float = 0.5
    padding: float = 8.0
    inflation: float = 1.4
    n_flow: int = 50
    tol_g: float = 1e-4
    max_cycles: int = 200
    dt_fraction: float = 0.4     # of the h^2/(6 gamma) stability bound
    enforce_core: bool = True

    def __post_init__(self):
        if not self.atoms:
            raise ValueError("solvation needs at least one atom")
        if self.h <= 0 or self.padding < 0:
            raise ValueError("need h > 0 and padding >= 0")
        if self.padding < 8.0 - 1e-12:
            raise ValueError("domain padding below 8 A gives untrustworthy boundaries")
        if not (0 < self.dt_fraction <= 1.0):
            raise ValueError("dt_fraction must sit in (0, 1]")


def solvation_grid(cfg: SolvateConfig) -> Grid3D:
    """Grid hugging the atoms: origin = bbox_min - padding (translation covariant)."""
    pos = np.array([a.position for a in cfg.atoms])
    rad = np.array([a.radius for a in cfg.atoms])
    lo = (pos - rad[:, None]).min(axis=0) - cfg.padding
    hi = (pos + rad[:, None]).max(axis=0) + cfg.padding
    dims = tuple(int(np.ceil((hi[d] - lo[d]) / cfg.h)) + 1 for d in range(3))
    return Grid3D(tuple(lo), (cfg.h,) * 3, dims, Boundary.DIRICHLET_ZERO)


def run_solvation(cfg: SolvateConfig) -> SolvationState:
    """Alternate GPBE solves with Laplace-Beltrami flow until the energy settles.

    Reports dG = G_tot - G_0 where G_0 is the same-grid vacuum reference
    (eps = 1 everywhere, no ions, no nonpolar terms).
    """
    params = cfg.params
    grid = solvation_grid(cfg)
    rho = spread_charges(cfg.atoms, grid)
    u_att = build_vdw_attractive(cfg.atoms, grid)
    S = initial_surface_function(cfg.atoms, grid, cfg.inflation)
    core = vdw_core_indicator(cfg.atoms, grid) if cfg.enforce_core else None
    if core is not None:
        S = ScalarField3D(grid, np.maximum(S.values, core.values))

    if params.gamma <= 0:
        raise ValueError("run_solvation needs gamma > 0 to drive the flow")
    dt = cfg.dt_fraction * cfg.h * cfg.h / (6.0 * params.gamma)
    bv = coulomb_boundary_values(cfg.atoms, grid, params)

    phi = None
    trace: list[dict] = []
    prev_g = None
    converged = False
    cycles = 0
    dt_floor = 1e-6 * cfg.h * cfg.h / (6.0 * params.gamma)
    charged = any(a.charge != 0.0 for a in cfg.atoms)
    for cycle in range(1, cfg.max_cycles + 1):
        cycles = cycle
        if charged or params.ions:
            res = solve_gpbe(S, rho, params, phi_init=phi, boundary_values=bv)
            phi = res.phi
            gpbe_res = res.residuals[-1]
        else:
            phi = ScalarField3D.zeros(grid)
            gpbe_res = 0.0
        V = physical_potential_V(phi, S, params, u_att, rho)
        # retry the flow segment with halved dt until the energy does not rise;
        # only accepted segments are recorded, so the trace is non-increasing
        accepted = None
        while True:
            S_try = S
            for _ in range(cfg.n_flow):
                S_try = lb_flow_step(S_try, V, params.gamma, dt, core=core)
            e = total_energy(S_try, phi, params, u_att, rho)
            if prev_g is None or e.total <= prev_g + 1e-8 * abs(prev_g):
                accepted = (S_try, e)
                break
            if dt <= dt_floor:
                break
            dt = max(dt * 0.5, dt_floor)
        if accepted is None:
            # the flow can no longer lower the energy at this resolution
            converged = True
            break
        S, e = accepted
        trace.append({
            "t": float(cycle),
            "g_tot": e.total,
            "surface": e.surface,
            "pressure": e.pressure,
            "dispersion": e.dispersion,
            "polar": e.polar,
            "ion": e.ion,
            "gpbe_residual": gpbe_res,
            "flow_dt": dt,
        })
        if prev_g is not None and abs(e.total - prev_g) <= cfg.tol_g:
            prev_g = e.total
            converged = True
            break
        prev_g = e.total

    # vacuum reference on the identical grid with identical spreading; the
    # final breakdown reports polar/ion in the at-solution form so that
    # delta_g = total - g_ref is free of the spread-charge self-energy
    vac_params = replace(params, epsilon_m=1.0, epsilon_s=1.0, ions=())
    if charged:
        bv0 = coulomb_boundary_values(cfg.atoms, grid, vac_params, vacuum=True)
        vac = solve_gpbe(S, rho, vac_params, boundary_values=bv0)
        g0, _ = electrostatic_solution_energy(S, vac.phi, vac_params, rho)
        polar_s, ion_s = electrostatic_solution_energy(S, phi, params, rho)
    else:
        g0 = 0.0
        polar_s, ion_s = 0.0, 0.0
    e_func = total_energy(S, phi, params, u_att, rho)
    e = EnergyBreakdown(e_func.surface, e_func.pressure, e_func.dispersion,
                        polar_s, ion_s, g_ref=g0)
    return SolvationState(S, phi, e, trace, converged, cycles)
