"""Geodesic-curvature driven microdomain formation on closed surfaces.

The order parameter phi in [-1, 1] separates two lipid species on a fixed
triangulated surface. The driving functional penalizes deviation of the
domain-boundary geodesic curvature from a spontaneous value encoded by
H_c = sqrt(2) H_0:

    G(phi) = int (k eps / 2) (lap phi + (phi + H_c eps)(1 - phi^2)/eps^2)^2

Mass int phi is conserved through a Lagrange multiplier. Time stepping uses
the Crank-Nicolson averaging with an interior fixed-point iteration whose
only implicit term is the constant-coefficient biharmonic part, solved by
preconditioned CG. A Ginzburg-Landau / Allen-Cahn flow of the classical
double-well energy is kept alongside as the coarsening baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import MeshError, NumericalError
from .rng import substream
from .surface import SurfaceField, SurfaceMesh, surface_integral

__all__ = [
    "HybridLipidParams",
    "PatternParams",
    "PhaseState",
    "DomainCluster",
    "DomainReport",
    "spontaneous_geodesic_curvature",
    "hybrid_interface_energy",
    "ginzburg_landau_energy",
    "allen_cahn_step",
    "geodesic_energy",
    "geodesic_variation",
    "linear_nonlinear_split",
    "lagrange_multiplier",
    "cn_interior_step",
    "CnStepResult",
    "phase_to_geodesic_curvature",
    "kmeans_domain_analysis",
    "count_phase_components",
    "run_pattern_simulation",
]

PHI_CLAMP = 1.05
CURVATURE_BAND = 0.9


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class HybridLipidParams:
    """Geometry and packing costs of a two-species lipid mixture.

    Chain volumes V_i (nm^3), headgroup spacings w_i (nm), and the
    dimensionless mismatch-cost ratio B. Raw costs k_s, k_u, gamma_hyb and
    chain lengths feed the interface-energy evaluator.
    """

    v1: float
    v2: float
    w1: float
    w2: float
    b: float
    k_s: float = 0.0
    k_u: float = 0.0
    gamma_hyb: float = 0.0

    def __post_init__(self):
        if min(self.v1, self.v2) <= 0 or min(self.w1, self.w2) <= 0:
            raise ValueError("chain volumes and headgroup spacings must be positive")

    @property
    def w_total(self) -> float:
        return 0.5 * (self.w1 + self.w2)

    @property
    def w_diff(self) -> float:
        return self.w1 - self.w2

    @property
    def v_total(self) -> float:
        return 0.5 * (self.v1 + self.v2)

    @property
    def v_diff(self) -> float:
        return self.v1 - self.v2

    @property
    def hybrid_spacing(self) -> float:
        """a_0 = (w_1 + w_2)/2, headgroup spacing of hybrids at the interface."""
        return self.w_total

    def equilibrium_length(self, which: int) -> float:
        """Bulk chain length L_i^0 = V_i / w_i^2."""
        if which == 1:
            return self.v1 / (self.w1 * self.w1)
        if which == 2:
            return self.v2 / (self.w2 * self.w2)
        raise ValueError("species index must be 1 or 2")


@dataclass(frozen=True)
class PatternParams:
    eps: float                      # interface width
    k: float                        # curvature energy coefficient
    h_c: float                      # spontaneous term, H_c = sqrt(2) H_0
    dt: float
    eps_psi: float = 1e-6           # interior-iteration tolerance
    max_inner: int = 100
    sigma_gl: float = 0.01          # Ginzburg-Landau gradient coefficient
    seed: int = 0

    def __post_init__(self):
        if min(self.eps, self.k, self.dt, self.eps_psi, self.sigma_gl) <= 0:
            raise ValueError("eps, k, dt, eps_psi and sigma_gl must all be positive")


@dataclass
class PhaseState:
    mesh: SurfaceMesh
    phi: SurfaceField
    t: float
    trace: list[dict] = field(default_factory=list)

    @property
    def mass(self) -> float:
        return surface_integral(self.mesh, self.phi)


@dataclass
class DomainCluster:
    members: np.ndarray
    area: float
    centroid: np.ndarray
    radius: float


@dataclass
class DomainReport:
    clusters: list[DomainCluster]
    positive_area: float

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def radii(self) -> np.ndarray:
        return np.array([c.radius for c in self.clusters])

    @property
    def mean_radius(self) -> float:
        return float(self.radii.mean()) if self.clusters else float("nan")

    @property
    def area_weighted_mean_radius(self) -> float:
        if not self.clusters:
            return float("nan")
        areas = np.array([c.area for c in self.clusters])
        return float((self.radii * areas).sum() / areas.sum())

    @property
    def min_radius(self) -> float:
        return float(self.radii.min()) if self.clusters else float("nan")

    @property
    def max_radius(self) -> float:
        return float(self.radii.max()) if self.clusters else float("nan")


# ---------------------------------------------------------------------------
# hybrid-lipid spontaneous curvature


def spontaneous_geodesic_curvature(params: HybridLipidParams) -> float:
    """Linear-order minimizer H_0 of the hybrid packing energy.

    H_0 = (1/w_T) [ (1 - 2B) w_d / ((1 + 2B) w_T) + 2B V_d / ((1 + 2B) V_T) ].
    """
    wt, wd = params.w_total, params.w_diff
    vt, vd = params.v_total, params.v_diff
    b = params.b
    return (1.0 / wt) * (
        (1.0 - 2.0 * b) * wd / ((1.0 + 2.0 * b) * wt)
        + 2.0 * b * vd / ((1.0 + 2.0 * b) * vt)
    )


def hybrid_interface_energy(l1: float, l2: float, params: HybridLipidParams) -> float:
    """Packing energy k_s (L1-L1^0)^2 + k_u (L2-L2^0)^2 + gamma (L1-L2)^2."""
    if l1 <= 0 or l2 <= 0:
        raise ValueError("chain lengths must be positive")
    l1_0 = params.equilibrium_length(1)
    l2_0 = params.equilibrium_length(2)
    return (
        params.k_s * (l1 - l1_0) ** 2
        + params.k_u * (l2 - l2_0) ** 2
        + params.gamma_hyb * (l1 - l2) ** 2
    )


# ---------------------------------------------------------------------------
# energies and variations on the mesh


def _phi_values(phi) -> np.ndarray:
    return phi.values if isinstance(phi, SurfaceField) else np.asarray(phi, dtype=np.float64)


def _check_phi_bound(v: np.ndarray):
    if np.max(np.abs(v)) > PHI_CLAMP + 1e-12:
        raise ValueError(f"|phi| exceeds the {PHI_CLAMP} evaluation bound")


def _lap(mesh: SurfaceMesh, v: np.ndarray) -> np.ndarray:
    return (mesh.weak_laplacian @ v) / mesh.vertex_areas


def ginzburg_landau_energy(mesh: SurfaceMesh, phi, sigma_gl: float) -> float:
    """int f(phi) + (sigma/2) |grad phi|^2 with f = phi^4/4 - phi^2/2.

    The double well part uses lumped quadrature; the gradient part is the
    exact P1 weak form <phi, -M phi>.
    """
    v = _phi_values(phi)
    _check_phi_bound(v)
    f = 0.25 * v ** 4 - 0.5 * v ** 2
    bulk = float(mesh.vertex_areas @ f)
    grad = -float(v @ (mesh.weak_laplacian @ v))
    return bulk + 0.5 * sigma_gl * grad


def _gl_variation(mesh: SurfaceMesh, v: np.ndarray, sigma_gl: float) -> np.ndarray:
    return v ** 3 - v - sigma_gl * _lap(mesh, v)


def allen_cahn_step(mesh: SurfaceMesh, phi, sigma_gl: float, dt: float) -> SurfaceField:
    """Mass-conserving explicit Allen-Cahn step of the Ginzburg-Landau energy."""
    v = _phi_values(phi)
    lam_max = mesh.laplacian_gershgorin()
    dt_max = 2.0 / (sigma_gl * lam_max + 2.5)
    if dt > dt_max * (1.0 + 1e-12):
        raise NumericalError(
            f"Allen-Cahn dt={dt:g} above the explicit stability bound {dt_max:g}"
        )
    var = _gl_variation(mesh, v, sigma_gl)
    lam = float(mesh.vertex_areas @ var) / mesh.total_area
    new = v - dt * (var - lam)
    return _clamp_and_project(mesh, new, float(mesh.vertex_areas @ v))


def _clamp_and_project(mesh: SurfaceMesh, v: np.ndarray, target_mass: float) -> SurfaceField:
    # clamp guards the 1 - phi^2 factors; the uniform shift restores the mass
    # the clamp may have removed, keeping conservation exact
    np.clip(v, -PHI_CLAMP, PHI_CLAMP, out=v)
    v += (target_mass - float(mesh.vertex_areas @ v)) / mesh.total_area
    return SurfaceField(mesh, v)


def _w_field(mesh: SurfaceMesh, v: np.ndarray, p: PatternParams) -> np.ndarray:
    """W = eps lap phi - (phi + H_c eps)(phi^2 - 1)/eps."""
    return p.eps * _lap(mesh, v) - (v + p.h_c * p.eps) * (v * v - 1.0) / p.eps


def geodesic_energy(mesh: SurfaceMesh, phi, params: PatternParams) -> float:
    """G = int (k eps/2) (lap phi + (phi + H_c eps)(1 - phi^2)/eps^2)^2."""
    v = _phi_values(phi)
    _check_phi_bound(v)
    w = _w_field(mesh, v, params)
    # integrand equals (k / 2 eps) W^2
    return 0.5 * params.k / params.eps * float(mesh.vertex_areas @ (w * w))


def geodesic_variation(mesh: SurfaceMesh, phi, params: PatternParams) -> SurfaceField:
    """Exact discrete gradient of geodesic_energy in the area inner product:

    dG/dphi = k [ lap W - (3 phi^2 + 2 H_c eps phi - 1) W / eps^2 ].
    """
    v = _phi_values(phi)
    _check_phi_bound(v)
    w = _w_field(mesh, v, params)
    out = params.k * (
        _lap(mesh, w)
        - (3.0 * v * v + 2.0 * params.h_c * params.eps * v - 1.0) * w / params.eps ** 2
    )
    return SurfaceField(mesh, out)


def linear_nonlinear_split(mesh: SurfaceMesh, phi, params: PatternParams):
    """W = W_L + W_N with W_L = eps lap phi + phi/eps + H_c and
    W_N = -phi^3/eps - H_c phi^2 (the CN scheme updates them separately)."""
    v = _phi_values(phi)
    w_l = params.eps * _lap(mesh, v) + v / params.eps + params.h_c
    w_n = -(v ** 3) / params.eps - params.h_c * v * v
    return SurfaceField(mesh, w_l), SurfaceField(mesh, w_n)


def lagrange_multiplier(mesh: SurfaceMesh, variation) -> float:
    """Area-weighted mean of the variation: the conserved-flow multiplier."""
    v = _phi_values(variation)
    return float(mesh.vertex_areas @ v) / mesh.total_area


# ---------------------------------------------------------------------------
# Crank-Nicolson stepping with interior iteration


class _CnWorkspace:
    """Per-mesh sparse operators for the semi-implicit CN solve."""

    def __init__(self, mesh: SurfaceMesh):
        self.mesh = mesh
        self.areas = mesh.vertex_areas
        m = mesh.weak_laplacian
        inv_a = sparse.diags(1.0 / self.areas)
        self.biharmonic = (m @ inv_a @ m).tocsr()   # M A^-1 M, SPD
        self.bi_diag = self.biharmonic.diagonal()


def _cn_workspace(mesh: SurfaceMesh) -> _CnWorkspace:
    ws = getattr(mesh, "_cn_workspace", None)
    if ws is None:
        ws = _CnWorkspace(mesh)
        mesh._cn_workspace = ws
    return ws


def _pcg_spd(matvec, diag, b, x0, tol, max_iter=400):
    x = x0.copy()
    r = b - matvec(x)
    z = r / diag
    p = z.copy()
    rz = float(r @ z)
    bnorm = float(np.linalg.norm(b)) or 1.0
    for _ in range(max_iter):
        ap = matvec(p)
        alpha = rz / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= tol * bnorm:
            break
        z = r / diag
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


@dataclass
class CnStepResult:
    phi: SurfaceField
    inner_iterations: int
    converged: bool


def cn_interior_step(mesh: SurfaceMesh, phi_n, params: PatternParams,
                     dt: float | None = None, cg_tol: float = 1e-10) -> CnStepResult:
    """One conserved Crank-Nicolson step of the geodesic curvature flow.

    Interior iteration psi_m -> phi_{n+1}: the only implicit occurrence of
    psi_{m+1} is the constant-coefficient (k eps/2) lap^2 term, so each inner
    pass is one SPD sparse solve. The averaged nonlinearity follows

        f~_c = (eps/2) lap(psi_{m+1} + phi_n)
               - (1/4 eps)(psi_m^2 + phi_n^2 - 2)(psi_m + phi_n + 2 eps H_c)

    and the quadratic average multiplies (W(psi_m) + W(phi_n)), which makes
    every fixed point satisfy dG/dphi = lambda exactly. The multiplier is the
    area mean of the applied right-hand side, so each accepted step conserves
    the mass to solver tolerance.
    """
    if dt is None:
        dt = params.dt
    ws = _cn_workspace(mesh)
    areas, total_area = ws.areas, mesh.total_area
    v_n = _phi_values(phi_n)
    _check_phi_bound(v_n)
    k, eps, h_c = params.k, params.eps, params.h_c

    lap_phi_n = _lap(mesh, v_n)
    w_phi_n = eps * lap_phi_n - (v_n + h_c * eps) * (v_n * v_n - 1.0) / eps
    mass_n = float(areas @ v_n)

    c_bi = 0.5 * k * eps
    diag = areas / dt + c_bi * ws.bi_diag

    def matvec(x):
        return areas * x / dt + c_bi * (ws.biharmonic @ x)

    psi = v_n.copy()
    converged = False
    inner = 0
    for inner in range(1, params.max_inner + 1):
        w_psi = eps * _lap(mesh, psi) - (psi + h_c * eps) * (psi * psi - 1.0) / eps
        q = psi * psi + psi * v_n + v_n * v_n + eps * h_c * (psi + v_n) - 1.0
        g_nl = -(0.5 * k / eps ** 2) * q * (w_psi + w_phi_n)
        # explicit piece of f~_c (the psi_{m+1} Laplacian moved to the LHS)
        f_expl = 0.5 * eps * lap_phi_n \
            - (0.25 / eps) * (psi * psi + v_n * v_n - 2.0) * (psi + v_n + 2.0 * eps * h_c)
        g_expl = k * _lap(mesh, f_expl) + g_nl
        lam = float(areas @ g_expl) / total_area
        rhs = v_n / dt + lam - g_expl
        new = _pcg_spd(matvec, diag, areas * rhs, psi, cg_tol)
        delta = float(np.max(np.abs(new - psi)))
        psi = new
        if delta <= params.eps_psi:
            converged = True
            break
    return CnStepResult(_clamp_and_project(mesh, psi, mass_n), inner, converged)


# ---------------------------------------------------------------------------
# curvature extraction and domain analysis


def phase_to_geodesic_curvature(mesh: SurfaceMesh, phi, eps: float):
    """Per-vertex geodesic curvature estimate on the |phi| <= 0.9 band.

    H = sqrt(2) eps / (1 - phi^2) * (lap phi + phi (1 - phi^2) / eps^2)
    with the denominator guarded by max(1 - phi^2, 0.01). Off-band vertices
    carry NaN. Returns (curvature values, band mask).
    """
    v = _phi_values(phi)
    lap = _lap(mesh, v)
    one_m = np.maximum(1.0 - v * v, 0.01)
    h = math.sqrt(2.0) * eps / one_m * (lap + v * (1.0 - v * v) / eps ** 2)
    band = np.abs(v) <= CURVATURE_BAND
    h = np.where(band, h, np.nan)
    return h, band


def interface_weighted_mean(mesh: SurfaceMesh, values: np.ndarray,
                            phi, band: np.ndarray) -> float:
    """Band statistic weighted by (1 - phi^2)^2: concentrates on the contour."""
    v = _phi_values(phi)
    w = np.where(band, (1.0 - v * v) ** 2 * mesh.vertex_areas, 0.0)
    total = float(w.sum())
    if total == 0.0:
        raise MeshError("no band vertices to average over")
    return float(np.nansum(w * values) / total)


def count_phase_components(mesh: SurfaceMesh, phi, min_vertices: int = 3) -> int:
    """Connected components of the phi > 0 vertex subgraph (noise filtered)."""
    v = _phi_values(phi)
    sel = np.where(v > 0.0)[0]
    if len(sel) == 0:
        raise MeshError("no vertices with phi > 0")
    sub = mesh.vertex_adjacency()[np.ix_(sel, sel)]
    n, labels = csgraph.connected_components(sub, directed=False)
    sizes = np.bincount(labels)
    return max(1, int((sizes >= min_vertices).sum()))


def _kmeans_pp_init(pts, weights, k, rng):
    idx = [rng.choice(len(pts), p=weights / weights.sum())]
    d2 = np.sum((pts - pts[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        p = weights * d2
        total = p.sum()
        if total <= 0:
            idx.append(int(rng.integers(len(pts))))
        else:
            idx.append(int(rng.choice(len(pts), p=p / total)))
        d2 = np.minimum(d2, np.sum((pts - pts[idx[-1]]) ** 2, axis=1))
    return pts[idx].copy()


def _lloyd(pts, weights, centers, max_iter=200):
    k = len(centers)
    labels = None
    for _ in range(max_iter):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            m = labels == j
            if not m.any():
                # reseed an empty cluster at the farthest point
                far = d2.min(axis=1).argmax()
                centers[j] = pts[far]
            else:
                w = weights[m]
                centers[j] = (pts[m] * w[:, None]).sum(axis=0) / w.sum()
    return labels, centers


def _mean_silhouette(pts, labels, k):
    if k < 2:
        return -1.0
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    n = len(pts)
    sil = np.zeros(n)
    for i in range(n):
        same = labels == labels[i]
        same[i] = False
        a = d[i, same].mean() if same.any() else 0.0
        b = np.inf
        for j in range(k):
            if j == labels[i]:
                continue
            other = labels == j
            if other.any():
                b = min(b, d[i, other].mean())
        sil[i] = 0.0 if max(a, b) == 0 else (b - a) / max(a, b)
    return float(sil.mean())


def kmeans_domain_analysis(mesh: SurfaceMesh, phi, k_clusters=None,
                           rng: np.random.Generator | None = None) -> DomainReport:
    """K-means over the 3D coordinates of phi > 0 vertices.

    k_clusters: an int, "components" (connected components of the positive
    region) or None/"silhouette" (largest mean silhouette over k in [2, 12]).
    Cluster radius is the flat-disk estimate sqrt(area / pi) from the lumped
    areas of member vertices.
    """
    v = _phi_values(phi)
    sel = np.where(v > 0.0)[0]
    if len(sel) == 0:
        raise MeshError("domain analysis needs at least one vertex with phi > 0")
    if rng is None:
        rng = substream(0, "kmeans")
    pts = mesh.vertices[sel]
    weights = mesh.vertex_areas[sel]
    pos_area = float(weights.sum())

    if k_clusters == "components":
        k = min(count_phase_components(mesh, phi), len(sel))
    elif k_clusters in (None, "silhouette"):
        best_k, best_s = 1, -np.inf
        # silhouette on a bounded subsample keeps the scan O(k n^2) tame
        if len(sel) > 1500:
            sub = rng.choice(len(sel), 1500, replace=False)
        else:
            sub = np.arange(len(sel))
        for k_try in range(2, min(12, len(sel) - 1) + 1):
            centers = _kmeans_pp_init(pts, weights, k_try, rng)
            labels, centers = _lloyd(pts, weights, centers)
            s = _mean_silhouette(pts[sub], labels[sub], k_try)
            if s > best_s:
                best_k, best_s = k_try, s
        k = best_k
    else:
        k = int(k_clusters)
        if not (1 <= k <= len(sel)):
            raise ValueError(f"k_clusters must lie in [1, {len(sel)}], got {k}")

    if k == 1:
        labels = np.zeros(len(sel), dtype=int)
        w = weights
        centers = np.array([(pts * w[:, None]).sum(axis=0) / w.sum()])
    else:
        centers = _kmeans_pp_init(pts, weights, k, rng)
        labels, centers = _lloyd(pts, weights, centers)

    clusters = []
    for j in range(k):
        m = labels == j
        if not m.any():
            continue
        area = float(weights[m].sum())
        clusters.append(DomainCluster(
            members=sel[m],
            area=area,
            centroid=centers[j].copy(),
            radius=math.sqrt(area / math.pi),
        ))
    clusters.sort(key=lambda c: -c.area)
    return DomainReport(clusters, pos_area)


# ---------------------------------------------------------------------------
# simulation driver


def run_pattern_simulation(mesh: SurfaceMesh, params: PatternParams, model: str,
                           t_end: float, k_clusters=None,
                           record_every: int = 1) -> tuple[PhaseState, DomainReport]:
    """Evolve a zero-mean random field to t_end and analyse the domains.

    model is "geodesic" (CN interior stepping of the curvature energy) or
    "ginzburg_landau" (explicit conserved Allen-Cahn). Steps that would raise
    the model energy beyond G + 1e-8 |G| are retried with a halved dt; the
    accepted trace is therefore non-increasing and mass stays constant.
    """
    if model not in ("geodesic", "ginzburg_landau"):
        raise ValueError(f"unknown pattern model {model!r}")
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    rng = substream(params.seed, "initial_field")
    v0 = rng.uniform(-0.1, 0.1, mesh.n_vertices)
    v0 -= float(mesh.vertex_areas @ v0) / mesh.total_area
    phi = SurfaceField(mesh, v0)

    def energy(p):
        if model == "geodesic":
            return geodesic_energy(mesh, p, params)
        return ginzburg_landau_energy(mesh, p, params.sigma_gl)

    state = PhaseState(mesh, phi, 0.0)
    g = energy(phi)
    mass0 = state.mass
    state.trace.append({"t": 0.0, "g": g, "mass": mass0, "inner": 0})
    dt0 = params.dt
    dt = dt0
    t = 0.0
    accepts_at_dt = 0
    step_index = 0
    while t < t_end - 1e-12:
        dt_step = min(dt, t_end - t)
        attempts = 0
        while True:
            if model == "geodesic":
                res = cn_interior_step(mesh, state.phi, params, dt=dt_step)
                cand, inner = res.phi, res.inner_iterations
            else:
                cand, inner = allen_cahn_step(mesh, state.phi, params.sigma_gl, dt_step), 0
            g_new = energy(cand)
            if g_new <= g + 1e-8 * abs(g):
                break
            attempts += 1
            dt = dt_step = dt_step * 0.5
            accepts_at_dt = 0
            if attempts > 40:
                raise NumericalError(
                    f"energy would not decrease at t={t:g} even at dt={dt_step:g}"
                )
        state.phi = cand
        t += dt_step
        g = g_new
        step_index += 1
        accepts_at_dt += 1
        if dt < dt0 and accepts_at_dt >= 5:
            dt = min(dt0, 2.0 * dt)
            accepts_at_dt = 0
        if step_index % record_every == 0 or t >= t_end - 1e-12:
            state.trace.append({"t": t, "g": g, "mass": state.mass, "inner": inner})
    state.t = t
    report = kmeans_domain_analysis(mesh, state.phi, k_clusters,
                                    rng=substream(params.seed, "kmeans"))
    return state, report
