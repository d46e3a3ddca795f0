"""Uniform 3D grids, nodal fields and the discrete operators built on them.

Fields live on the nodes of an axis-aligned uniform grid. Two boundary
closures are supported: periodic wrap-around and dirichlet_zero (the field
is extended by zero outside the grid for second-difference stencils, while
first derivatives fall back to one-sided second-order stencils so they stay
exact on linear fields).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sp_fft

from .errors import GridError

__all__ = [
    "Boundary",
    "Grid3D",
    "ScalarField3D",
    "VectorField3D",
    "grad3d",
    "div3d",
    "laplacian3d",
    "regularized_grad_norm",
    "spectral_helmholtz_solve",
]

# practical cap so a typo in dims cannot exhaust memory
_MAX_NODES = 1 << 29


class Boundary(enum.Enum):
    PERIODIC = "periodic"
    DIRICHLET_ZERO = "dirichlet_zero"


@dataclass(frozen=True)
class Grid3D:
    """Axis-aligned uniform grid: node i sits at origin + i * spacing."""

    origin: tuple[float, float, float]
    spacing: tuple[float, float, float]
    dims: tuple[int, int, int]
    boundary: Boundary = Boundary.PERIODIC

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))
        object.__setattr__(self, "spacing", tuple(float(h) for h in self.spacing))
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        if len(self.origin) != 3 or len(self.spacing) != 3 or len(self.dims) != 3:
            raise GridError("origin, spacing and dims must all have 3 entries")
        if any(h <= 0 for h in self.spacing):
            raise GridError(f"grid spacing must be positive, got {self.spacing}")
        if any(n < 4 for n in self.dims):
            raise GridError(f"grid needs at least 4 nodes per axis, got {self.dims}")
        if self.n_nodes > _MAX_NODES:
            raise GridError(f"grid with {self.n_nodes} nodes exceeds the addressable cap")
        if not isinstance(self.boundary, Boundary):
            object.__setattr__(self, "boundary", Boundary(self.boundary))

    @property
    def n_nodes(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def cell_volume(self) -> float:
        hx, hy, hz = self.spacing
        return hx * hy * hz

    def axis(self, d: int) -> np.ndarray:
        return self.origin[d] + self.spacing[d] * np.arange(self.dims[d])

    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Open (broadcastable) coordinate arrays (X, Y, Z)."""
        x = self.axis(0)[:, None, None]
        y = self.axis(1)[None, :, None]
        z = self.axis(2)[None, None, :]
        return x, y, z

    @classmethod
    def cube(cls, lo: float, hi: float, n: int,
             boundary: Boundary = Boundary.PERIODIC) -> "Grid3D":
        """Cubic grid on [lo, hi)^3 for periodic, [lo, hi]^3 for dirichlet."""
        if hi <= lo:
            raise GridError("cube needs hi > lo")
        if boundary == Boundary.PERIODIC:
            h = (hi - lo) / n
        else:
            h = (hi - lo) / (n - 1)
        return cls((lo, lo, lo), (h, h, h), (n, n, n), boundary)


def _check_values(grid: Grid3D, values: np.ndarray, ncomp: int | None) -> np.ndarray:
    shape = grid.dims if ncomp is None else grid.dims + (ncomp,)
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.shape != shape:
        raise GridError(f"field shape {arr.shape} does not match grid shape {shape}")
    if not np.all(np.isfinite(arr)):
        raise GridError("field contains non-finite values")
    return arr


@dataclass
class ScalarField3D:
    grid: Grid3D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = _check_values(self.grid, self.values, None)

    @classmethod
    def zeros(cls, grid: Grid3D) -> "ScalarField3D":
        return cls(grid, np.zeros(grid.dims))

    @classmethod
    def full(cls, grid: Grid3D, value: float) -> "ScalarField3D":
        return cls(grid, np.full(grid.dims, float(value)))

    @classmethod
    def from_function(cls, grid: Grid3D, fn) -> "ScalarField3D":
        x, y, z = grid.coords()
        return cls(grid, np.broadcast_to(fn(x, y, z), grid.dims).copy())

    def integral(self) -> float:
        """Midpoint (nodal-sum) quadrature over the grid."""
        return float(self.values.sum() * self.grid.cell_volume)

    def copy(self) -> "ScalarField3D":
        return ScalarField3D(self.grid, self.values.copy())


@dataclass
class VectorField3D:
    grid: Grid3D
    values: np.ndarray = field(repr=False)  # shape dims + (3,)

    def __post_init__(self):
        self.values = _check_values(self.grid, self.values, 3)

    def component(self, d: int) -> np.ndarray:
        return self.values[..., d]

    def norm2(self) -> np.ndarray:
        return np.einsum("...d,...d->...", self.values, self.values)


def _same_grid(a, b, what: str):
    if a.grid != b.grid:
        raise GridError(f"{what}: fields live on different grids")


def _deriv(values: np.ndarray, axis: int, h: float, boundary: Boundary) -> np.ndarray:
    """Second-order first derivative along one axis."""
    if boundary == Boundary.PERIODIC:
        return (np.roll(values, -1, axis) - np.roll(values, 1, axis)) / (2.0 * h)
    out = np.empty_like(values)
    mid = [slice(None)] * 3
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3

    def sl(spec):
        s = [slice(None)] * 3
        s[axis] = spec
        return tuple(s)

    mid = sl(slice(1, -1))
    out[mid] = (values[sl(slice(2, None))] - values[sl(slice(0, -2))]) / (2.0 * h)
    # one-sided second-order closures
    out[sl(0)] = (-3.0 * values[sl(0)] + 4.0 * values[sl(1)] - values[sl(2)]) / (2.0 * h)
    out[sl(-1)] = (3.0 * values[sl(-1)] - 4.0 * values[sl(-2)] + values[sl(-3)]) / (2.0 * h)
    del lo, hi
    return out


def _second_deriv(values: np.ndarray, axis: int, h: float, boundary: Boundary) -> np.ndarray:
    if boundary == Boundary.PERIODIC:
        return (np.roll(values, -1, axis) - 2.0 * values + np.roll(values, 1, axis)) / (h * h)

    def sl(spec):
        s = [slice(None)] * 3
        s[axis] = spec
        return tuple(s)

    out = np.empty_like(values)
    out[sl(slice(1, -1))] = (
        values[sl(slice(2, None))] - 2.0 * values[sl(slice(1, -1))] + values[sl(slice(0, -2))]
    ) / (h * h)
    # ghost nodes pinned to zero
    out[sl(0)] = (values[sl(1)] - 2.0 * values[sl(0)]) / (h * h)
    out[sl(-1)] = (values[sl(-2)] - 2.0 * values[sl(-1)]) / (h * h)
    return out


def grad3d(f: ScalarField3D) -> VectorField3D:
    """Central-difference gradient, one-sided at dirichlet_zero boundaries."""
    g = f.grid
    out = np.empty(g.dims + (3,))
    for d in range(3):
        out[..., d] = _deriv(f.values, d, g.spacing[d], g.boundary)
    return VectorField3D(g, out)


def div3d(F: VectorField3D) -> ScalarField3D:
    """Divergence with the same differencing as grad3d.

    On periodic grids this makes div the negative adjoint of grad, so the
    discrete integral of div F vanishes.
    """
    g = F.grid
    out = np.zeros(g.dims)
    for d in range(3):
        out += _deriv(F.values[..., d], d, g.spacing[d], g.boundary)
    return ScalarField3D(g, out)


def laplacian3d(f: ScalarField3D) -> ScalarField3D:
    """Compact 7-point Laplacian (nearest-neighbour second differences)."""
    g = f.grid
    out = np.zeros(g.dims)
    for d in range(3):
        out += _second_deriv(f.values, d, g.spacing[d], g.boundary)
    return ScalarField3D(g, out)


def regularized_grad_norm(f: ScalarField3D, eta: float) -> ScalarField3D:
    """sqrt(|grad f|^2 + eta^2), the regularised coarea integrand."""
    if eta < 0:
        raise GridError(f"regularisation eta must be >= 0, got {eta}")
    g2 = grad3d(f).norm2()
    return ScalarField3D(f.grid, np.sqrt(g2 + eta * eta))


def default_grad_eta(grid: Grid3D) -> float:
    """Default |grad S| regularisation: 1e-6 / h keeps curvature bounded on flats."""
    return 1e-6 / min(grid.spacing)


_symbol_cache: dict[tuple, np.ndarray] = {}


def _laplacian_symbol(grid: Grid3D) -> np.ndarray:
    """Eigenvalues of -laplacian3d in the real FFT basis (rfftn layout)."""
    key = (grid.dims, grid.spacing)
    sym = _symbol_cache.get(key)
    if sym is None:
        parts = []
        for d in range(3):
            n, h = grid.dims[d], grid.spacing[d]
            k = np.arange(n) if d < 2 else np.arange(n // 2 + 1)
            parts.append((2.0 - 2.0 * np.cos(2.0 * np.pi * k / n)) / (h * h))
        sym = (
            parts[0][:, None, None] + parts[1][None, :, None] + parts[2][None, None, :]
        )
        if len(_symbol_cache) > 16:
            _symbol_cache.clear()
        _symbol_cache[key] = sym
    return sym


def spectral_helmholtz_solve(rhs: ScalarField3D, a: float) -> ScalarField3D:
    """Solve (a I - lap) u = rhs exactly in the discrete Fourier basis.

    Uses the symbol of the compact 7-point Laplacian, so applying
    a*u - laplacian3d(u) reproduces rhs to round-off. For a == 0 the rhs
    must have zero mean and the returned u is the zero-mean solution.
    """
    g = rhs.grid
    if g.boundary != Boundary.PERIODIC:
        raise GridError("spectral_helmholtz_solve requires a periodic grid")
    if a < 0:
        raise GridError(f"helmholtz shift a must be >= 0, got {a}")
    sym = _laplacian_symbol(g)
    rhat = sp_fft.rfftn(rhs.values, workers=-1)
    if a == 0.0:
        scale = max(float(np.max(np.abs(rhs.values))), 1.0)
        mean = float(np.real(rhat[0, 0, 0])) / g.n_nodes
        if abs(mean) > 1e-10 * scale:
            raise GridError(
                f"a=0 requires zero-mean rhs (mean {mean:.3e} vs cap {1e-10 * scale:.3e})"
            )
        denom = sym.copy()
        denom[0, 0, 0] = 1.0
        rhat = rhat / denom
        rhat[0, 0, 0] = 0.0
    else:
        rhat = rhat / (a + sym)
    u = sp_fft.irfftn(rhat, s=g.dims, workers=-1)
    return ScalarField3D(g, u)
