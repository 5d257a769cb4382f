"""Marker-and-cell discretization of the unit square.

Layout for an ``nx x ny`` cell grid with spacing ``h``::

    p[i, j]   cell centers       ((i+1/2)h, (j+1/2)h)   shape (nx, ny)
    u[i, j]   vertical faces     (i h, (j+1/2)h)         shape (nx+1, ny)
    v[i, j]   horizontal faces   ((i+1/2)h, j h)         shape (nx, ny+1)
    nodes     cell corners       (i h, j h)              shape (nx+1, ny+1)

Normal velocities on the boundary live in the first/last face of ``u`` and
``v``. Tangential wall values (``u`` along the bottom/top wall, ``v`` along
the left/right wall) are stored at the wall nodes.

Tensor fields keep diagonal entries at cell centers and off-diagonal entries
at nodes. Node quadrature uses the dual cell: ``h^2`` inside, ``h^2/2`` on
edges and ``h^2/4`` at corners.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constitutive import StressModel, eval_stress
from .weights import GridField, face_weights, node_weights


@dataclass(frozen=True)
class MacGrid:
    nx: int
    ny: int | None = None
    width: float = 1.0

    def __post_init__(self):
        if self.ny is None:
            object.__setattr__(self, "ny", self.nx)
        if self.nx < 4 or self.ny < 4:
            raise ValueError("MAC grids need at least 4 cells per direction")

    @property
    def h(self) -> float:
        return self.width / self.nx

    @property
    def height(self) -> float:
        return self.h * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    def xc(self):
        return (np.arange(self.nx) + 0.5) * self.h

    def yc(self):
        return (np.arange(self.ny) + 0.5) * self.h

    def xn(self):
        return np.arange(self.nx + 1) * self.h

    def yn(self):
        return np.arange(self.ny + 1) * self.h

    def centers(self):
        return np.meshgrid(self.xc(), self.yc(), indexing="ij")

    def nodes(self):
        return np.meshgrid(self.xn(), self.yn(), indexing="ij")

    def u_faces(self):
        return np.meshgrid(self.xn(), self.yc(), indexing="ij")

    def v_faces(self):
        return np.meshgrid(self.xc(), self.yn(), indexing="ij")

    @cached_property
    def node_volume(self) -> np.ndarray:
        w = np.full((self.nx + 1, self.ny + 1), self.h ** 2)
        w[0, :] *= 0.5
        w[-1, :] *= 0.5
        w[:, 0] *= 0.5
        w[:, -1] *= 0.5
        return w

    def u_volume(self) -> np.ndarray:
        w = np.full((self.nx + 1, self.ny), self.h ** 2)
        w[0, :] *= 0.5
        w[-1, :] *= 0.5
        return w

    def v_volume(self) -> np.ndarray:
        w = np.full((self.nx, self.ny + 1), self.h ** 2)
        w[:, 0] *= 0.5
        w[:, -1] *= 0.5
        return w

    def cell_field(self, values) -> GridField:
        return GridField(values, self.h, (0.0, 0.0))

    @cached_property
    def ops(self) -> "MacOperators":
        return MacOperators(self)


def cell_mean_of_nodes(a: np.ndarray) -> np.ndarray:
    return 0.25 * (a[:-1, :-1] + a[1:, :-1] + a[:-1, 1:] + a[1:, 1:])


# -- fields ---------------------------------------------------------------------


@dataclass
class BoundaryTrace:
    """Velocity prescribed on the boundary of the square.

    Normal components sit at the boundary faces, tangential components at the
    wall nodes.
    """

    u_left: np.ndarray
    u_right: np.ndarray
    v_bottom: np.ndarray
    v_top: np.ndarray
    u_bottom: np.ndarray
    u_top: np.ndarray
    v_left: np.ndarray
    v_right: np.ndarray

    @classmethod
    def zero(cls, grid: MacGrid) -> "BoundaryTrace":
        nx, ny = grid.shape
        z = np.zeros
        return cls(z(ny), z(ny), z(nx), z(nx), z(nx + 1), z(nx + 1), z(ny + 1), z(ny + 1))

    @classmethod
    def from_function(cls, grid: MacGrid, fn: Callable) -> "BoundaryTrace":
        """Sample ``fn(x, y) -> (u, v)`` on the boundary."""
        xc, yc, xn, yn = grid.xc(), grid.yc(), grid.xn(), grid.yn()
        W, H = grid.width, grid.height
        return cls(
            u_left=np.asarray(fn(0.0 * yc, yc)[0], float),
            u_right=np.asarray(fn(W + 0.0 * yc, yc)[0], float),
            v_bottom=np.asarray(fn(xc, 0.0 * xc)[1], float),
            v_top=np.asarray(fn(xc, H + 0.0 * xc)[1], float),
            u_bottom=np.asarray(fn(xn, 0.0 * xn)[0], float),
            u_top=np.asarray(fn(xn, H + 0.0 * xn)[0], float),
            v_left=np.asarray(fn(0.0 * yn, yn)[1], float),
            v_right=np.asarray(fn(W + 0.0 * yn, yn)[1], float),
        )

    def net_flux(self, h: float) -> float:
        """``oint g.n`` by the midpoint rule on boundary faces."""
        return h * float(np.sum(self.u_right) - np.sum(self.u_left)
                         + np.sum(self.v_top) - np.sum(self.v_bottom))

    def is_zero(self) -> bool:
        return all(not np.any(a) for a in self.arrays())

    def arrays(self):
        return (self.u_left, self.u_right, self.v_bottom, self.v_top,
                self.u_bottom, self.u_top, self.v_left, self.v_right)


@dataclass
class StaggeredVelocity:
    grid: MacGrid
    u: np.ndarray
    v: np.ndarray
    u_bottom: np.ndarray | None = None
    u_top: np.ndarray | None = None
    v_left: np.ndarray | None = None
    v_right: np.ndarray | None = None

    def __post_init__(self):
        nx, ny = self.grid.shape
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.u.shape != (nx + 1, ny) or self.v.shape != (nx, ny + 1):
            raise ValueError("velocity arrays do not match the grid")
        for name, n in (("u_bottom", nx + 1), ("u_top", nx + 1), ("v_left", ny + 1), ("v_right", ny + 1)):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(n))

    @classmethod
    def zeros(cls, grid: MacGrid) -> "StaggeredVelocity":
        return cls(grid, np.zeros((grid.nx + 1, grid.ny)), np.zeros((grid.nx, grid.ny + 1)))

    @classmethod
    def from_function(cls, grid: MacGrid, fn: Callable) -> "StaggeredVelocity":
        """Point samples of ``fn(x, y) -> (u, v)`` at faces and wall nodes."""
        xu, yu = grid.u_faces()
        xv, yv = grid.v_faces()
        tr = BoundaryTrace.from_function(grid, fn)
        return cls(grid, fn(xu, yu)[0], fn(xv, yv)[1], tr.u_bottom, tr.u_top, tr.v_left, tr.v_right)

    def with_trace(self, trace: BoundaryTrace) -> "StaggeredVelocity":
        u, v = self.u.copy(), self.v.copy()
        u[0, :], u[-1, :] = trace.u_left, trace.u_right
        v[:, 0], v[:, -1] = trace.v_bottom, trace.v_top
        return StaggeredVelocity(self.grid, u, v, trace.u_bottom.copy(), trace.u_top.copy(),
                                 trace.v_left.copy(), trace.v_right.copy())

    def trace(self) -> BoundaryTrace:
        return BoundaryTrace(self.u[0].copy(), self.u[-1].copy(), self.v[:, 0].copy(),
                             self.v[:, -1].copy(), self.u_bottom.copy(), self.u_top.copy(),
                             self.v_left.copy(), self.v_right.copy())

    def copy(self) -> "StaggeredVelocity":
        return StaggeredVelocity(self.grid, self.u.copy(), self.v.copy(), self.u_bottom.copy(),
                                 self.u_top.copy(), self.v_left.copy(), self.v_right.copy())

    def __sub__(self, other: "StaggeredVelocity") -> "StaggeredVelocity":
        return StaggeredVelocity(self.grid, self.u - other.u, self.v - other.v,
                                 self.u_bottom - other.u_bottom, self.u_top - other.u_top,
                                 self.v_left - other.v_left, self.v_right - other.v_right)

    def __add__(self, other: "StaggeredVelocity") -> "StaggeredVelocity":
        return StaggeredVelocity(self.grid, self.u + other.u, self.v + other.v,
                                 self.u_bottom + other.u_bottom, self.u_top + other.u_top,
                                 self.v_left + other.v_left, self.v_right + other.v_right)

    def scaled(self, a: float) -> "StaggeredVelocity":
        return StaggeredVelocity(self.grid, a * self.u, a * self.v, a * self.u_bottom,
                                 a * self.u_top, a * self.v_left, a * self.v_right)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.u.ravel(), self.v.ravel(), self.u_bottom, self.u_top,
                               self.v_left, self.v_right])

    @classmethod
    def from_vector(cls, grid: MacGrid, x: np.ndarray) -> "StaggeredVelocity":
        nx, ny = grid.shape
        sizes = [(nx + 1) * ny, nx * (ny + 1), nx + 1, nx + 1, ny + 1, ny + 1]
        parts = np.split(np.asarray(x, float), np.cumsum(sizes)[:-1])
        return cls(grid, parts[0].reshape(nx + 1, ny), parts[1].reshape(nx, ny + 1), *parts[2:])

    def lp_power_sum(self, cell_weight, p: float) -> float:
        g = self.grid
        wu = g.u_volume() * (1.0 if cell_weight is None else face_weights(cell_weight, 0))
        wv = g.v_volume() * (1.0 if cell_weight is None else face_weights(cell_weight, 1))
        return float(np.sum(np.abs(self.u) ** p * wu) + np.sum(np.abs(self.v) ** p * wv))

    def l2_error(self, other: "StaggeredVelocity") -> float:
        d = self - other
        return d.lp_power_sum(None, 2.0) ** 0.5


@dataclass
class StaggeredTensor:
    """2x2 tensor field: ``xx``, ``yy`` at cell centers; ``xy``, ``yx`` at nodes.

    ``xy`` is row 1, column 2, i.e. ``d u / d y`` for a velocity gradient.
    """

    grid: MacGrid
    xx: np.ndarray
    yy: np.ndarray
    xy: np.ndarray
    yx: np.ndarray

    @classmethod
    def zeros(cls, grid: MacGrid) -> "StaggeredTensor":
        c = np.zeros(grid.shape)
        n = np.zeros((grid.nx + 1, grid.ny + 1))
        return cls(grid, c, c.copy(), n, n.copy())

    @classmethod
    def from_function(cls, grid: MacGrid, fn: Callable) -> "StaggeredTensor":
        """Sample ``fn(x, y) -> array (..., 2, 2)`` at the native locations."""
        Tc = fn(*grid.centers())
        Tn = fn(*grid.nodes())
        return cls(grid, Tc[..., 0, 0], Tc[..., 1, 1], Tn[..., 0, 1], Tn[..., 1, 0])

    def copy(self) -> "StaggeredTensor":
        return StaggeredTensor(self.grid, self.xx.copy(), self.yy.copy(), self.xy.copy(), self.yx.copy())

    def __add__(self, o):
        return StaggeredTensor(self.grid, self.xx + o.xx, self.yy + o.yy, self.xy + o.xy, self.yx + o.yx)

    def __sub__(self, o):
        return StaggeredTensor(self.grid, self.xx - o.xx, self.yy - o.yy, self.xy - o.xy, self.yx - o.yx)

    def scaled(self, a: float) -> "StaggeredTensor":
        return StaggeredTensor(self.grid, a * self.xx, a * self.yy, a * self.xy, a * self.yx)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.xx.ravel(), self.yy.ravel(), self.xy.ravel(), self.yx.ravel()])

    @classmethod
    def from_vector(cls, grid: MacGrid, x) -> "StaggeredTensor":
        nc = grid.nx * grid.ny
        nn = (grid.nx + 1) * (grid.ny + 1)
        a, b, c, d = np.split(np.asarray(x, float), [nc, 2 * nc, 2 * nc + nn])
        return cls(grid, a.reshape(grid.shape), b.reshape(grid.shape),
                   c.reshape(grid.nx + 1, grid.ny + 1), d.reshape(grid.nx + 1, grid.ny + 1))

    def node_squares(self) -> np.ndarray:
        return self.xy ** 2 + self.yx ** 2

    def magnitude(self) -> GridField:
        """Pointwise Frobenius norm at cell centers (node entries averaged in square)."""
        sq = self.xx ** 2 + self.yy ** 2 + cell_mean_of_nodes(self.node_squares())
        return self.grid.cell_field(np.sqrt(sq))

    def node_magnitude(self) -> np.ndarray:
        sq = self.node_squares() + node_weights(self.xx ** 2 + self.yy ** 2)
        return np.sqrt(sq)

    def trace(self) -> GridField:
        return self.grid.cell_field(self.xx + self.yy)

    def lp_power_sum(self, cell_weight, p: float) -> float:
        mag = self.magnitude().values
        w = 1.0 if cell_weight is None else cell_weight
        return float(np.sum(mag ** p * w) * self.grid.h ** 2)

    def max_abs(self) -> float:
        return float(max(np.max(np.abs(a)) for a in (self.xx, self.yy, self.xy, self.yx)))


ForcingField = StaggeredTensor


def zero_mean(p: np.ndarray) -> np.ndarray:
    return p - np.mean(p)


# -- operators --------------------------------------------------------------------


class MacOperators:
    """Sparse difference operators acting on the extended velocity vector.

    The extended vector (see :meth:`StaggeredVelocity.to_vector`) holds all
    face values followed by the tangential wall values, so one matrix covers
    interior unknowns and boundary data alike.
    """

    def __init__(self, grid: MacGrid):
        self.grid = grid
        nx, ny = grid.shape
        self.nu = (nx + 1) * ny
        self.nv = nx * (ny + 1)
        self.nc = nx * ny
        self.nn = (nx + 1) * (ny + 1)
        off = self.nu + self.nv
        self.off_ub = off
        self.off_ut = off + nx + 1
        self.off_vl = off + 2 * (nx + 1)
        self.off_vr = off + 2 * (nx + 1) + ny + 1
        self.nx_ext = off + 2 * (nx + 1) + 2 * (ny + 1)

        interior = np.zeros(self.nx_ext, dtype=bool)
        iu = np.zeros((nx + 1, ny), dtype=bool)
        iu[1:-1, :] = True
        iv = np.zeros((nx, ny + 1), dtype=bool)
        iv[:, 1:-1] = True
        interior[: self.nu] = iu.ravel()
        interior[self.nu: off] = iv.ravel()
        self.interior = np.flatnonzero(interior)
        self.boundary = np.flatnonzero(~interior)
        self.interior_u = np.flatnonzero(iu.ravel())
        self.interior_v = self.nu + np.flatnonzero(iv.ravel())

    def _iu(self, i, j):
        return i * self.grid.ny + j

    def _iv(self, i, j):
        return self.nu + i * (self.grid.ny + 1) + j

    @cached_property
    def du_dx(self) -> sp.csr_matrix:
        nx, ny = self.grid.shape
        I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        rows = (I * ny + J).ravel()
        return self._assemble(self.nc, [(rows, self._iu(I + 1, J).ravel(), 1.0),
                                        (rows, self._iu(I, J).ravel(), -1.0)])

    @cached_property
    def dv_dy(self) -> sp.csr_matrix:
        nx, ny = self.grid.shape
        I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        rows = (I * ny + J).ravel()
        return self._assemble(self.nc, [(rows, self._iv(I, J + 1).ravel(), 1.0),
                                        (rows, self._iv(I, J).ravel(), -1.0)])

    @cached_property
    def du_dy(self) -> sp.csr_matrix:
        nx, ny = self.grid.shape
        entries = []
        node = lambda i, j: i * (ny + 1) + j  # noqa: E731
        I, J = np.meshgrid(np.arange(nx + 1), np.arange(1, ny), indexing="ij")
        r = node(I, J).ravel()
        entries += [(r, self._iu(I, J).ravel(), 1.0), (r, self._iu(I, J - 1).ravel(), -1.0)]
        i = np.arange(nx + 1)
        r0, r1 = node(i, 0), node(i, ny)
        entries += [(r0, self._iu(i, 0), 2.0), (r0, self.off_ub + i, -2.0)]
        entries += [(r1, self.off_ut + i, 2.0), (r1, self._iu(i, ny - 1), -2.0)]
        return self._assemble(self.nn, entries)

    @cached_property
    def dv_dx(self) -> sp.csr_matrix:
        nx, ny = self.grid.shape
        entries = []
        node = lambda i, j: i * (ny + 1) + j  # noqa: E731
        I, J = np.meshgrid(np.arange(1, nx), np.arange(ny + 1), indexing="ij")
        r = node(I, J).ravel()
        entries += [(r, self._iv(I, J).ravel(), 1.0), (r, self._iv(I - 1, J).ravel(), -1.0)]
        j = np.arange(ny + 1)
        r0, r1 = node(0, j), node(nx, j)
        entries += [(r0, self._iv(0, j), 2.0), (r0, self.off_vl + j, -2.0)]
        entries += [(r1, self.off_vr + j, 2.0), (r1, self._iv(nx - 1, j), -2.0)]
        return self._assemble(self.nn, entries)

    def _assemble(self, nrows, entries) -> sp.csr_matrix:
        rows = np.concatenate([np.ravel(r) for r, _, _ in entries])
        cols = np.concatenate([np.ravel(c) for _, c, _ in entries])
        vals = np.concatenate([np.full(np.size(r), v) for r, _, v in entries])
        return sp.csr_matrix((vals / self.grid.h, (rows, cols)), shape=(nrows, self.nx_ext))

    @cached_property
    def gradient(self) -> sp.csr_matrix:
        """Rows: ``du/dx``, ``dv/dy`` (centers), ``du/dy``, ``dv/dx`` (nodes)."""
        return sp.vstack([self.du_dx, self.dv_dy, self.du_dy, self.dv_dx]).tocsr()

    @cached_property
    def strain(self) -> sp.csr_matrix:
        """Rows: ``e11``, ``e22`` (centers), ``e12`` (nodes)."""
        return sp.vstack([self.du_dx, self.dv_dy, 0.5 * (self.du_dy + self.dv_dx)]).tocsr()

    @cached_property
    def divergence(self) -> sp.csr_matrix:
        return (self.du_dx + self.dv_dy).tocsr()

    @cached_property
    def gradient_quadrature(self) -> np.ndarray:
        h2 = self.grid.h ** 2
        nv = self.grid.node_volume.ravel()
        return np.concatenate([np.full(2 * self.nc, h2), nv, nv])

    @cached_property
    def strain_quadrature(self) -> np.ndarray:
        """Pairing weights for ``S:E = S11 E11 + S22 E22 + 2 S12 E12``."""
        h2 = self.grid.h ** 2
        return np.concatenate([np.full(2 * self.nc, h2), 2.0 * self.grid.node_volume.ravel()])

    @cached_property
    def viscous(self) -> sp.csr_matrix:
        """Unit-viscosity form ``sum e(w):e(phi)`` on the extended vector."""
        E = self.strain
        return (E.T @ sp.diags(self.strain_quadrature) @ E).tocsr()

    def strain_vector(self, x: np.ndarray) -> np.ndarray:
        return self.strain @ x

    def load_vector(self, F: StaggeredTensor) -> np.ndarray:
        """``sum F : grad(phi)`` for every velocity unit vector ``phi``."""
        return self.gradient.T @ (self.gradient_quadrature * F.to_vector())

    def stress_load(self, S: np.ndarray) -> np.ndarray:
        """``sum S : e(phi)`` for a symmetric tensor given as a strain-layout vector."""
        return self.strain.T @ (self.strain_quadrature * S)


def discrete_gradient(vel: StaggeredVelocity) -> StaggeredTensor:
    G = vel.grid.ops.gradient @ vel.to_vector()
    return StaggeredTensor.from_vector(vel.grid, G)


def discrete_sym_gradient(vel: StaggeredVelocity) -> StaggeredTensor:
    """Symmetric part of the discrete gradient; exact on affine fields."""
    g = vel.grid
    e = g.ops.strain @ vel.to_vector()
    nc = g.nx * g.ny
    e12 = e[2 * nc:].reshape(g.nx + 1, g.ny + 1)
    return StaggeredTensor(g, e[:nc].reshape(g.shape), e[nc:2 * nc].reshape(g.shape), e12, e12.copy())


def discrete_divergence(vel: StaggeredVelocity) -> GridField:
    g = vel.grid
    return g.cell_field((g.ops.divergence @ vel.to_vector()).reshape(g.shape))


def pressure_gradient(grid: MacGrid, p: np.ndarray) -> StaggeredVelocity:
    """Face differences of a cell field; zero on boundary faces."""
    h = grid.h
    u = np.zeros((grid.nx + 1, grid.ny))
    v = np.zeros((grid.nx, grid.ny + 1))
    u[1:-1, :] = (p[1:, :] - p[:-1, :]) / h
    v[:, 1:-1] = (p[:, 1:] - p[:, :-1]) / h
    return StaggeredVelocity(grid, u, v)


def sym_to_strain_vector(T: StaggeredTensor) -> np.ndarray:
    return np.concatenate([T.xx.ravel(), T.yy.ravel(), (0.5 * (T.xy + T.yx)).ravel()])


def strain_vector_to_tensor(grid: MacGrid, e: np.ndarray) -> StaggeredTensor:
    nc = grid.nx * grid.ny
    e12 = e[2 * nc:].reshape(grid.nx + 1, grid.ny + 1)
    return StaggeredTensor(grid, e[:nc].reshape(grid.shape), e[nc:2 * nc].reshape(grid.shape),
                           e12, e12.copy())


# -- discrete stress ------------------------------------------------------------------

_LAMBDA_FLOOR = 1e-12


def cell_viscosity(model: StressModel, grid: MacGrid, e: np.ndarray) -> np.ndarray:
    """Viscosity ``s(|e|)`` per cell with node entries averaged in square."""
    nc = grid.nx * grid.ny
    e11 = e[:nc].reshape(grid.shape)
    e22 = e[nc:2 * nc].reshape(grid.shape)
    e12 = e[2 * nc:].reshape(grid.nx + 1, grid.ny + 1)
    lam = np.sqrt(e11 ** 2 + e22 ** 2 + 2.0 * cell_mean_of_nodes(e12 ** 2))
    return model.viscosity(np.maximum(lam, _LAMBDA_FLOOR))


def discrete_stress(model: StressModel, grid: MacGrid, e: np.ndarray) -> np.ndarray:
    """Stress in strain layout: ``s_c e`` at centers, mean adjacent ``s_c`` times ``e12`` at nodes.

    This is the gradient of the convex energy ``sum_c h^2 phi(|e|_c)`` with
    ``phi' = lam s(lam)``, so the discrete operator is exactly monotone.
    """
    nc = grid.nx * grid.ny
    s = cell_viscosity(model, grid, e)
    out = np.empty_like(e)
    out[:nc] = s.ravel() * e[:nc]
    out[nc:2 * nc] = s.ravel() * e[nc:2 * nc]
    out[2 * nc:] = node_weights(s).ravel() * e[2 * nc:]
    return out


def energy_pairing(grid: MacGrid, a: np.ndarray, b: np.ndarray, cell_weight=None) -> float:
    """``sum a : b`` for two strain-layout vectors, optionally weighted per cell."""
    q = grid.ops.strain_quadrature
    if cell_weight is None:
        return float(np.sum(q * a * b))
    nc = grid.nx * grid.ny
    w = np.concatenate([cell_weight.ravel(), cell_weight.ravel(), node_weights(cell_weight).ravel()])
    return float(np.sum(q * w * a * b))


# -- manufactured solutions -----------------------------------------------------------


@dataclass
class ManufacturedSolution:
    """Closed-form velocity, velocity gradient and pressure on the unit square.

    ``stream`` (optional) is a node stream function whose discrete curl gives
    exactly divergence-free face samples.
    """

    kind: str
    velocity: Callable
    gradient: Callable
    pressure: Callable
    stream: Callable | None = None
    divergence: Callable | None = None
    expressions: dict = field(default_factory=dict)

    def strain(self, x, y):
        G = self.gradient(x, y)
        return 0.5 * (G + np.swapaxes(G, -1, -2))

    def sample_velocity(self, grid: MacGrid) -> StaggeredVelocity:
        vel = StaggeredVelocity.from_function(grid, self.velocity)
        if self.stream is None:
            return vel
        Xn, Yn = grid.nodes()
        psi = self.stream(Xn, Yn)
        h = grid.h
        curl_u = (psi[:, 1:] - psi[:, :-1]) / h
        curl_v = -(psi[1:, :] - psi[:-1, :]) / h
        if self._potential_part is not None:
            rest = StaggeredVelocity.from_function(grid, self._potential_part)
            curl_u = curl_u + rest.u
            curl_v = curl_v + rest.v
        return StaggeredVelocity(grid, curl_u, curl_v, vel.u_bottom, vel.u_top, vel.v_left, vel.v_right)

    def sample_pressure(self, grid: MacGrid) -> np.ndarray:
        return zero_mean(self.pressure(*grid.centers()))

    def sample_divergence(self, grid: MacGrid) -> np.ndarray:
        if self.divergence is None:
            return np.zeros(grid.shape)
        return self.divergence(*grid.centers())

    def trace(self, grid: MacGrid) -> BoundaryTrace:
        return BoundaryTrace.from_function(grid, self.velocity)

    _potential_part: Callable | None = None


def _stream_solution() -> ManufacturedSolution:
    def parts(x, y):
        X, Xp, Xpp = x * (1 - x), 1 - 2 * x, -2.0 + 0 * x
        Y, Yp, Ypp = y * (1 - y), 1 - 2 * y, -2.0 + 0 * y
        return X, Xp, Xpp, Y, Yp, Ypp

    def psi(x, y):
        X, _, _, Y, _, _ = parts(x, y)
        return (X * Y) ** 2

    def velocity(x, y):
        X, Xp, _, Y, Yp, _ = parts(x, y)
        return 2 * X ** 2 * Y * Yp, -2 * X * Xp * Y ** 2

    def gradient(x, y):
        X, Xp, Xpp, Y, Yp, Ypp = parts(x, y)
        ux = 4 * X * Xp * Y * Yp
        uy = 2 * X ** 2 * (Yp ** 2 + Y * Ypp)
        vx = -2 * (Xp ** 2 + X * Xpp) * Y ** 2
        return np.stack([np.stack([ux, uy], -1), np.stack([vx, -ux], -1)], -2)

    def pressure(x, y):
        return np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y)

    return ManufacturedSolution(
        "stream", velocity, gradient, pressure, stream=psi,
        expressions={"psi": "(x(1-x)y(1-y))^2", "v": "curl psi", "p": "sin(2 pi x) cos(2 pi y)"},
    )


def _compressible_solution() -> ManufacturedSolution:
    """``curl psi + grad phi`` with a nonzero wall trace and nonzero divergence."""
    pi = np.pi

    def psi(x, y):
        return np.sin(pi * x) * np.sin(pi * y) / pi

    def potential(x, y):
        return -np.sin(pi * x) * np.cos(pi * y) / pi, -np.cos(pi * x) * np.sin(pi * y) / pi

    def velocity(x, y):
        a = np.sin(pi * x) * np.cos(pi * y)
        b = -np.cos(pi * x) * np.sin(pi * y)
        g1, g2 = potential(x, y)
        return a + g1, b + g2

    def gradient(x, y):
        # curl part: (sin(pi x)cos(pi y), -cos(pi x)sin(pi y))
        ux_c = pi * np.cos(pi * x) * np.cos(pi * y)
        uy_c = -pi * np.sin(pi * x) * np.sin(pi * y)
        vx_c = pi * np.sin(pi * x) * np.sin(pi * y)
        vy_c = -pi * np.cos(pi * x) * np.cos(pi * y)
        # gradient of phi = cos(pi x) cos(pi y) / pi^2
        ux_g = -np.cos(pi * x) * np.cos(pi * y)
        uy_g = np.sin(pi * x) * np.sin(pi * y)
        vy_g = -np.cos(pi * x) * np.cos(pi * y)
        G11, G12, G21, G22 = ux_c + ux_g, uy_c + uy_g, vx_c + uy_g, vy_c + vy_g
        return np.stack([np.stack([G11, G12], -1), np.stack([G21, G22], -1)], -2)

    def divergence(x, y):
        return -2.0 * np.cos(pi * x) * np.cos(pi * y)

    def pressure(x, y):
        return np.sin(2 * pi * x) * np.cos(2 * pi * y)

    sol = ManufacturedSolution(
        "compressible", velocity, gradient, pressure, stream=psi, divergence=divergence,
        expressions={"psi": "sin(pi x) sin(pi y)/pi", "phi": "cos(pi x) cos(pi y)/pi^2",
                     "v": "curl psi + grad phi", "p": "sin(2 pi x) cos(2 pi y)"},
    )
    sol._potential_part = potential
    return sol


def _expansion_solution(rate: float = 1.0) -> ManufacturedSolution:
    """Uniform expansion plus a rigid rotation: constant divergence ``rate``."""

    def velocity(x, y):
        return 0.5 * rate * x - (y - 0.5), 0.5 * rate * y + (x - 0.5)

    def gradient(x, y):
        z = 0.0 * x
        return np.stack([np.stack([z + 0.5 * rate, z - 1.0], -1),
                         np.stack([z + 1.0, z + 0.5 * rate], -1)], -2)

    return ManufacturedSolution(
        "expansion", velocity, gradient, lambda x, y: 0.0 * x,
        divergence=lambda x, y: rate + 0.0 * x,
        expressions={"v": f"({rate}/2) (x, y) + rotation", "p": "0"},
    )


def _zero_solution() -> ManufacturedSolution:
    z = lambda x, y: 0.0 * x  # noqa: E731
    return ManufacturedSolution(
        "zero", lambda x, y: (0.0 * x, 0.0 * x),
        lambda x, y: np.zeros(np.shape(x) + (2, 2)), z, stream=z,
        expressions={"v": "0", "p": "0"},
    )


MANUFACTURED = {
    "stream": _stream_solution,
    "compressible": _compressible_solution,
    "expansion": _expansion_solution,
    "zero": _zero_solution,
}


def manufactured_solution(kind: str = "stream") -> ManufacturedSolution:
    try:
        return MANUFACTURED[kind]()
    except KeyError:
        raise ValueError(f"unknown manufactured solution {kind!r}") from None


def forcing_from_solution(model: StressModel | None, mms: ManufacturedSolution,
                          grid: MacGrid, viscosity: float = 1.0) -> StaggeredTensor:
    """``f = S(e(v*)) - p* Id`` sampled at the native tensor locations.

    With ``model=None`` the linear law ``viscosity * e`` is used.
    """
    def stress(x, y):
        E = mms.strain(x, y)
        S = viscosity * E if model is None else eval_stress(model, E)
        P = mms.pressure(x, y)
        S = S.copy()
        S[..., 0, 0] -= P
        S[..., 1, 1] -= P
        return S

    return StaggeredTensor.from_function(grid, stress)


# -- rough forcing ------------------------------------------------------------------------


def _cic_weights(n_a: int, n_b: int, frac_a: float, frac_b: float):
    """Bilinear weights of a point at fractional index ``(frac_a, frac_b)``."""
    out = []
    ia, ib = int(np.floor(frac_a)), int(np.floor(frac_b))
    ta, tb = frac_a - ia, frac_b - ib
    for da, wa in ((0, 1 - ta), (1, ta)):
        for db, wb in ((0, 1 - tb), (1, tb)):
            a, b = ia + da, ib + db
            if wa * wb > 0 and 0 <= a < n_a and 0 <= b < n_b:
                out.append((a, b, wa * wb))
    return out


def dirac_potential(grid: MacGrid, center, amplitude: float = 1.0, component: int = 0) -> np.ndarray:
    """Discrete Green function on the ``u`` (component 0) or ``v`` (component 1) faces.

    Solves ``sum grad G . grad phi = amplitude * phi(center)`` over the face
    unknowns with zero boundary values; the point value is distributed
    bilinearly over the nearest faces.
    """
    cx, cy = center
    if not (0.0 < cx < grid.width and 0.0 < cy < grid.height):
        raise ValueError("the source must lie strictly inside the domain")
    ops = grid.ops
    h = grid.h
    nx, ny = grid.shape
    if component == 0:
        idx = ops.interior_u
        shape = (nx + 1, ny)
        hits = _cic_weights(nx + 1, ny, cx / h, cy / h - 0.5)
        base = 0
        stride = ny
    else:
        idx = ops.interior_v
        shape = (nx, ny + 1)
        hits = _cic_weights(nx, ny + 1, cx / h - 0.5, cy / h)
        base = ops.nu
        stride = ny + 1
    G = ops.gradient[:, idx]
    L = (G.T @ sp.diags(ops.gradient_quadrature) @ G).tocsc()
    rhs_full = np.zeros(ops.nx_ext)
    for a, b, w in hits:
        rhs_full[base + a * stride + b] += amplitude * w
    sol = spla.spsolve(L, rhs_full[idx])
    full = np.zeros(ops.nx_ext)
    full[idx] = sol
    return full[base: base + shape[0] * shape[1]].reshape(shape)


def rough_forcing_dirac(grid: MacGrid, center=(0.5, 0.5), amplitude: float = 1.0,
                        direction=(1.0, 0.0)) -> StaggeredTensor:
    """Forcing ``f = e_k (x) grad G`` whose divergence is a point force at ``center``.

    ``-div_h f`` paired with any discrete test field reproduces
    ``amplitude * direction . phi(center)`` exactly.
    """
    f = StaggeredTensor.zeros(grid)
    if amplitude == 0:
        return f
    d = np.asarray(direction, float)
    if d[0]:
        Gu = dirac_potential(grid, center, amplitude * d[0], 0)
        vel = StaggeredVelocity(grid, Gu, np.zeros((grid.nx, grid.ny + 1)))
        T = discrete_gradient(vel)
        f.xx += T.xx
        f.xy += T.xy
    if d[1]:
        Gv = dirac_potential(grid, center, amplitude * d[1], 1)
        vel = StaggeredVelocity(grid, np.zeros((grid.nx + 1, grid.ny)), Gv)
        T = discrete_gradient(vel)
        f.yy += T.yy
        f.yx += T.yx
    return f


def truncate_forcing(f: StaggeredTensor, k: float) -> StaggeredTensor:
    """Zero every sample site where the local Frobenius norm reaches ``k``."""
    if not k > 0:
        raise ValueError("truncation level must be positive")
    keep_c = f.magnitude().values < k
    keep_n = f.node_magnitude() < k
    return StaggeredTensor(f.grid, np.where(keep_c, f.xx, 0.0), np.where(keep_c, f.yy, 0.0),
                           np.where(keep_n, f.xy, 0.0), np.where(keep_n, f.yx, 0.0))
