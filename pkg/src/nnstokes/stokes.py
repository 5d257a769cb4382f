"""Linear and nonlinear Stokes solves on the MAC grid.

The discrete saddle system is assembled in weak form::

    [ mu A   -B^T ] [w]   [ l(F) - mu A_b g ]
    [ -B      0   ] [p] = [ -h^2 (d - D_b g)]

where ``A`` is the strain-strain form, ``B = h^2 div`` restricted to interior
faces and the ``_b`` blocks carry the boundary data. One pressure unknown is
pinned to remove the constant null space; the pressure is shifted to zero
mean afterwards. The matrix stays symmetric.

Nonlinear problems use Picard iteration with the asymptotic viscosity
``mu_inf``: the defect ``mu_inf e(v) - S(e(v))`` is moved to the right-hand
side, so each step is a linear solve with a fixed matrix.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constitutive import StressModel
from .grid import (BoundaryTrace, MacGrid, StaggeredTensor, StaggeredVelocity,
                   discrete_gradient, discrete_stress, strain_vector_to_tensor, zero_mean)
from .weights import GridField, Weight, weighted_lp_norm

log = logging.getLogger(__name__)

BACKENDS = ("direct", "schur")


class SolverError(RuntimeError):
    """Linear solve failure or incompatible data."""


class IncompatibleDataError(SolverError, ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Solver controls.

    ``damping=None`` selects the relaxation ``2 mu_inf / (lam_min + lam_max)``
    from the spectral bounds of the stress Jacobian; a number fixes it.
    Either way the factor is halved whenever the update norm grows.
    """

    tol: float = 1e-10
    max_iter: int = 50
    damping: float | None = None
    backend: str = "direct"
    linear_tol: float = 1e-12
    min_damping: float = 1.0 / 64

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.damping is not None and not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if not 0 < self.min_damping <= 1:
            raise ValueError("min_damping must lie in (0, 1]")

    def with_overrides(self, **changes) -> "SolverConfig":
        return SolverConfig(**{**asdict(self), **changes})


@dataclass
class StokesSolution:
    velocity: StaggeredVelocity
    pressure: np.ndarray
    residual: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    converged: bool = True
    iterations: int = 0
    damping: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> MacGrid:
        return self.velocity.grid

    def pressure_field(self) -> GridField:
        return self.grid.cell_field(self.pressure)

    def gradient(self) -> StaggeredTensor:
        return discrete_gradient(self.velocity)

    def manifest(self) -> dict:
        return {
            "grid": {"nx": self.grid.nx, "ny": self.grid.ny, "h": self.grid.h},
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "residual": {k: float(v) for k, v in self.residual.items()},
            "update_norms": [float(t) for t in self.trace],
            "damping": [float(t) for t in self.damping],
            **self.meta,
        }

    def save(self, directory) -> Path:
        """Write ``u``, ``v`` and ``p`` as binary fields plus ``manifest.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        h = self.grid.h
        GridField(self.velocity.u, h, (-0.5 * h, 0.0)).save(d / "u.nnsf")
        GridField(self.velocity.v, h, (0.0, -0.5 * h)).save(d / "v.nnsf")
        self.pressure_field().save(d / "p.nnsf")
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        return d


# -- assembly -------------------------------------------------------------------------


class StokesSystem:
    """Saddle-point matrix for a fixed grid and viscosity, factorized once."""

    def __init__(self, grid: MacGrid, viscosity: float = 1.0, backend: str = "direct"):
        if not viscosity > 0:
            raise ValueError("viscosity must be positive")
        self.grid = grid
        self.viscosity = float(viscosity)
        self.backend = backend
        ops = grid.ops
        I, Bd = ops.interior, ops.boundary
        V = ops.viscous.tocsc()
        self.A = (self.viscosity * V[I][:, I]).tocsc()
        self.A_b = (self.viscosity * V[I][:, Bd]).tocsr()
        h2 = grid.h ** 2
        Dv = ops.divergence.tocsc()
        self.B = (h2 * Dv[:, I]).tocsr()
        self.D_b = Dv[:, Bd].tocsr()
        self.n_vel = len(I)
        self.n_p = grid.nx * grid.ny
        self._lu = None
        self._A_lu = None

    def matrix(self, pinned: bool = True) -> sp.csc_matrix:
        B = self.B[:-1] if pinned else self.B
        K = sp.bmat([[self.A, -B.T], [-B, None]], format="csc")
        return K

    def _factor(self):
        if self._lu is None:
            try:
                self._lu = spla.splu(self.matrix(pinned=True))
            except RuntimeError as exc:
                raise SolverError(
                    f"factorization failed on a {self.grid.nx}x{self.grid.ny} grid "
                    f"(h={self.grid.h:g}, viscosity={self.viscosity:g}): {exc}") from exc
        return self._lu

    def _factor_velocity(self):
        if self._A_lu is None:
            self._A_lu = spla.splu(self.A)
        return self._A_lu

    def rhs(self, load: np.ndarray, d: np.ndarray, g_ext: np.ndarray):
        """Right-hand side from the extended load vector, divergence data and boundary data."""
        ops = self.grid.ops
        gb = g_ext[ops.boundary]
        r1 = load[ops.interior] - self.A_b @ gb
        r2 = -self.grid.h ** 2 * (np.ravel(d) - self.D_b @ gb)
        return r1, r2

    def solve(self, r1: np.ndarray, r2: np.ndarray, tol: float = 1e-12):
        if self.backend == "direct":
            x = self._factor().solve(np.concatenate([r1, r2[:-1]]))
            w, p = x[: self.n_vel], np.append(x[self.n_vel:], 0.0)
        else:
            w, p = self._solve_schur(r1, r2, tol)
        return w, zero_mean(p).reshape(self.grid.shape)

    def _solve_schur(self, r1, r2, tol):
        lu = self._factor_velocity()
        B = self.B

        def schur(p):
            q = B @ lu.solve(B.T @ np.ravel(p))
            return q - q.mean()

        S = spla.LinearOperator((self.n_p, self.n_p), matvec=schur, dtype=float)
        b = -r2 - B @ lu.solve(r1)
        b = b - b.mean()
        nb = np.linalg.norm(b)
        if nb == 0:
            p = np.zeros(self.n_p)
        else:
            p, info = spla.cg(S, b, rtol=tol, atol=0.0, maxiter=10 * self.n_p)
            if info != 0:
                raise SolverError(f"Schur-complement CG did not converge (info={info})")
        w = lu.solve(r1 + B.T @ np.ravel(p))
        return w, p

    def residual(self, w, p, r1, r2) -> float:
        res1 = self.A @ w - self.B.T @ np.ravel(p) - r1
        res2 = -self.B @ w - r2
        scale = max(np.linalg.norm(r1) + np.linalg.norm(r2), np.finfo(float).tiny)
        return float(np.hypot(np.linalg.norm(res1), np.linalg.norm(res2)) / scale)


@lru_cache(maxsize=16)
def stokes_system(grid: MacGrid, viscosity: float, backend: str = "direct") -> StokesSystem:
    return StokesSystem(grid, viscosity, backend)


def _velocity_from(grid: MacGrid, w: np.ndarray, g_ext: np.ndarray) -> StaggeredVelocity:
    x = g_ext.copy()
    x[grid.ops.interior] = w
    return StaggeredVelocity.from_vector(grid, x)


def _boundary_vector(grid: MacGrid, g: BoundaryTrace | None) -> np.ndarray:
    vel = StaggeredVelocity.zeros(grid)
    if g is not None:
        vel = vel.with_trace(g)
    return vel.to_vector()


def check_compatibility(grid: MacGrid, d: np.ndarray | None, g: BoundaryTrace | None,
                        atol: float = 1e-10) -> float:
    """Return ``sum d h^2 - oint g.n``; raise if it exceeds ``atol``."""
    total = 0.0 if d is None else float(np.sum(d)) * grid.h ** 2
    flux = 0.0 if g is None else g.net_flux(grid.h)
    gap = total - flux
    if abs(gap) > atol * max(1.0, abs(total), abs(flux)):
        raise IncompatibleDataError(
            f"incompatible data: integral of d = {total:.3e} but boundary flux = {flux:.3e}")
    return gap


def make_compatible(grid: MacGrid, d: np.ndarray, g: BoundaryTrace | None) -> np.ndarray:
    """Shift ``d`` by a constant so that it matches the boundary flux exactly."""
    flux = 0.0 if g is None else g.net_flux(grid.h)
    area = grid.width * grid.height
    return d - (np.sum(d) * grid.h ** 2 - flux) / area


# -- residuals -------------------------------------------------------------------------


def weak_residual(vel: StaggeredVelocity, p: np.ndarray, load: np.ndarray, d: np.ndarray | None,
                  model: StressModel | None = None, viscosity: float = 1.0) -> dict:
    """Weak-form defect against every interior unit test field, and the divergence defect."""
    grid = vel.grid
    ops = grid.ops
    x = vel.to_vector()
    e = ops.strain @ x
    S = viscosity * e if model is None else discrete_stress(model, grid, e)
    h2 = grid.h ** 2
    mom = (ops.stress_load(S) - load)[ops.interior] - (h2 * ops.divergence[:, ops.interior]).T @ np.ravel(p)
    div = ops.divergence @ x - (0.0 if d is None else np.ravel(d))
    scale = max(np.linalg.norm(load[ops.interior]), np.linalg.norm(ops.stress_load(S)[ops.interior]),
                np.finfo(float).tiny)
    return {
        "momentum": float(np.linalg.norm(mom) / scale),
        "momentum_abs": float(np.linalg.norm(mom)),
        "divergence": float(np.max(np.abs(div))) if div.size else 0.0,
    }


# -- linear solve ------------------------------------------------------------------------


def solve_linear_stokes(F: StaggeredTensor | None, d: np.ndarray | None = None,
                        g: BoundaryTrace | None = None, cfg: SolverConfig | None = None, *,
                        grid: MacGrid | None = None, viscosity: float = 1.0) -> StokesSolution:
    """Solve ``-div(viscosity e(w)) + grad p = -div F``, ``div w = d``, ``w = g`` on the wall."""
    cfg = cfg or SolverConfig()
    if grid is None:
        if F is None:
            raise ValueError("grid is required when F is None")
        grid = F.grid
    F = F if F is not None else StaggeredTensor.zeros(grid)
    d_arr = np.zeros(grid.shape) if d is None else np.asarray(d, float).reshape(grid.shape)
    check_compatibility(grid, d_arr, g)
    system = stokes_system(grid, float(viscosity), cfg.backend)
    g_ext = _boundary_vector(grid, g)
    load = grid.ops.load_vector(F)
    r1, r2 = system.rhs(load, d_arr, g_ext)
    w, p = system.solve(r1, r2, cfg.linear_tol)
    vel = _velocity_from(grid, w, g_ext)
    res = {"algebraic": system.residual(w, p, r1, r2)}
    res.update(weak_residual(vel, p, load, d_arr, None, viscosity))
    if res["algebraic"] > max(cfg.tol, 1e-8):
        raise SolverError(f"linear residual {res['algebraic']:.2e} exceeds tolerance")
    return StokesSolution(vel, p, res, meta={"viscosity": float(viscosity), "backend": cfg.backend})


def trace_extension(grid: MacGrid, g: BoundaryTrace) -> StaggeredVelocity:
    """Discrete vector-Laplace extension of a boundary trace (no divergence constraint)."""
    system = stokes_system(grid, 1.0, "direct")
    g_ext = _boundary_vector(grid, g)
    w = system._factor_velocity().solve(-(system.A_b @ g_ext[grid.ops.boundary]))
    return _velocity_from(grid, w, g_ext)


def trace_norm(grid: MacGrid, g: BoundaryTrace | None, weight: Weight | None, q: float) -> float:
    """Surrogate trace norm: weighted ``W^{1,q}`` norm of :func:`trace_extension`."""
    if g is None or g.is_zero():
        return 0.0
    ext = trace_extension(grid, g)
    return weighted_lp_norm(ext, weight, q) + weighted_lp_norm(discrete_gradient(ext), weight, q)


def _scalar_norm(grid: MacGrid, a: np.ndarray | None, weight: Weight | None, q: float) -> float:
    if a is None:
        return 0.0
    return weighted_lp_norm(grid.cell_field(np.asarray(a, float).reshape(grid.shape)), weight, q)


def solution_norm(sol: StokesSolution, weight: Weight | None, q: float) -> tuple[float, float]:
    """``(||grad_h v||, ||p||)`` in ``L^q_w``."""
    return (weighted_lp_norm(sol.gradient(), weight, q),
            _scalar_norm(sol.grid, sol.pressure, weight, q))


def linear_estimate_ratio(sol: StokesSolution, F: StaggeredTensor | None, d=None,
                          g: BoundaryTrace | None = None, weight: Weight | None = None,
                          q: float = 2.0) -> float:
    grid = sol.grid
    num = sum(solution_norm(sol, weight, q))
    den = (0.0 if F is None else weighted_lp_norm(F, weight, q)) \
        + _scalar_norm(grid, d, weight, q) + trace_norm(grid, g, weight, q)
    if den == 0.0:
        return 0.0
    return num / (den + np.finfo(float).eps)


# -- nonlinear solve ---------------------------------------------------------------------


def jacobian_spectrum(model: StressModel, decades: float = 12.0, samples: int = 2001):
    """Bounds ``(lam_min, lam_max)`` of the stress Jacobian eigenvalues over all strains."""
    lam = np.concatenate([[0.0], np.logspace(-decades / 2, decades / 2, samples)])
    kink = model.kink_radius
    if np.isfinite(kink) and kink > 0:
        lam = np.concatenate([lam, kink * (1 + np.array([-1e-9, 1e-9]))])
    lam_pos = np.maximum(lam, 1e-300)
    tang = model.viscosity(lam_pos)
    rad = model.radial_slope(lam_pos)
    vals = np.concatenate([tang[np.isfinite(tang)], rad[np.isfinite(rad)]])
    return float(np.min(vals)), float(np.max(vals))


def auto_damping(model: StressModel) -> float:
    lo, hi = jacobian_spectrum(model)
    return float(min(1.0, 2.0 * model.mu_inf / (lo + hi)))


def _weighted_velocity_norm(vel: StaggeredVelocity, weight: Weight | None) -> float:
    return weighted_lp_norm(vel, weight, 2.0)


def picard_step(v_m: StaggeredVelocity, f: StaggeredTensor, model: StressModel,
                cfg: SolverConfig | None = None, *, d=None, g: BoundaryTrace | None = None,
                damping: float | None = None):
    """One relaxed Picard step with viscosity ``mu_inf``.

    Returns ``(velocity, pressure)``; the pressure belongs to the undamped
    linear solve.
    """
    cfg = cfg or SolverConfig()
    grid = v_m.grid
    mu = model.mu_inf
    theta = 1.0 if damping is None else float(damping)
    if not 0.0 < theta <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    system = stokes_system(grid, mu, cfg.backend)
    d_arr = np.zeros(grid.shape) if d is None else np.asarray(d, float).reshape(grid.shape)
    g = g if g is not None else v_m.trace()
    g_ext = _boundary_vector(grid, g)
    ops = grid.ops
    e = ops.strain @ v_m.to_vector()
    defect = mu * e - discrete_stress(model, grid, e)
    load = ops.load_vector(f) + ops.stress_load(defect)
    r1, r2 = system.rhs(load, d_arr, g_ext)
    w, p = system.solve(r1, r2, cfg.linear_tol)
    v_new = _velocity_from(grid, w, g_ext)
    if theta == 1.0:
        return v_new, p
    return v_new.scaled(theta) + v_m.with_trace(g).scaled(1.0 - theta), p


def solve_nonlinear(f: StaggeredTensor, model: StressModel, cfg: SolverConfig | None = None,
                    d=None, g: BoundaryTrace | None = None, *,
                    initial: StaggeredVelocity | None = None,
                    weight: Weight | None = None) -> StokesSolution:
    """Picard iteration to a relative update below ``cfg.tol`` in the ``L^2_w`` norm.

    Non-convergence returns the last iterate with ``converged=False`` and the
    full trace; it does not raise.
    """
    cfg = cfg or SolverConfig()
    grid = f.grid
    d_arr = np.zeros(grid.shape) if d is None else np.asarray(d, float).reshape(grid.shape)
    check_compatibility(grid, d_arr, g)
    g = g if g is not None else BoundaryTrace.zero(grid)
    v = (initial.copy() if initial is not None else StaggeredVelocity.zeros(grid)).with_trace(g)
    theta = cfg.damping if cfg.damping is not None else auto_damping(model)
    trace, thetas = [], []
    p = np.zeros(grid.shape)
    converged = False
    prev = np.inf
    it = 0
    for it in range(1, cfg.max_iter + 1):
        # the first step is undamped so that every iterate meets div v = d exactly
        step = 1.0 if it == 1 else theta
        v_new, p = picard_step(v, f, model, cfg, d=d_arr, g=g, damping=step)
        upd = _weighted_velocity_norm(v_new - v, weight)
        size = _weighted_velocity_norm(v_new, weight)
        rel = upd / size if size > 0 else upd
        trace.append(rel)
        thetas.append(step)
        v = v_new
        if rel <= cfg.tol:
            converged = True
            break
        if it > 2 and rel > prev and theta > cfg.min_damping:
            theta = max(theta / 2.0, cfg.min_damping)
            log.debug("update norm grew at iteration %d; damping now %g", it, theta)
        prev = rel
    # pressure consistent with the final iterate
    p = _pressure_for(v, f, model, cfg, d_arr, g)
    load = grid.ops.load_vector(f)
    res = weak_residual(v, p, load, d_arr, model)
    if not converged:
        log.warning("Picard did not converge in %d iterations (last update %.2e)", it, trace[-1])
    return StokesSolution(v, p, res, trace, converged, it, thetas,
                          meta={"model": model.describe(), "backend": cfg.backend,
                                "tol": cfg.tol})


def _pressure_for(v, f, model, cfg, d_arr, g):
    """Pressure of one undamped step from ``v``; equals the fixed-point pressure at convergence."""
    _, p = picard_step(v, f, model, cfg, d=d_arr, g=g, damping=1.0)
    return p


def nonlinear_estimate_ratio(sol: StokesSolution, f: StaggeredTensor, weight: Weight | None = None,
                             q: float = 2.0, d=None, g: BoundaryTrace | None = None) -> float:
    """``(||grad v|| + ||p||) / (1 + ||f|| + ||d|| + ||g||)`` in ``L^q_w``."""
    if not sol.converged:
        raise SolverError("refusing to evaluate an estimate on an unconverged solution")
    grid = sol.grid
    num = sum(solution_norm(sol, weight, q))
    den = 1.0 + weighted_lp_norm(f, weight, q) + _scalar_norm(grid, d, weight, q) \
        + trace_norm(grid, g, weight, q)
    return num / den


# -- discrete invariants -----------------------------------------------------------------


def monotonicity_pairing(model: StressModel, a: StaggeredVelocity, b: StaggeredVelocity) -> float:
    """``sum (S(e a) - S(e b)) : (e a - e b) h^2``."""
    grid = a.grid
    ops = grid.ops
    ea, eb = ops.strain @ a.to_vector(), ops.strain @ b.to_vector()
    dS = discrete_stress(model, grid, ea) - discrete_stress(model, grid, eb)
    return float(np.sum(ops.strain_quadrature * dS * (ea - eb)))


def energy_balance(sol: StokesSolution, f: StaggeredTensor, model: StressModel) -> tuple[float, float]:
    """``(sum S(e v):e v, sum f:grad v)`` for homogeneous data."""
    grid = sol.grid
    ops = grid.ops
    x = sol.velocity.to_vector()
    e = ops.strain @ x
    lhs = float(np.sum(ops.strain_quadrature * discrete_stress(model, grid, e) * e))
    rhs = float(np.sum(ops.gradient_quadrature * f.to_vector() * (ops.gradient @ x)))
    return lhs, rhs


def smallest_ritz_value(grid: MacGrid, viscosity: float = 1.0) -> float:
    """Smallest eigenvalue of the velocity block on the discretely solenoidal subspace."""
    system = stokes_system(grid, viscosity, "direct")
    B = system.B.toarray()
    _, s, vt = np.linalg.svd(B)
    rank = int(np.sum(s > s[0] * 1e-12))
    Z = vt[rank:].T
    A = system.A.toarray()
    return float(np.linalg.eigvalsh(Z.T @ A @ Z)[0])


def strain_tensor(vel: StaggeredVelocity) -> StaggeredTensor:
    return strain_vector_to_tensor(vel.grid, vel.grid.ops.strain @ vel.to_vector())


__all__ = [
    "SolverConfig", "StokesSolution", "StokesSystem", "SolverError", "IncompatibleDataError",
    "solve_linear_stokes", "linear_estimate_ratio", "picard_step", "solve_nonlinear",
    "nonlinear_estimate_ratio", "check_compatibility", "make_compatible", "trace_extension",
    "trace_norm", "monotonicity_pairing", "energy_balance", "smallest_ritz_value",
    "jacobian_spectrum", "auto_damping", "weak_residual", "solution_norm",
]
