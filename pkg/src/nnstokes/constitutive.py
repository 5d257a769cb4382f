"""Stress laws that behave like a Newtonian fluid at large shear rates.

Two isotropic families ``S(Q) = s(|Q^s|) Q^s`` are shipped:

* ``carreau``: ``s = mu + (nu0 + nu1*lam**2)**((p-2)/2)`` for ``p in (1, 2]``
* ``capped``:  ``s = min(mu, (nu0 + nu1*lam**2)**((p-2)/2))`` for ``p in (2, inf]``

Besides evaluation the module computes the structural constants of each law
(coercivity, growth, asymptotic viscosity) in closed form and offers sampled
certificates for them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

FAMILIES = ("carreau", "capped")


class ModelError(ValueError):
    """Raised for parameter combinations outside the admissible families."""


class CapKinkError(ValueError):
    """Raised when a derivative is requested below the kink of a capped law."""


def symmetrize(Q):
    Q = np.asarray(Q, dtype=float)
    return 0.5 * (Q + np.swapaxes(Q, -1, -2))


def frobenius(Q):
    Q = np.asarray(Q, dtype=float)
    return np.sqrt(np.sum(Q * Q, axis=(-2, -1)))


def frobenius_product(A, B):
    return np.sum(np.asarray(A) * np.asarray(B), axis=(-2, -1))


@dataclass(frozen=True)
class StressModel:
    """Isotropic generalized Newtonian law ``S(Q) = s(|Q^s|) Q^s``.

    Parameters are validated at construction. ``mu_inf`` is the slope the law
    approaches for large shear rates; it differs from ``mu`` for the exactly
    linear Carreau case ``p = 2`` (where ``s = mu + 1``).
    """

    family: str = "carreau"
    mu: float = 1.0
    nu0: float = 1.0
    nu1: float = 1.0
    p: float = 1.5
    name: str = ""
    mu_inf_override: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if not self.mu > 0:
            raise ModelError("mu must be positive (coercivity requires mu > 0)")
        if self.nu0 < 0 or self.nu1 < 0:
            raise ModelError("nu0 and nu1 must be nonnegative")
        if self.family == "carreau":
            if not 1.0 < self.p <= 2.0:
                raise ModelError(f"carreau law needs p in (1, 2], got p={self.p}")
            if self.p < 2.0 and self.nu0 == 0 and self.nu1 == 0:
                raise ModelError("carreau law with nu0 = nu1 = 0 and p < 2 has infinite viscosity")
        else:
            if not self.p > 2.0:
                raise ModelError(f"capped law needs p in (2, inf], got p={self.p}")
            if self.nu1 == 0 and self.nu0 <= 0:
                raise ModelError("capped law with nu1 = 0 needs nu0 > 0")
        if self.mu_inf_override is not None and not self.mu_inf_override > 0:
            raise ModelError("mu_inf override must be positive")

    # -- scalar profile -------------------------------------------------------

    @property
    def exponent(self) -> float:
        return 0.5 * (self.p - 2.0)

    def _base_power(self, base):
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            return np.power(base, self.exponent)

    def viscosity(self, lam):
        """Generalized viscosity ``s(lam)``; infinite at 0 for singular Carreau laws."""
        lam = np.asarray(lam, dtype=float)
        base = self.nu0 + self.nu1 * lam * lam
        if self.family == "carreau":
            if self.p == 2.0:
                return np.full_like(lam, self.mu + 1.0)
            return self.mu + self._base_power(base)
        return np.minimum(self.mu, self._base_power(base))

    def viscosity_slope(self, lam):
        """``d s / d lam``; zero on the capped branch."""
        lam = np.asarray(lam, dtype=float)
        if self.family == "carreau" and self.p == 2.0:
            return np.zeros_like(lam)
        if np.isinf(self.p):
            return np.zeros_like(lam)
        base = self.nu0 + self.nu1 * lam * lam
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            raw = self.nu1 * (self.p - 2.0) * lam * np.power(base, self.exponent - 1.0)
        if self.family == "capped":
            raw = np.where(self._base_power(base) < self.mu, raw, 0.0)
        return raw

    def flux(self, lam):
        """``lam * s(lam)``, finite at 0 for every admissible law."""
        lam = np.asarray(lam, dtype=float)
        with np.errstate(invalid="ignore"):
            out = lam * self.viscosity(lam)
        return np.where(lam > 0, out, 0.0)

    def radial_slope(self, lam):
        """``d (lam s) / d lam``: Jacobian eigenvalue along ``Q^s`` itself."""
        lam = np.asarray(lam, dtype=float)
        with np.errstate(invalid="ignore"):
            return self.viscosity(lam) + lam * self.viscosity_slope(lam)

    @property
    def mu_inf(self) -> float:
        """Asymptotic slope; an explicit override is honoured (negative controls only)."""
        if self.mu_inf_override is not None:
            return float(self.mu_inf_override)
        return self.natural_mu_inf

    @property
    def natural_mu_inf(self) -> float:
        if self.family == "carreau":
            if self.p == 2.0:
                return self.mu + 1.0
            if self.nu1 > 0:
                return self.mu
            return self.mu + float(self._base_power(self.nu0))
        if self.nu1 > 0:
            return self.mu
        return float(min(self.mu, self._base_power(self.nu0)))

    @property
    def is_linear(self) -> bool:
        """True when ``S = mu_inf * Q^s`` exactly."""
        if self.family == "carreau":
            return self.p == 2.0 or self.nu1 == 0
        return self.nu1 == 0 or self.kink_radius == 0.0

    @property
    def kink_radius(self) -> float:
        """Shear rate beyond which the cap of a capped law is active (0 for Carreau)."""
        if self.family == "carreau":
            return 0.0
        if self._base_power(self.nu0) >= self.mu:
            return 0.0
        if self.nu1 == 0:
            return float("inf")
        target = 1.0 if np.isinf(self.p) else self.mu ** (1.0 / self.exponent)
        return float(np.sqrt(max(target - self.nu0, 0.0) / self.nu1))

    @property
    def constants(self) -> tuple[float, float, float]:
        """Closed-form ``(c0, c1, c2)`` with ``S.Q >= c0|Q^s|^2 - c2`` and ``|S| <= c1|Q| + c2``."""
        mu = self.mu
        if self.family == "carreau":
            if self.p == 2.0:
                return (mu + 1.0, mu + 1.0, 0.0)
            if self.nu1 == 0:
                s = self.natural_mu_inf
                return (s, s, 0.0)
            if self.nu0 > 0:
                return (mu, mu + float(self._base_power(self.nu0)), 0.0)
            # lam^(p-1) <= (2-p) + (p-1) lam  (weighted AM-GM)
            k = float(self.nu1 ** self.exponent)
            return (mu, mu + (self.p - 1.0) * k, (2.0 - self.p) * k)
        if self.nu1 == 0:
            s = self.natural_mu_inf
            return (s, s, 0.0)
        lk = self.kink_radius
        return (mu, mu, mu * lk * lk)

    def with_overrides(self, **changes) -> "StressModel":
        from dataclasses import replace

        return replace(self, **changes)

    def describe(self) -> dict:
        c0, c1, c2 = self.constants
        return {
            "family": self.family,
            "mu": self.mu,
            "nu0": self.nu0,
            "nu1": self.nu1,
            "p": self.p,
            "mu_inf": self.mu_inf,
            "mu_inf_overridden": self.mu_inf_override is not None,
            "c0": c0,
            "c1": c1,
            "c2": c2,
            "kink_radius": self.kink_radius,
        }


SHIPPED_MODELS: dict[str, StressModel] = {
    "carreau": StressModel("carreau", 1.0, 1.0, 1.0, 1.5, name="carreau"),
    "carreau-singular": StressModel("carreau", 1.0, 0.0, 1.0, 1.5, name="carreau-singular"),
    "newtonian": StressModel("carreau", 1.0, 1.0, 1.0, 2.0, name="newtonian"),
    "capped": StressModel("capped", 1.0, 0.0, 1.0, 4.0, name="capped"),
}


@dataclass(frozen=True)
class PiecewiseConstantModel:
    """Hook for coefficients that vary between regions of the domain.

    ``labels`` maps each cell to an index into ``models``. The solver only
    uses spatially uniform laws; this type exists so region-dependent laws can
    be evaluated with the same call signature.
    """

    models: Sequence[StressModel]
    labels: np.ndarray = field(repr=False)

    def model_at(self, index) -> StressModel:
        return self.models[int(self.labels[index])]

    def eval_stress(self, Q, index):
        return eval_stress(self.model_at(index), Q)


def eval_stress(model: StressModel, Q):
    """Evaluate ``S(Q) = s(|Q^s|) Q^s`` for a tensor or a stack of tensors."""
    Qs = symmetrize(Q)
    lam = frobenius(Qs)
    with np.errstate(invalid="ignore"):
        S = model.viscosity(lam)[..., None, None] * Qs
    return np.where((lam > 0)[..., None, None], S, 0.0)


# -- moduli -------------------------------------------------------------------


def linearity_modulus(model: StressModel, m: float) -> float:
    """``sup_{|Q^s| >= m} |S(Q^s) - mu_inf Q^s| / |Q^s|`` in closed form."""
    if not m > 0:
        raise ValueError("m must be positive")
    if model.is_linear:
        return 0.0
    if model.family == "carreau":
        # deviation (nu0 + nu1 lam^2)^((p-2)/2) is decreasing in lam
        return float(model._base_power(model.nu0 + model.nu1 * m * m))
    if m >= model.kink_radius:
        return 0.0
    return float(model.mu - model._base_power(model.nu0 + model.nu1 * m * m))


def linearity_threshold(model: StressModel, eps: float) -> float:
    """Smallest ``m`` with ``linearity_modulus(model, m) <= eps`` (0 if none is needed)."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if model.is_linear:
        return 0.0
    if model.family == "carreau":
        target = eps ** (1.0 / model.exponent)
        return float(np.sqrt(max(target - model.nu0, 0.0) / model.nu1))
    if eps >= model.mu - float(model._base_power(model.nu0)):
        return 0.0
    if np.isinf(model.p):
        return model.kink_radius
    target = (model.mu - eps) ** (1.0 / model.exponent)
    return float(np.sqrt(max(target - model.nu0, 0.0) / model.nu1))


def _jacobian_deviation(model: StressModel, lam):
    mu_inf = model.mu_inf
    tangential = np.abs(model.viscosity(lam) - mu_inf)
    radial = np.abs(model.radial_slope(lam) - mu_inf)
    return np.maximum(tangential, radial)


def jacobian_modulus(model: StressModel, m: float, *, decades: float = 8.0) -> float:
    """``sup_{|Q^s| >= m} |dS/dQ^s - mu_inf Id|`` from the isotropic eigenvalues.

    For ``S = s(lam) Q^s`` the Jacobian has the tangential eigenvalue ``s`` and
    the radial eigenvalue ``(lam s)'``. The supremum is taken over a geometric
    radius grid spanning ``decades`` decades above ``m``; both families have
    monotone deviations there, so the grid maximum sits at ``m``.
    """
    if not m > 0:
        raise ValueError("m must be positive")
    if model.family == "capped" and m < model.kink_radius:
        raise CapKinkError(
            f"m={m:g} lies below the kink radius {model.kink_radius:g} of the capped law"
        )
    if model.is_linear:
        return 0.0
    lam = m * np.logspace(0.0, decades, 400)
    return float(np.max(_jacobian_deviation(model, lam)))


def jacobian_threshold(model: StressModel, eps: float) -> float:
    """Smallest grid radius beyond which ``jacobian_modulus <= eps``."""
    if model.is_linear:
        return 0.0
    if model.family == "capped":
        return model.kink_radius
    lo = linearity_threshold(model, eps)
    # tangential deviation dominates the radial one for p <= 2
    return max(lo, 1e-12)


def _symmetric_basis(n: int) -> np.ndarray:
    basis = []
    for i in range(n):
        E = np.zeros((n, n))
        E[i, i] = 1.0
        basis.append(E)
    for i in range(n):
        for j in range(i + 1, n):
            E = np.zeros((n, n))
            E[i, j] = E[j, i] = np.sqrt(0.5)
            basis.append(E)
    return np.array(basis)


def jacobian_deviation_fd(model: StressModel, eta, step: float = 1e-6):
    """Operator norm of ``dS/dQ^s - mu_inf Id`` at ``eta`` by central differences.

    ``eta`` may be a single tensor or a stack; the result has the stack shape.
    """
    eta = symmetrize(np.asarray(eta, dtype=float))
    n = eta.shape[-1]
    basis = _symmetric_basis(n)
    t = step * np.maximum(1.0, frobenius(eta))[..., None, None]
    cols = []
    for E in basis:
        dS = (eval_stress(model, eta + t * E) - eval_stress(model, eta - t * E)) / (2 * t)
        cols.append(frobenius_product(basis[:, None] if eta.ndim > 2 else basis, dS))
    J = np.stack(cols, axis=-1)
    if eta.ndim > 2:
        J = np.moveaxis(J, 0, -2)
    J = 0.5 * (J + np.swapaxes(J, -1, -2)) - model.mu_inf * np.eye(len(basis))
    out = np.max(np.abs(np.linalg.eigvalsh(J)), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# -- algebraic certificate ----------------------------------------------------


def _defect(model: StressModel, a, b, c, delta):
    """``|T(A) - T(B)| - delta |A - B|`` for ``|A| = a, |B| = b, cos(A, B) = c``.

    ``T = S - mu_inf Id``; isotropy makes the defect a function of these
    three numbers only.
    """
    mu_inf = model.mu_inf
    ta = model.flux(a) - mu_inf * a
    tb = model.flux(b) - mu_inf * b
    gap = np.sqrt(np.maximum(ta * ta + tb * tb - 2.0 * ta * tb * c, 0.0))
    dist = np.sqrt(np.maximum(a * a + b * b - 2.0 * a * b * c, 0.0))
    return gap - delta * dist


@dataclass(frozen=True)
class AlgebraCertificate:
    delta: float
    constant: float
    radius: float
    argmax: tuple[float, float, float]

    def bound(self, dist):
        return self.delta * np.asarray(dist) + self.constant


def algebra_certificate(
    model: StressModel, delta: float, *, lattice: int = 96, angles: int = 33, polish: int = 3
) -> AlgebraCertificate:
    """Sampled constant ``C`` with ``|S(Q)-S(P)-mu_inf(Q-P)| <= delta|Q-P| + C``.

    The search radius is four times the larger of the radii where the
    linearity modulus drops below ``delta/2`` and where the Jacobian modulus
    drops below ``delta``. The radius lattice mixes linear and geometric
    spacing; the best lattice points are then polished by a local optimizer.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    if model.is_linear:
        return AlgebraCertificate(delta, 0.0, 0.0, (0.0, 0.0, 1.0))
    radius = max(linearity_threshold(model, 0.5 * delta), jacobian_threshold(model, delta), 1.0)
    if model.family == "capped":
        radius = max(radius, model.kink_radius)
    R = 4.0 * radius
    radii = np.unique(
        np.concatenate(
            [[0.0], np.linspace(0.0, R, lattice), R * np.logspace(-8, 0, lattice)]
        )
    )
    cosines = np.concatenate([np.cos(np.linspace(0.0, np.pi, angles)), [-1.0, 1.0]])
    A, B, Cc = np.meshgrid(radii, radii, cosines, indexing="ij")
    values = _defect(model, A, B, Cc, delta)
    flat = values.ravel()
    best = float(np.max(flat))
    order = np.argsort(flat)[::-1][:polish]
    arg = (float(A.ravel()[order[0]]), float(B.ravel()[order[0]]), float(Cc.ravel()[order[0]]))

    def negative(x):
        a, b, c = abs(x[0]), abs(x[1]), float(np.clip(x[2], -1.0, 1.0))
        return -float(_defect(model, a, b, c, delta))

    for idx in order:
        x0 = np.array([A.ravel()[idx], B.ravel()[idx], Cc.ravel()[idx]])
        res = optimize.minimize(negative, x0, method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 400})
        if -res.fun > best:
            best = -res.fun
            arg = (abs(res.x[0]), abs(res.x[1]), float(np.clip(res.x[2], -1, 1)))
    return AlgebraCertificate(delta, max(best, 0.0), R, arg)


# -- growth and coercivity ----------------------------------------------------


@dataclass
class GrowthReport:
    constants: tuple[float, float, float]
    tightest_c0: float
    tightest_c1: float
    violations: list[int]

    @property
    def ok(self) -> bool:
        return not self.violations


def check_growth(model: StressModel, samples, *, rtol: float = 1e-12) -> GrowthReport:
    """Validate coercivity and growth with the closed-form constants on ``samples``.

    ``tightest_c0`` / ``tightest_c1`` are the best constants the samples allow
    given the model's ``c2``.
    """
    Q = np.asarray(samples, dtype=float)
    if Q.ndim == 2:
        Q = Q[None]
    if len(Q) == 0:
        raise ValueError("need at least one sample")
    c0, c1, c2 = model.constants
    S = eval_stress(model, Q)
    work = frobenius_product(S, Q)
    qs2 = frobenius(symmetrize(Q)) ** 2
    qn = frobenius(Q)
    sn = frobenius(S)
    scale = 1.0 + qn * qn
    bad_coercive = work < c0 * qs2 - c2 - rtol * scale
    bad_growth = sn > c1 * qn + c2 + rtol * scale
    violations = np.flatnonzero(bad_coercive | bad_growth).tolist()
    with np.errstate(divide="ignore", invalid="ignore"):
        c0_emp = np.where(qs2 > 0, (work + c2) / qs2, np.inf)
        c1_emp = np.where(qn > 0, (sn - c2) / qn, -np.inf)
    return GrowthReport((c0, c1, c2), float(np.min(c0_emp)), float(np.max(c1_emp)), violations)


def random_tensors(rng: np.random.Generator, count: int, n: int = 2, *,
                   low: float = 1e-3, high: float = 1e3) -> np.ndarray:
    """Tensors with random directions and log-uniform Frobenius norms in ``[low, high]``."""
    Q = rng.standard_normal((count, n, n))
    Q /= frobenius(Q)[:, None, None]
    scale = np.exp(rng.uniform(np.log(low), np.log(high), count))
    return Q * scale[:, None, None]


def rotation(theta: float, n: int = 2, axis: tuple[int, int] = (0, 1)) -> np.ndarray:
    R = np.eye(n)
    i, j = axis
    c, s = np.cos(theta), np.sin(theta)
    R[i, i], R[i, j], R[j, i], R[j, j] = c, -s, s, c
    return R
