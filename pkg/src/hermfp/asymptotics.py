"""Small-correlation-time quantities.

Normalisation constants of the scaled noise, the centring shift of the tilted
noise potential, the first correction of the stationary density for OU noise,
and the Galerkin-level corrective drift and effective diffusion.
"""

from __future__ import annotations

import functools
import math
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np
import sympy as sp
from numpy.polynomial import Polynomial
from scipy.integrate import quad
from scipy.optimize import brentq

from .errors import QuadratureError, SingularSystemError, SolverError
from .hermite import HermiteBasis, SpectralField, make_index_set
from .models import bistable_potential, nonsymmetric_noise_potential
from .operators import ETA, OperatorTemplate, _poly_expr, conjugated_generator, position_matrix

__all__ = [
    "NoiseStationary",
    "ExpansionTerm",
    "compute_alpha_shift",
    "noise_generator",
    "solve_noise_poisson",
    "integrated_autocorrelation",
    "zeta_for_potential",
    "compute_zeta",
    "effective_potential",
    "ou_corrected_density",
    "ou_expansion_term",
    "approx_R",
    "critical_epsilon",
    "corrective_drift",
    "effective_diffusion",
]

DEFAULT_POISSON_DEGREE = 60
DEFAULT_POISSON_SIGMA = 0.5


def _as_poly(p):
    return p if isinstance(p, Polynomial) else Polynomial(p)


def _quad(fn, a, b, **kw):
    val, err = quad(fn, a, b, epsabs=kw.pop("epsabs", 1e-15), epsrel=kw.pop("epsrel", 1e-12),
                    limit=kw.pop("limit", 400), full_output=1, **kw)[:2]
    if not np.isfinite(val):
        raise QuadratureError("adaptive quadrature returned a non-finite value")
    return val


def _window(poly: Polynomial, scale=1.0, drop=40.0):
    """Interval outside which ``exp(-scale * (poly - min poly))`` is below ``exp(-drop)``."""
    crit = poly.deriv().roots()
    crit = crit[np.abs(crit.imag) < 1e-9].real
    vmin = float(np.min(poly(crit))) if len(crit) else float(poly(0.0))
    shifted = scale * (poly - vmin) - drop
    roots = shifted.roots()
    roots = roots[np.abs(roots.imag) < 1e-9].real
    lo, hi = float(roots.min()), float(roots.max())
    return lo, hi, vmin


@dataclass(frozen=True)
class NoiseStationary:
    """Stationary law ``exp(-V_eta) / Z`` of the noise process."""

    potential: Polynomial
    normalization: float
    first_moment: float
    variance: float

    @classmethod
    def from_potential(cls, potential):
        lo, hi, vmin = _window(potential)
        dens = lambda y: math.exp(-(potential(y) - vmin))
        z = _quad(dens, lo, hi)
        m1 = _quad(lambda y: y * dens(y), lo, hi) / z
        m2 = _quad(lambda y: y * y * dens(y), lo, hi) / z
        return cls(potential, z * math.exp(-vmin), m1, m2 - m1 * m1)


def compute_alpha_shift(tilt=1.0, bracket=(0.0, 2.0)):
    """Shift making the tilted bistable noise potential mean-zero.

    Solves ``int eta exp(-V_eta(eta; alpha)) d eta = 0`` by Brent's method on
    ``bracket``.
    """

    def first_moment(alpha):
        base = Polynomial([0.0, tilt, -0.5, 0.0, 0.25])
        pot = base(Polynomial([-alpha, 1.0]))
        lo, hi, vmin = _window(pot)
        return _quad(lambda y: y * math.exp(-(pot(y) - vmin)), lo, hi)

    a, b = bracket
    fa, fb = first_moment(a), first_moment(b)
    # the integrand is O(1), so values at roundoff level are exact roots
    if abs(fa) < 1e-13:
        return float(a)
    if abs(fb) < 1e-13:
        return float(b)
    if fa * fb > 0:
        raise SolverError(f"centring condition not bracketed on [{a}, {b}]")
    return float(brentq(first_moment, a, b, xtol=1e-14, rtol=1e-14, maxiter=200))


@functools.lru_cache(maxsize=64)
def _noise_matrices(coef, degree, sigma):
    potential = Polynomial(coef)
    v = _poly_expr(potential, ETA)
    weight = v + ETA**2 / (2 * sp.Float(sigma) ** 2)
    gen = conjugated_generator([-sp.diff(v, ETA)], [sp.Integer(1)], [weight], (ETA,))
    index_set = make_index_set("triangle", degree, 1)
    template = OperatorTemplate(gen, [weight], (ETA,), index_set, (sigma,))
    op = template.assemble()
    basis = template.basis()
    gen_mat = op.toarray()
    gen_mat = 0.5 * (gen_mat + gen_mat.T)
    pos = position_matrix(basis).toarray()
    vals, vecs = np.linalg.eigh(gen_mat)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    ground = vecs[:, 0]
    if ground[0] < 0:
        ground = -ground
    return basis, gen_mat, pos, vals, vecs, ground


def noise_generator(potential, degree=DEFAULT_POISSON_DEGREE, sigma=DEFAULT_POISSON_SIGMA):
    """Symmetric matrix of the noise generator in ``exp(-(V_eta + eta^2/(2 sigma^2))/2) H``.

    Returns ``(basis, matrix, position, eigenvalues, eigenvectors, ground)``
    with eigenvalues in decreasing order and the ground mode signed so that
    its overlap with the Gaussian factor is positive.
    """
    coef = tuple(float(c) for c in _as_poly(potential).coef)
    return _noise_matrices(coef, int(degree), float(sigma))


def _restricted_solve(vals, vecs, rhs, shift=0.0):
    """Apply ``(-M + shift)^{-1}`` on the complement of the ground mode."""
    proj = vecs[:, 1:].T @ rhs
    denom = -vals[1:] + shift
    if np.any(denom <= 0):
        raise SingularSystemError("noise generator has more than one nonnegative eigenvalue")
    return vecs[:, 1:] @ (proj / denom)


def solve_noise_poisson(potential, degree=DEFAULT_POISSON_DEGREE, sigma=DEFAULT_POISSON_SIGMA):
    """Solve ``-L0 h = eta rho_eta`` in the weighted Hermite space, ``h`` orthogonal to ``rho_eta``.

    ``h = phi rho_eta`` where ``phi`` solves the backward Poisson problem
    ``-L0 phi = eta``.  The returned field carries ``info["integral"]``, the
    Green-Kubo integral ``int_0^inf K(t) dt = <eta, phi>`` of the stationary
    noise.
    """
    basis, _, pos, vals, vecs, ground = noise_generator(potential, degree, sigma)
    rhs = pos @ ground
    sol = _restricted_solve(vals, vecs, rhs)
    integral = float(rhs @ sol)
    return SpectralField(basis, sol, {"integral": integral, "ground_eigenvalue": float(vals[0])})


def integrated_autocorrelation(potential, degree=DEFAULT_POISSON_DEGREE, sigma=DEFAULT_POISSON_SIGMA):
    return solve_noise_poisson(potential, degree, sigma).info["integral"]


def zeta_for_potential(potential, degree=DEFAULT_POISSON_DEGREE, sigma=DEFAULT_POISSON_SIGMA):
    """``zeta = (2 int_0^inf K)^(-1/2)`` for overdamped noise in ``potential``."""
    return 1.0 / math.sqrt(2.0 * integrated_autocorrelation(potential, degree, sigma))


def compute_zeta(model, degree=DEFAULT_POISSON_DEGREE, sigma=DEFAULT_POISSON_SIGMA):
    """Noise normalisation for ``OU``, ``H``, ``B`` or ``NS``."""
    if model in ("OU", "H"):
        return 1.0 / math.sqrt(2.0)
    if model == "B":
        return zeta_for_potential(bistable_potential(), degree, sigma)
    if model == "NS":
        return zeta_for_potential(nonsymmetric_noise_potential(compute_alpha_shift()), degree, sigma)
    raise ValueError(f"unknown noise model {model!r}")


# OU expansion of the x-marginal


def effective_potential(potential, m, theta):
    """``V(x) + theta (x^2/2 - m x)``."""
    return _as_poly(potential) + Polynomial([0.0, -theta * m, 0.5 * theta])


class _BoltzmannMoments:
    """Expectations under ``exp(-beta V_eff) / Z`` by adaptive quadrature (cached)."""

    _lock = threading.Lock()
    _cache: dict = {}

    @classmethod
    def get(cls, potential, m, beta, theta):
        key = (tuple(float(c) for c in _as_poly(potential).coef), float(m), float(beta), float(theta))
        with cls._lock:
            hit = cls._cache.get(key)
        if hit is not None:
            return hit
        veff = effective_potential(potential, m, theta)
        d1, d2 = veff.deriv(1), veff.deriv(2)
        lo, hi, vmin = _window(veff, beta, drop=36.0)
        base = lambda x: math.exp(-beta * (veff(x) - vmin))
        # the correction is (corr(x) + C) with corr = V''_eff - beta/2 V'_eff^2
        corr = lambda x: d2(x) - 0.5 * beta * d1(x) ** 2
        z = _quad(base, lo, hi)
        mean = _quad(lambda x: x * base(x), lo, hi) / z
        e_corr = _quad(lambda x: corr(x) * base(x), lo, hi) / z
        e_xcorr = _quad(lambda x: x * corr(x) * base(x), lo, hi) / z
        log_z = math.log(z) - beta * vmin
        out = {"log_z": log_z, "mean": mean, "C": -e_corr, "x_corr": e_xcorr, "vmin": vmin,
               "window": (lo, hi)}
        with cls._lock:
            cls._cache.setdefault(key, out)
        return out


def ou_corrected_density(x, m, beta, theta, epsilon, potential=None):
    """``rho_inf (1 + eps^2 (C_OU - beta/2 V_eff'^2 + V_eff''))`` for OU noise."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    potential = bistable_potential() if potential is None else _as_poly(potential)
    mom = _BoltzmannMoments.get(potential, m, beta, theta)
    veff = effective_potential(potential, m, theta)
    x = np.asarray(x, dtype=float)
    rho = np.exp(-beta * veff(x) - mom["log_z"])
    corr = mom["C"] - 0.5 * beta * veff.deriv(1)(x) ** 2 + veff.deriv(2)(x)
    return rho * (1.0 + epsilon**2 * corr)


@dataclass(frozen=True)
class ExpansionTerm:
    """First nonzero correction ``p_delta`` of the x-marginal."""

    model: str
    order: int
    density: Callable


def ou_expansion_term(m, beta, theta, potential=None):
    """The order-2 correction ``p_2(x)`` for OU noise as an :class:`ExpansionTerm`."""
    potential = bistable_potential() if potential is None else _as_poly(potential)
    mom = _BoltzmannMoments.get(potential, m, beta, theta)
    veff = effective_potential(potential, m, theta)

    def p2(x):
        x = np.asarray(x, dtype=float)
        rho = np.exp(-beta * veff(x) - mom["log_z"])
        return rho * (mom["C"] - 0.5 * beta * veff.deriv(1)(x) ** 2 + veff.deriv(2)(x))

    return ExpansionTerm("OU", 2, p2)


def approx_R(m, beta, theta, epsilon, model="OU", potential=None):
    """Truncated self-consistency map ``R_0 + eps^2 R_2`` (OU noise only)."""
    if model != "OU":
        raise ValueError("the explicit expansion is available for OU noise only")
    potential = bistable_potential() if potential is None else _as_poly(potential)
    mom = _BoltzmannMoments.get(potential, m, beta, theta)
    r0 = mom["mean"]
    r2 = mom["C"] * mom["mean"] + mom["x_corr"]
    return r0 + epsilon**2 * r2


def _expansion_slopes(beta, theta, potential, step=1e-4):
    r0 = lambda m: approx_R(m, beta, theta, 0.0, potential=potential)
    r2 = lambda m: (approx_R(m, beta, theta, 1.0, potential=potential) - r0(m))
    a = (r0(step) - r0(-step)) / (2 * step)
    b = (r2(step) - r2(-step)) / (2 * step)
    return a, b


def critical_epsilon(beta_c, model="OU", theta=1.0, potential=None, step=1e-4, order=2):
    """Nonnegative ``eps`` with ``R_0'(0) + eps^order R_2'(0) = 1`` at ``beta_c``."""
    if model != "OU":
        raise ValueError("critical_epsilon uses the OU expansion")
    potential = bistable_potential() if potential is None else _as_poly(potential)
    a, b = _expansion_slopes(beta_c, theta, potential, step)
    if b == 0:
        return [0.0] if abs(a - 1) < 1e-12 else []
    target = (1.0 - a) / b
    if target < 0:
        return []
    return [float(target ** (1.0 / order))]


# Galerkin-level drift and diffusion


def corrective_drift(potential, degree, sigma, beta, zeta):
    """``mu_d = -sqrt(2/beta) zeta int eta phi_0^2 exp(V_eta)`` for the discrete ground mode."""
    _, _, pos, _, _, ground = noise_generator(potential, degree, sigma)
    return -math.sqrt(2.0 / beta) * zeta * float(ground @ pos @ ground)


def effective_diffusion(potential, degree, sigma, beta, zeta, mu=None):
    """Effective diffusion ``A_d`` of the x-dynamics in the limit eps -> 0."""
    _, _, pos, vals, vecs, ground = noise_generator(potential, degree, sigma)
    if mu is None:
        mu = corrective_drift(potential, degree, sigma, beta, zeta)
    b_phi = mu * ground + math.sqrt(2.0 / beta) * zeta * (pos @ ground)
    sol = _restricted_solve(vals, vecs, b_phi, shift=abs(vals[0]))
    return float(b_phi @ sol)
