"""Self-consistency maps, their fixed points and branches over beta."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
from numpy.polynomial import Polynomial
from scipy.integrate import quad

from .asymptotics import _as_poly, _window, approx_R, corrective_drift, noise_generator
from .errors import ConvergenceError, QuadratureError
from .hermite import IndexSet, make_index_set
from .models import ProblemSpec, bistable_potential
from .operators import OperatorMatrix, fokker_planck_template
from .solver import SolverConfig, compute_first_moment, steady_state_linear

__all__ = [
    "white_R",
    "white_variance",
    "free_energy",
    "colored_R",
    "SelfConsistencyMap",
    "BACKENDS",
    "default_sigma",
    "find_fixed_points",
    "classify_stability",
    "BranchPoint",
    "BifurcationBranch",
    "continue_branch",
    "white_critical_beta",
    "locate_pitchfork",
]

BACKENDS = ("WhiteExact", "AsymptoticOU", "SpectralLinear", "SpectralMcKean")


def _q(fn, a, b):
    # integrands are scaled to peak at 1, so an absolute tolerance is meaningful
    val, err = quad(fn, a, b, epsabs=1e-14, epsrel=1e-13, limit=400, full_output=1)[:2]
    if not np.isfinite(val) or err > 1e-10:
        raise QuadratureError(f"quadrature did not converge (estimate {val}, error {err})")
    return val


@functools.lru_cache(maxsize=4096)
def _white_moments(coef, m, beta, theta):
    veff = Polynomial(coef) + theta / 2 * Polynomial([-m, 1.0]) ** 2
    # integrand below exp(-36) ~ 2e-16 relative to its peak outside the window
    lo, hi, vmin = _window(veff, beta, drop=36.0)
    w = lambda x: math.exp(-beta * (veff(x) - vmin))
    z = _q(w, lo, hi)
    mean = _q(lambda x: x * w(x), lo, hi) / z
    var = _q(lambda x: (x - mean) ** 2 * w(x), lo, hi) / z
    return math.log(z) - beta * vmin, mean, var


def _coef(potential):
    potential = bistable_potential() if potential is None else _as_poly(potential)
    return tuple(float(c) for c in potential.coef)


def white_R(m, beta, theta, potential=None):
    """First moment of ``exp(-beta V_eff(x; m, theta)) / Z``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return _white_moments(_coef(potential), float(m), float(beta), float(theta))[1]


def white_variance(m, beta, theta, potential=None):
    return _white_moments(_coef(potential), float(m), float(beta), float(theta))[2]


def free_energy(m, beta, theta, potential=None):
    """Free energy of the one-parameter family, ``-ln Z / beta - theta/2 (R - m)^2``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    log_z, mean, _ = _white_moments(_coef(potential), float(m), float(beta), float(theta))
    return -log_z / beta - 0.5 * theta * (mean - m) ** 2


def _noise_degree(index_set: IndexSet):
    return int(index_set.max_degrees[1])


def colored_R(m, beta, spec: ProblemSpec, index_set: IndexSet, sigma, x_weight="potential",
              corrective=None, cfg=None, initial=None, return_field=False):
    """First moment of the stationary Galerkin solution with the mean frozen at ``m``.

    For asymmetric noise potentials the corrective drift ``mu_d / eps`` and
    the shift ``|lambda_0| / eps^2`` (the discrete noise ground eigenvalue)
    are included unless ``corrective`` is False.
    """
    if spec.noise.is_white:
        raise ValueError("colored_R needs a colored noise model")
    template = fokker_planck_template(spec, index_set, sigma, x_weight)
    if corrective is None:
        corrective = not spec.noise.symmetric
    mu, shift = _corrective_terms(spec, index_set, sigma, beta) if corrective else (0.0, 0.0)
    op = template.assemble(beta=beta, theta=spec.theta, m=m, epsilon=spec.epsilon, mu=mu)
    if shift:
        op = OperatorMatrix(op.matrix + shift / spec.epsilon**2 * sps.identity(op.shape[0]), op.basis,
                            op.predicted_bandwidth)
    basis = template.basis(beta)
    cfg = cfg or SolverConfig(steady_tol=1e-11)
    state = steady_state_linear(op, cfg, initial=initial, basis=basis)
    r = compute_first_moment(state)
    return (r, state) if return_field else r


def _corrective_terms(spec, index_set, sigma, beta):
    """``(mu_d, |lambda_0|)`` of the discrete noise generator for overdamped noise."""
    if spec.noise.tag not in ("B", "NS"):
        return 0.0, 0.0
    degree, sig = _noise_degree(index_set), float(sigma[1])
    vals = noise_generator(spec.noise.potential, degree, sig)[3]
    mu = corrective_drift(spec.noise.potential, degree, sig, beta, spec.zeta)
    return mu, abs(float(vals[0]))


def default_sigma(noise):
    """Hermite scalings that resolve the bistable problem at moderate to low temperature.

    Gaussian noise (OU, H) is represented exactly in eta by unit scaling;
    the quartic noise laws converge fastest near 0.5.
    """
    if noise.tag in ("OU", "H"):
        return (0.3,) + (1.0,) * noise.noise_dims
    if noise.tag in ("B", "NS"):
        return (0.3, 0.5)
    return (0.3,)


class SelfConsistencyMap:
    """``m -> R(m, beta)`` for one of :data:`BACKENDS`.

    ``WhiteExact`` integrates the explicit white-noise density, ``AsymptoticOU``
    uses the two-term small-eps expansion, ``SpectralLinear`` takes the first
    moment of the Galerkin steady state of the colored-noise equation frozen
    at ``m``, and ``SpectralMcKean`` does the same for the Galerkin
    discretisation of whichever noise the problem carries, white included.
    """

    def __init__(self, backend, spec: ProblemSpec, index_set: IndexSet | None = None, sigma=None,
                 x_weight="potential", cfg: SolverConfig | None = None, corrective=None):
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
        if backend == "WhiteExact" and not spec.noise.is_white:
            raise ValueError("WhiteExact requires white noise (no eps)")
        if backend == "AsymptoticOU" and spec.noise.tag != "OU":
            raise ValueError("AsymptoticOU requires the OU noise model")
        if backend == "SpectralLinear" and spec.noise.is_white:
            raise ValueError("SpectralLinear requires a colored noise model")
        spectral = backend.startswith("Spectral")
        if spectral:
            dims = 1 + spec.noise.noise_dims
            if index_set is None:
                index_set = make_index_set("triangle", 30, dims)
            if sigma is None:
                sigma = default_sigma(spec.noise)
            sigma = tuple(float(s) for s in np.broadcast_to(np.asarray(sigma, float), (dims,)))
        self.backend = backend
        self.spec = spec
        self.index_set = index_set
        self.sigma = sigma
        self.x_weight = x_weight
        self.cfg = cfg or SolverConfig(steady_tol=1e-11)
        self.corrective = corrective
        self._warm = None
        self.evaluations = 0

    @property
    def epsilon(self):
        return None if self.spec.noise.is_white else self.spec.epsilon

    def describe(self):
        out = {"backend": self.backend, "spec": self.spec.describe()}
        if self.index_set is not None:
            out["index_set"] = self.index_set.describe()
            out["sigma"] = list(self.sigma)
            out["x_weight"] = self.x_weight
        return out

    def __call__(self, m, beta=None):
        beta = self.spec.beta if beta is None else float(beta)
        self.evaluations += 1
        spec = self.spec
        if self.backend == "WhiteExact":
            return white_R(m, beta, spec.theta, spec.potential)
        if self.backend == "AsymptoticOU":
            return approx_R(m, beta, spec.theta, spec.epsilon, "OU", spec.potential)
        if spec.noise.is_white:
            return self._spectral_white(m, beta)
        r, state = colored_R(m, beta, spec, self.index_set, self.sigma, self.x_weight, self.corrective,
                             self.cfg, initial=self._warm_start(), return_field=True)
        self._warm = state
        return r

    def _warm_start(self):
        if self._warm is None or len(self._warm.coeffs) != len(self.index_set):
            return None
        return self._warm.coeffs

    def _spectral_white(self, m, beta):
        template = fokker_planck_template(self.spec, self.index_set, self.sigma, self.x_weight)
        op = template.assemble(beta=beta, theta=self.spec.theta, m=m)
        state = steady_state_linear(op, self.cfg, initial=self._warm_start(), basis=template.basis(beta))
        self._warm = state
        return compute_first_moment(state)

    def residual(self, m, beta=None):
        return self(m, beta) - m

    def slope(self, m, beta=None, step=1e-4):
        """Centered difference of ``R(m) - m`` in ``m``."""
        return (self(m + step, beta) - self(m - step, beta)) / (2 * step) - 1.0


def find_fixed_points(rmap, beta=None, interval=(-2.0, 2.0), n_grid=101, tol=1e-8, merge=1e-6):
    """Roots of ``R(m) - m`` by sign-change bracketing and bisection."""
    lo, hi = interval
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ValueError("interval must be finite and increasing")
    grid = np.linspace(lo, hi, n_grid)
    vals = np.array([rmap.residual(m, beta) for m in grid])
    roots = []
    for i in range(n_grid):
        if vals[i] == 0.0:
            roots.append(float(grid[i]))
        if i + 1 < n_grid and vals[i] * vals[i + 1] < 0:
            a, b, fa = grid[i], grid[i + 1], vals[i]
            while b - a > tol:
                c = 0.5 * (a + b)
                fc = rmap.residual(c, beta)
                if fc == 0.0:
                    a = b = c
                    break
                if (fc < 0) == (fa < 0):
                    a, fa = c, fc
                else:
                    b = c
            roots.append(float(0.5 * (a + b)))
    roots.sort()
    merged = []
    for r in roots:
        if not merged or r - merged[-1] > merge:
            merged.append(r)
    return merged


def classify_stability(rmap, m_root, beta=None, step=1e-4, marginal=1e-6):
    """``"unstable"`` if ``R - m`` increases through the root, ``"marginal"`` if flat."""
    s = rmap.slope(m_root, beta, step)
    if abs(s) < marginal:
        return "marginal"
    return "unstable" if s > 0 else "stable"


@dataclass
class BranchPoint:
    beta: float
    m: float
    stability: str
    residual: float
    step: float


@dataclass
class BifurcationBranch:
    points: list = field(default_factory=list)
    backend: str = ""
    epsilon: float | None = None
    model: str = "white"
    bifurcations: list = field(default_factory=list)
    status: str = "complete"
    diagnostic: str = ""

    @property
    def betas(self):
        return np.array([p.beta for p in self.points])

    @property
    def ms(self):
        return np.array([p.m for p in self.points])

    def rows(self):
        eps = "" if self.epsilon is None else repr(float(self.epsilon))
        return [(p.beta, p.m, p.stability, self.backend, eps, self.model) for p in self.points]


def _gradient(rmap, beta, m, step):
    f_m = rmap.slope(m, beta, step)
    f_b = (rmap.residual(m, beta + step) - rmap.residual(m, beta - step)) / (2 * step)
    return np.array([f_b, f_m])


def _correct(rmap, y, tol, step, max_iter):
    """Moore-Penrose corrector: minimal-norm Newton steps on the scalar residual."""
    for it in range(1, max_iter + 1):
        f = rmap.residual(y[1], y[0])
        g = _gradient(rmap, y[0], y[1], step)
        gg = g @ g
        if gg == 0 or not np.isfinite(f):
            return y, f, it, False
        delta = -f * g / gg
        y = y + delta
        if np.linalg.norm(delta) < 10 * tol:
            f = rmap.residual(y[1], y[0])
            if abs(f) < tol:
                return y, f, it, True
    return y, rmap.residual(y[1], y[0]), max_iter, False


def continue_branch(rmap, start, beta_range, h=0.05, h_min=1e-4, h_max=0.25, tol=1e-9,
                    fd_step=1e-4, max_iter=8, max_points=2000, direction=1, detect_pitchfork=True):
    """Pseudo-arclength continuation of ``R(m, beta) = m`` from ``start = (beta0, m0)``.

    Secant predictor of length ``h``; the corrector takes minimal-norm Newton
    steps on the scalar residual and is rejected if it lands more than
    ``1.25 h`` from the previous point.  ``h`` doubles after corrections needing at
    most three iterations and halves on failure; the branch is truncated with
    a diagnostic once ``h`` falls below ``h_min``.
    """
    lo, hi = beta_range
    y = np.array(start, dtype=float)
    f0 = rmap.residual(y[1], y[0])
    if abs(f0) > 1e3 * tol:
        y, f0, _, ok = _correct(rmap, y, tol, fd_step, max_iter)
        if not ok:
            raise ConvergenceError("continuation start is not a fixed point", abs(f0))
    branch = BifurcationBranch(backend=rmap.backend, epsilon=rmap.epsilon, model=rmap.spec.noise.tag)

    def add(point, f, hh):
        s = rmap.slope(point[1], point[0], fd_step)
        stab = "marginal" if abs(s) < 1e-6 else ("unstable" if s > 0 else "stable")
        branch.points.append(BranchPoint(float(point[0]), float(point[1]), stab, float(f), float(hh)))
        return s

    slope_prev = add(y, f0, 0.0)
    g = _gradient(rmap, y[0], y[1], fd_step)
    tangent = np.array([g[1], -g[0]])
    tangent /= np.linalg.norm(tangent)
    if tangent[0] * direction < 0:
        tangent = -tangent
    while len(branch.points) < max_points:
        pred = y + h * tangent
        new, f, iters, ok = _correct(rmap, pred, tol, fd_step, max_iter)
        # a corrector that wanders far from the predictor may have jumped branches
        if ok and np.linalg.norm(new - y) > 1.25 * h:
            ok = False
        if not ok:
            h *= 0.5
            if h < h_min:
                branch.status = "truncated"
                branch.diagnostic = f"corrector failed at h={h:.3g} near beta={y[0]:.6g}, m={y[1]:.6g}"
                break
            continue
        if not lo <= new[0] <= hi:
            break
        secant = new - y
        norm = np.linalg.norm(secant)
        if norm == 0:
            break
        tangent = secant / norm
        s = add(new, f, h)
        if detect_pitchfork and np.sign(s) != np.sign(slope_prev) and abs(new[1]) < 1e-6 and abs(y[1]) < 1e-6:
            branch.bifurcations.append(locate_pitchfork(rmap, (y[0], new[0]), fd_step))
        slope_prev = s
        y = new
        if iters <= 3:
            h = min(2 * h, h_max)
    return branch


def locate_pitchfork(rmap, bracket, step=1e-4, tol=1e-6, max_iter=60):
    """Bisection for ``dR/dm(0) = 1`` inside ``bracket`` on the m = 0 branch."""
    a, b = bracket
    fa = rmap.slope(0.0, a, step)
    for _ in range(max_iter):
        c = 0.5 * (a + b)
        fc = rmap.slope(0.0, c, step)
        if abs(fc) < 1e-4 and b - a < tol:
            break
        if (fc < 0) == (fa < 0):
            a, fa = c, fc
        else:
            b = c
        if b - a < tol:
            break
    return float(0.5 * (a + b))


def white_critical_beta(theta=1.0, potential=None, bracket=(0.1, 20.0), tol=1e-10):
    """Critical beta where ``dR/dm(0) = beta theta Var(rho(.; 0)) = 1``."""

    def g(beta):
        return beta * theta * white_variance(0.0, beta, theta, potential) - 1.0

    a, b = bracket
    fa, fb = g(a), g(b)
    if fa * fb > 0:
        raise ValueError("critical beta not bracketed")
    while b - a > tol:
        c = 0.5 * (a + b)
        fc = g(c)
        if (fc < 0) == (fa < 0):
            a, fa = c, fc
        else:
            b = c
    return 0.5 * (a + b)
