"""Time integration and steady states of the discretised Fokker-Planck systems."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
from scipy.integrate import solve_ivp

from .errors import ConvergenceError, OscillationError, SingularSystemError, SolverError
from .hermite import HermiteBasis, SpectralField, hermite_transform, moment_functional
from .linalg import LUFactor
from .operators import OperatorMatrix, fokker_planck_template, _infer_x_weight

__all__ = [
    "SolverConfig",
    "SolveResult",
    "MeanFieldOperator",
    "mass_functional",
    "first_moment_functional",
    "compute_mass",
    "compute_first_moment",
    "gaussian_field",
    "integrate_linear",
    "integrate_mckean",
    "semi_implicit_step",
    "steady_state_linear",
    "steady_state_mckean",
    "mean_field_operator",
]


@dataclass
class SolverConfig:
    """Numerical settings shared by the time steppers and steady-state searches."""

    scheme: str = "RK45"
    dt: float = 1.0
    rtol: float = 1e-8
    atol: float = 1e-8
    t_final: float = 10.0
    steady_tol: float = 1e-9
    renormalize: bool = True
    max_steps: int = 200000
    max_iter: int = 200
    n_output: int = 101

    def __post_init__(self):
        if self.scheme not in ("RK45", "SemiImplicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.steady_tol > 0:
            raise ValueError("steady_tol must be positive")


@dataclass
class SolveResult:
    field: SpectralField
    times: np.ndarray
    moments: np.ndarray
    steady: bool
    iterations: int
    snapshots: list = field(default_factory=list)


@functools.lru_cache(maxsize=256)
def _functionals(basis: HermiteBasis):
    ones = moment_functional(basis)
    powers = (1,) + (0,) * (basis.dims - 1)
    return ones, moment_functional(basis, powers)


def mass_functional(basis):
    """Vector ``l`` with ``l . c = int u`` for fields ``u`` in ``basis``."""
    return _functionals(basis)[0]


def first_moment_functional(basis):
    """Vector ``l`` with ``l . c = int x_1 u``."""
    return _functionals(basis)[1]


def compute_mass(field: SpectralField):
    return float(mass_functional(field.basis) @ field.coeffs)


def _moment_of(basis, coeffs):
    ones, xs = _functionals(basis)
    mass = float(ones @ coeffs)
    if abs(mass) < 1e-12:
        raise SolverError("total mass is numerically zero; first moment undefined")
    return float(xs @ coeffs) / mass


def compute_first_moment(field: SpectralField):
    """``<x, rho> / <1, rho>``; the division accounts for mass drift."""
    return _moment_of(field.basis, field.coeffs)


def gaussian_field(basis: HermiteBasis, mean, cov, d_hat=None):
    """Project a Gaussian density onto ``basis`` (quadrature evaluated in log space).

    ``mean`` and ``cov`` may cover only the leading dimensions; the remaining
    ones get a unit Gaussian.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    dims = basis.dims
    full_mean = np.zeros(dims)
    full_mean[: len(mean)] = mean
    full_cov = np.eye(dims)
    full_cov[: len(mean), : len(mean)] = cov
    prec = np.linalg.inv(full_cov)
    log_norm = -0.5 * dims * math.log(2 * math.pi) - 0.5 * math.log(np.linalg.det(full_cov))

    def log_density(*xs):
        diffs = [x - mu for x, mu in zip(xs, full_mean)]
        quad = sum(prec[i, j] * diffs[i] * diffs[j] for i in range(dims) for j in range(dims))
        return log_norm - 0.5 * quad

    if d_hat is None:
        d_hat = tuple(q + 10 for q in basis.quad_degree)
    return hermite_transform(log_density, basis, d_hat, log=True)


class MeanFieldOperator:
    """``m -> M(m) = base + m * slope``, the affine dependence on the mean."""

    def __init__(self, base: OperatorMatrix, slope: OperatorMatrix):
        self.base = base
        self.slope = slope
        self.basis = base.basis

    def __call__(self, m):
        return OperatorMatrix(self.base.matrix + m * self.slope.matrix, self.basis)


def mean_field_operator(template, beta, theta, epsilon=None, mu=0.0):
    base = template.assemble(beta=beta, theta=theta, m=0.0, epsilon=epsilon, mu=mu)
    slope = template.mean_derivative(beta=beta, theta=theta, epsilon=epsilon, mu=mu)
    return MeanFieldOperator(base, slope)


def _check_finite(v, t):
    if not np.all(np.isfinite(v)):
        raise SolverError(f"non-finite coefficients at t={t:.6g}")


def _output_times(cfg, t_eval):
    if t_eval is None:
        return np.linspace(0.0, cfg.t_final, cfg.n_output)
    return np.asarray(t_eval, dtype=float)


def _run_rk45(rhs, v0, cfg, times):
    def wrapped(t, v):
        out = rhs(v)
        _check_finite(out, t)
        return out

    sol = solve_ivp(wrapped, (0.0, float(times[-1])), v0, method="RK45", t_eval=times,
                    rtol=cfg.rtol, atol=cfg.atol)
    if sol.status != 0:
        raise SolverError(f"RK45 failed: {sol.message}")
    return sol.y.T, int(sol.nfev)


def integrate_linear(op: OperatorMatrix, rho0: SpectralField, cfg: SolverConfig | None = None,
                     t_eval=None, keep_snapshots=False) -> SolveResult:
    """Solve ``d rho / dt = M rho`` from ``rho0``."""
    cfg = cfg or SolverConfig()
    if op.shape[0] != len(rho0.coeffs):
        raise ValueError("operator and initial field have different sizes")
    times = _output_times(cfg, t_eval)
    mat = op.matrix
    if cfg.scheme == "RK45":
        states, count = _run_rk45(lambda v: mat @ v, rho0.coeffs, cfg, times)
        final = states[-1]
        steady = np.linalg.norm(mat @ final) < cfg.steady_tol * np.linalg.norm(final)
    else:
        lu = LUFactor(sps.identity(mat.shape[0], format="csr") - cfg.dt * mat)
        states, final, count, steady = _march(lambda v, m: lu.solve(v), rho0.coeffs, times, cfg, None)
    basis = rho0.basis
    moments = np.array([_safe_moment(basis, s) for s in states])
    snaps = [SpectralField(basis, s) for s in states] if keep_snapshots else []
    return SolveResult(SpectralField(basis, final), times, moments, bool(steady), count, snaps)


def _safe_moment(basis, coeffs):
    try:
        return _moment_of(basis, coeffs)
    except SolverError:
        return float("nan")


def _march(step, v0, times, cfg, m0):
    """Fixed-step marching to the output times; ``step(v, m)`` returns the next state."""
    n_steps = int(round(times[-1] / cfg.dt))
    if not math.isclose(n_steps * cfg.dt, times[-1], rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError("t_final must be a multiple of dt for the semi-implicit scheme")
    out_steps = np.round(times / cfg.dt).astype(int)
    states = []
    v = np.array(v0, dtype=float)
    m = m0
    steady = False
    k = 0
    for n in range(n_steps + 1):
        while k < len(out_steps) and out_steps[k] == n:
            states.append(v.copy())
            k += 1
        if n == n_steps:
            break
        new = step(v, m)
        _check_finite(new, (n + 1) * cfg.dt)
        steady = np.linalg.norm(new - v) < cfg.steady_tol * cfg.dt * np.linalg.norm(new)
        v = new
    return states, v, n_steps, steady


def integrate_mckean(op_builder: MeanFieldOperator, rho0: SpectralField, cfg: SolverConfig | None = None,
                     t_eval=None, keep_snapshots=False) -> SolveResult:
    """Solve the mean-field system ``d rho / dt = M(m(rho)) rho``."""
    cfg = cfg or SolverConfig()
    times = _output_times(cfg, t_eval)
    basis = rho0.basis
    base, slope = op_builder.base.matrix, op_builder.slope.matrix
    if cfg.scheme == "RK45":
        def rhs(v):
            m = _moment_of(basis, v)
            return base @ v + m * (slope @ v)

        states, count = _run_rk45(rhs, rho0.coeffs, cfg, times)
        final = states[-1]
        steady = np.linalg.norm(rhs(final)) < cfg.steady_tol * np.linalg.norm(final)
    else:
        def step(v, m):
            new, _ = _implicit_solve(op_builder, v, _moment_of(basis, v), cfg.dt, basis, False)
            return new

        states, final, count, steady = _march(step, rho0.coeffs, times, cfg, None)
    moments = np.array([_safe_moment(basis, s) for s in states])
    snaps = [SpectralField(basis, s) for s in states] if keep_snapshots else []
    return SolveResult(SpectralField(basis, final), times, moments, bool(steady), count, snaps)


def _implicit_solve(op_builder, v, m, dt, basis, renormalize):
    mat = op_builder(m).matrix
    system = sps.identity(mat.shape[0], format="csr") - dt * mat
    try:
        new = LUFactor(system).solve(v)
    except SingularSystemError as exc:
        raise SingularSystemError(f"I - dt M(m) is singular (dt={dt}, m={m}): {exc}") from exc
    if renormalize:
        new = new / (mass_functional(basis) @ new)
    return new, _moment_of(basis, new)


def semi_implicit_step(op_builder, state: SpectralField, dt, m=None, renormalize=False):
    """One step ``(I - dt M(m^n)) rho^{n+1} = rho^n``; returns ``(rho^{n+1}, m^{n+1})``."""
    basis = state.basis
    if m is None:
        m = compute_first_moment(state)
    new, m_new = _implicit_solve(op_builder, state.coeffs, m, dt, basis, renormalize)
    return SpectralField(basis, new), m_new


def steady_state_linear(op: OperatorMatrix, cfg: SolverConfig | None = None, initial=None,
                        basis: HermiteBasis | None = None) -> SpectralField:
    """Stationary mode of ``op`` by inverse iteration, normalised to unit mass.

    Iterates until the eigen-residual ``|M r - lambda r| / |r|`` (with the
    Rayleigh quotient ``lambda``) is below ``steady_tol``.  ``info`` reports
    that residual, the eigenvalue and ``|M r| / |r|``.
    """
    cfg = cfg or SolverConfig()
    basis = basis or op.basis
    mat = op.matrix.tocsr()
    n = mat.shape[0]
    scale = max(abs(mat).max(), 1.0)
    shift = 0.0
    try:
        lu = LUFactor(mat)
    except SingularSystemError:
        shift = 1e-10 * scale
        lu = LUFactor(mat - shift * sps.identity(n, format="csr"))
    v = np.ones(n) if initial is None else np.array(initial, dtype=float)
    v /= np.linalg.norm(v)
    residual = np.inf
    lam = 0.0
    for it in range(1, cfg.max_iter + 1):
        w = lu.solve(v)
        norm = np.linalg.norm(w)
        if not np.isfinite(norm) or norm == 0:
            raise ConvergenceError("inverse iteration produced a degenerate vector", residual)
        w /= norm
        mw = mat @ w
        lam = float(w @ mw)
        residual = float(np.linalg.norm(mw - lam * w))
        v = w
        if residual < cfg.steady_tol:
            break
    else:
        raise ConvergenceError(
            f"inverse iteration did not converge in {cfg.max_iter} iterations (residual {residual:.3e})",
            residual,
        )
    mass = mass_functional(basis) @ v
    if abs(mass) < 1e-14:
        raise SolverError("stationary mode has zero mass")
    v = v / mass
    stationary = float(np.linalg.norm(mat @ v) / np.linalg.norm(v))
    info = {"residual": stationary, "eigen_residual": residual, "eigenvalue": lam,
            "iterations": it, "shift": shift}
    return SpectralField(basis, v, info)


def _is_oscillating(increments):
    d = np.asarray(increments)
    if len(d) < 2 or np.any(d == 0):
        return False
    alternating = np.all(np.sign(d[1:]) == -np.sign(d[:-1]))
    growing = np.all(np.abs(d[1:]) >= np.abs(d[:-1]))
    return bool(alternating and growing)


def steady_state_mckean(spec, basis: HermiteBasis, cfg: SolverConfig | None = None, initial=None,
                        m0=0.0, mu=0.0, window=100):
    """Stationary mean-field state by semi-implicit marching with a large step.

    ``initial`` is a :class:`SpectralField`; by default the stationary state
    of the operator frozen at ``m0`` is used, so the sign of ``m0`` selects
    the branch.  Returns ``(field, m)``.
    """
    cfg = cfg or SolverConfig(scheme="SemiImplicit")
    template = fokker_planck_template(spec, basis.index_set, basis.sigma, _infer_x_weight(spec, basis))
    eps = None if spec.noise.is_white else spec.epsilon
    builder = mean_field_operator(template, spec.beta, spec.theta, eps, mu)
    if initial is None:
        initial = steady_state_linear(builder(m0), cfg, basis=basis)
    v = initial.coeffs / (mass_functional(basis) @ initial.coeffs)
    m = _moment_of(basis, v)
    increments = []
    dt = cfg.dt
    for n in range(1, cfg.max_steps + 1):
        new, m_new = _implicit_solve(builder, v, m, dt, basis, cfg.renormalize)
        rate_v = np.linalg.norm(new - v) / (dt * np.linalg.norm(new))
        rate_m = abs(m_new - m) / dt
        increments.append(m_new - m)
        if len(increments) > window:
            increments.pop(0)
            if _is_oscillating(increments):
                raise OscillationError(
                    f"mean alternates with growing amplitude (dt={dt}, beta={spec.beta}); use a smaller dt"
                )
        v, m = new, m_new
        if rate_v < cfg.steady_tol and rate_m < cfg.steady_tol:
            info = {"steps": n, "rate": float(rate_v), "m_rate": float(rate_m)}
            return SpectralField(basis, v, info), m
    raise ConvergenceError(f"semi-implicit marching not stationary after {cfg.max_steps} steps", rate_v)
