"""Euler-Maruyama simulation of the interacting particle system.

Each particle owns a counter-based Philox stream keyed by ``(seed, id)``, so
estimates do not depend on how work is split across threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .asymptotics import _window
from .errors import SimulationError
from .models import ProblemSpec

__all__ = ["McConfig", "McEstimate", "particle_generator", "simulate", "sweep_beta", "derive_seed"]

_BLOCK_BYTES = 16 * 2**20


@dataclass(frozen=True)
class McConfig:
    """Particle-simulation settings.

    ``dt=None`` selects ``min(1e-3, eps^2/4)``, or ``min(1e-3, eps^2/20)``
    for the quartic noise laws whose stiff restoring force would otherwise
    destabilise the explicit step in the tails; colored runs require
    ``dt <= eps^2/2``.  The estimate averages the empirical mean over
    ``[burn_in, burn_in + window]``.
    """

    n_particles: int = 2000
    dt: float | None = None
    burn_in: float = 50.0
    window: float = 50.0
    seed: int = 0
    initial_mean: float = 0.1
    initial_var: float = 0.1
    n_batches: int = 20
    record_every: int | None = None

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be positive")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.burn_in < 0 or not self.window > 0:
            raise ValueError("burn_in must be >= 0 and window > 0")
        if self.initial_var < 0:
            raise ValueError("initial_var must be nonnegative")
        if self.n_batches < 2:
            raise ValueError("need at least two batches")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def with_(self, **changes):
        return replace(self, **changes)

    def resolved_dt(self, spec: ProblemSpec):
        if spec.noise.is_white:
            return 1e-3 if self.dt is None else self.dt
        limit = 0.5 * spec.epsilon**2
        frac = 20.0 if spec.noise.tag in ("B", "NS") else 4.0
        dt = min(1e-3, spec.epsilon**2 / frac) if self.dt is None else self.dt
        if dt > limit:
            raise ValueError(f"dt={dt} exceeds eps^2/2={limit} for colored noise")
        return dt


@dataclass
class McEstimate:
    """Time-averaged statistics with batch-means standard errors."""

    m_hat: float
    std_error: float
    variance: float = float("nan")
    variance_error: float = float("nan")
    eta_variance: float = float("nan")
    eta_variance_error: float = float("nan")
    trajectory: np.ndarray | None = None
    error: str | None = None

    @property
    def ok(self):
        return self.error is None


def particle_generator(seed, particle_id):
    """Generator for one particle, keyed by ``seed * 2^64 + particle_id``."""
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) + int(particle_id)))


def _batch(series, n_batches):
    usable = len(series) - len(series) % n_batches
    means = series[:usable].reshape(n_batches, -1).mean(axis=1)
    return float(series[:usable].mean()), float(means.std(ddof=1) / math.sqrt(n_batches))


def _sample_noise_law(gen, potential, size):
    """Rejection sampling from ``exp(-V_eta)`` with a uniform proposal on its bulk."""
    lo, hi, vmin = _window(potential, drop=30.0)
    out = np.empty(0)
    while out.size < size:
        y = gen.uniform(lo, hi, size=4 * size)
        accept = gen.uniform(size=4 * size) < np.exp(-(potential(y) - vmin))
        out = np.concatenate([out, y[accept]])
    return out[:size]


def _initial_state(spec, cfg, gens):
    n = cfg.n_particles
    x = np.empty(n)
    noise = np.zeros((spec.noise.noise_dims, n))
    sd = math.sqrt(cfg.initial_var)
    for i, g in enumerate(gens):
        x[i] = cfg.initial_mean + sd * g.standard_normal()
        if spec.noise.tag in ("OU", "H"):
            noise[:, i] = g.standard_normal(spec.noise.noise_dims)
        elif spec.noise.tag in ("B", "NS"):
            noise[0, i] = _sample_noise_law(g, spec.noise.potential, 1)[0]
    return x, noise


def simulate(spec: ProblemSpec, cfg: McConfig | None = None, keep_trajectory=False) -> McEstimate:
    """Simulate the particle system and estimate the stationary mean."""
    cfg = cfg or McConfig()
    dt = cfg.resolved_dt(spec)
    n = cfg.n_particles
    n_burn = int(round(cfg.burn_in / dt))
    n_win = int(round(cfg.window / dt))
    if n_win < cfg.n_batches:
        raise ValueError("averaging window shorter than the number of batches")
    total = n_burn + n_win
    gens = [particle_generator(cfg.seed, i) for i in range(n)]
    x, noise = _initial_state(spec, cfg, gens)

    vprime = spec.potential.deriv()
    beta, theta, tag = spec.beta, spec.theta, spec.noise.tag
    white_amp = math.sqrt(2 * dt / beta)
    if not spec.noise.is_white:
        eps = spec.epsilon
        couple = spec.zeta / eps * math.sqrt(2 / beta) * dt
        rate = dt / eps**2
        kick = math.sqrt(2 * dt) / eps
        if tag in ("B", "NS"):
            noise_force = spec.noise.potential.deriv()

    block = max(1, min(total, _BLOCK_BYTES // (8 * n)))
    means = np.empty(n_win)
    sq = np.empty(n_win)
    eta_sq = np.empty(n_win)
    stride = cfg.record_every or max(1, total // 1000)
    traj = []
    step = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while step < total:
            k = min(block, total - step)
            xi = np.empty((k, n))
            for i, g in enumerate(gens):
                xi[:, i] = g.standard_normal(k)
            for j in range(k):
                xbar = x.mean()
                if not math.isfinite(xbar):
                    t_fail = (step + j) * dt
                    raise SimulationError(f"non-finite particle state at step {step + j} (t={t_fail:.6g}, dt={dt})")
                drift = -vprime(x) - theta * (x - xbar)
                if tag == "white":
                    x = x + drift * dt + white_amp * xi[j]
                else:
                    eta = noise[0]
                    x = x + drift * dt + couple * eta
                    if tag == "OU":
                        noise[0] = eta - rate * eta + kick * xi[j]
                    elif tag == "H":
                        lam = noise[1]
                        noise[0] = eta + rate * lam
                        noise[1] = lam + rate * (-eta - lam) + kick * xi[j]
                    else:
                        noise[0] = eta - rate * noise_force(eta) + kick * xi[j]
                idx = step + j - n_burn
                if idx >= 0:
                    mu = x.mean()
                    means[idx] = mu
                    sq[idx] = np.mean((x - mu) ** 2)
                    if noise.shape[0]:
                        eta_sq[idx] = np.mean(noise[0] ** 2)
                if keep_trajectory and (step + j) % stride == 0:
                    traj.append(((step + j + 1) * dt, x.mean()))
            step += k
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(noise))):
                raise SimulationError(f"non-finite particle state within steps {step - k + 1}..{step} (dt={dt})")

    m_hat, m_err = _batch(means, cfg.n_batches)
    var, var_err = _batch(sq, cfg.n_batches)
    est = McEstimate(m_hat, m_err, var, var_err)
    if noise.shape[0]:
        est.eta_variance, est.eta_variance_error = _batch(eta_sq, cfg.n_batches)
    if keep_trajectory:
        est.trajectory = np.array(traj)
    return est


def derive_seed(master, index):
    """Seed of sweep point ``index``, independent of sweep order."""
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1, np.uint64)[0])


def sweep_beta(spec: ProblemSpec, betas, cfg: McConfig | None = None, threads=1):
    """Independent simulations per beta; failures are recorded, not raised."""
    betas = list(betas)
    if not betas:
        raise ValueError("betas must be nonempty")
    cfg = cfg or McConfig()

    def one(i):
        point_cfg = cfg.with_(seed=derive_seed(cfg.seed, i))
        try:
            return betas[i], simulate(spec.with_(beta=float(betas[i])), point_cfg)
        except (SimulationError, ValueError, FloatingPointError) as exc:
            nan = float("nan")
            return betas[i], McEstimate(nan, nan, error=str(exc))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(len(betas))))
    return [one(i) for i in range(len(betas))]
