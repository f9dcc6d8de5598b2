"""Problem description: confining potential, interaction, temperature and noise."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.polynomial import Polynomial

__all__ = [
    "NoiseModel",
    "ProblemSpec",
    "bistable_potential",
    "quadratic_potential",
    "nonsymmetric_noise_potential",
]

NOISE_TAGS = ("white", "OU", "H", "B", "NS")


def bistable_potential():
    """``x^4/4 - x^2/2``."""
    return Polynomial([0.0, 0.0, -0.5, 0.0, 0.25])


def quadratic_potential():
    """``x^2/2``."""
    return Polynomial([0.0, 0.0, 0.5])


def nonsymmetric_noise_potential(alpha):
    """Tilted bistable potential shifted by ``alpha``: ``B(y) + y`` at ``y = eta - alpha``."""
    base = Polynomial([0.0, 1.0, -0.5, 0.0, 0.25])
    return base(Polynomial([-alpha, 1.0]))


def _check_confining(poly, what):
    coef = np.trim_zeros(np.asarray(poly.coef, dtype=float), "b")
    deg = len(coef) - 1
    if deg < 2 or deg % 2 or coef[-1] <= 0:
        raise ValueError(f"{what} must be a polynomial of even degree >= 2 with positive leading coefficient")


@dataclass(frozen=True)
class NoiseModel:
    """Noise driving the particles.

    ``tag`` is one of ``white``, ``OU``, ``H`` (harmonic, gamma = 1), ``B``
    (bistable potential) or ``NS`` (shifted tilted bistable potential).  For
    ``B`` and ``NS`` the noise is the overdamped Langevin dynamics in
    ``potential``.
    """

    tag: str
    potential: Polynomial | None = field(default=None, compare=False)
    alpha: float = 0.0

    def __post_init__(self):
        if self.tag not in NOISE_TAGS:
            raise ValueError(f"unknown noise model {self.tag!r}; expected one of {NOISE_TAGS}")
        if self.tag in ("B", "NS"):
            if self.potential is None:
                raise ValueError("non-Gaussian noise needs a potential")
            _check_confining(self.potential, "noise potential")

    @classmethod
    def white(cls):
        return cls("white")

    @classmethod
    def ou(cls):
        return cls("OU")

    @classmethod
    def harmonic(cls):
        return cls("H")

    @classmethod
    def bistable(cls):
        return cls("B", bistable_potential())

    @classmethod
    def nonsymmetric(cls, alpha=None):
        if alpha is None:
            from .asymptotics import compute_alpha_shift

            alpha = compute_alpha_shift()
        return cls("NS", nonsymmetric_noise_potential(alpha), float(alpha))

    @classmethod
    def from_tag(cls, tag):
        makers = {"white": cls.white, "OU": cls.ou, "H": cls.harmonic, "B": cls.bistable,
                  "NS": cls.nonsymmetric}
        if tag not in makers:
            raise ValueError(f"unknown noise model {tag!r}; expected one of {NOISE_TAGS}")
        return makers[tag]()

    @property
    def is_white(self):
        return self.tag == "white"

    @property
    def noise_dims(self):
        return {"white": 0, "OU": 1, "H": 2, "B": 1, "NS": 1}[self.tag]

    @property
    def symmetric(self):
        """True when the noise law is invariant under ``eta -> -eta``."""
        return self.tag != "NS"

    def stationary_potentials(self):
        """Per-noise-variable potentials of the stationary law (up to constants)."""
        if self.tag in ("OU",):
            return (Polynomial([0.0, 0.0, 0.5]),)
        if self.tag == "H":
            return (Polynomial([0.0, 0.0, 0.5]), Polynomial([0.0, 0.0, 0.5]))
        if self.tag in ("B", "NS"):
            return (self.potential,)
        return ()

    def key(self):
        coef = () if self.potential is None else tuple(float(c) for c in self.potential.coef)
        return (self.tag, coef)


_ZETA_CACHE: dict = {}


def default_zeta(noise):
    """Normalisation making the integrated autocorrelation of the scaled noise 1/2."""
    if noise.tag in ("white", "OU", "H"):
        return 1.0 / math.sqrt(2.0)
    key = noise.key()
    if key not in _ZETA_CACHE:
        from .asymptotics import zeta_for_potential

        _ZETA_CACHE[key] = zeta_for_potential(noise.potential)
    return _ZETA_CACHE[key]


@dataclass(frozen=True)
class ProblemSpec:
    """Mean-field particle problem.

    ``potential`` is the confining potential V, ``theta`` the interaction
    strength, ``beta`` the inverse temperature and ``epsilon`` the noise
    correlation-time parameter (ignored for white noise).
    """

    potential: Polynomial = field(default_factory=bistable_potential, compare=False)
    theta: float = 1.0
    beta: float = 1.0
    epsilon: float = 0.1
    noise: NoiseModel = field(default_factory=NoiseModel.white)
    zeta: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "potential", Polynomial(np.asarray(self.potential.coef, dtype=float)))
        _check_confining(self.potential, "potential V")
        if self.theta < 0:
            raise ValueError("theta must be nonnegative")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.noise.is_white and not self.epsilon > 0:
            raise ValueError("epsilon must be positive for colored noise")
        if self.zeta is None:
            object.__setattr__(self, "zeta", default_zeta(self.noise))

    def with_(self, **changes):
        return replace(self, **changes)

    @property
    def is_even(self):
        """True when V is even, so the problem is symmetric under ``x -> -x``."""
        return bool(np.allclose(self.potential.coef[1::2], 0.0))

    def key(self):
        return (tuple(float(c) for c in self.potential.coef), self.noise.key(), float(self.zeta))

    def describe(self):
        return {
            "potential": [float(c) for c in self.potential.coef],
            "theta": self.theta,
            "beta": self.beta,
            "epsilon": self.epsilon,
            "noise": self.noise.tag,
            "alpha": self.noise.alpha,
            "zeta": self.zeta,
        }
