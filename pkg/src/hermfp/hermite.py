"""Orthonormal Hermite polynomials, Gauss quadrature, index sets and transforms.

All polynomials are the probabilists' Hermite polynomials normalised in
L^2(g_sigma), where g_sigma is the N(0, sigma^2) density.  A basis carries a
per-dimension weight exponent ``W_k`` so that its functions are

    exp(-sum_k W_k(x_k) / 2) * prod_k H_{alpha_k}(x_k / sigma_k),

which are orthonormal in L^2(exp(W) g_sigma).  ``W = 0`` gives plain Hermite
polynomials, ``W = x^2 / (2 sigma^2)`` gives Hermite functions and adding a
physical potential on top gives the weighted spaces used by the solvers.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy.linalg import LinAlgError, eigh_tridiagonal

from .errors import QuadratureError

__all__ = [
    "eval_hermite",
    "hermite_table",
    "gauss_hermite_rule",
    "IndexSet",
    "make_index_set",
    "HermiteBasis",
    "SpectralField",
    "hermite_transform",
    "evaluate_field",
    "evaluate_grid",
    "moment_functional",
    "evaluate_marginal",
]


def eval_hermite(n, x, sigma=1.0):
    """Orthonormal Hermite polynomial ``H_n(x / sigma)`` via the three-term recursion."""
    if n < 0:
        raise ValueError("degree must be nonnegative")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    xi = np.asarray(x, dtype=float) / sigma
    h_prev = np.zeros_like(xi)
    h = np.ones_like(xi)
    for k in range(n):
        h_prev, h = h, (xi * h - math.sqrt(k) * h_prev) / math.sqrt(k + 1)
    return h if h.ndim else float(h)


def hermite_table(d, x, sigma=1.0):
    """Values ``H_i(x / sigma)`` for ``i = 0..d``; shape ``(d + 1,) + x.shape``."""
    xi = np.asarray(x, dtype=float) / sigma
    table = np.empty((d + 1,) + xi.shape)
    table[0] = 1.0
    if d >= 1:
        table[1] = xi
    for k in range(1, d):
        table[k + 1] = (xi * table[k] - math.sqrt(k) * table[k - 1]) / math.sqrt(k + 1)
    return table


def gauss_hermite_rule(d_hat, sigma=1.0):
    """Gauss rule with ``d_hat + 1`` nodes for the N(0, sigma^2) weight.

    Nodes are the eigenvalues of the Jacobi matrix of the recursion, polished
    by Newton steps on ``H_{d_hat+1}``.  Weights come from the Christoffel
    function ``1 / sum_k H_k(x)^2``, which keeps full relative accuracy in the
    tails.  Weights sum to one.
    """
    if d_hat < 0:
        raise ValueError("d_hat must be nonnegative")
    n = d_hat + 1
    if n == 1:
        return np.zeros(1), np.ones(1)
    off = np.sqrt(np.arange(1, n, dtype=float))
    try:
        nodes = eigh_tridiagonal(np.zeros(n), off, eigvals_only=True)
    except LinAlgError as exc:
        raise QuadratureError(f"Jacobi eigenproblem failed for d_hat={d_hat}") from exc
    for _ in range(2):
        table = hermite_table(n, nodes)
        deriv = math.sqrt(n) * table[n - 1]
        nodes = nodes - table[n] / deriv
    nodes = np.sort(nodes)
    nodes = 0.5 * (nodes - nodes[::-1])
    table = hermite_table(n - 1, nodes)
    weights = 1.0 / np.sum(table**2, axis=0)
    weights = 0.5 * (weights + weights[::-1])
    if not (np.all(np.isfinite(nodes)) and np.all(np.isfinite(weights))):
        raise QuadratureError(f"non-finite Gauss-Hermite rule for d_hat={d_hat}")
    weights /= weights.sum()
    return sigma * nodes, weights


_SHAPES = ("triangle", "square", "rectangle")


@dataclass(frozen=True, eq=False)
class IndexSet:
    """Ordered set of multi-indices.

    Ordering is graded lexicographic: by total degree, then lexicographically
    descending, e.g. ``(0,0), (1,0), (0,1), (2,0), (1,1), (0,2)``.
    """

    shape: str
    bounds: tuple
    dims: int
    indices: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return (tuple(int(a) for a in row) for row in self.indices)

    @property
    def max_degrees(self):
        return tuple(int(v) for v in self.indices.max(axis=0))

    @property
    def rect_shape(self):
        return tuple(d + 1 for d in self.max_degrees)

    def rect_positions(self):
        """Row-major positions of each multi-index in the bounding box."""
        return np.ravel_multi_index(tuple(self.indices.T), self.rect_shape)

    def position(self, alpha):
        lookup = self._lookup()
        return int(lookup[tuple(alpha)])

    def _lookup(self):
        table = np.full(self.rect_shape, -1, dtype=np.int64)
        table[tuple(self.indices.T)] = np.arange(len(self))
        return table

    def describe(self):
        return {"shape": self.shape, "bounds": list(self.bounds), "dims": self.dims}


def make_index_set(shape, bounds, dims):
    """Enumerate a triangle, square or rectangle index set in graded lex order."""
    if shape not in _SHAPES:
        raise ValueError(f"unknown index-set shape {shape!r}; expected one of {_SHAPES}")
    if dims < 1:
        raise ValueError("dims must be positive")
    if shape == "rectangle":
        bounds = tuple(int(b) for b in np.atleast_1d(bounds))
        if len(bounds) != dims:
            raise ValueError(f"rectangle bounds {bounds} do not match dims={dims}")
        box = bounds
    else:
        if np.ndim(bounds) > 0:
            if len(set(np.atleast_1d(bounds))) != 1:
                raise ValueError(f"{shape} index set takes a single degree, got {bounds}")
            bounds = int(np.atleast_1d(bounds)[0])
        bounds = (int(bounds),)
        box = bounds * dims
    if min(box) < 0:
        raise ValueError("bounds must be nonnegative")
    candidates = itertools.product(*(range(b + 1) for b in box))
    if shape == "triangle":
        keep = [a for a in candidates if sum(a) <= bounds[0]]
    else:
        keep = list(candidates)
    keep.sort(key=lambda a: (sum(a), tuple(-v for v in a)))
    return IndexSet(shape, bounds, dims, np.array(keep, dtype=np.int64).reshape(-1, dims))


def _as_poly(p):
    if p is None:
        return Polynomial([0.0])
    if isinstance(p, Polynomial):
        return p
    return Polynomial(np.atleast_1d(np.asarray(p, dtype=float)))


def _per_dim(polys, dims, what):
    # None, a single Polynomial (1-D only) or a tuple/list of per-dim entries
    if polys is None:
        return (Polynomial([0.0]),) * dims
    if isinstance(polys, Polynomial):
        polys = (polys,)
    if not isinstance(polys, (tuple, list)) or len(polys) != dims:
        raise ValueError(f"{what} must give one polynomial per dimension")
    return tuple(_as_poly(p) for p in polys)


@dataclass(frozen=True, eq=False)
class HermiteBasis:
    """Tensorised Hermite basis ``exp(-W/2) H_alpha(x / sigma)``.

    ``weight[k]`` is the full exponent ``W_k`` (a polynomial in ``x_k``).
    Use :meth:`galerkin` to build the ``exp(-U/2) exp(-V_q/2) P(I)`` spaces
    where ``V_q = x^2 / (2 sigma^2)``.
    """

    index_set: IndexSet
    sigma: tuple
    weight: tuple
    quad_degree: tuple

    @classmethod
    def create(cls, index_set, sigma=1.0, weight=None, quad_degree=None):
        dims = index_set.dims
        sigma = tuple(float(s) for s in np.broadcast_to(np.asarray(sigma, dtype=float), (dims,)))
        if min(sigma) <= 0:
            raise ValueError("sigma must be positive in every dimension")
        weight = _per_dim(weight, dims, "weight")
        degs = index_set.max_degrees
        if quad_degree is None:
            quad_degree = tuple(d + 2 + max(w.degree(), 0) for d, w in zip(degs, weight))
        else:
            quad_degree = tuple(int(q) for q in np.broadcast_to(quad_degree, (dims,)))
        if any(q < d for q, d in zip(quad_degree, degs)):
            raise ValueError("quad_degree must be at least the index-set degree")
        return cls(index_set, sigma, weight, quad_degree)

    @classmethod
    def galerkin(cls, index_set, sigma=1.0, potential=None, quad_degree=None):
        """Basis of ``exp(-U/2) exp(-V_q/2) P(I)``; ``potential`` gives ``U`` per dim."""
        dims = index_set.dims
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), (dims,))
        potential = _per_dim(potential, dims, "potential")
        weight = tuple(u + Polynomial([0.0, 0.0, 0.5 / s**2]) for u, s in zip(potential, sig))
        return cls.create(index_set, sig, weight, quad_degree)

    @property
    def dims(self):
        return self.index_set.dims

    def __len__(self):
        return len(self.index_set)

    def gaussian_part_removed(self, k):
        """``W_k - x^2 / (2 sigma_k^2)``: what is left of the half-weight after
        factoring out ``exp(-x^2 / (4 sigma_k^2))``."""
        return self.weight[k] - Polynomial([0.0, 0.0, 0.5 / self.sigma[k] ** 2])

    def describe(self):
        return {
            "index_set": self.index_set.describe(),
            "sigma": list(self.sigma),
            "weight": [list(map(float, w.coef)) for w in self.weight],
            "quad_degree": list(self.quad_degree),
        }


@dataclass(eq=False)
class SpectralField:
    """Coefficient vector of a function in a :class:`HermiteBasis`.

    ``info`` carries solver diagnostics (residuals, eigenvalue) when the
    field comes out of a steady-state computation.
    """

    basis: HermiteBasis
    coeffs: np.ndarray
    info: dict | None = None

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (len(self.basis),):
            raise ValueError(
                f"coefficient vector has shape {self.coeffs.shape}, expected ({len(self.basis)},)"
            )

    def __add__(self, other):
        return SpectralField(self.basis, self.coeffs + other.coeffs)

    def __sub__(self, other):
        return SpectralField(self.basis, self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        return SpectralField(self.basis, scalar * self.coeffs)

    __rmul__ = __mul__

    def coefficient_tensor(self):
        tensor = np.zeros(self.basis.index_set.rect_shape)
        tensor[tuple(self.basis.index_set.indices.T)] = self.coeffs
        return tensor


def _quadrature_factors(basis, d_hat):
    """Per-dimension nodes and matrices ``Phi[i, a] = w_a H_i(x_a / sigma)``."""
    nodes, factors = [], []
    for k in range(basis.dims):
        x, w = gauss_hermite_rule(d_hat[k], basis.sigma[k])
        table = hermite_table(basis.index_set.max_degrees[k], x, basis.sigma[k])
        nodes.append(x)
        factors.append(table * w)
    return nodes, factors


def _contract(tensor, factors):
    # tensor indexed by quadrature nodes; contract each axis with its factor
    for k, phi in enumerate(factors):
        tensor = np.moveaxis(np.tensordot(phi, tensor, axes=([1], [k])), 0, k)
    return tensor


def hermite_transform(f: Callable, basis: HermiteBasis, d_hat: Sequence[int] | int | None = None,
                      log: bool = False) -> SpectralField:
    """Generalised Hermite transform of ``f`` by tensor Gauss quadrature.

    ``f`` is called with one broadcastable array per dimension.  With
    ``log=True`` it returns ``log f``; the weight is then applied in log space
    so that densities far below the weight do not overflow.  Exact when
    ``exp(W/2) f`` is a polynomial of degree at most ``d_hat``.
    """
    if d_hat is None:
        d_hat = basis.quad_degree
    d_hat = tuple(int(q) for q in np.broadcast_to(d_hat, (basis.dims,)))
    nodes, factors = _quadrature_factors(basis, d_hat)
    grids = np.meshgrid(*nodes, indexing="ij")
    half_weight = sum(0.5 * basis.weight[k](grids[k]) for k in range(basis.dims))
    if log:
        values = np.exp(half_weight + f(*grids))
    else:
        values = np.exp(half_weight) * f(*grids)
    tensor = _contract(np.asarray(values, dtype=float), factors)
    return SpectralField(basis, tensor[tuple(basis.index_set.indices.T)])


def _basis_values_1d(basis, k, x):
    x = np.asarray(x, dtype=float)
    table = hermite_table(basis.index_set.max_degrees[k], x, basis.sigma[k])
    return table * np.exp(-0.5 * basis.weight[k](x))


def evaluate_field(field: SpectralField, points) -> np.ndarray:
    """Pointwise values ``sum_alpha c_alpha exp(-W/2) H_alpha(x / sigma)``.

    ``points`` has shape ``(n, dims)``; a 1-D array is accepted for 1-D bases.
    """
    basis = field.basis
    pts = np.asarray(points, dtype=float)
    if basis.dims == 1 and pts.ndim <= 1:
        pts = pts.reshape(-1, 1)
    if pts.ndim != 2 or pts.shape[1] != basis.dims:
        raise ValueError(f"points must have shape (n, {basis.dims})")
    prod = np.ones((len(basis), len(pts)))
    for k in range(basis.dims):
        vals = _basis_values_1d(basis, k, pts[:, k])
        prod *= vals[basis.index_set.indices[:, k]]
    return field.coeffs @ prod


def evaluate_grid(field: SpectralField, axes) -> np.ndarray:
    """Values on the tensor grid spanned by ``axes`` (one 1-D array per dim)."""
    basis = field.basis
    if basis.dims == 1 and np.ndim(axes[0]) == 0:
        axes = (axes,)
    tensor = field.coefficient_tensor()
    mats = [_basis_values_1d(basis, k, axes[k]) for k in range(basis.dims)]
    for k, mat in enumerate(mats):
        tensor = np.moveaxis(np.tensordot(mat.T, tensor, axes=([1], [k])), 0, k)
    return tensor


def _moment_1d(basis, k, power, n_quad):
    sigma = basis.sigma[k]
    y, w = gauss_hermite_rule(n_quad, math.sqrt(2.0) * sigma)
    rest = basis.gaussian_part_removed(k)
    table = hermite_table(basis.index_set.max_degrees[k], y, sigma)
    integrand = table * (w * y**power * np.exp(-0.5 * rest(y)))
    return math.sqrt(4.0 * math.pi) * sigma * integrand.sum(axis=1)


def moment_functional(basis: HermiteBasis, powers=None, n_quad=None) -> np.ndarray:
    """Vector ``l`` with ``l . c = int prod_k x_k^{p_k} u(x) dx`` for fields ``u``.

    The exponential factor ``exp(-x^2 / (4 sigma^2))`` is integrated exactly
    by a Gauss rule for N(0, 2 sigma^2); the rest of the weight is treated as
    part of the integrand.
    """
    if powers is None:
        powers = (0,) * basis.dims
    powers = tuple(powers) + (0,) * (basis.dims - len(powers))
    vec = np.ones(len(basis))
    for k in range(basis.dims):
        nq = n_quad if n_quad is not None else basis.index_set.max_degrees[k] + 80
        ell = _moment_1d(basis, k, powers[k], nq)
        vec *= ell[basis.index_set.indices[:, k]]
    return vec


def evaluate_marginal(field: SpectralField, x, dim=0, n_quad=None) -> np.ndarray:
    """Values of the marginal of ``field`` in coordinate ``dim`` at points ``x``.

    The other coordinates are integrated out with the same Gauss rules as
    :func:`moment_functional`.
    """
    basis = field.basis
    factor = np.ones(len(basis))
    for k in range(basis.dims):
        if k == dim:
            continue
        nq = n_quad if n_quad is not None else basis.index_set.max_degrees[k] + 80
        factor *= _moment_1d(basis, k, 0, nq)[basis.index_set.indices[:, k]]
    vals = _basis_values_1d(basis, dim, x)[basis.index_set.indices[:, dim]]
    return (field.coeffs * factor) @ vals
