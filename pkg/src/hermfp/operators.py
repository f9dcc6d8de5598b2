"""Sparse Hermite-space matrices of Fokker-Planck type operators.

Operators are first written symbolically in normal-ordered form
``sum_alpha f_alpha(x) d^alpha`` after conjugation by the basis weight
``exp(W/2)``.  Each term ``x^a d^alpha`` then has an exact matrix in the
orthonormal Hermite basis, namely the Kronecker product over dimensions of
``X^a D^alpha`` where ``X`` and ``D`` come from the three-term recursion.
Because index sets are downward closed, restricting that product to the index
set gives the exact Galerkin matrix; no quadrature is involved.
"""

from __future__ import annotations

import functools
import itertools

import numpy as np
import scipy.sparse as sps
import sympy as sp
from numpy.polynomial import Polynomial

from .hermite import HermiteBasis, IndexSet

__all__ = [
    "OperatorMatrix",
    "OperatorTemplate",
    "position_matrix",
    "derivative_matrix",
    "poly_diff_operator",
    "conjugated_generator",
    "fokker_planck_template",
    "schrodinger_template",
    "schrodinger_operator",
    "mckean_operator_white",
    "colored_operator",
    "stationary_eigenvalue",
]

X, ETA, LAM = sp.symbols("x eta lam", real=True)
VARIABLES = (X, ETA, LAM)
BETA, THETA, MEAN, EPS_INV, SHIFT = sp.symbols("beta theta m eps_inv mu", real=True)
_NUMERIC_PARAMS = (BETA, THETA, MEAN, SHIFT)


class OperatorMatrix:
    """Sparse matrix of an operator in a Hermite basis, with its bandwidth."""

    def __init__(self, matrix, basis=None, predicted_bandwidth=None):
        self.matrix = sps.csr_matrix(matrix)
        self.matrix.eliminate_zeros()
        self.matrix.sort_indices()
        self.basis = basis
        self.predicted_bandwidth = predicted_bandwidth
        if predicted_bandwidth is not None and self.bandwidth > predicted_bandwidth:
            raise RuntimeError(
                f"assembled bandwidth {self.bandwidth} exceeds predicted bound {predicted_bandwidth}"
            )

    @property
    def shape(self):
        return self.matrix.shape

    @functools.cached_property
    def _band(self):
        coo = self.matrix.tocoo()
        if coo.nnz == 0:
            return 0, 0
        diff = coo.row.astype(np.int64) - coo.col.astype(np.int64)
        return int(max(diff.max(), 0)), int(max(-diff.min(), 0))

    @property
    def lower_bandwidth(self):
        return self._band[0]

    @property
    def upper_bandwidth(self):
        return self._band[1]

    @property
    def bandwidth(self):
        return max(self._band)

    def toarray(self):
        return self.matrix.toarray()

    def __matmul__(self, other):
        return self.matrix @ other

    def __add__(self, other):
        return OperatorMatrix(self.matrix + other.matrix, self.basis)

    def __sub__(self, other):
        return OperatorMatrix(self.matrix - other.matrix, self.basis)

    def __mul__(self, scalar):
        return OperatorMatrix(scalar * self.matrix, self.basis)

    __rmul__ = __mul__

    def triplets(self):
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order], coo.col[order], coo.data[order]

    def dump(self, path):
        """Write ``row col value`` lines, sorted by row then column."""
        rows, cols, vals = self.triplets()
        with open(path, "w") as fh:
            for r, c, v in zip(rows, cols, vals):
                fh.write(f"{r} {c} {v:.17g}\n")


# one-dimensional building blocks


def _position_1d(n, sigma):
    off = sigma * np.sqrt(np.arange(1, n, dtype=float))
    return np.diag(off, 1) + np.diag(off, -1)


def _derivative_1d(n, sigma):
    return np.diag(np.sqrt(np.arange(1, n, dtype=float)) / sigma, 1)


@functools.lru_cache(maxsize=4096)
def _factor_1d(n_rows, n_cols, sigma, power, order):
    """Exact matrix of ``x^power d^order`` from P(n_cols - 1) to P(n_rows - 1)."""
    size = max(n_rows, n_cols) + power
    mat = np.linalg.matrix_power(_position_1d(size, sigma), power) if power else np.eye(size)
    if order:
        mat = mat @ np.linalg.matrix_power(_derivative_1d(size, sigma), order)
    out = mat[:n_rows, :n_cols]
    out.flags.writeable = False
    return out


def _term_matrix(row_set, col_set, sigma, powers, orders):
    rows_box = row_set.rect_shape
    cols_box = col_set.rect_shape
    full = None
    for k in range(col_set.dims):
        f = sps.csr_matrix(_factor_1d(rows_box[k], cols_box[k], float(sigma[k]), int(powers[k]), int(orders[k])))
        full = f if full is None else sps.kron(full, f, format="csr")
    return full[row_set.rect_positions()][:, col_set.rect_positions()].tocoo()


def position_matrix(basis: HermiteBasis, dim=0) -> OperatorMatrix:
    """Multiplication by ``x_dim`` in the Hermite polynomial basis."""
    powers = [0] * basis.dims
    powers[dim] = 1
    mat = _term_matrix(basis.index_set, basis.index_set, basis.sigma, powers, [0] * basis.dims)
    return OperatorMatrix(mat, basis)


def derivative_matrix(basis: HermiteBasis, dim=0, order=1) -> OperatorMatrix:
    """``d^order / dx_dim^order`` in the Hermite polynomial basis."""
    if order < 1:
        raise ValueError("derivative order must be at least 1")
    orders = [0] * basis.dims
    orders[dim] = order
    mat = _term_matrix(basis.index_set, basis.index_set, basis.sigma, [0] * basis.dims, orders)
    return OperatorMatrix(mat, basis)


def poly_diff_operator(f, m, basis: HermiteBasis, dim=0) -> OperatorMatrix:
    """Galerkin matrix of ``f(x_dim) d^m/dx_dim^m`` for a polynomial ``f``."""
    if m < 0:
        raise ValueError("derivative order must be nonnegative")
    f = f if isinstance(f, Polynomial) else Polynomial(np.atleast_1d(np.asarray(f, dtype=float)))
    total = None
    for power, c in enumerate(f.coef):
        if c == 0:
            continue
        powers = [0] * basis.dims
        orders = [0] * basis.dims
        powers[dim] = power
        orders[dim] = m
        term = float(c) * _term_matrix(basis.index_set, basis.index_set, basis.sigma, powers, orders)
        total = term if total is None else total + term
    if total is None:
        total = sps.csr_matrix((len(basis), len(basis)))
    return OperatorMatrix(total, basis)


# symbolic operator algebra


def _add_term(op, alpha, coeff):
    op[alpha] = op.get(alpha, 0) + coeff


def _bump(alpha, k):
    return tuple(a + (i == k) for i, a in enumerate(alpha))


def _apply_conjugated_derivative(op, k, variables, half_grad):
    # (d_k - W_k'/2) composed on the left of sum_alpha f_alpha d^alpha
    out = {}
    for alpha, f in op.items():
        _add_term(out, alpha, sp.diff(f, variables[k]) - half_grad * f)
        _add_term(out, _bump(alpha, k), f)
    return out


def conjugated_generator(drifts, diffusions, weights, variables):
    """Normal-ordered form of ``v -> exp(W/2) L* (exp(-W/2) v)``.

    ``L* rho = sum_k d_k(-b_k rho) + a_k d_k^2 rho`` with drifts ``b_k`` and
    constant diffusions ``a_k``; ``W = sum_k weights[k](x_k)``.  Returns a dict
    mapping derivative multi-indices to polynomial coefficients.
    """
    dims = len(variables)
    zero = (0,) * dims
    half_grads = [sp.diff(w, v) / 2 for w, v in zip(weights, variables)]
    total = {}
    for k in range(dims):
        if drifts[k] != 0:
            for alpha, f in _apply_conjugated_derivative({zero: -drifts[k]}, k, variables, half_grads[k]).items():
                _add_term(total, alpha, f)
        if diffusions[k] != 0:
            once = _apply_conjugated_derivative({zero: sp.Integer(1)}, k, variables, half_grads[k])
            twice = _apply_conjugated_derivative(once, k, variables, half_grads[k])
            for alpha, f in twice.items():
                _add_term(total, alpha, diffusions[k] * f)
    out = {}
    for alpha, f in total.items():
        f = sp.expand(f)
        if f != 0:
            out[alpha] = f
    return out


def _poly_expr(poly, var):
    return sum(sp.Float(float(c)) * var**i for i, c in enumerate(poly.coef) if c != 0) + sp.Integer(0)


def _expr_poly(expr, var):
    coeffs = sp.Poly(expr, var).all_coeffs()[::-1] if expr != 0 else [0]
    return Polynomial([float(c) for c in coeffs])


class OperatorTemplate:
    """Operator whose coefficients depend on (beta, theta, m, eps^-1, mu).

    The symbolic generator is compiled once; each term matrix is built once
    and cached as coordinate triplets, so assembling for new parameter values
    is a weighted sum.  Terms are grouped by their power of ``1/eps`` so the
    transport, coupling and noise blocks can be formed separately.
    """

    def __init__(self, generator, weights, variables, index_set: IndexSet, sigma, description=None):
        self.variables = tuple(variables)
        self.index_set = index_set
        self.sigma = tuple(float(s) for s in sigma)
        self.weights = tuple(weights)
        self.description = description or {}
        self._weight_fn = [
            sp.lambdify(_NUMERIC_PARAMS, sp.Poly(w, v).all_coeffs()[::-1], "numpy")
            for w, v in zip(self.weights, self.variables)
        ]
        keys, coeffs = [], []
        for alpha in sorted(generator):
            poly = sp.Poly(generator[alpha], *self.variables)
            for monom, coeff in sorted(poly.terms()):
                split = sp.Poly(sp.expand(coeff), EPS_INV)
                for (power,), part in split.terms():
                    keys.append((alpha, monom, power))
                    coeffs.append(part)
        self.terms = keys
        self._coeff_fn = sp.lambdify(_NUMERIC_PARAMS, coeffs, "numpy")
        rows, cols, vals, owner = [], [], [], []
        for t, (alpha, monom, _) in enumerate(keys):
            mat = _term_matrix(index_set, index_set, self.sigma, monom, alpha)
            rows.append(mat.row)
            cols.append(mat.col)
            vals.append(mat.data)
            owner.append(np.full(mat.nnz, t))
        self._rows = np.concatenate(rows) if rows else np.zeros(0, int)
        self._cols = np.concatenate(cols) if cols else np.zeros(0, int)
        self._vals = np.concatenate(vals) if vals else np.zeros(0)
        self._owner = np.concatenate(owner) if owner else np.zeros(0, int)
        self._power = np.array([p for (_, _, p) in keys], dtype=int)
        self.predicted_bandwidth = _predict_bandwidth(index_set, [(a, mo) for (a, mo, _) in keys])

    def _coefficients(self, beta, theta, m, epsilon, mu):
        vals = np.array(self._coeff_fn(beta, theta, m, mu), dtype=float).reshape(-1)
        eps_inv = 0.0 if epsilon is None else 1.0 / epsilon
        return vals * eps_inv ** self._power

    def assemble(self, beta=1.0, theta=0.0, m=0.0, epsilon=None, mu=0.0, eps_power=None):
        """Matrix at the given parameters; ``eps_power`` selects one block."""
        coef = self._coefficients(beta, theta, m, epsilon, mu)
        if eps_power is not None:
            coef = np.where(self._power == eps_power, coef, 0.0)
        data = self._vals * coef[self._owner]
        n = len(self.index_set)
        mat = sps.csr_matrix((data, (self._rows, self._cols)), shape=(n, n))
        return OperatorMatrix(mat, self.basis(beta=beta), self.predicted_bandwidth)

    def mean_derivative(self, beta=1.0, theta=0.0, epsilon=None, mu=0.0):
        """``dM/dm``, independent of m because the operator is affine in it."""
        a = self.assemble(beta, theta, 0.0, epsilon, mu)
        b = self.assemble(beta, theta, 1.0, epsilon, mu)
        return OperatorMatrix(b.matrix - a.matrix, a.basis)

    def basis(self, beta=1.0):
        weights = []
        for fn in self._weight_fn:
            coef = np.atleast_1d(np.array(fn(beta, 0.0, 0.0, 0.0), dtype=float))
            weights.append(Polynomial(coef))
        return HermiteBasis.create(self.index_set, self.sigma, tuple(weights))


def _predict_bandwidth(index_set, term_shapes):
    """Largest position offset allowed by the degree-shift boxes of the terms."""
    lookup = index_set._lookup()
    idx = index_set.indices
    pos = np.arange(len(index_set))
    bound = 0
    boxes = set()
    for alpha, monom in term_shapes:
        boxes.add(tuple((-a - m, a - m) for a, m in zip(monom, alpha)))
    offsets = set()
    for box in boxes:
        offsets.update(itertools.product(*(range(lo, hi + 1) for lo, hi in box)))
    shape = np.array(index_set.rect_shape)
    for off in offsets:
        target = idx + np.array(off)
        ok = np.all((target >= 0) & (target < shape), axis=1)
        if not ok.any():
            continue
        rows = lookup[tuple(target[ok].T)]
        valid = rows >= 0
        if valid.any():
            bound = max(bound, int(np.abs(rows[valid] - pos[ok][valid]).max()))
    return bound


# problem-specific templates


def _gaussian_weight(var, sigma):
    return var**2 / (2 * sp.Float(float(sigma)) ** 2)


@functools.lru_cache(maxsize=64)
def _cached_fp_template(noise_tag, zeta, index_key, sigma, x_weight, potential_coef,
                        noise_coef):
    index_set = _INDEX_REGISTRY[index_key]
    potential = _poly_expr(Polynomial(potential_coef), X)
    v_prime = sp.diff(potential, X)
    if noise_tag == "white":
        variables = (X,)
        drifts = [-v_prime - THETA * (X - MEAN) + SHIFT]
        diffusions = [1 / BETA]
    else:
        coupling = sp.Float(zeta) * sp.sqrt(2 / BETA) * EPS_INV * ETA
        drift_x = -v_prime - THETA * (X - MEAN) + coupling + SHIFT * EPS_INV
        if noise_tag == "H":
            variables = (X, ETA, LAM)
            drifts = [drift_x, LAM * EPS_INV**2, (-ETA - LAM) * EPS_INV**2]
            diffusions = [0, 0, EPS_INV**2]
        else:
            variables = (X, ETA)
            v_eta = ETA**2 / 2 if noise_tag == "OU" else _poly_expr(Polynomial(noise_coef), ETA)
            drifts = [drift_x, -sp.diff(v_eta, ETA) * EPS_INV**2]
            diffusions = [0, EPS_INV**2]
    if x_weight == "potential":
        u_x = BETA * potential
    elif x_weight == "none":
        u_x = sp.Integer(0)
    else:
        raise ValueError(f"unknown x weight {x_weight!r}")
    weights = [u_x + _gaussian_weight(X, sigma[0])]
    if noise_tag in ("OU", "H"):
        noise_pots = [v**2 / 2 for v in variables[1:]]
    elif noise_tag in ("B", "NS"):
        noise_pots = [_poly_expr(Polynomial(noise_coef), ETA)]
    else:
        noise_pots = []
    for k, pot in enumerate(noise_pots, start=1):
        weights.append(pot + _gaussian_weight(variables[k], sigma[k]))
    if len(sigma) != len(variables) or index_set.dims != len(variables):
        raise ValueError(
            f"noise model {noise_tag} needs a {len(variables)}-dimensional basis, got {index_set.dims}"
        )
    generator = conjugated_generator(drifts, diffusions, weights, variables)
    return OperatorTemplate(generator, weights, variables, index_set, sigma,
                            {"kind": "fokker-planck", "noise": noise_tag, "x_weight": x_weight})


_INDEX_REGISTRY: dict = {}


def _index_key(index_set):
    key = (index_set.shape, tuple(index_set.bounds), index_set.dims)
    _INDEX_REGISTRY.setdefault(key, index_set)
    return key


def fokker_planck_template(problem, index_set, sigma, x_weight="potential") -> OperatorTemplate:
    """Template for the conjugated Fokker-Planck operator of ``problem``.

    The basis weight is ``U_x(x) + x^2/(2 sigma_x^2)`` in ``x`` (``U_x = beta V``
    for ``x_weight="potential"``, 0 for ``"none"``) and ``V_eta + eta^2 /
    (2 sigma_eta^2)`` in each noise variable.  The drift in ``x`` contains the
    interaction ``-theta (x - m)``, the noise coupling
    ``zeta sqrt(2/beta) eta / eps`` and an optional extra drift ``mu / eps``
    (``mu`` alone for white noise).
    """
    sigma = tuple(float(s) for s in np.broadcast_to(np.asarray(sigma, dtype=float), (index_set.dims,)))
    noise = problem.noise
    noise_coef = () if noise.potential is None else tuple(float(c) for c in noise.potential.coef)
    return _cached_fp_template(noise.tag, float(problem.zeta), _index_key(index_set),
                               sigma, x_weight, tuple(float(c) for c in problem.potential.coef), noise_coef)


@functools.lru_cache(maxsize=32)
def _cached_schrodinger(potential_coef, index_key, sigma):
    index_set = _INDEX_REGISTRY[index_key]
    potential = _poly_expr(Polynomial(potential_coef), X)
    v1 = sp.diff(potential, X)
    v2 = sp.diff(potential, X, 2)
    # only the Gaussian part of the weight is conjugated here; the Boltzmann
    # factor is already absorbed by the Schrodinger form
    gauss = _gaussian_weight(X, sigma[0])
    once = _apply_conjugated_derivative({(0,): sp.Integer(1)}, 0, (X,), sp.diff(gauss, X) / 2)
    twice = _apply_conjugated_derivative(once, 0, (X,), sp.diff(gauss, X) / 2)
    gen = {a: f / BETA for a, f in twice.items()}
    _add_term(gen, (0,), v2 / 2 - BETA * v1**2 / 4)
    gen = {a: sp.expand(f) for a, f in gen.items() if sp.expand(f) != 0}
    weights = [BETA * potential + gauss]
    return OperatorTemplate(gen, weights, (X,), index_set, sigma, {"kind": "schrodinger"})


def schrodinger_template(problem, index_set, sigma) -> OperatorTemplate:
    sigma = (float(np.atleast_1d(sigma)[0]),)
    return _cached_schrodinger(tuple(float(c) for c in problem.potential.coef), _index_key(index_set), sigma)


def _infer_x_weight(problem, basis):
    gauss = Polynomial([0.0, 0.0, 0.5 / basis.sigma[0] ** 2])
    w = basis.weight[0]
    if _poly_close(w, gauss):
        return "none"
    if _poly_close(w, problem.beta * problem.potential + gauss):
        return "potential"
    raise ValueError("basis weight in x must be either x^2/(2 sigma^2) or beta V + x^2/(2 sigma^2)")


def _poly_close(p, q):
    n = max(len(p.coef), len(q.coef))
    a = np.pad(p.coef, (0, n - len(p.coef)))
    b = np.pad(q.coef, (0, n - len(q.coef)))
    return bool(np.allclose(a, b, rtol=1e-12, atol=1e-12))


def schrodinger_operator(spec, basis: HermiteBasis) -> OperatorMatrix:
    """Matrix of ``beta^-1 d^2 + V''/2 - beta V'^2/4`` in the basis ``exp(-(beta V + V_q)/2) H``."""
    if basis.dims != 1:
        raise ValueError("the Schrodinger form is one-dimensional")
    if _infer_x_weight(spec, basis) != "potential":
        raise ValueError("schrodinger_operator needs the basis weight beta V + x^2/(2 sigma^2)")
    return schrodinger_template(spec, basis.index_set, basis.sigma).assemble(beta=spec.beta)


def mckean_operator_white(spec, m, basis: HermiteBasis, mu=0.0) -> OperatorMatrix:
    """Matrix of ``d_x(V' rho + theta (x - m) rho + beta^-1 d_x rho)``."""
    if not spec.noise.is_white:
        raise ValueError("mckean_operator_white needs white noise")
    template = fokker_planck_template(spec, basis.index_set, basis.sigma, _infer_x_weight(spec, basis))
    return template.assemble(beta=spec.beta, theta=spec.theta, m=m, mu=mu)


def colored_operator(spec, m, basis: HermiteBasis, mu=0.0) -> OperatorMatrix:
    """Conjugated colored-noise Fokker-Planck matrix, optionally with drift ``mu / eps``."""
    if spec.noise.is_white:
        raise ValueError("colored_operator needs a colored noise model")
    expected = 1 + spec.noise.noise_dims
    if basis.dims != expected:
        raise ValueError(f"noise model {spec.noise.tag} needs a {expected}-dimensional basis, got {basis.dims}")
    template = fokker_planck_template(spec, basis.index_set, basis.sigma, _infer_x_weight(spec, basis))
    return template.assemble(beta=spec.beta, theta=spec.theta, m=m, epsilon=spec.epsilon, mu=mu)


def stationary_eigenvalue(op: OperatorMatrix, dense_limit=2500):
    """Eigenvalue of largest real part (the one closest to the stationary mode)."""
    n = op.shape[0]
    if n <= dense_limit:
        vals = np.linalg.eigvals(op.toarray())
    else:
        from scipy.sparse.linalg import eigs

        vals = eigs(op.matrix.tocsc(), k=6, sigma=1e-8, which="LM", return_eigenvectors=False)
    return complex(vals[np.argmax(vals.real)])
