"""Acceptance criteria, each run at its stated tolerance with one PASS/FAIL line."""

import hashlib
import math

import numpy as np
import pytest
from numpy.polynomial import Polynomial
from scipy.integrate import quad_vec
from scipy.linalg import expm

from hermfp.asymptotics import compute_alpha_shift, compute_zeta, corrective_drift
from hermfp.bifurcation import (
    SelfConsistencyMap,
    colored_R,
    continue_branch,
    find_fixed_points,
    white_critical_beta,
)
from hermfp.cli import EXIT_OK, main
from hermfp.hermite import (
    HermiteBasis,
    SpectralField,
    eval_hermite,
    evaluate_field,
    evaluate_grid,
    evaluate_marginal,
    gauss_hermite_rule,
    hermite_table,
    hermite_transform,
    make_index_set,
)
from hermfp.models import NoiseModel, ProblemSpec, bistable_potential, quadratic_potential
from hermfp.operators import colored_operator, fokker_planck_template, schrodinger_operator
from hermfp.particles import McConfig, derive_seed, simulate
from hermfp.solver import (
    SolverConfig,
    compute_first_moment,
    compute_mass,
    gaussian_field,
    integrate_mckean,
    mean_field_operator,
    steady_state_linear,
)

pytestmark = pytest.mark.acceptance


def _l1_2d(values, exact, xs, ys):
    return float(np.trapezoid(np.trapezoid(np.abs(values - exact), ys, axis=1), xs))


def _gaussian_density(X, Y, mu, cov):
    prec = np.linalg.inv(cov)
    dx, dy = X - mu[0], Y - mu[1]
    q = prec[0, 0] * dx * dx + 2 * prec[0, 1] * dx * dy + prec[1, 1] * dy * dy
    return np.exp(-0.5 * q) / (2 * math.pi * math.sqrt(np.linalg.det(cov)))


def _sig3(value):
    return f"{value:.3g}"


def test_gaussian_colored_noise_oracle(acceptance):
    spec = ProblemSpec(potential=quadratic_potential(), theta=0.0, beta=1.0, epsilon=1.0, noise=NoiseModel.ou())
    xs, ys = np.linspace(-5, 5, 401), np.linspace(-7, 7, 561)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    exact = np.exp(-2 * X**2 + 2 * X * Y - Y**2) / math.pi
    errors = []
    for d in (10, 20, 40, 60):
        basis = HermiteBasis.galerkin(make_index_set("triangle", d, 2), (math.sqrt(0.1), 1.0),
                                      potential=(None, Polynomial([0, 0, 0.5])))
        state = steady_state_linear(colored_operator(spec, 0.0, basis), basis=basis)
        errors.append(_l1_2d(evaluate_grid(state, (xs, ys)), exact, xs, ys))
    monotone = all(b <= a for a, b in zip(errors, errors[1:]))
    ok = monotone and errors[-1] < 1e-4
    acceptance(1, ok, "L1 errors d=10,20,40,60: " + ", ".join(f"{e:.3e}" for e in errors)
               + f" (monotone={monotone}, need < 1e-4 at d=60)")


def test_mckean_gaussian_oracle(acceptance):
    beta = theta = 1.0
    eps = 0.5
    spec = ProblemSpec(potential=quadratic_potential(), theta=theta, beta=beta, epsilon=eps, noise=NoiseModel.ou())
    drift = np.array([[-1.0, 1 / (eps * math.sqrt(beta))], [0.0, -1 / eps**2]])
    full = drift + np.diag([-theta, 0.0])
    diffusion = np.diag([0.0, 1 / eps**2])

    def exact(t):
        mu = expm(drift * t) @ np.ones(2)
        if t == 0:
            return mu, np.eye(2)
        e = expm(full * t)
        integral = quad_vec(lambda s: expm(full * s) @ diffusion @ expm(full * s).T, 0, t)[0]
        return mu, e @ e.T + 2 * integral

    s = math.sqrt(0.5)
    template = fokker_planck_template(spec, make_index_set("triangle", 30, 2), (s, s), "potential")
    basis = template.basis(beta)
    rho0 = gaussian_field(basis, [1.0, 1.0], np.eye(2), d_hat=(70, 70))
    builder = mean_field_operator(template, beta, theta, eps)
    times = np.linspace(0, 1, 11)
    res = integrate_mckean(builder, rho0, SolverConfig(rtol=1e-8, atol=1e-8, t_final=1.0), t_eval=times,
                           keep_snapshots=True)
    xs, ys = np.linspace(-6, 8, 281), np.linspace(-8, 8, 321)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    errors = []
    for t, field in zip(times, res.snapshots):
        mu, cov = exact(t)
        errors.append(_l1_2d(evaluate_grid(field, (xs, ys)), _gaussian_density(X, Y, mu, cov), xs, ys))
    worst = max(errors)
    acceptance(2, worst < 1e-3, f"max over t in [0,1] of L1 error = {worst:.3e} (need < 1e-3)")


def test_constants(acceptance):
    z_ou, z_b, z_ns = compute_zeta("OU"), compute_zeta("B"), compute_zeta("NS")
    alpha = compute_alpha_shift()
    checks = {
        "zeta(OU)": z_ou == 1 / math.sqrt(2),
        "zeta(B)": _sig3(z_b) == "0.624",
        "zeta(NS)": _sig3(z_ns) == "0.944",
        "alpha": _sig3(alpha) == "0.885",
    }
    detail = (f"zeta(OU)={z_ou!r}, zeta(B)={z_b:.5f}, zeta(NS)={z_ns:.5f}, alpha={alpha:.6f}; "
              + ", ".join(k for k, v in checks.items() if not v))
    acceptance(3, all(checks.values()), detail.rstrip("; "))


def test_self_consistency_structure(acceptance):
    spec = ProblemSpec(theta=1.0, beta=10.0, epsilon=0.1, noise=NoiseModel.ou())
    maps = {
        "asymptotic": SelfConsistencyMap("AsymptoticOU", spec),
        "spectral": SelfConsistencyMap("SpectralLinear", spec, make_index_set("triangle", 40, 2)),
    }
    ok, parts = True, []
    for name, rmap in maps.items():
        roots = sorted(find_fixed_points(rmap, 10.0, (-1.5, 1.5), 61))
        symmetric = len(roots) == 3 and abs(roots[0] + roots[2]) < 1e-6 and abs(roots[1]) < 1e-6
        ok &= symmetric
        parts.append(f"{name} roots " + ", ".join(f"{r:+.6f}" for r in roots))
    acceptance(4, ok, "; ".join(parts))


def _epsilon_marginals(tag, degree, beta, sigma_x, xs, epsilons):
    spec0 = ProblemSpec(potential=bistable_potential(), theta=0.0, beta=beta, epsilon=0.1,
                        noise=NoiseModel.from_tag(tag))
    dims = 1 + spec0.noise.noise_dims
    template = fokker_planck_template(spec0, make_index_set("square", degree, dims),
                                      (sigma_x,) + (1.0,) * (dims - 1), "potential")
    cfg = SolverConfig(steady_tol=1e-10)
    out = []
    for eps in epsilons:
        state = steady_state_linear(template.assemble(beta=beta, epsilon=eps), cfg, basis=template.basis(beta))
        out.append(evaluate_marginal(state, xs))
    return out


def test_epsilon_convergence_rates(acceptance):
    # the reference is the same Galerkin system at eps -> 0 (2^-12), which
    # isolates the modelling error from the x-truncation error at this degree
    xs = np.linspace(-4, 4, 801)
    ks = np.array([2, 3, 4, 5])
    cases = {"OU": (20, 1.0, 2.0, 0.3), "H": (15, 5.0, 4.0, 0.4)}
    ok, parts = True, []
    for tag, (degree, beta, target, band) in cases.items():
        margs = _epsilon_marginals(tag, degree, beta, 0.3, xs, list(2.0 ** -ks) + [2.0**-12])
        ref = margs[-1]
        white = np.exp(-beta * bistable_potential()(xs))
        white /= np.trapezoid(white, xs)
        err = np.array([np.trapezoid(np.abs(p - ref), xs) for p in margs[:-1]])
        err_white = np.array([np.trapezoid(np.abs(p - white), xs) for p in margs[:-1]])
        rate = np.polyfit(np.log(2.0 ** -ks), np.log(err), 1)[0]
        rate_white = np.polyfit(np.log(2.0 ** -ks), np.log(err_white), 1)[0]
        ok &= abs(rate - target) <= band
        parts.append(f"{tag} order {rate:.2f} (target {target:g} +/- {band:g}; "
                     f"against the exact white marginal {rate_white:.2f})")
    acceptance(5, ok, "; ".join(parts))


def test_three_method_agreement(acceptance):
    spec = ProblemSpec(theta=1.0, beta=4.0, epsilon=0.2, noise=NoiseModel.ou())
    spectral = SelfConsistencyMap("SpectralLinear", spec, make_index_set("triangle", 30, 2))
    asym = SelfConsistencyMap("AsymptoticOU", spec)
    ok, parts = True, []
    for i, beta in enumerate((4.0, 6.0, 8.0)):
        m_s = max(abs(r) for r in find_fixed_points(spectral, beta, (-1.5, 1.5), 61))
        m_a = max(abs(r) for r in find_fixed_points(asym, beta, (-1.5, 1.5), 61))
        est = simulate(spec.with_(beta=beta), McConfig(n_particles=2000, seed=derive_seed(0, i)))
        m_mc = abs(est.m_hat)
        dev = max(abs(m_s - m_a), abs(m_s - m_mc), abs(m_a - m_mc))
        tol = max(0.02, 3 * est.std_error)
        ok &= dev <= tol
        parts.append(f"beta={beta:g}: spectral {m_s:.4f}, asymptotic {m_a:.4f}, MC {m_mc:.4f}"
                     f"+/-{est.std_error:.4f} (dev {dev:.4f} <= {tol:.4f})")
    acceptance(6, ok, "; ".join(parts))


def test_critical_temperature_shift(acceptance):
    white_map = SelfConsistencyMap("WhiteExact", ProblemSpec(theta=1.0, beta=1.8))
    white_branch = continue_branch(white_map, (1.8, 0.0), (1.8, 2.6), h=0.05, h_max=0.1)
    independent = white_critical_beta(theta=1.0)
    critical = {}
    for eps in (0.1, 0.3):
        spec = ProblemSpec(theta=1.0, beta=1.8, epsilon=eps, noise=NoiseModel.ou())
        rmap = SelfConsistencyMap("SpectralLinear", spec, make_index_set("triangle", 20, 2))
        branch = continue_branch(rmap, (1.8, 0.0), (1.8, 2.6), h=0.05, h_max=0.1)
        critical[eps] = branch.bifurcations[0] if branch.bifurcations else math.nan
    white = white_branch.bifurcations[0] if white_branch.bifurcations else math.nan
    ok = (abs(white - independent) <= 0.05 and critical[0.3] < critical[0.1] < white)
    acceptance(7, ok, f"beta_c(eps=0.3)={critical[0.3]:.4f} < beta_c(eps=0.1)={critical[0.1]:.4f} < "
                      f"white {white:.4f} (independent solve {independent:.4f})")


def test_corrective_drift(acceptance):
    spec = ProblemSpec(theta=0.0, beta=1.0, epsilon=2.0**-5, noise=NoiseModel.nonsymmetric())
    s = math.sqrt(0.1)
    xs = np.linspace(-4, 4, 801)
    cfg = SolverConfig(steady_tol=1e-10)

    def solve(d, corrective):
        r, state = colored_R(0.0, 1.0, spec, make_index_set("square", d, 2), (s, s), "none",
                             corrective=corrective, cfg=cfg, return_field=True)
        return r, evaluate_marginal(state, xs)

    m_ref, _ = solve(40, True)
    m_on, p_on = solve(20, True)
    _, p_off = solve(20, False)
    gap = float(np.trapezoid(np.abs(p_on - p_off), xs))
    drifts = [abs(corrective_drift(spec.noise.potential, d, s, 1.0, spec.zeta)) for d in (5, 10, 15, 20, 25, 30)]
    decreasing = all(b < a for a, b in zip(drifts, drifts[1:]))
    ok = abs(m_on - m_ref) <= 0.05 and gap > 0.1 and decreasing
    acceptance(8, ok, f"mean d=20 {m_on:+.4f} vs d=40 {m_ref:+.4f}; L1 gap without correction {gap:.3f}; "
                      "|mu_d| d=5..30: " + ", ".join(f"{v:.2e}" for v in drifts))


def _file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _property_checks(tmp_path):
    rng = np.random.default_rng(2024)
    failures = []

    # Hermite recursion and orthonormality
    x = np.linspace(-4, 4, 41)
    for sigma in (0.5, 1.0, 2.0):
        for n in range(1, 30):
            lhs = x / sigma * eval_hermite(n, x, sigma)
            rhs = math.sqrt(n + 1) * eval_hermite(n + 1, x, sigma) + math.sqrt(n) * eval_hermite(n - 1, x, sigma)
            if np.abs(lhs - rhs).max() > 1e-12 * max(1.0, np.abs(lhs).max()):
                failures.append(f"recursion n={n} sigma={sigma}")
        nodes, weights = gauss_hermite_rule(31, sigma)
        table = hermite_table(30, nodes, sigma)
        if np.abs((table * weights) @ table.T - np.eye(31)).max() >= 1e-12:
            failures.append(f"orthonormality sigma={sigma}")

    # quadrature exactness on polynomials of degree <= 2 d_hat + 1
    for d_hat in (5, 20, 40):
        nodes, weights = gauss_hermite_rule(d_hat)
        for k in range(0, 2 * d_hat + 2):
            exact = 0.0 if k % 2 else float(math.prod(range(k - 1, 0, -2)))
            scale = weights @ np.abs(nodes) ** k
            if abs(weights @ nodes**k - exact) > 1e-12 * max(1.0, scale):
                failures.append(f"quadrature d_hat={d_hat} k={k}")

    # mass conservation along RK45 within 10x the integrator tolerance
    spec = ProblemSpec(potential=quadratic_potential(), theta=1.0, beta=2.0)
    template = fokker_planck_template(spec, make_index_set("triangle", 20, 1), (math.sqrt(0.5),), "potential")
    builder = mean_field_operator(template, 2.0, 1.0)
    for tol in (1e-8, 1e-10):
        rho0 = gaussian_field(builder.basis, 0.3, 0.6)
        res = integrate_mckean(builder, rho0, SolverConfig(t_final=2.0, rtol=tol, atol=tol), keep_snapshots=True)
        masses = np.array([compute_mass(f) for f in res.snapshots])
        if np.abs(masses - masses[0]).max() > 10 * tol:
            failures.append(f"mass drift at tol {tol}")

    # discrete Schroedinger form nonpositive on 200 random vectors
    spec = ProblemSpec(potential=bistable_potential(), theta=0.0, beta=2.0)
    basis = HermiteBasis.galerkin(make_index_set("triangle", 40, 1), 0.5, potential=spec.beta * spec.potential)
    dense = schrodinger_operator(spec, basis).toarray()
    w = rng.standard_normal((200, dense.shape[0]))
    if np.einsum("ij,jk,ik->i", w, dense, w).max() > 1e-10:
        failures.append("Schroedinger form")

    # transform round trip exact on the polynomial space
    for dims, d, sigma in ((1, 12, 0.7), (2, 8, 1.3)):
        basis = HermiteBasis.galerkin(make_index_set("triangle", d, dims), sigma)
        coeffs = rng.standard_normal(len(basis))
        field = SpectralField(basis, coeffs)

        def f(*xs, field=field):
            pts = np.stack([v.ravel() for v in xs], axis=1)
            return evaluate_field(field, pts).reshape(xs[0].shape)

        if np.abs(hermite_transform(f, basis).coeffs - coeffs).max() > 1e-11 * np.abs(coeffs).max():
            failures.append(f"round trip dims={dims}")

    # odd symmetry of every R backend
    ou = ProblemSpec(theta=1.0, beta=5.0, epsilon=0.2, noise=NoiseModel.ou())
    white = ProblemSpec(theta=1.0, beta=5.0)
    backends = [
        SelfConsistencyMap("WhiteExact", white),
        SelfConsistencyMap("AsymptoticOU", ou),
        SelfConsistencyMap("SpectralLinear", ou, make_index_set("triangle", 20, 2)),
        SelfConsistencyMap("SpectralMcKean", white, make_index_set("triangle", 30, 1), (0.3,)),
    ]
    for rmap in backends:
        for m in (0.2, 0.7):
            if abs(rmap(m) + rmap(-m)) > 1e-8:
                failures.append(f"odd symmetry {rmap.backend} m={m}")

    # bit-identical reruns through the command line, seeded particles included
    cfg = tmp_path / "mc.toml"
    cfg.write_text('command = "mc"\n[problem]\npotential = [0, 0, -0.5, 0, 0.25]\nbetas = [1.0, 4.0]\n'
                   'noise = "OU"\nepsilon = 0.3\n[mc]\nn_particles = 100\nburn_in = 1.0\nwindow = 1.0\n')
    sc = tmp_path / "sc.toml"
    sc.write_text('command = "self-consistency"\n[problem]\npotential = [0, 0, -0.5, 0, 0.25]\nbeta = 5.0\n'
                  '[numerics]\nn_grid = 21\n')
    hashes = []
    for run in ("a", "b"):
        out = tmp_path / run
        codes = [main(["--config", str(cfg), "--out", str(out), "--seed", "11"]),
                 main(["--config", str(sc), "--out", str(out)]),
                 main(["zeta", "--out", str(out)])]
        if any(c != EXIT_OK for c in codes):
            failures.append(f"rerun exit codes {codes}")
        hashes.append([_file_hash(out / name) for name in ("mc.csv", "map.csv", "fixed_points.csv", "zeta.csv")])
    if hashes[0] != hashes[1]:
        failures.append("rerun hashes differ")
    return failures


def test_property_suites(acceptance, tmp_path):
    failures = _property_checks(tmp_path)
    acceptance(9, not failures, "all property checks hold" if not failures else "failed: " + "; ".join(failures))
