"""Command-line driver.

Exit codes: 0 success, 2 configuration error, 3 solver or simulation error,
4 input/output error.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import numpy as np
from numpy.polynomial import Polynomial

from . import asymptotics
from .artifacts import PointCache, read_csv, write_csv, write_grid
from .bifurcation import (
    SelfConsistencyMap,
    classify_stability,
    continue_branch,
    default_sigma,
    find_fixed_points,
)
from .config import COMMANDS, RunConfig, load_config
from .errors import ConfigError, HermfpError
from .hermite import evaluate_grid, evaluate_marginal, make_index_set
from .models import NoiseModel, ProblemSpec
from .operators import fokker_planck_template
from .particles import McConfig, McEstimate, derive_seed, simulate
from .solver import (
    SolverConfig,
    compute_first_moment,
    gaussian_field,
    integrate_linear,
    integrate_mckean,
    mean_field_operator,
    steady_state_linear,
)

__all__ = ["main", "run", "build_spec", "build_map", "verify_branch_csv", "EXIT_OK", "EXIT_CONFIG",
           "EXIT_SOLVER", "EXIT_IO"]

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("hermfp")


@contextmanager
def _stage(name):
    start = time.perf_counter()
    yield
    log.info("%s: %.2f s", name, time.perf_counter() - start)


# construction helpers


def build_spec(cfg: RunConfig, beta=None) -> ProblemSpec:
    prob = cfg.problem
    tag = prob["noise"]
    noise = NoiseModel.nonsymmetric(prob["alpha"]) if tag == "NS" else NoiseModel.from_tag(tag)
    if beta is None:
        beta = prob["beta"] if prob["beta"] is not None else (prob["betas"] or [1.0])[0]
    return ProblemSpec(Polynomial(np.asarray(prob["potential"], float)), float(prob["theta"]), float(beta),
                       float(prob["epsilon"]), noise, prob["zeta"])


def _index_set(cfg: RunConfig):
    num = cfg.numerics
    bounds = num["bounds"] if num["shape"] == "rectangle" else num["degree"]
    return make_index_set(num["shape"], bounds, cfg.dims)


def _sigma(cfg: RunConfig, spec):
    sigma = cfg.numerics["sigma"]
    return tuple(float(s) for s in sigma) if sigma is not None else default_sigma(spec.noise)


def _solver_config(cfg: RunConfig):
    num = cfg.numerics
    return SolverConfig(scheme=num["scheme"], dt=float(num["dt"]), rtol=float(num["rtol"]), atol=float(num["atol"]),
                        t_final=float(num["t_final"]), steady_tol=float(num["steady_tol"]),
                        max_iter=int(num["max_iter"]))


def build_map(cfg: RunConfig, spec=None, backend=None) -> SelfConsistencyMap:
    spec = spec or build_spec(cfg)
    backend = backend or cfg.numerics["backend"] or ("WhiteExact" if spec.noise.is_white else "SpectralLinear")
    if backend.startswith("Spectral"):
        return SelfConsistencyMap(backend, spec, _index_set(cfg), _sigma(cfg, spec), cfg.numerics["x_weight"],
                                  _solver_config(cfg), cfg.numerics["corrective"])
    return SelfConsistencyMap(backend, spec)


def _axis(spec):
    lo, hi, n = spec
    return np.linspace(float(lo), float(hi), int(n))


def _meta(cfg: RunConfig, **extra):
    config = cfg.resolved()
    # artifacts must not depend on where they were written
    config["output"] = {"prefix": cfg.output["prefix"]}
    meta = {"config": config, "config_hash": cfg.hash()}
    meta.update(extra)
    return meta


def _out(cfg: RunConfig, name):
    return os.path.join(cfg.output["dir"], cfg.output["prefix"] + name)


# commands


def _cmd_solve_linear(cfg: RunConfig):
    spec = build_spec(cfg)
    iset, sigma = _index_set(cfg), _sigma(cfg, spec)
    template = fokker_planck_template(spec, iset, sigma, cfg.numerics["x_weight"])
    eps = None if spec.noise.is_white else spec.epsilon
    with _stage("assemble"):
        op = template.assemble(beta=spec.beta, theta=spec.theta, m=float(cfg.problem["m"]), epsilon=eps)
    with _stage("steady state"):
        state = steady_state_linear(op, _solver_config(cfg), basis=template.basis(spec.beta))
    xs = _axis(cfg.numerics["grid_x"])
    meta = _meta(cfg, basis=state.basis.describe(), residual=state.info["residual"])
    write_grid(_out(cfg, "marginal.grid"), [xs], evaluate_marginal(state, xs), meta)
    if spec.noise.noise_dims == 1:
        ys = _axis(cfg.numerics["grid_y"])
        write_grid(_out(cfg, "density.grid"), [xs, ys], evaluate_grid(state, (xs, ys)), meta)
    write_csv(_out(cfg, "summary.csv"), ["m", "first_moment", "residual", "eigenvalue"],
              [(float(cfg.problem["m"]), compute_first_moment(state), state.info["residual"],
                state.info["eigenvalue"])], meta)


def _cmd_solve_mckean(cfg: RunConfig):
    spec = build_spec(cfg)
    iset, sigma = _index_set(cfg), _sigma(cfg, spec)
    template = fokker_planck_template(spec, iset, sigma, cfg.numerics["x_weight"])
    eps = None if spec.noise.is_white else spec.epsilon
    basis = template.basis(spec.beta)
    builder = mean_field_operator(template, spec.beta, spec.theta, eps)
    num = cfg.numerics
    d_hat = num["d_hat"]
    with _stage("initial projection"):
        rho0 = gaussian_field(basis, [num["initial_mean"]], [[num["initial_var"]]],
                              d_hat=None if d_hat is None else int(d_hat))
    solver_cfg = _solver_config(cfg)
    with _stage("time integration"):
        result = integrate_mckean(builder, rho0, solver_cfg)
    meta = _meta(cfg, basis=basis.describe(), steady=result.steady)
    write_csv(_out(cfg, "moments.csv"), ["t", "m"], zip(result.times, result.moments), meta)
    xs = _axis(num["grid_x"])
    write_grid(_out(cfg, "marginal.grid"), [xs], evaluate_marginal(result.field, xs), meta)


def _fixed_point_rows(rmap, beta, roots):
    eps = "" if rmap.epsilon is None else repr(float(rmap.epsilon))
    return [(beta, m, classify_stability(rmap, m, beta), rmap.backend, eps, rmap.spec.noise.tag) for m in roots]


BRANCH_COLUMNS = ["beta", "m", "stability", "backend", "epsilon", "model"]


def _cmd_self_consistency(cfg: RunConfig):
    rmap = build_map(cfg)
    beta = rmap.spec.beta
    lo, hi = cfg.numerics["m_interval"]
    ms = np.linspace(float(lo), float(hi), int(cfg.numerics["n_grid"]))
    with _stage("map evaluation"):
        values = [rmap(m, beta) for m in ms]
    meta = _meta(cfg, map=rmap.describe())
    write_csv(_out(cfg, "map.csv"), ["m", "R", "residual"], [(m, r, r - m) for m, r in zip(ms, values)], meta)
    with _stage("fixed points"):
        roots = find_fixed_points(rmap, beta, (float(lo), float(hi)), int(cfg.numerics["n_grid"]))
    write_csv(_out(cfg, "fixed_points.csv"), BRANCH_COLUMNS, _fixed_point_rows(rmap, beta, roots), meta)


def _on_branch(branches, beta, m, reach):
    """True if ``(beta, m)`` lies within ``reach`` of a point already traced."""
    for br in branches:
        for p in br.points:
            if math.hypot(p.beta - beta, p.m - m) < reach:
                return True
    return False


def _cmd_bifurcate(cfg: RunConfig):
    rmap = build_map(cfg)
    cont = cfg.continuation
    lo, hi = float(cont["beta_min"]), float(cont["beta_max"])
    interval = tuple(float(v) for v in cfg.numerics["m_interval"])
    n_grid = int(cfg.numerics["n_grid"])
    kw = dict(h=float(cont["h"]), h_min=float(cont["h_min"]), h_max=float(cont["h_max"]), tol=float(cont["tol"]))
    branches = []
    with _stage("continuation"):
        for beta0, direction in ((hi, -1), (lo, 1)):
            for m0 in find_fixed_points(rmap, beta0, interval, n_grid):
                if _on_branch(branches, beta0, m0, 2 * kw["h_max"]):
                    continue
                branches.append(continue_branch(rmap, (beta0, m0), (lo, hi), direction=direction, **kw))
    rows, ranges = [], []
    for br in branches:
        ranges.append([len(rows), len(rows) + len(br.points)])
        rows.extend(br.rows())
    meta = _meta(cfg, map=rmap.describe(), branch_rows=ranges,
                 pitchforks=sorted({b for br in branches for b in br.bifurcations}),
                 status=[br.status + (f": {br.diagnostic}" if br.diagnostic else "") for br in branches])
    write_csv(_out(cfg, "branches.csv"), BRANCH_COLUMNS, rows, meta)


def verify_branch_csv(path, tol=1e-6):
    """Re-evaluate every branch point of a written diagram; returns the worst residual."""
    meta, columns, rows = read_csv(path)
    if columns != BRANCH_COLUMNS:
        raise ValueError(f"unexpected columns {columns}")
    cfg = RunConfig(**meta["config"])
    rmap = build_map(cfg, backend=rows[0][3] if rows else None)
    worst = 0.0
    for row in rows:
        beta, m = float(row[0]), float(row[1])
        worst = max(worst, abs(rmap.residual(m, beta)))
    if worst >= tol:
        raise ValueError(f"branch point residual {worst:.3e} exceeds {tol}")
    return worst


def _mc_config(cfg: RunConfig, seed=None):
    mc = cfg.mc
    return McConfig(n_particles=int(mc["n_particles"]), dt=mc["dt"], burn_in=float(mc["burn_in"]),
                    window=float(mc["window"]), seed=int(mc["seed"] if seed is None else seed),
                    initial_mean=float(mc["initial_mean"]), initial_var=float(mc["initial_var"]),
                    n_batches=int(mc["n_batches"]))


def _betas(cfg: RunConfig):
    prob = cfg.problem
    return [float(b) for b in (prob["betas"] if prob["betas"] is not None else [prob["beta"]])]


def _mc_sweep(cfg: RunConfig, threads):
    betas = _betas(cfg)
    cache = PointCache(cfg.output["dir"], cfg.hash())

    def one(i):
        key = {"index": i, "beta": betas[i]}
        hit = cache.get(key)
        if hit is not None:
            return McEstimate(hit["m_hat"], hit["std_error"], error=hit["error"])
        mc_cfg = _mc_config(cfg, seed=derive_seed(cfg.mc["seed"], i))
        try:
            est = simulate(build_spec(cfg, betas[i]), mc_cfg)
        except (HermfpError, ValueError) as exc:
            log.error("beta=%s: %s", betas[i], exc)
            est = McEstimate(math.nan, math.nan, error=str(exc))
        cache.put(key, {"m_hat": est.m_hat, "std_error": est.std_error, "error": est.error})
        return est

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            estimates = list(pool.map(one, range(len(betas))))
    else:
        estimates = [one(i) for i in range(len(betas))]
    return betas, estimates


def _cmd_mc(cfg: RunConfig, threads=1):
    with _stage("particle sweep"):
        betas, estimates = _mc_sweep(cfg, threads)
    write_csv(_out(cfg, "mc.csv"), ["beta", "m_hat", "std_error"],
              [(b, e.m_hat, e.std_error) for b, e in zip(betas, estimates)], _meta(cfg))
    if any(not e.ok for e in estimates):
        raise _SweepFailure(f"{sum(not e.ok for e in estimates)} sweep point(s) failed")


class _SweepFailure(HermfpError):
    pass


def _cmd_zeta(cfg: RunConfig):
    alpha = asymptotics.compute_alpha_shift()
    rows = [(model, asymptotics.compute_zeta(model), alpha if model == "NS" else 0.0)
            for model in ("OU", "H", "B", "NS")]
    write_csv(_out(cfg, "zeta.csv"), ["model", "zeta", "alpha"], rows, _meta(cfg), float_format="%.5f")


def _cmd_critical_epsilon(cfg: RunConfig):
    prob = cfg.problem
    potential = Polynomial(np.asarray(prob["potential"], float))
    rows = []
    for beta_c in prob["beta_c"]:
        roots = asymptotics.critical_epsilon(float(beta_c), "OU", float(prob["theta"]), potential)
        rows.append((float(beta_c), roots[0] if roots else ""))
    write_csv(_out(cfg, "critical_epsilon.csv"), ["beta_c", "epsilon"], rows, _meta(cfg))


def _largest_root(rmap, beta, interval, n_grid):
    roots = find_fixed_points(rmap, beta, interval, n_grid)
    return max(abs(r) for r in roots) if roots else math.nan


def compare_tolerance(std_error):
    return max(0.02, 3.0 * std_error)


def _cmd_compare(cfg: RunConfig, threads=1):
    spec = build_spec(cfg)
    if spec.noise.tag != "OU":
        raise ConfigError("compare needs problem.noise = 'OU' (the expansion is OU-only)")
    interval = tuple(float(v) for v in cfg.numerics["m_interval"])
    n_grid = int(cfg.numerics["n_grid"])
    spectral = build_map(cfg, spec, "SpectralLinear")
    asym = build_map(cfg, spec, "AsymptoticOU")
    betas = _betas(cfg)
    with _stage("maps"):
        m_spec = [_largest_root(spectral, b, interval, n_grid) for b in betas]
        m_asym = [_largest_root(asym, b, interval, n_grid) for b in betas]
    with _stage("particles"):
        _, estimates = _mc_sweep(cfg, threads)
    rows = []
    for b, s, a, e in zip(betas, m_spec, m_asym, estimates):
        mc = abs(e.m_hat)
        dev = max(abs(s - a), abs(s - mc), abs(a - mc))
        tol = compare_tolerance(e.std_error)
        rows.append((b, s, a, mc, e.std_error, dev, tol, "yes" if dev <= tol else "no"))
    cols = ["beta", "m_spectral", "m_asymptotic", "m_mc", "mc_std_error", "max_deviation", "tolerance", "agree"]
    write_csv(_out(cfg, "compare.csv"), cols, rows, _meta(cfg))


_DISPATCH = {
    "solve-linear": _cmd_solve_linear,
    "solve-mckean": _cmd_solve_mckean,
    "self-consistency": _cmd_self_consistency,
    "bifurcate": _cmd_bifurcate,
    "mc": _cmd_mc,
    "zeta": _cmd_zeta,
    "critical-epsilon": _cmd_critical_epsilon,
    "compare": _cmd_compare,
}


def run(cfg: RunConfig, threads=1):
    """Execute one configured command, writing its artifacts under ``output.dir``."""
    func = _DISPATCH[cfg.command]
    with _stage(cfg.command):
        if cfg.command in ("mc", "compare"):
            func(cfg, threads)
        else:
            func(cfg)


def _parser():
    p = argparse.ArgumentParser(prog="hermfp", description="Hermite spectral solvers for mean-field Fokker-Planck problems.")
    p.add_argument("command", nargs="?", choices=COMMANDS,
                   help="command to run (overrides the config file's command)")
    p.add_argument("--config", help="TOML run configuration (optional for zeta)")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for sweeps")
    p.add_argument("--seed", type=int, help="master seed for particle runs (overrides mc.seed)")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage timings")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    overrides = {}
    if args.out is not None:
        overrides["output.dir"] = args.out
    if args.seed is not None:
        overrides["mc.seed"] = args.seed
    try:
        cfg = load_config(args.config, overrides, args.command)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
    except ConfigError as exc:
        print(f"hermfp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run(cfg, args.threads)
    except (ConfigError, ValueError) as exc:
        print(f"hermfp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HermfpError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"hermfp: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"hermfp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
