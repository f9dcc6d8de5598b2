"""Run configuration: a TOML document with fixed sections and defaults.

Grammar: top-level ``command``; sections ``[problem]``, ``[numerics]``,
``[mc]``, ``[continuation]``, ``[output]`` holding ``key = value`` pairs,
arrays in brackets.  Unknown keys are errors and every missing required key
is reported in a single message.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError

__all__ = ["COMMANDS", "DEFAULTS", "REQUIRED", "RunConfig", "parse_config", "load_config", "config_hash"]

COMMANDS = ("solve-linear", "solve-mckean", "self-consistency", "bifurcate", "mc", "zeta",
            "critical-epsilon", "compare")

DEFAULTS = {
    "problem": {
        "potential": [0.0, 0.0, -0.5, 0.0, 0.25],
        "theta": 1.0,
        "beta": None,
        "betas": None,
        "epsilon": 0.1,
        "noise": "white",
        "zeta": None,
        "alpha": None,
        "m": 0.0,
        "beta_c": None,
    },
    "numerics": {
        "shape": "triangle",
        "degree": 30,
        "bounds": None,
        "sigma": None,
        "x_weight": "potential",
        "backend": None,
        "scheme": "RK45",
        "dt": 1.0,
        "rtol": 1e-8,
        "atol": 1e-8,
        "t_final": 10.0,
        "steady_tol": 1e-10,
        "max_iter": 200,
        "d_hat": None,
        "initial_mean": 0.1,
        "initial_var": 0.1,
        "grid_x": [-3.0, 3.0, 301],
        "grid_y": [-4.0, 4.0, 161],
        "m_interval": [-2.0, 2.0],
        "n_grid": 101,
        "corrective": None,
    },
    "mc": {
        "n_particles": 2000,
        "dt": None,
        "burn_in": 50.0,
        "window": 50.0,
        "seed": 0,
        "initial_mean": 0.1,
        "initial_var": 0.1,
        "n_batches": 20,
    },
    "continuation": {
        "beta_min": 0.5,
        "beta_max": 5.0,
        "h": 0.05,
        "h_min": 1e-4,
        "h_max": 0.25,
        "tol": 1e-9,
    },
    "output": {
        "dir": "out",
        "prefix": "",
    },
}

# keys that must be present per command (dotted section.key)
REQUIRED = {
    "solve-linear": ["problem.potential", "problem.beta"],
    "solve-mckean": ["problem.potential", "problem.beta"],
    "self-consistency": ["problem.potential", "problem.beta"],
    "bifurcate": ["problem.potential"],
    "mc": ["problem.potential", "problem.betas"],
    "zeta": [],
    "critical-epsilon": ["problem.beta_c"],
    "compare": ["problem.potential", "problem.betas", "problem.epsilon"],
}

# a single beta stands in for a list of them
_ALTERNATIVES = {"problem.betas": "problem.beta"}

_SHAPES = ("triangle", "square", "rectangle")
_NOISES = ("white", "OU", "H", "B", "NS")
_NOISE_DIMS = {"white": 0, "OU": 1, "H": 2, "B": 1, "NS": 1}


@dataclass(frozen=True)
class RunConfig:
    command: str
    problem: dict
    numerics: dict
    mc: dict
    continuation: dict
    output: dict

    def resolved(self):
        """Plain dictionary of the full configuration, defaults included."""
        return {
            "command": self.command,
            "problem": dict(self.problem),
            "numerics": dict(self.numerics),
            "mc": dict(self.mc),
            "continuation": dict(self.continuation),
            "output": dict(self.output),
        }

    def hash(self):
        return config_hash(self.resolved())

    @property
    def dims(self):
        return 1 + _NOISE_DIMS[self.problem["noise"]]


def config_hash(resolved):
    """SHA-256 of the canonical JSON form, ignoring the output block."""
    payload = {k: v for k, v in resolved.items() if k != "output"}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def _check_number(errors, where, value, positive=False, nonneg=False, integer=False):
    ok_type = isinstance(value, int) if integer else isinstance(value, (int, float))
    if isinstance(value, bool) or not ok_type:
        errors.append(f"{where} must be {'an integer' if integer else 'a number'}, got {value!r}")
        return
    if positive and not value > 0:
        errors.append(f"{where} must be positive")
    if nonneg and value < 0:
        errors.append(f"{where} must be nonnegative")


def _validate(cfg: dict, errors):
    prob, num, mc, cont = cfg["problem"], cfg["numerics"], cfg["mc"], cfg["continuation"]
    if prob["noise"] not in _NOISES:
        errors.append(f"problem.noise must be one of {_NOISES}, got {prob['noise']!r}")
        return
    dims = 1 + _NOISE_DIMS[prob["noise"]]
    pot = prob["potential"]
    if not isinstance(pot, list) or not pot or not all(isinstance(c, (int, float)) for c in pot):
        errors.append("problem.potential must be a nonempty array of numbers")
    for key in ("theta",):
        _check_number(errors, f"problem.{key}", prob[key], nonneg=True)
    for key in ("beta", "epsilon", "zeta"):
        if prob[key] is not None:
            _check_number(errors, f"problem.{key}", prob[key], positive=True)
    for key in ("betas", "beta_c"):
        val = prob[key]
        if val is not None:
            if not isinstance(val, list) or not val:
                errors.append(f"problem.{key} must be a nonempty array")
            else:
                for i, b in enumerate(val):
                    _check_number(errors, f"problem.{key}[{i}]", b, positive=True)
    if num["shape"] not in _SHAPES:
        errors.append(f"numerics.shape must be one of {_SHAPES}, got {num['shape']!r}")
    if num["shape"] == "rectangle":
        bounds = num["bounds"]
        if not isinstance(bounds, list) or len(bounds) != dims:
            got = len(bounds) if isinstance(bounds, list) else bounds
            errors.append(f"numerics.bounds must have {dims} entries for noise {prob['noise']} (got {got})")
    else:
        _check_number(errors, "numerics.degree", num["degree"], nonneg=True, integer=True)
    sigma = num["sigma"]
    if sigma is not None:
        if isinstance(sigma, (int, float)):
            num["sigma"] = [float(sigma)] * dims
        elif not isinstance(sigma, list) or len(sigma) != dims:
            errors.append(f"numerics.sigma must be a number or have {dims} entries")
    if num["x_weight"] not in ("potential", "none"):
        errors.append("numerics.x_weight must be 'potential' or 'none'")
    if num["scheme"] not in ("RK45", "SemiImplicit"):
        errors.append("numerics.scheme must be 'RK45' or 'SemiImplicit'")
    for key in ("dt", "rtol", "atol", "t_final", "steady_tol"):
        _check_number(errors, f"numerics.{key}", num[key], positive=True)
    for key, size in (("grid_x", 3), ("grid_y", 3), ("m_interval", 2)):
        if not isinstance(num[key], list) or len(num[key]) != size:
            errors.append(f"numerics.{key} must be an array of {size} numbers")
    _check_number(errors, "mc.n_particles", mc["n_particles"], positive=True, integer=True)
    _check_number(errors, "mc.seed", mc["seed"], nonneg=True, integer=True)
    if isinstance(mc["seed"], int) and mc["seed"] >= 2**64:
        errors.append("mc.seed must fit in 64 bits")
    for key in ("burn_in",):
        _check_number(errors, f"mc.{key}", mc[key], nonneg=True)
    _check_number(errors, "mc.window", mc["window"], positive=True)
    if cont["beta_min"] >= cont["beta_max"]:
        errors.append("continuation.beta_min must be below continuation.beta_max")


def parse_config(text, overrides=None, command=None) -> RunConfig:
    """Parse TOML text into a :class:`RunConfig` with defaults applied.

    ``overrides`` maps dotted keys (``"mc.seed"``) to values applied after
    parsing, as used by command-line flags; ``command`` replaces the
    document's ``command`` key.
    """
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    errors = []
    file_command = raw.pop("command", None)
    command = file_command if command is None else command
    cfg = copy.deepcopy(DEFAULTS)
    for section, body in raw.items():
        if section not in cfg:
            errors.append(f"unknown key {section!r}")
            continue
        if not isinstance(body, dict):
            errors.append(f"{section!r} must be a section")
            continue
        for key, value in body.items():
            if key not in cfg[section]:
                errors.append(f"unknown key {section}.{key!r}")
            else:
                cfg[section][key] = value
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".")
        cfg[section][key] = value
    if command is None:
        errors.append("missing required key 'command'")
    elif command not in COMMANDS:
        errors.append(f"unknown command {command!r}; expected one of {COMMANDS}")
    else:
        present = {f"{s}.{k}" for s, body in raw.items() if isinstance(body, dict) for k in body}
        present |= {k for k in (overrides or {})}
        missing = [k for k in REQUIRED[command] if k not in present and _ALTERNATIVES.get(k) not in present]
        if missing:
            errors.append("missing required keys: " + ", ".join(missing))
    if errors:
        raise ConfigError("; ".join(errors))
    _validate(cfg, errors)
    if errors:
        raise ConfigError("; ".join(errors))
    return RunConfig(command, cfg["problem"], cfg["numerics"], cfg["mc"], cfg["continuation"], cfg["output"])


def load_config(path, overrides=None, command=None) -> RunConfig:
    if path is None:
        return parse_config("", overrides, command)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    return parse_config(text, overrides, command)
