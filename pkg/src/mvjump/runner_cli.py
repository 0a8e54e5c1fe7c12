"""Configuration-driven experiment runner.

A run is described by one YAML or JSON file.  Sections may be nested or
written as flat dotted keys (``levy.alpha: 0.5``).  Every run writes
``manifest.json`` (resolved configuration, version, seed), one CSV per
result table and ``summary.json`` with one entry per checked assertion.

Exit codes: 0 all assertions passed, 1 an assertion failed, 2 invalid
configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import math
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import __version__
from .coefficient_model import builtin_affine, builtin_linear_meanfield, default_taper, first_moment, scalar_of_moment
from .errors import ConfigError, MVJumpError, NumericalFailure
from .jump_driver import LevyModel, assumption_a_limit
from .malliavin_engine import (batch_means, estimate_density_ibp, gamma_inverse_moment_scaling, pair_weight,
                               simulate_weights)
from .measure_kit import EmpiricalMeasure
from .mv_simulator import (check_flow_property, moment_report, picard_law_iteration, run_paths, sample_initial,
                           simulate_particle_system, sup_w2_gap, uniform_grid)
from .pde_lab import (PdeQuery, check_semigroup, evaluate_U, grad_mu_U, grad_x_U, indicator, linear_x, mean_g,
                      pde_residual, verify_chain_rule, write_pde_json)
from .tangent_flows import build_bank, simulate_dmu_flow

REQUIRED = object()

# dotted key -> default (REQUIRED marks mandatory keys)
SCHEMA: dict[str, Any] = {
    "experiment": REQUIRED,
    "seed": REQUIRED,
    "out": "out",
    "threads": 1,
    "model.family": "lm1",
    "model.beta": 0.5,
    "model.beta_bar": 0.25,
    "model.sigma": 1.0,
    "model.sigma_x": 0.0,
    "model.sigma_m": 0.0,
    "model.B": None,
    "model.B_bar": None,
    "model.s0": None,
    "model.S_x": None,
    "model.S_m": None,
    "model.b0": None,
    "model.taper_start": "default",
    "levy.alpha": REQUIRED,
    "levy.k": 1.0,
    "levy.eps": 1e-3,
    "levy.R0": 1.0,
    "levy.psi": "u2",
    "sim.T": 1.0,
    "sim.h": 1e-3,
    "sim.n_particles": 10_000,
    "sim.n_paths": 100_000,
    "sim.x": 0.0,
    "sim.theta": "dirac_x",
    "sim.theta_sd": 0.0,
    "tangent.bank_size": 256,
    "tangent.v_points": None,
    "tangent.fp_sweeps": 2,
    "tangent.fd_deltas": [0.4, 0.2, 0.1, 0.05],
    "weights.kind": "Z1",
    "weights.v_points": None,
    "weights.gamma_floor": 1e-10,
    "weights.fd_delta": 0.05,
    "weights.functions": ["identity", "sin", "indicator_gt_2"],
    "weights.max_rejection": 0.01,
    "density.grid": {"lo": -8.0, "hi": 8.0, "n": 161},
    "density.mass_tol": 0.03,
    "scaling.alphas": [1.0, 0.5],
    "scaling.slope_tol": [0.3, 0.5],
    "scaling.t_list": [0.02, 0.04, 0.08, 0.16, 0.32, 0.64],
    "scaling.p": 1.0,
    "scaling.k": 0.5,
    "scaling.eps": 1e-4,
    "scaling.n_paths": 20_000,
    "scaling.lambda_lo": 1e6,
    "scaling.lambda_hi": 1e10,
    "scaling.lambda_n": 9,
    "scaling.a_tol": 0.02,
    "pde.g": ["linear_x", "mean"],
    "pde.t": 1.0,
    "pde.x": None,
    "pde.dt": 0.01,
    "pde.replicas": 8,
    "pde.shift": 0.2,
    "pde.chain_F": ["m", "m2"],
    "pde.chain_mode": "flat",
    "flow.h_list": [0.02, 0.01, 0.005, 0.0025],
    "flow.seeds": 32,
    "flow.s": 0.0,
    "flow.t": 0.5,
    "flow.r": 1.0,
    "flow.n_particles": 500,
    "flow.n_paths": 10,
    "flow.slope_tol": 0.2,
    "picard.n_iter": 6,
    "picard.floor_factor": 3.0,
    "moments.p": 2.0,
    "moments.thread_counts": [1, 4],
}

MODEL_FAMILIES = ("lm1", "linear_meanfield", "affine")

# keys whose mapping value is a single setting rather than a subsection
LEAF_MAPPINGS = {"density.grid"}


# ------------------------------------------------------------------ configuration

def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in tree.items():
        if not isinstance(key, str):
            raise ConfigError(f"configuration keys must be strings, got {key!r}")
        name = f"{prefix}{key}"
        if isinstance(value, dict) and name not in LEAF_MAPPINGS:
            flat.update(_flatten(value, name + "."))
        else:
            if name in flat:
                raise ConfigError(f"{name}: given twice")
            flat[name] = value
    return flat


@dataclass
class RunConfig:
    """Resolved flat configuration; ``values`` holds every schema key."""

    values: dict
    source: str = "<dict>"

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def experiment(self) -> str:
        return self.values["experiment"]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def nested(self) -> dict:
        tree: dict = {}
        for key in sorted(self.values):
            node = tree
            parts = key.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = self.values[key]
        return tree


def _as_float(key, value, *, positive=False, nonneg=False):
    if isinstance(value, str):
        # YAML 1.1 reads exponents without a dot, such as 1e-10, as strings
        try:
            value = float(value)
        except ValueError:
            pass
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(f"{key}: must be finite")
    if positive and value <= 0:
        raise ConfigError(f"{key}: must be positive, got {value}")
    if nonneg and value < 0:
        raise ConfigError(f"{key}: must be nonnegative, got {value}")
    return value


def _as_int(key, value, *, minimum=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    value = int(value)
    if minimum is not None and value < minimum:
        raise ConfigError(f"{key}: must be at least {minimum}, got {value}")
    return value


def _as_float_list(key, value, *, positive=False):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = [value]
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{key}: expected a nonempty list of numbers")
    return [_as_float(f"{key}[{i}]", v, positive=positive) for i, v in enumerate(value)]


def _as_vector(key, value):
    return _as_float_list(key, value)


def _density_grid(spec) -> list:
    """Explicit increasing list, or a mapping {lo, hi, n} for an even grid."""
    if isinstance(spec, dict):
        extra = sorted(set(spec) - {"lo", "hi", "n"})
        if extra:
            raise ConfigError(f"density.grid.{extra[0]}: unknown key")
        lo = _as_float("density.grid.lo", spec.get("lo", -8.0))
        hi = _as_float("density.grid.hi", spec.get("hi", 8.0))
        n = _as_int("density.grid.n", spec.get("n", 161), minimum=2)
        if not lo < hi:
            raise ConfigError("density.grid.lo: must be below density.grid.hi")
        return np.linspace(lo, hi, n).tolist()
    pts = _as_float_list("density.grid", spec)
    if len(pts) < 2 or np.any(np.diff(pts) <= 0):
        raise ConfigError("density.grid: expected at least two increasing points")
    return pts


def _validate(values: dict) -> dict:
    v = dict(values)
    if not isinstance(v["experiment"], str):
        raise ConfigError("experiment: expected a name")
    if v["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"experiment: unknown experiment {v['experiment']!r}; valid names are "
                          + ", ".join(EXPERIMENTS))
    seed = v["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed: expected an unsigned 64-bit integer, got {seed!r}")
    if not isinstance(v["out"], str):
        raise ConfigError("out: expected a directory path")
    v["threads"] = _as_int("threads", v["threads"], minimum=1)
    if v["model.family"] not in MODEL_FAMILIES:
        raise ConfigError(f"model.family: expected one of {', '.join(MODEL_FAMILIES)}, got {v['model.family']!r}")
    for key in ("model.beta", "model.beta_bar", "model.sigma", "model.sigma_x", "model.sigma_m"):
        v[key] = _as_float(key, v[key])
    if v["model.family"] == "affine":
        for key in ("model.B", "model.s0", "model.S_x"):
            if v[key] is None:
                raise ConfigError(f"{key}: required for the affine family")
    ts = v["model.taper_start"]
    if ts not in ("default", None):
        v["model.taper_start"] = _as_float("model.taper_start", ts, positive=True)
    v["levy.alpha"] = _as_float("levy.alpha", v["levy.alpha"], positive=True)
    if not v["levy.alpha"] < 2:
        raise ConfigError("levy.alpha: must lie in (0, 2)")
    v["levy.k"] = _as_float("levy.k", v["levy.k"], nonneg=True)
    v["levy.eps"] = _as_float("levy.eps", v["levy.eps"], positive=True)
    v["levy.R0"] = _as_float("levy.R0", v["levy.R0"], positive=True)
    if not v["levy.eps"] < v["levy.R0"]:
        raise ConfigError("levy.eps: must be smaller than levy.R0")
    if v["levy.psi"] != "u2":
        raise ConfigError(f"levy.psi: only \"u2\" is supported, got {v['levy.psi']!r}")
    v["sim.T"] = _as_float("sim.T", v["sim.T"], positive=True)
    v["sim.h"] = _as_float("sim.h", v["sim.h"], positive=True)
    if v["sim.h"] > 0.1:
        raise ConfigError("sim.h: must not exceed 0.1")
    if abs(round(v["sim.T"] / v["sim.h"]) * v["sim.h"] - v["sim.T"]) > 1e-9:
        raise ConfigError("sim.h: must divide sim.T")
    v["sim.n_particles"] = _as_int("sim.n_particles", v["sim.n_particles"], minimum=2)
    v["sim.n_paths"] = _as_int("sim.n_paths", v["sim.n_paths"], minimum=1000)
    v["sim.x"] = _as_vector("sim.x", v["sim.x"])
    if v["sim.theta"] != "dirac_x":
        v["sim.theta"] = _as_vector("sim.theta", v["sim.theta"])
    v["sim.theta_sd"] = _as_float("sim.theta_sd", v["sim.theta_sd"], nonneg=True)
    v["tangent.bank_size"] = _as_int("tangent.bank_size", v["tangent.bank_size"], minimum=32)
    if v["tangent.v_points"] is not None:
        pts = v["tangent.v_points"]
        if not isinstance(pts, list) or not pts:
            raise ConfigError("tangent.v_points: expected a nonempty list")
        v["tangent.v_points"] = [_as_vector(f"tangent.v_points[{i}]", p) for i, p in enumerate(pts)]
    v["tangent.fp_sweeps"] = _as_int("tangent.fp_sweeps", v["tangent.fp_sweeps"], minimum=1)
    v["tangent.fd_deltas"] = _as_float_list("tangent.fd_deltas", v["tangent.fd_deltas"], positive=True)
    if v["weights.kind"] not in ("Z1", "Z2"):
        raise ConfigError(f"weights.kind: expected \"Z1\" or \"Z2\", got {v['weights.kind']!r}")
    if v["weights.v_points"] is not None:
        pts = v["weights.v_points"]
        if not isinstance(pts, list) or not pts:
            raise ConfigError("weights.v_points: expected a nonempty list")
        v["weights.v_points"] = [_as_vector(f"weights.v_points[{i}]", p) for i, p in enumerate(pts)]
    v["weights.gamma_floor"] = _as_float("weights.gamma_floor", v["weights.gamma_floor"], positive=True)
    v["weights.fd_delta"] = _as_float("weights.fd_delta", v["weights.fd_delta"], positive=True)
    v["weights.max_rejection"] = _as_float("weights.max_rejection", v["weights.max_rejection"], nonneg=True)
    fns = v["weights.functions"]
    if not isinstance(fns, list) or not fns or any(f not in TEST_FUNCTIONS for f in fns):
        raise ConfigError(f"weights.functions: expected a list drawn from {', '.join(TEST_FUNCTIONS)}")
    v["density.grid"] = _density_grid(v["density.grid"])
    v["density.mass_tol"] = _as_float("density.mass_tol", v["density.mass_tol"], positive=True)
    v["scaling.alphas"] = _as_float_list("scaling.alphas", v["scaling.alphas"], positive=True)
    v["scaling.slope_tol"] = _as_float_list("scaling.slope_tol", v["scaling.slope_tol"], positive=True)
    if len(v["scaling.slope_tol"]) != len(v["scaling.alphas"]):
        raise ConfigError("scaling.slope_tol: needs one tolerance per entry of scaling.alphas")
    v["scaling.t_list"] = _as_float_list("scaling.t_list", v["scaling.t_list"], positive=True)
    for key in ("scaling.p", "scaling.k", "scaling.eps", "scaling.lambda_lo", "scaling.lambda_hi", "scaling.a_tol"):
        v[key] = _as_float(key, v[key], positive=True)
    v["scaling.n_paths"] = _as_int("scaling.n_paths", v["scaling.n_paths"], minimum=100)
    v["scaling.lambda_n"] = _as_int("scaling.lambda_n", v["scaling.lambda_n"], minimum=4)
    g = v["pde.g"]
    if isinstance(g, str):
        g = [g]
    if not isinstance(g, list) or not g:
        raise ConfigError("pde.g: expected a terminal-function name or a list of them")
    for i, name in enumerate(g):
        terminal_function(name, f"pde.g[{i}]")
    v["pde.g"] = g
    if v["pde.x"] is not None:
        v["pde.x"] = _as_vector("pde.x", v["pde.x"])
    chain = v["pde.chain_F"]
    if isinstance(chain, str):
        chain = [chain]
    if not isinstance(chain, list) or not chain or any(name not in FUNCTIONALS for name in chain):
        raise ConfigError(f"pde.chain_F: expected names drawn from {', '.join(FUNCTIONALS)}")
    v["pde.chain_F"] = chain
    if v["pde.chain_mode"] not in ("flat", "common_shift"):
        raise ConfigError("pde.chain_mode: expected \"flat\" or \"common_shift\"")
    for key in ("pde.t", "pde.dt", "pde.shift"):
        v[key] = _as_float(key, v[key], positive=True)
    v["pde.replicas"] = _as_int("pde.replicas", v["pde.replicas"], minimum=2)
    v["flow.h_list"] = _as_float_list("flow.h_list", v["flow.h_list"], positive=True)
    if len(v["flow.h_list"]) < 2:
        raise ConfigError("flow.h_list: needs at least two steps")
    v["flow.seeds"] = _as_int("flow.seeds", v["flow.seeds"], minimum=1)
    for key in ("flow.s", "flow.t", "flow.r"):
        v[key] = _as_float(key, v[key], nonneg=True)
    if not v["flow.s"] < v["flow.t"] < v["flow.r"]:
        raise ConfigError("flow.t: need flow.s < flow.t < flow.r")
    v["flow.n_particles"] = _as_int("flow.n_particles", v["flow.n_particles"], minimum=2)
    v["flow.n_paths"] = _as_int("flow.n_paths", v["flow.n_paths"], minimum=1)
    v["flow.slope_tol"] = _as_float("flow.slope_tol", v["flow.slope_tol"], positive=True)
    v["picard.n_iter"] = _as_int("picard.n_iter", v["picard.n_iter"], minimum=3)
    v["picard.floor_factor"] = _as_float("picard.floor_factor", v["picard.floor_factor"], positive=True)
    v["moments.p"] = _as_float("moments.p", v["moments.p"], positive=True)
    counts = v["moments.thread_counts"]
    if not isinstance(counts, list) or len(counts) < 2:
        raise ConfigError("moments.thread_counts: expected at least two worker counts")
    v["moments.thread_counts"] = [_as_int(f"moments.thread_counts[{i}]", c, minimum=1) for i, c in enumerate(counts)]
    return v


def load_config(source, overrides: dict | None = None) -> RunConfig:
    """Parse a YAML/JSON file (or an already loaded mapping) into a RunConfig.

    A manifest written by a previous run is accepted as well; its
    ``config`` section is used.
    """
    if isinstance(source, dict):
        raw, name = source, "<dict>"
    else:
        path = Path(source)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse configuration {path}: {exc}") from exc
        name = str(path)
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    if "config" in raw and "version" in raw:
        raw = raw["config"]
    flat = _flatten(raw)
    if "sim.seed" in flat:
        seed = flat.pop("sim.seed")
        if "seed" in flat and flat["seed"] != seed:
            raise ConfigError("sim.seed: conflicts with seed")
        flat["seed"] = seed
    if overrides:
        flat.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(flat) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown configuration key")
    values = {}
    for key, default in SCHEMA.items():
        if key in flat:
            values[key] = flat[key]
        elif default is REQUIRED:
            raise ConfigError(f"{key}: required field is missing")
        else:
            values[key] = default
    return RunConfig(_validate(values), name)


# ------------------------------------------------------------------ model assembly

def _levy(cfg: RunConfig, alpha: float | None = None, k: float | None = None, eps: float | None = None) -> LevyModel:
    return LevyModel(alpha=cfg["levy.alpha"] if alpha is None else alpha,
                     k=cfg["levy.k"] if k is None else k,
                     truncation_eps=cfg["levy.eps"] if eps is None else eps,
                     R0=cfg["levy.R0"])


def _taper(cfg: RunConfig):
    ts = cfg["model.taper_start"]
    return default_taper(cfg["levy.R0"]) if ts == "default" else ts


def _coefficients(cfg: RunConfig, alpha: float | None = None, taper="config"):
    alpha = cfg["levy.alpha"] if alpha is None else alpha
    taper_start = _taper(cfg) if taper == "config" else taper
    fam = cfg["model.family"]
    if fam == "lm1":
        return builtin_linear_meanfield(0.5, 0.25, 1.0, 0.0, 0.0, alpha=alpha, taper_start=taper_start,
                                        R0=cfg["levy.R0"])
    if fam == "linear_meanfield":
        return builtin_linear_meanfield(cfg["model.beta"], cfg["model.beta_bar"], cfg["model.sigma"],
                                        cfg["model.sigma_x"], cfg["model.sigma_m"], alpha=alpha,
                                        taper_start=taper_start, R0=cfg["levy.R0"])
    try:
        return builtin_affine(cfg["model.B"], cfg["model.B_bar"] or 0.0 * np.asarray(cfg["model.B"]),
                              cfg["model.s0"], cfg["model.S_x"], cfg["model.S_m"], cfg["model.b0"], alpha=alpha,
                              taper_start=taper_start, R0=cfg["levy.R0"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"model: invalid affine parameters: {exc}") from exc


def _linear_params(cfg: RunConfig):
    """(beta, beta_bar) when closed-form tangent oracles apply, else None."""
    fam = cfg["model.family"]
    if fam == "lm1":
        return 0.5, 0.25
    if fam == "linear_meanfield" and cfg["model.sigma_x"] == 0.0 and cfg["model.sigma_m"] == 0.0:
        return cfg["model.beta"], cfg["model.beta_bar"]
    return None


def _x(cfg: RunConfig) -> np.ndarray:
    return np.asarray(cfg["sim.x"], dtype=float)


def _theta(cfg: RunConfig, shift: float = 0.0):
    centre = _x(cfg) if cfg["sim.theta"] == "dirac_x" else np.asarray(cfg["sim.theta"], dtype=float)
    centre = centre + shift
    sd = cfg["sim.theta_sd"]
    if sd == 0.0:
        return centre

    def sampler(n, rng):
        return centre[None, :] + sd * rng.standard_normal((n, centre.shape[0]))

    return sampler


def _check_dim(cfg: RunConfig, cs) -> None:
    if _x(cfg).shape[0] != cs.dim:
        raise ConfigError(f"sim.x: has {_x(cfg).shape[0]} entries but the model has dimension {cs.dim}")
    if cfg["sim.theta"] != "dirac_x" and len(cfg["sim.theta"]) != cs.dim:
        raise ConfigError(f"sim.theta: has {len(cfg['sim.theta'])} entries but the model has dimension {cs.dim}")


def _need_scalar(cfg: RunConfig, cs, what: str) -> None:
    if cs.dim != 1:
        raise ConfigError(f"model: {what} is implemented for scalar models only")


# ------------------------------------------------------------------ results

@dataclass
class Assertion:
    name: str
    value: float
    threshold: float
    passed: bool
    criterion: int
    detail: str = ""


@dataclass
class Result:
    tables: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    assertions: list = field(default_factory=list)
    json: dict = field(default_factory=dict)

    def table(self, name: str, header: list, rows: list) -> None:
        self.tables[name] = (header, rows)

    def check(self, name: str, value: float, threshold: float, passed: bool, criterion: int, detail: str = "") -> None:
        self.assertions.append(Assertion(name, float(value), float(threshold), bool(passed), criterion, detail))

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions)


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_table(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(c) for c in row])


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


# ------------------------------------------------------------------ experiment helpers

TEST_FUNCTIONS: dict[str, Callable] = {
    "identity": lambda X: X[:, 0],
    "sin": lambda X: np.sin(X[:, 0]),
    "indicator_gt_2": lambda X: (X[:, 0] > 2.0).astype(float),
}

TERMINALS = {"linear_x": linear_x, "x": linear_x, "mean": mean_g, "m": mean_g}


def terminal_function(name, key: str = "pde.g"):
    """Terminal function by name: linear_x, mean or indicator(q0)."""
    if not isinstance(name, str):
        raise ConfigError(f"{key}: expected a name, got {name!r}")
    if name in TERMINALS:
        return TERMINALS[name]()
    if name.startswith("indicator(") and name.endswith(")"):
        try:
            q0 = float(name[len("indicator("):-1])
        except ValueError:
            raise ConfigError(f"{key}: cannot read the threshold in {name!r}") from None
        return indicator(q0)
    raise ConfigError(f"{key}: unknown terminal function {name!r}; expected linear_x, mean or indicator(q0)")

FUNCTIONALS = {
    "m": lambda: first_moment(),
    "m2": lambda: scalar_of_moment(lambda m: m * m, lambda m: 2.0 * m, "m^2"),
}


def _setup(cfg: RunConfig, theta_shift: float = 0.0, seed: int | None = None):
    cs = _coefficients(cfg)
    _check_dim(cfg, cs)
    lm = _levy(cfg)
    grid = uniform_grid(cfg["sim.T"], cfg["sim.h"])
    seed = cfg.seed if seed is None else seed
    law, _ = simulate_particle_system(cs, lm, _theta(cfg, theta_shift), cfg["sim.n_particles"], grid, seed,
                                      record="none")
    return cs, lm, grid, law


def _v_points(cfg: RunConfig, section: str = "tangent") -> np.ndarray:
    pts = cfg[f"{section}.v_points"]
    if pts is None:
        return _x(cfg)[None, :]
    return np.asarray(pts, dtype=float)


def _law_table(res: "Result", law) -> None:
    res.table("law", ["t", "mean", "var", "w2_to_prev"], [list(row) for row in law.summary_rows()])


def _within(estimate: float, se: float, oracle: float, slack: float) -> tuple[float, float, bool]:
    gap = abs(estimate - oracle)
    tol = 3.0 * se + slack
    return gap, tol, gap <= tol


# ------------------------------------------------------------------ experiments

def exp_ibp_x(cfg: RunConfig, res: Result) -> None:
    cs, lm, grid, law = _setup(cfg)
    _law_table(res, law)
    x, seed, threads = _x(cfg), cfg.seed, cfg["threads"]
    n, delta, kind = cfg["sim.n_paths"], cfg["weights.fd_delta"], cfg["weights.kind"]
    wb = simulate_weights(cs, lm, x, law, grid, n, seed, threads=threads, floor=cfg["weights.gamma_floor"])
    shift = np.zeros_like(x)
    shift[0] = delta
    if kind == "Z1":
        # derivative in the starting point: move x, keep every jump event
        x0 = np.broadcast_to(x, (n, x.shape[0]))
        up = run_paths(cs, lm, x0 + shift, law, grid, seed, tag="weights", threads=threads).out.X
        down = run_paths(cs, lm, x0 - shift, law, grid, seed, tag="weights", threads=threads).out.X
    else:
        # derivative of f itself at the terminal point
        up, down = wb.X + shift, wb.X - shift
    ok = ~wb.rejected
    rows, rel = [], []
    for name in cfg["weights.functions"]:
        f = TEST_FUNCTIONS[name]
        weighted = (f(wb.X) * wb.weights[kind][:, 0])[ok]
        fd = ((f(up) - f(down)) / (2.0 * delta))[ok]
        w_val, w_se = batch_means(weighted)
        fd_val, fd_se = batch_means(fd)
        _, diff_se = batch_means(weighted - fd)
        gap = abs(float(w_val) - float(fd_val))
        rows.append([name, w_val, w_se, fd_val, fd_se, gap, diff_se, gap / diff_se if diff_se > 0 else 0.0])
        rel.append(gap / max(abs(float(fd_val)), 1e-12))
        res.check(f"ibp_x[{name}]", gap, 3.0 * diff_se, gap <= 3.0 * diff_se, 1,
                  f"{kind} weight estimate against the shared-noise central difference")
    res.table("ibp_x", ["f", "weight_est", "weight_se", "fd_est", "fd_se", "gap", "combined_se", "z"], rows)
    res.metrics["ibp_rel_gap"] = max(rel)
    res.metrics["rejection_rate"] = wb.rejection_rate
    res.check("gamma_rejection_rate", wb.rejection_rate, cfg["weights.max_rejection"],
              wb.rejection_rate < cfg["weights.max_rejection"], 1)

    lin = _linear_params(cfg)
    from .tangent_flows import simulate_dx_flow
    base = run_paths(cs, lm, x[None, :], law, grid, seed, tag="tangent_base", record="all")[0]
    dx = simulate_dx_flow(cs, lm, base, law)
    res.table("tangent_dx", ["t", "dx"], [[t, dx[k, 0, 0]] for k, t in enumerate(grid)])
    res.metrics["dx_T"] = float(dx[-1, 0, 0])
    if lin is not None:
        oracle = math.exp(lin[0] * cfg["sim.T"])
        res.metrics["dx_oracle"] = oracle
        err = abs(float(dx[-1, 0, 0]) - oracle)
        res.check("tangent_dx", err, 1e-3, err <= 1e-3, 7, "state tangent against exp(beta T)")


def exp_ibp_mu(cfg: RunConfig, res: Result) -> None:
    cs, lm, grid, law = _setup(cfg)
    _need_scalar(cfg, cs, "the Lions-weight experiment")
    _law_table(res, law)
    x, seed, threads, T = _x(cfg), cfg.seed, cfg["threads"], cfg["sim.T"]
    v_points = _v_points(cfg, "weights")
    bank = build_bank(cs, lm, law, grid, v_points, cfg["tangent.bank_size"], seed, sweeps=cfg["tangent.fp_sweeps"],
                      threads=threads)
    wb = simulate_weights(cs, lm, x, law, grid, cfg["sim.n_paths"], seed, bank=bank, threads=threads,
                          floor=cfg["weights.gamma_floor"])
    lin = _linear_params(cfg)
    oracle = None if lin is None else math.exp((lin[0] + lin[1]) * T) - math.exp(lin[0] * T)
    rows = []
    for r, v in enumerate(v_points):
        est = pair_weight(TEST_FUNCTIONS["identity"], wb, "Zmu", v_index=r)
        val, se = float(est.value[0]), float(est.se[0])
        rows.append([float(v[0]), val, se, "" if oracle is None else oracle])
        if oracle is not None:
            gap, tol, ok = _within(val, se, oracle, 1e-2)
            res.check(f"ibp_mu[v={float(v[0])!r}]", gap, tol, ok, 2, "Lions weight against the closed form")
            res.metrics.setdefault("ibp_mu_gap", gap)
    res.table("ibp_mu", ["v", "estimate", "se", "oracle"], rows)
    res.metrics["bank_sweep_changes"] = bank.sweep_changes

    ok = ~wb.rejected
    zero_rows = []
    for key, arr in (("Z1", wb.weights["Z1"][:, 0]), ("Z2", wb.weights["Z2"][:, 0]),
                     ("Zmu", wb.weights["Zmu"][:, 0, 0])):
        val, se = batch_means(arr[ok])
        zero_rows.append([key, val, se])
        res.check(f"zero_mean[{key}]", abs(float(val)), 3.0 * float(se), abs(float(val)) <= 3.0 * float(se), 11)
    res.table("weight_means", ["weight", "mean", "se"], zero_rows)

    base = run_paths(cs, lm, x[None, :], law, grid, seed, tag="tangent_base", record="all")[0]
    tangent_v = _v_points(cfg, "tangent")
    if cfg["tangent.v_points"] is not None or cfg["weights.v_points"] is not None:
        tbank = build_bank(cs, lm, law, grid, tangent_v, cfg["tangent.bank_size"], seed,
                           sweeps=cfg["tangent.fp_sweeps"], threads=threads)
    else:
        tbank = bank
    state = simulate_dmu_flow(cs, lm, base, law, tangent_v, cfg["tangent.bank_size"], seed, bank=tbank)
    labels = list(state.dmu)
    res.table("tangent", ["t", "dx"] + ["dmu(" + ";".join(repr(c) for c in v) + ")" for v in labels],
              [[t, state.dx[k, 0, 0]] + [state.dmu[v][k, 0, 0] for v in labels] for k, t in enumerate(grid)])
    dmu = state.dmu[labels[0]]
    res.metrics["dmu_T"] = float(dmu[-1, 0, 0])
    if oracle is not None:
        err = abs(float(dmu[-1, 0, 0]) - oracle)
        res.check("tangent_dmu", err, 1e-2, err <= 1e-2, 7, "Lions tangent against the closed form")

    # shared-noise response of E[X_T^x] to a shift of the initial law
    x0 = np.broadcast_to(x, (cfg["sim.n_paths"], 1))
    ref = run_paths(cs, lm, x0, law, grid, seed, tag="fd_law", threads=threads).out.X[:, 0].mean()
    fd_rows = []
    for delta in cfg["tangent.fd_deltas"]:
        _, _, _, law_d = _setup(cfg, theta_shift=delta)
        moved = run_paths(cs, lm, x0, law_d, grid, seed, tag="fd_law", threads=threads).out.X[:, 0].mean()
        fd_rows.append([delta, moved - ref, (moved - ref) / delta])
    res.table("law_fd", ["delta", "response", "quotient"], fd_rows)
    d_arr = np.array([r[0] for r in fd_rows])
    resp = np.abs(np.array([r[1] for r in fd_rows]))
    slope = float(np.polyfit(np.log(d_arr), np.log(np.maximum(resp, 1e-300)), 1)[0])
    res.metrics["law_fd_slope"] = slope
    res.check("law_fd_slope", abs(slope - 1.0), 0.2, abs(slope - 1.0) <= 0.2, 7,
              "log-log slope of the law-shift response in the shift size")


def exp_ibp_deltax(cfg: RunConfig, res: Result) -> None:
    if cfg["sim.theta"] != "dirac_x" or cfg["sim.theta_sd"] != 0.0:
        raise ConfigError("sim.theta: the delta_x experiment requires sim.theta = \"dirac_x\" and sim.theta_sd = 0")
    cs, lm, grid, law = _setup(cfg)
    _need_scalar(cfg, cs, "the delta_x experiment")
    _law_table(res, law)
    x, seed, threads = _x(cfg), cfg.seed, cfg["threads"]
    bank = build_bank(cs, lm, law, grid, x[None, :], cfg["tangent.bank_size"], seed,
                      sweeps=cfg["tangent.fp_sweeps"], threads=threads)
    wb = simulate_weights(cs, lm, x, law, grid, cfg["sim.n_paths"], seed, bank=bank, delta_index=0,
                          threads=threads, floor=cfg["weights.gamma_floor"])
    est = pair_weight(TEST_FUNCTIONS["identity"], wb, "Zdelta")
    val, se = float(est.value[0]), float(est.se[0])
    lin = _linear_params(cfg)
    oracle = None if lin is None else math.exp((lin[0] + lin[1]) * cfg["sim.T"])
    res.table("ibp_deltax", ["estimate", "se", "oracle", "rejection_rate"],
              [[val, se, "" if oracle is None else oracle, wb.rejection_rate]])
    res.metrics["deltax_estimate"] = val
    if oracle is not None:
        gap, tol, ok = _within(val, se, oracle, 1e-2)
        res.metrics["deltax_gap"] = gap
        res.check("ibp_deltax", gap, tol, ok, 3, "total derivative against exp((beta + beta_bar) T)")


def exp_density_1d(cfg: RunConfig, res: Result) -> None:
    cs, lm, grid, law = _setup(cfg)
    _need_scalar(cfg, cs, "the density experiment")
    _law_table(res, law)
    y = np.asarray(cfg["density.grid"], dtype=float)
    est = estimate_density_ibp(cs, lm, cfg["sim.T"], _x(cfg), law, y, cfg["sim.n_paths"], cfg.seed,
                               h=cfg["sim.h"], threads=cfg["threads"], floor=cfg["weights.gamma_floor"])
    combined = np.hypot(est.se, est.hist_se)
    res.table("density", ["y", "p_hat", "se", "n_rejected"],
              [[a, b, c, est.n_rejected] for a, b, c in zip(est.y, est.p_hat, est.se)])
    res.table("density_histogram", ["y", "hist_p", "hist_se", "bin_width"],
              [[a, b, c, est.bin_width] for a, b, c in zip(est.y, est.hist_p, est.hist_se)])
    mass_err = abs(est.integral - 1.0)
    res.metrics["integral"] = est.integral
    res.check("density_mass", mass_err, cfg["density.mass_tol"], mass_err <= cfg["density.mass_tol"], 4)
    gap = float(np.max(np.abs(est.p_hat - est.hist_p)))
    tol = 3.0 * float(np.max(combined))
    res.metrics["sup_gap"] = gap
    res.metrics["max_pointwise_z"] = float(np.max(np.abs(est.p_hat - est.hist_p) / np.maximum(combined, 1e-300)))
    res.check("density_vs_histogram", gap, tol, gap <= tol, 4, "sup over the grid against 3 x largest combined s.e.")
    lowest = float(np.min(est.p_hat + 3.0 * est.se))
    res.check("density_nonnegative", lowest, 0.0, lowest >= 0.0, 4, "min of p_hat + 3 s.e.")


def exp_gamma_scaling(cfg: RunConfig, res: Result) -> None:
    x = _x(cfg)
    p = cfg["scaling.p"]
    fit_rows, point_rows, a_rows = [], [], []
    lam = np.logspace(math.log10(cfg["scaling.lambda_lo"]), math.log10(cfg["scaling.lambda_hi"]),
                      cfg["scaling.lambda_n"])
    for alpha, tol in zip(cfg["scaling.alphas"], cfg["scaling.slope_tol"]):
        lm = _levy(cfg, alpha=alpha, k=cfg["scaling.k"], eps=cfg["scaling.eps"])
        cs = _coefficients(cfg, alpha=alpha, taper=None)
        _check_dim(cfg, cs)
        fit = gamma_inverse_moment_scaling(cs, lm, x, cfg["scaling.t_list"], p, cfg["scaling.n_paths"], cfg.seed,
                                           threads=cfg["threads"])
        target = -p / lm.exponent_a
        fit_rows.append([alpha, fit.slope, target, tol])
        point_rows += [[alpha, t, e, s, r] for t, e, s, r in zip(fit.t, fit.estimates, fit.se, fit.rejected)]
        res.check(f"gamma_slope[alpha={alpha!r}]", abs(fit.slope - target), tol, abs(fit.slope - target) <= tol, 5,
                  f"fitted slope {fit.slope:.4f}, target {target:.4f}")
        a_fit, r1_fit = assumption_a_limit(lm, lam)
        a_rows.append([alpha, a_fit, r1_fit, alpha / 2.0])
        err = abs(a_fit - alpha / 2.0)
        res.check(f"assumption_a[alpha={alpha!r}]", err, cfg["scaling.a_tol"], err <= cfg["scaling.a_tol"], 6)
        res.check(f"assumption_r1[alpha={alpha!r}]", r1_fit, 0.0, r1_fit < 0.0, 6)
    res.table("gamma_scaling_fit", ["alpha", "slope", "target", "tolerance"], fit_rows)
    res.table("gamma_scaling", ["alpha", "t", "inverse_moment", "se", "rejected"], point_rows)
    res.table("assumption_a", ["alpha", "a_fit", "r1_fit", "a_expected"], a_rows)


def exp_pde_residual(cfg: RunConfig, res: Result) -> None:
    cs = _coefficients(cfg)
    _check_dim(cfg, cs)
    _need_scalar(cfg, cs, "the PDE experiment")
    lm = _levy(cfg)
    x = _x(cfg) if cfg["pde.x"] is None else np.asarray(cfg["pde.x"], dtype=float)
    rows, semi_rows, payload = [], [], {}
    for name in cfg["pde.g"]:
        q = PdeQuery(cs, lm, cfg["pde.t"], x, _theta(cfg), terminal_function(name), n_paths=cfg["sim.n_paths"],
                     n_particles=cfg["sim.n_particles"], h=cfg["sim.h"], seed=cfg.seed,
                     bank_size=cfg["tangent.bank_size"], threads=cfg["threads"])
        value = evaluate_U(q)
        gx = grad_x_U(q)
        gmu = grad_mu_U(q, _v_points(cfg, "weights") if cfg["pde.x"] is None else x[None, :])
        rep = pde_residual(q, dt=cfg["pde.dt"], replicas=cfg["pde.replicas"])
        payload[name] = {
            "value": value.value, "se": value.se,
            "grad_x": np.atleast_1d(gx.value).tolist(), "grad_x_se": np.atleast_1d(gx.se).tolist(),
            "grad_mu": {";".join(repr(c) for c in v): [np.atleast_1d(e.value).tolist(), np.atleast_1d(e.se).tolist()]
                        for v, e in gmu.items()},
            "residual": rep.residual, "residual_se": rep.se,
            "tolerances": {"residual": rep.tolerance, "dt_squared": rep.dt**2,
                           "quadrature_interval": rep.quadrature_interval},
        }
        rows.append([name, rep.residual, rep.se, rep.tolerance, rep.passed])
        res.check(f"pde_residual[g={name}]", abs(rep.residual), rep.tolerance, rep.passed, 10)
        semi = check_semigroup(q, cfg["pde.shift"])
        semi_rows.append([name, semi.direct.value, semi.direct.se, semi.restarted.value, semi.restarted.se, semi.gap,
                          semi.combined_se])
        res.check(f"semigroup[g={name}]", semi.gap, 3.0 * semi.combined_se, semi.gap <= 3.0 * semi.combined_se, 10)
    res.table("pde_residual", ["g", "residual", "se", "tolerance", "passed"], rows)
    res.json["pde"] = payload
    res.table("semigroup", ["g", "direct", "direct_se", "restarted", "restarted_se", "gap", "combined_se"], semi_rows)


def exp_chain_rule(cfg: RunConfig, res: Result) -> None:
    cs = _coefficients(cfg)
    _check_dim(cfg, cs)
    _need_scalar(cfg, cs, "the chain-rule experiment")
    lm = _levy(cfg)
    rows = []
    for name in cfg["pde.chain_F"]:
        rep = verify_chain_rule(FUNCTIONALS[name](), cs, lm, _theta(cfg), cfg["sim.T"], cfg["sim.n_particles"],
                                cfg["sim.h"], cfg.seed, mode=cfg["pde.chain_mode"])
        rows.append([name, rep.mode, rep.lhs, rep.rhs, rep.drift_term, rep.jump_term, rep.se, rep.gap])
        res.check(f"chain_rule[F={name}]", rep.gap, 3.0 * rep.se, rep.gap <= 3.0 * rep.se, 10)
    res.table("chain_rule", ["F", "mode", "lhs", "rhs", "drift_term", "jump_term", "se", "gap"], rows)


def exp_flow_property(cfg: RunConfig, res: Result) -> None:
    cs = _coefficients(cfg)
    _check_dim(cfg, cs)
    lm = _levy(cfg)
    x, theta = _x(cfg), _theta(cfg)
    s, t, r = cfg["flow.s"], cfg["flow.t"], cfg["flow.r"]
    rows = []
    for h in cfg["flow.h_list"]:
        means = []
        for i in range(cfg["flow.seeds"]):
            rep = check_flow_property(cs, lm, x, theta, s, t, r, h, cfg.seed + i,
                                      n_particles=cfg["flow.n_particles"], n_paths=cfg["flow.n_paths"])
            means.append(rep.mean_discrepancy)
        means = np.array(means)
        rows.append([h, float(np.sqrt(np.mean(means**2))), float(means.mean()), rep.t_restart])
    res.table("flow_property", ["h", "rms_discrepancy", "mean_discrepancy", "t_restart"], rows)
    h_arr = np.array([row[0] for row in rows])
    rms = np.array([row[1] for row in rows])
    if np.all(rms > 0):
        slope = float(np.polyfit(np.log(h_arr), np.log(rms), 1)[0])
    else:
        slope = float("nan")
    res.metrics["flow_slope"] = slope
    tol = cfg["flow.slope_tol"]
    ok = math.isfinite(slope) and abs(slope - 1.0) <= tol
    res.check("flow_slope", abs(slope - 1.0) if math.isfinite(slope) else float("inf"), tol, ok, 8)

    free = builtin_linear_meanfield(cfg["model.beta"] if cfg["model.family"] != "lm1" else 0.5, 0.0,
                                    1.0, 0.0, 0.0, alpha=cfg["levy.alpha"], taper_start=_taper(cfg),
                                    R0=cfg["levy.R0"])
    rep = check_flow_property(free, lm, x[:1], theta if cs.dim == 1 else x[:1], s, t, r, cfg["flow.h_list"][0],
                              cfg.seed, n_particles=cfg["flow.n_particles"], n_paths=cfg["flow.n_paths"])
    res.metrics["measure_free_discrepancy"] = rep.max_discrepancy
    res.check("flow_measure_free", rep.max_discrepancy, 0.0, rep.max_discrepancy == 0.0, 8)


def exp_picard(cfg: RunConfig, res: Result) -> None:
    cs = _coefficients(cfg)
    _check_dim(cfg, cs)
    _need_scalar(cfg, cs, "the Picard experiment")
    lm = _levy(cfg)
    grid = uniform_grid(cfg["sim.T"], cfg["sim.h"])
    n, seed, theta = cfg["sim.n_particles"], cfg.seed, _theta(cfg)
    pic = picard_law_iteration(cs, lm, theta, n, grid, cfg["picard.n_iter"], seed)
    direct, _ = simulate_particle_system(cs, lm, theta, n, grid, seed, record="none")
    other, _ = simulate_particle_system(cs, lm, theta, n, grid, seed + 1, record="none")
    final_gap, _ = sup_w2_gap(pic.flows[-1], direct)
    floor, _ = sup_w2_gap(direct, other)
    res.table("picard", ["stage", "sup_w2_gap"], [[i + 1, g] for i, g in enumerate(pic.gaps)])
    res.table("picard_final", ["stage", "gap_to_direct", "noise_floor"], [[len(pic.gaps), final_gap, floor]])
    res.metrics["contraction_ratio"] = pic.ratio
    later = pic.gaps[1:]
    worst = max((b - a for a, b in zip(later, later[1:])), default=0.0)
    res.check("picard_decreasing", worst, 0.0, all(b < a for a, b in zip(later, later[1:])), 9,
              "largest increase of consecutive gaps after stage 2")
    lim = cfg["picard.floor_factor"] * floor
    res.check("picard_vs_direct", final_gap, lim, final_gap <= lim, 9)


def exp_moments(cfg: RunConfig, res: Result) -> None:
    cs, lm, grid, law = _setup(cfg)
    _law_table(res, law)
    x = _x(cfg)
    x0 = np.broadcast_to(x, (cfg["sim.n_paths"], x.shape[0]))
    digests = []
    batch = None
    for threads in cfg["moments.thread_counts"]:
        b = run_paths(cs, lm, x0, law, grid, cfg.seed, tag="moments", record="all", threads=threads,
                      block_size=max(1, cfg["sim.n_paths"] // 8))
        digests.append(hashlib.sha256(np.ascontiguousarray(b.out.X_nodes).tobytes()).hexdigest())
        if batch is None:
            batch = b
    rep = moment_report(batch, p=cfg["moments.p"])
    res.table("moments", ["t", "sup_norm"], [[t, v] for t, v in zip(rep.times, rep.sup_norm)])
    res.table("increments", ["h", "increment", "increment_power"],
              [[a, b, c] for a, b, c in zip(rep.increment_h, rep.increment, rep.increment_power)])
    res.metrics["root_slope"] = rep.root_slope
    res.metrics["power_slope"] = rep.power_slope
    res.metrics["path_digest"] = digests[0]
    same = all(d == digests[0] for d in digests)
    res.check("thread_determinism", float(len(set(digests)) - 1), 0.0, same, 11,
              "identical path arrays for worker counts " + ", ".join(map(str, cfg["moments.thread_counts"])))
    finite = bool(np.all(np.isfinite(rep.sup_norm)))
    res.check("moments_finite", float(np.max(rep.sup_norm)), float("inf"), finite, 11)


@dataclass(frozen=True)
class Experiment:
    run: Callable
    description: str
    criteria: tuple


EXPERIMENTS: dict[str, Experiment] = {
    "ibp_x": Experiment(exp_ibp_x, "state-gradient weight against shared-noise finite differences", (1, 7)),
    "ibp_mu": Experiment(exp_ibp_mu, "Lions-derivative weight, Lions tangent and weight zero-means", (2, 7, 11)),
    "ibp_deltax": Experiment(exp_ibp_deltax, "total derivative when the initial law is the point mass at x", (3,)),
    "density_1d": Experiment(exp_density_1d, "density by the weight against a histogram", (4,)),
    "gamma_scaling": Experiment(exp_gamma_scaling, "small-time inverse moments of Gamma and the exponent a", (5, 6)),
    "pde_residual": Experiment(exp_pde_residual, "residual of the backward equation and the semigroup identity",
                               (10,)),
    "chain_rule": Experiment(exp_chain_rule, "chain rule for functionals along the particle law", (10,)),
    "flow_property": Experiment(exp_flow_property, "restart discrepancy and its order in the step", (8,)),
    "picard": Experiment(exp_picard, "Picard iteration in the law against the particle system", (9,)),
    "moments": Experiment(exp_moments, "moment tables and determinism across worker counts", (11,)),
}


def list_experiments() -> list[tuple[str, str]]:
    return [(name, exp.description) for name, exp in EXPERIMENTS.items()]


# ------------------------------------------------------------------ driver

NUMERICAL = (MVJumpError, FloatingPointError, np.linalg.LinAlgError)


def _manifest(cfg: RunConfig, threads: int) -> dict:
    return {
        "version": __version__,
        "seed": cfg.seed,
        "experiment": cfg.experiment,
        "threads": threads,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "config": _json_safe(cfg.nested()),
    }


def execute(cfg: RunConfig, out_dir: Path | None = None) -> tuple[int, Result | None]:
    """Run a resolved configuration; returns (exit code, result)."""
    out = Path(out_dir if out_dir is not None else cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(_manifest(cfg, cfg["threads"]), fh, indent=2, sort_keys=True)
    exp = EXPERIMENTS[cfg.experiment]
    res = Result()
    try:
        exp.run(cfg, res)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{cfg.experiment}: {exc}") from exc
    except NUMERICAL as exc:
        failure = NumericalFailure(f"{type(exc).__name__}: {exc}")
        with open(out / "summary.json", "w", encoding="utf-8") as fh:
            json.dump({"experiment": cfg.experiment, "pass": False, "error": str(failure),
                       "diagnostics": traceback.format_exc()}, fh, indent=2, sort_keys=True)
        print(f"numerical failure: {failure}", file=sys.stderr)
        return 3, None
    for name, (header, rows) in res.tables.items():
        _write_table(out / f"{name}.csv", header, rows)
    for name, payload in res.json.items():
        write_pde_json(out / f"{name}.json", _json_safe(payload))
    summary = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "pass": res.passed,
        "criteria": list(exp.criteria),
        "metrics": _json_safe(res.metrics),
        "assertions": [_json_safe(a.__dict__) for a in res.assertions],
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return (0 if res.passed else 1), res


def run_experiment(config, *, out: str | None = None, seed: int | None = None,
                   threads: int | None = None) -> int:
    """Load, validate and run a configuration (path or mapping); returns the exit code."""
    try:
        cfg = load_config(config, {"out": out, "seed": seed, "threads": threads})
        code, _ = execute(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mvjump", description="Run reproducible mean-field jump experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a configuration file")
    run.add_argument("config", help="YAML or JSON configuration (a previous manifest.json also works)")
    run.add_argument("--out", help="output directory (overrides the configuration)")
    run.add_argument("--seed", type=int, help="root seed (overrides the configuration)")
    run.add_argument("--threads", type=int, help="worker count; results do not depend on it")
    sub.add_parser("list", help="list the available experiments")
    args = parser.parse_args(argv)
    if args.command == "list":
        for name, desc in list_experiments():
            crit = ", ".join(str(c) for c in EXPERIMENTS[name].criteria)
            print(f"{name:15s} {desc} [criteria {crit}]")
        return 0
    code = run_experiment(args.config, out=args.out, seed=args.seed, threads=args.threads)
    if code in (0, 1):
        print("passed" if code == 0 else "assertion failed")
    return code


if __name__ == "__main__":
    sys.exit(main())
