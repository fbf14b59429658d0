"""Scenario configuration (one JSON document) and the environment it builds.

Top-level keys, all optional (defaults in ``DEFAULTS``):

``grid``         nx, ny, Lx, Ly
``model``        any ModelParams field
``spinup_days``  free run from rest before anything else
``climatology``  ``days`` and sampling interval ``every`` (steps) of the free run
                 whose time mean is ``x^b`` and whose per-variable standard
                 deviations scale perturbations, noise and network inputs
``covariance``   sigma_eta, sigma_u, sigma_v (background), sigma_obs
``dataset``      k, lead_range (fractions of the window), perturbation_fraction,
                 n_states, shard_max_bytes
``surrogate``    r, arch, M (null: twice the Lanczos estimate of lambda_1 at x^b),
                 ortho, penalty
``training``     lr, steps, batch_size, objective, n_heldout, heldout_seed_offset
``experiment``   cycles, n_repeats, tol, maxit, noise_fraction,
                 perturbation_fraction, variants
``seed``         default seed for every stochastic step
"""

from __future__ import annotations

import copy
import dataclasses
import functools
import json
import math
import os
from dataclasses import dataclass

from .assim import CovarianceModel, FourDVar, ObsOperator, ShallowWaterForward, time_average
from .errors import ConfigError
from .swmodel import GridSpec, ModelParams, ShallowWater, StateVector, channel_scales, pack

DEFAULTS = {
    "grid": {"nx": 16, "ny": 16, "Lx": 1.8e6, "Ly": 1.8e6},
    "model": {},
    "spinup_days": 30.0,
    "climatology": {"days": 30.0, "every": 5},
    "covariance": {"sigma_eta": 1.0, "sigma_u": 0.3, "sigma_v": 0.3, "sigma_obs": 0.1},
    "dataset": {"k": 8, "lead_range": [0.5, 1.5], "perturbation_fraction": 0.01,
                "n_states": 64, "shard_max_bytes": None},
    "surrogate": {"r": 32, "arch": {"kind": "conv", "channels": [8, 16], "hidden": 64},
                  "M": None, "ortho": "mgs", "penalty": 1.0},
    "training": {"lr": 1e-3, "steps": 1000, "batch_size": 1, "objective": "absolute",
                 "n_heldout": 8, "heldout_seed_offset": 1000},
    "experiment": {"cycles": 20, "n_repeats": 1, "tol": 1e-7, "maxit": 2000,
                   "noise_fraction": 0.01, "perturbation_fraction": 0.01,
                   "variants": ["none", "b_half", {"kind": "exact_eigs", "r": 32, "mu": "min"}]},
    "seed": 0,
}


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown configuration key {path + key!r}")
        if isinstance(base[key], dict) and key not in ("model", "arch"):
            if not isinstance(val, dict):
                raise ConfigError(f"{path + key!r} must be an object")
            out[key] = _merge(base[key], val, path + key + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


@dataclass(frozen=True)
class Scenario:
    """Validated configuration; ``raw`` keeps the merged JSON tree."""

    raw: dict
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d=None, base_dir=".") -> "Scenario":
        if d is not None and not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        sc = cls(_merge(DEFAULTS, d or {}), base_dir)
        sc.validate()
        return sc

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        return cls.from_dict(d, os.path.dirname(os.path.abspath(path)))

    def with_overrides(self, **sections) -> "Scenario":
        d = copy.deepcopy(self.raw)
        for key, val in sections.items():
            if isinstance(val, dict) and isinstance(d.get(key), dict):
                d[key].update(val)
            else:
                d[key] = val
        return Scenario.from_dict(d, self.base_dir)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    def key(self) -> str:
        """Canonical form of the physical sections (with defaults filled in)."""
        d = {k: self.raw[k] for k in ("spinup_days", "climatology", "covariance")}
        d["grid"] = {k: getattr(self.grid, k) for k in ("nx", "ny", "Lx", "Ly")}
        d["model"] = dataclasses.asdict(self.params)
        return json.dumps(d, sort_keys=True)

    def resolve_path(self, p) -> str:
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    # -- typed views -----------------------------------------------------------

    @property
    def grid(self) -> GridSpec:
        return GridSpec(**self.raw["grid"])

    @property
    def params(self) -> ModelParams:
        return ModelParams(**self.raw["model"])

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def section(self, name) -> dict:
        return self.raw[name]

    def steps_for_days(self, days) -> int:
        return int(round(days * 86400.0 / self.params.dt))

    def validate(self):
        try:
            grid, params = self.grid, self.params
            params.check_cfl(grid)
        except TypeError as exc:
            raise ConfigError(f"bad grid/model entry: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        r = self.raw
        if not (r["spinup_days"] >= 0 and r["climatology"]["days"] > 0
                and int(r["climatology"]["every"]) >= 1):
            raise ConfigError("spin-up and climatology lengths must be positive")
        for k, v in r["covariance"].items():
            if not (isinstance(v, (int, float)) and v > 0):
                raise ConfigError(f"covariance.{k} must be a positive number")
        ds = r["dataset"]
        lo, hi = ds["lead_range"]
        if not (0 < lo <= hi) or int(ds["k"]) < 1 or ds["perturbation_fraction"] < 0:
            raise ConfigError("invalid dataset section")
        sur = r["surrogate"]
        if not 1 <= int(sur["r"]) <= grid.n:
            raise ConfigError("surrogate.r must lie in [1, n]")
        ex = r["experiment"]
        if int(ex["cycles"]) < 1 or int(ex["n_repeats"]) < 1 or not ex["variants"]:
            raise ConfigError("experiment needs cycles >= 1, n_repeats >= 1 and some variants")
        if not (ex["tol"] > 0 and int(ex["maxit"]) >= 1):
            raise ConfigError("experiment tol and maxit must be positive")
        if not isinstance(r["seed"], int) or r["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")


class Environment:
    """Model, climatology, background and the 4D-Var problem for a scenario."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.grid = scenario.grid
        self.params = scenario.params
        self.model = ShallowWater(self.params, self.grid)
        rest = StateVector.zeros(self.grid)
        spun = self.model.propagate(rest, scenario.steps_for_days(scenario.raw["spinup_days"]))
        clim = scenario.raw["climatology"]
        xb, final, samples = time_average(self.model, spun, scenario.steps_for_days(clim["days"]),
                                          int(clim["every"]))
        self.base = pack(final)
        self.xb = xb
        self.clim_std = channel_scales(samples)
        cv = scenario.raw["covariance"]
        self.cov = CovarianceModel.diagonal(self.grid, xb, cv["sigma_eta"], cv["sigma_u"],
                                            cv["sigma_v"], cv["sigma_obs"])
        self.forward = ShallowWaterForward(self.model)
        self.obs = ObsOperator.eta(self.grid)
        self.problem = FourDVar(self.forward, self.obs, self.cov)

    @property
    def n(self) -> int:
        return self.grid.n

    def amplitudes(self, fraction) -> tuple:
        return tuple(fraction * s for s in self.clim_std)

    def sampler_config(self, seed=None, start=None):
        from .dataset import TrajectorySamplerConfig

        ds = self.scenario.raw["dataset"]
        T = self.params.steps_per_window
        lo, hi = ds["lead_range"]
        return TrajectorySamplerConfig(
            base=self.base if start is None else start,
            lead_min=max(1, int(math.floor(lo * T))),
            lead_max=max(1, int(math.ceil(hi * T))),
            amplitudes=self.amplitudes(ds["perturbation_fraction"]),
            seed=self.scenario.seed if seed is None else int(seed),
        )

    def sigmoid_bound(self) -> float:
        """Twice the Lanczos estimate of the largest eigenvalue of ``A`` at ``x^b``."""
        from .krylov import lanczos_extreme_eigs

        M = self.scenario.raw["surrogate"]["M"]
        if M is not None:
            return float(M)
        est = lanczos_extreme_eigs(self.problem.gn_operator(self.xb), 30, seed=self.scenario.seed)
        return 2.0 * est.lambda_max


@functools.lru_cache(maxsize=4)
def _environment(key):
    return Environment(Scenario.from_dict(json.loads(key)))


def environment(scenario: Scenario) -> Environment:
    """Environments depend only on the physical part of a scenario; share them."""
    env = _environment(scenario.key())
    if env.scenario is not scenario:
        shared = copy.copy(env)
        shared.scenario = scenario
        return shared
    return env


def default_scenario() -> Scenario:
    return Scenario.from_dict({})
