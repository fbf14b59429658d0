"""Paired twin experiment comparing preconditioners on identical 4D-Var systems.

Each cycle advances a synthetic truth, observes its free-surface height with
noise, linearizes at the current estimate and solves the same Gauss-Newton
system once per variant. The estimate is then updated with the reference
(unpreconditioned when present) solution, so every variant sees the same
sequence of systems.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import dataset, krylov, precond
from .config import Environment
from .errors import ConfigError
from .precond import MuPolicy
from .swmodel import pack, unpack

log = logging.getLogger(__name__)

STREAM_TRUTH = 10
STREAM_START = 11
STREAM_ADVANCE = 12
STREAM_NOISE = 13

KINDS = ("none", "identity", "b_half", "exact_eigs", "learned")


@dataclass(frozen=True)
class Variant:
    kind: str
    r: int = 0
    mu: MuPolicy = MuPolicy()
    checkpoint: str | None = None
    corrupt_tail: float | None = None
    label: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown variant kind {self.kind!r}")
        if self.kind in ("exact_eigs", "learned") and self.r < 1:
            raise ConfigError(f"variant {self.kind} needs r >= 1")
        if self.kind == "learned" and not self.checkpoint:
            raise ConfigError("learned variant needs a checkpoint")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind in ("none", "identity", "b_half"):
            return self.kind
        return f"{self.kind}(r={self.r},mu={self.mu})"

    @classmethod
    def parse(cls, entry, resolve=lambda p: p) -> "Variant":
        if isinstance(entry, str):
            return cls(entry)
        if not isinstance(entry, dict) or "kind" not in entry:
            raise ConfigError(f"cannot parse variant {entry!r}")
        extra = set(entry) - {"kind", "r", "mu", "checkpoint", "corrupt_tail", "label"}
        if extra:
            raise ConfigError(f"unknown variant fields {sorted(extra)}")
        try:
            mu = MuPolicy.parse(entry.get("mu", "min"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        ckpt = entry.get("checkpoint")
        return cls(entry["kind"], int(entry.get("r", 0)), mu,
                   None if ckpt is None else resolve(ckpt), entry.get("corrupt_tail"),
                   entry.get("label"))


@dataclass
class ExperimentConfig:
    variants: list
    cycles: int = 20
    n_repeats: int = 1
    tol: float = 1e-7
    maxit: int = 2000
    noise_fraction: float = 0.01
    perturbation_fraction: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.cycles < 1 or self.n_repeats < 1 or not self.variants:
            raise ConfigError("need cycles >= 1, n_repeats >= 1 and at least one variant")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate variant names in {names}")

    @classmethod
    def from_scenario(cls, scenario, seed=None) -> "ExperimentConfig":
        ex = scenario.section("experiment")
        variants = [Variant.parse(v, scenario.resolve_path) for v in ex["variants"]]
        return cls(variants, int(ex["cycles"]), int(ex["n_repeats"]), float(ex["tol"]),
                   int(ex["maxit"]), float(ex["noise_fraction"]),
                   float(ex["perturbation_fraction"]),
                   scenario.seed if seed is None else int(seed))


@dataclass
class SolveRecord:
    repeat: int
    cycle: int
    variant: str
    report: krylov.SolveReport
    mu: float | None = None


@dataclass
class ExperimentReport:
    variants: list
    records: list = field(default_factory=list)
    reference: str = "none"

    def iterations(self, variant) -> np.ndarray:
        return np.array([r.report.iterations for r in self.records if r.variant == variant])

    def summary(self) -> dict:
        out = {"reference": self.reference, "n_solves": {}, "variants": {}}
        ref = np.median(self.iterations(self.reference)) if self.reference in self.variants else None
        for v in self.variants:
            its = self.iterations(v)
            recs = [r for r in self.records if r.variant == v]
            entry = {
                "median_iterations": float(np.median(its)),
                "mean_iterations": float(np.mean(its)),
                "not_converged": int(sum(not r.report.converged for r in recs)),
            }
            if ref is not None:
                entry["reduction_percent"] = float(100.0 * (1.0 - np.median(its) / ref))
                ref_its = self.iterations(self.reference)
                entry["median_paired_ratio"] = float(np.median(its / ref_its))
            out["variants"][v] = entry
            out["n_solves"][v] = int(its.size)
        return out


class _Preconditioners:
    """Builds the split factor of each variant for one system."""

    def __init__(self, env: Environment, variants):
        self.env = env
        self.surrogates = {}
        for v in variants:
            if v.kind == "learned" and v.checkpoint not in self.surrogates:
                from .surrogate import Surrogate

                if not os.path.exists(v.checkpoint):
                    raise ConfigError(f"checkpoint {v.checkpoint} does not exist")
                sur = Surrogate.load(v.checkpoint)
                if v.r > sur.cfg.r:
                    raise ConfigError(f"variant asks for r={v.r} but the surrogate has {sur.cfg.r}")
                self.surrogates[v.checkpoint] = sur

    def build(self, v: Variant, system, exact_cache):
        """Returns ``(L or None, mu)``."""
        if v.kind == "none":
            return None, None
        if v.kind == "identity":
            return krylov.identity_operator(system.n), None
        if v.kind == "b_half":
            return precond.b_half_preconditioner(self.env.cov), None
        if v.kind == "exact_eigs":
            if exact_cache.get("pairs") is None or exact_cache["pairs"].r < v.r:
                exact_cache["pairs"] = precond.exact_leading_eigs(system.operator, v.r)
            pairs = exact_cache["pairs"].truncate(v.r)
            lam = pairs.lam.copy()
            if v.corrupt_tail is not None:
                lam[-1] *= v.corrupt_tail
                pairs = precond.EigenpairSet(pairs.U, lam)
            mu = v.mu.resolve(pairs.lam)
            return precond.split_L(pairs, mu), mu
        from .surrogate import build_preconditioner

        L, info = build_preconditioner(self.surrogates[v.checkpoint], system.x, v.mu, v.r,
                                       corrupt_tail=v.corrupt_tail)
        return L, info["mu"]


def _perturb(env, x, seed, stream, index, fraction):
    return x + dataset.perturbation(env.grid, env.amplitudes(fraction), seed, stream, index)


def run_experiment(env: Environment, cfg: ExperimentConfig, progress=None) -> ExperimentReport:
    names = [v.name for v in cfg.variants]
    reference = "none" if "none" in names else names[0]
    report = ExperimentReport(names, reference=reference)
    builders = _Preconditioners(env, cfg.variants)
    model = env.model
    T = env.params.steps_per_window
    noise_sd = cfg.noise_fraction * env.clim_std[0]
    for repeat in range(cfg.n_repeats):
        truth = _perturb(env, env.base, cfg.seed, STREAM_TRUTH, repeat, cfg.perturbation_fraction)
        x = _perturb(env, env.base, cfg.seed, STREAM_START, repeat, cfg.perturbation_fraction)
        for cycle in range(cfg.cycles):
            idx = repeat * cfg.cycles + cycle
            steps = dataset.integer(cfg.seed, STREAM_ADVANCE, idx, 1, T)
            truth = pack(model.propagate(unpack(truth, env.grid), steps))
            eps = noise_sd * dataset.gaussian(cfg.seed, STREAM_NOISE, idx, (env.obs.p,))
            y = env.obs.apply(truth) + eps
            system = env.problem.with_observations(y).build_gn_system(x)
            digest = system.probe_hash()
            exact_cache = {}
            solutions = {}
            for v in cfg.variants:
                L, mu = builders.build(v, system, exact_cache)
                if L is None:
                    dx, solve = krylov.cg(system.operator, system.b, tol=cfg.tol, maxit=cfg.maxit)
                else:
                    dx, solve = krylov.pcg_split(system.operator, L, system.b, tol=cfg.tol,
                                                maxit=cfg.maxit)
                if solve.termination == krylov.BREAKDOWN:
                    log.warning("cycle %d, %s: CG breakdown %s", idx, v.name, solve.diagnostics)
                report.records.append(SolveRecord(repeat, idx, v.name, solve, mu))
                solutions[v.name] = dx
                if progress:
                    progress(idx, v.name, solve)
            if system.probe_hash() != digest:
                raise RuntimeError("Gauss-Newton operator changed while variants were solved")
            x = x + solutions[reference]
    return report


def emit_report(report: ExperimentReport, out_dir) -> dict:
    """Write iterations.csv, residuals.csv and summary.json; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, k) for k in
             ("iterations.csv", "residuals.csv", "summary.json")}
    with open(paths["iterations.csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "variant", "iterations", "final_residual", "terminated_by"])
        for r in report.records:
            w.writerow([r.cycle, r.variant, r.report.iterations,
                        repr(float(r.report.final_residual)), r.report.termination])
    with open(paths["residuals.csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "variant", "iteration", "residual_norm"])
        for r in report.records:
            for j, res in enumerate(r.report.residuals):
                w.writerow([r.cycle, r.variant, j, repr(float(res))])
    with open(paths["summary.json"], "w") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
