"""Incremental 4D-Var: cost, gradient, Gauss-Newton system and outer loop.

The control variable is the packed initial state ``x``. A single observation
of the free-surface height is taken at the end of the window, so the
generalized forward model is ``G = H o M`` with ``M`` the window propagator.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator

from . import krylov
from .swmodel import GridSpec, ShallowWater, pack, unpack

log = logging.getLogger(__name__)


def _col(d, like):
    """Reshape a length-n diagonal so it broadcasts against ``(n,)`` or ``(n, k)``."""
    return d if like.ndim == 1 else d[:, None]


class ObsOperator:
    """Linear selection of state components; ``H`` and its transpose."""

    def __init__(self, n: int, indices):
        self.n = int(n)
        self.indices = np.asarray(indices, dtype=np.intp)
        if self.indices.ndim != 1 or self.indices.size == 0:
            raise ValueError("observation indices must be a non-empty 1-D array")
        if self.indices.min() < 0 or self.indices.max() >= self.n:
            raise ValueError("observation index out of range")

    @classmethod
    def eta(cls, grid: GridSpec) -> "ObsOperator":
        """Observe the free-surface height only (the leading block of the packed state)."""
        return cls(grid.n, np.arange(grid.n_eta))

    @property
    def p(self) -> int:
        return self.indices.size

    def apply(self, x):
        return x[self.indices]

    def apply_T(self, y):
        out = np.zeros((self.n,) + y.shape[1:])
        out[self.indices] = y
        return out


@dataclass(frozen=True)
class CovarianceModel:
    """Diagonal background and observation error covariances plus ``x^b``."""

    b_var: np.ndarray
    r_var: np.ndarray
    xb: np.ndarray

    def __post_init__(self):
        for name in ("b_var", "r_var", "xb"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.b_var.shape != self.xb.shape:
            raise ValueError("b_var and xb must have the same length")
        if not (np.all(self.b_var > 0) and np.all(self.r_var > 0)):
            raise ValueError("covariance variances must be strictly positive")

    @classmethod
    def diagonal(cls, grid: GridSpec, xb, sigma_eta, sigma_u, sigma_v, sigma_obs):
        """Per-variable background variances and iid observation errors of ``H = eta``."""
        n_u = (grid.nx - 1) * grid.ny
        n_v = grid.nx * (grid.ny - 1)
        b_sd = np.concatenate([np.full(grid.n_eta, float(sigma_eta)),
                               np.full(n_u, float(sigma_u)),
                               np.full(n_v, float(sigma_v))])
        return cls(b_sd**2, np.full(grid.n_eta, float(sigma_obs) ** 2), xb)

    @property
    def n(self) -> int:
        return self.b_var.size

    def b_inverse_apply(self, v):
        return v / _col(self.b_var, v)

    def b_sqrt_apply(self, v):
        return v * _col(np.sqrt(self.b_var), v)

    def b_sqrt_inverse_apply(self, v):
        return v / _col(np.sqrt(self.b_var), v)

    def r_inverse_apply(self, y):
        return y / _col(self.r_var, y)

    def r_sqrt_inverse_apply(self, y):
        return y / _col(np.sqrt(self.r_var), y)


# --- forward models ----------------------------------------------------------


@dataclass
class Linearization:
    """``M(x)`` together with the TLM and adjoint of ``M`` at ``x`` (packed vectors)."""

    final: np.ndarray
    tlm: object
    adjoint: object


class ShallowWaterForward:
    """Window propagator of the shallow-water model on packed vectors."""

    def __init__(self, model: ShallowWater, n_steps: int | None = None):
        self.model = model
        self.grid = model.grid
        self.n_steps = model.params.steps_per_window if n_steps is None else int(n_steps)

    @property
    def n(self) -> int:
        return self.grid.n

    def run(self, x):
        return pack(self.model.propagate(unpack(x, self.grid), self.n_steps))

    def linearize(self, x) -> Linearization:
        traj = self.model.trajectory(unpack(x, self.grid), self.n_steps)
        grid = self.grid
        return Linearization(
            pack(traj.final),
            lambda d: pack(traj.tlm(unpack(d, grid))),
            lambda a: pack(traj.adjoint(unpack(a, grid))),
        )


class LinearForward:
    """A fixed matrix as the forward model; makes the 4D-Var cost quadratic."""

    def __init__(self, M):
        self.M = np.asarray(M, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.M.shape[1]

    def run(self, x):
        return self.M @ x

    def linearize(self, x) -> Linearization:
        return Linearization(self.M @ x, lambda d: self.M @ d, lambda a: self.M.T @ a)


# --- the variational problem -------------------------------------------------


@dataclass
class GaussNewtonSystem:
    """Linear system ``A_x dx = b_x`` of one outer iteration.

    ``operator`` accepts ``(n,)`` vectors or ``(n, k)`` blocks; a block is
    pushed through the stored trajectory in a single TLM/adjoint sweep.
    """

    x: np.ndarray
    operator: LinearOperator
    b: np.ndarray
    d: np.ndarray
    linearization: Linearization = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.x.size

    def apply(self, v):
        return self.operator.matmat(v) if v.ndim == 2 else self.operator.matvec(v)

    def probe_hash(self, seed=0) -> str:
        """Digest of the operator applied to a fixed pseudo-random probe."""
        z = np.random.default_rng(seed).standard_normal(self.n)
        return hashlib.sha256(self.apply(z).astype("<f8").tobytes()).hexdigest()


class FourDVar:
    """Strong-constraint 4D-Var problem ``J(x)`` for given observations ``y``."""

    def __init__(self, forward, obs: ObsOperator, cov: CovarianceModel, y=None):
        if forward.n != cov.n or obs.n != cov.n or obs.p != cov.r_var.size:
            raise ValueError("forward model, observation operator and covariances disagree on sizes")
        self.forward = forward
        self.obs = obs
        self.cov = cov
        self.y = None if y is None else np.asarray(y, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.cov.n

    def with_observations(self, y) -> "FourDVar":
        return FourDVar(self.forward, self.obs, self.cov, y)

    def G(self, x):
        return self.obs.apply(self.forward.run(x))

    def _require_y(self):
        if self.y is None:
            raise ValueError("observations have not been set")
        return self.y

    def cost(self, x) -> float:
        y = self._require_y()
        d = self.G(x) - y
        dxb = x - self.cov.xb
        return 0.5 * float(d @ self.cov.r_inverse_apply(d)) + 0.5 * float(
            dxb @ self.cov.b_inverse_apply(dxb))

    def grad_cost(self, x):
        y = self._require_y()
        lin = self.forward.linearize(x)
        d = self.obs.apply(lin.final) - y
        return (lin.adjoint(self.obs.apply_T(self.cov.r_inverse_apply(d)))
                + self.cov.b_inverse_apply(x - self.cov.xb))

    def _operator(self, lin: Linearization) -> LinearOperator:
        obs, cov = self.obs, self.cov

        def apply(v):
            w = obs.apply_T(cov.r_inverse_apply(obs.apply(lin.tlm(v))))
            return lin.adjoint(w) + cov.b_inverse_apply(v)

        n = self.n
        return LinearOperator((n, n), matvec=apply, rmatvec=apply, matmat=apply,
                              dtype=np.float64)

    def gn_operator(self, x) -> LinearOperator:
        """``A_x`` alone; it does not depend on the observations."""
        return self._operator(self.forward.linearize(x))

    def build_gn_system(self, x) -> GaussNewtonSystem:
        y = self._require_y()
        x = np.asarray(x, dtype=np.float64)
        lin = self.forward.linearize(x)
        d = self.obs.apply(lin.final) - y
        b = (-lin.adjoint(self.obs.apply_T(self.cov.r_inverse_apply(d)))
             - self.cov.b_inverse_apply(x - self.cov.xb))
        if not np.all(np.isfinite(b)):
            raise FloatingPointError("non-finite right-hand side")
        return GaussNewtonSystem(x.copy(), self._operator(lin), b, d, lin)


@dataclass
class OuterLoopResult:
    iterates: list
    costs: list
    reports: list

    @property
    def iterations(self) -> list:
        return [r.iterations for r in self.reports]


def outer_loop(problem: FourDVar, x0, n_outer: int, n_inner: int = 2000, eps: float = 1e-7,
               prec_factory=None) -> OuterLoopResult:
    """Gauss-Newton outer loop with (split-preconditioned) CG inner solves.

    ``prec_factory`` receives the :class:`GaussNewtonSystem` of the current
    outer iteration (its ``x`` is the linearization state) and returns a split
    preconditioner ``L`` or ``None`` for plain CG.
    """
    if n_outer < 1:
        raise ValueError("n_outer must be >= 1")
    x = np.array(x0, dtype=np.float64)
    iterates, costs, reports = [x.copy()], [problem.cost(x)], []
    for i in range(n_outer):
        system = problem.build_gn_system(x)
        L = None if prec_factory is None else prec_factory(system)
        if L is None:
            dx, rep = krylov.cg(system.operator, system.b, tol=eps, maxit=n_inner)
        else:
            dx, rep = krylov.pcg_split(system.operator, L, system.b, tol=eps, maxit=n_inner)
        if rep.termination != krylov.TOLERANCE:
            log.warning("outer iteration %d: inner solve ended by %s at residual %.3e",
                        i, rep.termination, rep.final_residual)
        x = x + dx
        iterates.append(x.copy())
        costs.append(problem.cost(x))
        reports.append(rep)
        if costs[-1] > costs[-2]:
            log.warning("outer iteration %d increased the cost: %.6e -> %.6e",
                        i, costs[-2], costs[-1])
    return OuterLoopResult(iterates, costs, reports)


def time_average(model: ShallowWater, x, n_steps: int, every: int = 1):
    """Mean of the packed states visited by a free run (including the start).

    Returns ``(mean, final_state, samples)`` where ``samples`` are the states
    that entered the mean.
    """
    if every < 1:
        raise ValueError("every must be >= 1")
    samples = [x]
    for k in range(n_steps):
        x = model.step(x, k)
        if (k + 1) % every == 0:
            samples.append(x)
    mean = np.mean([pack(s) for s in samples], axis=0)
    return mean, x, samples
