"""Conjugate Gradient solvers with residual instrumentation, and Lanczos."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import LinearOperator, aslinearoperator

TOLERANCE = "tolerance"
MAX_ITER = "max-iter"
BREAKDOWN = "breakdown"


@dataclass
class SolveReport:
    """Convergence record of one solve.

    ``residuals[j]`` is ``||b - A x_j||_2`` of the original, unpreconditioned
    system, so preconditioned and plain solves are directly comparable.
    """

    iterations: int
    residuals: list
    termination: str
    wall_time: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def final_residual(self) -> float:
        return self.residuals[-1]

    @property
    def converged(self) -> bool:
        return self.termination == TOLERANCE


@dataclass(frozen=True)
class ConditionEstimate:
    lambda_max: float
    lambda_min: float
    iterations: int = 0
    partial: bool = False

    @property
    def kappa(self) -> float:
        return self.lambda_max / self.lambda_min


def as_operator(A, n=None) -> LinearOperator:
    """Wrap a matrix, LinearOperator, or symmetric matvec callable."""
    if isinstance(A, LinearOperator):
        return A
    if callable(A) and not hasattr(A, "shape"):
        if n is None:
            raise ValueError("dimension n is required for a bare callable")
        return LinearOperator((n, n), matvec=A, rmatvec=A, matmat=A, dtype=np.float64)
    return aslinearoperator(A)


def identity_operator(n) -> LinearOperator:
    return LinearOperator((n, n), matvec=lambda v: v, rmatvec=lambda v: v,
                          matmat=lambda v: v, dtype=np.float64)


def cg(A, b, x0=None, tol=1e-7, maxit=2000):
    """Plain Conjugate Gradient.

    Stops when ``||r_j||_2 < tol`` or after ``maxit`` iterations. A
    non-positive curvature ``p^T A p <= 0`` ends the solve with termination
    ``"breakdown"``.

    Returns:
        (x, SolveReport)
    """
    b = np.asarray(b, dtype=np.float64)
    A = as_operator(A, b.shape[0])
    if tol <= 0:
        raise ValueError("tol must be positive")
    t0 = time.perf_counter()
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.array(x0, dtype=np.float64)
        r = b - A.matvec(x)
    p = r.copy()
    rr = r @ r
    history = [math.sqrt(rr)]
    diagnostics = {}
    j = 0
    termination = MAX_ITER
    while True:
        if history[-1] < tol:
            termination = TOLERANCE
            break
        if j >= maxit:
            break
        ap = A.matvec(p)
        curv = p @ ap
        if not curv > 0:
            termination = BREAKDOWN
            diagnostics = {"iteration": j, "curvature": float(curv)}
            break
        alpha = rr / curv
        x += alpha * p
        r -= alpha * ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        j += 1
        history.append(math.sqrt(rr))
    report = SolveReport(j, history, termination, time.perf_counter() - t0, diagnostics)
    return x, report


def pcg_split(A, L, b, x0=None, tol=1e-7, maxit=2000):
    """CG on ``L^T A L`` with right-hand side ``L^T r0``; returns ``x0 + L x~``.

    The original residual ``b - A x_j`` is carried alongside the
    preconditioned one (``A L p`` is an intermediate of each product, so this
    is free) and is what the stopping test and history use.
    """
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    A = as_operator(A, n)
    L = identity_operator(n) if L is None else as_operator(L, n)
    if tol <= 0:
        raise ValueError("tol must be positive")
    t0 = time.perf_counter()
    if x0 is None:
        x_start = None
        r = b.copy()
    else:
        x_start = np.array(x0, dtype=np.float64)
        r = b - A.matvec(x_start)
    rt = np.array(L.rmatvec(r), dtype=np.float64)
    xt = np.zeros_like(rt)
    p = rt.copy()
    rr = rt @ rt
    history = [math.sqrt(r @ r)]
    diagnostics = {}
    j = 0
    termination = MAX_ITER
    while True:
        if history[-1] < tol:
            termination = TOLERANCE
            break
        if j >= maxit:
            break
        w = A.matvec(L.matvec(p))
        ap = L.rmatvec(w)
        curv = p @ ap
        if not curv > 0:
            termination = BREAKDOWN
            diagnostics = {"iteration": j, "curvature": float(curv)}
            break
        alpha = rr / curv
        xt += alpha * p
        rt -= alpha * ap
        r -= alpha * w
        rr_new = rt @ rt
        p = rt + (rr_new / rr) * p
        rr = rr_new
        j += 1
        history.append(math.sqrt(r @ r))
    x = L.matvec(xt)
    if x_start is not None:
        x = x_start + x
    report = SolveReport(j, history, termination, time.perf_counter() - t0, diagnostics)
    return x, report


def cg_bound(kappa, k):
    """Classical CG error-reduction bound ``2 ((sqrt(k)-1)/(sqrt(k)+1))**k``."""
    if kappa < 1:
        raise ValueError("condition number must be >= 1")
    if k < 0:
        raise ValueError("iteration count must be >= 0")
    s = math.sqrt(kappa)
    return 2.0 * ((s - 1.0) / (s + 1.0)) ** k


def lanczos(A, k, n=None, start=None, seed=0):
    """Lanczos tridiagonalization with full (two-pass) reorthogonalization.

    Returns ``(Q, alpha, beta, breakdown)`` where ``Q`` has the ``m <= k``
    Lanczos vectors as columns. ``breakdown`` is True when an invariant
    subspace was hit before ``k`` steps.
    """
    A = as_operator(A, n)
    n = A.shape[0]
    k = min(k, n)
    if start is None:
        start = np.random.default_rng(seed).standard_normal(n)
    q = np.asarray(start, dtype=np.float64)
    q = q / np.linalg.norm(q)
    Q = np.zeros((n, k))
    alpha = np.zeros(k)
    beta = np.zeros(k)
    breakdown = False
    m = k
    for j in range(k):
        Q[:, j] = q
        w = A.matvec(q)
        alpha[j] = q @ w
        for _ in range(2):
            w -= Q[:, :j + 1] @ (Q[:, :j + 1].T @ w)
        beta[j] = np.linalg.norm(w)
        if j + 1 < k:
            if beta[j] <= 1e-12 * max(abs(alpha[j]), 1.0):
                breakdown = True
                m = j + 1
                break
            q = w / beta[j]
    return Q[:, :m], alpha[:m], beta[:m], breakdown


def ritz(alpha, beta):
    """Eigen-decomposition of the Lanczos tridiagonal, descending."""
    m = len(alpha)
    if m == 1:
        return alpha.copy(), np.ones((1, 1))
    theta, S = scipy.linalg.eigh_tridiagonal(alpha, beta[:m - 1])
    return theta[::-1], S[:, ::-1]


def lanczos_extreme_eigs(A, iters, n=None, seed=0) -> ConditionEstimate:
    """Ritz estimates of the largest and smallest eigenvalues of SPD ``A``."""
    Q, alpha, beta, breakdown = lanczos(A, iters, n=n, seed=seed)
    theta, _ = ritz(alpha, beta)
    return ConditionEstimate(float(theta[0]), float(theta[-1]), len(alpha), breakdown)


def write_reports_csv(path, reports):
    """Write ``solve_id, iteration, residual_norm`` rows for ``{id: SolveReport}``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["solve_id", "iteration", "residual_norm"])
        for solve_id, rep in reports.items():
            for j, res in enumerate(rep.residuals):
                writer.writerow([solve_id, j, repr(float(res))])
