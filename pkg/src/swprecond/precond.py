"""Limited-memory spectral preconditioners and exact-eigenpair baselines.

``P_alpha = beta I + U (mu Lambda^alpha - beta I) U^T`` rescales the span of
``r`` eigenvectors and leaves the orthogonal complement multiplied by
``beta``. The split factor used with CG is

    L = I + U (sqrt(mu) Lambda^{-1/2} - I) U^T,

so that ``L L^T = P_{-1}`` with ``beta = 1`` and head multiplier ``mu``. With
exact eigenpairs the head of ``L^T A L`` collapses onto ``mu`` and the tail
is untouched.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator

from . import krylov
from .errors import ShapeError, VersionError

log = logging.getLogger(__name__)

EIGS_MAGIC = b"EIGS"
EIGS_VERSION = 1


def fix_signs(U):
    """Flip columns so that each one's largest-magnitude entry is positive."""
    U = np.array(U, dtype=np.float64)
    if U.shape[1] == 0:
        return U
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


@dataclass(frozen=True)
class EigenpairSet:
    """``r`` orthonormal vectors with positive, non-increasing values."""

    U: np.ndarray
    lam: np.ndarray
    residuals: np.ndarray | None = None
    converged: bool = True

    def __post_init__(self):
        U = np.asarray(self.U, dtype=np.float64)
        lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        if U.ndim != 2 or U.shape[1] != lam.size:
            raise ShapeError(f"U has shape {U.shape} but there are {lam.size} values")
        if lam.size:
            if not np.all(lam > 0):
                raise ValueError("eigenvalues must be strictly positive")
            if np.any(np.diff(lam) > 0):
                raise ValueError("eigenvalues must be non-increasing")
            gram = U.T @ U - np.eye(lam.size)
            if np.abs(gram).max() > 1e-8:
                raise ValueError("U is not column-orthonormal")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "lam", lam)

    @classmethod
    def empty(cls, n: int) -> "EigenpairSet":
        return cls(np.zeros((n, 0)), np.zeros(0))

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def r(self) -> int:
        return self.lam.size

    def truncate(self, r: int) -> "EigenpairSet":
        if not 0 <= r <= self.r:
            raise ValueError(f"cannot keep {r} of {self.r} pairs")
        res = None if self.residuals is None else self.residuals[:r]
        return EigenpairSet(self.U[:, :r], self.lam[:r], res, self.converged)

    def write(self, path):
        with open(path, "wb") as fh:
            fh.write(EIGS_MAGIC + struct.pack("<III", EIGS_VERSION, self.n, self.r))
            fh.write(self.lam.astype("<f8").tobytes())
            fh.write(self.U.astype("<f8").tobytes(order="F"))

    @classmethod
    def read(cls, path) -> "EigenpairSet":
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < 16 or data[:4] != EIGS_MAGIC:
            raise VersionError(f"{path}: not an eigenpair file")
        version, n, r = struct.unpack("<III", data[4:16])
        if version != EIGS_VERSION:
            raise VersionError(f"{path}: unsupported eigenpair file version {version}")
        if len(data) != 16 + 8 * (r + n * r):
            raise VersionError(f"{path}: truncated payload")
        payload = np.frombuffer(data[16:], dtype="<f8")
        lam = payload[:r].astype(np.float64)
        U = payload[r:].reshape((n, r), order="F").astype(np.float64)
        return cls(U, lam)


@dataclass(frozen=True)
class SpectralPreconditioner:
    alpha: float
    beta: float
    mu: float
    pairs: EigenpairSet

    def __post_init__(self):
        if not (self.beta > 0 and self.mu > 0):
            raise ValueError("beta and mu must be positive")

    def apply(self, v):
        return apply_P(self, v)

    def dense(self) -> np.ndarray:
        return self.apply(np.eye(self.pairs.n))

    def as_operator(self) -> LinearOperator:
        n = self.pairs.n
        return LinearOperator((n, n), matvec=self.apply, rmatvec=self.apply,
                              matmat=self.apply, dtype=np.float64)


def apply_P(p: SpectralPreconditioner, v):
    """``beta v + U (mu Lambda^alpha - beta) U^T v`` for ``(n,)`` or ``(n, k)`` input."""
    v = np.asarray(v, dtype=np.float64)
    U, lam = p.pairs.U, p.pairs.lam
    scale = p.mu * lam**p.alpha - p.beta
    coef = U.T @ v
    coef = coef * (scale if v.ndim == 1 else scale[:, None])
    return p.beta * v + U @ coef


class SplitOperator(LinearOperator):
    """Symmetric ``I + U diag(s) U^T``, applied with r inner products and r axpys."""

    def __init__(self, U, s):
        self.U = np.asarray(U, dtype=np.float64)
        self.s = np.asarray(s, dtype=np.float64)
        n = self.U.shape[0]
        super().__init__(np.float64, (n, n))

    def _matvec(self, v):
        v = v.reshape(-1)
        return v + self.U @ (self.s * (self.U.T @ v))

    def _matmat(self, V):
        return V + self.U @ (self.s[:, None] * (self.U.T @ V))

    def _rmatvec(self, v):
        return self._matvec(v)

    def _adjoint(self):
        return self

    def dense(self) -> np.ndarray:
        return self.matmat(np.eye(self.shape[0]))


def split_L(pairs: EigenpairSet, mu: float) -> SplitOperator:
    """Split factor ``L`` with ``L L^T = P_{-1}`` (``beta = 1``, head multiplier ``mu``)."""
    if not mu >= 1:
        raise ValueError(
            f"mu = {mu} < 1: the head eigenvalues would be mapped below the unit lower "
            "bound of the unpreconditioned spectrum")
    return SplitOperator(pairs.U, np.sqrt(mu) * pairs.lam**-0.5 - 1.0)


def exact_leading_eigs(A, r: int, n: int | None = None, n_small: int = 2000,
                       tol: float = 1e-8, seed: int = 0) -> EigenpairSet:
    """Leading ``r`` eigenpairs of SPD ``A``: dense ``eigh`` up to ``n_small``, else Lanczos.

    In the Lanczos branch the Krylov space is grown until every wanted Ritz
    pair has residual ``||A u - lambda u|| <= tol * lambda_1``, or the space
    fills ``R^n``. Pairs that miss the tolerance are flagged through
    ``converged=False`` and their residuals are kept.
    """
    A = krylov.as_operator(A, n)
    n = A.shape[0]
    if not 0 <= r <= n:
        raise ValueError(f"r = {r} out of range for n = {n}")
    if r == 0:
        return EigenpairSet.empty(n)
    if n <= n_small:
        dense = A.matmat(np.eye(n))
        dense = 0.5 * (dense + dense.T)
        lam, U = np.linalg.eigh(dense)
        lam, U = lam[::-1][:r], U[:, ::-1][:, :r]
        res = np.linalg.norm(A.matmat(U) - U * lam, axis=0)
        return EigenpairSet(fix_signs(U), lam, res, True)
    k = min(n, 2 * r + 20)
    while True:
        Q, alpha, beta, breakdown = krylov.lanczos(A, k, seed=seed)
        theta, S = krylov.ritz(alpha, beta)
        m = min(r, theta.size)
        U = Q @ S[:, :m]
        lam = theta[:m]
        res = np.linalg.norm(A.matmat(U) - U * lam, axis=0)
        ok = bool(np.all(res <= tol * lam[0])) and m == r
        if ok or breakdown or k >= n:
            break
        k = min(n, 2 * k)
    if not ok:
        log.warning("Lanczos: %d of %d pairs above residual tolerance", int(np.sum(res > tol * lam[0])), r)
    return EigenpairSet(fix_signs(U), lam, res, ok)


def eym_residual(A_dense, r: int) -> float:
    """``||A - A_r||_F^2`` for the rank-``r`` truncated eigendecomposition.

    Raises ArithmeticError if it differs from the sum of the discarded squared
    eigenvalues by more than 1e-10 relative.
    """
    A = np.asarray(A_dense, dtype=np.float64)
    lam, U = np.linalg.eigh(A)
    order = np.argsort(-np.abs(lam))
    lam, U = lam[order], U[:, order]
    Ar = (U[:, :r] * lam[:r]) @ U[:, :r].T
    resid = float(np.sum((A - Ar) ** 2))
    tail = float(np.sum(lam[r:] ** 2))
    scale = max(float(np.sum(lam**2)), np.finfo(float).tiny)
    if abs(resid - tail) > 1e-10 * scale:
        raise ArithmeticError(f"truncation error {resid!r} != tail energy {tail!r}")
    return resid


def b_half_preconditioner(cov) -> LinearOperator:
    """Split factor ``L = B^{1/2}``: ``L^T A L = B^{1/2} G^T R^{-1} G B^{1/2} + I``."""
    n = cov.n
    return LinearOperator((n, n), matvec=cov.b_sqrt_apply, rmatvec=cov.b_sqrt_apply,
                          matmat=cov.b_sqrt_apply, dtype=np.float64)


@dataclass(frozen=True)
class MuPolicy:
    """How the head multiplier is chosen: ``fixed`` value or ``min`` predicted eigenvalue."""

    kind: str = "min"
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fixed", "min"):
            raise ValueError(f"unknown mu policy {self.kind!r}")

    @classmethod
    def parse(cls, text) -> "MuPolicy":
        """Accepts ``"min"``, ``"fixed:<value>"`` or a bare number."""
        if isinstance(text, (int, float)):
            return cls("fixed", float(text))
        text = str(text).strip()
        if text == "min":
            return cls("min")
        if text.startswith("fixed:"):
            return cls("fixed", float(text.split(":", 1)[1]))
        try:
            return cls("fixed", float(text))
        except ValueError:
            raise ValueError(f"cannot parse mu policy {text!r}") from None

    def resolve(self, lam) -> float:
        """The multiplier for values ``lam``, clamped to at least 1."""
        if self.kind == "fixed":
            mu = self.value
        else:
            mu = float(np.min(lam)) if len(lam) else 1.0
        return max(mu, 1.0)

    def __str__(self):
        return "min" if self.kind == "min" else f"fixed:{self.value:g}"
