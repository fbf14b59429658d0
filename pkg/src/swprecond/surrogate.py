"""Trainable map from a linearization state to approximate leading eigenpairs.

The network emits ``(n + 1) * r`` numbers: a raw ``n x r`` block ``U~`` and
``r`` raw values ``l~``. Postprocessing turns them into an orthonormal ``U``
(modified Gram-Schmidt with one reorthogonalization pass) and values
``M * sigmoid(l~)`` in ``(0, M)``, sorted descending together with their
columns. Training minimizes the randomized Frobenius loss

    (1/k) sum_j || U diag(lam) U^T z_j - A_x z_j ||^2

on probe triples ``(x, Z, A_x Z)``. All arithmetic is float64.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import DegenerateOutput, VersionError
from .precond import EigenpairSet, MuPolicy, split_L
from .krylov import identity_operator

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SURR"
CHECKPOINT_VERSION = 1
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class SurrogateConfig:
    """Shape and architecture of a surrogate.

    ``arch`` is a JSON-able descriptor. ``{"kind": "conv", "grid": [nx, ny],
    "channels": [c1, c2], "hidden": h}`` reads the state as a 3-channel image;
    ``{"kind": "dense", "hidden": [h1, ...]}`` reads the packed vector.
    ``scales`` are the per-variable input normalization constants.
    ``ortho`` is ``"mgs"`` (train through the orthonormalization) or
    ``"penalty"`` (train on raw columns plus ``penalty * ||U~^T U~ - I||_F^2``).
    """

    n: int
    r: int
    M: float
    arch: dict = field(default_factory=lambda: {"kind": "dense", "hidden": [64]})
    scales: tuple = (1.0, 1.0, 1.0)
    ortho: str = "mgs"
    penalty: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.r < 1 or self.r > self.n:
            raise ValueError(f"need 1 <= r <= n, got r={self.r}, n={self.n}")
        if not self.M > 0:
            raise ValueError("M must be positive")
        if self.ortho not in ("mgs", "penalty"):
            raise ValueError(f"unknown orthonormalization mode {self.ortho!r}")
        if self.arch.get("kind") not in ("conv", "dense"):
            raise ValueError(f"unknown architecture kind {self.arch.get('kind')!r}")

    @property
    def output_dim(self) -> int:
        return (self.n + 1) * self.r

    def descriptor(self) -> bytes:
        d = {"arch": self.arch, "scales": list(self.scales), "ortho": self.ortho,
             "penalty": self.penalty, "seed": self.seed}
        return json.dumps(d, sort_keys=True).encode()

    @classmethod
    def from_descriptor(cls, n, r, M, blob: bytes) -> "SurrogateConfig":
        d = json.loads(blob.decode())
        return cls(n, r, M, d["arch"], tuple(d["scales"]), d["ortho"], d["penalty"], d["seed"])


@dataclass
class SurrogateOutput:
    U_raw: np.ndarray
    lambda_raw: np.ndarray
    U: np.ndarray
    lam: np.ndarray

    def pairs(self, r=None) -> EigenpairSet:
        r = self.lam.size if r is None else r
        return EigenpairSet(self.U[:, :r], self.lam[:r])


def mgs(V: torch.Tensor) -> torch.Tensor:
    """Modified Gram-Schmidt with a second orthogonalization pass per column."""
    cols = []
    for j in range(V.shape[1]):
        v = V[:, j]
        for _ in range(2):
            for q in cols:
                v = v - torch.dot(q, v) * q
        norm = torch.linalg.vector_norm(v)
        if float(norm.detach()) < DEGENERATE_NORM:
            raise DegenerateOutput(f"column {j} is numerically dependent (norm {float(norm.detach()):.3e})")
        cols.append(v / norm)
    return torch.stack(cols, dim=1)


def scaled_sigmoid(z, M):
    return M * torch.sigmoid(z)


def _grid_layout(n, arch):
    nx, ny = arch["grid"]
    if nx * ny + (nx - 1) * ny + nx * (ny - 1) != n:
        raise ValueError(f"grid {nx}x{ny} does not match n = {n}")
    return nx, ny


class _Net(nn.Module):
    def __init__(self, cfg: SurrogateConfig):
        super().__init__()
        n, r, arch = cfg.n, cfg.r, cfg.arch
        if arch["kind"] == "conv":
            nx, ny = _grid_layout(n, arch)
            c1, c2 = arch.get("channels", [8, 16])
            self.encoder = nn.Sequential(
                nn.Conv2d(3, c1, 3, stride=2, padding=1), nn.Tanh(),
                nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.Tanh(),
                nn.Flatten(),
            )
            # two stride-2, padding-1, 3x3 convolutions halve each side (rounding up)
            flat = c2 * ((nx + 3) // 4) * ((ny + 3) // 4)
            hidden = int(arch.get("hidden", 64))
            self.bottleneck = nn.Sequential(nn.Linear(flat, hidden), nn.Tanh())
            width = hidden
        else:
            layers, width = [], n
            for h in arch.get("hidden", [64]):
                layers += [nn.Linear(width, h), nn.Tanh()]
                width = h
            self.encoder = nn.Flatten()
            self.bottleneck = nn.Sequential(*layers)
        self.head_u = nn.Linear(width, n * r)
        self.head_lam = nn.Linear(width, r)


class Surrogate:
    """Network plus postprocessing. ``theta`` is exposed as a flat float64 vector."""

    def __init__(self, cfg: SurrogateConfig, theta=None):
        self.cfg = cfg
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.seed)
        try:
            self.net = _Net(cfg).double()
            with torch.no_grad():
                self.net.head_u.weight.mul_(1.0 / math.sqrt(cfg.n))
                self.net.head_u.bias.normal_(0.0, 1.0 / math.sqrt(cfg.n))
                self.net.head_lam.bias.zero_()
        finally:
            torch.random.set_rng_state(gen_state)
        if cfg.arch["kind"] == "conv":
            self._grid = _grid_layout(cfg.n, cfg.arch)
        if theta is not None:
            self.set_theta(theta)

    # -- parameters ------------------------------------------------------------

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def get_theta(self) -> np.ndarray:
        return nn.utils.parameters_to_vector(self.net.parameters()).detach().numpy().copy()

    def set_theta(self, theta):
        theta = torch.from_numpy(np.array(theta, dtype=np.float64))
        if theta.numel() != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.numel()}")
        nn.utils.vector_to_parameters(theta.clone(), self.net.parameters())

    # -- forward ---------------------------------------------------------------

    def _input(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if cfg.arch["kind"] == "conv":
            nx, ny = self._grid
            ne, nu = nx * ny, (nx - 1) * ny
            eta = x[:ne].reshape(nx, ny)
            u = x[ne:ne + nu].reshape(nx - 1, ny)
            v = x[ne + nu:].reshape(nx, ny - 1)
            u = torch.cat([u, u[-1:]], dim=0)
            v = torch.cat([v, v[:, -1:]], dim=1)
            img = torch.stack([eta / cfg.scales[0], u / cfg.scales[1], v / cfg.scales[2]])
            return img.unsqueeze(0)
        return (x / torch.as_tensor(self._flat_scales())).unsqueeze(0)

    def _flat_scales(self):
        if not hasattr(self, "_fs"):
            n = self.cfg.n
            s = self.cfg.scales
            if "grid" in self.cfg.arch:
                nx, ny = _grid_layout(n, self.cfg.arch)
                counts = (nx * ny, (nx - 1) * ny, nx * (ny - 1))
                self._fs = np.concatenate([np.full(c, v) for c, v in zip(counts, s)])
            else:
                self._fs = np.full(n, float(s[0]))
        return self._fs

    def raw(self, x: torch.Tensor):
        h = self.net.bottleneck(self.net.encoder(self._input(x)))
        U_raw = self.net.head_u(h).reshape(self.cfg.r, self.cfg.n).T  # columns contiguous in output
        lam_raw = self.net.head_lam(h).reshape(self.cfg.r)
        return U_raw, lam_raw

    def _postprocess(self, U_raw, lam_raw, orthonormalize=True):
        U = mgs(U_raw) if orthonormalize else U_raw
        lam = scaled_sigmoid(lam_raw, self.cfg.M)
        order = torch.argsort(lam, descending=True, stable=True)
        return U[:, order], lam[order]

    def forward(self, x) -> SurrogateOutput:
        with torch.no_grad():
            xt = torch.as_tensor(np.asarray(x, dtype=np.float64))
            if xt.shape != (self.cfg.n,):
                raise ValueError(f"state has shape {tuple(xt.shape)}, expected ({self.cfg.n},)")
            U_raw, lam_raw = self.raw(xt)
            U, lam = self._postprocess(U_raw, lam_raw)
        return SurrogateOutput(U_raw.numpy().copy(), lam_raw.numpy().copy(),
                               U.numpy().copy(), lam.numpy().copy())

    __call__ = forward

    # -- loss ------------------------------------------------------------------

    def _loss_terms(self, sample, training):
        x = torch.as_tensor(sample.x)
        Z = torch.as_tensor(sample.Z)
        Y = torch.as_tensor(sample.Y)
        U_raw, lam_raw = self.raw(x)
        penalised = training and self.cfg.ortho == "penalty"
        U, lam = self._postprocess(U_raw, lam_raw, orthonormalize=not penalised)
        k = Z.shape[1]
        R = U @ (lam[:, None] * (U.T @ Z)) - Y
        loss = (R * R).sum() / k
        norm = (Y * Y).sum() / k
        extra = 0.0
        if penalised:
            G = U_raw.T @ U_raw - torch.eye(self.cfg.r, dtype=torch.float64)
            extra = self.cfg.penalty * (G * G).sum()
        return loss, norm, extra

    def loss(self, sample, relative=False) -> float:
        with torch.no_grad():
            loss, norm, _ = self._loss_terms(sample, training=False)
        return float(loss / norm) if relative else float(loss)

    def grad_loss(self, sample, relative=False):
        """Loss and its exact gradient with respect to the flat ``theta``."""
        self.net.zero_grad(set_to_none=True)
        loss, norm, _ = self._loss_terms(sample, training=False)
        obj = loss / norm if relative else loss
        obj.backward()
        grad = torch.cat([p.grad.reshape(-1) for p in self.net.parameters()])
        return float(obj.detach()), grad.detach().numpy().copy()

    # -- checkpoint ------------------------------------------------------------

    def save(self, path):
        cfg = self.cfg
        desc = cfg.descriptor()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IIIdI", CHECKPOINT_VERSION, cfg.n, cfg.r, cfg.M, len(desc)))
            fh.write(desc)
            fh.write(self.get_theta().astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Surrogate":
        with open(path, "rb") as fh:
            data = fh.read()
        head = struct.Struct("<IIIdI")
        if len(data) < 4 + head.size or data[:4] != CHECKPOINT_MAGIC:
            raise VersionError(f"{path}: not a surrogate checkpoint")
        version, n, r, M, dlen = head.unpack_from(data, 4)
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"{path}: unsupported checkpoint version {version}")
        start = 4 + head.size
        cfg = SurrogateConfig.from_descriptor(n, r, M, data[start:start + dlen])
        sur = cls(cfg)
        payload = data[start + dlen:]
        if len(payload) != 8 * sur.n_params:
            raise VersionError(f"{path}: parameter payload has wrong length")
        sur.set_theta(np.frombuffer(payload, dtype="<f8"))
        return sur


def reconstruct_apply(out: SurrogateOutput, v):
    """``U diag(lam) U^T v`` for ``(n,)`` or ``(n, k)`` input."""
    v = np.asarray(v, dtype=np.float64)
    coef = out.U.T @ v
    coef = coef * (out.lam if v.ndim == 1 else out.lam[:, None])
    return out.U @ coef


def frobenius_loss(out: SurrogateOutput, Z, Y, relative=False) -> float:
    """Randomized Frobenius loss of a fixed output against probes ``Y = A Z``."""
    k = Z.shape[1]
    R = reconstruct_apply(out, Z) - Y
    loss = float(np.sum(R * R)) / k
    return loss / (float(np.sum(Y * Y)) / k) if relative else loss


# --- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    objective: str = "absolute"
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("invalid training configuration")
        if self.objective not in ("absolute", "relative"):
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass
class TrainResult:
    curve: list
    aborted: bool = False
    optimizer_state: dict = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return len(self.curve)


def train(sur: Surrogate, samples, cfg: TrainConfig) -> TrainResult:
    """Adam on the batch-mean loss; ``samples`` is any iterable of TrainingSample.

    Each curve entry records the batch-mean absolute and relative loss of the
    parameters before that step. Training stops early with ``aborted=True``
    when the loss stops being finite; the last finite parameters are kept.
    """
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(sur.net.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps)
    it = iter(samples)
    curve = []
    last_good = sur.get_theta()
    aborted = False
    for step in range(cfg.steps):
        batch = [next(it) for _ in range(cfg.batch_size)]
        opt.zero_grad(set_to_none=True)
        tot, tot_rel = 0.0, 0.0
        try:
            for s in batch:
                loss, norm, extra = sur._loss_terms(s, training=True)
                obj = loss / norm if cfg.objective == "relative" else loss
                ((obj + extra) / len(batch)).backward()
                tot += float(loss.detach()) / len(batch)
                tot_rel += float((loss / norm).detach()) / len(batch)
        except DegenerateOutput as exc:
            log.warning("step %d: %s; stopping", step, exc)
            aborted = True
            break
        if not (math.isfinite(tot) and all(
                torch.isfinite(p.grad).all() for p in sur.net.parameters() if p.grad is not None)):
            log.warning("step %d: non-finite loss; restoring last good parameters", step)
            aborted = True
            break
        curve.append({"step": step, "loss": tot, "relative_loss": tot_rel})
        last_good = sur.get_theta()
        opt.step()
        if not np.all(np.isfinite(sur.get_theta())):
            log.warning("step %d: non-finite parameters; restoring last good parameters", step)
            aborted = True
            break
    if aborted:
        sur.set_theta(last_good)
    return TrainResult(curve, aborted, copy.deepcopy(opt.state_dict()))


def write_curve_csv(path, curve, append=False):
    fields = ["step", "loss", "relative_loss"]
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        if not append or fh.tell() == 0:
            writer.writeheader()
        for row in curve:
            writer.writerow({k: repr(row[k]) if k != "step" else row[k] for k in fields})


def evaluate(sur: Surrogate, samples) -> dict:
    """Mean absolute and relative loss over a held-out set."""
    losses = [sur.loss(s) for s in samples]
    rel = [sur.loss(s, relative=True) for s in samples]
    return {"loss": float(np.mean(losses)), "relative_loss": float(np.mean(rel))}


# --- preconditioner ----------------------------------------------------------


def build_preconditioner(sur: Surrogate, x, mu_policy: MuPolicy, r=None, corrupt_tail=None):
    """Split preconditioner from the surrogate's predicted pairs at state ``x``.

    Returns ``(L, info)``; ``info`` has the resolved ``mu`` and the predicted
    values. ``corrupt_tail`` multiplies the smallest kept value by the given
    factor before ``mu`` is resolved (used to probe sensitivity to a bad tail).
    A degenerate network output yields the identity preconditioner.
    """
    try:
        out = sur.forward(x)
    except DegenerateOutput as exc:
        log.warning("degenerate surrogate output (%s); using the identity preconditioner", exc)
        return identity_operator(sur.cfg.n), {"mu": 1.0, "lam": None, "fallback": True}
    r = sur.cfg.r if r is None else r
    if r > sur.cfg.r:
        raise ValueError(f"r = {r} exceeds the {sur.cfg.r} trained pairs")
    lam = out.lam[:r].copy()
    if corrupt_tail is not None:
        lam[-1] *= corrupt_tail
    pairs = EigenpairSet(out.U[:, :r], lam)
    mu = mu_policy.resolve(lam)
    return split_L(pairs, mu), {"mu": mu, "lam": lam, "fallback": False}
