"""Online generation and storage of training triples ``(x_i, Z_i, A_{x_i} Z_i)``.

Random draws come from a Philox counter-based generator keyed by
``(seed, stream, index, attempt)``, so any sample can be regenerated on its
own and a stream never depends on how many items were consumed before.
Gaussian probes use the Box-Muller transform on 53-bit uniforms.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import NumericalBlowup, ShapeError, VersionError
from .swmodel import pack, unpack

log = logging.getLogger(__name__)

SHARD_MAGIC = b"PCDS"
SHARD_VERSION = 1
SHARD_HEADER = struct.Struct("<4sIIIQ")

STREAM_PROBES = 0
STREAM_PERTURB = 1
STREAM_LEAD = 2


def _bitgen(seed: int, stream: int, index: int, attempt: int = 0) -> np.random.Philox:
    if not (0 <= index < 2**32 and 0 <= attempt < 2**16 and 0 <= stream < 2**16):
        raise ValueError("counter field out of range")
    tag = (stream << 48) | (attempt << 32) | index
    return np.random.Philox(key=((int(seed) % 2**64) << 64) | tag)


def uniforms(seed, stream, index, size, attempt=0):
    """Doubles in ``[0, 1)`` with 53 random bits each."""
    raw = _bitgen(seed, stream, index, attempt).random_raw(size)
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53


def gaussian(seed, stream, index, shape, attempt=0):
    """Standard normal array of ``shape`` via Box-Muller."""
    size = int(np.prod(shape))
    half = (size + 1) // 2
    u = uniforms(seed, stream, index, 2 * half, attempt)
    u1 = 1.0 - u[:half]  # (0, 1]
    u2 = u[half:]
    rad = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    z = np.concatenate([rad * np.cos(ang), rad * np.sin(ang)])[:size]
    return z.reshape(shape)


def integer(seed, stream, index, lo, hi, attempt=0) -> int:
    """Uniform integer in ``[lo, hi]``."""
    return int(np.random.Generator(_bitgen(seed, stream, index, attempt)).integers(lo, hi + 1))


@dataclass
class TrainingSample:
    x: np.ndarray
    Z: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        n = self.x.shape[0]
        if self.x.ndim != 1 or self.Z.shape != self.Y.shape or self.Z.ndim != 2 or self.Z.shape[0] != n:
            raise ShapeError("inconsistent sample shapes")

    @property
    def k(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True)
class TrajectorySamplerConfig:
    """How the linearization states ``x_i`` are visited.

    ``amplitudes`` are white-noise standard deviations for ``(eta, u, v)``;
    lead times are drawn uniformly from ``[lead_min, lead_max]`` model steps.
    """

    base: np.ndarray
    lead_min: int
    lead_max: int
    amplitudes: tuple
    seed: int = 0
    max_attempts: int = 10

    def __post_init__(self):
        if self.lead_min < 1 or self.lead_max < self.lead_min:
            raise ValueError("lead times need 1 <= lead_min <= lead_max")
        if len(self.amplitudes) != 3 or min(self.amplitudes) < 0:
            raise ValueError("amplitudes must be three non-negative numbers")


def perturbation(grid, amplitudes, seed, stream, index, attempt=0):
    """Packed white noise with per-variable standard deviations."""
    z = gaussian(seed, stream, index, (grid.n,), attempt)
    x = unpack(z, grid)
    return pack(type(x)(*(a * f for a, f in zip(amplitudes, x))))


def _next_state(cfg: TrajectorySamplerConfig, model, x, i):
    for attempt in range(cfg.max_attempts):
        lead = integer(cfg.seed, STREAM_LEAD, i, cfg.lead_min, cfg.lead_max, attempt)
        start = x + perturbation(model.grid, cfg.amplitudes, cfg.seed, STREAM_PERTURB, i, attempt)
        try:
            return pack(model.propagate(unpack(start, model.grid), lead))
        except NumericalBlowup as exc:
            log.warning("state %d, attempt %d: blow-up at step %d; resampling", i, attempt,
                        exc.step_index)
    raise NumericalBlowup(-1, f"state {i}: no stable perturbation after {cfg.max_attempts} attempts")


def stream(cfg: TrajectorySamplerConfig, problem, k: int, start: int = 0) -> Iterator[TrainingSample]:
    """Endless samples following the online batch generation loop.

    ``problem`` must provide ``gn_operator(x)`` and ``forward.model``. Only the
    current state and one sample are held at a time.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    model = problem.forward.model
    x = np.array(cfg.base, dtype=np.float64)
    for i in range(start):
        x = _next_state(cfg, model, x, i)
    i = start
    while True:
        Z = gaussian(cfg.seed, STREAM_PROBES, i, (x.size, k))
        Y = problem.gn_operator(x).matmat(Z)
        yield TrainingSample(x.copy(), Z, Y)
        x = _next_state(cfg, model, x, i)
        i += 1


def generate_batch(cfg: TrajectorySamplerConfig, problem, n_batch: int, k: int) -> list:
    it = stream(cfg, problem, k)
    return [next(it) for _ in range(n_batch)]


# --- shard files -------------------------------------------------------------


def shard_nbytes(count: int, n: int, k: int) -> int:
    return SHARD_HEADER.size + count * (n + 2 * n * k) * 8


def write_shard(samples, path):
    samples = list(samples)
    if not samples:
        raise ValueError("refusing to write an empty shard")
    n, k = samples[0].x.size, samples[0].k
    for s in samples:
        if s.x.size != n or s.k != k:
            raise ShapeError("all samples in a shard must share n and k")
    with open(path, "wb") as fh:
        fh.write(SHARD_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, n, k, len(samples)))
        for s in samples:
            fh.write(s.x.astype("<f8").tobytes())
            fh.write(s.Z.astype("<f8").tobytes(order="F"))
            fh.write(s.Y.astype("<f8").tobytes(order="F"))


def read_shard(path) -> list:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < SHARD_HEADER.size:
        raise VersionError(f"{path}: truncated header")
    magic, version, n, k, count = SHARD_HEADER.unpack_from(data)
    if magic != SHARD_MAGIC:
        raise VersionError(f"{path}: not a dataset shard")
    if version != SHARD_VERSION:
        raise VersionError(f"{path}: unsupported shard version {version}")
    if len(data) != shard_nbytes(count, n, k):
        raise VersionError(f"{path}: expected {shard_nbytes(count, n, k)} bytes, found {len(data)}")
    payload = np.frombuffer(data, dtype="<f8", offset=SHARD_HEADER.size)
    per = n + 2 * n * k
    out = []
    for c in range(count):
        rec = payload[c * per:(c + 1) * per].astype(np.float64)
        x = rec[:n]
        Z = rec[n:n + n * k].reshape((n, k), order="F")
        Y = rec[n + n * k:].reshape((n, k), order="F")
        out.append(TrainingSample(x, Z, Y))
    return out


def write_shards(samples, directory, max_bytes: int | None = None, prefix="shard"):
    """Split ``samples`` over numbered shard files of at most ``max_bytes`` each."""
    samples = list(samples)
    if not samples:
        return []
    n, k = samples[0].x.size, samples[0].k
    per_shard = len(samples)
    if max_bytes is not None:
        per_shard = (max_bytes - SHARD_HEADER.size) // ((n + 2 * n * k) * 8)
        if per_shard < 1:
            raise ValueError(f"shard size cap {max_bytes} B is below one sample")
    os.makedirs(directory, exist_ok=True)
    paths = []
    for j, lo in enumerate(range(0, len(samples), per_shard)):
        path = os.path.join(directory, f"{prefix}-{j:05d}.pcds")
        write_shard(samples[lo:lo + per_shard], path)
        paths.append(path)
    return paths


def iter_shards(paths) -> Iterator[TrainingSample]:
    for path in paths:
        yield from read_shard(path)
