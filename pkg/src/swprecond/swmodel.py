"""Nonlinear shallow-water model on a closed-basin Arakawa C-grid.

Layout (index ``[i, j]`` with ``i`` along x and ``j`` along y):

- ``eta`` at cell centres, shape ``(nx, ny)``
- ``u`` on interior east/west faces, shape ``(nx - 1, ny)``
- ``v`` on interior north/south faces, shape ``(nx, ny - 1)``
- relative vorticity on cell corners, zero on the walls (free slip)

Momentum is written in vector-invariant form with absolute vorticity
``f0 + beta*y + dv/dx - du/dy`` and Bernoulli potential
``g*eta + (u**2 + v**2)/2``. One time step is a forward-backward sequence of
three sub-updates: continuity, then u-momentum using the new ``eta``, then
v-momentum using the new ``eta`` and ``u``.

The tangent-linear and adjoint models differentiate exactly these discrete
sub-updates. All linear operators accept trailing batch dimensions, so a
``(n, k)`` block of perturbations is propagated in one sweep.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import NumericalBlowup, ShapeError, VersionError

SNAPSHOT_MAGIC = b"SWST"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class GridSpec:
    nx: int = 16
    ny: int = 16
    Lx: float = 1.8e6
    Ly: float = 1.8e6

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid needs at least 4x4 cells, got {self.nx}x{self.ny}")
        if not (self.Lx > 0 and self.Ly > 0):
            raise ValueError("domain lengths must be positive")

    @property
    def dx(self) -> float:
        return self.Lx / self.nx

    @property
    def dy(self) -> float:
        return self.Ly / self.ny

    @property
    def shapes(self):
        nx, ny = self.nx, self.ny
        return (nx, ny), (nx - 1, ny), (nx, ny - 1)

    @property
    def n(self) -> int:
        """Length of the packed state vector."""
        return sum(a * b for a, b in self.shapes)

    @property
    def n_eta(self) -> int:
        return self.nx * self.ny


@dataclass(frozen=True)
class ModelParams:
    eta0: float = 100.0
    g: float = 9.81
    nu: float = 2.0e5
    cb: float = 1e-6
    tau0: float = 0.1
    rho0: float = 1000.0
    f0: float = 1e-4
    beta: float = 2e-11
    dt: float = 1728.0
    steps_per_window: int = 50

    def __post_init__(self):
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.steps_per_window < 1:
            raise ValueError("steps_per_window must be >= 1")

    @property
    def window(self) -> float:
        """Assimilation window length T in seconds."""
        return self.dt * self.steps_per_window

    def courant(self, grid: GridSpec) -> float:
        return self.dt * math.sqrt(self.g * self.eta0) / min(grid.dx, grid.dy)

    def check_cfl(self, grid: GridSpec, limit: float = 0.5):
        c = self.courant(grid)
        if c > limit:
            raise ValueError(
                f"time step {self.dt} s violates CFL: Courant number {c:.3f} > {limit}"
            )


class StateVector(NamedTuple):
    eta: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def pack(self) -> np.ndarray:
        return pack(self)

    @classmethod
    def zeros(cls, grid: GridSpec, *batch) -> "StateVector":
        return cls(*(np.zeros(s + tuple(batch)) for s in grid.shapes))


# --- packing -----------------------------------------------------------------


def pack(x: StateVector) -> np.ndarray:
    """Flatten ``(eta, u, v)`` in that order; trailing batch axes are kept."""
    batch = x.eta.shape[2:]
    return np.concatenate([np.reshape(f, (-1,) + batch) for f in x])


def unpack(flat, grid: GridSpec) -> StateVector:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape[0] != grid.n:
        raise ShapeError(f"packed length {flat.shape[0]} does not match grid size {grid.n}")
    batch = flat.shape[1:]
    out, start = [], 0
    for shape in grid.shapes:
        size = shape[0] * shape[1]
        out.append(flat[start:start + size].reshape(shape + batch))
        start += size
    return StateVector(*out)


def _check_shapes(x: StateVector, grid: GridSpec):
    for field, shape, name in zip(x, grid.shapes, ("eta", "u", "v")):
        if field.shape[:2] != shape:
            raise ShapeError(f"{name} has shape {field.shape[:2]}, expected {shape}")


def to_image(x: StateVector, scales=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Stack the state as an ``(nx, ny, 3)`` image.

    ``u`` gains a last row and ``v`` a last column by edge replication; each
    channel is divided by its scale constant.
    """
    eta, u, v = x
    u_pad = np.concatenate([u, u[-1:]], axis=0)
    v_pad = np.concatenate([v, v[:, -1:]], axis=1)
    img = np.stack([eta, u_pad, v_pad], axis=-1)
    return img / np.asarray(scales, dtype=np.float64)


def channel_scales(states) -> tuple:
    """Per-channel standard deviations over a sequence of states."""
    etas = np.stack([s.eta for s in states])
    us = np.stack([s.u for s in states])
    vs = np.stack([s.v for s in states])
    return tuple(float(max(a.std(), 1e-300)) for a in (etas, us, vs))


# --- snapshot files ----------------------------------------------------------


def write_snapshot(path, x: StateVector, grid: GridSpec):
    _check_shapes(x, grid)
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC + struct.pack("<III", SNAPSHOT_VERSION, grid.nx, grid.ny))
        fh.write(pack(x).astype("<f8").tobytes())


def read_snapshot(path, grid: GridSpec | None = None) -> StateVector:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != SNAPSHOT_MAGIC:
        raise VersionError(f"{path}: not a state snapshot")
    version, nx, ny = struct.unpack("<III", data[4:16])
    if version != SNAPSHOT_VERSION:
        raise VersionError(f"{path}: unsupported snapshot version {version}")
    if grid is None:
        grid = GridSpec(nx, ny)
    elif (grid.nx, grid.ny) != (nx, ny):
        raise ShapeError(f"snapshot is {nx}x{ny}, grid is {grid.nx}x{grid.ny}")
    payload = data[16:]
    if len(payload) != 8 * grid.n:
        raise VersionError(f"{path}: truncated payload")
    return unpack(np.frombuffer(payload, dtype="<f8").astype(np.float64), grid)


# --- linear primitives and their transposes ----------------------------------
# All act on axis 0 (x) or 1 (y); trailing batch axes pass through.


def _pad0(a, axis):
    shape = list(a.shape)
    shape[axis] += 2
    out = np.zeros(shape)
    if axis == 0:
        out[1:-1] = a
    else:
        out[:, 1:-1] = a
    return out


def _pad0_T(b, axis):
    return b[1:-1] if axis == 0 else b[:, 1:-1]


def _pad_edge(a, axis):
    out = _pad0(a, axis)
    if axis == 0:
        out[0] = a[0]
        out[-1] = a[-1]
    else:
        out[:, 0] = a[:, 0]
        out[:, -1] = a[:, -1]
    return out


def _pad_edge_T(b, axis):
    if axis == 0:
        out = b[1:-1].copy()
        out[0] += b[0]
        out[-1] += b[-1]
    else:
        out = b[:, 1:-1].copy()
        out[:, 0] += b[:, 0]
        out[:, -1] += b[:, -1]
    return out


def _diff(a, axis):
    return a[1:] - a[:-1] if axis == 0 else a[:, 1:] - a[:, :-1]


def _diff_T(b, axis):
    return -_diff(_pad0(b, axis), axis)


def _avg(a, axis):
    return 0.5 * (a[1:] + a[:-1]) if axis == 0 else 0.5 * (a[:, 1:] + a[:, :-1])


def _avg_T(b, axis):
    return _avg(_pad0(b, axis), axis)


def _expand(a, like):
    """Append singleton axes so trajectory fields broadcast over a batch."""
    extra = like.ndim - a.ndim
    return a if extra <= 0 else a.reshape(a.shape + (1,) * extra)


class ShallowWater:
    """Discrete model bound to a grid and parameter set.

    Each forward sub-update returns the new field together with the
    base-state factors its linearization needs; the tangent-linear and
    adjoint sub-updates consume those factors.
    """

    def __init__(self, params: ModelParams, grid: GridSpec, check_cfl=True):
        if check_cfl:
            params.check_cfl(grid)
        self.params = params
        self.grid = grid
        self.dx, self.dy = grid.dx, grid.dy
        y_corner = np.arange(grid.ny + 1) * grid.dy
        self.f_corner = (params.f0 + params.beta * y_corner)[None, :]
        y_u = (np.arange(grid.ny) + 0.5) * grid.dy
        self.wind_u = (
            params.tau0 * np.cos(2 * np.pi * y_u / grid.Ly) / (params.rho0 * params.eta0)
        )[None, :]

    # -- shared pieces ---------------------------------------------------------

    def _rel_vorticity(self, u, v):
        zeta = _diff(v, 0) / self.dx - _diff(u, 1) / self.dy
        return _pad0(_pad0(zeta, 0), 1)

    def _rel_vorticity_T(self, a_full):
        a = a_full[1:-1, 1:-1]
        return -_diff_T(a, 1) / self.dy, _diff_T(a, 0) / self.dx

    def _kinetic_tl(self, up, vp, du, dv):
        return _avg(_expand(up, du) * _pad0(du, 0), 0) + _avg(_expand(vp, dv) * _pad0(dv, 1), 1)

    def _kinetic_T(self, up, vp, a):
        return (_pad0_T(_expand(up, a) * _avg_T(a, 0), 0),
                _pad0_T(_expand(vp, a) * _avg_T(a, 1), 1))

    def _lap_u(self, u):
        return (_diff(_diff(_pad0(u, 0), 0), 0) / self.dx**2
                + _diff(_diff(_pad_edge(u, 1), 1), 1) / self.dy**2)

    def _lap_u_T(self, a):
        return (_pad0_T(_diff_T(_diff_T(a, 0), 0), 0) / self.dx**2
                + _pad_edge_T(_diff_T(_diff_T(a, 1), 1), 1) / self.dy**2)

    def _lap_v(self, v):
        return (_diff(_diff(_pad0(v, 1), 1), 1) / self.dy**2
                + _diff(_diff(_pad_edge(v, 0), 0), 0) / self.dx**2)

    def _lap_v_T(self, a):
        return (_pad0_T(_diff_T(_diff_T(a, 1), 1), 1) / self.dy**2
                + _pad_edge_T(_diff_T(_diff_T(a, 0), 0), 0) / self.dx**2)

    # -- continuity: eta <- eta - dt * div((eta0 + eta) * (u, v)) ---------------

    def _continuity(self, eta, u, v):
        eta0, dt = self.params.eta0, self.params.dt
        hu = eta0 + _avg(eta, 0)
        hv = eta0 + _avg(eta, 1)
        div = _diff(_pad0(hu * u, 0), 0) / self.dx + _diff(_pad0(hv * v, 1), 1) / self.dy
        return eta - dt * div, (hu, hv, u, v)

    def _continuity_tl(self, cache, de, du, dv):
        hu, hv, u, v = cache
        dfx = _avg(de, 0) * _expand(u, du) + _expand(hu, du) * du
        dfy = _avg(de, 1) * _expand(v, dv) + _expand(hv, dv) * dv
        div = _diff(_pad0(dfx, 0), 0) / self.dx + _diff(_pad0(dfy, 1), 1) / self.dy
        return de - self.params.dt * div

    def _continuity_T(self, cache, ae):
        """Adjoint of the new eta, split into (eta, u, v) contributions."""
        hu, hv, u, v = cache
        g = -self.params.dt * ae
        afx = _pad0_T(_diff_T(g, 0), 0) / self.dx
        afy = _pad0_T(_diff_T(g, 1), 1) / self.dy
        a_eta = ae + _avg_T(afx * _expand(u, afx), 0) + _avg_T(afy * _expand(v, afy), 1)
        return a_eta, _expand(hu, afx) * afx, _expand(hv, afy) * afy

    # -- u momentum ------------------------------------------------------------

    def _u_momentum(self, eta, u, v):
        p = self.params
        xi = self.f_corner + self._rel_vorticity(u, v)
        xi_u = _avg(xi[1:-1, :], 1)
        vbar = _avg(_avg(_pad0(v, 1), 0), 1)
        up, vp = _pad0(u, 0), _pad0(v, 1)
        bern = p.g * eta + 0.5 * (_avg(up**2, 0) + _avg(vp**2, 1))
        tend = (xi_u * vbar - _diff(bern, 0) / self.dx + p.nu * self._lap_u(u)
                - p.cb * u + self.wind_u)
        return u + p.dt * tend, (xi_u, vbar, up, vp)

    def _u_momentum_tl(self, cache, de, du, dv):
        p = self.params
        xi_u, vbar, up, vp = cache
        dxi_u = _avg(self._rel_vorticity(du, dv)[1:-1, :], 1)
        dvbar = _avg(_avg(_pad0(dv, 1), 0), 1)
        dbern = p.g * de + self._kinetic_tl(up, vp, du, dv)
        dtend = (dxi_u * _expand(vbar, du) + _expand(xi_u, du) * dvbar
                 - _diff(dbern, 0) / self.dx + p.nu * self._lap_u(du) - p.cb * du)
        return du + p.dt * dtend

    def _u_momentum_T(self, cache, au):
        """Adjoint of the new u, split into (eta, u, v) contributions."""
        p = self.params
        xi_u, vbar, up, vp = cache
        a = p.dt * au
        a_u = au + p.nu * self._lap_u_T(a) - p.cb * a
        a_xi = np.zeros((self.grid.nx + 1, self.grid.ny + 1) + a.shape[2:])
        a_xi[1:-1, :] = _avg_T(a * _expand(vbar, a), 1)
        ru, rv = self._rel_vorticity_T(a_xi)
        a_v = rv + _pad0_T(_avg_T(_avg_T(a * _expand(xi_u, a), 1), 0), 1)
        a_bern = -_diff_T(a, 0) / self.dx
        ku, kv = self._kinetic_T(up, vp, a_bern)
        return p.g * a_bern, a_u + ru + ku, a_v + kv

    # -- v momentum ------------------------------------------------------------

    def _v_momentum(self, eta, u, v):
        p = self.params
        xi = self.f_corner + self._rel_vorticity(u, v)
        xi_v = _avg(xi[:, 1:-1], 0)
        ubar = _avg(_avg(_pad0(u, 0), 1), 0)
        up, vp = _pad0(u, 0), _pad0(v, 1)
        bern = p.g * eta + 0.5 * (_avg(up**2, 0) + _avg(vp**2, 1))
        tend = -xi_v * ubar - _diff(bern, 1) / self.dy + p.nu * self._lap_v(v) - p.cb * v
        return v + p.dt * tend, (xi_v, ubar, up, vp)

    def _v_momentum_tl(self, cache, de, du, dv):
        p = self.params
        xi_v, ubar, up, vp = cache
        dxi_v = _avg(self._rel_vorticity(du, dv)[:, 1:-1], 0)
        dubar = _avg(_avg(_pad0(du, 0), 1), 0)
        dbern = p.g * de + self._kinetic_tl(up, vp, du, dv)
        dtend = (-dxi_v * _expand(ubar, dv) - _expand(xi_v, dv) * dubar
                 - _diff(dbern, 1) / self.dy + p.nu * self._lap_v(dv) - p.cb * dv)
        return dv + p.dt * dtend

    def _v_momentum_T(self, cache, av):
        p = self.params
        xi_v, ubar, up, vp = cache
        a = p.dt * av
        a_v = av + p.nu * self._lap_v_T(a) - p.cb * a
        a_xi = np.zeros((self.grid.nx + 1, self.grid.ny + 1) + a.shape[2:])
        a_xi[:, 1:-1] = _avg_T(-a * _expand(ubar, a), 0)
        ru, rv = self._rel_vorticity_T(a_xi)
        a_u = ru + _pad0_T(_avg_T(_avg_T(-a * _expand(xi_v, a), 0), 1), 0)
        a_bern = -_diff_T(a, 1) / self.dy
        ku, kv = self._kinetic_T(up, vp, a_bern)
        return p.g * a_bern, a_u + ku, a_v + rv + kv

    # -- public stepping -------------------------------------------------------

    def _advance(self, x, index):
        eta, u, v = x
        with np.errstate(over="ignore", invalid="ignore"):
            eta, c_cont = self._continuity(eta, u, v)
            u, c_u = self._u_momentum(eta, u, v)
            v, c_v = self._v_momentum(eta, u, v)
        if not (np.isfinite(eta).all() and np.isfinite(u).all() and np.isfinite(v).all()):
            raise NumericalBlowup(index)
        return StateVector(eta, u, v), (c_cont, c_u, c_v)

    def step(self, x: StateVector, index: int = 0) -> StateVector:
        _check_shapes(x, self.grid)
        return self._advance(x, index)[0]

    def propagate(self, x: StateVector, n_steps: int) -> StateVector:
        if n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        _check_shapes(x, self.grid)
        for k in range(n_steps):
            x = self._advance(x, k)[0]
        return x

    def trajectory(self, x: StateVector, n_steps: int) -> "Trajectory":
        """Run forward, keeping every sub-update's linearization factors."""
        if n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        _check_shapes(x, self.grid)
        stages = []
        for k in range(n_steps):
            x, caches = self._advance(x, k)
            stages.append(caches)
        return Trajectory(self, stages, x)


class Trajectory:
    """Stored forward trajectory; applies the TLM and its adjoint."""

    def __init__(self, model: ShallowWater, stages, final: StateVector):
        self.model = model
        self.stages = stages
        self.final = final

    @property
    def n_steps(self) -> int:
        return len(self.stages)

    def tlm(self, d: StateVector) -> StateVector:
        m = self.model
        de, du, dv = d
        for c_cont, c_u, c_v in self.stages:
            de = m._continuity_tl(c_cont, de, du, dv)
            du = m._u_momentum_tl(c_u, de, du, dv)
            dv = m._v_momentum_tl(c_v, de, du, dv)
        return StateVector(de, du, dv)

    def adjoint(self, a: StateVector) -> StateVector:
        m = self.model
        ae, au, av = a
        for c_cont, c_u, c_v in reversed(self.stages):
            e_c, u_c, v_c = m._v_momentum_T(c_v, av)
            ae, au, av = ae + e_c, au + u_c, v_c
            e_c, u_c, v_c = m._u_momentum_T(c_u, au)
            ae, au, av = ae + e_c, u_c, av + v_c
            e_c, u_c, v_c = m._continuity_T(c_cont, ae)
            ae, au, av = e_c, au + u_c, av + v_c
        return StateVector(ae, au, av)


# --- functional interface ----------------------------------------------------


def step(x: StateVector, p: ModelParams, grid: GridSpec) -> StateVector:
    return ShallowWater(p, grid).step(x)


def propagate(x: StateVector, n_steps: int, p: ModelParams, grid: GridSpec) -> StateVector:
    return ShallowWater(p, grid).propagate(x, n_steps)


def tlm_apply(x_lin: StateVector, dx: StateVector, n_steps: int, p: ModelParams,
              grid: GridSpec) -> StateVector:
    """Jacobian of ``propagate`` at ``x_lin`` applied to ``dx``."""
    _check_shapes(dx, grid)
    return ShallowWater(p, grid).trajectory(x_lin, n_steps).tlm(dx)


def adjoint_apply(x_lin: StateVector, dy: StateVector, n_steps: int, p: ModelParams,
                  grid: GridSpec) -> StateVector:
    """Transpose of :func:`tlm_apply` at ``x_lin`` applied to ``dy``."""
    _check_shapes(dy, grid)
    return ShallowWater(p, grid).trajectory(x_lin, n_steps).adjoint(dy)


def total_mass(x: StateVector, grid: GridSpec) -> float:
    return float(np.sum(x.eta) * grid.dx * grid.dy)
