"""Synthetic low-frequency data from the reflected diffusion on a disk.

The micro-scale path follows the Euler-Maruyama step
``x <- x + grad f(x) dt + sqrt(2 f(x) dt) W``; proposals leaving the disk are
mirrored across the tangent line at the nearest boundary point. Every
``D / dt``-th state is kept.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np
from scipy import stats

from .errors import InvalidParameterError, SimulationError
from .kernel import ObservationSet
from .mesh import UNIT_AREA_RADIUS

logger = logging.getLogger(__name__)

MAX_REFLECTIONS = 10
CHUNK = 1 << 18


@dataclass(frozen=True)
class BumpField:
    """``base + sum_i amp_i exp(-(a_i x1 - b_i)^2 - (c_i x2 - d_i)^2)``.

    ``scales`` rows are ``(a_i, b_i, c_i, d_i)``.
    """

    base: float
    amps: tuple
    scales: tuple

    def arrays(self):
        return np.asarray(self.amps, dtype=float), np.asarray(self.scales, dtype=float).reshape(-1, 4)

    def value_grad(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        amps, sc = self.arrays()
        u = sc[:, 0] * x[:, :1] - sc[:, 1]
        v = sc[:, 2] * x[:, 1:2] - sc[:, 3]
        e = amps * np.exp(-(u**2) - v**2)
        val = self.base + e.sum(axis=1)
        grad = np.column_stack([(-2.0 * u * sc[:, 0] * e).sum(axis=1), (-2.0 * v * sc[:, 2] * e).sum(axis=1)])
        return val, grad


@dataclass(frozen=True)
class GroundTruth:
    """Closed-form conductivity.

    ``kind == "direct"``: ``f`` is the bump field itself.
    ``kind == "exp"``: ``f = f_min + exp(bump field)``.
    ``kind == "callable"``: ``f`` and ``grad_f`` are arbitrary Python callables
    (simulated without the compiled kernel).
    """

    label: str
    bumps: BumpField | None = None
    kind: str = "direct"
    f_min: float = 0.1
    f_callable: Callable | None = None
    grad_callable: Callable | None = None
    meta: dict = field(default_factory=dict)

    def f(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if self.kind == "callable":
            out = np.asarray(self.f_callable(np.atleast_2d(x)), dtype=float)
        else:
            g, _ = self.bumps.value_grad(x)
            out = g if self.kind == "direct" else self.f_min + np.exp(g)
        return float(out[0]) if single else out

    def grad_f(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if self.kind == "callable":
            out = np.asarray(self.grad_callable(np.atleast_2d(x)), dtype=float)
        else:
            g, dg = self.bumps.value_grad(x)
            out = dg if self.kind == "direct" else np.exp(g)[:, None] * dg
        return out[0] if single else out

    def F(self, x, f_min: float | None = None):
        """Reparametrised truth ``log(f - f_min)``."""
        fm = self.f_min if f_min is None else f_min
        return np.log(self.f(x) - fm)


def truth_catalog(label: str) -> GroundTruth:
    """The four closed-form conductivities used in the experiments."""
    if label == "f0":
        return GroundTruth("f0", BumpField(1.1, (10.0, 10.0), ((7.25, 1.5, 7.25, 1.5), (7.25, -1.5, 7.25, 1.5))))
    if label == "f0_1":
        return GroundTruth("f0_1", BumpField(1.1, (15.0,), ((5.0, 0.0, 10.0, 0.0),)))
    if label == "f0_2":
        return GroundTruth(
            "f0_2",
            BumpField(1.1, (10.0, 10.0, 10.0), ((8.0, 0.0, 8.0, 2.25), (8.0, -2.0, 8.0, -1.5), (8.0, 2.0, 8.0, -1.5))),
        )
    if label == "f0_3":
        return GroundTruth(
            "f0_3", BumpField(0.0, (5.0, -5.0), ((7.5, 1.5, 7.5, 1.5), (7.5, -1.5, 7.5, -1.5))), kind="exp"
        )
    raise InvalidParameterError(f"unknown ground truth {label!r}")


def constant_truth(c: float) -> GroundTruth:
    return GroundTruth(f"const_{c:g}", BumpField(float(c), (), ()), kind="direct")


@dataclass(frozen=True)
class TrajectoryConfig:
    dt: float = 5e-6
    total_steps: int = 500_000_000
    D: float = 0.05
    x0: tuple = (0.0, 0.0)
    seed: int = 0
    radius: float = UNIT_AREA_RADIUS

    @property
    def stride(self) -> int:
        ratio = self.D / self.dt
        stride = int(round(ratio))
        if stride < 1 or abs(ratio - stride) > 1e-9 * ratio:
            raise InvalidParameterError(f"D/dt must be a positive integer, got {ratio}")
        return stride

    def validate(self):
        if not self.dt > 0 or self.total_steps < 1:
            raise InvalidParameterError("dt must be positive and total_steps >= 1")
        if np.hypot(*self.x0) > self.radius:
            raise InvalidParameterError("x0 must lie in the domain")
        return self.stride


def reflect(point, radius: float = UNIT_AREA_RADIUS) -> np.ndarray:
    """Mirror a point outside the disk across the tangent line at ``R p / |p|``.

    Points already inside are returned unchanged. A single mirror maps radius
    ``r`` to ``2R - r`` along the same ray; far overshoots are mirrored
    repeatedly (the ray flips through the centre when ``r > 2R``).

    Raises
    ------
    SimulationError
        If the point is still outside after ``MAX_REFLECTIONS`` mirrors.
    """
    p = np.asarray(point, dtype=float)
    out = np.empty(2)
    n = _reflect_inplace(p[0], p[1], radius, out)
    if n < 0:
        raise SimulationError(f"point {p.tolist()} needs more than {MAX_REFLECTIONS} reflections; reduce dt")
    return out


@numba.njit(cache=True)
def _reflect_inplace(x, y, R, out):
    n = 0
    r = np.hypot(x, y)
    while r > R:
        if n == MAX_REFLECTIONS:
            return -1
        s = (2.0 * R - r) / r
        x *= s
        y *= s
        r = abs(2.0 * R - r)
        n += 1
    out[0] = x
    out[1] = y
    return n


@numba.njit(cache=True)
def _bump_eval(x, y, base, amps, sc, kind, f_min, out):
    val = base
    gx = 0.0
    gy = 0.0
    for i in range(amps.shape[0]):
        u = sc[i, 0] * x - sc[i, 1]
        v = sc[i, 2] * y - sc[i, 3]
        e = amps[i] * np.exp(-u * u - v * v)
        val += e
        gx += -2.0 * u * sc[i, 0] * e
        gy += -2.0 * v * sc[i, 2] * e
    if kind == 1:
        ev = np.exp(val)
        out[0] = f_min + ev
        out[1] = ev * gx
        out[2] = ev * gy
    else:
        out[0] = val
        out[1] = gx
        out[2] = gy


@numba.njit(cache=True)
def _em_chunk(state, noise, dt, R, base, amps, sc, kind, f_min, drift, stride, phase, obs_out, n_obs):
    """Advance ``len(noise)`` micro-steps; returns (n_obs, phase, n_reflected) or n_obs=-1 on failure."""
    buf = np.empty(3)
    tmp = np.empty(2)
    x = state[0]
    y = state[1]
    n_ref = 0
    sq = np.sqrt(2.0 * dt)
    for r in range(noise.shape[0]):
        _bump_eval(x, y, base, amps, sc, kind, f_min, buf)
        s = sq * np.sqrt(buf[0])
        xn = x + drift * buf[1] * dt + s * noise[r, 0]
        yn = y + drift * buf[2] * dt + s * noise[r, 1]
        if xn * xn + yn * yn > R * R:
            k = _reflect_inplace(xn, yn, R, tmp)
            if k < 0:
                state[0] = x
                state[1] = y
                return -1, phase, n_ref
            xn = tmp[0]
            yn = tmp[1]
            n_ref += 1
        x = xn
        y = yn
        phase += 1
        if phase == stride:
            phase = 0
            obs_out[n_obs, 0] = x
            obs_out[n_obs, 1] = y
            n_obs += 1
    state[0] = x
    state[1] = y
    return n_obs, phase, n_ref


@dataclass
class SimulationResult:
    observations: ObservationSet
    n_reflections: int
    meta: dict


def _python_chunk(truth, state, noise, dt, R, stride, phase, obs_out, n_obs, drift=1.0):
    n_ref = 0
    x = state.copy()
    sq = np.sqrt(2.0 * dt)
    for r in range(noise.shape[0]):
        fx = truth.f(x)
        gx = truth.grad_f(x)
        xn = x + drift * gx * dt + sq * np.sqrt(fx) * noise[r]
        if xn @ xn > R * R:
            xn = reflect(xn, R)
            n_ref += 1
        x = xn
        phase += 1
        if phase == stride:
            phase = 0
            obs_out[n_obs] = x
            n_obs += 1
    state[:] = x
    return n_obs, phase, n_ref


def simulate(truth: GroundTruth, cfg: TrajectoryConfig, *, noise: bool = True, drift: bool = True) -> SimulationResult:
    """Run the reflected Euler-Maruyama scheme and subsample at lag ``D``.

    Gaussian increments are drawn in chunks from ``numpy.random.default_rng(seed)``,
    so the trajectory is a deterministic function of the configuration.

    Returns
    -------
    SimulationResult
        ``observations`` holds ``X_0`` followed by every ``D/dt``-th state.
    """
    stride = cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_obs_total = cfg.total_steps // stride
    obs = np.empty((n_obs_total + 1, 2))
    obs[0] = cfg.x0
    state = np.array(cfg.x0, dtype=float)
    n_obs, phase, n_ref = 1, 0, 0
    compiled = truth.kind in ("direct", "exp")
    if compiled:
        amps, sc = truth.bumps.arrays()
        kind = 1 if truth.kind == "exp" else 0
    done = 0
    while done < cfg.total_steps:
        m = min(CHUNK, cfg.total_steps - done)
        w = rng.standard_normal((m, 2)) if noise else np.zeros((m, 2))
        if compiled:
            n_obs, phase, k = _em_chunk(
                state, w, cfg.dt, cfg.radius, truth.bumps.base, amps, sc, kind, truth.f_min,
                1.0 if drift else 0.0, stride, phase, obs, n_obs,
            )
            if n_obs < 0:
                raise SimulationError(
                    f"reflection cap exceeded near step {done}; the step dt={cfg.dt} is too large for this conductivity"
                )
        else:
            n_obs, phase, k = _python_chunk(truth, state, w, cfg.dt, cfg.radius, stride, phase, obs, n_obs,
                                            1.0 if drift else 0.0)
        n_ref += k
        done += m
    meta = {
        "truth": truth.label,
        "dt": cfg.dt,
        "D": cfg.D,
        "total_steps": cfg.total_steps,
        "seed": cfg.seed,
        "x0": list(cfg.x0),
        "radius": cfg.radius,
        "n": n_obs_total,
        "n_reflections": int(n_ref),
    }
    logger.info("simulated %d observations (%d reflections)", n_obs_total, n_ref)
    return SimulationResult(ObservationSet(cfg.D, obs[:n_obs]), int(n_ref), meta)


def occupancy_cells(points, cells: int = 20, radius: float = UNIT_AREA_RADIUS) -> np.ndarray:
    """Counts in equal-area cells (rings of equal area split into equal sectors)."""
    n_rings = max(d for d in range(1, int(np.sqrt(cells)) + 1) if cells % d == 0)
    n_sectors = cells // n_rings
    pts = np.asarray(points, dtype=float)
    r2 = np.sum(pts**2, axis=1) / radius**2
    ring = np.minimum((r2 * n_rings).astype(int), n_rings - 1)
    ang = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2.0 * np.pi)
    sector = np.minimum((ang / (2.0 * np.pi) * n_sectors).astype(int), n_sectors - 1)
    return np.bincount(ring * n_sectors + sector, minlength=cells)


def occupancy_check(obs: ObservationSet | np.ndarray, cells: int = 20, radius: float = UNIT_AREA_RADIUS):
    """Chi-square statistic of cell counts against the uniform law, and its p-value."""
    pts = obs.points if isinstance(obs, ObservationSet) else np.asarray(obs)
    if pts.shape[0] < 1000:
        raise InvalidParameterError("occupancy check needs at least 1000 points")
    counts = occupancy_cells(pts, cells, radius)
    expected = pts.shape[0] / cells
    chi2 = float(np.sum((counts - expected) ** 2) / expected)
    return chi2, float(stats.chi2.sf(chi2, cells - 1))


def save_observations(path_csv, path_meta, result: SimulationResult) -> None:
    import json

    obs = result.observations
    t = np.arange(obs.points.shape[0]) * obs.D
    with open(path_csv, "w") as fh:
        fh.write("index,t,x,y\n")
        for i, (ti, p) in enumerate(zip(t, obs.points)):
            fh.write(f"{i},{float(ti)!r},{float(p[0])!r},{float(p[1])!r}\n")
    with open(path_meta, "w") as fh:
        json.dump(result.meta, fh, indent=2, sort_keys=True)


def load_observations(path_csv, D: float | None = None, path_meta=None) -> ObservationSet:
    import json

    data = np.loadtxt(path_csv, delimiter=",", skiprows=1, ndmin=2)
    if D is None:
        if path_meta is not None:
            D = json.load(open(path_meta))["D"]
        elif data.shape[0] > 1:
            D = float(data[1, 1] - data[0, 1])
        else:
            raise InvalidParameterError("time lag unknown for a single observation")
    return ObservationSet(D, data[:, 2:4])
