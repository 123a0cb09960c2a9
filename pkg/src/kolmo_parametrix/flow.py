"""Deterministic transport: flows of dθ/dt = F, resolvents and the affine linearized flow."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .model import ChainModel, scale

STEPS_PER_UNIT = 1000
MIN_GRID_STEPS = 16
_SPAN_TOL = 1e-12


class BlowUpError(FloatingPointError):
    """A flow or simulation produced a non-finite state."""


def _expand(h: np.ndarray, arr: np.ndarray) -> np.ndarray:
    return h.reshape(h.shape + (1,) * (arr.ndim - h.ndim))


def rk4(rhs: Callable, t0, t1, state: tuple, steps: int) -> tuple:
    """Classical fixed-step RK4 for a tuple-valued state.

    ``t0`` and ``t1`` may be arrays (one interval per batch member); they must
    broadcast against the leading axes of every state component.
    """
    t0 = np.asarray(t0, dtype=float)
    h = (np.asarray(t1, dtype=float) - t0) / steps
    y = tuple(np.asarray(c, dtype=float) for c in state)
    for k in range(steps):
        t = t0 + k * h
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * h, tuple(c + 0.5 * _expand(h, c) * d for c, d in zip(y, k1)))
        k3 = rhs(t + 0.5 * h, tuple(c + 0.5 * _expand(h, c) * d for c, d in zip(y, k2)))
        k4 = rhs(t + h, tuple(c + _expand(h, c) * d for c, d in zip(y, k3)))
        y = tuple(c + _expand(h, c) / 6.0 * (a + 2.0 * b + 2.0 * e + f)
                  for c, a, b, e, f in zip(y, k1, k2, k3, k4))
        if not all(np.all(np.isfinite(c)) for c in y):
            raise BlowUpError(f"non-finite state after step {k + 1} of {steps}")
    return y


def default_steps(span: float, steps_per_unit: int = STEPS_PER_UNIT) -> int:
    return max(1, int(math.ceil(abs(span) * steps_per_unit - 1e-9)))


def forward_flow(model: ChainModel, s: float, t: float, x, steps: int | None = None) -> np.ndarray:
    """θ_{t,s}(x): solve dθ/du = F(u, θ) from θ_s = x up to time t >= s."""
    if t < s:
        raise ValueError(f"forward flow needs s <= t, got s={s}, t={t}")
    if steps is None:
        steps = default_steps(t - s)
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if t == s:
        return np.array(x, dtype=float)
    (out,) = rk4(lambda u, y: (model.drift(u, y[0]),), s, t, (x,), steps)
    return out


def backward_flow(model: ChainModel, T: float, t: float, y, steps: int | None = None) -> np.ndarray:
    """θ_{t,T}(y) for t <= T, i.e. the same ODE integrated in reversed time."""
    if t > T:
        raise ValueError(f"backward flow needs t <= T, got t={t}, T={T}")
    if steps is None:
        steps = default_steps(T - t)
    if t == T:
        return np.array(y, dtype=float)
    (out,) = rk4(lambda u, z: (model.drift(u, z[0]),), T, t, (y,), steps)
    return out


@dataclass(frozen=True, eq=False)
class LinearizedSystem:
    """Backward reference trajectory θ_{u,T}(y) and the Jacobians along it.

    Built by :func:`linearize`.  ``reference_path[-1]`` is exactly ``y`` and
    ``grid[-1]`` is exactly ``T``.
    """

    model: ChainModel
    freeze_time: float
    freeze_point: np.ndarray
    grid: np.ndarray
    reference_path: np.ndarray
    jacobian_path: np.ndarray
    grid_step: float
    _spline: CubicHermiteSpline = field(repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def span(self) -> tuple[float, float]:
        return float(self.grid[0]), float(self.grid[-1])

    def check_span(self, *times: float) -> None:
        lo, hi = self.span
        for u in times:
            if u < lo - _SPAN_TOL or u > hi + _SPAN_TOL:
                raise ValueError(f"time {u} outside the reference grid [{lo}, {hi}]")

    def theta(self, u) -> np.ndarray:
        """θ_{u,T}(y), cubic Hermite interpolation between grid nodes."""
        u = np.asarray(u, dtype=float)
        out = self._spline(np.clip(u, self.grid[0], self.grid[-1]))
        # grid nodes are returned exactly
        if u.ndim == 0 and u == self.grid[-1]:
            return self.reference_path[-1].copy()
        return out

    def jacobian(self, u) -> np.ndarray:
        return self.model.jacobian(u, self.theta(u))

    def drift(self, u) -> np.ndarray:
        return self.model.drift(u, self.theta(u))

    def diffusion(self, u) -> np.ndarray:
        return self.model.diffusion(u, self.theta(u))

    def n_steps(self, s: float, t: float) -> int:
        return max(1, int(math.ceil(abs(t - s) / self.grid_step - 1e-9)))


def linearize(model: ChainModel, T: float, y, start: float = 0.0,
              steps_per_unit: int = STEPS_PER_UNIT) -> LinearizedSystem:
    """Freeze the dynamics along θ_{·,T}(y) on a uniform grid over [start, T]."""
    y = np.array(y, dtype=float).reshape(model.dim)
    if not start < T:
        raise ValueError(f"need start < T, got start={start}, T={T}")
    steps = max(MIN_GRID_STEPS, default_steps(T - start, steps_per_unit))
    grid = start + (T - start) * np.arange(steps + 1) / steps
    grid[-1] = T
    h = (T - start) / steps
    path = np.empty((steps + 1, model.dim))
    path[-1] = y
    z = y
    for k in range(steps, 0, -1):
        u = grid[k]
        k1 = model.drift(u, z)
        k2 = model.drift(u - 0.5 * h, z - 0.5 * h * k1)
        k3 = model.drift(u - 0.5 * h, z - 0.5 * h * k2)
        k4 = model.drift(u - h, z - h * k3)
        z = z - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        path[k - 1] = z
    if not np.all(np.isfinite(path)):
        raise BlowUpError("reference trajectory blew up")
    slopes = model.drift(grid, path)
    spline = CubicHermiteSpline(grid, path, slopes, axis=0)
    jac = model.jacobian(grid, path)
    return LinearizedSystem(model, float(T), y, grid, path, jac, h, spline)


def _stage_times(s: float, t: float, steps: int) -> tuple[np.ndarray, float]:
    h = (t - s) / steps
    base = s + h * np.arange(steps)
    return np.stack([base, base + 0.5 * h, base + h], axis=1), h


def rk4_affine_steps(J: np.ndarray, b: np.ndarray | None, h: float) -> np.ndarray:
    """Augmented (D+1)x(D+1) maps of RK4 steps for y' = J(u) y + b(u).

    ``J`` has shape (steps, 3, D, D) holding the start, midpoint and end stage
    matrices of every step; ``b`` likewise (steps, 3, D) or None.
    """
    steps, _, D, _ = J.shape
    Y = np.zeros((steps, D, D + 1))
    Y[:, :, :D] = np.eye(D)

    def f(Y, i):
        out = J[:, i] @ Y
        if b is not None:
            out[:, :, D] += b[:, i]
        return out

    k1 = f(Y, 0)
    k2 = f(Y + 0.5 * h * k1, 1)
    k3 = f(Y + 0.5 * h * k2, 1)
    k4 = f(Y + h * k3, 2)
    maps = np.zeros((steps, D + 1, D + 1))
    maps[:, :D] = Y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    maps[:, D, D] = 1.0
    return maps


def compose(maps: np.ndarray) -> np.ndarray:
    """maps[-1] @ ... @ maps[0] by pairwise reduction."""
    while maps.shape[0] > 1:
        m = maps.shape[0]
        paired = maps[1 : m - m % 2 : 2] @ maps[0 : m - m % 2 : 2]
        maps = np.concatenate([paired, maps[m - 1 :]]) if m % 2 else paired
    return maps[0]


def _affine_map(lin: LinearizedSystem, s: float, t: float, inhomogeneous: bool) -> np.ndarray:
    steps = lin.n_steps(s, t)
    times, h = _stage_times(s, t, steps)
    th = lin.theta(times)
    J = lin.model.jacobian(times, th)
    b = None
    if inhomogeneous:
        # φ' = J φ + b with b = F(θ) - J θ
        b = lin.model.drift(times, th) - np.einsum("...ij,...j->...i", J, th)
    return compose(rk4_affine_steps(J, b, h))


def resolvent(lin: LinearizedSystem, s: float, t: float) -> np.ndarray:
    """R(t, s) with ∂_t R(t, s) = DF(t, θ_{t,T}(y)) R(t, s), R(s, s) = I."""
    lin.check_span(s, t)
    D = lin.model.dim
    if s == t:
        return np.eye(D)
    return _affine_map(lin, s, t, False)[:D, :D]


def linearized_flow(lin: LinearizedSystem, s: float, t: float, x) -> np.ndarray:
    """The affine flow of dφ/du = F(u, θ_u) + DF(u, θ_u)(φ - θ_u) from φ_s = x.

    ``x`` may carry leading batch axes.
    """
    lin.check_span(s, t)
    x = np.asarray(x, dtype=float)
    if s == t:
        return x.copy()
    D = lin.model.dim
    A = _affine_map(lin, s, t, True)
    return x @ A[:D, :D].T + A[:D, D]


def flow_equivalence_constant(model: ChainModel, T: float,
                              grid: Iterable[tuple[float, Sequence[float], Sequence[float]]],
                              floor: float = 1e-12) -> float:
    """Empirical two-sided comparison constant between the rescaled transports.

    For each (t, x, y) compares |T_{T-t}^{-1}(x - θ_{t,T}(y))| with
    |T_{T-t}^{-1}(θ~_{T,t}(x) - y)|.  Pairs where both are below ``floor`` are
    skipped; a pair with exactly one side below ``floor`` makes the result +inf.
    """
    worst = 1.0
    for t, x, y in grid:
        if not t < T:
            raise ValueError(f"grid time {t} must be below T={T}")
        lin = linearize(model, T, y, start=t)
        S = scale(T - t, model.n, model.d)
        back = np.linalg.norm(S.apply_inverse(np.asarray(x, float) - lin.reference_path[0]))
        fwd = np.linalg.norm(S.apply_inverse(linearized_flow(lin, t, T, x) - lin.freeze_point))
        if back < floor and fwd < floor:
            continue
        if back < floor or fwd < floor:
            return math.inf
        worst = max(worst, fwd / back, back / fwd)
    return worst
