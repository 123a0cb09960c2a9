"""Parametrix kernel, its singularity profile and Monte Carlo series terms."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import gammaln

from .batch import BATCH_STEPS, forward_gaussian, freeze_batch, gaussian_product
from .flow import LinearizedSystem, linearize
from .gaussian import (TIME_FLOOR, DensityEstimate, density_bound_constant, frozen_density,
                       frozen_gaussian, g_kernel)
from .model import ChainModel, scale
from .streams import BLOCK_SIZE, MCEstimate, block_generator, map_blocks, summarize

MIN_BUDGET = 100
SAMPLERS = ("beta", "uniform")


def _freeze(model: ChainModel, s: float, t: float, y, lin: LinearizedSystem | None):
    if lin is None:
        return linearize(model, t, y, start=s)
    if lin.freeze_time != t or not np.array_equal(lin.freeze_point, np.asarray(y, float)):
        raise ValueError("linearized system is not frozen at (t, y)")
    return lin


def kernel_H(model: ChainModel, s: float, t: float, z, y,
             lin: LinearizedSystem | None = None) -> float:
    """(L - L~^{t,y}) p~^{t,y}(s, t, z, y), differentiating in the start point z."""
    if not s < t:
        raise ValueError(f"kernel_H needs s < t, got s={s}, t={t}")
    lin = _freeze(model, s, t, y, lin)
    z = np.asarray(z, dtype=float)
    _, grad, hess = frozen_gaussian(lin, s, t).derivatives(z, y)
    theta = lin.theta(s)
    J = model.jacobian(s, theta)
    delta = model.drift(s, z) - model.drift(s, theta) - J @ (z - theta)
    da = model.diffusion(s, z) - model.diffusion(s, theta)
    d = model.d
    return float(delta @ grad + 0.5 * np.trace(da @ hess[:d, :d]))


@dataclass(frozen=True)
class ExponentProfile:
    exponent: float
    intercept: float
    taus: np.ndarray
    normalized: np.ndarray
    degenerate: bool
    constant: float

    def to_dict(self) -> dict:
        return {"exponent": self.exponent, "intercept": self.intercept,
                "taus": self.taus.tolist(), "normalized": self.normalized.tolist(),
                "degenerate": self.degenerate, "constant": self.constant}


def kernel_exponent_profile(model: ChainModel, offset, y, time_grid, T: float | None = None,
                            constant: float | None = None) -> ExponentProfile:
    """Slope of log(|H| / g_{C, T-t}(z - θ_{t,T}(y))) against log(T - t).

    The start point sits at a fixed rescaled distance from the transported
    diagonal, z = θ_{t,T}(y) + (T-t)^{-1/2} T_{T-t} ``offset``, so the
    Gaussian factor of g is the same at every grid time and the slope
    isolates the time singularity.  ``constant`` defaults to the fitted
    density bound constant on the same grid.
    """
    taus = np.sort(np.asarray(time_grid, dtype=float))
    if taus[0] <= 0.0:
        raise ValueError("time grid must be positive")
    T = model.horizon if T is None else float(T)
    y = np.asarray(y, dtype=float)
    offset = np.broadcast_to(np.asarray(offset, dtype=float), (model.dim,))
    lin = linearize(model, T, y, start=T - taus[-1])
    points = []
    for tau in taus:
        t = T - tau
        theta = lin.theta(t)
        z = theta + scale(tau, model.n, model.d).apply(offset) / math.sqrt(tau)
        points.append((t, z, theta))
    if constant is None:
        constant = density_bound_constant(lin, [(t, z) for t, z, _ in points])
    vals = np.empty(len(taus))
    for i, (tau, (t, z, theta)) in enumerate(zip(taus, points)):
        H = kernel_H(model, t, T, z, y, lin=lin)
        vals[i] = abs(H) / float(g_kernel(constant, tau, z - theta, model.n, model.d))
    good = vals > 0.0
    if good.sum() < 2:
        return ExponentProfile(math.nan, math.nan, taus, vals, True, float(constant))
    slope, intercept = np.polyfit(np.log(taus[good]), np.log(vals[good]), 1)
    return ExponentProfile(float(slope), float(intercept), taus, vals, False, float(constant))


def _simplex_times(rng: np.random.Generator, m: int, s: float, t: float, k: int,
                   eta: float, sampler: str) -> tuple[np.ndarray, np.ndarray]:
    """Ordered times s < u_1 < ... < u_k < t and the log importance weight.

    ``uniform`` draws uniformly on the simplex.  ``beta`` draws the gaps
    (u_1 - s, u_2 - u_1, ..., t - u_k) from Dirichlet(1, η/2, ..., η/2),
    which matches the (u_{j+1} - u_j)^{η/2 - 1} singularity of each kernel
    factor.  Rows with a gap below the time floor are redrawn.
    """
    L = t - s
    if sampler == "uniform":
        alpha = np.ones(k + 1)
    elif sampler == "beta":
        alpha = np.concatenate([[1.0], np.full(k, eta / 2.0)])
    else:
        raise ValueError(f"unknown time sampler {sampler!r}; expected one of {SAMPLERS}")
    gaps = rng.dirichlet(alpha, size=m)
    while True:
        bad = np.any(gaps * L < TIME_FLOOR, axis=1)
        if not bad.any():
            break
        gaps[bad] = rng.dirichlet(alpha, size=int(bad.sum()))
    u = s + L * np.cumsum(gaps[:, :k], axis=1)
    log_f = gammaln(alpha.sum()) - gammaln(alpha).sum() + np.sum((alpha - 1.0) * np.log(gaps), axis=1)
    return u, k * math.log(L) - log_f


def convolve_chain(model: ChainModel, s: float, t: float, x, y, k: int, budget: int, seed: int,
                   sampler: str = "beta", threads: int | None = None,
                   steps: int = BATCH_STEPS) -> MCEstimate:
    """Unbiased Monte Carlo estimate of (p~ ⊗ H^{⊗k})(s, t, x, y).

    Intermediate points are drawn backwards from y: w_j comes from the
    normalized product of the forward Gaussian of (s, x) at time u_j and the
    frozen Gaussian of (u_{j+1}, w_{j+1}) seen as a function of its start
    point.  Each replica's weight is the integrand over the proposal density.
    """
    if k < 1:
        raise ValueError("convolve_chain needs k >= 1")
    if budget < MIN_BUDGET:
        raise ValueError(f"budget must be at least {MIN_BUDGET}")
    if t - s < TIME_FLOOR:
        raise ValueError("t - s is below the time floor")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    D = model.dim

    def block(b: int, m: int) -> np.ndarray:
        rng = block_generator(seed, f"convolve/{k}/{sampler}", b)
        u, logw = _simplex_times(rng, m, s, t, k, model.eta, sampler)
        ratio = np.ones(m)
        w_next = np.broadcast_to(y, (m, D)).copy()
        u_next = np.full(m, t)
        for j in range(k - 1, -1, -1):
            fb = freeze_batch(model, u[:, j], u_next, w_next, steps)
            fwd = forward_gaussian(model, s, x, u[:, j], steps)
            prop = gaussian_product(fwd, fb.start_gaussian())
            w = prop.sample(rng.standard_normal((m, D)))
            logp, r = fb.kernel_ratio(w)
            logw = logw + logp - prop.logpdf(w)
            ratio = ratio * r
            w_next, u_next = w, u[:, j]
        first = freeze_batch(model, s, u_next, w_next, steps)
        logw = logw + first.logpdf(np.broadcast_to(x, (m, D)))
        return np.exp(logw) * ratio

    weights = np.concatenate(map_blocks(block, budget, BLOCK_SIZE, threads))
    return summarize(weights)


@dataclass
class SeriesTerm:
    """One term p~ ⊗ H^{⊗order} of the parametrix series."""

    order: int
    estimator: Callable[[], MCEstimate]
    sample_budget: int
    result: MCEstimate | None = field(default=None, repr=False)

    def evaluate(self) -> MCEstimate:
        if self.result is None:
            self.result = self.estimator()
        return self.result


def series_terms(model: ChainModel, s: float, t: float, x, y, k_max: int, budget: int, seed: int,
                 sampler: str = "beta", threads: int | None = None) -> list[SeriesTerm]:
    if k_max < 0:
        raise ValueError("k_max must be non-negative")

    def zeroth() -> MCEstimate:
        lin = linearize(model, t, y, start=s)
        return MCEstimate(frozen_density(lin, s, t, x, y).value, 0.0)

    terms = [SeriesTerm(0, zeroth, 0)]
    for k in range(1, k_max + 1):
        terms.append(SeriesTerm(
            k, lambda k=k: convolve_chain(model, s, t, x, y, k, budget, seed, sampler, threads),
            budget))
    return terms


def series_partial_sum(model: ChainModel, s: float, t: float, x, y, k_max: int = 2,
                       budget: int = 100_000, seed: int = 0, sampler: str = "beta",
                       threads: int | None = None) -> DensityEstimate:
    """Frozen density plus the first ``k_max`` convolution corrections."""
    terms = series_terms(model, s, t, x, y, k_max, budget, seed, sampler, threads)
    results = [term.evaluate() for term in terms]
    value = math.fsum(r.value for r in results)
    stderr = math.sqrt(math.fsum(r.stderr ** 2 for r in results))
    return DensityEstimate(value, stderr, f"parametrix({k_max})")


def beta_tail_bound(k: int, eta: float, dt: float, C: float) -> float:
    """C^{k+1} dt^{kη/2} ∏_{i=1}^{k+1} B(1 + (i-1)η/2, η/2); the zeroth term is C."""
    if not 0.0 < eta <= 1.0:
        raise ValueError("eta must lie in (0, 1]")
    if dt <= 0.0 or C < 1.0 or k < 0:
        raise ValueError("need dt > 0, C >= 1 and k >= 0")
    if k == 0:
        return float(C)
    i = np.arange(1, k + 2)
    a = 1.0 + (i - 1) * eta / 2.0
    b = eta / 2.0
    log_beta = gammaln(a) + gammaln(b) - gammaln(a + b)
    return float(math.exp((k + 1) * math.log(C) + k * eta / 2.0 * math.log(dt) + log_beta.sum()))


def green_remainder(model: ChainModel, h: Callable, s: float, x, eps: float, T: float,
                    budget: int, seed: int, sampler: str = "beta",
                    threads: int | None = None, steps: int = BATCH_STEPS) -> MCEstimate:
    """I_2^ε = ∫_s^T dt ∫ dy H(s, t + ε, x, y) h(t, y).

    ``h(t, y)`` takes times of shape (B,) and points of shape (B, nd).  The
    gap r = t - s is uniform on (0, T - s) or, with ``beta``, drawn from
    Beta(η/2, 1) scaled to (0, T - s); y is drawn from the forward Gaussian
    of (s, x) at time t + ε with covariance inflated by 4.
    """
    if budget < MIN_BUDGET:
        raise ValueError(f"budget must be at least {MIN_BUDGET}")
    if not T > s:
        raise ValueError("need s < T")
    if eps < 0.0:
        raise ValueError("eps must be non-negative")
    if sampler not in SAMPLERS:
        raise ValueError(f"unknown time sampler {sampler!r}")
    x = np.asarray(x, dtype=float)
    D = model.dim
    L = T - s
    a = model.eta / 2.0 if sampler == "beta" else 1.0

    def block(b: int, m: int) -> np.ndarray:
        rng = block_generator(seed, f"green/{sampler}", b)
        r = np.empty(m)
        todo = np.ones(m, dtype=bool)
        while todo.any():
            r[todo] = L * rng.random(int(todo.sum())) ** (1.0 / a)
            todo = r + eps < TIME_FLOOR
        t = s + r
        log_q_t = math.log(a) + (a - 1.0) * np.log(r / L) - math.log(L)
        prop = forward_gaussian(model, s, x, t + eps, steps).inflate(4.0)
        yb = prop.sample(rng.standard_normal((m, D)))
        fb = freeze_batch(model, s, t + eps, yb, steps)
        H = fb.kernel(np.broadcast_to(x, (m, D)))
        hv = np.asarray(h(t, yb), dtype=float)
        return H * hv * np.exp(-log_q_t - prop.logpdf(yb))

    return summarize(np.concatenate(map_blocks(block, budget, BLOCK_SIZE, threads)))


def semigroup_check(model: ChainModel, s: float, t: float, eps: float, x, y, budget: int,
                    seed: int, threads: int | None = None) -> tuple[MCEstimate, float]:
    """Monte Carlo ∫ p~(s, t, x, z) p~(t, t + ε, z, y) dz against p~(s, t + ε, x, y).

    All three densities are frozen at (t + ε, y).  z is drawn from the first
    factor, so the weights are values of the second.  Returns the estimate
    and the direct density.
    """
    if budget < MIN_BUDGET:
        raise ValueError(f"budget must be at least {MIN_BUDGET}")
    if not (t - s >= TIME_FLOOR and eps >= TIME_FLOOR):
        raise ValueError("need s < t and eps > 0")
    x = np.asarray(x, dtype=float)
    lin = linearize(model, t + eps, y, start=s)
    first = frozen_gaussian(lin, s, t)
    second = frozen_gaussian(lin, t, t + eps)
    direct = frozen_density(lin, s, t + eps, x, y).value
    cov = first.cov
    m0 = first.mean(x)

    def block(b: int, m: int) -> np.ndarray:
        rng = block_generator(seed, "semigroup", b)
        zeta = rng.standard_normal((m, model.dim))
        z = m0 + (zeta @ cov.chol_hat.T) / cov.rescale
        return np.exp(second.logpdf(z, y))

    est = summarize(np.concatenate(map_blocks(block, budget, BLOCK_SIZE, threads)))
    return est, direct
