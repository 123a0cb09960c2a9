"""Degenerate Gaussian machinery for the frozen linear process.

All linear algebra is carried out on the rescaled covariance
K_hat = (t-s) T_{t-s}^{-1} K T_{t-s}^{-1}, whose conditioning does not
degrade as t - s shrinks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .flow import LinearizedSystem, compose, linearized_flow, rk4_affine_steps
from .model import scale, scale_diagonal

TIME_FLOOR = 1e-10
DEFAULT_QUAD_ORDER = 16
_LOG_2PI = math.log(2.0 * math.pi)


class SingularCovarianceError(ValueError):
    def __init__(self, smallest_eigenvalue: float):
        super().__init__(f"covariance is not positive definite "
                         f"(smallest eigenvalue {smallest_eigenvalue:.3e})")
        self.smallest_eigenvalue = smallest_eigenvalue


class DensityEstimate(NamedTuple):
    value: float
    stderr: float
    provenance: str

    def to_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "provenance": self.provenance}


def rescaling(tau: float, n: int, d: int) -> np.ndarray:
    """Diagonal of tau^{1/2} T_tau^{-1}, the map to scale-free coordinates."""
    return math.sqrt(tau) / scale_diagonal(tau, n, d)


@dataclass(frozen=True)
class CovarianceOperator:
    K: np.ndarray
    chol: np.ndarray
    K_hat: np.ndarray
    chol_hat: np.ndarray
    interval: tuple[float, float]
    n: int
    d: int

    @property
    def tau(self) -> float:
        return self.interval[1] - self.interval[0]

    @property
    def rescale(self) -> np.ndarray:
        return rescaling(self.tau, self.n, self.d)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol_hat)))) \
            - 2.0 * float(np.sum(np.log(self.rescale)))

    def whiten(self, u) -> np.ndarray:
        """L_hat^{-1} tau^{1/2} T^{-1} u, so |whiten(u)|^2 = <K^{-1} u, u>."""
        v = np.asarray(u, dtype=float) * self.rescale
        return solve_triangular(self.chol_hat, v.T, lower=True).T

    def quad_form(self, u) -> np.ndarray:
        w = self.whiten(u)
        return np.sum(w * w, axis=-1)

    def eigvals_hat(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.K_hat)


def _factor(K: np.ndarray, tau: float, n: int, d: int, interval) -> CovarianceOperator:
    K = 0.5 * (K + K.T)
    r = rescaling(tau, n, d)
    K_hat = r[:, None] * K * r[None, :]
    K_hat = 0.5 * (K_hat + K_hat.T)
    try:
        L_hat = np.linalg.cholesky(K_hat)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError(float(np.linalg.eigvalsh(K_hat)[0])) from None
    chol = L_hat / r[:, None]
    return CovarianceOperator(K, chol, K_hat, L_hat, interval, n, d)


def _adjoint_at(lin: LinearizedSystem, t: float, nodes_desc: np.ndarray) -> list[np.ndarray]:
    """R(t, u) for each u in ``nodes_desc`` (descending, all <= t).

    Integrates dΦ/du = -Φ DF(u, θ_u), Φ(t) = I, backwards in one pass; the
    transpose obeys the linear ODE with generator -DF^*.
    """
    D = lin.model.dim
    PhiT = np.eye(D)
    out = []
    cur = t
    for u in nodes_desc:
        if u < cur:
            steps = lin.n_steps(u, cur)
            h = (u - cur) / steps
            base = cur + h * np.arange(steps)
            times = np.stack([base, base + 0.5 * h, base + h], axis=1)
            J = -np.swapaxes(lin.jacobian(times), -1, -2)
            PhiT = compose(rk4_affine_steps(J, None, h))[:D, :D] @ PhiT
            cur = u
        out.append(PhiT.T.copy())
    return out


def covariance(lin: LinearizedSystem, s: float, t: float,
               quad_order: int = DEFAULT_QUAD_ORDER) -> CovarianceOperator:
    """K(s, t) = ∫_s^t R(t,u) B a(u, θ_u) B^* R(t,u)^* du by Gauss-Legendre quadrature."""
    if not t > s:
        raise ValueError(f"covariance needs s < t, got s={s}, t={t}")
    lin.check_span(s, t)
    key = ("cov", float(s), float(t), int(quad_order))
    if key in lin._cache:
        return lin._cache[key]
    m = lin.model
    x, w = np.polynomial.legendre.leggauss(quad_order)
    nodes = s + 0.5 * (t - s) * (x + 1.0)
    weights = 0.5 * (t - s) * w
    order = np.argsort(nodes)[::-1]
    Phis = _adjoint_at(lin, t, nodes[order])
    a = lin.diffusion(nodes[order])
    K = np.zeros((m.dim, m.dim))
    for Phi, ak, wk in zip(Phis, a, weights[order]):
        P = Phi[:, : m.d]
        K += wk * (P @ ak @ P.T)
    cov = _factor(K, t - s, m.n, m.d, (float(s), float(t)))
    lin._cache[key] = cov
    return cov


def gsp_constant(cov: CovarianceOperator) -> float:
    """Smallest C >= 1 with C^{-1} <= eig(K_hat) <= C."""
    lam = cov.eigvals_hat()
    if lam[0] <= 0.0:
        raise SingularCovarianceError(float(lam[0]))
    return float(max(lam[-1], 1.0 / lam[0], 1.0))


@dataclass(frozen=True)
class FrozenGaussian:
    """Transition of the frozen linear process from time s to time t.

    The mean is affine in the starting point: ``mean(x) = R x + shift``.
    """

    R: np.ndarray
    shift: np.ndarray
    cov: CovarianceOperator

    def mean(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.R.T + self.shift

    def logpdf(self, x, z) -> np.ndarray:
        r = self.mean(x) - np.asarray(z, dtype=float)
        D = self.R.shape[0]
        return -0.5 * (D * _LOG_2PI + self.cov.logdet() + self.cov.quad_form(r))

    def logpdf_raw(self, x, z) -> float:
        """Same density through the unscaled K; used to check conditioning."""
        r = self.mean(x) - np.asarray(z, dtype=float)
        K = self.cov.K
        sign, logdet = np.linalg.slogdet(K)
        if sign <= 0:
            raise SingularCovarianceError(float(np.linalg.eigvalsh(K)[0]))
        q = float(r @ np.linalg.solve(K, r))
        return -0.5 * (K.shape[0] * _LOG_2PI + logdet + q)

    def derivatives(self, x, z) -> tuple[float, np.ndarray, np.ndarray]:
        """Density, its gradient and full Hessian with respect to the start point."""
        cov = self.cov
        r = cov.rescale
        xi = r * (self.mean(x) - np.asarray(z, dtype=float))
        Kinv_hat = cho_solve((cov.chol_hat, True), np.eye(len(r)))
        w = Kinv_hat @ xi
        Psi = r[:, None] * self.R / r[None, :]
        G = Psi.T @ w
        p = math.exp(float(self.logpdf(x, z)))
        grad = -r * G * p
        hess = r[:, None] * (np.outer(G, G) - Psi.T @ Kinv_hat @ Psi) * r[None, :] * p
        return p, grad, hess


def frozen_gaussian(lin: LinearizedSystem, s: float, t: float,
                    quad_order: int = DEFAULT_QUAD_ORDER) -> FrozenGaussian:
    if t - s < TIME_FLOOR:
        raise ValueError(f"t - s = {t - s:.3e} is below the floor {TIME_FLOOR:g}")
    if t > lin.freeze_time + 1e-12:
        raise ValueError("t must not exceed the freeze time")
    key = ("fg", float(s), float(t), int(quad_order))
    if key in lin._cache:
        return lin._cache[key]
    cov = covariance(lin, s, t, quad_order)
    D = lin.model.dim
    # one pass over the origin and the unit vectors gives the affine map
    images = linearized_flow(lin, s, t, np.vstack([np.zeros(D), np.eye(D)]))
    shift = images[0]
    fg = FrozenGaussian((images[1:] - shift).T, shift, cov)
    lin._cache[key] = fg
    return fg


def frozen_density(lin: LinearizedSystem, s: float, t: float, x, z,
                   quad_order: int = DEFAULT_QUAD_ORDER, rescaled: bool = True) -> DensityEstimate:
    """Density at z, time t, of the frozen process started from x at time s."""
    fg = frozen_gaussian(lin, s, t, quad_order)
    if rescaled:
        value = math.exp(float(fg.logpdf(x, z)))
    else:
        value = math.exp(fg.logpdf_raw(x, z))
    return DensityEstimate(value, 0.0, "closed-form")


def frozen_density_derivatives(lin: LinearizedSystem, s: float, t: float, x, z,
                               quad_order: int = DEFAULT_QUAD_ORDER) -> tuple[np.ndarray, np.ndarray]:
    """Gradient and first d x d Hessian block, both with respect to the start point x."""
    fg = frozen_gaussian(lin, s, t, quad_order)
    _, grad, hess = fg.derivatives(x, z)
    d = lin.model.d
    return grad, hess[:d, :d]


def g_kernel(a: float, tau: float, v, n: int, d: int) -> np.ndarray:
    """tau^{-n^2 d/2} exp(-a^{-1} tau |T_tau^{-1} v|^2)."""
    q = scale(tau, n, d).rescaled_sq_norm(v)
    return tau ** (-n * n * d / 2.0) * np.exp(-q / a)


def _smallest_feasible(feasible, lo: float = 1e-12, hi: float = 1e12, rtol: float = 1e-12) -> float:
    """Smallest C in [lo, hi] with ``feasible(C)`` for a monotone predicate."""
    if feasible(lo):
        return lo
    if not feasible(hi):
        return math.inf
    a, b = math.log(lo), math.log(hi)
    while b - a > rtol:
        mid = 0.5 * (a + b)
        if feasible(math.exp(mid)):
            b = mid
        else:
            a = mid
    return math.exp(b)


def density_bound_constant(lin: LinearizedSystem,
                           grid: Iterable[tuple[float, Sequence[float]]]) -> float:
    """Smallest C with p~(t, T, x, y) <= C g_{C, T-t}(x - θ_{t,T}(y)) over the grid.

    The right-hand side increases with C, so each grid point is solved by
    bisection and the maximum is returned.
    """
    m = lin.model
    T, y = lin.freeze_time, lin.freeze_point
    worst = 0.0
    for t, x in grid:
        if not t < T:
            raise ValueError(f"grid time {t} must be below the freeze time {T}")
        tau = T - t
        logp = float(frozen_gaussian(lin, t, T).logpdf(x, y))
        q = float(scale(tau, m.n, m.d).rescaled_sq_norm(np.asarray(x, float) - lin.theta(t)))
        pre = -0.5 * m.n * m.n * m.d * math.log(tau)

        def ok(C, logp=logp, q=q, pre=pre):
            return math.log(C) + pre - q / C >= logp

        worst = max(worst, _smallest_feasible(ok))
    return worst
