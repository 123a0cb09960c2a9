"""Vectorized frozen Gaussians for Monte Carlo estimators.

Every sample carries its own time interval and freeze point.  The
reference trajectory, resolvent, covariance and affine shift are obtained
together from one backward RK4 sweep of the joint system

    θ' = F(u, θ),  Φ' = -Φ DF,  K' = -Φ B a B^* Φ^*,  c' = -Φ (F - DF θ)

started from (y, I, 0, 0) at the freeze time, so that at the start time
Φ = R~(T, s), K = K(s, T) and the frozen mean of a start point x is Φ x + c.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flow import rk4
from .gaussian import TIME_FLOOR, SingularCovarianceError
from .model import ChainModel

BATCH_STEPS = 24
_LOG_2PI = math.log(2.0 * math.pi)


def block_levels(n: int, d: int) -> np.ndarray:
    return np.repeat(np.arange(1, n + 1, dtype=float), d)


def rescale_batch(tau: np.ndarray, n: int, d: int) -> np.ndarray:
    """Per-sample diagonal of tau^{1/2} T_tau^{-1}, shape (B, nd)."""
    tau = np.asarray(tau, dtype=float)[..., None]
    return np.sqrt(tau) * tau ** (-block_levels(n, d))


def _mv(A: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", A, v)


def _cholesky(M: np.ndarray) -> np.ndarray:
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError(float(np.min(np.linalg.eigvalsh(M)))) from None


@dataclass(frozen=True)
class BatchGaussian:
    """Per-sample Gaussians N(mean, diag(r)^{-1} S S^* diag(r)^{-1}), r = rescale(tau)."""

    mean: np.ndarray
    tau: np.ndarray
    S: np.ndarray
    n: int
    d: int

    @property
    def rescale(self) -> np.ndarray:
        return rescale_batch(self.tau, self.n, self.d)

    def logdet_cov(self) -> np.ndarray:
        _, ld = np.linalg.slogdet(self.S)
        return 2.0 * ld - 2.0 * np.sum(np.log(self.rescale), axis=-1)

    def logpdf(self, z) -> np.ndarray:
        v = self.rescale * (np.asarray(z, dtype=float) - self.mean)
        w = np.linalg.solve(self.S, v[..., None])[..., 0]
        D = self.mean.shape[-1]
        return -0.5 * (np.sum(w * w, axis=-1) + D * _LOG_2PI + self.logdet_cov())

    def sample(self, zeta: np.ndarray) -> np.ndarray:
        return self.mean + _mv(self.S, zeta) / self.rescale

    def inflate(self, factor: float) -> "BatchGaussian":
        return BatchGaussian(self.mean, self.tau, self.S * math.sqrt(factor), self.n, self.d)


def gaussian_product(a: BatchGaussian, b: BatchGaussian) -> BatchGaussian:
    """Normalized product of two Gaussian densities, sample by sample.

    Precisions are combined in the coordinates of the shorter time scale,
    where both factors stay well conditioned.
    """
    tau = np.minimum(a.tau, b.tau)
    r = rescale_batch(tau, a.n, a.d)

    def precision(g: BatchGaussian) -> np.ndarray:
        ratio = g.rescale / r  # maps common coordinates to g's scaled coordinates
        M = np.linalg.solve(g.S, np.eye(g.S.shape[-1]) * ratio[..., None, :])
        return np.swapaxes(M, -1, -2) @ M

    Pa, Pb = precision(a), precision(b)
    P = Pa + Pb
    ma, mb = r * a.mean, r * b.mean
    mean = mb + np.linalg.solve(P, _mv(Pa, ma - mb)[..., None])[..., 0]
    L = _cholesky(P)
    S = np.swapaxes(np.linalg.inv(L), -1, -2)
    return BatchGaussian(mean / r, tau, S, a.n, a.d)


@dataclass(frozen=True)
class FrozenBatch:
    """Frozen transitions p~^{T_b, y_b}(s_b, T_b, ., y_b) for a batch of samples."""

    model: ChainModel
    s: np.ndarray
    T: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    shift: np.ndarray
    k_hat: np.ndarray
    chol_hat: np.ndarray

    @property
    def tau(self) -> np.ndarray:
        return self.T - self.s

    @property
    def rescale(self) -> np.ndarray:
        return rescale_batch(self.tau, self.model.n, self.model.d)

    def mean(self, x) -> np.ndarray:
        return _mv(self.phi, np.asarray(x, dtype=float)) + self.shift

    def logdet(self) -> np.ndarray:
        diag = np.diagonal(self.chol_hat, axis1=-2, axis2=-1)
        return 2.0 * np.sum(np.log(diag), axis=-1) - 2.0 * np.sum(np.log(self.rescale), axis=-1)

    def logpdf(self, x) -> np.ndarray:
        """log p~(s, T, x, y) for start points x, shape (B,)."""
        xi = self.rescale * (self.mean(x) - self.y)
        w = np.linalg.solve(self.chol_hat, xi[..., None])[..., 0]
        D = self.y.shape[-1]
        return -0.5 * (np.sum(w * w, axis=-1) + D * _LOG_2PI + self.logdet())

    def start_gaussian(self) -> BatchGaussian:
        """p~ as a function of the start point, normalized (det Φ = 1)."""
        r = self.rescale
        psi = r[..., :, None] * self.phi / r[..., None, :]
        centre = np.linalg.solve(self.phi, (self.y - self.shift)[..., None])[..., 0]
        S = np.linalg.solve(psi, self.chol_hat)
        return BatchGaussian(centre, self.tau, S, self.model.n, self.model.d)

    def kernel_ratio(self, x) -> tuple[np.ndarray, np.ndarray]:
        """(log p~, H / p~) at start points x, with H the parametrix kernel."""
        m = self.model
        d = m.d
        x = np.asarray(x, dtype=float)
        r = self.rescale
        xi = r * (self.mean(x) - self.y)
        psi = r[..., :, None] * self.phi / r[..., None, :]
        rhs = np.concatenate([xi[..., None], psi[..., :d]], axis=-1)
        sol = np.linalg.solve(self.k_hat, rhs)
        w, kp = sol[..., 0], sol[..., 1:]
        G = _mv(np.swapaxes(psi, -1, -2), w)
        grad = -r * G
        Gd = G[..., :d] * r[..., :d]
        hess = (Gd[..., :, None] * Gd[..., None, :]
                - r[..., :d, None] * (np.swapaxes(psi[..., :d], -1, -2) @ kp) * r[..., None, :d])
        F_x = m.drift(self.s, x)
        F_th = m.drift(self.s, self.theta)
        J = m.jacobian(self.s, self.theta)
        delta = F_x - F_th - _mv(J, x - self.theta)
        da = m.diffusion(self.s, x) - m.diffusion(self.s, self.theta)
        ratio = np.sum(delta * grad, axis=-1) + 0.5 * np.einsum("...ij,...ji->...", da, hess)
        return self.logpdf(x), ratio

    def kernel(self, x) -> np.ndarray:
        logp, ratio = self.kernel_ratio(x)
        return np.exp(logp) * ratio


def _broadcast_times(s, T, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    B = y.shape[0]
    s = np.broadcast_to(np.asarray(s, dtype=float), (B,)).copy()
    T = np.broadcast_to(np.asarray(T, dtype=float), (B,)).copy()
    if np.any(T - s < TIME_FLOOR):
        raise ValueError(f"interval shorter than the floor {TIME_FLOOR:g}")
    return s, T


def freeze_batch(model: ChainModel, s, T, y, steps: int = BATCH_STEPS) -> FrozenBatch:
    """Frozen Gaussians with freeze points (T_b, y_b) over [s_b, T_b]."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    s, T = _broadcast_times(s, T, y)
    B, D = y.shape
    d = model.d

    def rhs(u, state):
        th, Phi, _, _ = state
        F = model.drift(u, th)
        J = model.jacobian(u, th)
        a = model.diffusion(u, th)
        P = Phi[..., :d]
        return (F, -Phi @ J, -(P @ a @ np.swapaxes(P, -1, -2)),
                -_mv(Phi, F - _mv(J, th)))

    init = (y, np.broadcast_to(np.eye(D), (B, D, D)), np.zeros((B, D, D)), np.zeros((B, D)))
    th, Phi, K, c = rk4(rhs, T, s, init, steps)
    r = rescale_batch(T - s, model.n, model.d)
    k_hat = r[..., :, None] * K * r[..., None, :]
    k_hat = 0.5 * (k_hat + np.swapaxes(k_hat, -1, -2))
    return FrozenBatch(model, s, T, y, th, Phi, c, k_hat, _cholesky(k_hat))


def forward_gaussian(model: ChainModel, s, x, t, steps: int = BATCH_STEPS) -> BatchGaussian:
    """N(θ_{t,s}(x), K) with K' = DF K + K DF^* + B a B^* along the forward flow."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    B = t.shape[0]
    D = model.dim
    d = model.d
    x = np.broadcast_to(np.asarray(x, dtype=float), (B, D)).copy()
    s_arr, t_arr = _broadcast_times(s, t, x)

    def rhs(u, state):
        th, K = state
        J = model.jacobian(u, th)
        JK = J @ K
        dK = JK + np.swapaxes(JK, -1, -2)
        dK[..., :d, :d] += model.diffusion(u, th)
        return model.drift(u, th), dK

    th, K = rk4(rhs, s_arr, t_arr, (x, np.zeros((B, D, D))), steps)
    r = rescale_batch(t_arr - s_arr, model.n, model.d)
    k_hat = r[..., :, None] * K * r[..., None, :]
    return BatchGaussian(th, t_arr - s_arr, _cholesky(k_hat), model.n, model.d)
