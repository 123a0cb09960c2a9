"""Chain SDE models, the intrinsic scale matrix and sampled assumption checks.

A chain model is the system

    dX^1 = F_1(t, X^1..X^n) dt + sigma(t, X) dW
    dX^i = F_i(t, X^{i-1}..X^n) dt,   i = 2..n

with every block X^i in R^d.  States are passed around flattened, shape
``(..., n*d)``; coefficient callables receive them reshaped to ``(..., n, d)``.

Coefficient callables must be vectorized: ``F_i(t, x)`` maps ``x`` of shape
``(..., n, d)`` to ``(..., d)`` and ``sigma(t, x)`` maps it to ``(..., d, d)``.
``t`` is a float or an array broadcastable against ``x.shape[:-2]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

Drift = Callable[[Any, np.ndarray], np.ndarray]
Diffusion = Callable[[Any, np.ndarray], np.ndarray]

ND_THRESHOLD = 1e-6
_STRUCTURE_PROBES = 8


def _time_for(t, x_blocks: np.ndarray):
    """Broadcast ``t`` so that it lines up with the leading axes of ``x_blocks``."""
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return t
    extra = x_blocks.ndim - 2 - t.ndim
    return t.reshape(t.shape + (1,) * max(extra, 0))


@dataclass(frozen=True, eq=False)
class ChainModel:
    """Coefficients and dimensions of a chain SDE.

    ``jacobians`` optionally holds analytic ``D_{x_{i-1}} F_i`` for i = 2..n
    (so ``len(jacobians) == n - 1``); missing entries fall back to central
    finite differences.
    """

    n: int
    d: int
    drifts: tuple[Drift, ...]
    sigma: Diffusion
    eta: float = 1.0
    horizon: float = 1.0
    jacobians: tuple[Drift | None, ...] | None = None
    name: str = "custom"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError(f"need n >= 1 and d >= 1, got n={self.n}, d={self.d}")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if not self.horizon > 0.0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if len(self.drifts) != self.n:
            raise ValueError(f"expected {self.n} drift maps, got {len(self.drifts)}")
        if self.jacobians is not None and len(self.jacobians) != self.n - 1:
            raise ValueError("jacobians must have one entry per level i = 2..n")
        object.__setattr__(self, "drifts", tuple(self.drifts))
        check_structure(self)

    @property
    def dim(self) -> int:
        return self.n * self.d

    def blocks(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x.reshape(x.shape[:-1] + (self.n, self.d))

    def drift(self, t, x) -> np.ndarray:
        """Full drift F(t, x), shape ``(..., n*d)``."""
        xb = self.blocks(x)
        tb = _time_for(t, xb)
        shape = xb.shape[:-2] + (self.d,)
        out = []
        for F in self.drifts:
            f = np.asarray(F(tb, xb), dtype=float)
            out.append(f if f.shape == shape else np.broadcast_to(f, shape))
        return np.concatenate(out, axis=-1)

    def sigma_matrix(self, t, x) -> np.ndarray:
        xb = self.blocks(x)
        s = np.asarray(self.sigma(_time_for(t, xb), xb), dtype=float)
        return np.broadcast_to(s, xb.shape[:-2] + (self.d, self.d))

    def diffusion(self, t, x) -> np.ndarray:
        """a = sigma sigma^*, shape ``(..., d, d)``."""
        s = self.sigma_matrix(t, x)
        return s @ np.swapaxes(s, -1, -2)

    def jacobian(self, t, x) -> np.ndarray:
        """Subdiagonal drift Jacobian, see :func:`drift_jacobian`."""
        return drift_jacobian(self, t, x)

    def describe(self) -> dict:
        return {"preset": self.name, "params": dict(self.params), "eta": self.eta,
                "horizon": self.horizon, "n": self.n, "d": self.d}


def check_structure(model: ChainModel, seed: int = 0) -> None:
    """Probe that F_i (i >= 2) ignores the blocks x_1 .. x_{i-2}.

    Raises ``ValueError`` when a perturbation of a forbidden block changes the
    output of F_i.
    """
    n, d = model.n, model.d
    if n < 3:
        return
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(_STRUCTURE_PROBES, n, d))
    t = rng.uniform(0.0, model.horizon, size=_STRUCTURE_PROBES)
    for i in range(3, n + 1):
        F = model.drifts[i - 1]
        base = np.asarray(F(t, x), dtype=float)
        moved = x.copy()
        moved[:, : i - 2, :] += rng.normal(scale=3.0, size=(_STRUCTURE_PROBES, i - 2, d))
        probe = np.asarray(F(t, moved), dtype=float)
        if not np.array_equal(base, probe):
            raise ValueError(f"F_{i} depends on blocks x_1..x_{i - 2}")


def drift_jacobian(model: ChainModel, t, x) -> np.ndarray:
    """Subdiagonal part of the drift Jacobian.

    Only blocks (i, i-1), i = 2..n, are filled, each with D_{x_{i-1}} F_i(t, x).
    Analytic Jacobians are used when the model provides them; otherwise
    central differences with step ``1e-6 * max(1, |x_{i-1}|)``.
    """
    n, d = model.n, model.d
    xb = model.blocks(x)
    lead = xb.shape[:-2]
    tb = _time_for(t, xb)
    J = np.zeros(lead + (n * d, n * d))
    for i in range(2, n + 1):
        analytic = model.jacobians[i - 2] if model.jacobians is not None else None
        if analytic is not None:
            block = np.broadcast_to(np.asarray(analytic(tb, xb), dtype=float), lead + (d, d))
        else:
            block = _fd_block(model.drifts[i - 1], tb, xb, i - 2)
        if not np.all(np.isfinite(block)):
            raise FloatingPointError(f"non-finite Jacobian of F_{i}")
        J[..., (i - 1) * d : i * d, (i - 2) * d : (i - 1) * d] = block
    return J


def _fd_block(F: Drift, t, xb: np.ndarray, j: int) -> np.ndarray:
    d = xb.shape[-1]
    h = 1e-6 * np.maximum(1.0, np.linalg.norm(xb[..., j, :], axis=-1))
    cols = []
    for c in range(d):
        plus = xb.copy()
        minus = xb.copy()
        plus[..., j, c] += h
        minus[..., j, c] -= h
        diff = np.asarray(F(t, plus), dtype=float) - np.asarray(F(t, minus), dtype=float)
        cols.append(diff / (2.0 * h)[..., None])
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# scale matrix


@dataclass(frozen=True)
class TimeScaler:
    """The block-diagonal matrix diag(t^i I_d), i = 1..n."""

    t: float
    n: int
    d: int

    def __post_init__(self):
        if not self.t > 0.0:
            raise ValueError(f"scale time must be positive, got {self.t}")

    @property
    def diagonal(self) -> np.ndarray:
        return np.repeat(self.t ** np.arange(1, self.n + 1, dtype=float), self.d)

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.diagonal)

    def apply(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) * self.diagonal

    def apply_inverse(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) / self.diagonal

    def rescaled_sq_norm(self, v) -> np.ndarray:
        """t |T_t^{-1} v|^2: block i is weighted by t^{1-2i}."""
        w = self.apply_inverse(v)
        return self.t * np.sum(w * w, axis=-1)


def scale(t: float, n: int, d: int) -> TimeScaler:
    return TimeScaler(float(t), int(n), int(d))


def scale_diagonal(t, n: int, d: int) -> np.ndarray:
    """Diagonal of T_t for an array of times; shape ``t.shape + (n*d,)``."""
    t = np.asarray(t, dtype=float)
    powers = np.repeat(np.arange(1, n + 1, dtype=float), d)
    return t[..., None] ** powers


# ---------------------------------------------------------------------------
# presets


def _kolmogorov_chain(p: Mapping[str, Any]):
    n = int(p.get("n", 2))
    d = int(p.get("d", 1))
    sig = float(p.get("sigma", 1.0))
    eye = np.eye(d)

    def first(t, x):
        return np.zeros(x.shape[:-2] + (d,))

    drifts = [first] + [(lambda t, x, j=i - 2: x[..., j, :]) for i in range(2, n + 1)]
    jac = [(lambda t, x: eye) for _ in range(2, n + 1)]
    return dict(n=n, d=d, drifts=drifts, sigma=lambda t, x: sig * eye, jacobians=jac)


def _elliptic(p: Mapping[str, Any], eta: float):
    d = int(p.get("d", 1))
    sig = float(p.get("sigma", 1.0))
    amp = float(p.get("amp", 0.0))
    center = np.broadcast_to(np.asarray(p.get("center", 0.0), dtype=float), (d,))
    eye = np.eye(d)

    def sigma(t, x):
        r = np.linalg.norm(x[..., 0, :] - center, axis=-1)
        level = sig * np.sqrt(1.0 + amp * np.minimum(r, 1.0) ** eta)
        return level[..., None, None] * eye

    def drift(t, x):
        return np.zeros(x.shape[:-2] + (d,))

    return dict(n=1, d=d, drifts=[drift], sigma=sigma, jacobians=[])


def _langevin(p: Mapping[str, Any]):
    d = int(p.get("d", 1))
    gamma = float(p.get("gamma", 1.0))
    omega = float(p.get("omega", 1.0))
    beta = float(p.get("beta", 0.0))
    sig = float(p.get("sigma", 1.0))
    eye = np.eye(d)

    def velocity(t, x):
        v, q = x[..., 0, :], x[..., 1, :]
        return -gamma * v - (omega**2 * q - beta * np.sin(q))

    def position(t, x):
        return x[..., 0, :]

    return dict(n=2, d=d, drifts=[velocity, position], sigma=lambda t, x: sig * eye,
                jacobians=[lambda t, x: eye])


def _perturbed_chain(p: Mapping[str, Any], eta: float):
    n = int(p.get("n", 2))
    d = int(p.get("d", 1))
    sig = float(p.get("sigma", 1.0))
    amp = float(p.get("amp", 0.1))
    drift_amp = float(p.get("drift_amp", 0.1))
    holder_amp = float(p.get("holder_amp", 0.0))
    if abs(drift_amp) >= 1.0:
        raise ValueError("drift_amp must be below 1 to keep D_{x_{i-1}} F_i invertible")
    eye = np.eye(d)

    def first(t, x):
        return np.zeros(x.shape[:-2] + (d,))

    def link(t, x, j):
        u = x[..., j, :]
        return u + drift_amp * np.sin(u)

    def link_jac(t, x, j):
        c = 1.0 + drift_amp * np.cos(x[..., j, :])
        return c[..., :, None] * eye

    def sigma(t, x):
        sq = np.sum(x * x, axis=(-2, -1))
        level = 1.0 + amp / (1.0 + sq)
        if holder_amp:
            r = np.linalg.norm(x[..., 0, :], axis=-1)
            level = level + holder_amp * np.minimum(r, 1.0) ** eta
        return (sig * np.sqrt(level))[..., None, None] * eye

    drifts = [first] + [(lambda t, x, j=i - 2: link(t, x, j)) for i in range(2, n + 1)]
    jac = [(lambda t, x, j=i - 2: link_jac(t, x, j)) for i in range(2, n + 1)]
    return dict(n=n, d=d, drifts=drifts, sigma=sigma, jacobians=jac)


PresetFactory = Callable[[Mapping[str, Any], float], dict]

_PRESETS: dict[str, PresetFactory] = {
    "kolmogorov-chain": lambda p, eta: _kolmogorov_chain(p),
    "elliptic": _elliptic,
    "langevin": lambda p, eta: _langevin(p),
    "perturbed-chain": _perturbed_chain,
}


def register_preset(name: str, factory: PresetFactory) -> None:
    """Register user coefficients.

    ``factory(params, eta)`` returns the keyword arguments of
    :class:`ChainModel` other than ``eta``, ``horizon``, ``name``, ``params``.
    """
    _PRESETS[name] = factory


def available_presets() -> list[str]:
    return sorted(_PRESETS)


def build_model(preset: str, params: Mapping[str, Any] | None = None, *,
                eta: float | None = None, horizon: float | None = None) -> ChainModel:
    """Instantiate a registered preset.

    ``eta`` and ``horizon`` may be passed as keywords or inside ``params``.
    """
    params = dict(params or {})
    if preset not in _PRESETS:
        raise ValueError(f"unknown preset {preset!r}; known: {', '.join(available_presets())}")
    eta_p, horizon_p = params.pop("eta", None), params.pop("horizon", None)
    eta = float(eta if eta is not None else (eta_p if eta_p is not None else 1.0))
    horizon = float(horizon if horizon is not None else (horizon_p if horizon_p is not None else 1.0))
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    if "n" in params and int(params["n"]) < 1:
        raise ValueError("n must be at least 1")
    spec = _PRESETS[preset](params, eta)
    return ChainModel(eta=eta, horizon=horizon, name=preset, params=params, **spec)


def model_from_config(cfg: Mapping[str, Any]) -> ChainModel:
    """Build from ``{"preset": ..., "params": {...}, "eta": ..., "horizon": ...}``."""
    if "preset" not in cfg:
        raise ValueError("model config needs a 'preset' entry")
    return build_model(cfg["preset"], cfg.get("params", {}),
                       eta=cfg.get("eta"), horizon=cfg.get("horizon"))


def load_model(path) -> ChainModel:
    with open(path) as fh:
        return model_from_config(json.load(fh))


# ---------------------------------------------------------------------------
# assumption checks


@dataclass(frozen=True)
class AssumptionReport:
    lipschitz_estimate: tuple[float, ...]
    holder_estimate: float
    uniform_ellipticity: tuple[float, float]
    nd_min_singular: tuple[float, ...]
    passed: dict[str, bool]

    @property
    def ellipticity_constant(self) -> float:
        lo, hi = self.uniform_ellipticity
        if lo <= 0.0:
            return math.inf
        return max(hi, 1.0 / lo, 1.0)

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def to_dict(self) -> dict:
        return {
            "lipschitz_estimate": list(self.lipschitz_estimate),
            "holder_estimate": self.holder_estimate,
            "uniform_ellipticity": list(self.uniform_ellipticity),
            "ellipticity_constant": self.ellipticity_constant,
            "nd_min_singular": list(self.nd_min_singular),
            "pass": dict(self.passed),
        }


def validate_assumptions(model: ChainModel, budget: int = 1000, seed: int = 0,
                         nd_threshold: float = ND_THRESHOLD,
                         spread: float = 2.0) -> AssumptionReport:
    """Estimate Lipschitz/Hoelder/ellipticity/non-degeneracy constants by sampling.

    Pairs (x, y) have |x - y| log-uniform in [1e-3, 10]. The origin is always
    part of the sample so that coefficients degenerating there are caught.
    Failures are reported through ``passed``, never raised.
    """
    if budget < 100:
        raise ValueError("budget must be at least 100")
    rng = np.random.default_rng(seed)
    D = model.dim
    t = rng.uniform(0.0, model.horizon, size=budget)
    x = rng.normal(scale=spread, size=(budget, D))
    x[0] = 0.0
    direction = rng.normal(size=(budget, D))
    direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    dist = 10.0 ** rng.uniform(-3.0, 1.0, size=budget)
    y = x + dist[:, None] * direction

    with np.errstate(all="ignore"):
        fx = model.drift(t, x)
        fy = model.drift(t, y)
        lips = []
        for i in range(model.n):
            sl = slice(i * model.d, (i + 1) * model.d)
            lips.append(float(np.max(np.linalg.norm(fx[:, sl] - fy[:, sl], axis=-1) / dist)))

        ax = model.diffusion(t, x)
        ay = model.diffusion(t, y)
        holder = float(np.max(np.linalg.norm(ax - ay, ord=2, axis=(-2, -1)) / dist**model.eta))
        eig = np.linalg.eigvalsh(0.5 * (ax + np.swapaxes(ax, -1, -2)))
        lam_min, lam_max = float(eig[:, 0].min()), float(eig[:, -1].max())

        nd = []
        if model.n > 1:
            J = drift_jacobian(model, t, x)
            d = model.d
            for i in range(2, model.n + 1):
                block = J[:, (i - 1) * d : i * d, (i - 2) * d : (i - 1) * d]
                nd.append(float(np.linalg.svd(block, compute_uv=False)[:, -1].min()))

    finite = all(math.isfinite(v) for v in lips) and math.isfinite(holder)
    passed = {
        "R-eta": bool(finite),
        "UE": bool(lam_min > 0.0 and math.isfinite(lam_max)),
        "ND-eta": bool(all(v > nd_threshold for v in nd)),
    }
    return AssumptionReport(tuple(lips), holder, (lam_min, lam_max), tuple(nd), passed)


def embedding(n: int, d: int) -> np.ndarray:
    """B = (I_d, 0, ..., 0)^*."""
    B = np.zeros((n * d, d))
    B[:d, :d] = np.eye(d)
    return B
