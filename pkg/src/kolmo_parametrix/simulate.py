"""Monte Carlo oracle: Euler paths, rescaled KDE, mollified models and Ξ^ε."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .batch import BATCH_STEPS, forward_gaussian, freeze_batch, rescale_batch
from .flow import BlowUpError, forward_flow
from .gaussian import DensityEstimate, _smallest_feasible
from .model import ChainModel, _time_for, scale
from .streams import (BLOCK_SIZE, MCEstimate, block_generator, map_blocks, summarize, tag_id)

BOOTSTRAP_RESAMPLES = 200
STENCIL_POINTS = 16
XI_INFLATION = 4.0
MIN_BUDGET = 100
_MAGIC = b"KPEN"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIQddQ")


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    terminal_states: np.ndarray
    s: float
    t: float
    n_steps: int
    seed: int
    n: int
    d: int

    @property
    def budget(self) -> int:
        return self.terminal_states.shape[0]

    def save(self, path) -> None:
        """Write the flat little-endian binary format (header then row-major values)."""
        header = _HEADER.pack(_MAGIC, _VERSION, self.n, self.d, self.budget,
                              self.s, self.t, self.seed)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.terminal_states, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, n_steps: int = 0) -> "PathEnsemble":
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < _HEADER.size:
            raise ValueError("file too short for an ensemble header")
        magic, version, n, d, budget, s, t, seed = _HEADER.unpack_from(raw)
        if magic != _MAGIC or version != _VERSION:
            raise ValueError("not a version-1 ensemble file")
        data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
        if data.size != budget * n * d:
            raise ValueError("ensemble payload size does not match its header")
        return cls(data.reshape(budget, n * d).astype(float), s, t, n_steps, seed, n, d)


def euler_paths(model: ChainModel, s: float, x, t: float, n_steps: int, budget: int, seed: int,
                threads: int | None = None, block: int = BLOCK_SIZE) -> PathEnsemble:
    """Euler-Maruyama terminal states; noise enters the first block through sigma."""
    if not t > s:
        raise ValueError("need s < t")
    if n_steps < 1 or budget < 1:
        raise ValueError("n_steps and budget must be at least 1")
    D, d = model.dim, model.d
    x = np.asarray(x, dtype=float).reshape(D)
    dt = (t - s) / n_steps
    sq = math.sqrt(dt)

    def run(b: int, m: int) -> np.ndarray:
        rng = block_generator(seed, "euler", b)
        X = np.broadcast_to(x, (m, D)).copy()
        for k in range(n_steps):
            u = s + k * dt
            dW = rng.standard_normal((m, d)) * sq
            noise = np.einsum("...ij,...j->...i", model.sigma_matrix(u, X), dW)
            X += model.drift(u, X) * dt
            X[:, :d] += noise
        bad = ~np.all(np.isfinite(X), axis=1)
        if bad.any():
            raise BlowUpError(f"path {b * block + int(np.argmax(bad))} blew up")
        return X

    states = np.concatenate(map_blocks(run, budget, block, threads))
    return PathEnsemble(states, float(s), float(t), int(n_steps), int(seed), model.n, model.d)


def _kde_kernel_values(v: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-sample Gaussian kernel values, shape (N, G), in rescaled coordinates."""
    N, D = v.shape
    factor = (N * (D + 2) / 4.0) ** (-1.0 / (D + 4))
    cov = np.atleast_2d(np.cov(v, rowvar=False))
    L = np.linalg.cholesky(factor ** 2 * cov)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    Linv = np.linalg.inv(L)
    zs = v @ Linv.T
    zt = targets @ Linv.T
    out = np.empty((N, targets.shape[0]))
    for g, z in enumerate(zt):
        r = zs - z
        out[:, g] = np.exp(-0.5 * np.sum(r * r, axis=1))
    return out * math.exp(-0.5 * (D * math.log(2.0 * math.pi) + logdet))


def kde_grid(ensemble: PathEnsemble, ys, resamples: int = BOOTSTRAP_RESAMPLES,
             threads: int | None = None) -> list[DensityEstimate]:
    """Rescaled-coordinate Gaussian KDE at each point of ``ys``.

    Samples are mapped by v = τ^{1/2} T_τ^{-1} x with τ = t - s, the bandwidth
    is Silverman's factor times the sample covariance of v, and the value is
    mapped back with the Jacobian τ^{-n²d/2}.  Error bars come from a
    bootstrap of the ensemble (bandwidth held fixed).
    """
    X = ensemble.terminal_states
    if X.shape[0] < 2:
        raise ValueError("KDE needs at least two samples")
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    tau = ensemble.t - ensemble.s
    r = rescale_batch(np.asarray(tau), ensemble.n, ensemble.d)
    jac = float(np.prod(r))
    k = _kde_kernel_values(X * r, ys * r)
    values = k.mean(axis=0) * jac
    N = X.shape[0]

    def boot(b: int, m: int) -> np.ndarray:
        rng = block_generator(ensemble.seed, "bootstrap", b)
        return np.stack([k[rng.integers(0, N, N)].mean(axis=0) for _ in range(m)])

    means = np.concatenate(map_blocks(boot, resamples, 8, threads)) * jac
    errs = means.std(axis=0, ddof=1)
    return [DensityEstimate(float(v), float(e), "kde") for v, e in zip(values, errs)]


def kde_density(ensemble: PathEnsemble, y, model: ChainModel | None = None,
                resamples: int = BOOTSTRAP_RESAMPLES, threads: int | None = None) -> DensityEstimate:
    if ensemble.budget == 0:
        raise ValueError("empty ensemble")
    if model is not None and (model.n, model.d) != (ensemble.n, ensemble.d):
        raise ValueError("ensemble dimensions do not match the model")
    return kde_grid(ensemble, [y], resamples, threads)[0]


def stencil(family: str, radius: float, n: int, d: int) -> np.ndarray:
    """Symmetric averaging stencil, shape (S, n, d)."""
    D = n * d
    if family == "spherical":
        if D == 1:
            pts = np.array([[1.0], [-1.0]])
        elif D == 2:
            ang = 2.0 * math.pi * np.arange(STENCIL_POINTS) / STENCIL_POINTS
            pts = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        else:
            half = np.random.default_rng(20240409).standard_normal((STENCIL_POINTS // 2, D))
            half /= np.linalg.norm(half, axis=1, keepdims=True)
            pts = np.concatenate([half, -half])
    elif family == "axis":
        eye = np.eye(D)
        pts = np.concatenate([eye, -eye])
    else:
        raise ValueError(f"unknown mollifier family {family!r}")
    return (radius * pts).reshape(-1, n, d)


def mollify(model: ChainModel, radius: float, family: str = "spherical") -> ChainModel:
    """Replace F_i and a by their averages over a stencil of the given radius."""
    if not radius > 0.0:
        raise ValueError("radius must be positive")
    pts = stencil(family, radius, model.n, model.d)

    def shifted(t, x):
        t = np.asarray(t, dtype=float)
        return (t[..., None] if t.ndim else t), x[..., None, :, :] + pts

    def avg_drift(F):
        def G(t, x):
            ts, xs = shifted(t, x)
            return np.mean(np.broadcast_to(F(ts, xs), xs.shape[:-2] + (model.d,)), axis=-2)
        return G

    def a_bar(t, x):
        ts, xs = shifted(t, x)
        s = np.broadcast_to(np.asarray(model.sigma(ts, xs), dtype=float),
                            xs.shape[:-2] + (model.d, model.d))
        return np.mean(s @ np.swapaxes(s, -1, -2), axis=-3)

    def sigma(t, x):
        return np.linalg.cholesky(a_bar(t, x))

    jacs = None
    if model.jacobians is not None and all(j is not None for j in model.jacobians):
        def avg_jac(J):
            def G(t, x):
                ts, xs = shifted(t, x)
                return np.mean(np.broadcast_to(J(ts, xs), xs.shape[:-2] + (model.d, model.d)),
                               axis=-3)
            return G
        jacs = tuple(avg_jac(J) for J in model.jacobians)

    return ChainModel(model.n, model.d, tuple(avg_drift(F) for F in model.drifts), sigma,
                      model.eta, model.horizon, jacs, f"{model.name}~{family}({radius:g})",
                      dict(model.params))


def _derived_seed(seed: int, *tags) -> int:
    ss = np.random.SeedSequence([int(seed)] + [tag_id(str(t)) for t in tags])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass
class UniquenessRow:
    radius: float
    gap: float
    combined_stderr: float
    argmax: int
    within: bool
    kde_a: list = field(default_factory=list)
    kde_b: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"radius": self.radius, "gap": self.gap, "combined_stderr": self.combined_stderr,
                "argmax": self.argmax, "within": self.within,
                "kde_a": [e.to_dict() for e in self.kde_a],
                "kde_b": [e.to_dict() for e in self.kde_b]}


@dataclass
class UniquenessReport:
    families: tuple[str, str]
    rows: list[UniquenessRow]

    @property
    def max_z(self) -> float:
        return max(r.gap / r.combined_stderr if r.combined_stderr > 0 else
                   (0.0 if r.gap == 0 else math.inf) for r in self.rows)

    def to_dict(self) -> dict:
        return {"families": list(self.families), "rows": [r.to_dict() for r in self.rows],
                "max_z": self.max_z}


def uniqueness_experiment(model: ChainModel, family_a: str, family_b: str, radii: Sequence[float],
                          budget: int, grid, seed: int, s: float = 0.0, t: float = 0.5, x=None,
                          n_steps: int = 200, threads: int | None = None) -> UniquenessReport:
    """Compare the laws of two mollification families radius by radius.

    Each family's ensemble uses a seed derived from (seed, family, radius), so
    swapping the families yields the same report up to the labels.
    """
    if family_a == family_b:
        raise ValueError("the two mollifier families must differ")
    x = np.zeros(model.dim) if x is None else np.asarray(x, dtype=float)
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    rows = []
    for radius in radii:
        est = {}
        for fam in (family_a, family_b):
            m = mollify(model, radius, fam)
            ens = euler_paths(m, s, x, t, n_steps, budget,
                              _derived_seed(seed, fam, repr(float(radius))), threads)
            est[fam] = kde_grid(ens, grid, threads=threads)
        ka, kb = est[family_a], est[family_b]
        gaps = np.array([abs(a.value - b.value) for a, b in zip(ka, kb)])
        i = int(np.argmax(gaps))
        comb = math.hypot(ka[i].stderr, kb[i].stderr)
        rows.append(UniquenessRow(float(radius), float(gaps[i]), comb, i,
                                  bool(gaps[i] <= 3.0 * comb), ka, kb))
    return UniquenessReport((family_a, family_b), rows)


def xi_epsilon(model: ChainModel, h: Callable, s: float, x, eps: float, budget: int, seed: int,
               threads: int | None = None, steps: int = BATCH_STEPS) -> MCEstimate:
    """Ξ^ε(s, x) = ∫ h(s, y) p~^{s+ε, y}(s, s+ε, x, y) dy by importance sampling.

    ``h(t, y)`` is vectorized over y of shape (B, nd).  Proposals come from
    the forward Gaussian of (s, x) at time s + ε with covariance inflated by 4.
    """
    if not eps > 0.0:
        raise ValueError("eps must be positive")
    if budget < MIN_BUDGET:
        raise ValueError(f"budget must be at least {MIN_BUDGET}")
    x = np.asarray(x, dtype=float)
    D = model.dim

    def block(b: int, m: int) -> np.ndarray:
        rng = block_generator(seed, "xi", b)
        prop = forward_gaussian(model, s, x, np.full(m, s + eps), steps).inflate(XI_INFLATION)
        y = prop.sample(rng.standard_normal((m, D)))
        fb = freeze_batch(model, s, s + eps, y, steps)
        hv = np.asarray(h(np.full(m, s), y), dtype=float)
        return hv * np.exp(fb.logpdf(np.broadcast_to(x, (m, D))) - prop.logpdf(y))

    return summarize(np.concatenate(map_blocks(block, budget, BLOCK_SIZE, threads)))


def aronson_fit(xs, ys, values, model: ChainModel, t: float, s: float = 0.0) -> tuple[float, float]:
    """Smallest C_lower, C_upper >= 1 bracketing the density values on a grid.

    C^{-1} t^{-n²d/2} e^{-C q} <= p <= C t^{-n²d/2} e^{-q/C}, q = t |T_t^{-1}(θ_t(x) - y)|²,
    with θ_t(x) the forward flow over [s, s + t].
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    values = np.asarray(values, dtype=float).ravel()
    if np.any(~(values > 0.0)):
        raise ValueError("density values must be strictly positive")
    pre = -0.5 * model.n * model.n * model.d * math.log(t)
    theta = forward_flow(model, s, s + t, xs)
    q = scale(t, model.n, model.d).rescaled_sq_norm(theta - ys)
    lower = upper = 1.0
    for qi, p in zip(np.broadcast_to(q, values.shape), values):
        lp = math.log(p)
        lower = max(lower, _smallest_feasible(
            lambda C: -math.log(C) + pre - C * qi <= lp, lo=1.0))
        upper = max(upper, _smallest_feasible(
            lambda C: math.log(C) + pre - qi / C >= lp, lo=1.0))
    return lower, upper
