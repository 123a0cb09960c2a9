import math

import numpy as np
import pytest

from kolmo_parametrix.flow import BlowUpError
from kolmo_parametrix.model import ChainModel, build_model, validate_assumptions
from kolmo_parametrix.simulate import (PathEnsemble, aronson_fit, euler_paths, kde_density,
                                       kde_grid, mollify, stencil, uniqueness_experiment,
                                       xi_epsilon)

SQRT3_PI = math.sqrt(3.0) / math.pi


def frozen_model():
    return ChainModel(2, 1, (lambda t, x: np.zeros(x.shape[:-2] + (1,)),) * 2,
                      lambda t, x: np.zeros(x.shape[:-2] + (1, 1)))


def test_no_dynamics_keeps_start():
    ens = euler_paths(frozen_model(), 0.0, [0.3, -1.0], 1.0, 10, 50, seed=0)
    assert np.all(ens.terminal_states == [0.3, -1.0])


def test_euler_moments(kolmo):
    ens = euler_paths(kolmo, 0.0, [0.0, 0.0], 1.0, 200, 100_000, seed=1)
    X = ens.terminal_states
    N = len(X)
    assert np.all(np.abs(X.mean(0)) <= 3 * X.std(0, ddof=1) / math.sqrt(N))
    C = np.cov(X.T)
    target = np.array([[1, 0.5], [0.5, 1 / 3]])
    # stderr of a sample covariance entry: sqrt((K_ii K_jj + K_ij^2) / N)
    se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target ** 2) / N)
    assert np.all(np.abs(C - target) <= 3 * se)


def test_euler_determinism(perturbed):
    a = euler_paths(perturbed, 0, [0, 0], 0.5, 20, 5000, seed=3, threads=1, block=512)
    b = euler_paths(perturbed, 0, [0, 0], 0.5, 20, 5000, seed=3, threads=4, block=512)
    assert np.array_equal(a.terminal_states, b.terminal_states)
    c = euler_paths(perturbed, 0, [0, 0], 0.5, 20, 5000, seed=4, block=512)
    assert not np.array_equal(a.terminal_states, c.terminal_states)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_euler_blow_up_reports_path():
    boom = ChainModel(1, 1, (lambda t, x: x[..., 0, :] ** 3,),
                      lambda t, x: np.ones(x.shape[:-2] + (1, 1)))
    with pytest.raises(BlowUpError, match="path"):
        euler_paths(boom, 0.0, [5.0], 1.0, 20, 10, seed=0)


def test_kpen_roundtrip(tmp_path, kolmo):
    ens = euler_paths(kolmo, 0.0, [0.0, 0.0], 0.5, 5, 37, seed=12)
    path = tmp_path / "e.kpen"
    ens.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"KPEN" and len(raw) == 4 + 4 * 3 + 8 + 16 + 8 + 37 * 2 * 8
    back = PathEnsemble.load(path)
    assert np.array_equal(back.terminal_states, ens.terminal_states)
    assert (back.n, back.d, back.s, back.t, back.seed) == (2, 1, 0.0, 0.5, 12)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        PathEnsemble.load(path)


def test_kde_standard_normal():
    z = np.random.default_rng(0).standard_normal((1_000_000, 1))
    est = kde_density(PathEnsemble(z, 0.0, 1.0, 1, 0, 1, 1), [0.0])
    assert abs(est.value - 1 / math.sqrt(2 * math.pi)) < 0.02 / math.sqrt(2 * math.pi)
    assert est.provenance == "kde" and est.stderr > 0


def test_kde_kolmogorov_closed_form(kolmo):
    ens = euler_paths(kolmo, 0.0, [0.0, 0.0], 1.0, 400, 1_000_000, seed=2)
    est = kde_density(ens, [0.0, 0.0], kolmo)
    assert abs(est.value - SQRT3_PI) <= 3 * est.stderr + 0.02 * SQRT3_PI


def test_kde_normalization(kolmo):
    ens = euler_paths(kolmo, 0.0, [0.0, 0.0], 0.25, 50, 20_000, seed=5)
    # box of +-5 rescaled standard deviations per block
    tau = 0.25
    h1, h2 = 5 * math.sqrt(tau), 5 * math.sqrt(tau ** 3 / 3)
    g1, g2 = np.linspace(-h1, h1, 61), np.linspace(-h2, h2, 61)
    X, Y = np.meshgrid(g1, g2, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], 1)
    vals = np.array([e.value for e in kde_grid(ens, pts, resamples=2)])
    total = vals.sum() * (g1[1] - g1[0]) * (g2[1] - g2[0])
    assert abs(total - 1.0) < 0.01


def test_kde_thread_invariance(perturbed):
    ens = euler_paths(perturbed, 0, [0, 0], 0.5, 20, 4000, seed=6)
    a = kde_grid(ens, [[0, 0], [0.2, 0.1]], threads=1)
    b = kde_grid(ens, [[0, 0], [0.2, 0.1]], threads=3)
    assert a == b


def test_kde_empty():
    with pytest.raises(ValueError):
        kde_density(PathEnsemble(np.zeros((0, 2)), 0, 1, 1, 0, 2, 1), [0, 0])


def test_stencils_are_symmetric():
    for fam in ("spherical", "axis"):
        for n, d in ((1, 1), (2, 1), (2, 2)):
            pts = stencil(fam, 0.1, n, d)
            assert np.allclose(pts.sum(0), 0.0)
    assert stencil("spherical", 1.0, 2, 1).shape[0] == 16
    with pytest.raises(ValueError):
        stencil("cubic", 1.0, 2, 1)


def test_mollify_linear_invariance(kolmo):
    m = mollify(kolmo, 0.3)
    x = np.random.default_rng(0).normal(size=(20, 2))
    assert np.allclose(m.drift(0.0, x), kolmo.drift(0.0, x), atol=1e-14)
    with pytest.raises(ValueError):
        mollify(kolmo, 0.0)


def test_mollify_converges_and_keeps_ellipticity(perturbed):
    x = np.random.default_rng(1).normal(size=(100, 2))
    errs = [np.abs(mollify(perturbed, r).diffusion(0.0, x) - perturbed.diffusion(0.0, x)).max()
            for r in (0.1, 0.05, 0.025)]
    assert errs[0] > errs[1] > errs[2]
    lam = validate_assumptions(perturbed, 300, seed=2).uniform_ellipticity
    for fam in ("spherical", "axis"):
        rep = validate_assumptions(mollify(perturbed, 0.1, fam), 300, seed=2)
        assert all(rep.passed.values())
        assert abs(rep.uniform_ellipticity[0] - lam[0]) <= 0.1 * lam[0]
        assert abs(rep.uniform_ellipticity[1] - lam[1]) <= 0.1 * lam[1]


def test_uniqueness_linear_and_symmetry(kolmo):
    grid = [[0.0, 0.0], [0.3, 0.05]]
    ab = uniqueness_experiment(kolmo, "spherical", "axis", [0.1], 4000, grid, seed=3, n_steps=20)
    ba = uniqueness_experiment(kolmo, "axis", "spherical", [0.1], 4000, grid, seed=3, n_steps=20)
    assert ab.rows[0].gap == ba.rows[0].gap
    assert ab.rows[0].combined_stderr == ba.rows[0].combined_stderr
    assert ab.rows[0].within
    with pytest.raises(ValueError):
        uniqueness_experiment(kolmo, "axis", "axis", [0.1], 1000, grid, seed=3)


def test_xi_linear_cases(kolmo):
    one = xi_epsilon(kolmo, lambda t, y: np.ones(len(y)), 0.0, [0.1, 0.1], 0.1, 100_000, seed=1)
    assert abs(one.value - 1.0) <= 3 * one.stderr
    odd = xi_epsilon(kolmo, lambda t, y: np.clip(y[:, 0], -10, 10), 0.0, [0.0, 0.0], 0.05,
                     100_000, seed=2)
    assert abs(odd.value) <= 3 * odd.stderr
    with pytest.raises(ValueError):
        xi_epsilon(kolmo, lambda t, y: y[:, 0], 0.0, [0, 0], 0.0, 1000, seed=1)
    with pytest.raises(ValueError):
        xi_epsilon(kolmo, lambda t, y: y[:, 0], 0.0, [0, 0], 0.1, 10, seed=1)


def _closed_form(kolmo_t, x, y):
    K = np.array([[kolmo_t, kolmo_t ** 2 / 2], [kolmo_t ** 2 / 2, kolmo_t ** 3 / 3]])
    m = np.array([x[0], x[1] + kolmo_t * x[0]])
    r = m - y
    return math.exp(-0.5 * r @ np.linalg.solve(K, r)) / (2 * math.pi * math.sqrt(np.linalg.det(K)))


def test_aronson_fit_closed_form(kolmo):
    t = 0.5
    xs = np.zeros((100, 2))
    g = np.linspace(-1, 1, 10)
    ys = np.array([[a, b] for a in g for b in 0.3 * g])
    vals = [_closed_form(t, x, y) for x, y in zip(xs, ys)]
    lo, hi = aronson_fit(xs, ys, vals, kolmo, t)
    assert 1.0 <= lo < np.inf and 1.0 <= hi < np.inf
    lo2, hi2 = aronson_fit(xs[::2], ys[::2], vals[::2], kolmo, t)
    assert lo2 <= lo and hi2 <= hi


def test_aronson_fit_diagonal(kolmo):
    t = 0.5
    x = np.array([[0.2, 0.1]])
    y = x + [[0.0, t * 0.2]]  # the transported point
    p = _closed_form(t, x[0], y[0])
    lo, hi = aronson_fit(x, y, [p], kolmo, t)
    ratio = p * t ** 2
    assert hi == pytest.approx(max(1.0, ratio), rel=1e-9)
    assert lo == pytest.approx(max(1.0, 1 / ratio), rel=1e-9)
    with pytest.raises(ValueError):
        aronson_fit(x, y, [0.0], kolmo, t)
