import numpy as np
import pytest

from kolmo_parametrix.batch import (BatchGaussian, forward_gaussian, freeze_batch,
                                    gaussian_product)
from kolmo_parametrix.flow import forward_flow, linearize
from kolmo_parametrix.gaussian import frozen_gaussian
from kolmo_parametrix.parametrix import kernel_H


@pytest.fixture(scope="module")
def setup(perturbed):
    rng = np.random.default_rng(3)
    y = np.array([0.3, -0.2])
    T, s = 0.8, 0.3
    lin = linearize(perturbed, T, y, start=0.0)
    x = rng.normal(scale=0.5, size=(6, 2))
    fb = freeze_batch(perturbed, s, T, np.tile(y, (6, 1)))
    return perturbed, lin, fb, x, y, s, T


def test_batch_matches_single_route(setup):
    m, lin, fb, x, y, s, T = setup
    fg = frozen_gaussian(lin, s, T)
    assert np.allclose(fb.logpdf(x), fg.logpdf(x, y), rtol=1e-7, atol=1e-8)
    assert np.allclose(fb.theta[0], lin.theta(s), atol=1e-9)
    single = [kernel_H(m, s, T, xi, y, lin=lin) for xi in x]
    assert np.allclose(fb.kernel(x), single, rtol=1e-6, atol=1e-12)


def test_start_gaussian_is_the_frozen_density(setup):
    _, _, fb, x, _, _, _ = setup
    assert np.allclose(fb.start_gaussian().logpdf(x), fb.logpdf(x), atol=1e-9)


def test_forward_gaussian_mean(perturbed):
    g = forward_gaussian(perturbed, 0.1, [0.2, 0.4], np.array([0.5, 0.9]))
    assert np.allclose(g.mean[1], forward_flow(perturbed, 0.1, 0.9, [0.2, 0.4]), atol=1e-8)


def test_forward_gaussian_kolmogorov(kolmo):
    g = forward_gaussian(kolmo, 0.0, [0.0, 0.0], np.array([1.0]))
    K = np.diag(1 / g.rescale[0]) @ g.S[0] @ g.S[0].T @ np.diag(1 / g.rescale[0])
    assert np.allclose(K, [[1, 0.5], [0.5, 1 / 3]], atol=1e-12)


def test_product_against_grid(setup, perturbed):
    _, _, fb, _, _, _, _ = setup
    fwd = forward_gaussian(perturbed, 0.0, [0.1, 0.2], np.full(6, 0.3))
    back = fb.start_gaussian()
    prod = gaussian_product(fwd, back)
    g = np.linspace(-3, 3, 401)
    X, Y = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], 1)

    def rows(G, b):
        k = len(pts)
        return BatchGaussian(np.repeat(G.mean[b:b + 1], k, 0), np.repeat(G.tau[b:b + 1], k),
                             np.repeat(G.S[b:b + 1], k, 0), G.n, G.d)

    f = np.exp(rows(fwd, 0).logpdf(pts) + rows(back, 0).logpdf(pts))
    f /= f.sum() * (g[1] - g[0]) ** 2
    assert np.abs(f - np.exp(rows(prod, 0).logpdf(pts))).max() < 1e-8 * f.max() + 1e-10
