import math

import numpy as np
import pytest
from scipy import integrate

from kolmo_parametrix.flow import linearize
from kolmo_parametrix.gaussian import density_bound_constant, frozen_density, g_kernel
from kolmo_parametrix.model import build_model
from kolmo_parametrix.parametrix import (beta_tail_bound, convolve_chain, green_remainder,
                                         kernel_exponent_profile, kernel_H, semigroup_check,
                                         series_partial_sum)

SQRT3_PI = math.sqrt(3.0) / math.pi


def bump(t, y):
    return np.exp(-np.sum((y - np.array([0.3, -0.2])) ** 2, axis=-1))


def test_kernel_vanishes_on_linear_model(kolmo):
    rng = np.random.default_rng(0)
    for _ in range(10):
        s = rng.uniform(0, 0.8)
        t = rng.uniform(s + 0.01, 1.0)
        assert abs(kernel_H(kolmo, s, t, rng.normal(size=2), rng.normal(size=2))) < 1e-12


def test_kernel_vanishes_on_transported_diagonal():
    m = build_model("perturbed-chain", {"amp": 0.3, "drift_amp": 0.0})
    y = np.array([0.4, -0.3])
    lin = linearize(m, 1.0, y, start=0.2)
    assert abs(kernel_H(m, 0.2, 1.0, lin.theta(0.2), y, lin=lin)) < 1e-12


def test_elliptic_kernel_hand_formula(rough_elliptic):
    m = rough_elliptic

    def a(w):
        return 1.0 + 0.5 * min(abs(w - 0.3), 1.0) ** 0.5

    rng = np.random.default_rng(1)
    for _ in range(10):
        s, t = sorted(rng.uniform(0, 1, 2))
        z, y = rng.normal(size=2)
        var = a(y) * (t - s)
        phi = math.exp(-(z - y) ** 2 / (2 * var)) / math.sqrt(2 * math.pi * var)
        hand = 0.5 * (a(z) - a(y)) * phi * ((z - y) ** 2 / var ** 2 - 1 / var)
        assert abs(kernel_H(m, s, t, [z], [y]) - hand) < 1e-10 * max(1.0, abs(hand))


def test_kernel_rejects_bad_interval(perturbed):
    with pytest.raises(ValueError):
        kernel_H(perturbed, 0.5, 0.5, [0, 0], [0, 0])


def test_exponent_profiles(perturbed, rough_elliptic, kolmo):
    grid = np.logspace(-3, -0.5, 8)
    prof = kernel_exponent_profile(perturbed, [1.0, 1.0], [0.3, -0.2], grid)
    assert prof.exponent >= -0.6 and not prof.degenerate
    prof = kernel_exponent_profile(rough_elliptic, [2.0], [0.3], np.logspace(-3.5, -1, 8))
    assert prof.exponent >= -0.85
    assert prof.exponent == pytest.approx(-0.75, abs=1e-6)
    prof = kernel_exponent_profile(kolmo, [1.0, 1.0], [0.0, 0.0], grid)
    assert prof.degenerate and math.isnan(prof.exponent)


def test_convolution_vanishes_when_kernel_does(kolmo, heat):
    for k in (1, 2):
        est = convolve_chain(kolmo, 0.0, 1.0, [0.0, 0.0], [0.3, 0.1], k, 500, seed=1)
        assert abs(est.value) < 1e-14 and est.stderr < 1e-14
    est = convolve_chain(heat, 0.0, 1.0, [0.0], [0.5], 1, 500, seed=1)
    assert est.value == 0.0 and est.stderr == 0.0


def test_convolution_errors(perturbed):
    with pytest.raises(ValueError):
        convolve_chain(perturbed, 0, 1, [0, 0], [0, 0], 1, 99, seed=0)
    with pytest.raises(ValueError):
        convolve_chain(perturbed, 0, 1, [0, 0], [0, 0], 0, 1000, seed=0)
    with pytest.raises(ValueError):
        convolve_chain(perturbed, 0, 1e-12, [0, 0], [0, 0], 1, 1000, seed=0)
    with pytest.raises(ValueError):
        convolve_chain(perturbed, 0, 1, [0, 0], [0, 0], 1, 1000, seed=0, sampler="sobol")


def test_convolution_seed_determinism(perturbed):
    a = convolve_chain(perturbed, 0, 1, [0, 0], [0, 0], 2, 3000, seed=4, threads=1)
    b = convolve_chain(perturbed, 0, 1, [0, 0], [0, 0], 2, 3000, seed=4, threads=3)
    assert a == b


def test_convolution_independent_seeds_agree(perturbed):
    a = convolve_chain(perturbed, 0, 1, [0, 0], [0, 0], 1, 20_000, seed=1)
    b = convolve_chain(perturbed, 0, 1, [0, 0], [0, 0], 1, 20_000, seed=2)
    assert abs(a.value - b.value) <= 3 * math.hypot(a.stderr, b.stderr)


def test_uniform_sampler_runs(perturbed):
    est = convolve_chain(perturbed, 0, 1, [0, 0], [0, 0], 1, 2000, seed=1, sampler="uniform")
    assert np.isfinite(est.value) and est.stderr > 0


def _quadrature_first_term(s, t, x, y):
    """∫∫ p~(s,u,x,w) H(u,t,w,y) dw du for the eta = 1/2 rough elliptic model."""
    eta = 0.5

    def a(w):
        return 1.0 + 0.5 * min(abs(w - 0.3), 1.0) ** eta

    def N(v, var):
        return math.exp(-v * v / (2 * var)) / math.sqrt(2 * math.pi * var)

    def inner(r):
        # r = t - u, kept exact so tiny gaps do not round to zero
        back, fwd = t - s - r, r

        def f(w):
            var = a(y) * fwd
            return (N(w - x, a(w) * back) * 0.5 * (a(w) - a(y))
                    * N(w - y, var) * ((w - y) ** 2 / var ** 2 - 1 / var))
        sb, sf = math.sqrt(back), math.sqrt(fwd)
        lo = min(x - 30 * sb, y - 30 * sf)
        hi = max(x + 30 * sb, y + 30 * sf)
        # breakpoints at both Gaussian scales so narrow peaks are never skipped
        pts = {0.3} | {c + k * sc for c, sc in ((x, sb), (y, sf)) for k in (-6, -2, -0.5, 0, 0.5, 2, 6)}
        pts = sorted(p for p in pts if lo < p < hi)
        return integrate.quad(f, lo, hi, points=pts, limit=500, epsabs=1e-13, epsrel=1e-10)[0]

    # t - u = (t - s) v^{2/eta} removes the endpoint singularity
    nodes, weights = np.polynomial.legendre.leggauss(160)
    v, wv = 0.5 * (nodes + 1), 0.5 * weights
    L = t - s
    return sum(w * L * (2 / eta) * vi ** (2 / eta - 1) * inner(L * vi ** (2 / eta))
               for vi, w in zip(v, wv))


@pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
def test_first_term_matches_quadrature(rough_elliptic):
    ref = _quadrature_first_term(0.0, 1.0, 0.2, -0.1)
    est = convolve_chain(rough_elliptic, 0.0, 1.0, [0.2], [-0.1], 1, 1_000_000, seed=8)
    assert abs(est.value - ref) <= 3 * est.stderr


def test_series_exact_on_linear_model(kolmo):
    for k_max in (0, 1, 2):
        est = series_partial_sum(kolmo, 0.0, 1.0, [0, 0], [0, 0], k_max, budget=500, seed=1)
        assert abs(est.value - SQRT3_PI) / SQRT3_PI < 1e-8
        assert est.provenance == f"parametrix({k_max})"


def test_series_order_zero_is_frozen_density(perturbed):
    est = series_partial_sum(perturbed, 0.1, 0.7, [0.2, 0.1], [0.3, 0.4], 0, seed=0)
    lin = linearize(perturbed, 0.7, [0.3, 0.4], start=0.1)
    assert est.value == frozen_density(lin, 0.1, 0.7, [0.2, 0.1], [0.3, 0.4]).value
    assert est.stderr == 0.0


def _fitted_constant(model, dt):
    lin = linearize(model, dt, [0.0, 0.0])
    grid = [(dt - tau, lin.theta(dt - tau)) for tau in np.linspace(0.05, 1.0, 8) * dt]
    return max(1.0, density_bound_constant(lin, grid))


def test_term_decay_and_tail_bound(perturbed):
    dt = 0.25
    C = _fitted_constant(perturbed, dt)
    g = float(g_kernel(C, dt, np.zeros(2), 2, 1))
    terms = {k: convolve_chain(perturbed, 0.0, dt, [0, 0], [0, 0], k, 20_000, seed=3)
             for k in (1, 2)}
    for k, est in terms.items():
        assert abs(est.value) <= beta_tail_bound(k, 1.0, dt, C) * g + 3 * est.stderr
    s1 = series_partial_sum(perturbed, 0.0, dt, [0, 0], [0, 0], 1, 20_000, seed=3)
    s2 = series_partial_sum(perturbed, 0.0, dt, [0, 0], [0, 0], 2, 20_000, seed=3)
    assert abs(s2.value - s1.value) <= beta_tail_bound(2, 1.0, dt, C) + 3 * s2.stderr


def test_beta_tail_bound_examples():
    assert beta_tail_bound(1, 1.0, 0.25, 1.0) == pytest.approx(math.pi / 2, rel=1e-12)
    assert beta_tail_bound(0, 0.7, 0.3, 2.5) == 2.5
    for k in (1, 2, 3):
        assert beta_tail_bound(k, 0.5, 0.1, 1.2) < beta_tail_bound(k, 0.5, 0.2, 1.2)
    with pytest.raises(ValueError):
        beta_tail_bound(1, 0.0, 0.1, 1.0)


def test_green_remainder(kolmo, perturbed):
    est = green_remainder(kolmo, bump, 0.0, [0.1, 0.1], 0.0, 0.1, 1000, seed=2)
    assert abs(est.value) < 1e-14
    est = green_remainder(perturbed, bump, 0.0, [0.1, 0.1], 0.02, 0.1, 5000, seed=2)
    assert abs(est.value) <= 0.5 + 3 * est.stderr
    with pytest.raises(ValueError):
        green_remainder(perturbed, bump, 0.0, [0, 0], 0.0, 0.1, 50, seed=2)
    a = green_remainder(perturbed, bump, 0.0, [0, 0], 0.0, 0.1, 3000, seed=5, threads=1)
    b = green_remainder(perturbed, bump, 0.0, [0, 0], 0.0, 0.1, 3000, seed=5, threads=2)
    assert a == b


def test_semigroup_linear_and_deterministic(kolmo, perturbed):
    est, direct = semigroup_check(kolmo, 0.0, 0.6, 0.4, [0.0, 0.0], [0.2, 0.1], 20_000, seed=1)
    K = np.array([[1.0, 0.5], [0.5, 1 / 3]])
    v = np.array([0.2, 0.1])
    exact = math.exp(-0.5 * v @ np.linalg.solve(K, v)) * math.sqrt(3) / math.pi
    assert direct == pytest.approx(exact, rel=1e-10)
    assert abs(est.value - direct) <= 3 * est.stderr
    a = semigroup_check(perturbed, 0.0, 0.4, 0.1, [0, 0], [0.3, -0.2], 10_000, seed=2, threads=1)
    b = semigroup_check(perturbed, 0.0, 0.4, 0.1, [0, 0], [0.3, -0.2], 10_000, seed=2, threads=3)
    assert a == b
    with pytest.raises(ValueError):
        semigroup_check(kolmo, 0.0, 0.5, 0.0, [0, 0], [0, 0], 1000, seed=1)
