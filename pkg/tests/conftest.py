import numpy as np
import pytest

from kolmo_parametrix.model import build_model, register_preset


def _vanishing_sigma(params, eta):
    """n = 2, d = 2 chain whose diffusion diag(x_1, 1) degenerates on x_1 = 0."""
    eye = np.eye(2)

    def sigma(t, x):
        s = np.zeros(x.shape[:-2] + (2, 2))
        s[..., 0, 0] = x[..., 0, 0]
        s[..., 1, 1] = 1.0
        return s

    return dict(n=2, d=2,
                drifts=[lambda t, x: np.zeros(x.shape[:-2] + (2,)), lambda t, x: x[..., 0, :]],
                sigma=sigma, jacobians=[lambda t, x: eye])


register_preset("vanishing-sigma", _vanishing_sigma)


@pytest.fixture(scope="session")
def kolmo():
    return build_model("kolmogorov-chain", {"n": 2, "d": 1})


@pytest.fixture(scope="session")
def perturbed():
    return build_model("perturbed-chain", {"n": 2, "d": 1, "amp": 0.1})


@pytest.fixture(scope="session")
def heat():
    return build_model("elliptic", {"d": 1, "sigma": 1.0})


@pytest.fixture(scope="session")
def rough_elliptic():
    return build_model("elliptic", {"d": 1, "amp": 0.5, "center": 0.3}, eta=0.5)
