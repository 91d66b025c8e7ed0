import numpy as np
import pytest

from natlangevin.params import BlockLayout, ParamVector
from natlangevin.priors import GaussianPrior, NormalInverseGammaPrior, make_prior, neg_log_prior_grad, sample_prior


def fd(f, theta, h=1e-6):
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        out[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return out


def test_gaussian_gradient_examples():
    layout = BlockLayout.from_sizes([3])
    mean = np.array([0.1, -0.2, 0.3])
    prior = GaussianPrior(var=0.5, mean=mean)
    assert np.all(neg_log_prior_grad(prior, ParamVector(mean.copy(), layout)).values == 0)
    assert GaussianPrior(var=0.1).grad(np.array([0.2]))[0] == pytest.approx(2.0, abs=1e-14)


def test_nig_gradient_at_zero():
    assert NormalInverseGammaPrior(1.0, 1.0).grad(np.zeros(3)).tolist() == [0.0, 0.0, 0.0]


@pytest.mark.parametrize("prior", [GaussianPrior(var=np.array([0.3, 1.0, 2.5, 0.1]), mean=0.2),
                                   NormalInverseGammaPrior(1.0, 1.0), NormalInverseGammaPrior(2.5, 0.3)])
def test_gradient_matches_density(prior, rng):
    theta = rng.standard_normal(4)
    num = fd(prior.neg_log_density, theta)
    np.testing.assert_allclose(prior.grad(theta), num, rtol=1e-6, atol=1e-9)


def test_nig_density_normalized():
    from scipy.integrate import quad
    prior = NormalInverseGammaPrior(1.5, 0.7)
    total, _ = quad(lambda t: np.exp(-prior.neg_log_density(np.array([t]))), -np.inf, np.inf)
    assert total == pytest.approx(1.0, abs=1e-8)


def test_gaussian_gradient_linear(rng):
    prior = GaussianPrior(var=rng.uniform(0.1, 2, 6), mean=rng.standard_normal(6))
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    lhs = prior.grad(2 * a - b) - prior.grad(prior.mean)
    rhs = 2 * (prior.grad(a) - prior.grad(prior.mean)) - (prior.grad(b) - prior.grad(prior.mean))
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_sample_prior_examples():
    layout = BlockLayout.from_sizes([4, 4])
    mean = np.linspace(-1, 1, 8)
    tight = sample_prior(GaussianPrior(var=1e-30, mean=mean), layout, np.random.default_rng(0))
    np.testing.assert_allclose(tight.values, mean, rtol=0, atol=1e-10)
    big = BlockLayout.from_sizes([1_000_000])
    draw = sample_prior(GaussianPrior(var=1.0), big, np.random.default_rng(1))
    assert 0.995 <= draw.values.var() <= 1.005
    a = sample_prior(NormalInverseGammaPrior(), layout, np.random.default_rng(2))
    b = sample_prior(NormalInverseGammaPrior(), layout, np.random.default_rng(2))
    assert a == b


def test_make_prior_and_ranges():
    assert isinstance(make_prior("gaussian", var=0.1), GaussianPrior)
    assert isinstance(make_prior("nig"), NormalInverseGammaPrior)
    assert make_prior("none").grad(np.ones(2)).tolist() == [0.0, 0.0]
    with pytest.raises(ValueError):
        make_prior("laplace")
    with pytest.raises(ValueError):
        GaussianPrior(var=0.0)
    with pytest.raises(ValueError):
        NormalInverseGammaPrior(alpha=-1.0)
