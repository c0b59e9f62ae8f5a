import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from nmfrlct import _fallback, kernels
from nmfrlct.gibbs import (GibbsConfig, LatentSources, PosteriorDraws, read_draws_jsonl,
                           run_chain, sample_latent_sources, sample_prior, update_factors,
                           write_draws_jsonl)
from nmfrlct.model import (CountDataset, DomainError, FactorPair, Hyperparameters, ModelDims,
                           NumericalError, generate_dataset, observation_loglik)

from oracles import batch_means_se, posterior_mean_uv

compiled_only = pytest.mark.skipif(kernels.compiled is None, reason="compiled extension not built")


@pytest.mark.parametrize("shape", [0.1, 0.25, 0.9, 1.0, 3.5])
def test_gamma_boosted_distribution(shape):
    rng = np.random.default_rng(0)
    g = _fallback.gamma_boosted(rng, np.full(20_000, shape))
    assert (g > 0).all()
    assert stats.kstest(g, stats.gamma(shape).cdf).pvalue > 1e-3


def test_allocation_conserves_counts(small_truth):
    rng = np.random.default_rng(2)
    data = generate_dataset(small_truth, 4, 0)
    params = FactorPair(np.array([[1.0, 2.0, 0.5]] * 3), np.array([[1.0, 1.0], [0.2, 3.0], [1.0, 0.1]]))
    src = sample_latent_sources(data.observations, params, rng)
    assert src.s.shape == (4, 3, 2, 3)
    assert src.conserved()
    assert src.su.shape == (3, 3) and src.sv.shape == (3, 2)
    assert src.su.sum() == data.observations.sum() == src.sv.sum()


def test_allocation_multinomial_mean():
    rng = np.random.default_rng(3)
    U = np.array([[1.0, 2.0, 3.0]])
    V = np.array([[1.0], [1.0], [2.0]])
    counts = np.array([[100]])
    p = np.array([1.0, 2.0, 6.0]) / 9.0
    draws = np.stack([_fallback.allocate(rng, counts, U, V)[0, 0] for _ in range(4000)])
    se = np.sqrt(100 * p * (1 - p) / 4000)
    assert np.all(np.abs(draws.mean(axis=0) - 100 * p) < 4 * se)
    assert (draws.sum(axis=1) == 100).all()


def test_allocation_degenerate_weights():
    with pytest.raises(NumericalError):
        _fallback.allocate(np.random.default_rng(0), np.array([[2]]), np.zeros((1, 2)), np.ones((2, 1)))
    # zero count with zero weight is fine
    s = _fallback.allocate(np.random.default_rng(0), np.array([[0]]), np.zeros((1, 2)), np.ones((2, 1)))
    assert s.sum() == 0


def test_update_factors_conditional_moments():
    hyper = Hyperparameters(0.5, 2.0, 1.5, 1.0)
    params = FactorPair(np.array([[0.7]]), np.array([[1.3]]))
    src = LatentSources(np.array([[[[30]]]]), np.array([[[30]]]))
    n = 10
    rng = np.random.default_rng(4)
    us = np.array([update_factors(src, params, hyper, rng, n).U[0, 0] for _ in range(20_000)])
    shape, rate = 0.5 + 30, 2.0 + n * 1.3
    assert abs(us.mean() - shape / rate) < 4 * np.sqrt(shape) / rate / np.sqrt(us.size)
    assert stats.kstest(us, stats.gamma(shape, scale=1 / rate).cdf).pvalue > 1e-3


def test_sample_prior_moments():
    dims = ModelDims(50, 40, 3, 1)
    hyper = Hyperparameters(0.25, 2.0, 3.0, 0.5)
    p = sample_prior(dims, hyper, np.random.default_rng(5))
    assert p.shape == (50, 40, 3)
    assert abs(p.U.mean() - 0.125) < 0.05
    assert abs(p.V.mean() - 6.0) < 0.6


def test_config_validation():
    assert GibbsConfig(10, 2, 5).total_sweeps == 20
    for bad in ((-1, 1, 1), (0, 0, 1), (0, 1, 0)):
        with pytest.raises(DomainError):
            GibbsConfig(*bad)


def test_run_chain_shapes_and_determinism(small_truth, unit_hyper):
    dims = ModelDims(3, 2, 2, 1)
    data = generate_dataset(small_truth, 30, 0)
    cfg = GibbsConfig(50, 3, 40, seed=9)
    a = run_chain(data, unit_hyper, dims, cfg)
    b = run_chain(data, unit_hyper, dims, cfg)
    assert a.U.shape == (40, 3, 2) and a.V.shape == (40, 2, 2) and a.K == 40
    assert np.array_equal(a.U, b.U) and np.array_equal(a.V, b.V)
    assert (a.U > 0).all() and (a.V > 0).all()
    with pytest.raises(DomainError):
        run_chain(data, unit_hyper, ModelDims(2, 2, 2, 1), cfg)


def test_run_chain_tracks_rate(small_truth, unit_hyper):
    data = generate_dataset(small_truth, 400, 1)
    draws = run_chain(data, unit_hyper, ModelDims(3, 2, 2, 1), GibbsConfig(500, 2, 500, seed=2))
    assert np.allclose(draws.rates().mean(axis=0), data.observations.mean(axis=0), rtol=0.05)


@compiled_only
@pytest.mark.parametrize("phi", [0.25, 0.7, 2.0])
def test_backends_bitwise_identical(phi):
    truth = FactorPair(np.array([[1.0, 0.2], [0.5, 0.8], [1.5, 0.1]]), np.array([[1.0, 0.5], [0.3, 2.0]]))
    data = generate_dataset(truth, 25, 0)
    hyper = (phi, 1.0, phi, 2.0)
    out = []
    for impl in (kernels.compiled, kernels.fallback):
        rng = np.random.Generator(np.random.PCG64(77))
        U, V = np.full((3, 2), 0.5), np.full((2, 2), 0.5)
        Ud, Vd = impl.gibbs_sweeps(rng, data.total(), data.n, U, V, *hyper, 30, 3, 20)
        out.append((Ud, Vd, U, V, rng.random()))
    (a, b) = out
    for x, y in zip(a[:4], b[:4]):
        assert np.array_equal(x, y)
    assert a[4] == b[4]  # both consumed the same number of variates


@compiled_only
def test_compiled_degenerate_chain_raises():
    rng = np.random.default_rng(0)
    with pytest.raises(NumericalError):
        kernels.compiled.gibbs_sweeps(rng, np.array([[3]]), 1, np.zeros((1, 1)), np.zeros((1, 1)),
                                      1.0, 1.0, 1.0, 1.0, 0, 1, 1)


@compiled_only
def test_predictive_backends_agree():
    rng = np.random.default_rng(6)
    X = rng.poisson(2.0, size=(300, 6))
    lfact = special.gammaln(X + 1.0).sum(axis=1)
    rates = rng.gamma(2.0, 1.0, size=(50, 6))
    args = (X, lfact, np.log(rates), rates.sum(axis=1))
    for a, b in zip(kernels.compiled.predictive_stats(*args), kernels.fallback.predictive_stats(*args)):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_posterior_draws_container(tmp_path):
    rng = np.random.default_rng(7)
    pairs = [FactorPair(rng.random((2, 1)), rng.random((1, 3))) for _ in range(4)]
    d = PosteriorDraws.from_pairs(pairs)
    assert d.K == len(d) == 4
    assert np.allclose(d.rates()[2], pairs[2].rate)
    data = CountDataset(rng.poisson(1.0, size=(5, 2, 3)))
    assert np.allclose(d.loglik(data)[:, 1], observation_loglik(data, pairs[1]))
    write_draws_jsonl(tmp_path / "d.jsonl", d)
    back = read_draws_jsonl(tmp_path / "d.jsonl")
    assert np.array_equal(back.U, d.U) and np.array_equal(back.V, d.V)
    (tmp_path / "bad.jsonl").write_text('{"U": [[1]]}\n')
    with pytest.raises(DomainError, match=":1:"):
        read_draws_jsonl(tmp_path / "bad.jsonl")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 10_000))
def test_sources_always_conserve(M, N, H, seed):
    rng = np.random.default_rng(seed)
    X = rng.poisson(4.0, size=(M, N))
    params = FactorPair(rng.gamma(0.3, size=(M, H)) + 1e-12, rng.gamma(0.3, size=(H, N)) + 1e-12)
    assert sample_latent_sources(X, params, rng).conserved()


@pytest.mark.parametrize("phi", [0.25, 1.0, 2.0])
def test_scalar_posterior_mean_matches_quadrature(phi):
    truth = FactorPair(np.array([[1.0]]), np.array([[1.0]]))
    data = generate_dataset(truth, 50, 100)
    dims = ModelDims(1, 1, 1, 1)
    draws = run_chain(data, Hyperparameters(phi, 1, phi, 1), dims, GibbsConfig(1000, 2, 20_000, seed=1))
    mean, se = batch_means_se(draws.rates().ravel())
    want = posterior_mean_uv(data.observations.ravel(), phi, 1, phi, 1)
    assert abs(mean - want) < 3 * se
