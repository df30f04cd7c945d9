import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from jccmdp import generators as gen
from jccmdp.chance import gumbel_hougaard


def test_queueing_kernel_rows():
    P = gen.queueing_kernel(10, 0.75, 0.5)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    assert P[0, 0] == pytest.approx(1 - 0.25 * 0.5)
    assert P[5, 4] == pytest.approx(0.75 * 0.5)
    assert P[5, 6] == pytest.approx(0.25 * 0.5)
    assert P[10, 9] == pytest.approx(0.75)


def test_queueing_instance_costs():
    inst, unc = gen.queueing_instance(gen.QueueingConfig(seed=1))
    assert inst.actions_per_state == (9,) * 11
    # objective cost is the queue length, independent of the action
    np.testing.assert_array_equal(unc.c.mean[:9], 0.0)
    np.testing.assert_array_equal(unc.c.mean[9:18], 1.0)
    a1 = np.repeat([0.2, 0.75, 0.9], 3)
    np.testing.assert_allclose(unc.d[0].mean[:9], 3 * (1 + a1) ** 2)
    a2 = np.tile([0.0, 0.5, 0.8], 3)
    np.testing.assert_allclose(unc.d[1].mean[:9], 10 - 3 * a2)
    for spec in unc.specs():
        assert np.all(spec.cov >= 0) and np.all(spec.cov <= 0.8)
        assert np.all(spec.lower <= spec.mean) and np.all(spec.mean <= spec.upper)


def test_generators_are_seed_deterministic():
    a = gen.garnet_instance(gen.GarnetConfig(n_states=6, n_actions=2, branching=3, seed=5))
    b = gen.garnet_instance(gen.GarnetConfig(n_states=6, n_actions=2, branching=3, seed=5))
    np.testing.assert_array_equal(a[0].kernel, b[0].kernel)
    np.testing.assert_array_equal(a[2].zeta_upper, b[2].zeta_upper)
    np.testing.assert_array_equal(a[2].row_cov, b[2].row_cov)


@settings(max_examples=15)
@given(seed=st.integers(0, 2**31), branching=st.integers(1, 6))
def test_garnet_branching(seed, branching):
    cfg = gen.GarnetConfig(n_states=6, n_actions=3, branching=branching, seed=seed)
    inst, _, tp = gen.garnet_instance(cfg, with_covariance=False)
    nz = np.count_nonzero(inst.kernel, axis=1)
    assert np.all(nz <= branching)
    np.testing.assert_allclose(inst.kernel.sum(axis=1), 1.0, atol=1e-12)
    tp.check(inst)


def test_garnet_config_validation():
    with pytest.raises(ValueError):
        gen.GarnetConfig(n_states=5, branching=6)
    with pytest.raises(ValueError):
        gen.config_from_dict("garnet", {"nope": 1})


def test_extreme_order_statistics_match_distribution():
    rng = np.random.default_rng(0)
    n = 50
    u_min, u_max = gen._extreme_uniforms(rng, n, (20_000,))
    # min of n uniforms is Beta(1, n), max is Beta(n, 1)
    assert stats.kstest(u_min, stats.beta(1, n).cdf).pvalue > 1e-3
    assert stats.kstest(u_max, stats.beta(n, 1).cdf).pvalue > 1e-3
    assert np.all(u_min <= u_max)


def test_zero_variance_bounds_equal_mean():
    up, lo = gen.cost_bounds_from_samples(np.array([1.0, 2.0]), np.array([0.0, 0.0]), seed=0)
    np.testing.assert_array_equal(up, [1.0, 2.0])
    np.testing.assert_array_equal(lo, [1.0, 2.0])


def test_perturbation_bounds_respect_kernel():
    mu = np.array([[0.0, 0.3, 0.7], [1.0, 0.0, 0.0]])
    up, lo = gen.perturbation_bounds(mu, 0.1, seed=1)
    assert np.all(lo[mu == 0] == 0)
    assert np.all(mu + lo >= 0) and np.all(mu + up <= 1)
    up0, lo0 = gen.perturbation_bounds(mu, 0.0, seed=1)
    assert not np.any(up0) and not np.any(lo0)


@given(seed=st.integers(0, 2**31))
@settings(max_examples=25)
def test_project_zero_sum(seed):
    rng = np.random.default_rng(seed)
    lo = -rng.uniform(0, 0.2, (4, 5))
    hi = rng.uniform(0, 0.2, (4, 5))
    x = lo + (hi - lo) * rng.random((4, 5))
    y = gen.project_zero_sum(x, lo, hi)
    np.testing.assert_allclose(y.sum(axis=-1), 0.0, atol=1e-13)
    assert np.all(y >= lo) and np.all(y <= hi)


def test_truncated_gaussian_ppf():
    u = np.linspace(0.001, 0.999, 999)
    x = gen.truncated_gaussian_ppf(u, 0.0, 1.0, -1.0, 2.0)
    assert np.all(np.diff(x) > 0)
    assert x.min() >= -1.0 and x.max() <= 2.0
    assert gen.truncated_gaussian_ppf(0.3, 5.0, 0.0, 5.0, 5.0) == 5.0


def test_positive_stable_laplace_transform():
    rng = np.random.default_rng(3)
    a = 0.5
    v = gen.positive_stable(rng, a, 200_000)
    for t in (0.5, 1.0, 2.0):
        assert np.mean(np.exp(-t * v)) == pytest.approx(np.exp(-t ** a), abs=5e-3)


@pytest.mark.parametrize("theta", [1.0, 2.0, 10.0])
def test_gumbel_sampler_matches_copula(theta):
    U = gen.gumbel_uniforms(theta, 2, 100_000, seed=7)
    for u in ([0.5, 0.5], [0.3, 0.8], [0.9, 0.9]):
        emp = np.mean(np.all(U <= u, axis=1))
        assert emp == pytest.approx(gumbel_hougaard(u, theta), abs=6e-3)
    assert stats.kstest(U[:, 0], "uniform").pvalue > 1e-3


def test_comonotone_sampler_moments():
    _, unc = gen.queueing_instance(gen.QueueingConfig(seed=2))
    c, d = gen.sample_cost_realization(unc, gen.COPULA_COMONOTONE, seed=0, n=20_000)
    assert c.shape == (20_000, 99) and d.shape == (20_000, 2, 99)
    np.testing.assert_allclose(d.mean(axis=0)[0], unc.d[0].mean, atol=0.03)
    # within one constraint vector the draws share a single uniform
    ranks = np.argsort(np.argsort(d[:, 0, :], axis=0), axis=0)
    live = unc.d[0].cov > 1e-3
    i, j = np.flatnonzero(live)[:2]
    assert np.corrcoef(ranks[:, i], ranks[:, j])[0, 1] > 0.999


def test_bundle_round_trip():
    inst, costs, tp = gen.garnet_instance(gen.GarnetConfig(n_states=4, n_actions=2, branching=2, seed=3))
    text = gen.dumps_bundle(inst, costs, tp, {"generator": "garnet"})
    inst2, costs2, tp2, meta = gen.loads_bundle(text)
    np.testing.assert_array_equal(inst2.kernel, inst.kernel)
    np.testing.assert_array_equal(costs2.c.upper, costs.c.upper)
    np.testing.assert_array_equal(tp2.zeta_lower, tp.zeta_lower)
    assert meta == {"generator": "garnet"}
