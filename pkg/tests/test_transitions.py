import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jccmdp import mdp, transitions
from jccmdp.chance import RandomVectorSpec
from jccmdp.costs import MISSING_DATA, CostUncertainty
from jccmdp.generators import (GarnetConfig, garnet_instance, sample_cost_realization,
                               sample_transition_realization, INDEPENDENT)
from jccmdp.transitions import TransitionUncertainty
from jccmdp.validation import mc_check_tp


def small_garnet(seed, eta=0.01, n_states=5, n_actions=2, branching=3, **kw):
    cfg = GarnetConfig(n_states=n_states, n_actions=n_actions, branching=branching, eta=eta,
                       seed=seed, n_cov_samples=500, **kw)
    return garnet_instance(cfg)


@given(seed=st.integers(0, 2**31))
@settings(max_examples=20)
def test_perturbed_kernels_stay_stochastic(seed):
    inst, _, tp = small_garnet(seed, eta=0.05)
    zeta = sample_transition_realization(inst, tp, seed, n=50)
    np.testing.assert_allclose(zeta.sum(axis=-1), 0.0, atol=1e-12)
    assert np.all(zeta <= tp.zeta_upper + 1e-15)
    assert np.all(zeta >= tp.zeta_lower - 1e-15)
    P = inst.kernel + zeta
    assert np.all(P >= -1e-15) and np.all(P <= 1 + 1e-15)


def test_q_identity_residual():
    inst, _, tp = small_garnet(1, eta=0.05)
    rng = np.random.default_rng(0)
    pol = mdp.StationaryPolicy(rng.dirichlet(np.ones(2), size=5).ravel())
    for zeta in sample_transition_realization(inst, tp, rng, n=200):
        assert transitions.q_identity_residual(inst, pol, zeta) <= 1e-10


def test_envelopes_contain_tail_costs():
    inst, costs, tp = small_garnet(2, eta=0.05)
    env = transitions.cost_envelopes(inst, tp)
    assert np.all(env.lower <= env.upper)
    pol = mdp.uniform_policy(inst)
    rep = mc_check_tp(inst, tp, pol, z=np.inf, n=2000, seed=3)
    assert rep.envelope_violations == 0
    assert rep.p_objective == 1.0


def test_anchor_weights_are_nonnegative():
    inst, _, tp = small_garnet(4)
    env = transitions.cost_envelopes(inst, tp)
    for row, anchor in zip(env.upper, env.anchors_upper):
        w = transitions._anchor_weights(row, anchor)
        assert w.min() == 0.0 and np.all(w >= 0)


def test_g_weights_nonpositive_and_vanish_without_perturbation():
    inst, _, tp = small_garnet(5)
    env = transitions.cost_envelopes(inst, tp)
    g = transitions.g_weights(inst, tp, env)
    assert np.all(g <= 1e-12)
    assert not np.any(transitions.g_weights(inst, tp.zeroed(), env))


def test_bound_checks():
    inst, costs, tp = small_garnet(6)
    with pytest.raises(ValueError):
        TransitionUncertainty(-tp.zeta_upper - 1, tp.zeta_lower, costs)
    bad = tp.zeta_lower.copy()
    bad[inst.kernel == 0] = -1e-3
    with pytest.raises(ValueError):
        TransitionUncertainty(tp.zeta_upper, bad, costs).check(inst)
    tp.check(inst)


def test_zeroed_collapse_to_deterministic_lp():
    inst, costs, tp = small_garnet(7)
    flat = tp.zeroed()
    exact = mdp.solve_exact_cmdp(inst, costs.c.mean, [d.mean for d in costs.d])
    assert exact.status == mdp.OPTIMAL
    for m in transitions.TP_UPPER_METHODS + (transitions.TP_LOWER_METHOD,):
        res = transitions.solve_tp_method(inst, flat, m)
        assert res.optimal, (m, res.status)
        assert res.value == pytest.approx(exact.value, abs=1e-6), m


def test_chebyshev_needs_row_covariance():
    inst, costs, tp = small_garnet(8)
    bare = TransitionUncertainty(tp.zeta_upper, tp.zeta_lower, costs)
    assert transitions.solve_tp_method(inst, bare, "tp.chebyshev").status == MISSING_DATA


@settings(max_examples=10)
@given(seed=st.integers(0, 2**31), eta=st.sampled_from([1e-4, 1e-3, 1e-2]))
def test_sandwich_and_extremal_containment(seed, eta):
    inst, _, tp = small_garnet(seed, eta=eta)
    rep = transitions.solve_random_tp(inst, tp)
    lower = rep.lower
    if not lower.optimal:
        return
    assert lower.value >= rep.extremal["lb"] - 1e-6
    for m in rep.upper_methods():
        res = rep.results[m]
        if res.optimal:
            assert res.value >= lower.value - 1e-6
            assert res.value <= rep.extremal["ub"][m] + 1e-6
            if isinstance(rep.gaps[m], float):
                assert rep.gaps[m] <= rep.extremal["G"][m] + 1e-6


def test_chebyshev_policy_passes_mc():
    inst, _, tp = small_garnet(9, eta=0.01)
    res = transitions.solve_tp_method(inst, tp, "tp.chebyshev")
    assert res.optimal
    rep = mc_check_tp(inst, tp, res.policy, res.value, n=5000, seed=4)
    assert rep.passes(tp.costs.p0, tp.costs.p1)
    assert rep.envelope_violations == 0


def test_method_names_are_prefixed():
    inst, _, tp = small_garnet(10)
    rep = transitions.solve_random_tp(inst, tp, methods=("hoeffding",), extremal=False)
    assert list(rep.results) == ["tp.hoeffding", "tp.lower"]


def test_independent_cost_draws_respect_bounds():
    _, costs, _ = small_garnet(11)
    c, d = sample_cost_realization(costs, INDEPENDENT, 0, n=500)
    assert np.all(c <= costs.c.upper) and np.all(c >= costs.c.lower)
    for k, spec in enumerate(costs.d):
        assert np.all(d[:, k] <= spec.upper) and np.all(d[:, k] >= spec.lower)


def test_envelopes_for_uniform_costs():
    inst, costs, tp = small_garnet(9)
    flat = tp.zeroed()
    cbar = 4.0
    const = RandomVectorSpec(np.full(inst.n_pairs, cbar), cov=np.zeros(inst.n_pairs),
                             upper=np.full(inst.n_pairs, cbar), lower=np.full(inst.n_pairs, cbar))
    unc = TransitionUncertainty(flat.zeta_upper, flat.zeta_lower,
                                CostUncertainty(const, (const,) * costs.n_constraints))
    env = transitions.cost_envelopes(inst, unc)
    np.testing.assert_allclose(env.upper, cbar / (1 - inst.alpha))
    np.testing.assert_allclose(env.lower, cbar / (1 - inst.alpha))


def test_chebyshev_value_invariant_to_anchor_choice():
    # rows of a perturbation sum to zero, so shifting the weights by a constant changes nothing
    inst, _, tp = small_garnet(10, eta=0.01)
    env = transitions.cost_envelopes(inst, tp)
    base = transitions.solve_tp_method(inst, tp, "tp.chebyshev")
    other = transitions.solve_tp_method(inst, tp, "tp.chebyshev", anchors=np.argmax(env.upper, axis=1))
    assert base.optimal and other.optimal
    assert other.value == pytest.approx(base.value, abs=1e-6)


def test_zero_eta_methods_agree_with_robust_lp():
    inst, costs, tp = small_garnet(11, eta=0.0)
    robust = mdp.solve_exact_cmdp(inst, costs.c.upper, [d.upper for d in costs.d])
    assert robust.status == mdp.OPTIMAL
    for m in transitions.TP_UPPER_METHODS:
        res = transitions.solve_tp_method(inst, tp, m)
        assert res.optimal, (m, res.status)
        assert res.value == pytest.approx(robust.value, abs=1e-6), m
