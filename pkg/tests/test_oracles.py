import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gdsd_lab.decoder import DecodeSchedule
from gdsd_lab.mdm import PolicySnapshot, TokenSequence, Vocabulary, apply_mask, denoiser_logits, seq_log_prob
from gdsd_lab.oracles import (
    EnumerableInstance,
    SequenceModel,
    brute_force_partition,
    brute_force_teacher,
    cond_log_probs,
    elbo_draws,
    exact_elbo,
    exact_log_likelihood,
    lemma1_optimality_gap,
    logsumexp,
    mask_law,
    random_instance,
    tim_fixture,
    tim_report,
)
from gdsd_lab.verify import TIM_FIXTURE_VALUE, random_advantage, random_masked_state


def uniform_instance(v=3, n_c=2):
    inst = EnumerableInstance(Vocabulary(v), n_c)
    fam = inst.family()
    z = np.zeros(fam.num_params)
    inst.policies = {"theta": PolicySnapshot(fam, z), "old": PolicySnapshot(fam, z, "old", True),
                     "ref": PolicySnapshot(fam, z, "ref", True)}
    return inst


def test_instance_size_limits():
    with pytest.raises(ValueError):
        EnumerableInstance(Vocabulary(5), 2)
    with pytest.raises(ValueError):
        EnumerableInstance(Vocabulary(3), 5)
    assert len(EnumerableInstance(Vocabulary(4), 4).completions()) == 256


# -- partition and teacher ---------------------------------------------------------------


@pytest.mark.parametrize("beta", [0.0, 0.3, 1.0])
def test_partition_uniform_zero_advantage_is_one(beta, rng):
    inst = uniform_instance()
    x_t = random_masked_state(inst, rng)
    assert brute_force_partition(inst, x_t, lambda y: 0.0, 4.0, beta) == pytest.approx(1.0, abs=1e-14)


def test_partition_beta0_zero_advantage_is_one(rng):
    inst = random_instance(rng)
    for _ in range(5):
        x_t = random_masked_state(inst, rng)
        assert brute_force_partition(inst, x_t, lambda y: 0.0, 3.0, 0.0) == pytest.approx(1.0, abs=1e-12)


@given(st.integers(0, 10**6))
def test_partition_order_independent(seed):
    r = np.random.default_rng(seed)
    inst = random_instance(r)
    x_t = random_masked_state(inst, r)
    adv = random_advantage(inst, r)
    z = brute_force_partition(inst, x_t, adv, 2.0, 0.4)
    n = 3 ** len(x_t.masked_positions)
    zp = brute_force_partition(inst, x_t, adv, 2.0, 0.4, order=r.permutation(n))
    assert zp == pytest.approx(z, rel=1e-12)


def test_teacher_guidance_off(rng):
    inst = random_instance(rng)
    x_t = random_masked_state(inst, rng, 2)
    adv = random_advantage(inst, rng)
    teach = brute_force_teacher(inst, x_t, adv, 0.0, 0.4)
    _, lo = cond_log_probs(inst.policies["old"], x_t)
    _, lr = cond_log_probs(inst.policies["ref"], x_t)
    mix = 0.6 * lo + 0.4 * lr
    np.testing.assert_allclose(teach.log_probs, mix - logsumexp(mix), atol=1e-13)
    assert teach.a_t == pytest.approx(0.0, abs=1e-14)


def test_teacher_constant_advantage(rng):
    inst = random_instance(rng)
    x_t = random_masked_state(inst, rng, 2)
    base = brute_force_teacher(inst, x_t, lambda y: 0.0, 5.0, 0.2)
    shifted = brute_force_teacher(inst, x_t, lambda y: 0.7, 5.0, 0.2)
    np.testing.assert_allclose(shifted.probs, base.probs, atol=1e-14)
    assert shifted.a_t == pytest.approx(3.5, abs=1e-12)


@given(st.integers(0, 10**6), st.floats(0, 10), st.floats(0, 1))
def test_teacher_normalized_and_a_t_consistent(seed, psi, beta):
    r = np.random.default_rng(seed)
    inst = random_instance(r)
    x_t = random_masked_state(inst, r)
    adv = random_advantage(inst, r)
    teach = brute_force_teacher(inst, x_t, adv, psi, beta)
    assert teach.probs.sum() == pytest.approx(1.0, abs=1e-12)
    z = brute_force_partition(inst, x_t, adv, psi, beta)
    z0 = brute_force_partition(inst, x_t, lambda y: 0.0, 0.0, beta)
    assert teach.a_t == pytest.approx(math.log(z / z0), abs=1e-10)
    assert teach.log_z == pytest.approx(math.log(z), abs=1e-10)


def test_lemma1_closed_form_is_optimal(rng):
    inst = random_instance(rng)
    x_t = random_masked_state(inst, rng, 2)
    res = lemma1_optimality_gap(inst, x_t, random_advantage(inst, rng), 2.0, 0.3, rng)
    assert res["gap"] >= -1e-6
    assert res["gap"] <= 1e-6  # ascent converges to the same optimum


def test_cond_log_probs_sequence_model_is_posterior(rng):
    inst = random_instance(rng)
    sm = SequenceModel.random(inst, rng)
    x_t = apply_mask(TokenSequence((2, 1)), {1}, 0.5, 3)
    seqs, lp = cond_log_probs(sm, x_t)
    assert seqs == [(2, 0), (2, 1), (2, 2)]
    joint = np.array([sm.log_prob(s) for s in seqs])
    np.testing.assert_allclose(lp, joint - logsumexp(joint), atol=1e-14)


# -- likelihood and ELBO -------------------------------------------------------------------------


@pytest.mark.parametrize("rule, w", [("bernoulli", None), ("count", None)])
def test_mask_law_is_a_distribution(rule, w):
    for n_c in (1, 2, 3, 4):
        assert sum(p for _, p in mask_law(n_c, rule, w)) == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("rule", ["bernoulli", "count"])
def test_exact_elbo_matches_monte_carlo(rule):
    r = np.random.default_rng(2)
    inst = random_instance(r, 3, 3)
    pol = inst.policies["theta"]
    x0 = inst.completions()[11]
    draws = elbo_draws(pol, x0, 40_000, r, rule=rule)
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    assert abs(draws.mean() - exact_elbo(pol, x0, rule=rule)) < 4 * se


def test_uniform_exact_likelihood_and_elbo():
    inst = uniform_instance(3, 3)
    pol = inst.policies["old"]
    for x0 in inst.completions()[:5]:
        assert exact_log_likelihood(pol, x0) == pytest.approx(3 * math.log(1 / 3), abs=1e-12)
        assert exact_elbo(pol, x0) == pytest.approx(3 * math.log(1 / 3), abs=1e-12)


def test_single_step_exact_likelihood(rng):
    inst = random_instance(rng)
    pol = inst.policies["theta"]
    sched = DecodeSchedule(1, "random", None, 1.0)
    for x0 in inst.completions():
        out = denoiser_logits(pol, apply_mask(x0, {0, 1}, 1.0, 3))
        want = seq_log_prob(out, x0, {0, 1}).item()
        assert exact_log_likelihood(pol, x0, sched) == pytest.approx(want, abs=1e-12)


def test_exact_elbo_below_likelihood(rng):
    for _ in range(10):
        inst = random_instance(rng, 3, 3, scale=2.0)
        pol = inst.policies["theta"]
        for x0 in inst.completions()[::4]:
            assert exact_elbo(pol, x0) <= exact_log_likelihood(pol, x0) + 1e-12


# -- TIM ---------------------------------------------------------------------------------------


def test_tim_identical_policies_have_zero_bias(rng):
    inst, sched = tim_fixture()
    inst.policies["theta"] = PolicySnapshot(inst.family(), inst.policies["old"].params.copy())
    rep = tim_report(inst, sched, 2, 10, rng)
    assert all(r["ratio_bias"] == 0.0 for r in rep.rows)


def test_tim_uniform_policies_agree():
    inst = uniform_instance(2, 3)
    sched = DecodeSchedule(3, "random", None, 1.0)
    rep = tim_report(inst, sched, 2, 50, np.random.default_rng(0))
    want = 3 * math.log(1 / 2)
    for r in rep.rows:
        for key in ("log_pi_rm", "exact_log_likelihood", "elbo_exact"):
            assert r[key] == pytest.approx(want, abs=1e-12)


def test_tim_fixture_regression():
    inst, sched = tim_fixture(7)
    rep = tim_report(inst, sched, 2, 8, np.random.default_rng(7))
    assert rep.summary["mean_abs_ratio_bias"] > 0
    assert rep.summary["mean_abs_ratio_bias"] == pytest.approx(0.04807087573557911, abs=1e-9)
    assert TIM_FIXTURE_VALUE == pytest.approx(0.04807087573557911, abs=1e-15)
    assert rep.summary["rm_mass"] == pytest.approx(1.0, abs=1e-10)


def test_tim_elbo_mean_within_bound():
    inst, sched = tim_fixture(3, v=3, n_c=2)
    rep = tim_report(inst, sched, 1, 4000, np.random.default_rng(1))
    for r in rep.rows:
        se = r["elbo_std"] / math.sqrt(4000)
        assert r["elbo_mean"] <= r["exact_log_likelihood"] + 3 * se
