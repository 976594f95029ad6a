import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gdsd_lab.mdm import (
    DenoiserOutput,
    MLPDenoiser,
    PolicySnapshot,
    TabularDenoiser,
    TokenSequence,
    Vocabulary,
    apply_mask,
    complementary_mask,
    denoiser_logits,
    elbo_estimate,
    forward_mask,
    make_family,
    sample_views,
    seq_log_prob,
)
from gdsd_lab.numerics import Tensor, fd_grad, grad, grad_agreement
from gdsd_lab.oracles import exact_log_likelihood


def seq(n_c=8, prompt=(), v=4, seed=0):
    r = np.random.default_rng(seed)
    return TokenSequence(tuple(prompt) + tuple(r.integers(0, v, n_c)), len(prompt))


# -- types ---------------------------------------------------------------------------


def test_vocabulary_mask_id_outside_real_tokens():
    v = Vocabulary(5)
    assert v.mask_id == 5
    with pytest.raises(ValueError):
        Vocabulary(1)


def test_token_sequence_split():
    x = TokenSequence((1, 2, 3, 0, 1), 2)
    assert x.prompt == (1, 2) and x.completion == (3, 0, 1)
    assert list(x.completion_positions()) == [2, 3, 4]
    assert x.with_completion((2, 2, 2)).tokens == (1, 2, 2, 2, 2)
    with pytest.raises(ValueError):
        TokenSequence((1,), 2)
    with pytest.raises(ValueError):
        TokenSequence((4,)).validate(Vocabulary(4))


def test_old_and_ref_must_be_frozen():
    fam = TabularDenoiser(2, Vocabulary(2))
    with pytest.raises(ValueError):
        PolicySnapshot(fam, np.zeros(fam.num_params), "old", False)
    with pytest.raises(ValueError):
        PolicySnapshot(fam, np.zeros(fam.num_params + 1))
    snap = PolicySnapshot(fam, np.zeros(fam.num_params)).frozen_copy("ref")
    assert snap.frozen and snap.tag == "ref"


# -- forward masking -----------------------------------------------------------------------


def test_t0_masks_nothing_t1_masks_completion(rng):
    x0 = seq(prompt=(1, 2, 3))
    assert forward_mask(x0, 0.0, rng, 4).masked_positions == frozenset()
    m = forward_mask(x0, 1.0, rng, 4)
    assert m.masked_positions == frozenset(range(3, 11))
    assert m.tokens[:3] == (1, 2, 3)


def test_out_of_range_t_rejected(rng):
    with pytest.raises(ValueError):
        forward_mask(seq(), 1.5, rng, 4)
    with pytest.raises(ValueError):
        forward_mask(seq(), -0.1, rng, 4)


def test_half_masks_exactly_four_with_uniform_frequency():
    x0 = seq(8)
    counts = np.zeros(8)
    for s in range(10_000):
        m = forward_mask(x0, 0.5, np.random.default_rng(s), 4)
        assert len(m.masked_positions) == 4
        counts[list(m.masked_positions)] += 1
    assert np.all(np.abs(counts / 10_000 - 0.5) <= 0.02)


@given(st.floats(0, 1), st.integers(0, 10_000), st.integers(1, 8), st.integers(0, 3))
def test_masked_sequence_invariants(t, seed, n_c, p0):
    x0 = seq(n_c, prompt=(0,) * p0, seed=seed)
    for rule in ("count", "bernoulli"):
        m = forward_mask(x0, t, np.random.default_rng(seed), 4, rule)
        assert {i for i, tok in enumerate(m.tokens) if tok == 4} == set(m.masked_positions)
        assert all(p >= p0 for p in m.masked_positions)
        if rule == "count":
            assert len(m.masked_positions) == math.floor(t * n_c + 0.5)


def test_complement_of_first_two_of_four():
    x0 = seq(4)
    m = apply_mask(x0, {0, 1}, 0.5, 4)
    c = complementary_mask(m, x0, 4)
    assert c.masked_positions == frozenset({2, 3})
    assert c.t == 0.5
    assert c.tokens[:2] == x0.tokens[:2]


def test_complement_of_full_mask_is_empty(rng):
    x0 = seq(4)
    c = complementary_mask(forward_mask(x0, 1.0, rng, 4), x0, 4)
    assert c.masked_positions == frozenset() and c.t == 0.0


def test_complement_rejects_count_violation():
    x0 = seq(4)
    m = apply_mask(x0, {0}, 0.5, 4)  # 1 masked although round(0.5*4) = 2
    with pytest.raises(ValueError, match="round"):
        complementary_mask(m, x0, 4)


@given(st.integers(0, 10**6), st.floats(0.0, 1.0), st.integers(1, 8))
def test_complement_partitions_completion(seed, t, n_c):
    x0 = seq(n_c, prompt=(1, 1), seed=seed)
    rng = np.random.default_rng(seed)
    for rule in ("count", "bernoulli"):
        m = forward_mask(x0, t, rng, 4, rule)
        try:
            c = complementary_mask(m, x0, 4)
        except ValueError:
            # only a round-half tie can break the count rule for the complement
            assert rule == "count" and abs(t * n_c % 1 - 0.5) < 1e-9
            continue
        assert m.masked_positions | c.masked_positions == frozenset(x0.completion_positions())
        assert not m.masked_positions & c.masked_positions
        assert c.t == pytest.approx(1 - t)


def test_complement_over_100_random_masks():
    x0 = seq(8)
    r = np.random.default_rng(5)
    for _ in range(100):
        m = forward_mask(x0, float(r.random()), r, 4, "bernoulli")
        c = complementary_mask(m, x0, 4)
        assert m.masked_positions | c.masked_positions == set(range(8))
        assert not m.masked_positions & c.masked_positions


# -- denoisers ---------------------------------------------------------------------------------


def test_tabular_zero_params_give_zero_logits(rng):
    fam = TabularDenoiser(3, Vocabulary(3))
    pol = PolicySnapshot(fam, fam.init_params(rng, 0.0))
    x_t = forward_mask(seq(3, v=3), 0.7, rng, 3)
    assert np.array_equal(denoiser_logits(pol, x_t).values, np.zeros((3, 3)))


def test_tabular_context_limit():
    with pytest.raises(ValueError):
        TabularDenoiser(6, Vocabulary(4))  # 5**6 contexts


@pytest.mark.parametrize("kind", ["tabular", "mlp"])
def test_logits_deterministic_and_shape_checked(kind, rng):
    fam = make_family(kind, 4, Vocabulary(3), 1)
    pol = PolicySnapshot(fam, fam.init_params(rng, 1.0))
    x_t = forward_mask(seq(3, prompt=(2,), v=3), 0.6, rng, 3)
    a, b = denoiser_logits(pol, x_t).values, denoiser_logits(pol, x_t).values
    assert a.shape == (4, 3) and np.array_equal(a, b)
    with pytest.raises(ValueError):
        pol.family.logits(pol.params, np.zeros((1, 5), dtype=int))
    with pytest.raises(ValueError):
        pol.family.logits(pol.params, np.full((1, 4), 7))


def test_mlp_param_sensitivity_and_grad(rng):
    fam = MLPDenoiser(5, Vocabulary(4), 2, hidden=4, pos_dim=4)
    p = fam.init_params(rng, 1.0)
    x0 = seq(3, prompt=(1, 2), v=4)
    x_t = forward_mask(x0, 0.7, rng, 4)
    pol = PolicySnapshot(fam, p)
    base = denoiser_logits(pol, x_t).values
    bumped = p.copy()
    bumped[-1] += 0.1
    assert not np.array_equal(base, denoiser_logits(pol.with_params(bumped), x_t).values)
    # prompt rows carry no logits
    assert np.array_equal(base[:2], np.zeros((2, 4)))
    fn = lambda q: seq_log_prob(denoiser_logits(pol, x_t, q), x0, x_t.masked_positions) + \
        denoiser_logits(pol, x_t, q).logits.square().sum() * 0.01
    c, e = grad_agreement(grad(fn, p), fd_grad(fn, p))
    assert c > 0.9999 and e < 1e-4


# -- sequence log-probs ---------------------------------------------------------------------------


def test_seq_log_prob_examples():
    x0 = TokenSequence((0, 2, 1))
    uni = DenoiserOutput(Tensor(np.zeros((3, 3))))
    assert seq_log_prob(uni, x0, {0, 2}).item() == pytest.approx(2 * math.log(1 / 3))
    assert seq_log_prob(uni, x0, set()).item() == 0.0
    out = DenoiserOutput(Tensor(np.array([[0.0, 0, 0], [1.0, 2.0, 3.0], [0, 0, 0]])))
    want = math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    assert seq_log_prob(out, x0, {1}).item() == pytest.approx(want, abs=1e-14)
    with pytest.raises(ValueError):
        seq_log_prob(out, x0, {3})


@given(st.integers(0, 10**6), st.floats(-50, 50))
def test_seq_log_prob_factorizes_and_is_shift_invariant(seed, c):
    r = np.random.default_rng(seed)
    logits = r.normal(size=(5, 4))
    x0 = TokenSequence(tuple(r.integers(0, 4, 5)))
    a, b = {0, 3}, {1, 4}
    f = lambda L, s: seq_log_prob(DenoiserOutput(Tensor(L)), x0, s).item()
    assert f(logits, a | b) == pytest.approx(f(logits, a) + f(logits, b), abs=1e-12)
    shifted = logits + c * np.arange(5)[:, None]  # per-row constants
    assert f(shifted, a | b) == pytest.approx(f(logits, a | b), abs=1e-9)


# -- ELBO ---------------------------------------------------------------------------------


def test_perfect_denoiser_elbo_is_zero(rng):
    x0 = TokenSequence((1, 0, 2))
    fam = TabularDenoiser(3, Vocabulary(3))
    p = np.zeros(fam.num_params).reshape(-1, 3, 3)
    p[..., :] = 0.0
    for pos, tok in enumerate(x0.tokens):
        p[:, pos, tok] = 1e4  # softmax puts all mass on the clean token
    pol = PolicySnapshot(fam, p.ravel())
    for k in (1, 3):
        assert elbo_estimate(pol, x0, k, rng) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("rule", ["bernoulli", "count"])
def test_uniform_denoiser_elbo(rule, rng):
    n_c, v = 4, 3
    x0 = TokenSequence((0, 1, 2, 0))
    fam = TabularDenoiser(n_c, Vocabulary(v))
    pol = PolicySnapshot(fam, np.zeros(fam.num_params))
    draws = np.array([elbo_estimate(pol, x0, 1, rng, rule=rule) for _ in range(10_000)])
    target = n_c * math.log(1 / v)
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    if rule == "bernoulli":
        assert abs(draws.mean() - target) < 3 * se
    else:
        # rejection of empty masks plus rounding biases the count-rule estimator away from it
        assert abs(draws.mean() - target) > 3 * se


def test_elbo_below_exact_likelihood_v2n2():
    r = np.random.default_rng(3)
    fam = TabularDenoiser(2, Vocabulary(2))
    pol = PolicySnapshot(fam, fam.init_params(r, 1.0))
    for toks in [(0, 0), (0, 1), (1, 0), (1, 1)]:
        x0 = TokenSequence(toks)
        draws = np.array([elbo_estimate(pol, x0, 1, r) for _ in range(10_000)])
        se = draws.std(ddof=1) / 100
        assert exact_log_likelihood(pol, x0) - draws.mean() >= -3 * se


def test_sample_views_count_rule_never_empty(rng):
    x0 = seq(3)
    views = sample_views(x0, 200, rng, 4, "count", coupled=True)
    for m, c in views:
        assert m.masked_positions
        assert m.masked_positions | c.masked_positions == set(range(3))
    with pytest.raises(ValueError):
        sample_views(x0, 0, rng, 4)
