import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sera.losses import (
    LossKind,
    NonFiniteLossError,
    PairBatch,
    PreferencePair,
    Variant,
    implicit_reward,
    irm,
    loss,
    loss_grad,
    loss_slopes,
    loss_values,
    preference_prob,
    sigmoid,
    simpo_reward,
    softplus,
)
from sera.policy import TabularPolicy, Vocab, log_prob

from conftest import central_diff, random_policy, random_prompt, random_response, rel_err


def single_token_policy(vocab, row, probs):
    logits = np.zeros((vocab.n_rows, vocab.n_cols))
    logits[row] = np.log(probs)
    return TabularPolicy(vocab, logits)


def random_pair(rng, vocab, pid=0):
    x = random_prompt(rng, vocab)
    while True:
        yw, yl = random_response(rng, vocab), random_response(rng, vocab)
        if yw != yl:
            return PreferencePair(x, yw, yl, pid)


def test_pair_rejects_identical_responses():
    with pytest.raises(ValueError):
        PreferencePair((0,), (1, 2), (1, 2))


def test_implicit_reward_hand_value(v4):
    pol = single_token_policy(v4, 0, [0.8, 0.05, 0.05, 0.05, 0.05])
    ref = single_token_policy(v4, 0, [0.5, 0.125, 0.125, 0.125, 0.125])
    assert implicit_reward(pol, ref, (0,), (0,)) == pytest.approx(math.log(0.8 / 0.5), abs=1e-12)
    assert implicit_reward(pol, ref, (0,), (0,)) == pytest.approx(0.470004, abs=1e-6)
    assert implicit_reward(ref, pol, (0,), (0,)) == -implicit_reward(pol, ref, (0,), (0,))


def test_implicit_reward_zero_for_identical_policies(rng, v4):
    p = random_policy(rng, v4)
    q = TabularPolicy(v4, p.logits)
    assert implicit_reward(p, q, (1,), (2, 3)) == 0.0


def test_implicit_reward_vocab_mismatch(rng):
    with pytest.raises(ValueError, match="vocab"):
        implicit_reward(random_policy(rng, Vocab(3)), random_policy(rng, Vocab(4)), (0,), (1,))


def test_irm_hand_value(v4):
    # rewards 0.7 for token 0 and 0.2 for token 1 under a fixed reference row
    ref_p = np.full(5, 0.2)
    pol_p = ref_p * np.exp([0.7, 0.2, 0.0, 0.0, 0.0])
    pol_p[2:] = (1 - pol_p[:2].sum()) / 3
    pol = single_token_policy(v4, 3, pol_p)
    ref = single_token_policy(v4, 3, ref_p)
    pair = PreferencePair((3,), (0,), (1,))
    assert irm(pol, ref, pair) == pytest.approx(0.5, abs=1e-12)
    assert irm(pol, ref, pair.swapped()) == -irm(pol, ref, pair)


def test_simpo_reward(v4):
    uni = TabularPolicy.uniform(v4)
    for y in [(1,), (1, 2), (0, 3, 2, v4.eos_id)]:
        assert simpo_reward(uni, (0,), y, 0.2) == pytest.approx(-0.2 * math.log(5), abs=1e-12)
    assert simpo_reward(uni, (0,), (1, 2), 0.4) == pytest.approx(2 * simpo_reward(uni, (0,), (1, 2), 0.2), abs=1e-15)
    with pytest.raises(ValueError):
        simpo_reward(uni, (0,), (), 0.2)


def test_simpo_reward_is_beta_mean_token_log_prob(rng):
    vocab = Vocab(6)
    pol = random_policy(rng, vocab)
    y = (1, 4, 2)
    lp = pol.log_probs
    mean_tok = (lp[0, 1] + lp[1, 4] + lp[4, 2]) / 3
    assert abs(simpo_reward(pol, (0,), y, 0.3) - 0.3 * mean_tok) <= 1e-12


def test_preference_prob_examples():
    assert preference_prob(0.0, 0.7) == 0.5
    assert preference_prob(math.log(3), 1.0) == pytest.approx(0.75, abs=1e-15)
    assert preference_prob(1e6, 1.0) == 1.0


def test_closed_form_losses():
    assert abs(loss(LossKind("dpo", 0.37), 0.0) - math.log(2)) <= 1e-12
    assert loss(LossKind("ipo", 1.0), 0.5) == 0.0
    assert loss(LossKind("ipo", 0.5), 0.0) == pytest.approx(1.0, abs=1e-15)
    assert loss(LossKind("slic", 0.2), 0.0) == 1.0
    assert loss(LossKind("slic", 0.2), 5.0) == 0.0
    assert loss(LossKind("slic", 0.2), 12.0) == 0.0
    assert loss(LossKind("simpo", 0.2), 0.0) == pytest.approx(math.log(2), abs=1e-12)


def test_losses_nonnegative_and_monotone():
    m = np.linspace(-20, 20, 401)
    for v in ("dpo", "slic", "simpo"):
        vals = loss_values(LossKind(v, 0.3), m)
        assert np.all(vals >= 0)
        assert np.all(np.diff(vals) <= 1e-15)
    ipo = loss_values(LossKind("ipo", 0.25), m)
    assert np.all(ipo >= 0)
    assert m[np.argmin(ipo)] == pytest.approx(2.0)


def test_stable_primitives_at_extremes():
    assert sigmoid(-800.0) == 0.0 and sigmoid(800.0) == 1.0
    assert softplus(800.0) == 800.0
    assert softplus(-800.0) == 0.0


def test_default_betas():
    assert LossKind.default("dpo").beta == 0.2
    assert LossKind.default("slic").beta == 0.2
    assert LossKind.default("ipo").beta == 1.0
    with pytest.raises(ValueError):
        LossKind("dpo", 0.0)
    with pytest.raises(ValueError):
        LossKind("kto", 0.1)


@pytest.mark.parametrize("variant", [v.value for v in Variant])
def test_loss_grad_finite_differences(variant):
    rng = np.random.default_rng(hash(variant) % 2**32)
    worst = 0.0
    checked = 0
    while checked < 100:
        vocab = Vocab(int(rng.integers(2, 9)))
        kind = LossKind(variant, float(rng.uniform(0.1, 2.0)))
        pol, ref = random_policy(rng, vocab), random_policy(rng, vocab)
        pair = random_pair(rng, vocab)
        m = irm(pol, ref, pair, kind)
        if variant == "slic" and abs(kind.beta * m - 1.0) < 1e-4:
            continue
        checked += 1

        def f(th):
            return loss(kind, irm(TabularPolicy(vocab, th), ref, pair, kind))

        num = central_diff(f, np.array(pol.logits))
        worst = max(worst, rel_err(loss_grad(kind, pol, ref, pair), num))
    assert worst < 1e-6


def test_dpo_gradient_vanishes_at_saturation(v4):
    pol = single_token_policy(v4, 0, [0.999999, 2.5e-7, 2.5e-7, 2.5e-7, 2.5e-7])
    ref = TabularPolicy.uniform(v4)
    pair = PreferencePair((0,), (0, 0, 0, 0) * 20, (1,) * 80)
    kind = LossKind("dpo", 1.0)
    assert irm(pol, ref, pair) > 100
    assert np.linalg.norm(loss_grad(kind, pol, ref, pair)) < 1e-8


def test_slic_flat_region_and_kink(rng, v4):
    ref = TabularPolicy.uniform(v4)
    pol = single_token_policy(v4, 0, [0.9, 0.025, 0.025, 0.025, 0.025])
    pair = PreferencePair((0,), (0,), (1,))
    m = irm(pol, ref, pair)
    assert not np.any(loss_grad(LossKind("slic", 2.0 / m), pol, ref, pair))  # beta*m = 2
    # exactly at the kink (beta * m == 1 in floating point) the subgradient is 0
    assert float(loss_slopes(LossKind("slic", 0.2), 5.0)) == 0.0
    assert float(loss_slopes(LossKind("slic", 0.5), 2.0)) == 0.0
    assert float(loss_slopes(LossKind("slic", 0.5), 1.999)) == -0.5


def test_preference_prob_matches_closed_form(rng):
    vocab = Vocab(5)
    for _ in range(50):
        pol, ref = random_policy(rng, vocab), random_policy(rng, vocab)
        pair = random_pair(rng, vocab)
        beta = float(rng.uniform(0.1, 2))
        pw, pl = math.exp(log_prob(pol, pair.prompt, pair.chosen)), math.exp(log_prob(pol, pair.prompt, pair.rejected))
        rw, rl = math.exp(log_prob(ref, pair.prompt, pair.chosen)), math.exp(log_prob(ref, pair.prompt, pair.rejected))
        closed = 1.0 / (1.0 + ((pl * rw) / (pw * rl)) ** beta)
        assert abs(preference_prob(irm(pol, ref, pair), beta) - closed) <= 1e-12


@pytest.mark.parametrize("variant", ["dpo", "ipo", "slic", "simpo"])
def test_small_step_decreases_pair_loss(variant, rng):
    vocab = Vocab(5)
    kind = LossKind(variant, 0.5)
    for _ in range(20):
        pol, ref = random_policy(rng, vocab), random_policy(rng, vocab)
        pair = random_pair(rng, vocab)
        g = loss_grad(kind, pol, ref, pair)
        if not np.any(g):
            continue
        before = loss(kind, irm(pol, ref, pair, kind))
        after = loss(kind, irm(pol.with_logits(pol.logits - 1e-3 * g), ref, pair, kind))
        assert after < before


@pytest.mark.parametrize("variant", ["dpo", "ipo", "slic", "simpo"])
def test_pair_batch_matches_per_pair(variant, rng):
    vocab = Vocab(6)
    kind = LossKind(variant, 0.4)
    pol, ref = random_policy(rng, vocab), random_policy(rng, vocab)
    pairs = [random_pair(rng, vocab, i) for i in range(40)]
    batch = PairBatch(pairs, kind, ref)
    assert np.allclose(batch.margins(pol), [irm(pol, ref, p, kind) for p in pairs], atol=1e-12)
    idx = np.array([3, 7, 7, 20])
    val, grad = batch.loss_and_grad(pol, idx)
    ref_grad = sum(loss_grad(kind, pol, ref, pairs[i]) for i in idx) / len(idx)
    assert val == pytest.approx(np.mean([loss(kind, irm(pol, ref, pairs[i], kind)) for i in idx]), abs=1e-12)
    assert np.allclose(grad, ref_grad, atol=1e-12)


def test_pair_batch_reference_is_frozen(rng):
    vocab = Vocab(4)
    ref_logits = rng.standard_normal((5, 5))
    ref = TabularPolicy(vocab, ref_logits)
    pairs = [random_pair(rng, vocab, i) for i in range(10)]
    batch = PairBatch(pairs, LossKind("dpo", 0.2), ref)
    saved = batch.ref_w.copy()
    ref_logits[:] = 0.0  # the policy copied its logits; nothing downstream should move
    batch.loss_and_grad(random_policy(rng, vocab))
    assert np.array_equal(batch.ref_w, saved)
    with pytest.raises(ValueError):
        batch.ref_w[0] = 1.0


def test_pair_batch_needs_reference_except_simpo(rng, v4):
    pairs = [random_pair(rng, v4)]
    with pytest.raises(ValueError):
        PairBatch(pairs, LossKind("dpo", 0.2), None)
    PairBatch(pairs, LossKind("simpo", 0.2), None, vocab=v4)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_loss_names_pair(rng, v4):
    pairs = [random_pair(rng, v4, 17)]
    batch = PairBatch(pairs, LossKind("ipo", 1e-300), TabularPolicy.uniform(v4))
    with pytest.raises(NonFiniteLossError, match="17"):
        batch.loss_and_grad(random_policy(rng, v4))


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), beta=st.floats(0.01, 5.0))
def test_irm_antisymmetry_and_beta_free_ranking(seed, beta):
    rng = np.random.default_rng(seed)
    vocab = Vocab(4)
    pol, ref = random_policy(rng, vocab), random_policy(rng, vocab)
    pair = random_pair(rng, vocab)
    assert irm(pol, ref, pair.swapped()) == -irm(pol, ref, pair)
    # beta never enters the margin
    assert irm(pol, ref, pair, LossKind("dpo", beta)) == irm(pol, ref, pair)


@settings(max_examples=80, deadline=None)
@given(a=st.floats(-50, 50), b=st.floats(-50, 50), beta=st.floats(0.01, 5.0))
def test_preference_prob_strictly_increasing(a, b, beta):
    lo, hi = sorted((a, b))
    if hi - lo > 1e-6:
        assert preference_prob(lo, beta) <= preference_prob(hi, beta)
        if abs(beta * hi) < 30 and abs(beta * lo) < 30:
            assert preference_prob(lo, beta) < preference_prob(hi, beta)
