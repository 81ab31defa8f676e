import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sera.evaluation import (
    emit_matrix,
    emit_report,
    linear_fit,
    read_table,
    reward_correlations,
    selection_audit,
    variance_lemma_check,
    win_rate,
)
from sera.losses import PreferencePair
from sera.policy import SampleControls, TabularPolicy, log_prob
from sera.selection import MarginRecord, PolicyHistory
from sera.synthdata import AuditFlags, make_world, sample_prompts

CTL = SampleControls(1.0, 1.0, 6, seed=11)


@pytest.fixture(scope="module")
def sharp():
    return make_world(6, 2.5, 3)


def test_self_play_is_a_draw(sharp):
    p = TabularPolicy.uniform(sharp.vocab)
    r = win_rate(sharp, p, p, sample_prompts(sharp, 300), CTL)
    assert r.ties == 300 and r.score == 0.5


def test_scores_are_complementary(sharp):
    rng = np.random.default_rng(0)
    a = TabularPolicy(sharp.vocab, rng.standard_normal(sharp.gold.logits.shape))
    b = TabularPolicy.uniform(sharp.vocab)
    prompts = sample_prompts(sharp, 400)
    ab, ba = win_rate(sharp, a, b, prompts, CTL), win_rate(sharp, b, a, prompts, CTL)
    assert ab.wins == ba.losses and ab.ties == ba.ties
    assert ab.score + ba.score == pytest.approx(1.0, abs=1e-15)


def test_gold_policy_beats_uniform(sharp):
    prompts = sample_prompts(sharp, 1000)
    r = win_rate(sharp, TabularPolicy.uniform(sharp.vocab), sharp.gold, prompts, CTL)
    assert r.score < 0.5
    assert r.n == 1000


def test_win_rate_needs_prompts(sharp):
    p = TabularPolicy.uniform(sharp.vocab)
    with pytest.raises(ValueError):
        win_rate(sharp, p, p, [], CTL)


def test_linear_fit_exact_line():
    r = linear_fit([1, 2, 3, 4], [2, 4, 6, 8])
    assert r.r_squared == pytest.approx(1.0, abs=1e-15)
    assert r.slope == pytest.approx(2.0, abs=1e-15)
    assert r.intercept == pytest.approx(0.0, abs=1e-14)
    assert r.n == 4


def test_linear_fit_degenerate():
    assert linear_fit([3, 3, 3], [1, 2, 3]).r_squared == 0.0
    assert linear_fit([1, 2, 3], [5, 5, 5]).r_squared == 0.0


def _pearson_sq(x, y):
    # textbook form, written independently of linear_fit
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy * sxy / (sxx * syy)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=40))
def test_r_squared_is_squared_pearson(points):
    x = [p[0] for p in points]
    y = [p[1] for p in points]
    if np.var(x) < 1e-6 or np.var(y) < 1e-6:
        return
    assert linear_fit(x, y).r_squared == pytest.approx(_pearson_sq(x, y), abs=1e-10)


def test_correlations_on_gold_policy():
    # equal-length responses, uniform reference: implicit reward is gold reward + const
    w = make_world(5, 1.5, 0)
    eos = w.vocab.eos_id
    rng = np.random.default_rng(1)
    pairs = []
    for i in range(30):
        a = tuple(int(v) for v in rng.integers(0, 5, 2)) + (eos,)
        b = tuple(int(v) for v in rng.integers(0, 5, 2)) + (eos,)
        if a == b:
            continue
        pairs.append(PreferencePair((int(rng.integers(0, 5)),), a, b, i))
    h = PolicyHistory((TabularPolicy.uniform(w.vocab), w.gold))
    corr = reward_correlations(h, 0, pairs, w)
    assert corr.gold.r_squared == pytest.approx(1.0, abs=1e-12)
    assert corr.gold.slope == pytest.approx(1.0, abs=1e-12)
    assert corr.margin.r_squared == pytest.approx(1.0, abs=1e-12)
    assert corr.length.r_squared == 0.0


def test_correlations_need_three_pairs():
    w = make_world(4, 1.0, 0)
    h = PolicyHistory((w.gold, w.gold))
    pairs = [PreferencePair((0,), (1,), (2,), 0), PreferencePair((0,), (2,), (3,), 1)]
    with pytest.raises(ValueError):
        reward_correlations(h, 0, pairs, w)


def _records(n):
    return [MarginRecord(i, float(n - i), 0.0, 0.0) for i in range(n)]


def test_selection_audit_counts():
    flags = {i: AuditFlags(i in (1, 4, 5), i == 0, 0.0, 0.0) for i in range(6)}
    a = selection_audit(_records(6), {0, 1, 2}, flags)
    assert (a.n_inside, a.n_outside) == (3, 3)
    assert a.flipped_inside == pytest.approx(1 / 3)
    assert a.flipped_outside == pytest.approx(2 / 3)
    assert a.flipped_global == pytest.approx(0.5)
    assert a.length_inside == pytest.approx(1 / 3) and a.length_outside == 0.0
    full = selection_audit(_records(6), range(6), flags)
    assert math.isnan(full.flipped_outside)


def test_selection_audit_validates():
    flags = {i: AuditFlags(False, False, 0.0, 0.0) for i in range(3)}
    with pytest.raises(KeyError):
        selection_audit(_records(4), {0}, flags)
    with pytest.raises(KeyError):
        selection_audit(_records(3), {7}, flags)


def test_variance_equal_for_constant_loss():
    w = make_world(6, 1.0, 0)
    chk = variance_lemma_check(w, lambda x, a, b: 0.3, 50, 500, loss_fn=lambda f: np.ones_like(f), pool_size=200)
    assert chk.var_bayes == pytest.approx(chk.var_empirical, abs=1e-15)
    assert chk.consistent


def test_variance_strictly_lower_for_informative_margin():
    w = make_world(6, 1.5, 0)
    f = lambda x, a, b: 2.0 * (log_prob(w.gold, x, a) - log_prob(w.gold, x, b))
    chk = variance_lemma_check(w, f, 100, 4000, pool_size=500, seed=2)
    assert chk.var_bayes < chk.var_empirical
    assert chk.strictly_lower and chk.consistent


def test_variance_check_validates():
    w = make_world(4, 1.0, 0)
    with pytest.raises(ValueError):
        variance_lemma_check(w, lambda *a: 0.0, 5, 1000)
    with pytest.raises(ValueError):
        variance_lemma_check(w, lambda *a: 0.0, 50, 10)


def test_report_round_trip(tmp_path):
    rows = [{"seed": 0, "score": 0.1 + 0.2, "flag": True}, {"seed": 1, "score": 1e-17, "flag": False}]
    path = emit_report(rows, tmp_path / "r.tsv")
    back = read_table(path)
    assert [r["seed"] for r in back] == ["0", "1"]
    assert float(back[0]["score"]) == 0.1 + 0.2
    assert float(back[1]["score"]) == 1e-17
    assert back[0]["flag"] == "1"


def test_empty_report_is_header_only(tmp_path):
    path = emit_report([], tmp_path / "e.tsv", ["a", "b"])
    assert path.read_text() == "a\tb\n"


def test_matrix_report(tmp_path):
    m = np.array([[1.0, 0.25], [0.25, 1.0]])
    back = read_table(emit_matrix(["dpo", "ipo"], m, tmp_path / "m.tsv"))
    assert back[0] == {"label": "dpo", "dpo": "1.0", "ipo": "0.25"}
