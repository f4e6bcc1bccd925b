import numpy as np
import pytest

from chainrft import policy as pol
from chainrft import taskenv as te
from chainrft.retrieval import build_index, make_icl_fn


def decision_points(q):
    """(state, offered) pairs along the oracle path, answer stage last."""
    s = te.initial_state(q)
    out = []
    for t in range(1, q.num_steps + 1):
        cs = te.candidate_steps(q, t, seed=0)
        out.append((s, cs))
        s = te.transition(s, q.intermediates[t - 1], cs)
    out.append((s, te.answer_stage(q)))
    return out


# ------------------------------------------------------------- features


def test_feature_layout_dimensions():
    layout = pol.DEFAULT_LAYOUT
    assert layout.total_dim == 75
    assert layout.BASE == 8
    x = pol.featurize(te.build_question(5, [("add", 3)], seed=1),
                      te.initial_state(te.build_question(5, [("add", 3)], seed=1)),
                      cand=8)
    assert x.shape == (75,)


def test_feature_values_first_step(small_question):
    q = small_question
    s = te.initial_state(q)
    x = pol.featurize(q, s, cand=8)
    layout = pol.DEFAULT_LAYOUT
    assert x[0] == pytest.approx(5 / 1000)       # current claim (v0)
    assert x[1] == pytest.approx(8 / 1000)       # candidate value
    assert tuple(x[2:5]) == (1.0, 0.0, 0.0)      # add one-hot
    assert x[5] == pytest.approx(3 / 10)         # operand
    assert x[6] == pytest.approx(0.0)            # progress
    assert x[7] == pytest.approx(5 * 3 / (10 * layout.value_bound))
    assert np.all(x[8:] == 0.0)                  # no retrieval context


def test_feature_values_mul_step(small_question):
    q = small_question
    s = te.replay(q, [8], None)
    x = pol.featurize(q, s, cand=16)
    assert x[0] == pytest.approx(8 / 1000)
    assert tuple(x[2:5]) == (0.0, 0.0, 1.0)      # mul one-hot
    assert x[5] == pytest.approx(2 / 10)
    assert x[6] == pytest.approx(0.5)
    assert x[7] == pytest.approx(8 * 2 / (10 * 1000))


def test_answer_stage_features_zero_op_slots(small_question):
    q = small_question
    s = te.replay(q, [8, 16], None)
    X = pol.candidate_features(q, s, te.answer_stage(q))
    assert X.shape == (4, 75)
    assert np.all(X[:, 2:6] == 0.0)
    assert np.all(X[:, 7] == 0.0)
    np.testing.assert_allclose(
        X[:, 1], [v / 1000 for v in te.answer_stage(q).values])


def test_icl_features_populated(target_questions):
    q = target_questions[0]
    icl_fn = make_icl_fn(build_index(target_questions), k=3)
    x = pol.featurize(q, te.initial_state(q), cand=1, icl=icl_fn(q))
    assert np.any(x[8:72] != 0.0)
    assert np.any(x[72:75] != 0.0)


# ---------------------------------------------------------------- params


def same_params(a, b):
    return a.hidden == b.hidden and np.array_equal(a.flatten(), b.flatten())


def test_init_params_shapes_and_determinism():
    p = pol.init_params(3)
    assert p.W1.shape == (32, 75)
    assert same_params(p, pol.init_params(3))
    assert not same_params(p, pol.init_params(4))
    small = pol.init_params(3, hidden=16)
    assert small.W1.shape == (16, 75)


def test_flatten_unflatten_round_trip():
    p = pol.init_params(0, hidden=5)
    flat = p.flatten()
    assert flat.shape == (p.num_params,)
    assert p.num_params == 2 * (5 * 75 + 5 + 5 + 1)
    back = pol.unflatten(flat, pol.DEFAULT_LAYOUT, 5)
    assert same_params(back, p)
    flat[0] += 1.0
    assert not same_params(pol.unflatten(flat, pol.DEFAULT_LAYOUT, 5), p)


def test_checkpoint_round_trip(tmp_path):
    p = pol.init_params(7, hidden=16)
    path = tmp_path / "p.ckpt"
    pol.save_params(path, p)
    q = pol.load_params(path)
    assert same_params(p, q)
    assert q.hidden == 16


def test_copy_is_deep():
    p = pol.init_params(0, hidden=4)
    c = p.copy()
    c.W1[0, 0] += 1.0
    assert not same_params(p, c)


# --------------------------------------------------------------- softmax


def test_softmax_hand_values():
    # two scores 1 and 0 at T=1: probs (e / (e+1), 1 / (e+1))
    probs, _ = pol.softmax_logits(np.array([1.0, 0.0]), temperature=1.0)
    np.testing.assert_allclose(probs, [0.7311, 0.2689], atol=1e-4)
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_softmax_shift_invariance():
    scores = np.array([0.3, -1.2, 2.0, 0.0])
    a, _ = pol.softmax_logits(scores, 0.6)
    b, _ = pol.softmax_logits(scores + 123.456, 0.6)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_temperature_sharpens():
    scores = np.array([1.0, 0.0])
    hot, _ = pol.softmax_logits(scores, 2.0)
    cold, _ = pol.softmax_logits(scores, 0.1)
    assert cold[0] > hot[0]


def test_softmax_extreme_scores_stay_finite():
    probs, logits = pol.softmax_logits(np.array([1e6, 0.0, -1e6]), 0.6)
    assert np.all(np.isfinite(logits))
    assert probs[0] == pytest.approx(1.0)


# ----------------------------------------------------------- distribution


def test_action_distribution_step(small_question):
    q = small_question
    s = te.initial_state(q)
    cs = te.candidate_steps(q, 1, seed=0)
    p = pol.init_params(0, hidden=16)
    dist = pol.action_distribution(p, q, s, cs, temperature=0.6)
    assert dist.probs.shape == (4,)
    assert dist.probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert dist.actions == cs.candidates
    idx = dist.index_of(cs.candidates[2])
    assert idx == 2
    assert dist.log_probs[idx] == pytest.approx(np.log(dist.probs[idx]))


def test_sample_action_deterministic_stream(small_question):
    q = small_question
    cs = te.candidate_steps(q, 1, seed=0)
    p = pol.init_params(0, hidden=16)
    dist = pol.action_distribution(p, q, te.initial_state(q), cs, 0.6)
    a1, lp1 = pol.sample_action(dist, np.random.default_rng(5))
    a2, lp2 = pol.sample_action(dist, np.random.default_rng(5))
    assert a1 == a2 and lp1 == lp2


def test_log_prob_matches_distribution(small_question):
    q = small_question
    cs = te.candidate_steps(q, 1, seed=0)
    p = pol.init_params(1, hidden=16)
    s = te.initial_state(q)
    dist = pol.action_distribution(p, q, s, cs, 0.6)
    for i, a in enumerate(dist.actions):
        assert pol.log_prob(p, q, s, cs, a, 0.6) == pytest.approx(
            dist.log_probs[i])


# -------------------------------------------------------------- gradients


def fd_check(fn, grad, flat, tol=1e-4, probes=24, eps=1e-6, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    idxs = rng.choice(len(flat), size=min(probes, len(flat)), replace=False)
    for i in idxs:
        up, down = flat.copy(), flat.copy()
        up[i] += eps
        down[i] -= eps
        fd = (fn(up) - fn(down)) / (2 * eps)
        assert abs(fd - grad[i]) < tol, f"component {i}: fd {fd} vs {grad[i]}"


def test_grad_log_prob_finite_difference(small_question):
    q = small_question
    layout = pol.DEFAULT_LAYOUT
    p = pol.init_params(2, hidden=6)
    for s, offered in decision_points(q):
        action = pol.offered_actions(offered)[1]
        g = pol.grad_log_prob(p, q, s, offered, action, 0.6)

        def f(flat):
            pp = pol.unflatten(flat, layout, 6)
            return pol.log_prob(pp, q, s, offered, action, 0.6)

        fd_check(f, g, p.flatten())


def test_grad_value_finite_difference(small_question):
    q = small_question
    layout = pol.DEFAULT_LAYOUT
    p = pol.init_params(3, hidden=6)
    s = te.initial_state(q)
    g = pol.grad_value(p, q, s)

    def f(flat):
        return pol.value(pol.unflatten(flat, layout, 6), q, s)

    fd_check(f, g, p.flatten())


def test_grad_only_touches_matching_head(small_question):
    q = small_question
    s = te.initial_state(q)
    cs = te.candidate_steps(q, 1, seed=0)
    p = pol.init_params(0, hidden=6)
    n = p.num_params
    g_actor = pol.grad_log_prob(p, q, s, cs, cs.candidates[0], 0.6)
    g_value = pol.grad_value(p, q, s)
    assert np.all(g_actor[n // 2:] == 0.0)
    assert np.all(g_value[:n // 2] == 0.0)


def test_numeric_error_on_nonfinite(small_question):
    q = small_question
    p = pol.init_params(0, hidden=4)
    p.W1[:] = np.nan
    with pytest.raises(pol.NumericError):
        pol.action_distribution(p, q, te.initial_state(q),
                                te.candidate_steps(q, 1, seed=0), 0.6)
