import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainrft._kernels import BACKEND, backend_name, mlp_grad, mlp_scores
from chainrft._kernels import reference


def random_net(rng, hidden=6, dim=9):
    W1 = rng.standard_normal((hidden, dim))
    b1 = rng.standard_normal(hidden)
    w2 = rng.standard_normal(hidden)
    b2 = float(rng.standard_normal())
    return W1, b1, w2, b2


def test_backend_reports_a_known_name():
    assert backend_name() in ("compiled", "reference")
    assert backend_name() == BACKEND


def test_scores_match_reference(rng):
    W1, b1, w2, b2 = random_net(rng)
    X = rng.standard_normal((17, 9))
    got = mlp_scores(W1, b1, w2, b2, X)
    want = reference.mlp_scores(W1, b1, w2, b2, X)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_grad_matches_reference(rng):
    W1, b1, w2, b2 = random_net(rng)
    X = rng.standard_normal((17, 9))
    coeff = rng.standard_normal(17)
    got = mlp_grad(W1, b1, w2, b2, X, coeff)
    want = reference.mlp_grad(W1, b1, w2, b2, X, coeff)
    for g, w in zip(got, want):
        np.testing.assert_allclose(g, w, rtol=0, atol=1e-12)


def test_single_row_promotion(rng):
    W1, b1, w2, b2 = random_net(rng)
    x = rng.standard_normal(9)
    one = mlp_scores(W1, b1, w2, b2, x)
    batch = mlp_scores(W1, b1, w2, b2, x[None, :])
    np.testing.assert_allclose(one, batch)


def test_scores_hand_value():
    # 1x1 net: score = w2 * tanh(W1 x + b1) + b2
    W1 = np.array([[2.0]])
    b1 = np.array([-1.0])
    w2 = np.array([3.0])
    x = np.array([[1.0]])
    got = mlp_scores(W1, b1, w2, 0.5, x)
    np.testing.assert_allclose(got, [3.0 * np.tanh(1.0) + 0.5], atol=1e-15)


def test_grad_finite_difference(rng):
    W1, b1, w2, b2 = random_net(rng, hidden=4, dim=5)
    X = rng.standard_normal((6, 5))
    coeff = rng.standard_normal(6)

    def objective(W1v, b1v, w2v, b2v):
        return float(np.dot(coeff, mlp_scores(W1v, b1v, w2v, b2v, X)))

    gW1, gb1, gw2, gb2 = mlp_grad(W1, b1, w2, b2, X, coeff)
    eps = 1e-6
    for idx in [(0, 0), (1, 3), (3, 4)]:
        up, down = W1.copy(), W1.copy()
        up[idx] += eps
        down[idx] -= eps
        fd = (objective(up, b1, w2, b2) - objective(down, b1, w2, b2)) / (2 * eps)
        assert abs(fd - gW1[idx]) < 1e-6
    up, down = b1.copy(), b1.copy()
    up[2] += eps
    down[2] -= eps
    fd = (objective(W1, up, w2, b2) - objective(W1, down, w2, b2)) / (2 * eps)
    assert abs(fd - gb1[2]) < 1e-6
    fd = (objective(W1, b1, w2, b2 + eps) - objective(W1, b1, w2, b2 - eps)) / (2 * eps)
    assert abs(fd - gb2) < 1e-6


@given(data=st.data())
@settings(max_examples=30, deadline=None)
def test_backend_equivalence_property(data):
    seed = data.draw(st.integers(0, 2**31 - 1))
    n = data.draw(st.integers(1, 12))
    rng = np.random.default_rng(seed)
    W1, b1, w2, b2 = random_net(rng, hidden=3, dim=4)
    X = rng.standard_normal((n, 4))
    coeff = rng.standard_normal(n)
    np.testing.assert_allclose(
        mlp_scores(W1, b1, w2, b2, X), reference.mlp_scores(W1, b1, w2, b2, X),
        atol=1e-12)
    got = mlp_grad(W1, b1, w2, b2, X, coeff)
    want = reference.mlp_grad(W1, b1, w2, b2, X, coeff)
    for g, w in zip(got, want):
        np.testing.assert_allclose(g, w, atol=1e-12)


@pytest.mark.skipif(BACKEND != "compiled", reason="compiled extension not built")
def test_compiled_backend_active_by_default():
    from chainrft._kernels import _fast
    assert mlp_scores is _fast.mlp_scores
