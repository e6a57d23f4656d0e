import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from fedfair.errors import ParameterError, ShapeError
from fedfair.model import (
    HIDDEN,
    LOGREG,
    MLP,
    ModelParams,
    dloss_dz,
    forward,
    grad_loss,
    hard_error,
    init_params,
    load_checkpoint,
    logistic_loss,
    loss,
    loss_and_slope,
    n_params,
    predict,
    save_checkpoint,
    score,
    weighted_grad,
)

FD_CASES = 100
FD_RTOL = 1e-6


def test_param_counts():
    assert n_params(LOGREG, 5) == 6
    h1, h2 = HIDDEN
    assert n_params(MLP, 5) == 5 * h1 + h1 + h1 * h2 + h2 + h2 + 1
    with pytest.raises(ParameterError):
        n_params("svm", 3)


def test_logreg_zero_init_scores_zero():
    p = init_params(LOGREG, 4)
    assert score(p, np.ones(4)) == 0.0
    # a zero logit counts as a mistake for either label
    assert hard_error(p, np.ones(4), 1.0) == 1
    assert hard_error(p, np.ones(4), -1.0) == 1
    assert loss(p, np.ones(4), 1.0) == pytest.approx(np.log(2.0), abs=1e-15)


def test_mlp_init_is_seeded():
    a, b, c = init_params(MLP, 6, 1), init_params(MLP, 6, 1), init_params(MLP, 6, 2)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, c.theta)


def test_shape_checks():
    p = init_params(LOGREG, 3)
    with pytest.raises(ShapeError):
        score(p, np.ones(4))
    with pytest.raises(ShapeError):
        ModelParams(LOGREG, 3, np.zeros(3))
    with pytest.raises(ParameterError):
        ModelParams(LOGREG, 3, np.array([0.0, np.nan, 0.0, 0.0]))


def test_mlp_forward_oracle(rng):
    d = 3
    p = init_params(MLP, d, 7).with_theta(rng.normal(size=n_params(MLP, d)))
    x = rng.normal(size=d)
    # independent loop-based evaluation of the same network
    t = p.theta
    W1 = t[:d * 8].reshape(d, 8)
    b1 = t[d * 8:d * 8 + 8]
    o = d * 8 + 8
    W2 = t[o:o + 32].reshape(8, 4)
    b2 = t[o + 32:o + 36]
    w3 = t[o + 36:o + 40]
    b3 = t[o + 40]
    h1 = [max(0.0, sum(x[i] * W1[i, j] for i in range(d)) + b1[j]) for j in range(8)]
    h2 = [max(0.0, sum(h1[i] * W2[i, j] for i in range(8)) + b2[j]) for j in range(4)]
    z = sum(h2[j] * w3[j] for j in range(4)) + b3
    assert score(p, x) == pytest.approx(z, rel=1e-13)


@settings(max_examples=200, deadline=None)
@given(z=st.floats(-700, 700), y=st.sampled_from([-1.0, 1.0]))
def test_loss_and_slope_agree_with_reference(z, y):
    zz, yy = np.array([z]), np.array([y])
    losses, slope = loss_and_slope(zz, yy)
    assert losses[0] == pytest.approx(float(logistic_loss(zz, yy)[0]), rel=1e-12, abs=1e-300)
    assert slope[0] == pytest.approx(float(dloss_dz(zz, yy)[0]), rel=1e-12, abs=1e-300)
    assert losses[0] >= 0.0 and np.isfinite(losses[0])


def test_loss_no_overflow():
    out = logistic_loss(np.array([-1000.0, 1000.0]), np.array([1.0, 1.0]))
    np.testing.assert_allclose(out, [1000.0, 0.0], atol=1e-12)


def _random_case(kind, rng):
    d = int(rng.integers(2, 7))
    m = int(rng.integers(1, 12))
    X = rng.normal(size=(m, d))
    y = rng.choice([-1.0, 1.0], size=m)
    coef = rng.normal(size=m)
    p = init_params(kind, d, int(rng.integers(1 << 30))).with_theta(rng.normal(size=n_params(kind, d)))
    v = rng.normal(size=p.theta.size)
    v /= np.linalg.norm(v)
    return p, X, y, coef, v


def _objective(p, X, y, coef, theta):
    return float(coef @ logistic_loss(forward(p.with_theta(theta), X)[0], y))


def _pattern(p, X, theta):
    _, cache = forward(p.with_theta(theta), X)
    return None if cache is None else (cache[0] > 0, cache[2] > 0)


def _same_pattern(a, b):
    return a is None or all(np.array_equal(u, w) for u, w in zip(a, b))


@pytest.mark.parametrize("kind", [LOGREG, MLP])
def test_gradient_finite_differences(kind):
    """Directional derivatives against a fourth-order central difference.

    Draws whose ReLU activation pattern changes inside the stencil straddle a
    kink where the derivative does not exist; those draws are replaced.
    """
    rng = np.random.default_rng(2024 if kind == LOGREG else 4202)
    h = 1e-4
    done = 0
    worst = 0.0
    while done < FD_CASES:
        p, X, y, coef, v = _random_case(kind, rng)
        t = p.theta
        pats = [_pattern(p, X, t + s * h * v) for s in (-2, -1, 0, 1, 2)]
        if not all(_same_pattern(pats[2], q) for q in pats):
            continue
        f = lambda s: _objective(p, X, y, coef, t + s * h * v)  # noqa: E731
        fd = (-f(2) + 8 * f(1) - 8 * f(-1) + f(-2)) / (12 * h)
        an = float(weighted_grad(p, X, y, coef) @ v)
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-300)
        worst = max(worst, rel)
        assert rel < FD_RTOL, (done, fd, an)
        done += 1
    assert worst < FD_RTOL


@pytest.mark.parametrize("kind", [LOGREG, MLP])
def test_multi_column_coefficients_match_single(kind, rng):
    p, X, y, _, _ = _random_case(kind, rng)
    C = rng.normal(size=(X.shape[0], 3))
    G = weighted_grad(p, X, y, C)
    for k in range(3):
        np.testing.assert_allclose(G[k], weighted_grad(p, X, y, C[:, k]), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("kind", [LOGREG, MLP])
def test_sparse_input_matches_dense(kind, rng):
    d = 6
    X = rng.normal(size=(40, d)) * (rng.random((40, d)) < 0.2)
    y = rng.choice([-1.0, 1.0], size=40)
    p = init_params(kind, d, 3).with_theta(rng.normal(size=n_params(kind, d)))
    coef = rng.random(40)
    dense = weighted_grad(p, X, y, coef)
    sp = weighted_grad(p, sparse.csr_matrix(X), y, coef)
    np.testing.assert_allclose(sp, dense, rtol=1e-12, atol=1e-14)


def test_grad_loss_is_batch_mean(rng):
    p = init_params(LOGREG, 3).with_theta(rng.normal(size=4))
    X = rng.normal(size=(5, 3))
    y = rng.choice([-1.0, 1.0], size=5)
    per = np.array([grad_loss(p, X[i], y[i]) for i in range(5)])
    np.testing.assert_allclose(grad_loss(p, X, y), per.mean(axis=0), rtol=1e-12)


def test_logreg_gradient_closed_form(rng):
    p = init_params(LOGREG, 3).with_theta(rng.normal(size=4))
    x, y = rng.normal(size=3), -1.0
    z = x @ p.theta[:3] + p.theta[3]
    s = -y / (1 + np.exp(y * z))
    np.testing.assert_allclose(grad_loss(p, x, y), np.append(s * x, s), rtol=1e-12)


def test_predict_signs(rng):
    p = init_params(LOGREG, 2).with_theta(np.array([1.0, 0.0, 0.0]))
    np.testing.assert_array_equal(predict(p, np.array([[2.0, 0.0], [-1.0, 5.0]])), [1.0, -1.0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=3, max_size=3),
       st.sampled_from([LOGREG, MLP]))
def test_checkpoint_roundtrip_exact(tmp_path_factory, head, kind):
    d = 2
    theta = np.zeros(n_params(kind, d))
    theta[:3] = head
    p = ModelParams(kind, d, theta)
    path = tmp_path_factory.mktemp("ck") / "p.txt"
    save_checkpoint(path, p)
    back = load_checkpoint(path)
    assert back.kind == kind and back.d == d
    assert back.theta.tobytes() == p.theta.tobytes()
