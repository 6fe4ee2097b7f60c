import math

import numpy as np
import pytest

from mvfuse.neuralnet import (
    MlpParams,
    MlpSpec,
    OptimizerState,
    adam_step,
    backward,
    forward,
    gradcheck,
    init_params,
    load_params,
    save_params,
)


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3,))
    with pytest.raises(ValueError):
        MlpSpec((3, 0))
    with pytest.raises(ValueError):
        MlpSpec((3, 2), hidden_activation="gelu")
    assert MlpSpec((3, 5, 5, 2)).n_layers == 3


def test_init_deterministic_and_bounded():
    spec = MlpSpec((3, 2))
    a, b = init_params(spec, 7), init_params(spec, 7)
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    assert np.all(np.abs(a.weights[0]) <= math.sqrt(6 / 5))
    assert np.all(a.biases[0] == 0)


def test_init_bound_every_layer():
    spec = MlpSpec((10, 40, 7, 3))
    p = init_params(spec, 0)
    for w in p.weights:
        fan_out, fan_in = w.shape
        assert np.abs(w).max() <= math.sqrt(6 / (fan_in + fan_out))


def test_init_weight_mean_is_zero():
    spec = MlpSpec((100, 100))
    w = np.concatenate([init_params(spec, s).weights[0].ravel() for s in range(5)])
    # uniform(-b, b) has variance b^2 / 3
    se = math.sqrt(6 / 200) / math.sqrt(3) / math.sqrt(w.size)
    assert abs(w.mean()) < 3 * se


def test_forward_identity_network():
    p = MlpParams(MlpSpec((3, 3)), [np.eye(3)], [np.zeros(3)])
    x = np.random.default_rng(0).normal(size=(4, 3))
    out, _ = forward(p, x)
    np.testing.assert_array_equal(out, x)


def test_forward_sigmoid_range():
    spec = MlpSpec((4, 6, 3), output_activation="sigmoid")
    out, _ = forward(init_params(spec, 1), np.random.default_rng(1).normal(scale=50, size=(20, 4)))
    assert np.all(out > 0) and np.all(out < 1)


def test_forward_hand_evaluation():
    w1 = np.array([[0.5, -0.25], [0.1, 0.2]])
    b1 = np.array([0.1, -0.3])
    w2 = np.array([[1.5, -2.0]])
    b2 = np.array([0.05])
    p = MlpParams(MlpSpec((2, 2, 1), "tanh", "identity"), [w1, w2], [b1, b2])
    x = np.array([[0.3, 0.8]])
    h0 = math.tanh(0.5 * 0.3 - 0.25 * 0.8 + 0.1)
    h1 = math.tanh(0.1 * 0.3 + 0.2 * 0.8 - 0.3)
    expected = 1.5 * h0 - 2.0 * h1 + 0.05
    assert abs(forward(p, x)[0][0, 0] - expected) <= 1e-12


def test_forward_rejects_shape():
    p = init_params(MlpSpec((3, 2)), 0)
    with pytest.raises(ValueError):
        forward(p, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        forward(p, np.full((1, 3), np.nan))


def test_backward_zero_and_linear_closed_form():
    rng = np.random.default_rng(2)
    p = init_params(MlpSpec((4, 3)), 0)
    x = rng.normal(size=(5, 4))
    out, tape = forward(p, x)
    grads, gx = backward(p, tape, np.zeros_like(out))
    assert all(np.all(a == 0) for a in grads.arrays()) and np.all(gx == 0)
    g = rng.normal(size=out.shape)
    grads, gx = backward(p, tape, g)
    np.testing.assert_allclose(grads.weights[0], g.T @ x, rtol=1e-14)
    np.testing.assert_allclose(grads.biases[0], g.sum(axis=0), rtol=1e-14)
    np.testing.assert_allclose(gx, g @ p.weights[0], rtol=1e-14)


def test_backward_rejects_foreign_tape():
    p = init_params(MlpSpec((2, 2)), 0)
    q = init_params(MlpSpec((2, 2)), 1)
    out, tape = forward(p, np.ones((1, 2)))
    with pytest.raises(ValueError):
        backward(q, tape, out)


def _central_diff(params, loss_of_params, h=1e-5):
    out = []
    for a in params.arrays():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            lp = loss_of_params()
            a[idx] = orig - h
            lm = loss_of_params()
            a[idx] = orig
            g[idx] = (lp - lm) / (2 * h)
        out.append(g)
    return out


def test_backward_matches_finite_differences_three_layers():
    rng = np.random.default_rng(3)
    p = init_params(MlpSpec((4, 6, 5, 2), "tanh"), 3)
    x = rng.normal(size=(7, 4))
    target = rng.normal(size=(7, 2))

    def loss():
        return 0.5 * np.sum((forward(p, x)[0] - target) ** 2)

    out, tape = forward(p, x)
    grads, _ = backward(p, tape, out - target)
    for g, fd in zip(grads.arrays(), _central_diff(p, loss)):
        err = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-8)
        assert err.max() <= 1e-5


def test_directional_derivative():
    rng = np.random.default_rng(9)
    p = init_params(MlpSpec((3, 8, 2), "tanh", "sigmoid"), 9)
    x = rng.normal(size=(5, 3))

    def loss(params):
        return float(np.sum(np.log(forward(params, x)[0])))

    out, tape = forward(p, x)
    grads, _ = backward(p, tape, 1.0 / out)
    v = [rng.normal(size=a.shape) for a in p.arrays()]
    norm = math.sqrt(sum(np.sum(a * a) for a in v))
    v = [a / norm for a in v]
    h = 1e-5
    plus = MlpParams.from_arrays(p.spec, [a + h * d for a, d in zip(p.arrays(), v)])
    minus = MlpParams.from_arrays(p.spec, [a - h * d for a, d in zip(p.arrays(), v)])
    fd = (loss(plus) - loss(minus)) / (2 * h)
    analytic = sum(np.sum(g * d) for g, d in zip(grads.arrays(), v))
    assert abs(fd - analytic) / max(abs(fd), abs(analytic)) <= 1e-5


def test_adam_zero_gradient_keeps_params():
    p = init_params(MlpSpec((3, 2)), 0)
    state = OptimizerState.for_arrays(p.arrays())
    new, state2 = adam_step(p, p.zeros_like(), state)
    for a, b in zip(p.arrays(), new.arrays()):
        np.testing.assert_array_equal(a, b)
    assert state2.step == 1 and state.step == 0


def test_adam_first_step_is_signed_lr():
    params = [np.array([1.0, -2.0, 0.5])]
    grads = [np.array([0.3, -40.0, 1e-3])]
    state = OptimizerState.for_arrays(params, lr=0.01)
    new, _ = adam_step(params, grads, state)
    delta = new[0] - params[0]
    np.testing.assert_allclose(delta, -0.01 * np.sign(grads[0]), rtol=1e-4)


def test_adam_converges_on_quadratic():
    target = np.array([1.5, -0.5, 2.0])
    scale = np.array([1.0, 3.0, 0.5])
    params = [np.zeros(3)]
    state = OptimizerState.for_arrays(params, lr=0.05)
    for _ in range(200):
        params, state = adam_step(params, [scale * (params[0] - target)], state)
    assert np.max(np.abs(params[0] - target)) < 1e-3


def test_adam_rejects_nonfinite():
    params = [np.zeros(2)]
    with pytest.raises(FloatingPointError):
        adam_step(params, [np.array([np.inf, 0.0])], OptimizerState.for_arrays(params))


def test_gradcheck_linear_squared():
    spec = MlpSpec((3, 2))
    err = gradcheck(spec, lambda out: (0.5 * np.sum(out**2), out), seed=0)
    assert err <= 1e-8


def test_gradcheck_relu_bce():
    spec = MlpSpec((3, 6, 2), "relu", "sigmoid")
    y = np.random.default_rng(1).integers(0, 2, size=(4, 2)).astype(float)

    def bce(out):
        return -np.sum(y * np.log(out) + (1 - y) * np.log(1 - out)), -(y / out - (1 - y) / (1 - out))

    assert gradcheck(spec, bce, seed=1) <= 1e-5


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(MlpSpec((5, 4, 3), "tanh", "sigmoid"), 12)
    p.biases[0][:] = np.random.default_rng(0).normal(size=4) / 3
    path = tmp_path / "net.ckpt"
    save_params(path, p)
    assert path.read_text().splitlines()[0] == "MVFUSE-CKPT-1"
    q = load_params(path)
    assert q.spec == p.spec
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_text("NOT-A-CKPT\n")
    with pytest.raises(ValueError):
        load_params(path)
