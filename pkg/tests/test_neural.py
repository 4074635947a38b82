import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import numerical_gradient, relative_error
from probcast.exceptions import DimensionMismatch, NonFiniteGradient, StaleCache
from probcast.neural import AdamState, Dense, GradientTape, Mlp, adam_step, backward, forward


def _loss_and_tape(net, x, proj):
    out, cache = forward(net, x)
    return float(np.sum(out * proj)), backward(net, cache, proj)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    depth=st.integers(1, 4),
    act=st.sampled_from(["tanh", "identity"]),
)
def test_backprop_matches_finite_differences(seed, depth, act):
    rng = np.random.default_rng(seed)
    sizes = list(rng.integers(1, 7, depth + 1))
    net = Mlp.init(sizes, rng, hidden_activation=act)
    x = rng.normal(size=(5, sizes[0]))
    proj = rng.normal(size=(5, sizes[-1]))
    _, tape = _loss_and_tape(net, x, proj)
    numeric = numerical_gradient(lambda: float(np.sum(forward(net, x)[0] * proj)), net.parameters())
    assert relative_error(tape.parameters(), numeric) < 1e-6
    num_in = numerical_gradient(lambda: float(np.sum(forward(net, x)[0] * proj)), [x])
    assert relative_error([tape.input_grad], num_in) < 1e-6


def test_relu_gradient_away_from_kinks():
    rng = np.random.default_rng(0)
    net = Mlp.init([3, 8, 2], rng, hidden_activation="relu")
    x = rng.normal(size=(4, 3))
    pre = x @ net.layers[0].weight.T + net.layers[0].bias
    assert np.min(np.abs(pre)) > 1e-4
    proj = rng.normal(size=(4, 2))
    _, tape = _loss_and_tape(net, x, proj)
    numeric = numerical_gradient(lambda: float(np.sum(forward(net, x)[0] * proj)), net.parameters(), h=1e-7)
    assert relative_error(tape.parameters(), numeric) < 1e-6


def test_single_vector_input():
    rng = np.random.default_rng(1)
    net = Mlp.init([3, 4, 2], rng)
    x = rng.normal(size=3)
    out, cache = forward(net, x)
    assert out.shape == (2,)
    tape = backward(net, cache, np.ones(2))
    assert tape.input_grad.shape == (3,)
    batch_out, _ = forward(net, x[None, :])
    np.testing.assert_allclose(out, batch_out[0])


def test_dimension_checks():
    rng = np.random.default_rng(2)
    net = Mlp.init([3, 4, 2], rng)
    with pytest.raises(DimensionMismatch):
        forward(net, np.zeros((2, 4)))
    with pytest.raises(DimensionMismatch):
        Mlp([Dense(np.zeros((4, 3)), np.zeros(4)), Dense(np.zeros((2, 5)), np.zeros(2))])
    _, cache = forward(net, np.zeros((2, 3)))
    with pytest.raises(DimensionMismatch):
        backward(net, cache, np.zeros((2, 3)))
    with pytest.raises(DimensionMismatch):
        adam_step(net, GradientTape([(np.zeros((4, 3)), np.zeros(4))]), AdamState.for_network(net))


def test_glorot_limits():
    rng = np.random.default_rng(3)
    net = Mlp.init([100, 50, 10], rng)
    for layer in net.layers:
        limit = np.sqrt(6 / (layer.in_dim + layer.out_dim))
        assert np.abs(layer.weight).max() <= limit
        assert np.all(layer.bias == 0)
    assert net.layers[-1].activation == "identity"
    assert net.n_parameters == 100 * 50 + 50 + 50 * 10 + 10


def test_stale_cache_after_update():
    rng = np.random.default_rng(4)
    net = Mlp.init([2, 3, 1], rng)
    _, cache = forward(net, np.ones((1, 2)))
    tape = backward(net, cache, np.ones((1, 1)))
    adam_step(net, tape, AdamState.for_network(net))
    with pytest.raises(StaleCache):
        backward(net, cache, np.ones((1, 1)))
    with pytest.raises(StaleCache):
        backward(net.copy(), forward(net, np.ones((1, 2)))[1], np.ones((1, 1)))


def test_adam_matches_reference_update():
    rng = np.random.default_rng(5)
    net = Mlp([Dense(rng.normal(size=(2, 3)), rng.normal(size=2))])
    ref = [p.copy() for p in net.parameters()]
    state = AdamState.for_network(net, learning_rate=0.01)
    m = [np.zeros_like(p) for p in ref]
    v = [np.zeros_like(p) for p in ref]
    for t in range(1, 6):
        grads = [rng.normal(size=p.shape) for p in ref]
        adam_step(net, GradientTape([(grads[0], grads[1])]), state)
        for i, g in enumerate(grads):
            m[i] = 0.9 * m[i] + 0.1 * g
            v[i] = 0.999 * v[i] + 0.001 * g * g
            mhat = m[i] / (1 - 0.9**t)
            vhat = v[i] / (1 - 0.999**t)
            ref[i] = ref[i] - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
    for p, r in zip(net.parameters(), ref):
        np.testing.assert_allclose(p, r, rtol=1e-12, atol=1e-15)
    assert state.step == 5


def test_adam_rejects_non_finite():
    net = Mlp([Dense(np.zeros((1, 1)), np.zeros(1))])
    with pytest.raises(NonFiniteGradient):
        adam_step(net, GradientTape([(np.array([[np.nan]]), np.zeros(1))]), AdamState.for_network(net))


def test_learns_affine_map():
    rng = np.random.default_rng(6)
    net = Mlp.init([1, 16, 1], rng)
    state = AdamState.for_network(net, learning_rate=0.01)
    x = rng.uniform(-1, 1, (256, 1))
    y = 2 * x + 1
    for _ in range(1500):
        out, cache = forward(net, x)
        tape = backward(net, cache, 2 * (out - y) / len(x))
        adam_step(net, tape, state)
    out, _ = forward(net, x)
    assert np.mean((out - y) ** 2) < 1e-3
