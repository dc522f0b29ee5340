import numpy as np
import pytest

from natlab.autodiff import Graph, grad_check
from natlab.cif import (DEFAULT_THRESHOLD, integrate_and_fire, quantity_loss,
                        scale_weights)


def _fire(alpha, H=None, threshold=1.0, train_mode=False, num_tokens=None):
    alpha = np.asarray(alpha, dtype=np.float64)
    T = alpha.shape[0]
    if H is None:
        H = np.random.default_rng(0).standard_normal((T, 3))
    g = Graph()
    trace = integrate_and_fire(g, g.leaf(H), g.leaf(alpha),
                               threshold=threshold, train_mode=train_mode,
                               num_tokens=num_tokens)
    E = trace.fired_embeddings
    E = E.data if hasattr(E, "data") else E
    return trace, np.asarray(E), H


def test_scale_weights_uniform_halving():
    g = Graph()
    alpha = g.leaf(np.full(4, 0.5))
    scaled = scale_weights(g, alpha, 1)
    assert np.allclose(scaled.data, 0.25)
    assert scaled.data.sum() == pytest.approx(1.0, abs=1e-9)


def test_scale_weights_hand_case():
    g = Graph()
    scaled = scale_weights(g, g.leaf(np.array([0.2, 0.6, 0.4])), 2)
    assert np.allclose(scaled.data, [1 / 3, 1.0, 2 / 3])


def test_scale_weights_sums_to_target():
    for seed in range(25):
        rng = np.random.default_rng(seed)
        alpha = rng.uniform(0.01, 0.99, size=rng.integers(2, 30))
        U = int(rng.integers(1, 9))
        g = Graph()
        scaled = scale_weights(g, g.leaf(alpha), U)
        assert scaled.data.sum() == pytest.approx(U, abs=1e-9)


def test_scale_weights_zero_sum_guard():
    g = Graph()
    with pytest.raises(ValueError, match="underflow"):
        scale_weights(g, g.leaf(np.zeros(3)), 2)


def test_quantity_loss_values():
    g = Graph()
    alpha = g.leaf(np.array([0.5, 0.5, 0.5]))
    assert quantity_loss(g, alpha, 2).item() == pytest.approx(0.5)
    g2 = Graph()
    assert quantity_loss(g2, g2.leaf(np.array([1.0, 1.0])), 2).item() == 0.0


def test_quantity_loss_scales_with_alpha():
    g = Graph()
    a = np.array([0.3, 0.4])
    l1 = quantity_loss(g, g.leaf(a), 2).item()
    l2 = quantity_loss(g, g.leaf(2 * a), 2).item()
    assert l1 == pytest.approx(abs(a.sum() - 2))
    assert l2 == pytest.approx(abs(2 * a.sum() - 2))


def test_fire_every_frame_when_weight_near_threshold():
    eps = 1e-12
    alpha = np.array([1.0 - eps] * 3)
    trace, E, H = _fire(alpha)
    assert trace.fire_frames == [0, 1, 2]
    assert np.allclose(E, H, atol=1e-9)


def test_split_rule_hand_simulation():
    # alpha [0.6,0.6,0.6], threshold 1: fire at frame 1 with 0.6*h0+0.4*h1,
    # leftover 0.2+0.6=0.8 > 0.5 fires the inference tail 0.2*h1+0.6*h2
    alpha = np.array([0.6, 0.6, 0.6])
    trace, E, H = _fire(alpha)
    assert trace.fire_frames == [1, 2]
    assert np.allclose(E[0], 0.6 * H[0] + 0.4 * H[1])
    assert np.allclose(E[1], 0.2 * H[1] + 0.6 * H[2])
    assert trace.residual == pytest.approx(0.8)


def test_subthreshold_tail_yields_nothing():
    alpha = np.array([0.1, 0.1])
    trace, E, _ = _fire(alpha)
    assert trace.fire_frames == []
    assert E.shape[0] == 0
    assert trace.residual == pytest.approx(0.2)


def test_training_mode_fires_exactly_u():
    for seed in range(500):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(2, 41))
        U = int(rng.integers(1, 11))
        alpha = rng.uniform(1e-3, 1.0 - 1e-3, size=T)
        g = Graph()
        scaled = scale_weights(g, g.leaf(alpha), U)
        assert scaled.data.sum() == pytest.approx(U, abs=1e-9)
        H = g.leaf(rng.standard_normal((T, 2)))
        trace = integrate_and_fire(g, H, scaled, train_mode=True, num_tokens=U)
        assert len(trace.fire_frames) == U
        assert trace.fire_frames == sorted(trace.fire_frames)


def test_weight_conservation_per_fire():
    rng = np.random.default_rng(123)
    T, U = 20, 4
    alpha = rng.uniform(0.05, 0.95, size=T)
    g = Graph()
    scaled = scale_weights(g, g.leaf(alpha), U)
    # one-hot H isolates each frame's contributed weight per embedding
    H = g.leaf(np.eye(T))
    trace = integrate_and_fire(g, H, scaled, train_mode=True, num_tokens=U)
    W = trace.fired_embeddings.data    # (U, T): contributed weight matrix
    assert np.allclose(W.sum(axis=1), 1.0, atol=1e-9)
    # each frame feeds at most two consecutive embeddings
    for t in range(T):
        users = np.nonzero(W[:, t] > 1e-12)[0]
        assert len(users) <= 2
        if len(users) == 2:
            assert users[1] == users[0] + 1
    # all weight is accounted for
    assert np.allclose(W.sum(axis=0), scaled.data, atol=1e-9)


def test_inference_tail_fire_sums_to_residual():
    alpha = np.array([0.6, 0.6, 0.6])
    g = Graph()
    H = g.leaf(np.eye(3))
    trace = integrate_and_fire(g, H, g.leaf(alpha))
    W = trace.fired_embeddings.data
    assert W[0].sum() == pytest.approx(1.0, abs=1e-9)
    assert W[1].sum() == pytest.approx(trace.residual, abs=1e-9)


def test_cif_path_gradient_matches_finite_differences():
    # CE-like loss through scale -> fire -> weighted sums, wrt alpha logits
    rng = np.random.default_rng(7)
    T, U, d = 6, 2, 3
    H0 = rng.standard_normal((T, d))
    w_out = rng.standard_normal((U, d))

    def f(x):
        g = x.graph
        alpha = g.sigmoid(x)
        scaled = scale_weights(g, alpha, U)
        trace = integrate_and_fire(g, g.leaf(H0), scaled,
                                   train_mode=True, num_tokens=U)
        loss = g.sum(g.mul(trace.fired_embeddings, w_out))
        return g.add(loss, quantity_loss(g, alpha, U))

    assert grad_check(f, rng.standard_normal(T), step=1e-6) < 1e-4


def test_gradient_flows_into_h():
    rng = np.random.default_rng(8)
    T, U, d = 5, 2, 2
    alpha0 = rng.uniform(0.2, 0.8, size=T)
    w_out = rng.standard_normal((U, d))

    def f(x):
        g = x.graph
        scaled = scale_weights(g, g.leaf(alpha0), U)
        trace = integrate_and_fire(g, x, scaled, train_mode=True, num_tokens=U)
        return g.sum(g.mul(trace.fired_embeddings, w_out))

    assert grad_check(f, rng.standard_normal((T, d)), step=1e-5) < 1e-4


def test_threshold_must_be_positive():
    g = Graph()
    with pytest.raises(ValueError, match="threshold"):
        integrate_and_fire(g, g.leaf(np.zeros((2, 2))),
                           g.leaf(np.array([0.5, 0.5])), threshold=0.0)
