"""Attention pooling head: forward oracle, reductions, and gradient checks."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wlat import nn
from wlat.attention import (
    AttentionHead,
    attention_backward,
    attention_forward,
    backward_batch,
    forward_batch,
)
from wlat.rng import gaussian, new_rng


def random_head(rng, width, n_classes):
    head = AttentionHead.init(rng, width, n_classes)
    head.att_dense.bias[:] = gaussian(rng, n_classes)
    head.cls_dense.bias[:] = gaussian(rng, n_classes)
    return head


def naive_attention(h, head):
    """Scalar-loop re-implementation of the pooling definition."""
    n_frames, _ = h.shape
    n_classes = head.n_classes
    v = np.zeros((n_frames, n_classes))
    f = np.zeros((n_frames, n_classes))
    for t in range(n_frames):
        att = [
            sum(h[t, i] * head.att_dense.weight[i, k] for i in range(h.shape[1]))
            + head.att_dense.bias[k]
            for k in range(n_classes)
        ]
        cls = [
            sum(h[t, i] * head.cls_dense.weight[i, k] for i in range(h.shape[1]))
            + head.cls_dense.bias[k]
            for k in range(n_classes)
        ]
        top = max(att)
        exp_att = [math.exp(a - top) for a in att]
        total = sum(exp_att)
        for k in range(n_classes):
            v[t, k] = exp_att[k] / total
            f[t, k] = 1.0 / (1.0 + math.exp(-cls[k]))
    y = np.zeros(n_classes)
    weights = np.zeros((n_frames, n_classes))
    for k in range(n_classes):
        denom = sum(v[t, k] for t in range(n_frames))
        for t in range(n_frames):
            weights[t, k] = v[t, k] / denom
            y[k] += weights[t, k] * f[t, k]
    return y, weights


@pytest.mark.parametrize("seed", range(10))
def test_forward_matches_scalar_oracle(seed):
    rng = new_rng(seed)
    head = random_head(rng, 6, 4)
    h = gaussian(rng, (10, 6))
    pred = attention_forward(h, head)
    expected_y, expected_w = naive_attention(h, head)
    assert np.max(np.abs(pred.y - expected_y)) < 1e-12
    assert np.max(np.abs(pred.att_weights - expected_w)) < 1e-12


def test_single_frame_reduces_to_classifier_exactly():
    rng = new_rng(42)
    head = random_head(rng, 5, 3)
    h = gaussian(rng, (1, 5))
    pred = attention_forward(h, head)
    direct = nn.sigmoid(h @ head.cls_dense.weight + head.cls_dense.bias)[0]
    assert np.array_equal(pred.y, direct)
    assert np.array_equal(pred.att_weights, np.ones((1, 3)))


def test_zero_attention_parameters_mean_pool():
    rng = new_rng(43)
    head = random_head(rng, 5, 3)
    head.att_dense.weight[:] = 0.0
    head.att_dense.bias[:] = 0.0
    h = gaussian(rng, (7, 5))
    pred = attention_forward(h, head)
    frame_probs = nn.sigmoid(h @ head.cls_dense.weight + head.cls_dense.bias)
    assert np.max(np.abs(pred.y - frame_probs.mean(axis=0))) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_frames=st.integers(1, 8))
def test_output_in_unit_interval_and_columns_normalized(seed, n_frames):
    rng = new_rng(seed)
    head = random_head(rng, 4, 3)
    h = 5.0 * gaussian(rng, (n_frames, 4))
    pred = attention_forward(h, head)
    assert ((pred.y >= 0.0) & (pred.y <= 1.0)).all()
    assert (pred.att_weights >= 0.0).all()
    assert np.max(np.abs(pred.att_weights.sum(axis=0) - 1.0)) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_frame_permutation_invariance(seed):
    rng = new_rng(seed + 10)
    head = random_head(rng, 5, 4)
    h = gaussian(rng, (9, 5))
    perm = new_rng(seed).permutation(9)
    base = attention_forward(h, head)
    permuted = attention_forward(h[perm], head)
    assert np.max(np.abs(base.y - permuted.y)) < 1e-12
    assert np.max(np.abs(permuted.att_weights - base.att_weights[perm])) < 1e-12


def test_batched_forward_equals_per_clip():
    rng = new_rng(77)
    head = random_head(rng, 5, 3)
    h = gaussian(rng, (4, 6, 5))
    y, weights, frame_probs, _ = forward_batch(h, head)
    for i in range(4):
        pred = attention_forward(h[i], head)
        assert np.array_equal(y[i], pred.y)
        assert np.array_equal(weights[i], pred.att_weights)


def test_forward_rejects_empty_frames():
    head = random_head(new_rng(0), 4, 2)
    with pytest.raises(ValueError):
        forward_batch(np.zeros((1, 0, 4)), head)
    with pytest.raises(ValueError):
        forward_batch(np.zeros((1, 3, 5)), head)


def test_backward_zero_grad_gives_zero():
    rng = new_rng(1)
    head = random_head(rng, 5, 3)
    h = gaussian(rng, (6, 5))
    grad_h, grads = attention_backward(h, head, np.zeros(3))
    assert not grad_h.any()
    assert all(not g.any() for g in grads.values())


def test_single_frame_gradient_skips_attention_path():
    rng = new_rng(2)
    head = random_head(rng, 5, 3)
    h = gaussian(rng, (1, 5))
    grad_y = gaussian(rng, 3)
    _, grads = attention_backward(h, head, grad_y)
    assert np.max(np.abs(grads["att.weight"])) < 1e-15
    assert np.max(np.abs(grads["att.bias"])) < 1e-15
    assert grads["cls.weight"].any()


@pytest.mark.parametrize("seed", range(10))
def test_backward_finite_differences(seed):
    rng = new_rng(seed + 200)
    head = random_head(rng, 4, 3)
    h = gaussian(rng, (5, 4))
    direction = gaussian(rng, 3)

    def loss():
        return float(attention_forward(h, head).y @ direction)

    grad_h, grads = attention_backward(h, head, direction)
    params = {
        "h": h,
        "att.weight": head.att_dense.weight,
        "att.bias": head.att_dense.bias,
        "cls.weight": head.cls_dense.weight,
        "cls.bias": head.cls_dense.bias,
    }
    analytic = dict(grads, h=grad_h)
    assert nn.grad_check(loss, params, analytic) < 1e-5


def test_batched_backward_matches_per_clip():
    rng = new_rng(3)
    head = random_head(rng, 4, 3)
    h = gaussian(rng, (3, 5, 4))
    grad_y = gaussian(rng, (3, 3))
    y, weights, frame_probs, denom = forward_batch(h, head)
    grad_h, grads = backward_batch(h, head, weights, frame_probs, denom, grad_y)
    summed = {name: np.zeros_like(g) for name, g in grads.items()}
    for i in range(3):
        clip_grad_h, clip_grads = attention_backward(h[i], head, grad_y[i])
        assert np.allclose(grad_h[i], clip_grad_h, atol=1e-12)
        for name in summed:
            summed[name] += clip_grads[name]
    for name in summed:
        assert np.allclose(grads[name], summed[name], atol=1e-12)
