"""Numerics layer: forward values against hand/closed-form oracles, reverse-mode
gradients against central differences, optimizer and schedule arithmetic."""

import math

import numpy as np
import pytest

from gradcheck import assert_grads_match
from icad.tensor import (
    AdamState,
    AttentionParams,
    NumericError,
    ShapeError,
    Tensor,
    adam_step,
    add,
    cosine_lr,
    cross_entropy,
    gelu,
    layer_norm,
    linear,
    masked_attention,
    matmul,
    mul,
    no_grad,
    softmax,
)


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def rand64(rng, shape, requires_grad=True, scale=0.5):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=requires_grad)


def run_gradcheck(build_loss, tensors):
    def as_float():
        with no_grad():
            return build_loss().item()

    return assert_grads_match(as_float, build_loss, tensors)


def make_attention_params(rng, width, requires_grad=True):
    def w():
        return rand64(rng, (width, width), requires_grad, scale=1.0 / math.sqrt(width))

    def b():
        return rand64(rng, (width,), requires_grad, scale=0.1)

    return AttentionParams(wq=w(), bq=b(), wk=w(), bk=b(), wv=w(), bv=b(), wo=w(), bo=b())


# ---------------------------------------------------------------- forward values


def test_linear_matches_hand_computation():
    x = t64([[1.0, 2.0]])
    w = t64([[1.0, 2.0], [3.0, 4.0]])
    b = t64([1.0, 1.0])
    out = linear(x, w, b)
    np.testing.assert_allclose(out.data, [[8.0, 11.0]], rtol=0, atol=0)


def test_linear_shape_mismatch_names_both_shapes():
    x = t64(np.zeros((3, 4)))
    w = t64(np.zeros((5, 2)))
    b = t64(np.zeros(2))
    with pytest.raises(ShapeError) as err:
        linear(x, w, b)
    assert "(3, 4)" in str(err.value) and "(5, 2)" in str(err.value)


def test_gelu_matches_gaussian_cdf_oracle():
    xs = np.array([-2.0, -0.5, 0.0, 1.0, 3.0])
    out = gelu(t64(xs)).data
    oracle = np.array([x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0))) for x in xs])
    np.testing.assert_allclose(out, oracle, atol=1e-12)
    assert abs(out[3] - 0.8413447460685429) < 1e-4


def test_softmax_two_logits_with_log3_gap():
    c = 0.7
    out = softmax(t64([c, c + math.log(3.0)])).data
    np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 30.0, size=(4, 7))
    out = softmax(t64(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(4), atol=1e-12)
    assert (out >= 0).all()


def test_softmax_rejects_non_finite_input():
    with pytest.raises(NumericError):
        softmax(t64([1.0, math.nan]))
    with pytest.raises(NumericError):
        softmax(t64([1.0, math.inf]))


def test_layer_norm_two_point_row():
    x = t64([[1.0, 3.0]])
    gain = t64([1.0, 1.0])
    bias = t64([0.0, 0.0])
    out = layer_norm(x, gain, bias).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-3)


def test_layer_norm_matches_direct_formula():
    rng = np.random.default_rng(3)
    x = rng.normal(0, 2, size=(5, 6))
    gain = rng.normal(1, 0.2, size=6)
    bias = rng.normal(0, 0.2, size=6)
    eps = 1e-5
    out = layer_norm(t64(x), t64(gain), t64(bias), eps=eps).data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    oracle = (x - mu) / np.sqrt(var + eps) * gain + bias
    np.testing.assert_allclose(out, oracle, atol=1e-12)


def test_masked_attention_self_mask_is_value_projection():
    rng = np.random.default_rng(7)
    n, width = 5, 4
    x = rand64(rng, (n, width), requires_grad=False)
    params = make_attention_params(rng, width, requires_grad=False)
    mask = np.eye(n, dtype=bool)
    out = masked_attention(x, mask, params, heads=2).data
    values = x.data @ params.wv.data + params.bv.data
    oracle = values @ params.wo.data + params.bo.data
    np.testing.assert_allclose(out, oracle, atol=1e-10)


def test_masked_attention_ignores_masked_tokens_exactly():
    rng = np.random.default_rng(8)
    n, width = 6, 8
    x = rng.normal(0, 1, size=(n, width))
    params = make_attention_params(rng, width, requires_grad=False)
    mask = np.ones((n, n), dtype=bool)
    mask[:, -1] = False
    mask[-1, -1] = True  # last token sees itself so its row is not empty
    base = masked_attention(t64(x), mask, params, heads=2).data
    x2 = x.copy()
    x2[-1] += 1e6  # wildly different masked token
    moved = masked_attention(t64(x2), mask, params, heads=2).data
    np.testing.assert_array_equal(base[:-1], moved[:-1])


def test_masked_attention_rejects_all_masked_row():
    rng = np.random.default_rng(9)
    x = rand64(rng, (3, 4), requires_grad=False)
    params = make_attention_params(rng, 4, requires_grad=False)
    mask = np.ones((3, 3), dtype=bool)
    mask[1, :] = False
    with pytest.raises(ValueError, match="mask row"):
        masked_attention(x, mask, params, heads=2)


def test_masked_attention_rejects_indivisible_heads():
    rng = np.random.default_rng(10)
    x = rand64(rng, (3, 6), requires_grad=False)
    params = make_attention_params(rng, 6, requires_grad=False)
    with pytest.raises(ShapeError):
        masked_attention(x, np.ones((3, 3), dtype=bool), params, heads=4)


def test_cross_entropy_frozen_two_class_value():
    logits = t64([[0.0, math.log(3.0)]])
    loss = cross_entropy(logits, np.array([1]))
    assert abs(loss.item() - 0.2876820724517809) < 1e-9


def test_cross_entropy_is_mean_over_rows():
    logits = t64([[0.0, math.log(3.0)], [0.0, math.log(3.0)]])
    loss = cross_entropy(logits, np.array([1, 0]))
    expected = 0.5 * (-math.log(0.75) - math.log(0.25))
    assert abs(loss.item() - expected) < 1e-9


def test_cross_entropy_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        cross_entropy(t64([[0.0, 1.0]]), np.array([2]))
    with pytest.raises(ValueError):
        cross_entropy(t64([[0.0, 1.0]]), np.array([-1]))


def test_cross_entropy_is_stable_for_large_logits():
    loss = cross_entropy(t64([[0.0, 5000.0]]), np.array([1]))
    assert loss.item() == 0.0
    loss = cross_entropy(t64([[0.0, 5000.0]]), np.array([0]))
    assert math.isfinite(loss.item()) and loss.item() > 1000


# ---------------------------------------------------------------- gradients


def test_grad_linear():
    rng = np.random.default_rng(20)
    x = rand64(rng, (3, 4))
    w = rand64(rng, (4, 2))
    b = rand64(rng, (2,))
    c = rng.normal(size=(3, 2))
    run_gradcheck(lambda: mul(linear(x, w, b), t64(c)).sum(), [x, w, b])


def test_grad_add_mul_broadcasting():
    rng = np.random.default_rng(21)
    a = rand64(rng, (3, 4))
    b = rand64(rng, (4,))
    c = rand64(rng, (3, 1))
    run_gradcheck(lambda: mul(add(a, b), c).sum(), [a, b, c])


def test_grad_matmul_batched():
    rng = np.random.default_rng(22)
    a = rand64(rng, (2, 3, 4))
    b = rand64(rng, (2, 4, 3))
    run_gradcheck(lambda: matmul(a, b).sum(), [a, b])


def test_grad_gelu():
    rng = np.random.default_rng(23)
    x = rand64(rng, (4, 3), scale=1.5)
    c = rng.normal(size=(4, 3))
    run_gradcheck(lambda: mul(gelu(x), t64(c)).sum(), [x])


def test_grad_softmax():
    rng = np.random.default_rng(24)
    x = rand64(rng, (3, 5), scale=2.0)
    c = rng.normal(size=(3, 5))
    run_gradcheck(lambda: mul(softmax(x), t64(c)).sum(), [x])


def test_grad_layer_norm():
    rng = np.random.default_rng(25)
    x = rand64(rng, (4, 6), scale=2.0)
    gain = rand64(rng, (6,), scale=0.5)
    bias = rand64(rng, (6,), scale=0.5)
    c = rng.normal(size=(4, 6))
    run_gradcheck(lambda: mul(layer_norm(x, gain, bias), t64(c)).sum(), [x, gain, bias])


def test_grad_cross_entropy():
    rng = np.random.default_rng(26)
    logits = rand64(rng, (6, 2), scale=2.0)
    labels = np.array([0, 1, 1, 0, 1, 0])
    run_gradcheck(lambda: cross_entropy(logits, labels), [logits])


def test_grad_masked_attention_all_operands():
    rng = np.random.default_rng(27)
    n, width = 5, 4
    x = rand64(rng, (n, width))
    params = make_attention_params(rng, width)
    mask = np.ones((n, n), dtype=bool)
    mask[0, 2:] = False
    mask[3, :2] = False
    c = rng.normal(size=(n, width))
    operands = [x, *params.tensors()]
    run_gradcheck(lambda: mul(masked_attention(x, mask, params, heads=2), t64(c)).sum(), operands)


def test_backward_accumulates_across_calls():
    x = t64([2.0], requires_grad=True)
    mul(x, x).sum().backward()
    first = x.grad.copy()
    mul(x, x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * first)


def test_backward_rejects_non_scalar_root():
    x = t64([[1.0, 2.0]], requires_grad=True)
    y = mul(x, x)
    with pytest.raises(ValueError):
        y.backward()


def test_no_grad_builds_no_graph():
    x = t64([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = mul(x, x).sum()
    assert not y.requires_grad
    y2 = mul(x, x).sum()
    assert y2.requires_grad


# ---------------------------------------------------------------- optimizer


def test_adam_first_step_magnitude():
    p = t64([1.0], requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [np.array([1.0])], state, lr=0.1)
    assert abs(p.data[0] - 0.9) < 1e-6
    assert state.step_count == 1


def test_adam_two_steps_match_hand_rolled_update():
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    grads = [np.array([0.3]), np.array([-0.2])]
    p = t64([0.5], requires_grad=True)
    state = AdamState.for_params([p])
    for g in grads:
        adam_step([p], [g], state, lr=0.01)

    # independent reference: textbook Adam with bias correction
    theta, m, v = 0.5, 0.0, 0.0
    for step, g in enumerate(grads, start=1):
        g = float(g[0])
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**step)
        vhat = v / (1 - beta2**step)
        theta -= 0.01 * mhat / (math.sqrt(vhat) + eps)
    assert abs(p.data[0] - theta) < 1e-12


def test_adam_rejects_non_finite_gradient_without_update():
    p = t64([1.0], requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [np.array([0.5])], state, lr=0.1)
    snapshot = p.data.copy()
    count = state.step_count
    with pytest.raises(NumericError):
        adam_step([p], [np.array([math.nan])], state, lr=0.1)
    np.testing.assert_array_equal(p.data, snapshot)
    assert state.step_count == count


def test_adam_rejects_shape_mismatch():
    p = t64([1.0, 2.0], requires_grad=True)
    state = AdamState.for_params([p])
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(3)], state, lr=0.1)


# ---------------------------------------------------------------- schedule


def test_cosine_schedule_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 0.25) == pytest.approx(0.25, abs=1e-12)
    assert cosine_lr(100, 100, 0.25) == pytest.approx(0.0, abs=1e-12)
    assert cosine_lr(50, 100, 1.0) == pytest.approx(0.5, abs=1e-12)


def test_cosine_schedule_is_monotone_decreasing():
    values = [cosine_lr(s, 40, 1e-4) for s in range(41)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_cosine_schedule_clamps_past_total_with_warning():
    with pytest.warns(UserWarning):
        assert cosine_lr(101, 100, 0.1) == 0.0


def test_cosine_schedule_rejects_bad_arguments():
    with pytest.raises(ValueError):
        cosine_lr(-1, 100, 0.1)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.1)


# ---------------------------------------------------------------- dtype policy


def test_default_dtype_is_float32_and_float64_is_preserved():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.array([1.0, 2.0], dtype=np.float64)).dtype == np.float64
    assert Tensor(np.array([1.0], dtype=np.float32)).dtype == np.float32
