"""Transformer detector: mask structure, embedding scaling, set-invariance
properties of the forward pass, decision rule, and end-to-end gradients."""

import numpy as np
import pytest

from gradcheck import max_rel_err, numeric_grad
from icad.model import (
    ModelConfig,
    ModelParams,
    build_mask,
    embed_rows,
    forward,
    forward_logits,
    labels_from_probs,
    predict,
)
from icad.priors import Episode
from icad.tensor import NumericError, ShapeError, cross_entropy, no_grad

TINY = ModelConfig(d_max=6, embed_dim=16, layers=2, heads=2, decoder_hidden=24)


def make_episode(rng, n_ctx=10, n_q=4, d=3):
    context = rng.normal(size=(n_ctx, d))
    query = rng.normal(size=(n_q, d))
    labels = (rng.random(n_q) < 0.5).astype(int)
    return Episode(
        context=context,
        query=query,
        query_labels=labels,
        context_labels=np.zeros(n_ctx, dtype=int),
        d=d,
    )


# ------------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(layers=0)
    with pytest.raises(ValueError):
        ModelConfig(out_classes=3)
    assert ModelConfig().out_classes == 2


def test_param_count_matches_closed_form():
    params = ModelParams.init(TINY, seed=0)
    # embed 6*16+16; per layer: 2 norms (2*32) + 4 projections (4*(16*16+16))
    # + ffn 16*64+64+64*16+16; final norm 32; decoder 16*24+24+24*2+2
    assert params.param_count == 7162
    assert len(params.parameters()) == len(params.names())
    assert params.names()[0] == "embed.w"


def test_init_is_deterministic_and_seed_sensitive():
    a = ModelParams.init(TINY, seed=3)
    b = ModelParams.init(TINY, seed=3)
    c = ModelParams.init(TINY, seed=4)
    for ta, tb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(ta.data, tb.data)
    assert any((ta.data != tc.data).any() for ta, tc in zip(a.parameters(), c.parameters()))


# --------------------------------------------------------------------- mask


def test_build_mask_two_context_one_query():
    mask = build_mask(2, 1)
    expected = np.array([[True, True, False], [True, True, False], [True, True, False]])
    np.testing.assert_array_equal(mask, expected)


def test_build_mask_no_queries_is_full():
    np.testing.assert_array_equal(build_mask(3, 0), np.ones((3, 3), dtype=bool))


def test_build_mask_rejects_empty_context():
    with pytest.raises(ValueError):
        build_mask(0, 4)


# ---------------------------------------------------------------- embedding


def test_embed_identity_scale_at_full_width():
    rng = np.random.default_rng(0)
    params = ModelParams.init(TINY, seed=1)
    x = rng.normal(size=(5, TINY.d_max))
    out = embed_rows(x, TINY, params).data
    w = params.tensors["embed.w"].data
    b = params.tensors["embed.b"].data
    np.testing.assert_allclose(out, x.astype(np.float32) @ w + b, atol=1e-5)


def test_embed_pads_and_compensates_narrow_input():
    rng = np.random.default_rng(1)
    params = ModelParams.init(TINY, seed=1)
    x = rng.normal(size=(4, 3))  # half of d_max=6
    out = embed_rows(x, TINY, params).data
    padded = np.zeros((4, 6))
    padded[:, :3] = x * 2.0  # d_max/d = 2
    w = params.tensors["embed.w"].data
    b = params.tensors["embed.b"].data
    np.testing.assert_allclose(out, padded.astype(np.float32) @ w + b, atol=1e-5)


def test_embed_zero_row_is_bias():
    params = ModelParams.init(TINY, seed=1)
    out = embed_rows(np.zeros((1, 4)), TINY, params).data
    np.testing.assert_allclose(out[0], params.tensors["embed.b"].data, atol=0)


def test_embed_rejects_too_many_features():
    params = ModelParams.init(TINY, seed=1)
    with pytest.raises(ShapeError) as err:
        embed_rows(np.zeros((2, 9)), TINY, params)
    assert "9" in str(err.value) and "6" in str(err.value)


# ------------------------------------------------------------------ forward


def test_forward_rows_sum_to_one():
    rng = np.random.default_rng(2)
    params = ModelParams.init(TINY, seed=2)
    pred = forward(make_episode(rng), params)
    np.testing.assert_allclose(pred.probs.sum(axis=1), np.ones(4), atol=1e-5)
    assert pred.probs.shape == (4, 2)
    assert ((pred.probs >= 0) & (pred.probs <= 1)).all()


def test_forward_query_rows_do_not_interact():
    rng = np.random.default_rng(3)
    params = ModelParams.init(TINY, seed=5)
    episode = make_episode(rng, n_ctx=12, n_q=6)
    full = forward(episode, params).probs
    for keep in ((0, 1, 2), (3,), (5, 0)):
        sub = Episode(
            context=episode.context,
            query=episode.query[list(keep)],
            query_labels=episode.query_labels[list(keep)],
            context_labels=episode.context_labels,
            d=episode.d,
        )
        probs = forward(sub, params).probs
        assert np.abs(probs - full[list(keep)]).max() < 1e-5


def test_forward_is_invariant_to_context_permutation():
    rng = np.random.default_rng(4)
    params = ModelParams.init(TINY, seed=6)
    episode = make_episode(rng, n_ctx=15, n_q=5)
    base = forward(episode, params).probs
    perm = rng.permutation(15)
    shuffled = Episode(
        context=episode.context[perm],
        query=episode.query,
        query_labels=episode.query_labels,
        context_labels=episode.context_labels[perm],
        d=episode.d,
    )
    probs = forward(shuffled, params).probs
    assert np.abs(probs - base).max() < 1e-5


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    params = ModelParams.init(TINY, seed=7)
    episode = make_episode(rng)
    a = forward(episode, params).probs
    b = forward(episode, params).probs
    np.testing.assert_array_equal(a, b)


def test_forward_rejects_empty_context():
    rng = np.random.default_rng(6)
    params = ModelParams.init(TINY, seed=8)
    episode = make_episode(rng, n_ctx=10)
    episode.context = episode.context[:0]
    episode.context_labels = episode.context_labels[:0]
    with pytest.raises(ValueError):
        forward(episode, params)


def test_forward_names_layer_on_non_finite_activation():
    rng = np.random.default_rng(7)
    params = ModelParams.init(TINY, seed=9)
    params.tensors["layer1.ffn.w2"].data[:] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(NumericError, match="layer 1"):
        forward(make_episode(rng), params)


# ------------------------------------------------------------------ predict


def test_predict_threshold_monotonicity():
    rng = np.random.default_rng(8)
    params = ModelParams.init(TINY, seed=10)
    episode = make_episode(rng, n_ctx=20, n_q=16)
    strict = predict(episode, params, threshold=0.9).labels.sum()
    loose = predict(episode, params, threshold=0.1).labels.sum()
    assert strict <= loose


def test_predict_validates_threshold():
    rng = np.random.default_rng(9)
    params = ModelParams.init(TINY, seed=11)
    episode = make_episode(rng)
    for bad in (0.0, 1.0, -0.2, 1.7):
        with pytest.raises(ValueError):
            predict(episode, params, threshold=bad)


def test_exact_threshold_tie_is_nominal():
    probs = np.array([[0.5, 0.5], [0.4, 0.6], [0.7, 0.3]])
    np.testing.assert_array_equal(labels_from_probs(probs, 0.5), [0, 1, 0])


def test_prediction_labels_match_probability_rule():
    rng = np.random.default_rng(10)
    params = ModelParams.init(TINY, seed=12)
    pred = forward(make_episode(rng, n_q=8), params)
    np.testing.assert_array_equal(pred.labels, (pred.probs[:, 1] > 0.5).astype(int))


# ---------------------------------------------------------------- gradients


def test_end_to_end_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    params = ModelParams.init(TINY, seed=13).to_dtype(np.float64)
    episode = make_episode(rng, n_ctx=8, n_q=4, d=3)

    def loss_value():
        with no_grad():
            return cross_entropy(forward_logits(episode, params), episode.query_labels).item()

    def run_backward():
        for p in params.parameters():
            p.grad = None
        loss = cross_entropy(forward_logits(episode, params), episode.query_labels)
        loss.backward()

    run_backward()
    checked = ["embed.b", "layer0.attn.bq", "layer0.ln1.gain", "layer1.ffn.b2", "decoder.b2"]
    tensors = params.parameters()
    names = params.names()
    for name in checked:
        idx = names.index(name)
        numeric = numeric_grad(loss_value, tensors, idx)
        err = max_rel_err(tensors[idx].grad, numeric)
        assert err < 1e-4, f"{name}: {err:.2e}"
