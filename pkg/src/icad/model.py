"""The in-context anomaly detector.

Rows of a table are normalized per feature about the context (min/max to
[-1, 1], queries riding the same affine map unclamped), embedded as tokens,
passed through a masked pre-norm transformer encoder in which context tokens
attend to each other and query tokens attend only to the context, and each
query token is decoded to a two-class probability (nominal, anomaly).  The
context carries no labels; a single forward pass scores every query at once.

The built-in normalization makes the detector scale-free: it sees the same
coordinate frame whether callers feed raw tables or pre-scaled ones, because
re-normalizing data that already spans [-1, 1] is the identity map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import derive_rng
from .tensor import (
    AttentionParams,
    NumericError,
    ShapeError,
    Tensor,
    add,
    cross_entropy,
    gelu,
    layer_norm,
    linear,
    masked_attention,
    no_grad,
    rows,
    softmax,
)

FFN_EXPANSION = 4


@dataclass(frozen=True)
class ModelConfig:
    d_max: int = 50
    embed_dim: int = 512
    layers: int = 12
    heads: int = 4
    decoder_hidden: int = 2048
    out_classes: int = 2

    def __post_init__(self):
        for name in ("d_max", "embed_dim", "layers", "heads", "decoder_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.embed_dim % self.heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}"
            )
        if self.out_classes != 2:
            raise ValueError(f"the detector is two-class; out_classes must be 2, got {self.out_classes}")


def parameter_manifest(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Name, shape, and init kind for every tensor, in storage order.

    Kinds: "weight" (Gaussian scaled by 1/sqrt(fan-in)), "bias" (zeros) and
    "gain" (ones).  Checkpoint loading validates files against this manifest,
    so the order here is part of the on-disk contract.
    """
    e = config.embed_dim
    entries: list[tuple[str, tuple[int, ...], str]] = []

    def norm(prefix: str):
        entries.append((f"{prefix}.gain", (e,), "gain"))
        entries.append((f"{prefix}.bias", (e,), "bias"))

    entries.append(("embed.w", (config.d_max, e), "weight"))
    entries.append(("embed.b", (e,), "bias"))
    for i in range(config.layers):
        norm(f"layer{i}.ln1")
        for proj in ("wq", "wk", "wv", "wo"):
            entries.append((f"layer{i}.attn.{proj}", (e, e), "weight"))
        for proj in ("bq", "bk", "bv", "bo"):
            entries.append((f"layer{i}.attn.{proj}", (e,), "bias"))
        norm(f"layer{i}.ln2")
        entries.append((f"layer{i}.ffn.w1", (e, FFN_EXPANSION * e), "weight"))
        entries.append((f"layer{i}.ffn.b1", (FFN_EXPANSION * e,), "bias"))
        entries.append((f"layer{i}.ffn.w2", (FFN_EXPANSION * e, e), "weight"))
        entries.append((f"layer{i}.ffn.b2", (e,), "bias"))
    norm("final_ln")
    entries.append(("decoder.w1", (e, config.decoder_hidden), "weight"))
    entries.append(("decoder.b1", (config.decoder_hidden,), "bias"))
    entries.append(("decoder.w2", (config.decoder_hidden, config.out_classes), "weight"))
    entries.append(("decoder.b2", (config.out_classes,), "bias"))
    return entries


class ModelParams:
    """All weights, keyed by name in a stable manifest order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        self.param_count = sum(t.data.size for t in tensors.values())

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelParams":
        """Gaussian 1/sqrt(fan-in) weights, zero biases, unit norm gains."""
        rng = derive_rng(seed, "model-init")
        tensors: dict[str, Tensor] = {}
        for name, shape, kind in parameter_manifest(config):
            if kind == "weight":
                data = rng.standard_normal(shape) / math.sqrt(shape[0])
            elif kind == "gain":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            tensors[name] = Tensor(data.astype(np.float32), requires_grad=True)
        return cls(config, tensors)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def to_dtype(self, dtype) -> "ModelParams":
        cast = {
            name: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for name, t in self.tensors.items()
        }
        return ModelParams(self.config, cast)

    def _attention(self, i: int) -> AttentionParams:
        t = self.tensors
        return AttentionParams(
            wq=t[f"layer{i}.attn.wq"], bq=t[f"layer{i}.attn.bq"],
            wk=t[f"layer{i}.attn.wk"], bk=t[f"layer{i}.attn.bk"],
            wv=t[f"layer{i}.attn.wv"], bv=t[f"layer{i}.attn.bv"],
            wo=t[f"layer{i}.attn.wo"], bo=t[f"layer{i}.attn.bo"],
        )


@dataclass
class Prediction:
    """Per-query class probabilities (columns: nominal, anomaly) and labels."""

    probs: np.ndarray
    labels: np.ndarray


def labels_from_probs(probs: np.ndarray, threshold: float) -> np.ndarray:
    """Anomaly iff the anomaly probability strictly exceeds the threshold."""
    return (probs[:, 1] > threshold).astype(int)


def build_mask(n_ctx: int, n_q: int) -> np.ndarray:
    """Visibility mask over (context ++ query) tokens.

    Every token may attend to every context token; no token may attend to a
    query token, so queries influence nothing but their own output.
    """
    if n_ctx < 1:
        raise ValueError("a mask needs at least one context token; queries would see nothing")
    if n_q < 0:
        raise ValueError(f"n_q must be non-negative, got {n_q}")
    n = n_ctx + n_q
    mask = np.zeros((n, n), dtype=bool)
    mask[:, :n_ctx] = True
    return mask


def embed_rows(features: np.ndarray, cfg: ModelConfig, params: ModelParams) -> Tensor:
    """Zero-pad rows to d_max, compensate magnitude by d_max/d, embed linearly."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise ShapeError(f"expected a feature matrix, got shape {features.shape}")
    n, d = features.shape
    if d < 1 or d > cfg.d_max:
        raise ShapeError(f"input has {d} features but the model supports 1..{cfg.d_max}")
    w = params.tensors["embed.w"]
    padded = np.zeros((n, cfg.d_max), dtype=w.dtype)
    padded[:, :d] = features * (cfg.d_max / d)
    return linear(Tensor(padded), w, params.tensors["embed.b"])


def normalize_about_context(context: np.ndarray, query: np.ndarray):
    """Map each feature so the context spans [-1, 1]; constant features go to 0.

    Queries pass through the same affine map without clamping, so out-of-range
    query values stay informative.  The statistics come from the context only:
    query rows cannot influence each other through them.
    """
    lo = context.min(axis=0)
    span = context.max(axis=0) - lo
    safe = np.where(span == 0.0, 1.0, span)

    def apply(rows_in: np.ndarray) -> np.ndarray:
        scaled = 2.0 * (rows_in - lo) / safe - 1.0
        return np.where(span == 0.0, 0.0, scaled)

    return apply(context), apply(query)


def _encode(episode, params: ModelParams) -> Tensor:
    cfg = params.config
    n_ctx = len(episode.context)
    n_q = len(episode.query)
    if n_ctx < 1:
        raise ValueError("episode has an empty context; the detector needs reference rows")
    if n_q < 1:
        raise ValueError("episode has no query rows to score")
    if episode.context.shape[1] != episode.query.shape[1]:
        raise ShapeError(
            f"context width {episode.context.shape[1]} != query width {episode.query.shape[1]}"
        )

    context, query = normalize_about_context(episode.context, episode.query)
    stacked = np.concatenate([context, query], axis=0)
    tokens = embed_rows(stacked, cfg, params)
    mask = build_mask(n_ctx, n_q)
    t = params.tensors
    for i in range(cfg.layers):
        normed = layer_norm(tokens, t[f"layer{i}.ln1.gain"], t[f"layer{i}.ln1.bias"])
        tokens = add(tokens, masked_attention(normed, mask, params._attention(i), cfg.heads))
        normed = layer_norm(tokens, t[f"layer{i}.ln2.gain"], t[f"layer{i}.ln2.bias"])
        hidden = gelu(linear(normed, t[f"layer{i}.ffn.w1"], t[f"layer{i}.ffn.b1"]))
        tokens = add(tokens, linear(hidden, t[f"layer{i}.ffn.w2"], t[f"layer{i}.ffn.b2"]))
        if not np.isfinite(tokens.data).all():
            raise NumericError(f"non-finite activations after layer {i}")
    return layer_norm(tokens, t["final_ln.gain"], t["final_ln.bias"])


def forward_logits(episode, params: ModelParams) -> Tensor:
    """Two-class logits for every query row; gradients flow when recording."""
    tokens = _encode(episode, params)
    n_ctx = len(episode.context)
    queries = rows(tokens, n_ctx, tokens.shape[0])
    t = params.tensors
    hidden = gelu(linear(queries, t["decoder.w1"], t["decoder.b1"]))
    logits = linear(hidden, t["decoder.w2"], t["decoder.b2"])
    if not np.isfinite(logits.data).all():
        raise NumericError("non-finite activations in the decoder")
    return logits


def forward(episode, params: ModelParams) -> Prediction:
    """Probabilities and 0.5-threshold labels for every query row."""
    with no_grad():
        probs = softmax(forward_logits(episode, params)).data
    return Prediction(probs=probs, labels=labels_from_probs(probs, 0.5))


def predict(episode, params: ModelParams, threshold: float = 0.5) -> Prediction:
    """Forward pass with an explicit decision threshold (ties resolve nominal)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must sit strictly inside (0,1), got {threshold}")
    with no_grad():
        probs = softmax(forward_logits(episode, params)).data
    return Prediction(probs=probs, labels=labels_from_probs(probs, threshold))
