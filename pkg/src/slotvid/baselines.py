"""Comparator connectors: mean pooling and a learnable-query transformer.

The pooling path averages over space per frame and over time per cell, then
projects. The query transformer reads the inputs through multi-head
cross-attention whose softmax runs over the *input* axis (one distribution
per query), the opposite normalization direction from slot attention; its
returned masks are stored input-by-query so columns, not rows, sum to one.

``slowfast_wrap`` applies the query transformer with exactly the slot
connector's frame sampling, pooling, temporal embeddings and projections, so
token counts match branch for branch and comparisons isolate the aggregation
mechanism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .connector import ConnectorConfig, ConnectorError, VideoFeatures, uniform_sample_frames
from .engine import (
    ShapeError,
    Value,
    add,
    avg_pool_hw,
    broadcast_to,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax_axis,
    take,
    transpose,
)


# -- pooling connector -----------------------------------------------------------


@dataclass
class PoolingParams:
    proj_w: Value
    proj_b: Value

    @classmethod
    def create(cls, rng: np.random.Generator, cfg: ConnectorConfig) -> "PoolingParams":
        return cls(
            proj_w=Value(engine.linear_init(rng, cfg.feat_dim, cfg.out_dim), requires_grad=True),
            proj_b=Value(np.zeros(cfg.out_dim, dtype=np.float32), requires_grad=True),
        )

    def named(self) -> dict:
        return {"proj.w": self.proj_w, "proj.b": self.proj_b}


def pooling_token_count(cfg: ConnectorConfig, n_frames: int) -> int:
    return n_frames + cfg.grid_h * cfg.grid_w


def pooling_tokens_batch(feats: Value) -> Value:
    """Pre-projection pooled tokens: T frame means then H*W cell means."""
    if feats.ndim != 5:
        raise ShapeError("expected [B, T, H, W, D] features")
    b, t, h, w, d = feats.shape
    spatial = feats.mean(axis=(2, 3))  # [B, T, D]
    temporal = reshape(feats.mean(axis=1), (b, h * w, d))  # [B, H*W, D]
    return engine.concat([spatial, temporal], axis=1)


def pooling_connector_batch(feats: Value, params: PoolingParams) -> Value:
    tokens = pooling_tokens_batch(feats)
    return add(matmul(tokens, params.proj_w), params.proj_b)


def pooling_connector(features: VideoFeatures, cfg: ConnectorConfig, params: PoolingParams) -> np.ndarray:
    """Compress one clip to T + H*W projected tokens."""
    t, h, w, d = features.grid.shape
    with engine.no_grad():
        out = pooling_connector_batch(Value(features.grid.reshape(1, t, h, w, d)), params)
    return out.data[0].copy()


# -- learnable-query transformer ----------------------------------------------------


@dataclass
class QTLayerParams:
    ln_q_g: Value
    ln_q_b: Value
    wq: Value
    wk: Value
    wv: Value
    wo: Value
    bo: Value
    ln_s_g: Value
    ln_s_b: Value
    s_wq: Value
    s_wk: Value
    s_wv: Value
    s_wo: Value
    s_bo: Value
    ln_f_g: Value
    ln_f_b: Value
    ff_w1: Value
    ff_b1: Value
    ff_w2: Value
    ff_b2: Value

    def named(self, prefix: str) -> dict:
        names = (
            "ln_q_g", "ln_q_b", "wq", "wk", "wv", "wo", "bo",
            "ln_s_g", "ln_s_b", "s_wq", "s_wk", "s_wv", "s_wo", "s_bo",
            "ln_f_g", "ln_f_b", "ff_w1", "ff_b1", "ff_w2", "ff_b2",
        )
        return {f"{prefix}.{n}": getattr(self, n) for n in names}


@dataclass
class QueryTransformerParams:
    """Learnable queries plus cross/self-attention blocks over them."""

    queries: Value  # [N_q, D_q]
    layers: list
    n_heads: int = 4
    nonlinearity: str = "gelu-like"

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        n_queries: int,
        d_in: int,
        d_q: int,
        n_layers: int = 2,
        n_heads: int = 4,
        nonlinearity: str = "gelu-like",
    ) -> "QueryTransformerParams":
        if n_queries < 1:
            raise ValueError("need at least one query")
        if d_q % n_heads:
            raise ValueError(f"query width {d_q} not divisible by {n_heads} heads")

        def ones(d):
            return Value(np.ones(d, dtype=np.float32), requires_grad=True)

        def zeros(d):
            return Value(np.zeros(d, dtype=np.float32), requires_grad=True)

        def lin(fi, fo):
            return Value(engine.linear_init(rng, fi, fo), requires_grad=True)

        layers = []
        for _ in range(n_layers):
            layers.append(
                QTLayerParams(
                    ln_q_g=ones(d_q), ln_q_b=zeros(d_q),
                    wq=lin(d_q, d_q), wk=lin(d_in, d_q), wv=lin(d_in, d_q),
                    wo=lin(d_q, d_q), bo=zeros(d_q),
                    ln_s_g=ones(d_q), ln_s_b=zeros(d_q),
                    s_wq=lin(d_q, d_q), s_wk=lin(d_q, d_q), s_wv=lin(d_q, d_q),
                    s_wo=lin(d_q, d_q), s_bo=zeros(d_q),
                    ln_f_g=ones(d_q), ln_f_b=zeros(d_q),
                    ff_w1=lin(d_q, 2 * d_q), ff_b1=zeros(2 * d_q),
                    ff_w2=lin(2 * d_q, d_q), ff_b2=zeros(d_q),
                )
            )
        return cls(
            queries=Value(engine.normal(rng, (n_queries, d_q), std=0.5), requires_grad=True),
            layers=layers,
            n_heads=n_heads,
            nonlinearity=nonlinearity,
        )

    @property
    def n_queries(self) -> int:
        return self.queries.data.shape[0]

    @property
    def d_q(self) -> int:
        return self.queries.data.shape[1]

    def named(self, prefix: str) -> dict:
        out = {f"{prefix}.queries": self.queries}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}.layer{i}"))
        return out


def _split_heads(x: Value, n_heads: int) -> Value:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Value) -> Value:
    b, h, n, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def query_transformer_batch(inputs: Value, params: QueryTransformerParams) -> tuple[Value, Value]:
    """Run the query stack over [B, M, D_in] inputs.

    Returns (tokens [B, N_q, D_q], masks [B, heads, M, N_q]). The mask is the
    final layer's cross attention transposed to input-by-query: each column is
    one query's softmax distribution over the inputs and sums to one; rows do
    not.
    """
    if inputs.ndim != 3:
        raise ShapeError("query_transformer_batch expects [B, M, D_in]")
    b, m, _ = inputs.shape
    nq, dq = params.queries.data.shape
    heads = params.n_heads
    dh = dq // heads
    temp = np.float32(1.0 / np.sqrt(dh))
    nonlin = engine.NONLINEARITIES[params.nonlinearity]

    x = broadcast_to(reshape(params.queries, (1, nq, dq)), (b, nq, dq))
    cross = None
    for layer in params.layers:
        q = _split_heads(matmul(layer_norm(x, layer.ln_q_g, layer.ln_q_b), layer.wq), heads)
        k = _split_heads(matmul(inputs, layer.wk), heads)
        v = _split_heads(matmul(inputs, layer.wv), heads)
        logits = scale(matmul(q, transpose(k, (0, 1, 3, 2))), temp)  # [B, h, Nq, M]
        cross = softmax_axis(logits, axis=3)  # one distribution over inputs per query
        ctx = _merge_heads(matmul(cross, v))
        x = add(x, add(matmul(ctx, layer.wo), layer.bo))

        xs = layer_norm(x, layer.ln_s_g, layer.ln_s_b)
        sq = _split_heads(matmul(xs, layer.s_wq), heads)
        sk = _split_heads(matmul(xs, layer.s_wk), heads)
        sv = _split_heads(matmul(xs, layer.s_wv), heads)
        s_logits = scale(matmul(sq, transpose(sk, (0, 1, 3, 2))), temp)
        s_attn = softmax_axis(s_logits, axis=3)
        x = add(x, add(matmul(_merge_heads(matmul(s_attn, sv)), layer.s_wo), layer.s_bo))

        hidden = nonlin(add(matmul(layer_norm(x, layer.ln_f_g, layer.ln_f_b), layer.ff_w1), layer.ff_b1))
        x = add(x, add(matmul(hidden, layer.ff_w2), layer.ff_b2))

    masks = transpose(cross, (0, 1, 3, 2))  # [B, heads, M, Nq]
    return x, masks


def query_transformer_connector(
    features: VideoFeatures,
    params: QueryTransformerParams,
    cfg: ConnectorConfig,
    input_cap: int = 8192,
) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate the flattened T*H*W token grid into N_q tokens.

    Returns (tokens [N_q, D_q], masks [heads, M, N_q]).
    """
    t, h, w, d = features.grid.shape
    m = t * h * w
    if m > input_cap:
        raise ConnectorError(f"flattened input of {m} tokens exceeds the cap {input_cap}")
    with engine.no_grad():
        tokens, masks = query_transformer_batch(Value(features.grid.reshape(1, m, d)), params)
    return tokens.data[0].copy(), masks.data[0].copy()


def head_mean_mask(masks: np.ndarray) -> np.ndarray:
    """Average a [heads, M, N] mask stack over heads."""
    return np.asarray(masks, dtype=np.float32).mean(axis=0)


# -- slot-parity wrapper --------------------------------------------------------------


@dataclass
class WrapParams:
    """Query-transformer analogs of the two-branch connector."""

    qt_slow: QueryTransformerParams
    qt_fast: QueryTransformerParams
    slow_pos: Value
    fast_pos: Value
    s_proj_w: Value
    s_proj_b: Value
    f_proj_w: Value
    f_proj_b: Value
    proj_w: Value
    proj_b: Value

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        cfg: ConnectorConfig,
        n_layers: int = 2,
        n_heads: int = 4,
    ) -> "WrapParams":
        cfg.validate()

        def lin(fi, fo):
            return Value(engine.linear_init(rng, fi, fo), requires_grad=True)

        def zeros(d):
            return Value(np.zeros(d, dtype=np.float32), requires_grad=True)

        return cls(
            qt_slow=QueryTransformerParams.create(
                rng, cfg.slots_per_frame, cfg.feat_dim, cfg.slot_dim,
                n_layers=n_layers, n_heads=n_heads, nonlinearity=cfg.nonlinearity,
            ),
            qt_fast=QueryTransformerParams.create(
                rng, cfg.slots_per_position, cfg.feat_dim, cfg.slot_dim,
                n_layers=n_layers, n_heads=n_heads, nonlinearity=cfg.nonlinearity,
            ),
            slow_pos=Value(engine.normal(rng, (cfg.slow_frames, cfg.slot_dim), std=0.02), requires_grad=True),
            fast_pos=Value(engine.normal(rng, (cfg.max_frames, cfg.feat_dim), std=0.02), requires_grad=True),
            s_proj_w=lin(cfg.slot_dim, cfg.slot_dim),
            s_proj_b=zeros(cfg.slot_dim),
            f_proj_w=lin(cfg.slot_dim, cfg.slot_dim),
            f_proj_b=zeros(cfg.slot_dim),
            proj_w=lin(cfg.slot_dim, cfg.out_dim),
            proj_b=zeros(cfg.out_dim),
        )

    def named(self) -> dict:
        out = {}
        out.update(self.qt_slow.named("qt_slow"))
        out.update(self.qt_fast.named("qt_fast"))
        out["slow_pos"] = self.slow_pos
        out["fast_pos"] = self.fast_pos
        out["s_proj.w"] = self.s_proj_w
        out["s_proj.b"] = self.s_proj_b
        out["f_proj.w"] = self.f_proj_w
        out["f_proj.b"] = self.f_proj_b
        out["proj.w"] = self.proj_w
        out["proj.b"] = self.proj_b
        return out


def wrap_slow_batch(feats: Value, cfg: ConnectorConfig, params: WrapParams) -> tuple[Value, Value]:
    """Per-frame query aggregation with the slot connector's sampling and embeddings."""
    b, t, h, w, d = feats.shape
    idx = uniform_sample_frames(t, cfg.slow_frames)
    frames = reshape(take(feats, idx, axis=1), (b * cfg.slow_frames, h * w, d))
    tokens, masks = query_transformer_batch(frames, params.qt_slow)
    tokens = reshape(tokens, (b, cfg.slow_frames, cfg.slots_per_frame, cfg.slot_dim))
    pos = reshape(params.slow_pos, (1, cfg.slow_frames, 1, cfg.slot_dim))
    tokens = add(tokens, broadcast_to(pos, tokens.shape))
    tokens = reshape(tokens, (b, cfg.n_slow_tokens, cfg.slot_dim))
    tokens = add(matmul(tokens, params.s_proj_w), params.s_proj_b)
    nh = params.qt_slow.n_heads
    masks = reshape(masks, (b, cfg.slow_frames, nh, h * w, cfg.slots_per_frame))
    return tokens, masks


def wrap_fast_batch(feats: Value, cfg: ConnectorConfig, params: WrapParams) -> tuple[Value, Value]:
    """Per-position temporal query aggregation with the slot connector's pooling."""
    b, t, h, w, d = feats.shape
    if t > cfg.max_frames:
        raise ConnectorError(
            f"clip has {t} frames but the temporal embedding table holds {cfg.max_frames}"
        )
    m_d = cfg.n_positions
    pooled = reshape(avg_pool_hw(feats, cfg.pool_stride), (b, t, m_d, d))
    emb = take(params.fast_pos, np.arange(t, dtype=np.intp))
    pooled = add(pooled, broadcast_to(reshape(emb, (1, t, 1, d)), pooled.shape))
    per_pos = reshape(transpose(pooled, (0, 2, 1, 3)), (b * m_d, t, d))
    tokens, masks = query_transformer_batch(per_pos, params.qt_fast)
    tokens = reshape(tokens, (b, m_d * cfg.slots_per_position, cfg.slot_dim))
    tokens = add(matmul(tokens, params.f_proj_w), params.f_proj_b)
    nh = params.qt_fast.n_heads
    masks = reshape(masks, (b, m_d, nh, t, cfg.slots_per_position))
    return tokens, masks


def slowfast_wrap(features, cfg: ConnectorConfig, params: WrapParams, mode: str = "both"):
    """Token-count-parity baseline forward; mode selects slow, fast or both branches."""
    if mode not in ("slow", "fast", "both"):
        raise ValueError(f"unknown wrap mode {mode!r}")
    if isinstance(features, VideoFeatures):
        t, h, w, d = features.grid.shape
        feats = Value(features.grid.reshape(1, t, h, w, d))
    else:
        feats = features
    parts = []
    slow_masks = fast_masks = None
    if mode in ("slow", "both"):
        tokens, slow_masks = wrap_slow_batch(feats, cfg, params)
        parts.append(tokens)
    if mode in ("fast", "both"):
        tokens, fast_masks = wrap_fast_batch(feats, cfg, params)
        parts.append(tokens)
    joined = parts[0] if len(parts) == 1 else engine.concat(parts, axis=1)
    out = add(matmul(joined, params.proj_w), params.proj_b)
    return out, slow_masks, fast_masks
