"""Transformer autoregressor over prefix-segment tokens plus a class token.

Tokens are super-point features with linear 4D positional embeddings added;
blocks are pre-norm (y = x + MHSA(LN(x)); z = y + FFN(LN(y))) with full
bidirectional attention and a GELU feed-forward. There is no final LayerNorm,
so zeroing the residual-branch output projections makes the stack an exact
identity on tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

import pointseq.autodiff as ad
from pointseq.autodiff import ParamSet, Tensor
from pointseq.config import TransformerConfig
from pointseq.encoder import SegmentEmbedding

ParamsLike = Union[ParamSet, Mapping[str, Tensor]]


@dataclass
class TokenSequence:
    tokens: Tensor               # (m+1, c), row 0 is the class token
    positions: np.ndarray        # (m+1, 4) with t already normalized to [0, 1]
    segment_of_token: np.ndarray  # (m+1,) int, class token flagged -1


def _leaves(params: ParamsLike) -> Mapping[str, Tensor]:
    if isinstance(params, ParamSet):
        return ad.make_leaves(params)
    return params


def transformer_param_shapes(cfg: TransformerConfig) -> Dict[str, Tuple[int, ...]]:
    c = cfg.c
    shapes: Dict[str, Tuple[int, ...]] = {
        "pos.w": (4, c),
        "pos.b": (c,),
        "cls.token": (c,),
    }
    hidden = cfg.ffn_mult * c
    for i in range(cfg.layers):
        p = f"tr.{i}"
        shapes[f"{p}.ln1.g"] = (c,)
        shapes[f"{p}.ln1.b"] = (c,)
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{proj}"] = (c, c)
        # no key bias: softmax cancels a per-query constant score shift exactly
        for bias in ("bq", "bv", "bo"):
            shapes[f"{p}.attn.{bias}"] = (c,)
        shapes[f"{p}.ln2.g"] = (c,)
        shapes[f"{p}.ln2.b"] = (c,)
        shapes[f"{p}.ffn.w1"] = (c, hidden)
        shapes[f"{p}.ffn.b1"] = (hidden,)
        shapes[f"{p}.ffn.w2"] = (hidden, c)
        shapes[f"{p}.ffn.b2"] = (c,)
    return shapes


def positional_embed(coords, params: ParamsLike) -> Tensor:
    """Row-wise linear map of (x, y, z, t) coordinates into the model width."""
    leaves = _leaves(params)
    t = coords if isinstance(coords, Tensor) else ad.constant(np.asarray(coords))
    if t.ndim != 2 or t.shape[1] != 4:
        raise ValueError(f"positional_embed: expected (k, 4) coords, got {t.shape}")
    return ad.linear(t, leaves["pos.w"], leaves["pos.b"])


def build_token_sequence(prefix: Sequence[SegmentEmbedding], target_stats,
                         params: ParamsLike, total_frames: int) -> TokenSequence:
    """Flatten prefix embeddings into tokens ordered by (segment, frame,
    anchor), add positional embeddings, and prepend the class token.

    `target_stats` is (x0, y0, z0, t0) for the target segment: the mean of
    its points and the normalized index of its first frame.
    """
    if not prefix:
        raise ValueError("build_token_sequence: empty prefix")
    leaves = _leaves(params)
    t_norm = 1.0 / max(total_frames - 1, 1)

    feat_blocks: List[Tensor] = []
    position_rows: List[np.ndarray] = []
    segment_ids: List[np.ndarray] = []
    for emb in prefix:
        l, r, c = emb.feats.shape
        feat_blocks.append(ad.reshape(emb.feats, (l * r, c)))
        pos = emb.anchor_coords.reshape(l * r, 4).astype(np.float64).copy()
        pos[:, 3] *= t_norm
        position_rows.append(pos)
        segment_ids.append(np.full(l * r, emb.segment_index, dtype=np.int64))
    feats = ad.concat(feat_blocks, axis=0) if len(feat_blocks) > 1 else feat_blocks[0]
    positions = np.concatenate(position_rows, axis=0)

    dtype = feats.dtype
    tokens = ad.add(feats, positional_embed(positions.astype(dtype), leaves))
    stats = np.asarray(target_stats, dtype=dtype).reshape(1, 4)
    cls = ad.add(ad.reshape(leaves["cls.token"], (1, -1)), positional_embed(stats, leaves))
    all_tokens = ad.concat([cls, tokens], axis=0)
    all_positions = np.concatenate([stats.astype(np.float64), positions], axis=0)
    segment_of_token = np.concatenate([np.array([-1], dtype=np.int64)] + segment_ids)
    return TokenSequence(tokens=all_tokens, positions=all_positions,
                         segment_of_token=segment_of_token)


def _affine_ln(x: Tensor, leaves, prefix: str) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x), leaves[f"{prefix}.g"]), leaves[f"{prefix}.b"])


def multi_head_attention(x: Tensor, params: ParamsLike, layer: int,
                         cfg: TransformerConfig) -> Tuple[Tensor, Tensor]:
    """Full (non-causal) multi-head self-attention on (B, T, C) tokens.

    Returns (output, attention) where attention is (B, heads, T, T) softmax
    weights.
    """
    leaves = _leaves(params)
    p = f"tr.{layer}.attn"
    b, t, c = x.shape
    heads = cfg.heads
    hd = c // heads
    def project(name, bias=True):
        out = ad.linear(x, leaves[f"{p}.w{name}"], leaves[f"{p}.b{name}"] if bias else None)
        return ad.transpose(ad.reshape(out, (b, t, heads, hd)), (0, 2, 1, 3))
    q, k, v = project("q"), project("k", bias=False), project("v")
    scale = ad.constant(np.asarray(1.0 / math.sqrt(hd), dtype=x.dtype))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
    attn = ad.softmax(scores)
    ctx = ad.matmul(attn, v)                                   # (B, H, T, hd)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, c))
    out = ad.linear(ctx, leaves[f"{p}.wo"], leaves[f"{p}.bo"])
    return out, attn


def transformer_tokens(x: Tensor, params: ParamsLike, cfg: TransformerConfig) -> Tensor:
    """Run the pre-norm block stack on (B, T, C) or (T, C) tokens."""
    leaves = _leaves(params)
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    if x.shape[-1] != cfg.c:
        raise ValueError(f"transformer: token width {x.shape[-1]} != configured c={cfg.c}")
    for i in range(cfg.layers):
        attn_out, _ = multi_head_attention(_affine_ln(x, leaves, f"tr.{i}.ln1"), leaves, i, cfg)
        x = ad.add(x, attn_out)
        h = _affine_ln(x, leaves, f"tr.{i}.ln2")
        h = ad.gelu(ad.linear(h, leaves[f"tr.{i}.ffn.w1"], leaves[f"tr.{i}.ffn.b1"]))
        h = ad.linear(h, leaves[f"tr.{i}.ffn.w2"], leaves[f"tr.{i}.ffn.b2"])
        x = ad.add(x, h)
    if squeeze:
        x = ad.reshape(x, x.shape[1:])
    return x


def transformer_forward(seq: TokenSequence, params: ParamsLike,
                        cfg: TransformerConfig) -> Tensor:
    return transformer_tokens(seq.tokens, params, cfg)


def split_outputs(outputs: Tensor, segment_of_token: np.ndarray,
                  prefix: Sequence[SegmentEmbedding]
                  ) -> Tuple[SegmentEmbedding, Tensor, Tensor]:
    """Partition transformer outputs into (predictions Q, class embedding,
    hard-negative pool).

    Q takes the tokens of the last prefix segment and keeps that segment's
    encoder anchor coordinates; the hard pool is every other non-class
    token; the class embedding is output row 0.
    """
    seg = np.asarray(segment_of_token)
    if outputs.shape[0] != seg.shape[0]:
        raise ValueError("split_outputs: outputs and segment_of_token disagree in length")
    pred_segment = prefix[-1]
    pred_idx = np.flatnonzero(seg == pred_segment.segment_index)
    if pred_idx.size == 0:
        raise ValueError(f"split_outputs: no tokens for prediction segment {pred_segment.segment_index}")
    hard_idx = np.flatnonzero((seg >= 0) & (seg < pred_segment.segment_index))
    l, r, c = pred_segment.feats.shape
    q_feats = ad.reshape(ad.gather(outputs, pred_idx), (l, r, c))
    q = SegmentEmbedding(feats=q_feats, anchor_coords=pred_segment.anchor_coords,
                         segment_index=pred_segment.segment_index)
    class_embed = ad.reshape(ad.gather(outputs, np.array([0])), (outputs.shape[1],))
    hard_pool = ad.gather(outputs, hard_idx)
    return q, class_embed, hard_pool
