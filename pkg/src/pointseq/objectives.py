"""Self-supervised objectives: local/global InfoNCE and sequence reconstruction.

Local contrast compares aligned per-super-point predictions against target
embeddings, with every other position of the same sample plus the early
segments' tokens (hard negatives) as the negative set. Global contrast
compares pooled whole-sequence features against class-token embeddings
across the batch. Reconstruction average-pools the predictions, adds a
per-frame cosine positional code, and folds a fixed 2D grid twice into a
colorized point set scored by chamfer distance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

import pointseq.autodiff as ad
from pointseq.autodiff import ParamSet, Tensor
from pointseq.encoder import SegmentEmbedding
from pointseq.geometry import interpolate_features

ParamsLike = Union[ParamSet, Mapping[str, Tensor]]

HEAD_IDS = ("local", "global")


@dataclass
class ContrastBatch:
    """Projected, L2-normalized local contrast inputs."""

    z: Tensor                  # (B, n, p) targets
    q_hat: Tensor              # (B, n, p) aligned predictions
    hard: Optional[Tensor]     # (B, h, p) hard negatives, or None
    tau: float


@dataclass
class GlobalBatch:
    h: Tensor                  # (B, p) pooled sequence features
    g: Tensor                  # (B, p) class-token embeddings
    tau: float


def _leaves(params: ParamsLike) -> Mapping[str, Tensor]:
    if isinstance(params, ParamSet):
        return ad.make_leaves(params)
    return params


def head_param_shapes(c: int, p: int) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    for head in HEAD_IDS:
        shapes[f"head.{head}.w1"] = (c, c)
        shapes[f"head.{head}.b1"] = (c,)
        shapes[f"head.{head}.w2"] = (c, p)
        shapes[f"head.{head}.b2"] = (p,)
    return shapes


def decoder_param_shapes(c: int, out_dim: int) -> Dict[str, Tuple[int, ...]]:
    return {
        "dec.fold1.w1": (c + 2, c),
        "dec.fold1.b1": (c,),
        "dec.fold1.w2": (c, out_dim),
        "dec.fold1.b2": (out_dim,),
        "dec.fold2.w1": (c + out_dim, c),
        "dec.fold2.b1": (c,),
        "dec.fold2.w2": (c, out_dim),
        "dec.fold2.b2": (out_dim,),
    }


def project_head(feats: Tensor, params: ParamsLike, head_id: str) -> Tensor:
    """Two-layer projection with GELU, then L2 row normalization."""
    if head_id not in HEAD_IDS:
        raise ValueError(f"unknown head_id {head_id!r}, expected one of {HEAD_IDS}")
    leaves = _leaves(params)
    p = f"head.{head_id}"
    h = ad.gelu(ad.linear(feats, leaves[f"{p}.w1"], leaves[f"{p}.b1"]))
    out = ad.linear(h, leaves[f"{p}.w2"], leaves[f"{p}.b2"])
    return ad.l2_normalize(out)


def align_predictions(q: SegmentEmbedding, target: SegmentEmbedding,
                      t_scale: float) -> Tensor:
    """Interpolate prediction features onto the target's super-points.

    Uses inverse-distance weights over the 3 nearest prediction super-points
    in 4D, with the frame index scaled by `t_scale` (1/(T-1)) so time is
    commensurate with unit-ball coordinates.
    """
    l, r, c = target.feats.shape
    def scaled(coords):
        out = coords.reshape(-1, 4).astype(np.float64).copy()
        out[:, 3] *= t_scale
        return out
    q_l, q_r, _ = q.feats.shape
    if q_l * q_r < 3:
        raise ValueError(f"align_predictions: need at least 3 prediction super-points, got {q_l * q_r}")
    q_flat = ad.reshape(q.feats, (q_l * q_r, c))
    out = interpolate_features(scaled(target.anchor_coords), scaled(q.anchor_coords), q_flat, k=3)
    return ad.reshape(out, (l, r, c))


def _check_normalized(t: Tensor, what: str) -> None:
    # near-zero rows are tolerated: a dead feature row normalizes to zero by design
    norms = np.sqrt((t.data ** 2).sum(axis=-1))
    bad = (np.abs(norms - 1.0) > 1e-3) & (norms > 1e-3)
    if np.any(bad):
        raise ValueError(f"{what} rows must be L2-normalized")


def local_infonce(batch: ContrastBatch, cross_batch: bool = False) -> Tensor:
    """Eq.-style local InfoNCE: for each (sample, position), the aligned
    prediction at the same position is the positive; negatives are the
    sample's other positions plus its hard negatives (all samples' positions
    and hard negatives when `cross_batch`)."""
    if batch.tau <= 0:
        raise ValueError(f"temperature must be positive, got {batch.tau}")
    z, q_hat, hard = batch.z, batch.q_hat, batch.hard
    if z.shape != q_hat.shape or z.ndim != 3:
        raise ValueError(f"local_infonce: z {z.shape} and q_hat {q_hat.shape} must both be (B, n, p)")
    b, n, p = z.shape
    if hard is not None and (hard.ndim != 3 or hard.shape[0] != b or hard.shape[2] != p):
        raise ValueError(f"local_infonce: hard negatives shape {hard.shape} incompatible with {z.shape}")
    _check_normalized(z, "z")
    _check_normalized(q_hat, "q_hat")
    if hard is not None:
        _check_normalized(hard, "hard")

    if cross_batch:
        z = ad.reshape(z, (1, b * n, p))
        q_hat = ad.reshape(q_hat, (1, b * n, p))
        if hard is not None:
            hard = ad.reshape(hard, (1, b * hard.shape[1], p))
        b, n = 1, b * n

    h = hard.shape[1] if hard is not None else 0
    if n - 1 + h == 0:
        raise ValueError("local_infonce: empty negative set")

    inv_tau = ad.constant(np.asarray(1.0 / batch.tau, dtype=z.dtype))
    pos = ad.reduce_sum(ad.mul(z, q_hat), axis=-1)                     # (B, n)
    sims = ad.matmul(z, ad.transpose(q_hat, (0, 2, 1)))                # (B, n, n)
    if hard is not None:
        sims = ad.concat([sims, ad.matmul(z, ad.transpose(hard, (0, 2, 1)))], axis=2)
    lse = ad.logsumexp(ad.mul(sims, inv_tau))                          # (B, n)
    return ad.reduce_mean(ad.sub(lse, ad.mul(pos, inv_tau)))


def global_pool_sequence(segments: Sequence[SegmentEmbedding]) -> Tensor:
    """Channelwise max over every super-point feature of all segments."""
    if not segments:
        raise ValueError("global_pool_sequence: empty segment list")
    blocks = [ad.reshape(s.feats, (-1, s.feats.shape[-1])) for s in segments]
    stacked = ad.concat(blocks, axis=0) if len(blocks) > 1 else blocks[0]
    return ad.reduce_max(stacked, axis=0)


def global_infonce(batch: GlobalBatch) -> Tensor:
    """Sequence-level InfoNCE: (h_b, g_b) are positive pairs; the other
    samples' class-token embeddings are the negatives."""
    if batch.tau <= 0:
        raise ValueError(f"temperature must be positive, got {batch.tau}")
    h, g = batch.h, batch.g
    if h.ndim != 2 or h.shape != g.shape:
        raise ValueError(f"global_infonce: h {h.shape} and g {g.shape} must both be (B, p)")
    if h.shape[0] < 2:
        raise ValueError("global_infonce: need batch size >= 2 for in-batch negatives")
    _check_normalized(h, "h")
    _check_normalized(g, "g")
    inv_tau = ad.constant(np.asarray(1.0 / batch.tau, dtype=h.dtype))
    pos = ad.reduce_sum(ad.mul(h, g), axis=-1)                         # (B,)
    sims = ad.matmul(h, ad.transpose(g, (1, 0)))                       # (B, B)
    lse = ad.logsumexp(ad.mul(sims, inv_tau))
    return ad.reduce_mean(ad.sub(lse, ad.mul(pos, inv_tau)))


def cosine_position_encoding(m_frames: int, c: int) -> np.ndarray:
    """1D cosine code per frame: interleaved sin/cos phases over c channels."""
    pe = np.empty((m_frames, c))
    j = np.arange(c)
    freq = 1.0 / np.power(10000.0, 2.0 * (j // 2) / c)
    phase = np.where(j % 2 == 0, 0.0, np.pi / 2.0)
    for m in range(m_frames):
        pe[m] = np.cos(m * freq + phase)
    return pe


def folding_grid(n_prime: int) -> np.ndarray:
    """Fixed sqrt(N') x sqrt(N') grid over [-1, 1]^2, row-major."""
    side = math.isqrt(n_prime)
    if side * side != n_prime:
        raise ValueError(f"folding_grid: {n_prime} is not a perfect square")
    axis = np.linspace(-1.0, 1.0, side) if side > 1 else np.zeros(1)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def _fold(rows: Tensor, leaves, prefix: str) -> Tensor:
    h = ad.gelu(ad.linear(rows, leaves[f"{prefix}.w1"], leaves[f"{prefix}.b1"]))
    return ad.linear(h, leaves[f"{prefix}.w2"], leaves[f"{prefix}.b2"])


def reconstruct_segment(q_feats: Tensor, params: ParamsLike, m_frames: int,
                        n_prime: int, out_dim: int = 6) -> Tensor:
    """Decode predictions into an (M, N', out_dim) point set (batched when
    given (B, n, c) predictions).

    The prediction tokens are average-pooled to one global vector, tiled
    over M frames with a per-frame cosine positional code added (shared by
    every point of the frame), and a fixed 2D grid is folded twice.
    """
    leaves = _leaves(params)
    squeeze = q_feats.ndim == 2
    if squeeze:
        q_feats = ad.reshape(q_feats, (1,) + q_feats.shape)
    b, n, c = q_feats.shape
    q_g = ad.reduce_mean(q_feats, axis=1)                              # (B, c)
    pe = cosine_position_encoding(m_frames, c).astype(q_feats.dtype)
    frame_feat = ad.add(ad.reshape(q_g, (b, 1, c)), ad.constant(pe[None]))  # (B, M, c)
    rows = ad.reshape(
        ad.broadcast_to(ad.reshape(frame_feat, (b, m_frames, 1, c)),
                        (b, m_frames, n_prime, c)),
        (b * m_frames * n_prime, c))
    grid = folding_grid(n_prime).astype(q_feats.dtype)
    grid_rows = ad.constant(np.tile(grid, (b * m_frames, 1)))
    fold1 = _fold(ad.concat([grid_rows, rows], axis=1), leaves, "dec.fold1")
    fold2 = _fold(ad.concat([fold1, rows], axis=1), leaves, "dec.fold2")
    out = ad.reshape(fold2, (b, m_frames, n_prime, out_dim))
    if squeeze:
        out = ad.reshape(out, (m_frames, n_prime, out_dim))
    return out


def total_loss(l_local, l_global, d_recon, lam: float) -> Tensor:
    """Weighted sum of the three objectives; missing terms enter as zero."""
    if lam < 0:
        raise ValueError(f"reconstruction weight must be non-negative, got {lam}")
    def as_tensor(x):
        return x if isinstance(x, Tensor) else ad.constant(np.asarray(float(x)))
    ll, lg, dr = as_tensor(l_local), as_tensor(l_global), as_tensor(d_recon)
    return ad.add(ad.add(ll, lg), ad.mul(dr, ad.constant(np.asarray(lam, dtype=dr.dtype))))
