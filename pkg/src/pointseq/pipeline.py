"""End-to-end assembly of the self-supervised objective for a batch.

Everything non-learned about a sequence (anchors, neighbor displacements,
tube correspondences, alignment weights, colorized reconstruction targets)
is packed once into a `SequenceGeometry`; `compute_batch_losses` then runs
the parametric path batched across samples and segments, which keeps the
step dominated by a handful of large matmuls.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

import pointseq.autodiff as ad
from pointseq.autodiff import ParamSet, Tensor
from pointseq.config import RunConfig
from pointseq.encoder import (
    SegmentEmbedding,
    SegmentGeometry,
    encode_geometries,
    encoder_param_shapes,
    segment_geometry,
)
from pointseq.errors import ConfigError
from pointseq.geometry import colorize_segment, farthest_point_sample, knn
from pointseq.objectives import (
    ContrastBatch,
    GlobalBatch,
    decoder_param_shapes,
    global_infonce,
    head_param_shapes,
    local_infonce,
    project_head,
    reconstruct_segment,
)
from pointseq.transformer import transformer_param_shapes, transformer_tokens

ParamsLike = Union[ParamSet, Mapping[str, Tensor]]

ALL_COMPONENTS = ("local", "global", "recon")


@dataclass
class SequenceGeometry:
    """Precomputed non-learned geometry for one training sequence."""

    segments: List[SegmentGeometry]     # S entries, target last
    prefix_positions: np.ndarray        # (m, 4), t normalized to [0, 1]
    target_stats: np.ndarray            # (4,) mean xyz of target points, normalized t0
    align_idx: np.ndarray               # (l*r, 3) target anchor -> prediction anchors
    align_w: np.ndarray                 # (l*r, 3) inverse-distance weights
    recon_target: np.ndarray            # (M*n_prime, recon_dim)
    label: Optional[int]
    source_id: str


def recon_dim(cfg: RunConfig) -> int:
    return 6 if cfg.toggles.colorize_on else 3


def param_shapes(cfg: RunConfig) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    shapes.update(encoder_param_shapes(cfg.encoder))
    shapes.update(transformer_param_shapes(cfg.transformer))
    shapes.update(head_param_shapes(cfg.transformer.c, cfg.proj_dim))
    shapes.update(decoder_param_shapes(cfg.transformer.c, recon_dim(cfg)))
    return shapes


def init_params(cfg: RunConfig, seed: int) -> ParamSet:
    """Deterministic initialization: scaled normals for weights, zeros for
    biases, ones for LayerNorm gains."""
    rng = np.random.default_rng([seed, 0])
    params = ParamSet()
    for name, shape in sorted(param_shapes(cfg).items()):
        if name.endswith(".g"):
            value = np.ones(shape)
        elif name == "cls.token":
            value = rng.normal(size=shape) * 0.02
        elif name.startswith("head.") and name.endswith(".b2"):
            # keep dead-ReLU rows away from the exact zero vector, which cannot
            # be L2-normalized
            value = np.full(shape, 0.01)
        elif name.endswith(("b", "b1", "b2", "bq", "bv", "bo")) or name.endswith(".b"):
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else int(shape[0])
            value = rng.normal(size=shape) / np.sqrt(max(fan_in, 1))
        params.add(name, value.astype(np.float32))
    return params


def split_frames(frames: np.ndarray, s_segments: int) -> np.ndarray:
    """Split (T, N, 3) into S equal (M, N, 3) segments."""
    t, n, d = frames.shape
    if t % s_segments != 0:
        raise ConfigError(f"sequence length {t} not divisible into {s_segments} segments")
    return frames.reshape(s_segments, t // s_segments, n, d)


def build_sequence_geometry(frames: np.ndarray, cfg: RunConfig,
                            label: Optional[int] = None,
                            source_id: str = "",
                            fps_rng: Optional[np.random.Generator] = None) -> SequenceGeometry:
    frames = np.asarray(frames)
    if frames.shape[0] != cfg.T or frames.shape[1] != cfg.N:
        raise ConfigError(
            f"sequence shape {frames.shape} disagrees with config T={cfg.T}, N={cfg.N}")
    s_total = cfg.S
    m_frames = cfg.M
    segs = split_frames(frames, s_total)
    seg_geoms = [segment_geometry(segs[s], cfg.encoder, segment_index=s, fps_rng=fps_rng)
                 for s in range(s_total)]

    t_norm = 1.0 / max(cfg.T - 1, 1)
    prefix_positions = np.concatenate(
        [g.anchor_coords.reshape(-1, 4) for g in seg_geoms[:-1]], axis=0).astype(np.float32)
    prefix_positions[:, 3] *= t_norm

    target_points = segs[-1].reshape(-1, 3)
    target_stats = np.empty(4, dtype=np.float32)
    target_stats[:3] = target_points.mean(axis=0)
    target_stats[3] = (s_total - 1) * m_frames * t_norm

    # alignment of prediction anchors onto target anchors, in scaled 4D
    def scaled4(coords):
        out = coords.reshape(-1, 4).astype(np.float64).copy()
        out[:, 3] *= t_norm
        return out
    q_coords = scaled4(seg_geoms[-2].anchor_coords)
    tgt_coords = scaled4(seg_geoms[-1].anchor_coords)
    nn = knn(tgt_coords, q_coords, 3)
    inv = 1.0 / (nn.distances + 1e-8)
    align_w = (inv / inv.sum(axis=1, keepdims=True)).astype(np.float32)

    # reconstruction target: per-frame FPS downsample, optional colorization
    target_seg = segs[-1]
    if cfg.n_prime < cfg.N:
        rows = [target_seg[f][farthest_point_sample(target_seg[f], cfg.n_prime)]
                for f in range(m_frames)]
        down = np.stack(rows)
    elif cfg.n_prime == cfg.N:
        down = target_seg
    else:
        raise ConfigError(f"n_prime={cfg.n_prime} exceeds per-frame point count N={cfg.N}")
    if cfg.toggles.colorize_on:
        down = colorize_segment(down)
    recon_target = down.reshape(m_frames * cfg.n_prime, -1).astype(np.float32)

    return SequenceGeometry(segments=seg_geoms, prefix_positions=prefix_positions,
                            target_stats=target_stats, align_idx=nn.indices,
                            align_w=align_w, recon_target=recon_target,
                            label=label, source_id=source_id)


def _leaves(params: ParamsLike) -> Mapping[str, Tensor]:
    if isinstance(params, ParamSet):
        return ad.make_leaves(params)
    return params


def batched_chamfer(x: Tensor, y: Tensor) -> Tensor:
    """Mean over the batch of symmetric chamfer distances between (B, n, d)
    and (B, m, d) point sets."""
    from pointseq.geometry import min_sq_dists

    fwd = ad.reduce_mean(min_sq_dists(x, y), axis=1)             # (B,)
    bwd = ad.reduce_mean(min_sq_dists(y, x), axis=1)             # (B,)
    return ad.reduce_mean(ad.add(fwd, bwd))


def compute_batch_losses(params: ParamsLike, geoms: Sequence[SequenceGeometry],
                         cfg: RunConfig,
                         components: Sequence[str] = ALL_COMPONENTS) -> Dict[str, Tensor]:
    """Forward pass for a batch; returns enabled loss components and "total".

    Only loss components both enabled in the config toggles and present in
    `components` are evaluated, so callers can trace a single branch.
    """
    leaves = _leaves(params)
    toggles = cfg.toggles
    want = set(components)
    do_local = toggles.local_on and "local" in want
    do_global = toggles.global_on and "global" in want
    do_recon = toggles.recon_on and "recon" in want
    if not (do_local or do_global or do_recon):
        raise ConfigError("no loss component enabled")

    b = len(geoms)
    s_total = cfg.S
    enc = cfg.encoder
    n_lr = enc.l_out * enc.r_anchors
    c = enc.c_out
    m_tokens = (s_total - 1) * n_lr

    flat_geoms: List[SegmentGeometry] = [g for geom in geoms for g in geom.segments]
    feats = encode_geometries(flat_geoms, leaves, enc)            # (B*S, l, r, c)
    feats_flat = ad.reshape(feats, (b * s_total * n_lr, c))

    losses: Dict[str, Tensor] = {}
    needs_transformer = do_local or do_global or do_recon

    if needs_transformer:
        # prefix tokens with positional embeddings, class token first
        rows_per_sample = s_total * n_lr
        base = np.arange(b, dtype=np.int64)[:, None] * rows_per_sample
        prefix_idx = (base + np.arange(m_tokens, dtype=np.int64)[None, :]).reshape(-1)
        prefix_feats = ad.reshape(ad.gather(feats_flat, prefix_idx, unique=True), (b, m_tokens, c))

        positions = np.stack([g.prefix_positions for g in geoms])  # (B, m, 4)
        pos_flat = ad.constant(positions.reshape(-1, 4))
        pos_embed = ad.reshape(ad.linear(pos_flat, leaves["pos.w"], leaves["pos.b"]),
                               (b, m_tokens, c))
        tokens = ad.add(prefix_feats, pos_embed)

        stats = ad.constant(np.stack([g.target_stats for g in geoms]))  # (B, 4)
        cls = ad.add(ad.linear(stats, leaves["pos.w"], leaves["pos.b"]), leaves["cls.token"])
        tokens = ad.concat([ad.reshape(cls, (b, 1, c)), tokens], axis=1)  # (B, m+1, c)

        out = transformer_tokens(tokens, leaves, cfg.transformer)
        out_flat = ad.reshape(out, (b * (m_tokens + 1), c))

        sample_base = np.arange(b, dtype=np.int64)[:, None] * (m_tokens + 1)
        q_idx = (sample_base + 1 + (s_total - 2) * n_lr
                 + np.arange(n_lr, dtype=np.int64)[None, :]).reshape(-1)
        q_tokens = ad.reshape(ad.gather(out_flat, q_idx, unique=True), (b, n_lr, c))

    if do_local:
        z_idx = (base + (s_total - 1) * n_lr + np.arange(n_lr, dtype=np.int64)[None, :]).reshape(-1)
        z_feats = ad.reshape(ad.gather(feats_flat, z_idx, unique=True), (b, n_lr, c))

        # align predictions onto target anchors with precomputed weights
        q_flat = ad.reshape(q_tokens, (b * n_lr, c))
        align_idx = np.stack([g.align_idx for g in geoms])         # (B, l*r, 3)
        gather_idx = (np.arange(b, dtype=np.int64)[:, None, None] * n_lr + align_idx).reshape(-1)
        gathered = ad.reshape(ad.gather(q_flat, gather_idx), (b, n_lr, 3, c))
        weights = ad.constant(np.stack([g.align_w for g in geoms])[..., None])
        q_aligned = ad.reduce_sum(ad.mul(gathered, weights), axis=2)  # (B, l*r, c)

        z_proj = project_head(z_feats, leaves, "local")
        q_proj = project_head(q_aligned, leaves, "local")
        hard_proj = None
        if toggles.hard_negatives_on:
            if s_total < 3:
                raise ConfigError("hard negatives require S >= 3")
            h_count = (s_total - 2) * n_lr
            hard_idx = (sample_base + 1 + np.arange(h_count, dtype=np.int64)[None, :]).reshape(-1)
            hard_tokens = ad.reshape(ad.gather(out_flat, hard_idx, unique=True), (b, h_count, c))
            hard_proj = project_head(hard_tokens, leaves, "local")
        batch = ContrastBatch(z=z_proj, q_hat=q_proj, hard=hard_proj, tau=cfg.tau)
        losses["local"] = local_infonce(batch, cross_batch=toggles.cross_batch_local)

    if do_global:
        pooled = ad.reduce_max(ad.reshape(feats_flat, (b, s_total * n_lr, c)), axis=1)  # (B, c)
        cls_out_idx = (np.arange(b, dtype=np.int64) * (m_tokens + 1))
        cls_out = ad.gather(out_flat, cls_out_idx, unique=True)                                      # (B, c)
        h_proj = project_head(pooled, leaves, "global")
        g_proj = project_head(cls_out, leaves, "global")
        losses["global"] = global_infonce(GlobalBatch(h=h_proj, g=g_proj, tau=cfg.tau))

    if do_recon:
        out_dim = recon_dim(cfg)
        recon = reconstruct_segment(q_tokens, leaves, cfg.M, cfg.n_prime, out_dim)
        recon = ad.reshape(recon, (b, cfg.M * cfg.n_prime, out_dim))
        targets = ad.constant(np.stack([g.recon_target for g in geoms]))
        losses["recon"] = batched_chamfer(recon, targets)

    total = None
    for name, tensor in losses.items():
        term = tensor
        if name == "recon":
            term = ad.mul(term, ad.constant(np.asarray(cfg.lambda_, dtype=term.dtype)))
        total = term if total is None else ad.add(total, term)
    losses["total"] = total
    return losses


def loss_expr(geoms: Sequence[SequenceGeometry], cfg: RunConfig, component: str):
    """Graph callable evaluating one loss component (for gradient checks)."""
    if component == "total":
        return lambda leaves: compute_batch_losses(leaves, geoms, cfg)["total"]
    if component not in ALL_COMPONENTS:
        raise ValueError(f"unknown loss component {component!r}")
    return lambda leaves: compute_batch_losses(leaves, geoms, cfg, components=(component,))[component]


def encoder_pooled_features(params: ParamsLike, geoms: Sequence[SequenceGeometry],
                            cfg: RunConfig) -> np.ndarray:
    """Frozen-encoder sequence features: channelwise max over every
    super-point of all S segments. Returns (len(geoms), c)."""
    leaves = _leaves(params)
    enc = cfg.encoder
    n_lr = enc.l_out * enc.r_anchors
    flat = [g for geom in geoms for g in geom.segments]
    feats = encode_geometries(flat, leaves, enc)
    pooled = ad.reduce_max(
        ad.reshape(feats, (len(geoms), cfg.S * n_lr, enc.c_out)), axis=1)
    return pooled.data
