"""Point spatiotemporal encoder.

Each segment is encoded independently: per frame, farthest point sampling
picks anchor points; a shared two-layer map over ball-query neighbor
displacements is max-pooled into per-anchor spatial features; a strided 1D
convolution along nearest-anchor tubes across adjacent frames aggregates
them temporally into an (l, r, c) block per segment.

The non-learned geometry (anchor selection, neighbor indices, tube
correspondences) depends only on the points, so it is computed once into a
`SegmentGeometry` and reused across training steps; the parametric part
always runs through `encode_geometries`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

import pointseq.autodiff as ad
from pointseq.autodiff import ParamSet, Tensor
from pointseq.config import EncoderConfig
from pointseq.errors import ConfigError
from pointseq.geometry import ball_query, farthest_point_sample, knn

ParamsLike = Union[ParamSet, Mapping[str, Tensor]]


@dataclass
class SegmentEmbedding:
    """Per-segment super-point features plus their 4D anchor coordinates."""

    feats: Tensor             # (l, r, c)
    anchor_coords: np.ndarray  # (l, r, 4): x, y, z, global frame index
    segment_index: int


@dataclass
class SegmentGeometry:
    """Everything non-learned that `encode_geometries` needs for one segment."""

    disp: np.ndarray        # (M, r, k, 3) neighbor displacements
    tube_idx: np.ndarray    # (l, tk, r) indices into the flattened (M*r) spatial rows
    anchor_coords: np.ndarray  # (l, r, 4)
    anchors_all: np.ndarray    # (M, r, 3) per-frame anchor coordinates
    segment_index: int


def _leaves(params: ParamsLike) -> Mapping[str, Tensor]:
    if isinstance(params, ParamSet):
        return ad.make_leaves(params)
    return params


def encoder_param_shapes(cfg: EncoderConfig) -> Dict[str, Tuple[int, ...]]:
    hidden = max(cfg.c_out // 4, 8)
    return {
        "encoder.spatial.w1": (3, hidden),
        "encoder.spatial.b1": (hidden,),
        "encoder.spatial.w2": (hidden, cfg.c_out),
        "encoder.spatial.b2": (cfg.c_out,),
        "encoder.temporal.w": (cfg.temporal_kernel, cfg.c_out, cfg.c_out),
        "encoder.temporal.b": (cfg.c_out,),
    }


def _canonical_start(points: np.ndarray) -> int:
    """Lexicographically smallest point, so anchor choice is stable under
    permutation of the input rows."""
    return int(np.lexsort((points[:, 2], points[:, 1], points[:, 0]))[0])


def segment_geometry(segment: np.ndarray, cfg: EncoderConfig, segment_index: int = 0,
                     frame_offset: Optional[int] = None,
                     fps_rng: Optional[np.random.Generator] = None) -> SegmentGeometry:
    seg = np.asarray(segment)
    if seg.ndim != 3 or seg.shape[2] != 3:
        raise ConfigError(f"segment must be (M, N, 3), got {seg.shape}")
    m_frames, n_points = seg.shape[:2]
    if n_points != cfg.n_points:
        raise ConfigError(f"segment has {n_points} points per frame, config expects {cfg.n_points}")
    if cfg.r_anchors > n_points:
        raise ConfigError(f"r_anchors={cfg.r_anchors} exceeds N={n_points}")
    if m_frames < 1:
        raise ConfigError("segment must contain at least one frame")
    if frame_offset is None:
        frame_offset = segment_index * m_frames

    r, k = cfg.r_anchors, cfg.k_neighbors
    anchors_all = np.empty((m_frames, r, 3), dtype=seg.dtype)
    disp = np.empty((m_frames, r, k, 3), dtype=seg.dtype)
    for f in range(m_frames):
        pts = seg[f]
        # canonical start keeps anchors permutation-invariant; a seeded rng
        # randomizes the start as training-time augmentation
        start = int(fps_rng.integers(n_points)) if fps_rng is not None else _canonical_start(pts)
        idx = farthest_point_sample(pts, r, start=start)
        anchors = pts[idx]
        anchors_all[f] = anchors
        nn = ball_query(anchors, pts, cfg.radius, k)
        disp[f] = pts[nn.indices] - anchors[:, None, :]

    half = cfg.temporal_kernel // 2
    l_out = -(-m_frames // cfg.temporal_stride)  # ceil
    tube_idx = np.empty((l_out, cfg.temporal_kernel, r), dtype=np.int64)
    anchor_coords = np.empty((l_out, r, 4), dtype=seg.dtype)
    for o in range(l_out):
        f = o * cfg.temporal_stride
        anchor_coords[o, :, :3] = anchors_all[f]
        anchor_coords[o, :, 3] = frame_offset + f
        for j in range(cfg.temporal_kernel):
            g = min(max(f + j - half, 0), m_frames - 1)  # replicate edge frames
            if g == f:
                match = np.arange(r, dtype=np.int64)
            else:
                match = knn(anchors_all[f], anchors_all[g], 1).indices[:, 0]
            tube_idx[o, j] = g * r + match
    return SegmentGeometry(disp=disp, tube_idx=tube_idx, anchor_coords=anchor_coords,
                           anchors_all=anchors_all, segment_index=segment_index)


def encode_geometries(geoms: Sequence[SegmentGeometry], params: ParamsLike,
                      cfg: EncoderConfig) -> Tensor:
    """Parametric encoder pass over precomputed geometry, batched across
    segments. Returns (num_segments, l, r, c)."""
    leaves = _leaves(params)
    if not geoms:
        raise ValueError("encode_geometries: empty geometry list")
    m_frames = geoms[0].disp.shape[0]
    l_out, tk, r = geoms[0].tube_idx.shape
    k = cfg.k_neighbors
    c = cfg.c_out
    n_seg = len(geoms)

    disp = np.stack([g.disp for g in geoms]).reshape(-1, 3)
    x = ad.constant(disp)
    # GELU keeps the map smooth at zero displacements (every anchor is its own
    # nearest neighbor), which a ReLU kink would put exactly on the fold
    h = ad.gelu(ad.linear(x, leaves["encoder.spatial.w1"], leaves["encoder.spatial.b1"]))
    s = ad.linear(h, leaves["encoder.spatial.w2"], leaves["encoder.spatial.b2"])
    s = ad.reduce_max(ad.reshape(s, (n_seg * m_frames * r, k, c)), axis=1)  # (n_seg*M*r, c)

    w_t = leaves["encoder.temporal.w"]
    acc = None
    rows_per_seg = m_frames * r
    offsets = (np.arange(n_seg, dtype=np.int64) * rows_per_seg)[:, None]
    for j in range(tk):
        idx = np.stack([g.tube_idx[:, j, :].reshape(-1) for g in geoms])  # (n_seg, l*r)
        rows = ad.gather(s, (idx + offsets).reshape(-1))                  # (n_seg*l*r, c)
        w_j = ad.reshape(ad.gather(w_t, np.array([j])), (c, c))
        term = ad.matmul(rows, w_j)
        acc = term if acc is None else ad.add(acc, term)
    out = ad.add(acc, leaves["encoder.temporal.b"])
    return ad.reshape(out, (n_seg, l_out, r, c))


def encode_segment(segment: np.ndarray, params: ParamsLike, cfg: EncoderConfig,
                   segment_index: int = 0, frame_offset: Optional[int] = None) -> SegmentEmbedding:
    """Encode one (M, N, 3) segment into an (l, r, c) SegmentEmbedding."""
    geom = segment_geometry(segment, cfg, segment_index, frame_offset)
    feats = encode_geometries([geom], params, cfg)
    l_out, r = geom.tube_idx.shape[0], cfg.r_anchors
    return SegmentEmbedding(feats=ad.reshape(feats, (l_out, r, cfg.c_out)),
                            anchor_coords=geom.anchor_coords,
                            segment_index=segment_index)


def encode_prefix(segments: Sequence[np.ndarray], params: ParamsLike, cfg: EncoderConfig,
                  indices: Optional[Sequence[int]] = None,
                  hard_negatives: bool = True) -> List[SegmentEmbedding]:
    """Encode the prefix segments independently, returned ordered by segment index.

    `segments` holds S-1 segment arrays; `indices` gives their segment
    indices (default 0..S-2). With hard negatives enabled the prefix must
    contain at least two segments (S >= 3).
    """
    if not segments:
        raise ValueError("encode_prefix: empty segment list")
    if indices is None:
        indices = list(range(len(segments)))
    if len(indices) != len(segments):
        raise ValueError("encode_prefix: indices length mismatch")
    if hard_negatives and len(segments) < 2:
        raise ConfigError("hard negatives need at least two prefix segments (S >= 3)")
    leaves = _leaves(params)
    embeddings = [encode_segment(seg, leaves, cfg, segment_index=idx)
                  for idx, seg in sorted(zip(indices, segments), key=lambda p: p[0])]
    return embeddings
