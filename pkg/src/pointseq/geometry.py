"""Non-learned geometric kernels for point cloud sequences.

All kernels are pure functions over numpy arrays; `chamfer_distance` and
`interpolate_features` additionally accept autodiff tensors and build graph
nodes so gradients can flow through feature values (never through the
discrete index selections, which are treated as constants).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

import pointseq.autodiff as ad
from pointseq.autodiff import Tensor

ArrayOrTensor = Union[np.ndarray, Tensor]


@dataclass
class NeighborIndex:
    """Per-query neighbor table: rows sorted by (distance, index) non-decreasing."""

    indices: np.ndarray      # (q, k) int64
    distances: np.ndarray    # (q, k) Euclidean distances
    valid_counts: np.ndarray  # (q,) true number of in-range neighbors, <= k


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64) if not isinstance(points, np.ndarray) else points
    if pts.ndim != 2:
        raise ValueError(f"expected (n, d) point array, got shape {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("point set must be non-empty")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    return pts


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, (n, m). Computed by explicit differences
    so transposing the arguments transposes the result bit-exactly."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def farthest_point_sample(points, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subsample of m point indices.

    The first pick is `start`; every later pick maximizes the minimum
    distance to all previous picks, ties broken by lowest index.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"farthest_point_sample: need 1 <= m <= {n}, got m={m}")
    if not 0 <= start < n:
        raise ValueError(f"farthest_point_sample: start index {start} out of range [0, {n})")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    min_sq = np.einsum("ij,ij->i", pts - pts[start], pts - pts[start])
    for i in range(1, m):
        nxt = int(np.argmax(min_sq))  # argmax takes the first max -> lowest index on ties
        chosen[i] = nxt
        d = pts - pts[nxt]
        np.minimum(min_sq, np.einsum("ij,ij->i", d, d), out=min_sq)
    return chosen


def knn(query, source, k: int) -> NeighborIndex:
    """Exact k nearest source points per query, sorted by distance then index."""
    q = _as_points(query)
    s = _as_points(source)
    if q.shape[1] != s.shape[1]:
        raise ValueError(f"knn: dimension mismatch {q.shape[1]} vs {s.shape[1]}")
    if k > s.shape[0]:
        raise ValueError(f"knn: k={k} exceeds source size {s.shape[0]}")
    sq = pairwise_sq_dists(q, s)
    order = np.argsort(sq, axis=1, kind="stable")[:, :k]
    dists = np.sqrt(np.take_along_axis(sq, order, axis=1))
    counts = np.full(q.shape[0], k, dtype=np.int64)
    return NeighborIndex(order.astype(np.int64), dists, counts)


def ball_query(centers, source, radius: float, k: int) -> NeighborIndex:
    """Up to k source points within `radius` of each center, nearest first.

    Underfull rows are padded with copies of the nearest qualifying point
    (kept in overall (distance, index) sorted order); rows with no point in
    range fall back to the single globally nearest point with valid_count 1.
    """
    c = _as_points(centers)
    s = _as_points(source)
    if c.shape[1] != s.shape[1]:
        raise ValueError(f"ball_query: dimension mismatch {c.shape[1]} vs {s.shape[1]}")
    if radius <= 0:
        raise ValueError("ball_query: radius must be positive")
    if k < 1:
        raise ValueError("ball_query: k must be >= 1")
    sq = pairwise_sq_dists(c, s)
    r2 = float(radius) ** 2
    q = c.shape[0]
    indices = np.empty((q, k), dtype=np.int64)
    dists = np.empty((q, k), dtype=np.float64)
    counts = np.empty(q, dtype=np.int64)
    order_all = np.argsort(sq, axis=1, kind="stable")
    for row in range(q):
        order = order_all[row]
        in_range = order[sq[row, order] <= r2]
        if in_range.size == 0:
            nearest = order[0]
            indices[row] = nearest
            dists[row] = np.sqrt(sq[row, nearest])
            counts[row] = 1
            continue
        take = in_range[:k]
        counts[row] = take.size
        if take.size < k:
            pad = np.full(k - take.size, take[0], dtype=np.int64)
            take = np.sort(np.concatenate([take, pad]), kind="stable")
            # sorting by index after duplication keeps (distance, index) order
            take = take[np.argsort(sq[row, take], kind="stable")]
        indices[row] = take
        dists[row] = np.sqrt(sq[row, take])
    return NeighborIndex(indices, dists, counts)


def interpolate_features(query, source, source_feats: ArrayOrTensor, k: int = 3,
                         eps: float = 1e-8) -> Tensor:
    """Inverse-distance weighted feature interpolation over k nearest sources.

    Weights w_i = (1/(d_i+eps)) / sum_j (1/(d_j+eps)) are constants in the
    backward pass; gradients flow only into `source_feats`.
    """
    feats = source_feats if isinstance(source_feats, Tensor) else ad.constant(source_feats)
    s = _as_points(source)
    if feats.shape[0] != s.shape[0]:
        raise ValueError(f"interpolate_features: {feats.shape[0]} feature rows for {s.shape[0]} sources")
    nn = knn(query, s, k)
    inv = 1.0 / (nn.distances + eps)
    w = inv / inv.sum(axis=1, keepdims=True)
    gathered = ad.gather(feats, nn.indices)                     # (q, k, c)
    w_const = ad.constant(w[:, :, None].astype(feats.dtype))
    return ad.reduce_sum(ad.mul(gathered, w_const), axis=1)


def min_sq_dists(x: Tensor, y: Tensor) -> Tensor:
    """Per-point nearest-neighbor squared distance: out[..., i] = min_j ||x_i - y_j||^2.

    Accepts (n, d)/(m, d) or batched (B, n, d)/(B, m, d) tensors. The
    distance matrix comes from the Gram expansion, but the backward pass
    touches only the selected nearest pairs, so gradients cost O(n*d)
    rather than O(n*m).
    """
    xd, yd = x.data, y.data
    if xd.ndim != yd.ndim or xd.shape[-1] != yd.shape[-1]:
        raise ValueError(f"min_sq_dists: incompatible shapes {xd.shape} and {yd.shape}")
    sq = (xd * xd).sum(-1)[..., :, None] - 2.0 * (xd @ np.swapaxes(yd, -1, -2))
    sq += (yd * yd).sum(-1)[..., None, :]
    idx = sq.argmin(axis=-1)                                      # (..., n)
    if xd.ndim == 3:
        nearest = np.take_along_axis(yd, idx[..., None], axis=1)  # (B, n, d)
    else:
        nearest = yd[idx]
    diff = xd - nearest
    # the Gram expansion is only used to pick neighbors; the returned value is
    # the exact squared distance of the chosen pair (no cancellation, so
    # identical sets give exactly zero)
    vals = (diff * diff).sum(-1)
    def backward(g):
        gx = (2.0 * g)[..., None] * diff
        gy = np.zeros_like(yd)
        if yd.ndim == 3:
            for b in range(yd.shape[0]):
                np.add.at(gy[b], idx[b], -gx[b])
        else:
            np.add.at(gy, idx, -gx)
        return gx, gy
    return Tensor(vals, (x, y), backward)


def _directed_chamfer(x: Tensor, y: Tensor) -> Tensor:
    """mean_i min_j ||x_i - y_j||^2."""
    return ad.reduce_mean(min_sq_dists(x, y))


def chamfer_distance(a: ArrayOrTensor, b: ArrayOrTensor) -> Tensor:
    """Symmetric chamfer distance: mean-of-min squared distances both ways.

    chamfer(a, b) and chamfer(b, a) execute the identical pair of directed
    terms, so the two calls agree bit-for-bit.
    """
    ta = a if isinstance(a, Tensor) else ad.constant(a)
    tb = b if isinstance(b, Tensor) else ad.constant(b)
    if ta.ndim != 2 or tb.ndim != 2:
        raise ValueError(f"chamfer_distance: expected (n, d) sets, got {ta.shape} and {tb.shape}")
    if ta.shape[1] != tb.shape[1]:
        raise ValueError(f"chamfer_distance: dimension mismatch {ta.shape[1]} vs {tb.shape[1]}")
    if ta.shape[0] < 1 or tb.shape[0] < 1:
        raise ValueError("chamfer_distance: point sets must be non-empty")
    return ad.add(_directed_chamfer(ta, tb), _directed_chamfer(tb, ta))


def frame_color(t: float) -> np.ndarray:
    """Piecewise-linear red -> green -> blue ramp on t in [0, 1]."""
    if t <= 0.5:
        return np.array([1.0 - 2.0 * t, 2.0 * t, 0.0])
    return np.array([0.0, 2.0 - 2.0 * t, 2.0 * t - 1.0])


def colorize_segment(segment) -> np.ndarray:
    """Append a per-frame RGB timestamp color to an (M, N, 3) segment -> (M, N, 6).

    Frame m gets the ramp color at t = m/(M-1); a single-frame segment is
    colored at t = 0 (pure red). Coordinates are left untouched.
    """
    seg = np.asarray(segment)
    if seg.ndim != 3 or seg.shape[2] != 3:
        raise ValueError(f"colorize_segment: expected (M, N, 3), got {seg.shape}")
    m_frames = seg.shape[0]
    if m_frames < 1:
        raise ValueError("colorize_segment: empty segment")
    out = np.empty(seg.shape[:2] + (6,), dtype=seg.dtype)
    out[:, :, :3] = seg
    for m in range(m_frames):
        t = 0.0 if m_frames == 1 else m / (m_frames - 1)
        out[m, :, 3:] = frame_color(t).astype(seg.dtype)
    return out


def normalize_sequence(frames) -> Tuple[np.ndarray, bool]:
    """Center all T*N points on their centroid and scale into the unit ball.

    One rigid transform is applied to every frame, so relative motion is
    preserved exactly. Returns (frames, degenerate); a degenerate sequence
    (all points identical) comes back as centered zeros.
    """
    arr = np.asarray(frames)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"normalize_sequence: expected (T, N, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("normalize_sequence: empty sequence")
    centroid = arr.reshape(-1, 3).mean(axis=0)
    centered = arr - centroid
    max_norm = float(np.sqrt((centered.reshape(-1, 3) ** 2).sum(axis=1).max()))
    if max_norm == 0.0:
        return centered, True
    return centered / max_norm, False
