import numpy as np
import pytest

import pointseq.autodiff as ad
from pointseq.autodiff import ParamSet
from pointseq.config import EncoderConfig
from pointseq.encoder import (
    SegmentEmbedding,
    encode_geometries,
    encode_prefix,
    encode_segment,
    encoder_param_shapes,
    segment_geometry,
)
from pointseq.errors import ConfigError

TINY = EncoderConfig(n_points=16, r_anchors=4, radius=0.8, k_neighbors=5,
                     temporal_kernel=3, temporal_stride=2, c_out=8, l_out=2)


def tiny_params(cfg=TINY, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    for name, shape in encoder_param_shapes(cfg).items():
        ps.add(name, (rng.normal(size=shape) * scale).astype(np.float64))
    return ps


def tiny_segment(seed=1, m=4, n=16, motion=0.05):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(n, 3)) * 0.4
    return np.stack([base + f * motion * np.array([1.0, 0.2, -0.1]) for f in range(m)])


def test_output_shape():
    emb = encode_segment(tiny_segment(), tiny_params(), TINY)
    assert emb.feats.shape == (2, 4, 8)  # l_out = ceil(4/2)
    assert emb.anchor_coords.shape == (2, 4, 4)


def test_static_frames_give_equal_output_frames():
    seg = np.broadcast_to(tiny_segment()[0], (4, 16, 3)).copy()
    emb = encode_segment(seg, tiny_params(), TINY)
    np.testing.assert_allclose(emb.feats.data[0], emb.feats.data[1], atol=1e-12)


def test_zeroed_spatial_weights_leave_bias_pattern():
    ps = tiny_params()
    shapes = encoder_param_shapes(TINY)
    ps.set_value("encoder.spatial.w1", np.zeros(shapes["encoder.spatial.w1"]))
    ps.set_value("encoder.spatial.w2", np.zeros(shapes["encoder.spatial.w2"]))
    ps.set_value("encoder.spatial.b1", np.zeros(shapes["encoder.spatial.b1"]))
    emb = encode_segment(tiny_segment(), ps, TINY)
    # spatial features collapse to b2, so every super-point carries the same vector
    b2 = ps.value("encoder.spatial.b2")
    wt = ps.value("encoder.temporal.w")
    bt = ps.value("encoder.temporal.b")
    expected = sum(b2 @ wt[j] for j in range(3)) + bt
    np.testing.assert_allclose(emb.feats.data, np.broadcast_to(expected, (2, 4, 8)), atol=1e-12)


def test_translation_invariance_of_feats_and_anchor_shift():
    seg = tiny_segment(seed=3)
    ps = tiny_params()
    base = encode_segment(seg, ps, TINY)
    offset = np.array([5.0, -2.0, 1.5])
    moved = encode_segment(seg + offset, ps, TINY)
    np.testing.assert_allclose(moved.feats.data, base.feats.data, atol=1e-9)
    np.testing.assert_array_equal(moved.anchor_coords[..., :3], base.anchor_coords[..., :3] + offset)
    np.testing.assert_array_equal(moved.anchor_coords[..., 3], base.anchor_coords[..., 3])


def test_permutation_invariance_within_frames():
    seg = tiny_segment(seed=4)
    rng = np.random.default_rng(5)
    permuted = np.stack([frame[rng.permutation(frame.shape[0])] for frame in seg])
    ps = tiny_params()
    a = encode_segment(seg, ps, TINY)
    b = encode_segment(permuted, ps, TINY)
    np.testing.assert_allclose(a.feats.data, b.feats.data, atol=1e-12)
    np.testing.assert_allclose(a.anchor_coords, b.anchor_coords, atol=1e-12)


def test_anchor_coords_are_segment_points_with_in_range_t():
    seg = tiny_segment(seed=6)
    emb = encode_segment(seg, tiny_params(), TINY, segment_index=2)
    m = seg.shape[0]
    for o in range(emb.anchor_coords.shape[0]):
        f = int(emb.anchor_coords[o, 0, 3]) - 2 * m
        assert 0 <= f < m
        frame_pts = {tuple(p) for p in seg[f]}
        for a in emb.anchor_coords[o, :, :3]:
            assert tuple(a) in frame_pts


def test_encoder_gradients_match_fd():
    seg = tiny_segment(seed=7)
    ps = tiny_params(scale=0.3)
    def expr(leaves):
        emb = encode_segment(seg, leaves, TINY)
        return ad.reduce_sum(ad.square(emb.feats))
    report = ad.finite_difference_check(expr, ps)
    assert report.max_rel_error < 1e-4, report


def test_batched_encode_matches_single():
    segs = [tiny_segment(seed=s) for s in (8, 9, 10)]
    ps = tiny_params()
    geoms = [segment_geometry(s, TINY, i) for i, s in enumerate(segs)]
    batched = encode_geometries(geoms, ps, TINY)
    for i, s in enumerate(segs):
        single = encode_segment(s, ps, TINY, segment_index=i)
        np.testing.assert_allclose(batched.data[i], single.feats.data, atol=1e-10)


def test_encode_prefix_ordering_and_count():
    segs = [tiny_segment(seed=s) for s in (11, 12)]
    ps = tiny_params()
    embs = encode_prefix(segs, ps, TINY)
    assert [e.segment_index for e in embs] == [0, 1]
    total_tokens = sum(e.feats.shape[0] * e.feats.shape[1] for e in embs)
    assert total_tokens == len(segs) * TINY.l_out * TINY.r_anchors

    shuffled = encode_prefix([segs[1], segs[0]], ps, TINY, indices=[1, 0])
    for a, b in zip(embs, shuffled):
        assert a.segment_index == b.segment_index
        np.testing.assert_array_equal(a.feats.data, b.feats.data)


def test_encode_prefix_identical_segments():
    seg = tiny_segment(seed=13)
    embs = encode_prefix([seg, seg.copy(), seg.copy()], tiny_params(), TINY)
    for e in embs[1:]:
        np.testing.assert_array_equal(e.feats.data, embs[0].feats.data)


def test_encode_prefix_rejects_single_segment_with_hard_negatives():
    with pytest.raises(ConfigError):
        encode_prefix([tiny_segment()], tiny_params(), TINY, hard_negatives=True)
    embs = encode_prefix([tiny_segment()], tiny_params(), TINY, hard_negatives=False)
    assert len(embs) == 1


def test_shape_mismatch_rejected():
    with pytest.raises(ConfigError):
        encode_segment(np.zeros((4, 8, 3)), tiny_params(), TINY)  # wrong N
