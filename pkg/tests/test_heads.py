import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occudet.geometry import VoxelGridSpec
from occudet.heads import (Box3D, OccupancyGrid, boxes_from_json,
                           boxes_to_json, decode_boxes,
                           encode_detection_targets, det_head_forward,
                           occ_head_forward, query_point_classes, wrap_angle)
from occudet.rng import Rng


def gen(seed=0):
    return Rng(seed).stream(41).generator()


def grid():
    return VoxelGridSpec(origin=[-4.0, -4.0, 0.0], voxel_size=[0.5, 0.5, 0.5],
                         dims=(16, 16, 8))


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20))
def test_wrap_angle_range(a):
    w = float(wrap_angle(a))
    assert -np.pi < w <= np.pi
    assert abs(np.sin(w) - np.sin(a)) < 1e-9
    assert abs(np.cos(w) - np.cos(a)) < 1e-9


def test_box_validation_and_json_roundtrip():
    with pytest.raises(ValueError):
        Box3D(center=[0, 0, 0], size=[1, -1, 1], yaw=0.0)
    b = Box3D(center=[1, 2, 0.5], size=[2, 1, 1], yaw=4.0,
              velocity=[0.5, -0.5], class_id=2, score=0.7)
    assert -np.pi < b.yaw <= np.pi
    back = boxes_from_json(boxes_to_json([b]))[0]
    np.testing.assert_allclose(back.center, b.center)
    np.testing.assert_allclose(back.size, b.size)
    assert back.class_id == 2 and abs(back.yaw - b.yaw) < 1e-12


def test_occ_head_pointwise_permutation():
    g = gen(1)
    v = g.standard_normal((3, 4, 4, 2))
    w1, b1 = g.standard_normal((3, 5)), g.standard_normal(5)
    w2, b2 = g.standard_normal((5, 4)), g.standard_normal(4)
    out, _ = occ_head_forward(v, w1, b1, w2, b2)
    perm = np.random.default_rng(0).permutation(4)
    out_p, _ = occ_head_forward(v[:, perm], w1, b1, w2, b2)
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-12)


def test_occ_head_zero_weights_constant_bias():
    v = np.ones((2, 3, 3, 2))
    out, _ = occ_head_forward(v, np.zeros((2, 4)), np.zeros(4),
                              np.zeros((4, 3)), np.array([0.5, -1.0, 2.0]))
    for k, val in enumerate([0.5, -1.0, 2.0]):
        np.testing.assert_array_equal(out[k], val)


def test_det_head_sigmoid_range_and_zero_weights():
    g = gen(2)
    bev = g.standard_normal((3, 6, 6))
    (hm, reg), _ = det_head_forward(bev, g.standard_normal((2, 3, 3, 3)),
                                    g.standard_normal(2),
                                    g.standard_normal((10, 3, 3, 3)),
                                    g.standard_normal(10))
    assert ((hm > 0) & (hm < 1)).all()
    assert reg.shape == (10, 6, 6)
    (hm0, _), _ = det_head_forward(bev, np.zeros((2, 3, 3, 3)), np.zeros(2),
                                   np.zeros((10, 3, 3, 3)), np.zeros(10))
    np.testing.assert_allclose(hm0, 0.5)


def test_encode_decode_roundtrip():
    g = grid()
    boxes = [Box3D(center=[1.3, -2.2, 0.8], size=[2.0, 1.0, 1.5], yaw=0.7,
                   velocity=[1.0, -0.5], class_id=1, score=1.0),
             Box3D(center=[-3.0, 3.1, 1.2], size=[1.5, 0.8, 1.0], yaw=-2.1,
                   velocity=[0.0, 0.3], class_id=0, score=1.0)]
    hm, reg, centers, skipped = encode_detection_targets(boxes, g, 3)
    assert skipped == 0 and len(centers) == 2
    decoded = decode_boxes(hm, reg, g, score_thresh=0.5, top_k=8)
    assert len(decoded) == 2
    decoded.sort(key=lambda b: b.center[0])
    want = sorted(boxes, key=lambda b: b.center[0])
    for d, w in zip(decoded, want):
        np.testing.assert_allclose(d.center, w.center, atol=1e-5)
        np.testing.assert_allclose(d.size, w.size, atol=1e-5)
        assert abs(d.yaw - w.yaw) < 1e-5
        np.testing.assert_allclose(d.velocity, w.velocity, atol=1e-5)
        assert d.class_id == w.class_id


def test_encode_skips_offgrid_box():
    g = grid()
    boxes = [Box3D(center=[100.0, 0.0, 0.5], size=[1, 1, 1], yaw=0.0)]
    hm, reg, centers, skipped = encode_detection_targets(boxes, g, 1)
    assert skipped == 1 and not centers and not hm.any()


def test_decode_below_threshold_empty():
    g = grid()
    hm = np.full((2, 16, 16), 0.05, dtype=np.float32)
    reg = np.zeros((10, 16, 16), dtype=np.float32)
    assert decode_boxes(hm, reg, g, score_thresh=0.1, top_k=4) == []


def test_decode_tie_break_lowest_y_then_x():
    g = grid()
    hm = np.zeros((1, 16, 16), dtype=np.float32)
    reg = np.zeros((10, 16, 16), dtype=np.float32)
    reg[3:6] = np.log(1.0)
    reg[7] = 1.0  # cos yaw
    hm[0, 5, 9] = 0.8
    hm[0, 2, 9] = 0.8   # same y, lower x wins second place order check
    hm[0, 4, 3] = 0.8   # lowest y -> first
    got = decode_boxes(hm, reg, g, score_thresh=0.5, top_k=1)
    assert len(got) == 1
    idx = g.coord_to_index(got[0].center)
    assert (round(idx[0]), round(idx[1])) == (4, 3)


def test_query_point_classes_at_voxel_centers():
    g = grid()
    gen_ = gen(3)
    logits = gen_.standard_normal((4, 16, 16, 8))
    idx = np.stack(np.meshgrid(np.arange(16), np.arange(16), np.arange(8),
                               indexing="ij"), axis=-1).reshape(-1, 3)
    pts = g.index_to_coord(idx)
    cls = query_point_classes(logits, pts, g)
    want = logits.argmax(axis=0).reshape(-1)
    np.testing.assert_array_equal(cls, want)


def test_query_point_out_of_grid_sentinel():
    g = grid()
    logits = np.zeros((2, 16, 16, 8))
    cls = query_point_classes(logits, np.array([[50.0, 0, 0]]), g)
    assert cls[0] == -1


def test_query_point_midpoint_interpolation_oracle():
    g = grid()
    logits = np.zeros((2, 16, 16, 8))
    logits[0, 3, 4, 2] = 2.0          # class 0 stronger at one voxel
    logits[1, 4, 4, 2] = 1.0
    a = g.index_to_coord(np.array([3, 4, 2]))
    b = g.index_to_coord(np.array([4, 4, 2]))
    mid = (a + b) / 2 + np.array([0.001, 0, 0])   # just past the midpoint
    cls = query_point_classes(logits, mid[None], g)
    # interpolated: class0 ~ 2*(0.498), class1 ~ 1*(0.502) -> class 0
    assert cls[0] == 0


def test_occupancy_grid_validation():
    with pytest.raises(ValueError):
        OccupancyGrid(labels=np.array([[[5]]]), num_classes=3)
