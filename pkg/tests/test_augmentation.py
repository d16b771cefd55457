import numpy as np
import pytest

from occudet.augmentation import (AugSample, AugSpec, build_aug_transform,
                                  identity_aug, masked_occupancy_loss,
                                  resample_features, sample_aug,
                                  transform_boxes, warp_indices,
                                  warp_label_indices)
from occudet.geometry import Transform3D, VoxelGridSpec
from occudet.heads import Box3D, OccupancyGrid
from occudet.losses import LossWeights, occupancy_loss
from occudet.rng import Rng


def grid(dims=(8, 8, 4)):
    return VoxelGridSpec(origin=[-2.0, -2.0, 0.0], voxel_size=[0.5, 0.5, 0.5],
                         dims=dims)


def gen(seed=0):
    return Rng(seed).stream(61).generator()


def degenerate_spec():
    return AugSpec(yaw_range=0.0, scale_range=(1.0, 1.0), flip_x_prob=0.0,
                   flip_y_prob=0.0, trans_range=(0.0, 0.0, 0.0))


def test_degenerate_spec_yields_identity():
    aug = sample_aug(gen(), degenerate_spec(), grid())
    np.testing.assert_array_equal(aug.transform.M, np.eye(4))
    assert aug.is_identity


def test_flip_x_matrix_about_center():
    g = grid()
    aug = build_aug_transform(0.0, 1.0, True, False, np.zeros(3), g.center)
    # linear block is diag(-1, 1, 1); center is the fixed point
    np.testing.assert_allclose(aug.M[:3, :3], np.diag([-1.0, 1.0, 1.0]))
    np.testing.assert_allclose(aug.apply(g.center), g.center, atol=1e-12)


def test_same_seed_same_sample():
    spec = AugSpec()
    a = sample_aug(Rng(5).stream(1).generator(), spec, grid())
    b = sample_aug(Rng(5).stream(1).generator(), spec, grid())
    np.testing.assert_array_equal(a.transform.M, b.transform.M)
    assert a.to_dict() == b.to_dict()


def test_transform_boxes_identity():
    boxes = [Box3D(center=[1, 1, 1], size=[2, 1, 1], yaw=0.3,
                   velocity=[1, 2], class_id=1)]
    out = transform_boxes(boxes, identity_aug())
    np.testing.assert_allclose(out[0].center, boxes[0].center)
    assert out[0].yaw == boxes[0].yaw


def test_quarter_turn_closed_form():
    g = grid()
    aug = AugSample(build_aug_transform(np.pi / 2, 1.0, False, False,
                                        np.zeros(3), np.zeros(3)),
                    yaw=np.pi / 2, scale=1.0, flip_x=False, flip_y=False,
                    translation=np.zeros(3))
    b = Box3D(center=[1.0, 2.0, 0.5], size=[2, 1, 1], yaw=0.3)
    out = transform_boxes([b], aug)[0]
    np.testing.assert_allclose(out.center, [-2.0, 1.0, 0.5], atol=1e-12)
    assert abs(out.yaw - (0.3 + np.pi / 2)) < 1e-12


def corner_set_error(a: Box3D, b: Box3D) -> float:
    ca, cb = a.corners(), b.corners()
    err = 0.0
    for p in ca:
        err = max(err, np.min(np.linalg.norm(cb - p, axis=1)))
    return err


def test_box_corner_transform_oracle():
    g = grid()
    spec = AugSpec(yaw_range=np.deg2rad(45), scale_range=(0.8, 1.3),
                   flip_x_prob=0.5, flip_y_prob=0.5,
                   trans_range=(1.0, 1.0, 0.5))
    rng = Rng(7)
    for i in range(100):
        a = sample_aug(rng.stream(i).generator(), spec, g)
        box = Box3D(center=[0.7, -0.4, 1.1], size=[2.0, 1.2, 0.9], yaw=0.55,
                    velocity=[1.0, -0.3])
        moved = transform_boxes([box], a)[0]
        direct = Transform3D(a.transform.M).apply(box.corners())
        err = 0.0
        for p in direct:
            err = max(err, np.min(np.linalg.norm(moved.corners() - p,
                                                 axis=1)))
        assert err < 1e-6, i


def test_scale_doubles_sizes_and_corners():
    g = grid()
    aug = AugSample(build_aug_transform(0.0, 2.0, False, False, np.zeros(3),
                                        np.zeros(3)),
                    yaw=0.0, scale=2.0, flip_x=False, flip_y=False,
                    translation=np.zeros(3))
    b = Box3D(center=[1.0, 1.0, 1.0], size=[2, 1, 1], yaw=0.2)
    out = transform_boxes([b], aug)[0]
    np.testing.assert_allclose(out.center, [2.0, 2.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(out.size, [4, 2, 2], atol=1e-12)
    assert corner_set_error(out, b) > 0  # sanity: it moved
    direct = aug.transform.apply(b.corners())
    for p in direct:
        assert np.min(np.linalg.norm(out.corners() - p, axis=1)) < 1e-9


def test_warp_identity_exact():
    g = grid()
    idx = warp_label_indices(g, identity_aug())
    want = np.stack(np.meshgrid(np.arange(8), np.arange(8), np.arange(4),
                                indexing="ij"), axis=-1)
    np.testing.assert_array_equal(idx, want.astype(float))


def test_warp_translation_one_pitch():
    g = grid()
    t = build_aug_transform(0.0, 1.0, False, False,
                            np.array([g.voxel_size[0], 0.0, 0.0]), g.center)
    aug = AugSample(t, 0.0, 1.0, False, False,
                    np.array([g.voxel_size[0], 0, 0]))
    idx = warp_label_indices(g, aug)
    base = warp_label_indices(g, identity_aug())
    np.testing.assert_allclose(idx[..., 0], base[..., 0] + 1.0, atol=1e-9)
    np.testing.assert_allclose(idx[..., 1:], base[..., 1:], atol=1e-9)


def test_warp_inverse_composition():
    g = grid()
    spec = AugSpec(yaw_range=0.7, scale_range=(0.8, 1.2), flip_x_prob=0.5,
                   flip_y_prob=0.5, trans_range=(0.8, 0.8, 0.4))
    for i in range(10):
        a = sample_aug(Rng(11).stream(i).generator(), spec, g)
        inv = AugSample(a.transform.inverse(), 0, 1, False, False,
                        np.zeros(3))
        fwd = warp_label_indices(g, a)
        back = warp_indices(g, inv, fwd)
        base = warp_label_indices(g, identity_aug())
        np.testing.assert_allclose(back, base, atol=1e-9)


def test_resample_identity_bit_exact():
    g = grid()
    gn = gen(1)
    f = gn.standard_normal((3, 8, 8, 4)).astype(np.float32)
    idx = warp_label_indices(g, identity_aug())
    for mode in ("trilinear", "nearest"):
        out, mask, _ = resample_features(f, idx, mode=mode)
        np.testing.assert_array_equal(out, f)
        assert mask.all()


def test_double_flip_resample_bit_identical():
    g = grid()
    gn = gen(2)
    f = gn.standard_normal((2, 8, 8, 4)).astype(np.float32)
    flip = build_aug_transform(0.0, 1.0, True, False, np.zeros(3), g.center)
    double = AugSample(Transform3D(flip.M @ flip.M), 0, 1, False, False,
                       np.zeros(3))
    idx = warp_label_indices(g, double)
    out, mask, _ = resample_features(f, idx, mode="nearest")
    np.testing.assert_array_equal(out, f)
    assert mask.all()


def quarter_turn_aug(g):
    t = build_aug_transform(np.pi / 2, 1.0, False, False, np.zeros(3),
                            g.center)
    return AugSample(t, np.pi / 2, 1.0, False, False, np.zeros(3))


def test_quarter_turn_nearest_matches_index_permutation():
    g = grid((16, 16, 4))
    gn = gen(3)
    f = gn.standard_normal((2, 16, 16, 4)).astype(np.float32)
    aug = quarter_turn_aug(g)
    idx = warp_label_indices(g, aug)
    out, mask, _ = resample_features(f, idx, mode="nearest")
    assert mask.all()
    # +90 deg about the grid center maps cell (ix, iy) onto (N-1-iy, ix);
    # pulling features back means out[ix, iy] = f[N-1-iy, ix]
    n = 16
    want = np.empty_like(f)
    for ix in range(n):
        for iy in range(n):
            want[:, ix, iy, :] = f[:, n - 1 - iy, ix, :]
    np.testing.assert_array_equal(out, want)


def test_translation_mask_evacuates_half():
    g = grid()
    shift = 4 * g.voxel_size[0]
    t = build_aug_transform(0.0, 1.0, False, False,
                            np.array([shift, 0, 0]), g.center)
    aug = AugSample(t, 0, 1.0, False, False, np.array([shift, 0, 0]))
    gn = gen(4)
    f = gn.standard_normal((1, 8, 8, 4)).astype(np.float32)
    idx = warp_label_indices(g, aug)
    out, mask, _ = resample_features(f, idx, mode="nearest")
    assert mask[:4].all()
    assert not mask[4:].any()
    assert not out[:, 4:].any()


def test_masked_loss_matches_unmasked_when_all_ones():
    g = grid()
    gn = gen(5)
    k = 3
    logits = gn.standard_normal((k, 8, 8, 4))
    occ = OccupancyGrid(labels=gn.integers(0, k, (8, 8, 4)), num_classes=k)
    w = LossWeights()
    v1, _, _ = masked_occupancy_loss(logits, occ, w, np.ones((8, 8, 4)))
    v2, _, _ = occupancy_loss(logits, occ, w)
    assert v1 == v2
    v3, _, _ = masked_occupancy_loss(logits, occ, w, np.zeros((8, 8, 4)))
    assert v3 == 0.0


def test_aug_spec_validation():
    with pytest.raises(ValueError):
        AugSpec(scale_range=(1.2, 0.8))
    with pytest.raises(ValueError):
        AugSpec(flip_x_prob=1.5)


def test_resample_gradients_only_through_in_mask_cells():
    g = grid()
    gn = gen(6)
    f = gn.standard_normal((2, 8, 8, 4))
    shift = 3 * g.voxel_size[0]
    t = build_aug_transform(0.0, 1.0, False, False,
                            np.array([shift, 0, 0]), g.center)
    aug = AugSample(t, 0, 1.0, False, False, np.array([shift, 0, 0]))
    idx = warp_label_indices(g, aug)
    out, mask, vjp = resample_features(f, idx, mode="trilinear")
    d = np.ones_like(out)
    d_f = vjp(d)
    # cells that no valid sample point reads from receive exactly zero
    touched = np.zeros((8, 8, 4), dtype=bool)
    pts = idx.reshape(-1, 3)[mask.reshape(-1).astype(bool)]
    for p in pts:
        lo = np.floor(p).astype(int)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    q = np.clip(lo + [dx, dy, dz], 0, np.array([7, 7, 3]))
                    touched[q[0], q[1], q[2]] = True
    assert (d_f[:, ~touched] == 0.0).all()
    assert np.abs(d_f[:, touched]).sum() > 0
