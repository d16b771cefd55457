import numpy as np
import pytest

from occudet.fusion import (BranchParams, ConvBlockParams, DeformOffsetParams,
                            InteractionParams, bev_to_voxel_repeat,
                            deform_conv2d, global_branch, local_branch,
                            neighborhood_cross_attention, voxel_to_bev_add,
                            voxel_to_bev_stack)
from occudet.ops import conv2d
from occudet.rng import Rng


def gen(seed=0):
    return Rng(seed).stream(31).generator()


def test_stack_z1_identity():
    g = gen()
    v = g.standard_normal((3, 4, 4, 1))
    out, _ = voxel_to_bev_stack(v, np.eye(3))
    np.testing.assert_array_equal(out, v[:, :, :, 0])


def test_stack_hand_weights_oracle():
    g = gen(1)
    v = g.standard_normal((2, 2, 2, 2))
    w = g.standard_normal((2, 4))
    b = g.standard_normal(2)
    out, _ = voxel_to_bev_stack(v, w, b)
    stacked = v.transpose(0, 3, 1, 2).reshape(4, 2, 2)
    want = np.einsum("oc,cxy->oxy", w, stacked) + b[:, None, None]
    np.testing.assert_allclose(out, want, rtol=1e-12)


@pytest.mark.parametrize("z", [2, 4, 8])
def test_repeat_add_composition(z):
    g = gen(2)
    b = g.standard_normal((3, 4, 5))
    rep, _ = bev_to_voxel_repeat(b, z)
    assert rep.shape == (3, 4, 5, z)
    added, _ = voxel_to_bev_add(rep)
    np.testing.assert_array_equal(added, float(z) * b)
    zeros, _ = bev_to_voxel_repeat(np.zeros((2, 3, 3)), 4)
    assert not zeros.any()


def identity_branch_3d(c, scales=1):
    return BranchParams(
        down=[], blocks=[[ConvBlockParams(w=np.zeros((c, c, 3, 3, 3)),
                                          b=np.zeros(c))]],
        merge=[(np.eye(c), np.zeros(c))])


def test_local_branch_identity_init():
    g = gen(3)
    v = g.standard_normal((3, 4, 4, 2))
    out, _ = local_branch(v, identity_branch_3d(3))
    np.testing.assert_allclose(out, v, atol=1e-12)


def test_local_branch_two_scale_shape():
    g = gen(4)
    c = 2
    v = g.standard_normal((c, 8, 8, 4))
    p = BranchParams(
        down=[(g.standard_normal((2 * c, c, 3, 3, 3)) * 0.1, np.zeros(2 * c))],
        blocks=[[ConvBlockParams(g.standard_normal((c, c, 3, 3, 3)) * 0.1,
                                 np.zeros(c))],
                [ConvBlockParams(g.standard_normal((2 * c, 2 * c, 3, 3, 3))
                                 * 0.1, np.zeros(2 * c))]],
        merge=[(np.eye(c), np.zeros(c)),
               (g.standard_normal((c, 2 * c)) * 0.1, np.zeros(c))])
    out, _ = local_branch(v, p)
    assert out.shape == (c, 8, 8, 4)
    assert np.isfinite(out).all()


def test_local_branch_rejects_indivisible_dims():
    p = BranchParams(
        down=[(np.zeros((4, 2, 3, 3, 3)), np.zeros(4))],
        blocks=[[ConvBlockParams(np.zeros((2, 2, 3, 3, 3)), np.zeros(2))],
                [ConvBlockParams(np.zeros((4, 4, 3, 3, 3)), np.zeros(4))]],
        merge=[(np.eye(2), np.zeros(2)), (np.zeros((2, 4)), np.zeros(2))])
    with pytest.raises(ValueError):
        local_branch(np.zeros((2, 5, 4, 2)), p)


def test_global_branch_identity_init():
    g = gen(5)
    b = g.standard_normal((3, 4, 4))
    p = BranchParams(
        down=[], blocks=[[ConvBlockParams(np.zeros((3, 3, 3, 3)),
                                          np.zeros(3))]],
        merge=[(np.eye(3), np.zeros(3))])
    out, _ = global_branch(b, p)
    np.testing.assert_allclose(out, b, atol=1e-12)


def test_deformable_zero_offsets_equals_plain_conv():
    g = gen(6)
    x = g.standard_normal((2, 6, 6))
    w = g.standard_normal((3, 2, 3, 3))
    b = g.standard_normal(3)
    op = DeformOffsetParams(w=np.zeros((18, 2, 3, 3)), b=np.zeros(18))
    got, _ = deform_conv2d(x, w, b, op)
    want, _ = conv2d(x[None], w, b)
    np.testing.assert_allclose(got, want[0], atol=1e-6)


def interaction_identity(c):
    return InteractionParams(w_q=np.eye(c), w_k=np.eye(c), w_v=np.eye(c),
                             w_o=np.eye(c), b_o=np.zeros(c))


def test_attention_constant_value_field():
    # identity projections + constant kv: the attention term is exactly the
    # constant (weights sum to 1), so out - query == v everywhere
    g = gen(7)
    c = 3
    qm = g.standard_normal((c, 5, 5))
    v = np.array([0.3, -1.2, 2.0])
    kv = np.broadcast_to(v[:, None, None], (c, 5, 5)).copy()
    out, _ = neighborhood_cross_attention(qm, kv, interaction_identity(c),
                                          (3, 3))
    np.testing.assert_allclose(out - qm, np.broadcast_to(v[:, None, None],
                                                         (c, 5, 5)), atol=1e-6)


def dense_attention_oracle(qm, kv, p, ndim):
    """Full (unwindowed) cross-attention, every query over every position."""
    c = qm.shape[0]
    q = np.tensordot(p.w_q, qm, axes=(1, 0)).reshape(c, -1)
    k = np.tensordot(p.w_k, kv, axes=(1, 0)).reshape(c, -1)
    v = np.tensordot(p.w_v, kv, axes=(1, 0)).reshape(c, -1)
    logits = q.T @ k / np.sqrt(c)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    att = e / e.sum(axis=1, keepdims=True)
    mixed = (att @ v.T).T.reshape(qm.shape)
    proj = np.tensordot(p.w_o, mixed, axes=(1, 0))
    proj += p.b_o.reshape((c,) + (1,) * ndim)
    return qm + proj


@pytest.mark.parametrize("shape,window", [((3, 6, 6), (13, 13)),
                                          ((2, 4, 4, 3), (9, 9, 7))])
def test_window_covering_map_matches_dense_attention(shape, window):
    g = gen(8)
    c = shape[0]
    qm = g.standard_normal(shape)
    kv = g.standard_normal(shape)
    p = InteractionParams(w_q=g.standard_normal((c, c)) * 0.5,
                          w_k=g.standard_normal((c, c)) * 0.5,
                          w_v=g.standard_normal((c, c)) * 0.5,
                          w_o=g.standard_normal((c, c)) * 0.5,
                          b_o=g.standard_normal(c) * 0.1)
    got, _ = neighborhood_cross_attention(qm, kv, p, window)
    want = dense_attention_oracle(qm, kv, p, len(shape) - 1)
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_attention_border_weights_masked():
    # corner positions see fewer neighbors; with identity projections and a
    # constant kv field the weighted value still equals the constant, which
    # requires masked weights summing to 1
    c = 2
    qm = np.zeros((c, 3, 3))
    kv = np.full((c, 3, 3), 4.0)
    out, _ = neighborhood_cross_attention(qm, kv, interaction_identity(c),
                                          (3, 3))
    np.testing.assert_allclose(out[:, 0, 0] - qm[:, 0, 0], 4.0, atol=1e-6)


def test_attention_rejects_even_window():
    with pytest.raises(ValueError):
        neighborhood_cross_attention(np.zeros((2, 4, 4)), np.zeros((2, 4, 4)),
                                     interaction_identity(2), (2, 3))


def test_attention_convex_hull_property():
    # with identity output projection and zero bias, out - q is a convex
    # combination of value-projected window entries
    g = gen(9)
    c = 2
    qm = g.standard_normal((c, 4, 4))
    kv = g.standard_normal((c, 4, 4))
    p = InteractionParams(w_q=g.standard_normal((c, c)),
                          w_k=g.standard_normal((c, c)),
                          w_v=np.eye(c), w_o=np.eye(c), b_o=np.zeros(c))
    out, _ = neighborhood_cross_attention(qm, kv, p, (3, 3))
    att = out - qm
    assert (att.min(axis=(1, 2)) >= kv.min(axis=(1, 2)) - 1e-9).all()
    assert (att.max(axis=(1, 2)) <= kv.max(axis=(1, 2)) + 1e-9).all()
