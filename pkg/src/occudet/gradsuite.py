"""Registry of gradient checks for every differentiable operation.

Each case builds float64 micro inputs from a seeded stream, runs the op's
hand-written backward against central differences, and must stay under its
tolerance for every seed.  The CLI `gradcheck` subcommand and the acceptance
suite both run this registry.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .fusion import (BranchParams, ConvBlockParams, DeformOffsetParams,
                     InteractionParams, bev_to_voxel_repeat, deform_conv2d,
                     global_branch, local_branch,
                     neighborhood_cross_attention, voxel_to_bev_add,
                     voxel_to_bev_stack)
from .geometry import VoxelGridSpec
from .gradcheck import finite_diff_gradcheck
from .heads import OccupancyGrid, det_head_forward, occ_head_forward
from .losses import (LossWeights, cross_entropy, depth_loss, geo_scal,
                     l1_regression, lovasz_single, lovasz_softmax,
                     occupancy_loss, penalty_reduced_focal, sem_scal)
from .ops import (channel_mix, conv2d, conv3d, dense, layer_norm, relu,
                  sigmoid, softmax, upsample_nearest)
from .rng import Rng
from .sampling import bilinear_sample_2d, trilinear_sample_3d
from .synth import SceneSpec, camera_ring
from .view_transform import (DcaParams, DepthBins, ImplicitBlockParams,
                             deformable_cross_attention, fuse_ex_im,
                             implicit_block_stack, lift_explicit)


@dataclass
class GradCase:
    name: str
    build: Callable    # gen -> (fn, inputs)
    tol: float = 1e-4
    h: float = 1e-4


def _away_from(x, lo=0.15, hi=0.85):
    """Push fractional parts into [lo, hi] so +/-h probes cross no kink."""
    frac = x - np.floor(x)
    frac = lo + (hi - lo) * frac
    return np.floor(x) + frac


def _interior_points(gen, n, extents, lo=0.6, pad=1.6):
    pts = np.stack([gen.uniform(lo, e - pad, n) for e in extents], axis=1)
    return _away_from(pts)


def _micro_grid():
    return VoxelGridSpec(origin=[-2.0, -2.0, 0.0], voxel_size=[1.0, 1.0, 1.0],
                         dims=(4, 4, 2))


def _micro_cams(n=2):
    spec = SceneSpec(grid=_micro_grid(), num_cameras=n, image_size=(6, 6),
                     cam_ring_radius=6.0, cam_height=1.5, fov_deg=70.0)
    return camera_ring(spec)


def _dca_arrays(gen, c=4, c_img=4, heads=2, points=2):
    hk = heads * points
    return [
        gen.standard_normal((c, hk * 2)) * 0.1,   # w_off
        gen.standard_normal(hk * 2) * 0.1,        # b_off
        gen.standard_normal((c, hk)) * 0.3,       # w_att
        gen.standard_normal(hk) * 0.1,            # b_att
        gen.standard_normal((c, c_img)) * 0.5,    # w_val
        gen.standard_normal((c, c)) * 0.5,        # w_out
        gen.standard_normal(c) * 0.1,             # b_out
    ]


def _block_arrays(gen, c=4, ffn=6):
    return _dca_arrays(gen, c=c, c_img=c) + [
        np.ones(c) + 0.1 * gen.standard_normal(c),   # ln1_g
        0.1 * gen.standard_normal(c),                # ln1_b
        np.ones(c) + 0.1 * gen.standard_normal(c),
        0.1 * gen.standard_normal(c),
        np.ones(c) + 0.1 * gen.standard_normal(c),
        0.1 * gen.standard_normal(c),
        gen.standard_normal((c, c, 3, 3, 3)) * 0.15,  # w_conv
        0.05 * gen.standard_normal(c),
        gen.standard_normal((c, ffn)) * 0.4,          # w_ffn1
        0.05 * gen.standard_normal(ffn),
        gen.standard_normal((ffn, c)) * 0.4,          # w_ffn2
        0.05 * gen.standard_normal(c),
    ]


def _make_block(args, heads=2, points=2):
    dca = DcaParams(heads=heads, points=points, w_off=args[0], b_off=args[1],
                    w_att=args[2], b_att=args[3], w_val=args[4],
                    w_out=args[5], b_out=args[6])
    return ImplicitBlockParams(dca=dca, ln1_g=args[7], ln1_b=args[8],
                               ln2_g=args[9], ln2_b=args[10], ln3_g=args[11],
                               ln3_b=args[12], w_conv=args[13],
                               b_conv=args[14], w_ffn1=args[15],
                               b_ffn1=args[16], w_ffn2=args[17],
                               b_ffn2=args[18])


_BLOCK_NARGS = 19


def _cases() -> list[GradCase]:
    cases: list[GradCase] = []

    def case(name, build, tol=1e-4, h=1e-4):
        cases.append(GradCase(name, build, tol, h))

    case("dense", lambda gen: (
        lambda x, w, b: dense(x, w, b),
        [gen.standard_normal((4, 4)), gen.standard_normal((4, 3)),
         gen.standard_normal(3)]))

    def build_relu(gen):
        x = gen.standard_normal((5, 5))
        x = np.sign(x) * (np.abs(x) + 0.15)   # keep probes off the kink
        return (lambda a: relu(a)), [x]
    case("relu", build_relu)

    case("sigmoid", lambda gen: (lambda x: sigmoid(x),
                                 [gen.standard_normal((4, 6))]))
    case("softmax", lambda gen: (lambda x: softmax(x, axis=0),
                                 [gen.standard_normal((5, 7))]))
    case("layer_norm", lambda gen: (
        lambda x, g, b: layer_norm(x, g, b, axis=0),
        [gen.standard_normal((4, 3, 3)), np.ones(4) + 0.1 *
         gen.standard_normal(4), 0.1 * gen.standard_normal(4)]))
    case("channel_mix", lambda gen: (
        lambda x, w, b: channel_mix(x, w, b),
        [gen.standard_normal((3, 4, 4)), gen.standard_normal((5, 3)),
         gen.standard_normal(5)]))
    case("upsample_nearest", lambda gen: (
        lambda x: upsample_nearest(x, 2, (1, 2)),
        [gen.standard_normal((2, 3, 3))]))

    case("conv2d_s1", lambda gen: (
        lambda x, w, b: conv2d(x, w, b, stride=1),
        [gen.standard_normal((1, 3, 5, 5)), gen.standard_normal((2, 3, 3, 3)),
         gen.standard_normal(2)]))
    case("conv2d_s2", lambda gen: (
        lambda x, w, b: conv2d(x, w, b, stride=2),
        [gen.standard_normal((1, 2, 6, 6)), gen.standard_normal((3, 2, 3, 3)),
         gen.standard_normal(3)]))
    case("conv3d_s1", lambda gen: (
        lambda x, w, b: conv3d(x, w, b, stride=1),
        [gen.standard_normal((1, 2, 4, 4, 3)),
         gen.standard_normal((2, 2, 3, 3, 3)), gen.standard_normal(2)]))
    case("conv3d_s2", lambda gen: (
        lambda x, w, b: conv3d(x, w, b, stride=2),
        [gen.standard_normal((1, 2, 4, 4, 4)),
         gen.standard_normal((2, 2, 3, 3, 3)), gen.standard_normal(2)]))

    def build_bilinear(gen):
        feat = gen.standard_normal((3, 6, 7))
        pts = _interior_points(gen, 9, (7, 6))
        def fn(f, p):
            out, _, vjp = bilinear_sample_2d(f, p)
            return out, lambda d: vjp(d)
        return fn, [feat, pts]
    case("bilinear_sample_2d", build_bilinear)

    def build_trilinear(gen):
        vol = gen.standard_normal((2, 5, 5, 4))
        pts = _interior_points(gen, 8, (5, 5, 4))
        def fn(v, p):
            out, _, vjp = trilinear_sample_3d(v, p)
            return out, lambda d: vjp(d)
        return fn, [vol, pts]
    case("trilinear_sample_3d", build_trilinear, tol=1e-5)

    def build_dca(gen):
        c, heads, points, p_cells = 4, 2, 2, 8
        q = gen.standard_normal((c, p_cells))
        feats = gen.standard_normal((2, c, 6, 6))
        refs_uv = [_interior_points(gen, p_cells, (6, 6)) for _ in range(2)]
        refs_valid = [np.array([True] * 6 + [False, False]),
                      np.array([True, False] * 4)]
        arrays = [q, feats] + _dca_arrays(gen, c=c, c_img=c, heads=heads,
                                          points=points)
        def fn(q_, f_, *pa):
            p = DcaParams(heads=heads, points=points, w_off=pa[0],
                          b_off=pa[1], w_att=pa[2], b_att=pa[3], w_val=pa[4],
                          w_out=pa[5], b_out=pa[6])
            out, vjp = deformable_cross_attention(q_, refs_uv, refs_valid,
                                                  f_, p)
            def back(d):
                dq, df, dp = vjp(d)
                return (dq, df, dp["w_off"], dp["b_off"], dp["w_att"],
                        dp["b_att"], dp["w_val"], dp["w_out"], dp["b_out"])
            return out, back
        return fn, arrays
    case("deformable_cross_attention", build_dca, h=2e-5)

    def build_stack(gen):
        grid = _micro_grid()
        cams = _micro_cams(2)
        c = 4
        q = gen.standard_normal((c,) + grid.dims) * 0.5
        feats = gen.standard_normal((2, c, 6, 6)) * 0.5
        b0 = _block_arrays(gen, c=c)
        b1 = _block_arrays(gen, c=c)
        arrays = [q, feats] + b0 + b1
        def fn(q_, f_, *pa):
            blocks = [_make_block(pa[:_BLOCK_NARGS]),
                      _make_block(pa[_BLOCK_NARGS:])]
            out, vjp = implicit_block_stack(q_, f_, cams, grid, blocks)
            def back(d):
                dq, df, per_block = vjp(d)
                flat = [dq, df]
                for bg in per_block:
                    dd = bg["dca"]
                    ds = bg["self"]
                    flat += [dd["w_off"], dd["b_off"], dd["w_att"],
                             dd["b_att"], dd["w_val"], dd["w_out"],
                             dd["b_out"], ds["ln1_g"], ds["ln1_b"],
                             ds["ln2_g"], ds["ln2_b"], ds["ln3_g"],
                             ds["ln3_b"], ds["w_conv"], ds["b_conv"],
                             ds["w_ffn1"], ds["b_ffn1"], ds["w_ffn2"],
                             ds["b_ffn2"]]
                return tuple(flat)
            return out, back
        return fn, arrays
    case("implicit_block_stack_2", build_stack, tol=1e-3, h=2e-5)

    def build_lift(gen):
        grid = _micro_grid()
        cams = _micro_cams(2)
        bins = DepthBins(0.5, 8.0, 4)
        logits = gen.standard_normal((2, 4, 4, 4))
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        feats = gen.standard_normal((2, 3, 4, 4))
        def fn(p_, f_):
            return lift_explicit(p_, f_, grid, cams, bins)
        return fn, [probs, feats]
    case("lift_explicit", build_lift)

    case("fuse_ex_im", lambda gen: (
        lambda a, b: fuse_ex_im(a, b),
        [gen.standard_normal((2, 3, 3, 2)), gen.standard_normal((2, 3, 3, 2))]))

    case("voxel_to_bev_stack", lambda gen: (
        lambda v, w, b: voxel_to_bev_stack(v, w, b),
        [gen.standard_normal((2, 3, 3, 2)), gen.standard_normal((2, 4)),
         gen.standard_normal(2)]))
    case("bev_to_voxel_repeat", lambda gen: (
        lambda b: bev_to_voxel_repeat(b, 3),
        [gen.standard_normal((2, 3, 3))]))
    case("voxel_to_bev_add", lambda gen: (
        lambda v: voxel_to_bev_add(v),
        [gen.standard_normal((2, 3, 3, 3))]))

    def _branch_arrays3d(gen, c=2):
        return [gen.standard_normal((2 * c, c, 3, 3, 3)) * 0.2,  # down
                gen.standard_normal(2 * c) * 0.05,
                gen.standard_normal((c, c, 3, 3, 3)) * 0.2,      # blk s0
                gen.standard_normal(c) * 0.05,
                gen.standard_normal((2 * c, 2 * c, 3, 3, 3)) * 0.2,  # blk s1
                gen.standard_normal(2 * c) * 0.05,
                np.eye(c) + 0.1 * gen.standard_normal((c, c)),   # merge0
                gen.standard_normal(c) * 0.05,
                gen.standard_normal((c, 2 * c)) * 0.3,           # merge1
                gen.standard_normal(c) * 0.05]

    def build_local(gen):
        c = 2
        v = gen.standard_normal((c, 4, 4, 2))
        arrays = [v] + _branch_arrays3d(gen, c)
        def fn(v_, dw, db, b0w, b0b, b1w, b1b, m0w, m0b, m1w, m1b):
            p = BranchParams(down=[(dw, db)],
                             blocks=[[ConvBlockParams(b0w, b0b)],
                                     [ConvBlockParams(b1w, b1b)]],
                             merge=[(m0w, m0b), (m1w, m1b)])
            out, vjp = local_branch(v_, p)
            def back(d):
                dv, g = vjp(d)
                return (dv, g["down"][0]["w"], g["down"][0]["b"],
                        g["blocks"][0][0]["w"], g["blocks"][0][0]["b"],
                        g["blocks"][1][0]["w"], g["blocks"][1][0]["b"],
                        g["merge"][0]["w"], g["merge"][0]["b"],
                        g["merge"][1]["w"], g["merge"][1]["b"])
            return out, back
        return fn, arrays
    case("local_branch", build_local)

    def build_global(gen):
        c = 2
        v = gen.standard_normal((c, 4, 4))
        arrays = [v,
                  gen.standard_normal((2 * c, c, 3, 3)) * 0.2,
                  gen.standard_normal(2 * c) * 0.05,
                  gen.standard_normal((c, c, 3, 3)) * 0.2,
                  gen.standard_normal(c) * 0.05,
                  gen.standard_normal((2 * c, 2 * c, 3, 3)) * 0.2,
                  gen.standard_normal(2 * c) * 0.05,
                  np.eye(c) + 0.1 * gen.standard_normal((c, c)),
                  gen.standard_normal(c) * 0.05,
                  gen.standard_normal((c, 2 * c)) * 0.3,
                  gen.standard_normal(c) * 0.05]
        def fn(v_, dw, db, b0w, b0b, b1w, b1b, m0w, m0b, m1w, m1b):
            p = BranchParams(down=[(dw, db)],
                             blocks=[[ConvBlockParams(b0w, b0b)],
                                     [ConvBlockParams(b1w, b1b)]],
                             merge=[(m0w, m0b), (m1w, m1b)])
            out, vjp = global_branch(v_, p)
            def back(d):
                dv, g = vjp(d)
                return (dv, g["down"][0]["w"], g["down"][0]["b"],
                        g["blocks"][0][0]["w"], g["blocks"][0][0]["b"],
                        g["blocks"][1][0]["w"], g["blocks"][1][0]["b"],
                        g["merge"][0]["w"], g["merge"][0]["b"],
                        g["merge"][1]["w"], g["merge"][1]["b"])
            return out, back
        return fn, arrays
    case("global_branch", build_global)

    def build_deform_conv(gen):
        # offset biases sit mid-cell so no sampling point lands within the
        # finite-difference step of a bilinear kink or validity boundary
        x = gen.standard_normal((2, 6, 6))
        w = gen.standard_normal((2, 2, 3, 3)) * 0.3
        b = gen.standard_normal(2) * 0.05
        ow = gen.standard_normal((18, 2, 3, 3)) * 0.01
        ob = np.where(gen.uniform(size=18) < 0.5, -1.0, 1.0) \
            * gen.uniform(0.4, 0.6, 18)
        def fn(x_, w_, b_, ow_, ob_):
            out, vjp = deform_conv2d(x_, w_, b_,
                                     DeformOffsetParams(w=ow_, b=ob_))
            def back(d):
                dx, g = vjp(d)
                return dx, g["w"], g["b"], g["off_w"], g["off_b"]
            return out, back
        return fn, [x, w, b, ow, ob]
    case("deform_conv2d", build_deform_conv, h=2e-5)

    def build_nca(nd):
        def build(gen):
            shape = (3, 4, 4) if nd == 2 else (2, 4, 4, 3)
            window = (3, 3) if nd == 2 else (3, 3, 3)
            c = shape[0]
            qm = gen.standard_normal(shape)
            kv = gen.standard_normal(shape)
            arrays = [qm, kv,
                      gen.standard_normal((c, c)) * 0.5,
                      gen.standard_normal((c, c)) * 0.5,
                      gen.standard_normal((c, c)) * 0.5,
                      gen.standard_normal((c, c)) * 0.5,
                      gen.standard_normal(c) * 0.05]
            def fn(q_, k_, wq, wk, wv, wo, bo):
                p = InteractionParams(w_q=wq, w_k=wk, w_v=wv, w_o=wo, b_o=bo)
                out, vjp = neighborhood_cross_attention(q_, k_, p, window)
                def back(d):
                    dq, dkv, g = vjp(d)
                    return (dq, dkv, g["w_q"], g["w_k"], g["w_v"], g["w_o"],
                            g["b_o"])
                return out, back
            return fn, arrays
        return build
    case("neighborhood_attention_2d", build_nca(2), tol=1e-5)
    case("neighborhood_attention_3d", build_nca(3), tol=1e-5)

    case("occ_head", lambda gen: (
        lambda v, w1, b1, w2, b2: occ_head_forward(v, w1, b1, w2, b2),
        [gen.standard_normal((3, 3, 3, 2)), gen.standard_normal((3, 5)),
         0.1 + np.abs(gen.standard_normal(5)),  # biases keep relu off kinks
         gen.standard_normal((5, 4)), gen.standard_normal(4)]))

    def build_det_head(gen):
        arrays = [gen.standard_normal((2, 4, 4)),
                  gen.standard_normal((2, 2, 3, 3)) * 0.3,
                  gen.standard_normal(2) * 0.1,
                  gen.standard_normal((4, 2, 3, 3)) * 0.3,
                  gen.standard_normal(4) * 0.1]
        def fn(bev, whm, bhm, wreg, breg):
            (hm, reg), vjp = det_head_forward(bev, whm, bhm, wreg, breg)
            out = np.concatenate([hm.ravel(), reg.ravel()])
            def back(d):
                d_hm = d[:hm.size].reshape(hm.shape)
                d_reg = d[hm.size:].reshape(reg.shape)
                return vjp(d_hm, d_reg)
            return out, back
        return fn, arrays
    case("det_head", build_det_head)

    def build_fusion_pipeline(gen):
        # voxel features -> BEV stack -> local + global pyramids ->
        # repeat/add exchange -> windowed attention both ways, end to end.
        # Redraw until every relu preactivation clears the kink by a margin
        # much larger than the probe step.
        c = 2
        z = 2
        for _ in range(50):
            v = gen.standard_normal((c, 4, 4, z)) * 0.5
            bw = (np.eye(c, c * z).astype(float)
                  + 0.1 * gen.standard_normal((c, c * z)))
            bb = 0.05 * gen.standard_normal(c)
            bev_probe, _ = voxel_to_bev_stack(v, bw, bb)
            if min(np.abs(v).min(), np.abs(bev_probe).min()) > 0.02:
                break
        arrays = [v, bw, bb,
                  gen.standard_normal((c, c, 3, 3, 3)) * 0.15,  # local blk
                  0.05 * gen.standard_normal(c),
                  np.eye(c) + 0.1 * gen.standard_normal((c, c)),  # local merge
                  0.05 * gen.standard_normal(c),
                  gen.standard_normal((c, c, 3, 3)) * 0.15,     # global blk
                  0.05 * gen.standard_normal(c),
                  np.eye(c) + 0.1 * gen.standard_normal((c, c)),  # global merge
                  0.05 * gen.standard_normal(c)]
        for _ in range(2):                                      # two attentions
            arrays += [gen.standard_normal((c, c)) * 0.5 for _ in range(4)]
            arrays += [0.05 * gen.standard_normal(c)]

        def fn(v_, bw, bb, lw, lb, lmw, lmb, gw, gb, gmw, gmb, *att):
            pv = InteractionParams(w_q=att[0], w_k=att[1], w_v=att[2],
                                   w_o=att[3], b_o=att[4])
            pb = InteractionParams(w_q=att[5], w_k=att[6], w_v=att[7],
                                   w_o=att[8], b_o=att[9])
            lp = BranchParams(down=[], blocks=[[ConvBlockParams(lw, lb)]],
                              merge=[(lmw, lmb)])
            gp = BranchParams(down=[], blocks=[[ConvBlockParams(gw, gb)]],
                              merge=[(gmw, gmb)])
            bev, bev_vjp = voxel_to_bev_stack(v_, bw, bb)
            fvl, loc_vjp = local_branch(v_, lp)
            fbg, glob_vjp = global_branch(bev, gp)
            fvg, rep_vjp = bev_to_voxel_repeat(fbg, z)
            fbl, add_vjp = voxel_to_bev_add(fvl)
            fvf, nv_vjp = neighborhood_cross_attention(fvl, fvg, pv,
                                                       (3, 3, 3))
            fbf, nb_vjp = neighborhood_cross_attention(fbg, fbl, pb, (3, 3))
            out = np.concatenate([fvf.ravel(), fbf.ravel()])

            def back(d):
                d_fvf = d[:fvf.size].reshape(fvf.shape)
                d_fbf = d[fvf.size:].reshape(fbf.shape)
                d_fvl, d_fvg, g_pv = nv_vjp(d_fvf)
                d_fbg, d_fbl, g_pb = nb_vjp(d_fbf)
                (d_fvl2,) = add_vjp(d_fbl)
                (d_fbg2,) = rep_vjp(d_fvg)
                d_v1, g_l = loc_vjp(d_fvl + d_fvl2)
                d_bev, g_g = glob_vjp(d_fbg + d_fbg2)
                g_bev = bev_vjp(d_bev)
                d_v = d_v1 + g_bev[0]
                return (d_v, g_bev[1], g_bev[2],
                        g_l["blocks"][0][0]["w"], g_l["blocks"][0][0]["b"],
                        g_l["merge"][0]["w"], g_l["merge"][0]["b"],
                        g_g["blocks"][0][0]["w"], g_g["blocks"][0][0]["b"],
                        g_g["merge"][0]["w"], g_g["merge"][0]["b"],
                        g_pv["w_q"], g_pv["w_k"], g_pv["w_v"], g_pv["w_o"],
                        g_pv["b_o"],
                        g_pb["w_q"], g_pb["w_k"], g_pb["w_v"], g_pb["w_o"],
                        g_pb["b_o"])
            return out, back
        return fn, arrays
    case("fusion_pipeline", build_fusion_pipeline, tol=1e-3)

    def build_encoder(gen):
        # the shared image trunk: conv -> relu -> feature conv and a
        # parallel depth conv + softmax over bins
        x = gen.standard_normal((2, 3, 5, 6))
        arrays = [x,
                  gen.standard_normal((4, 3, 3, 3)) * 0.3,
                  0.2 + 0.1 * np.abs(gen.standard_normal(4)),
                  gen.standard_normal((2, 4, 3, 3)) * 0.3,
                  0.05 * gen.standard_normal(2),
                  gen.standard_normal((3, 4, 3, 3)) * 0.3,
                  0.05 * gen.standard_normal(3)]

        def fn(x_, w1, b1, w2, b2, wd, bd):
            h_pre, c1_vjp = conv2d(x_, w1, b1)
            h1, r_vjp = relu(h_pre)
            fimg, c2_vjp = conv2d(h1, w2, b2)
            dlog, cd_vjp = conv2d(h1, wd, bd)
            dprobs, sm_vjp = softmax(dlog, axis=1)
            out = np.concatenate([fimg.ravel(), dprobs.ravel()])

            def back(d):
                d_fimg = d[:fimg.size].reshape(fimg.shape)
                d_dp = d[fimg.size:].reshape(dprobs.shape)
                (d_dlog,) = sm_vjp(d_dp)
                d_h1a, dwd, dbd = cd_vjp(d_dlog)
                d_h1b, dw2, db2 = c2_vjp(d_fimg)
                (d_hpre,) = r_vjp(d_h1a + d_h1b)
                d_x, dw1, db1 = c1_vjp(d_hpre)
                return d_x, dw1, db1, dw2, db2, dwd, dbd
            return out, back
        return fn, arrays
    case("image_encoder", build_encoder)

    def build_resample(gen):
        from .augmentation import resample_features
        c = 2
        vol = gen.standard_normal((c, 5, 5, 4))
        idx = _interior_points(gen, 5 * 5 * 4, (5, 5, 4),
                               lo=0.6, pad=1.6).reshape(5, 5, 4, 3)
        def fn(v_):
            out, _, vjp = resample_features(v_, idx, mode="trilinear")
            return out, lambda d: (vjp(d),)
        return fn, [vol]
    case("resample_features", build_resample, tol=1e-5)

    def build_ce(gen):
        logits = gen.standard_normal((4, 12))
        labels = gen.integers(0, 4, 12)
        def fn(lg):
            v, vjp = cross_entropy(lg, labels)
            return np.array(v), lambda d: (vjp(float(d)),)
        return fn, [logits]
    case("cross_entropy", build_ce)

    def build_lovasz(gen):
        probs = gen.uniform(0.05, 0.95, 10)
        fg = gen.integers(0, 2, 10).astype(np.float64)
        def fn(p):
            v, vjp = lovasz_single(p, fg)
            return np.array(v), lambda d: (vjp(float(d)),)
        return fn, [probs]
    case("lovasz_single", build_lovasz)

    def build_lovasz_multi(gen):
        probs = gen.uniform(0.05, 0.95, (3, 10))
        labels = gen.integers(0, 3, 10)
        def fn(p):
            v, vjp = lovasz_softmax(p, labels)
            return np.array(v), lambda d: (vjp(float(d)),)
        return fn, [probs]
    case("lovasz_softmax", build_lovasz_multi)

    def build_scal(which):
        def build(gen):
            probs = gen.uniform(0.05, 0.95, (3, 12))
            labels = gen.integers(0, 3, 12)
            loss = geo_scal if which == "geo" else sem_scal
            def fn(p):
                v, vjp = loss(p, labels)
                return np.array(v), lambda d: (vjp(float(d)),)
            return fn, [probs]
        return build
    case("geo_scal", build_scal("geo"))
    case("sem_scal", build_scal("sem"))

    def build_occ_loss(gen):
        k = 3
        logits = gen.standard_normal((k, 3, 3, 2))
        labels = gen.integers(0, k, (3, 3, 2))
        mask = gen.integers(0, 2, (3, 3, 2)).astype(np.uint8)
        mask.flat[0] = 1
        occ = OccupancyGrid(labels=labels, num_classes=k)
        w = LossWeights()
        def fn(lg):
            v, _, vjp = occupancy_loss(lg, occ, w, mask=mask)
            return np.array(v), lambda d: (vjp(float(d)),)
        return fn, [logits]
    case("occupancy_loss", build_occ_loss)

    def build_focal(gen):
        hm = gen.uniform(0.05, 0.95, (2, 4, 4))
        target = np.zeros((2, 4, 4))
        target[0, 1, 1] = 1.0
        target[1, 2, 3] = 1.0
        target[0, 1, 2] = 0.5
        def fn(h):
            v, vjp = penalty_reduced_focal(h, target)
            return np.array(v), lambda d: (vjp(float(d)),)
        return fn, [hm]
    case("focal_loss", build_focal)

    def build_l1(gen):
        reg = gen.standard_normal((10, 4, 4))
        target = gen.standard_normal((10, 4, 4))
        centers = [(0, 1, 1), (1, 2, 3)]
        def fn(r):
            v, vjp = l1_regression(r, target, centers)
            return np.array(v), lambda d: (vjp(float(d)),)
        return fn, [reg]
    case("l1_regression", build_l1)

    def build_depth_loss(gen):
        bins = DepthBins(0.5, 8.0, 4)
        probs = gen.uniform(0.1, 1.0, (1, 4, 3, 3))
        gt = gen.uniform(0.6, 7.9, (1, 3, 3))
        valid = gen.integers(0, 2, (1, 3, 3)).astype(bool)
        valid[0, 0, 0] = True
        def fn(p):
            v, vjp = depth_loss(p, gt, valid, bins)
            return np.array(v), lambda d: (vjp(float(d)),)
        return fn, [probs]
    case("depth_loss", build_depth_loss)

    return cases


def case_names() -> list[str]:
    return [c.name for c in _cases()]


def run_suite(names: list[str] | None = None, seeds: int = 5,
              root_seed: int = 2024) -> dict[str, dict]:
    """Run every (or the named) gradient check over `seeds` seeds.

    Returns {name: {"max_err": float, "tol": float, "ok": bool}}.
    """
    results: dict[str, dict] = {}
    for c in _cases():
        if names and c.name not in names:
            continue
        worst = 0.0
        stream_id = zlib.crc32(c.name.encode())
        for s in range(seeds):
            rng = Rng(root_seed + s)
            gen = rng.stream(stream_id).generator()
            fn, inputs = c.build(gen)
            inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
            err = finite_diff_gradcheck(fn, inputs, rng=rng, h=c.h)
            worst = max(worst, err)
        results[c.name] = {"max_err": worst, "tol": c.tol,
                           "ok": worst < c.tol}
    return results
