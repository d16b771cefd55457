"""Parameter construction and the full forward graph.

The pipeline: encode camera renders -> explicit depth lifting in parallel
with implicit query refinement -> channel fusion -> BEV collapse -> local
voxel / global BEV pyramids -> windowed cross-representation attention ->
occupancy and detection heads.  When an augmentation sample is supplied the
lifting geometry is composed with its matrix (features live in augmented
space) and the occupancy features are resampled back onto the original
lattice with an out-of-range mask before the head.

``run_forward`` returns the outputs plus a backward closure that chains all
stage vjps in reverse and accumulates into ``Param.grad``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augmentation import AugSample, resample_features, warp_label_indices
from .config import PipelineConfig
from .fusion import (BranchParams, ConvBlockParams, DeformOffsetParams,
                     InteractionParams, bev_to_voxel_repeat, global_branch,
                     local_branch, neighborhood_cross_attention,
                     voxel_to_bev_add, voxel_to_bev_stack)
from .heads import det_head_forward, occ_head_forward
from .ops import Array, Param, conv2d, relu, softmax
from .rng import Rng, STREAM_PARAMS
from .synth import Scene, scene_input_planes
from .view_transform import (DcaParams, ImplicitBlockParams, fuse_ex_im,
                             implicit_block_stack, lift_explicit)


@dataclass
class ForwardOutputs:
    depth_probs: Array
    occ_logits: Array | None
    occ_mask: Array | None
    heatmap: Array | None
    regmap: Array | None


# ---------------------------------------------------------------------------
# parameter construction

def _normal(gen, shape, fan_in, dtype):
    return (gen.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)


def init_params(config: PipelineConfig, rng: Rng,
                dtype=np.float32) -> dict[str, Param]:
    """Build every trainable tensor for the configured graph, in a fixed
    order so (config, seed) fully determines the initialization."""
    gen = rng.stream(STREAM_PARAMS).generator()
    f = config.flags
    p: dict[str, Param] = {}

    def add(name: str, value: Array) -> None:
        p[name] = Param(name=name, value=np.ascontiguousarray(value))

    k = config.num_classes
    c_in = k + 2
    ch = config.encoder_hidden
    ci = config.image_channels
    d = config.depth_bins.count
    add("enc.w1", _normal(gen, (ch, c_in, 3, 3), c_in * 9, dtype))
    add("enc.b1", np.zeros(ch, dtype))
    add("enc.w2", _normal(gen, (ci, ch, 3, 3), ch * 9, dtype))
    add("enc.b2", np.zeros(ci, dtype))
    add("enc.wd", _normal(gen, (d, ch, 3, 3), ch * 9, dtype))
    add("enc.bd", np.zeros(d, dtype))

    X, Y, Z = config.grid.dims
    cq = config.query_channels
    if f.use_implicit:
        add("q_voxel", _normal(gen, (cq, X, Y, Z), cq, dtype))
        hk = config.dca_heads * config.dca_points
        for i in range(config.dca_blocks):
            pre = f"imp{i}"
            for ln in ("ln1", "ln2", "ln3"):
                add(f"{pre}.{ln}_g", np.ones(cq, dtype))
                add(f"{pre}.{ln}_b", np.zeros(cq, dtype))
            add(f"{pre}.dca.w_off", np.zeros((cq, hk * 2), dtype))
            add(f"{pre}.dca.b_off", np.zeros(hk * 2, dtype))
            add(f"{pre}.dca.w_att", np.zeros((cq, hk), dtype))
            add(f"{pre}.dca.b_att", np.zeros(hk, dtype))
            add(f"{pre}.dca.w_val", _normal(gen, (cq, ci), ci, dtype))
            add(f"{pre}.dca.w_out", _normal(gen, (cq, cq), cq, dtype))
            add(f"{pre}.dca.b_out", np.zeros(cq, dtype))
            add(f"{pre}.w_conv", _normal(gen, (cq, cq, 3, 3, 3), cq * 27, dtype))
            add(f"{pre}.b_conv", np.zeros(cq, dtype))
            add(f"{pre}.w_ffn1", _normal(gen, (cq, config.dca_ffn), cq, dtype))
            add(f"{pre}.b_ffn1", np.zeros(config.dca_ffn, dtype))
            add(f"{pre}.w_ffn2", _normal(gen, (config.dca_ffn, cq),
                                         config.dca_ffn, dtype))
            add(f"{pre}.b_ffn2", np.zeros(cq, dtype))

    cv = config.voxel_channels
    w_bev = np.zeros((cv, cv * Z), dtype)
    for c in range(cv):
        w_bev[c, c * Z:(c + 1) * Z] = 1.0 / Z  # start as the Z-mean
    add("bev.w", w_bev)
    add("bev.b", np.zeros(cv, dtype))

    def add_branch(prefix: str, scales: int, conv_nd: int,
                   deformable: bool) -> None:
        kvol = 3 ** conv_nd
        for s in range(scales):
            cs = cv * (2 ** s)
            if s > 0:
                prev = cv * (2 ** (s - 1))
                shape = (cs, prev) + (3,) * conv_nd
                add(f"{prefix}.down{s - 1}.w",
                    _normal(gen, shape, prev * kvol, dtype))
                add(f"{prefix}.down{s - 1}.b", np.zeros(cs, dtype))
            for j in range(config.blocks_per_scale):
                shape = (cs, cs) + (3,) * conv_nd
                add(f"{prefix}.s{s}.b{j}.w",
                    _normal(gen, shape, cs * kvol, dtype))
                add(f"{prefix}.s{s}.b{j}.b", np.zeros(cs, dtype))
                if deformable:
                    add(f"{prefix}.s{s}.b{j}.off_w",
                        np.zeros((2 * 9, cs, 3, 3), dtype))
                    add(f"{prefix}.s{s}.b{j}.off_b", np.zeros(2 * 9, dtype))
            if s == 0:
                add(f"{prefix}.merge0.w", np.eye(cv, dtype=dtype))
            else:
                add(f"{prefix}.merge{s}.w", _normal(gen, (cv, cs), cs, dtype))
            add(f"{prefix}.merge{s}.b", np.zeros(cv, dtype))

    if f.use_local_branch:
        add_branch("local", config.local_scales, 3, deformable=False)
    if f.use_global_branch:
        add_branch("global", config.global_scales, 2,
                   deformable=config.global_deformable)

    if f.use_interaction:
        for side in ("ivox", "ibev"):
            for nm in ("w_q", "w_k", "w_v", "w_o"):
                add(f"{side}.{nm}", _normal(gen, (cv, cv), cv, dtype))
            add(f"{side}.b_o", np.zeros(cv, dtype))

    if f.use_occ_head:
        hh = config.occ_hidden
        add("occ.w1", _normal(gen, (cv, hh), cv, dtype))
        add("occ.b1", np.zeros(hh, dtype))
        add("occ.w2", _normal(gen, (hh, k), hh, dtype))
        add("occ.b2", np.zeros(k, dtype))

    if f.use_det_head:
        # small head init keeps the initial heatmap near sigmoid(b_hm)
        # instead of saturating on large lifted-feature magnitudes
        kd = config.num_fg_classes
        add("det.w_hm", 0.1 * _normal(gen, (kd, cv, 3, 3), cv * 9, dtype))
        add("det.b_hm", np.full(kd, -2.0, dtype))
        add("det.w_reg", 0.1 * _normal(gen, (10, cv, 3, 3), cv * 9, dtype))
        add("det.b_reg", np.zeros(10, dtype))
    return p


def zero_grads(params: dict[str, Param]) -> None:
    for pr in params.values():
        pr.zero_grad()


# ---------------------------------------------------------------------------
# structured views over the flat parameter dict

def _build_dca(params, pre, config) -> DcaParams:
    v = lambda n: params[n].value
    return DcaParams(heads=config.dca_heads, points=config.dca_points,
                     w_off=v(f"{pre}.w_off"), b_off=v(f"{pre}.b_off"),
                     w_att=v(f"{pre}.w_att"), b_att=v(f"{pre}.b_att"),
                     w_val=v(f"{pre}.w_val"), w_out=v(f"{pre}.w_out"),
                     b_out=v(f"{pre}.b_out"))


def _build_blocks(params, config) -> list[ImplicitBlockParams]:
    v = lambda n: params[n].value
    blocks = []
    for i in range(config.dca_blocks):
        pre = f"imp{i}"
        blocks.append(ImplicitBlockParams(
            dca=_build_dca(params, f"{pre}.dca", config),
            ln1_g=v(f"{pre}.ln1_g"), ln1_b=v(f"{pre}.ln1_b"),
            ln2_g=v(f"{pre}.ln2_g"), ln2_b=v(f"{pre}.ln2_b"),
            ln3_g=v(f"{pre}.ln3_g"), ln3_b=v(f"{pre}.ln3_b"),
            w_conv=v(f"{pre}.w_conv"), b_conv=v(f"{pre}.b_conv"),
            w_ffn1=v(f"{pre}.w_ffn1"), b_ffn1=v(f"{pre}.b_ffn1"),
            w_ffn2=v(f"{pre}.w_ffn2"), b_ffn2=v(f"{pre}.b_ffn2")))
    return blocks


def _build_branch(params, prefix, scales, config,
                  deformable: bool) -> BranchParams:
    v = lambda n: params[n].value
    down = [(v(f"{prefix}.down{s}.w"), v(f"{prefix}.down{s}.b"))
            for s in range(scales - 1)]
    blocks = [[ConvBlockParams(w=v(f"{prefix}.s{s}.b{j}.w"),
                               b=v(f"{prefix}.s{s}.b{j}.b"))
               for j in range(config.blocks_per_scale)]
              for s in range(scales)]
    merge = [(v(f"{prefix}.merge{s}.w"), v(f"{prefix}.merge{s}.b"))
             for s in range(scales)]
    deform = None
    if deformable:
        deform = [[DeformOffsetParams(w=v(f"{prefix}.s{s}.b{j}.off_w"),
                                      b=v(f"{prefix}.s{s}.b{j}.off_b"))
                   for j in range(config.blocks_per_scale)]
                  for s in range(scales)]
    return BranchParams(down=down, blocks=blocks, merge=merge, deform=deform)


def _build_interaction(params, side) -> InteractionParams:
    v = lambda n: params[n].value
    return InteractionParams(w_q=v(f"{side}.w_q"), w_k=v(f"{side}.w_k"),
                             w_v=v(f"{side}.w_v"), w_o=v(f"{side}.w_o"),
                             b_o=v(f"{side}.b_o"))


# ---------------------------------------------------------------------------
# forward graph

def encode_images(scene: Scene, params: dict[str, Param]):
    """Shared two-layer conv encoder over the rendered input planes.

    Returns (f_img (N, C, H, W), depth_probs (N, D, H, W), vjp);
    vjp(d_f_img, d_depth_probs) -> dict of encoder parameter grads.
    Depth probabilities are softmax over the bin axis.
    """
    v = lambda n: params[n].value
    planes = scene_input_planes(scene).astype(v("enc.w1").dtype)
    h_pre, c1_vjp = conv2d(planes, v("enc.w1"), v("enc.b1"))
    h1, r1_vjp = relu(h_pre)
    fimg, c2_vjp = conv2d(h1, v("enc.w2"), v("enc.b2"))
    dlog, cd_vjp = conv2d(h1, v("enc.wd"), v("enc.bd"))
    dprobs, sm_vjp = softmax(dlog, axis=1)

    def vjp(d_fimg: Array, d_dprobs: Array) -> dict[str, Array]:
        (d_dlog,) = sm_vjp(d_dprobs)
        d_h1_d, dwd, dbd = cd_vjp(d_dlog)
        d_h1_f, dw2, db2 = c2_vjp(d_fimg)
        (d_hpre,) = r1_vjp(d_h1_d + d_h1_f)
        _, dw1, db1 = c1_vjp(d_hpre)
        return {"enc.w1": dw1, "enc.b1": db1, "enc.w2": dw2, "enc.b2": db2,
                "enc.wd": dwd, "enc.bd": dbd}

    return fimg, dprobs, vjp


def run_forward(scene: Scene, params: dict[str, Param],
                config: PipelineConfig, aug: AugSample | None = None):
    """Returns (ForwardOutputs, backward).

    backward(d_depth_probs=None, d_occ_logits=None, d_heatmap=None,
    d_regmap=None) accumulates gradients into every Param touched.
    """
    f = config.flags
    grid = config.grid
    cams = scene.cams
    v = lambda n: params[n].value

    fimg, dprobs, enc_vjp = encode_images(scene, params)

    w2i = i2w = None
    if aug is not None:
        w2i = grid.coord_to_index_matrix() @ aug.transform.M
        i2w = aug.transform.inverse().M @ grid.index_to_coord_matrix()

    fex, lift_vjp = lift_explicit(dprobs, fimg, grid, cams,
                                  config.depth_bins, world_to_index=w2i)

    fuse_vjp = imp_vjp = None
    if f.use_implicit:
        blocks = _build_blocks(params, config)
        fim, imp_vjp = implicit_block_stack(v("q_voxel"), fimg, cams, grid,
                                            blocks, index_to_world=i2w)
        fvox, fuse_vjp = fuse_ex_im(fex, fim)
    else:
        fvox = fex

    fbev, bev_vjp = voxel_to_bev_stack(fvox, v("bev.w"), v("bev.b"))

    loc_vjp = glob_vjp = None
    if f.use_local_branch:
        lp = _build_branch(params, "local", config.local_scales, config,
                           deformable=False)
        fvl, loc_vjp = local_branch(fvox, lp)
    else:
        fvl = fvox
    if f.use_global_branch:
        gp = _build_branch(params, "global", config.global_scales, config,
                           deformable=config.global_deformable)
        fbg, glob_vjp = global_branch(fbev, gp)
    else:
        fbg = fbev

    rep_vjp = addz_vjp = nvox_vjp = nbev_vjp = None
    if f.use_interaction:
        Z = grid.dims[2]
        fvg, rep_vjp = bev_to_voxel_repeat(fbg, Z)
        fbl, addz_vjp = voxel_to_bev_add(fvl)
        fvf, nvox_vjp = neighborhood_cross_attention(
            fvl, fvg, _build_interaction(params, "ivox"), config.voxel_window)
        fbf, nbev_vjp = neighborhood_cross_attention(
            fbg, fbl, _build_interaction(params, "ibev"), config.bev_window)
    else:
        fvf, fbf = fvl, fbg

    occ_logits = occ_mask = None
    res_vjp = occ_head_vjp = None
    if f.use_occ_head:
        occ_in = fvf
        if aug is not None:
            idx_aug = warp_label_indices(grid, aug)
            occ_in, occ_mask, res_vjp = resample_features(fvf, idx_aug,
                                                          mode="trilinear")
        occ_logits, occ_head_vjp = occ_head_forward(
            occ_in, v("occ.w1"), v("occ.b1"), v("occ.w2"), v("occ.b2"))

    heatmap = regmap = None
    det_vjp = None
    if f.use_det_head:
        (heatmap, regmap), det_vjp = det_head_forward(
            fbf, v("det.w_hm"), v("det.b_hm"), v("det.w_reg"), v("det.b_reg"))

    out = ForwardOutputs(depth_probs=dprobs, occ_logits=occ_logits,
                         occ_mask=occ_mask, heatmap=heatmap, regmap=regmap)

    # ------------------------------------------------------------------
    def backward(d_depth_probs=None, d_occ_logits=None, d_heatmap=None,
                 d_regmap=None) -> None:
        acc: dict[str, Array] = {}

        def add(name: str, g: Array) -> None:
            if name in acc:
                acc[name] = acc[name] + g
            else:
                acc[name] = g

        def add_branch_grads(prefix: str, grads: dict) -> None:
            for s, g in enumerate(grads["down"]):
                if g is not None:
                    add(f"{prefix}.down{s}.w", g["w"])
                    add(f"{prefix}.down{s}.b", g["b"])
            for s, blist in enumerate(grads["blocks"]):
                for j, g in enumerate(blist):
                    add(f"{prefix}.s{s}.b{j}.w", g["w"])
                    add(f"{prefix}.s{s}.b{j}.b", g["b"])
                    if "off_w" in g:
                        add(f"{prefix}.s{s}.b{j}.off_w", g["off_w"])
                        add(f"{prefix}.s{s}.b{j}.off_b", g["off_b"])
            for s, g in enumerate(grads["merge"]):
                add(f"{prefix}.merge{s}.w", g["w"])
                add(f"{prefix}.merge{s}.b", g["b"])

        d_fvf = np.zeros_like(fvf)
        d_fbf = np.zeros_like(fbf)

        if d_occ_logits is not None:
            d_occ_in, dw1, db1, dw2, db2 = occ_head_vjp(d_occ_logits)
            add("occ.w1", dw1)
            add("occ.b1", db1)
            add("occ.w2", dw2)
            add("occ.b2", db2)
            if res_vjp is not None:
                d_fvf += res_vjp(d_occ_in)
            else:
                d_fvf += d_occ_in

        if d_heatmap is not None or d_regmap is not None:
            d_hm = d_heatmap if d_heatmap is not None \
                else np.zeros_like(heatmap)
            d_rg = d_regmap if d_regmap is not None else np.zeros_like(regmap)
            d_fbf0, dwhm, dbhm, dwreg, dbreg = det_vjp(d_hm, d_rg)
            d_fbf += d_fbf0
            add("det.w_hm", dwhm)
            add("det.b_hm", dbhm)
            add("det.w_reg", dwreg)
            add("det.b_reg", dbreg)

        if f.use_interaction:
            d_q3, d_fvg, g3 = nvox_vjp(d_fvf)
            for kk, g in g3.items():
                add(f"ivox.{kk}", g)
            d_q2, d_fbl, g2 = nbev_vjp(d_fbf)
            for kk, g in g2.items():
                add(f"ibev.{kk}", g)
            (d_fbg_rep,) = rep_vjp(d_fvg)
            (d_fvl_add,) = addz_vjp(d_fbl)
            d_fvl = d_q3 + d_fvl_add
            d_fbg = d_q2 + d_fbg_rep
        else:
            d_fvl = d_fvf
            d_fbg = d_fbf

        if f.use_local_branch:
            d_fvox_l, lg = loc_vjp(d_fvl)
            add_branch_grads("local", lg)
        else:
            d_fvox_l = d_fvl
        if f.use_global_branch:
            d_fbev, gg = glob_vjp(d_fbg)
            add_branch_grads("global", gg)
        else:
            d_fbev = d_fbg

        d_fvox_b, dbw, dbb = bev_vjp(d_fbev)
        add("bev.w", dbw)
        add("bev.b", dbb)
        d_fvox = d_fvox_l + d_fvox_b

        d_fimg = np.zeros_like(fimg)
        if f.use_implicit:
            d_fex, d_fim = fuse_vjp(d_fvox)
            d_q0, d_fimg_imp, per_block = imp_vjp(d_fim)
            add("q_voxel", d_q0)
            d_fimg += d_fimg_imp
            for i, bg in enumerate(per_block):
                for kk, g in bg["self"].items():
                    add(f"imp{i}.{kk}", g)
                for kk, g in bg["dca"].items():
                    add(f"imp{i}.dca.{kk}", g)
        else:
            d_fex = d_fvox

        d_dprobs, d_fimg_lift = lift_vjp(d_fex)
        d_fimg += d_fimg_lift
        if d_depth_probs is not None:
            d_dprobs = d_dprobs + d_depth_probs

        for name, g in enc_vjp(d_fimg, d_dprobs).items():
            add(name, g)

        for name, g in acc.items():
            params[name].grad += g

    return out, backward
