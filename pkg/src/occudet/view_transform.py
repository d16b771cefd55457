"""Camera-to-voxel view transform.

Two complementary paths produce voxel features from multi-camera image
features: an explicit path that scatters pixel features along their rays
weighted by a predicted depth distribution (voxel pooling), and an implicit
path where learnable per-voxel queries pull image features at their projected
reference points through deformable cross-attention blocks.  The two results
are concatenated channel-wise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraModel, VoxelGridSpec, apply_homogeneous, project_points
from .ops import Array, channel_mix, conv3d, dense, ensure_finite, layer_norm, relu
from .sampling import bilinear_sample_2d

NEG_INF = -1e30


@dataclass(frozen=True)
class DepthBins:
    """Uniform depth discretization over [d_min, d_max], evaluated at bin centers."""

    d_min: float
    d_max: float
    count: int

    def centers(self) -> Array:
        step = (self.d_max - self.d_min) / self.count
        return self.d_min + (np.arange(self.count) + 0.5) * step

    def bin_of(self, depth: Array) -> Array:
        """Containing bin index; values outside [d_min, d_max] map out of range."""
        step = (self.d_max - self.d_min) / self.count
        return np.floor((np.asarray(depth) - self.d_min) / step).astype(np.int64)


def _pixel_rays(cam: CameraModel, width: int, height: int) -> Array:
    """(H, W, 3) camera-frame ray directions scaled so z == 1."""
    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v, indexing="xy")
    x = (uu - cam.K[0, 2]) / cam.K[0, 0]
    y = (vv - cam.K[1, 2]) / cam.K[1, 1]
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def lift_explicit(depth_probs: Array, feats: Array, grid: VoxelGridSpec,
                  cams: list[CameraModel], bins: DepthBins,
                  world_to_index: Array | None = None):
    """Scatter-add pixel features into the voxel grid along depth bins.

    depth_probs: (N, D, H, W) softmax over D; feats: (N, C, H, W).
    Each (camera, pixel, bin) contributes probs * feats into the voxel
    containing its back-projected point; out-of-grid mass is dropped.
    Contributions accumulate in float64 in fixed (camera, v, u, d) order,
    then cast back, so the result is reproducible and camera-order robust.

    Returns (vol (C, X, Y, Z), vjp); vjp(d_vol) -> (d_depth_probs, d_feats).
    """
    N, D, H, W = depth_probs.shape
    if feats.shape[0] != N or feats.shape[2:] != (H, W):
        raise ValueError(f"feats {feats.shape} inconsistent with depth "
                         f"probs {depth_probs.shape}")
    if len(cams) != N:
        raise ValueError(f"{len(cams)} cameras for {N} feature maps")
    if D != bins.count:
        raise ValueError("depth bin count mismatch")
    A = (grid.coord_to_index_matrix() if world_to_index is None
         else np.asarray(world_to_index, dtype=np.float64))
    X, Y, Z = grid.dims
    centers = bins.centers()

    lin_idx: list[Array] = []
    in_grid: list[Array] = []
    for cam in cams:
        rays = _pixel_rays(cam, W, H)                       # (H, W, 3)
        pc = rays[:, :, None, :] * centers[None, None, :, None]
        R = cam.T_wc[:3, :3]
        t = cam.T_wc[:3, 3]
        world = (pc - t) @ R                                # (H, W, D, 3)
        cont = apply_homogeneous(A, world)
        vox = np.floor(cont + 0.5).astype(np.int64)         # containing cell
        ok = np.all((vox >= 0) & (vox < np.array(grid.dims)), axis=-1)
        vox_safe = np.where(ok[..., None], vox, 0)
        lin = (vox_safe[..., 0] * Y + vox_safe[..., 1]) * Z + vox_safe[..., 2]
        lin_idx.append(lin.reshape(-1))                     # (v, u, d) order
        in_grid.append(ok.reshape(-1))

    C = feats.shape[1]
    probs64 = depth_probs.astype(np.float64)
    feats64 = feats.astype(np.float64)
    all_idx = np.concatenate(lin_idx)
    all_ok = np.concatenate(in_grid)
    masses = np.concatenate([
        probs64[n].transpose(1, 2, 0).reshape(-1) for n in range(N)])
    pix_feats = np.concatenate([
        np.broadcast_to(feats64[n].transpose(1, 2, 0)[:, :, None, :],
                        (H, W, D, C)).reshape(-1, C) for n in range(N)])
    contrib = (masses * all_ok)[:, None] * pix_feats
    acc = np.empty((X * Y * Z, C), dtype=np.float64)
    for c in range(C):
        acc[:, c] = np.bincount(all_idx, weights=contrib[:, c],
                                minlength=X * Y * Z)
    vol = acc.T.reshape(C, X, Y, Z).astype(feats.dtype)
    ensure_finite("lift_explicit", vol)

    def vjp(d_vol: Array):
        d_flat = d_vol.astype(np.float64).reshape(C, -1).T   # (XYZ, C)
        g = d_flat[all_idx] * all_ok[:, None]                # (N*HWD, C)
        dp = (g * pix_feats).sum(axis=1).reshape(N, H, W, D)
        d_probs = dp.transpose(0, 3, 1, 2)
        df = (g * (masses * all_ok)[:, None]).reshape(N, H, W, D, C) \
            .sum(axis=3)
        d_feats = df.transpose(0, 3, 1, 2)
        return (d_probs.astype(depth_probs.dtype),
                d_feats.astype(feats.dtype))

    return vol, vjp


def make_reference_points(grid: VoxelGridSpec, cams: list[CameraModel],
                          index_to_world: Array | None = None):
    """Project all cell centers into every camera.

    Returns (uv list of (P, 2), valid list of (P,)) with P = X*Y*Z cells in
    row-major (x, y, z) order.
    """
    X, Y, Z = grid.dims
    ix, iy, iz = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z),
                             indexing="ij")
    idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3).astype(np.float64)
    A = (grid.index_to_coord_matrix() if index_to_world is None
         else np.asarray(index_to_world, dtype=np.float64))
    world = apply_homogeneous(A, idx)
    uvs, valids = [], []
    for cam in cams:
        uv, _, vis = project_points(world, cam)
        uvs.append(uv)
        valids.append(vis)
    return uvs, valids


@dataclass
class DcaParams:
    """Deformable cross-attention weights: per-head offsets, attention logits,
    value/output projections.  Offsets are in pixels and start at zero."""

    heads: int
    points: int
    w_off: Array   # (C, heads*points*2)
    b_off: Array
    w_att: Array   # (C, heads*points)
    b_att: Array
    w_val: Array   # (C, C_img)
    w_out: Array   # (C, C)
    b_out: Array

    FIELDS = ("w_off", "b_off", "w_att", "b_att", "w_val", "w_out", "b_out")


def deformable_cross_attention(q: Array, refs_uv: list[Array],
                               refs_valid: list[Array], feats: Array,
                               p: DcaParams):
    """Attend from each voxel query to sampled image locations.

    q: (C, P) queries; refs_uv/refs_valid: per-camera projected reference
    points; feats: (N, C_img, H, W).  Per head, K pixel offsets and K weight
    logits are predicted from the query; features are bilinearly sampled at
    ref+offset in every camera that sees the cell, and the weights are
    softmax-normalized jointly over all (visible camera, point) pairs.
    Cells seen by no camera pass their query through unchanged.

    Returns (out (C, P), vjp); vjp(d_out) -> (d_q, d_feats, d_params dict).
    """
    C, P = q.shape
    N = feats.shape[0]
    Hh, K = p.heads, p.points
    if C % Hh != 0:
        raise ValueError("channels must divide evenly into heads")
    dh = C // Hh

    qT = q.T                                              # (P, C)
    off_flat, off_vjp = dense(qT, p.w_off, p.b_off)       # (P, H*K*2)
    offsets = off_flat.reshape(P, Hh, K, 2)
    att_flat, att_vjp = dense(qT, p.w_att, p.b_att)       # (P, H*K)

    vis = np.stack(refs_valid, axis=0)                    # (N, P)
    vis_any = vis.any(axis=0)

    # only cells a camera actually sees are sampled in it; the rest carry
    # exactly zero attention weight, so skipping them changes nothing
    vals, val_vjps, sampled, samp_vjps, sels = [], [], [], [], []
    for n in range(N):
        v, vv = channel_mix(feats[n], p.w_val)
        vals.append(v)
        val_vjps.append(vv)
        sel = np.nonzero(vis[n])[0]
        sels.append(sel)
        s_dense = np.zeros((C, P, Hh, K), dtype=q.dtype)
        if sel.size:
            pts = (refs_uv[n][sel].astype(q.dtype)[:, None, None, :]
                   + offsets[sel]).reshape(sel.size * Hh * K, 2)
            s, _, sv = bilinear_sample_2d(v, pts)
            s_dense[:, sel] = s.reshape(C, sel.size, Hh, K)
        else:
            sv = None
        sampled.append(s_dense)
        samp_vjps.append(sv)

    logits = np.broadcast_to(att_flat.reshape(1, P, Hh, K),
                             (N, P, Hh, K)).copy()
    logits[~vis] = NEG_INF
    logits[:, ~vis_any] = 0.0                             # dummy rows, output overridden
    lt = logits.transpose(1, 2, 0, 3).reshape(P, Hh, N * K)
    m = lt.max(axis=-1, keepdims=True)
    e = np.exp(lt - m)
    wsum = e.sum(axis=-1, keepdims=True)
    attw = e / wsum                                       # (P, Hh, N*K)
    attw4 = attw.reshape(P, Hh, N, K)

    weighted = np.zeros((C, P), dtype=q.dtype)
    for n in range(N):
        for h in range(Hh):
            ch = slice(h * dh, (h + 1) * dh)
            weighted[ch] += np.einsum("cpk,pk->cp", sampled[n][ch, :, h, :],
                                      attw4[:, h, n, :])
    out_vis, out_vjp = dense(weighted.T, p.w_out, p.b_out)  # (P, C)
    out = np.where(vis_any[None, :], out_vis.T, q)
    ensure_finite("deformable_cross_attention", out)

    def vjp(d_out: Array):
        d_q = np.where(vis_any[None, :], 0.0, d_out)
        d_proj = np.where(vis_any[:, None], d_out.T, 0.0)
        d_weighted_T, d_w_out, d_b_out = out_vjp(d_proj)
        d_weighted = d_weighted_T.T                       # (C, P)

        d_attw4 = np.zeros_like(attw4)
        d_sampled = [np.zeros_like(s) for s in sampled]
        for n in range(N):
            for h in range(Hh):
                ch = slice(h * dh, (h + 1) * dh)
                d_attw4[:, h, n, :] = np.einsum(
                    "cp,cpk->pk", d_weighted[ch], sampled[n][ch, :, h, :])
                d_sampled[n][ch, :, h, :] = np.einsum(
                    "cp,pk->cpk", d_weighted[ch], attw4[:, h, n, :])

        d_attw = d_attw4.reshape(P, Hh, N * K)
        dot = (d_attw * attw).sum(axis=-1, keepdims=True)
        d_lt = attw * (d_attw - dot)
        d_logits = d_lt.reshape(P, Hh, N, K).transpose(2, 0, 1, 3)
        d_att_flat = (d_logits * vis[:, :, None, None]).sum(axis=0)
        d_qT_a, d_w_att, d_b_att = att_vjp(d_att_flat.reshape(P, Hh * K))

        d_feats = np.zeros_like(feats)
        d_w_val = np.zeros_like(p.w_val)
        d_off = np.zeros_like(offsets)
        for n in range(N):
            sel = sels[n]
            if sel.size == 0:
                continue
            d_s = d_sampled[n][:, sel].reshape(C, sel.size * Hh * K)
            d_val, d_pts = samp_vjps[n](d_s)
            d_off[sel] += d_pts.reshape(sel.size, Hh, K, 2)
            d_f, d_wv = val_vjps[n](d_val)
            d_feats[n] = d_f
            d_w_val += d_wv
        d_qT_o, d_w_off, d_b_off = off_vjp(d_off.reshape(P, Hh * K * 2))

        d_q = d_q + (d_qT_a + d_qT_o).T
        d_params = {"w_off": d_w_off, "b_off": d_b_off, "w_att": d_w_att,
                    "b_att": d_b_att, "w_val": d_w_val, "w_out": d_w_out,
                    "b_out": d_b_out}
        return d_q, d_feats, d_params

    return out, vjp


@dataclass
class ImplicitBlockParams:
    """One query-refinement block: pre-norm DCA, 3-D conv, FFN, one residual."""

    dca: DcaParams
    ln1_g: Array
    ln1_b: Array
    ln2_g: Array
    ln2_b: Array
    ln3_g: Array
    ln3_b: Array
    w_conv: Array  # (C, C, 3, 3, 3)
    b_conv: Array
    w_ffn1: Array  # (C, F)
    b_ffn1: Array
    w_ffn2: Array  # (F, C)
    b_ffn2: Array

    FIELDS = ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "ln3_g", "ln3_b",
              "w_conv", "b_conv", "w_ffn1", "b_ffn1", "w_ffn2", "b_ffn2")


def implicit_block(q_vol: Array, refs_uv, refs_valid, feats: Array,
                   bp: ImplicitBlockParams):
    """q + FFN(Conv3d(DCA(q))) with layer norm ahead of each sub-layer."""
    C, X, Y, Z = q_vol.shape
    P = X * Y * Z

    h1, ln1_vjp = layer_norm(q_vol, bp.ln1_g, bp.ln1_b, axis=0)
    a, dca_vjp = deformable_cross_attention(h1.reshape(C, P), refs_uv,
                                            refs_valid, feats, bp.dca)
    a_vol = a.reshape(C, X, Y, Z)

    h2, ln2_vjp = layer_norm(a_vol, bp.ln2_g, bp.ln2_b, axis=0)
    cv, conv_vjp = conv3d(h2[None], bp.w_conv, bp.b_conv)
    cv = cv[0]

    h3, ln3_vjp = layer_norm(cv, bp.ln3_g, bp.ln3_b, axis=0)
    f1, ffn1_vjp = dense(h3.reshape(C, P).T, bp.w_ffn1, bp.b_ffn1)
    f1r, relu_vjp = relu(f1)
    f2, ffn2_vjp = dense(f1r, bp.w_ffn2, bp.b_ffn2)
    out = q_vol + f2.T.reshape(C, X, Y, Z)

    def vjp(d_out: Array):
        d_f2 = d_out.reshape(C, P).T
        d_f1r, d_w2, d_b2 = ffn2_vjp(d_f2)
        (d_f1,) = relu_vjp(d_f1r)
        d_h3_flat, d_w1, d_b1 = ffn1_vjp(d_f1)
        d_h3 = d_h3_flat.T.reshape(C, X, Y, Z)
        d_cv, d_ln3g, d_ln3b = ln3_vjp(d_h3)
        d_h2, d_wc, d_bc = conv_vjp(d_cv[None])
        d_a_vol, d_ln2g, d_ln2b = ln2_vjp(d_h2[0])
        d_a = d_a_vol.reshape(C, P)
        d_h1_flat, d_feats, d_dca = dca_vjp(d_a)
        d_h1 = d_h1_flat.reshape(C, X, Y, Z)
        d_q, d_ln1g, d_ln1b = ln1_vjp(d_h1)
        d_q = d_q + d_out
        d_params = {"ln1_g": d_ln1g, "ln1_b": d_ln1b, "ln2_g": d_ln2g,
                    "ln2_b": d_ln2b, "ln3_g": d_ln3g, "ln3_b": d_ln3b,
                    "w_conv": d_wc, "b_conv": d_bc, "w_ffn1": d_w1,
                    "b_ffn1": d_b1, "w_ffn2": d_w2, "b_ffn2": d_b2}
        return d_q, d_feats, d_params, d_dca

    return out, vjp


def implicit_block_stack(q: Array, feats: Array, cams: list[CameraModel],
                         grid: VoxelGridSpec, blocks: list[ImplicitBlockParams],
                         index_to_world: Array | None = None):
    """Run N refinement blocks over the voxel queries; reference points are
    computed once from the cell centers.

    Returns (out (C, X, Y, Z), vjp); vjp(d_out) ->
    (d_q, d_feats, per-block param grad dicts).
    """
    if not blocks:
        raise ValueError("need at least one block")
    refs_uv, refs_valid = make_reference_points(grid, cams, index_to_world)
    cur = q
    vjps = []
    for bp in blocks:
        cur, bv = implicit_block(cur, refs_uv, refs_valid, feats, bp)
        vjps.append(bv)

    def vjp(d_out: Array):
        d_feats_total = np.zeros_like(feats)
        per_block = []
        d = d_out
        for bv in reversed(vjps):
            d, d_feats, d_params, d_dca = bv(d)
            d_feats_total += d_feats
            per_block.append({"self": d_params, "dca": d_dca})
        per_block.reverse()
        return d, d_feats_total, per_block

    return cur, vjp


def fuse_ex_im(ex: Array, im: Array):
    """Channel concatenation [ex; im]; backward splits by channel range."""
    if ex.shape[1:] != im.shape[1:]:
        raise ValueError(f"spatial dims differ: {ex.shape} vs {im.shape}")
    out = np.concatenate([ex, im], axis=0)
    ce = ex.shape[0]

    def vjp(d_out: Array):
        return d_out[:ce], d_out[ce:]

    return out, vjp
