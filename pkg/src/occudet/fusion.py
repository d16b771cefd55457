"""Local-global feature extraction and cross-representation interaction.

Voxel features are collapsed to a BEV plane, run through a local 3-D conv
pyramid and a global 2-D pyramid (optionally with deformable sampling), then
exchanged through windowed neighborhood cross-attention between the two
representations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ops import Array, channel_mix, conv2d, conv3d, ensure_finite, relu, upsample_nearest
from .sampling import bilinear_sample_2d

NEG_INF = -1e30


def voxel_to_bev_stack(v: Array, w: Array, b: Array | None = None):
    """Stack Z into channels, then 1x1-mix down: (C, X, Y, Z) -> (C2, X, Y)."""
    C, X, Y, Z = v.shape
    if w.shape[1] != C * Z:
        raise ValueError(f"reduce weights expect {C * Z} channels, got {w.shape}")
    stacked = v.transpose(0, 3, 1, 2).reshape(C * Z, X, Y)
    out, mix_vjp = channel_mix(stacked, w, b)

    def vjp(d_out: Array):
        grads = mix_vjp(d_out)
        d_stacked = grads[0]
        d_v = d_stacked.reshape(C, Z, X, Y).transpose(0, 2, 3, 1)
        return (d_v,) + tuple(grads[1:])

    return out, vjp


def bev_to_voxel_repeat(b: Array, z: int):
    """Copy each BEV column Z times: (C, X, Y) -> (C, X, Y, Z)."""
    out = np.broadcast_to(b[..., None], b.shape + (z,)).copy()

    def vjp(d_out: Array):
        return (d_out.sum(axis=-1),)

    return out, vjp


def voxel_to_bev_add(v: Array):
    """Sum over Z: (C, X, Y, Z) -> (C, X, Y)."""
    z = v.shape[-1]
    out = v.sum(axis=-1)

    def vjp(d_out: Array):
        return (np.broadcast_to(d_out[..., None], d_out.shape + (z,)).copy(),)

    return out, vjp


# ---------------------------------------------------------------------------
# conv pyramids

@dataclass
class ConvBlockParams:
    """Single-conv residual block: y = x + conv(relu(x)).  Zero weights = identity."""

    w: Array
    b: Array


@dataclass
class DeformOffsetParams:
    """Offset predictor for deformable sampling; zero-init reproduces plain conv."""

    w: Array  # (2*kh*kw, Cin, 3, 3)
    b: Array


@dataclass
class BranchParams:
    """One pyramid: optional stride-2 downsample convs between scales,
    residual blocks per scale, and per-scale 1x1 merge back to full res."""

    down: list = field(default_factory=list)        # [(w, b)] len scales-1
    blocks: list = field(default_factory=list)      # [[ConvBlockParams]] per scale
    merge: list = field(default_factory=list)       # [(w, b)] channel_mix per scale
    deform: list | None = None                      # per-scale [DeformOffsetParams] or None

    @property
    def scales(self) -> int:
        return len(self.blocks)


def _residual3d(x: Array, blk: ConvBlockParams):
    h, r_vjp = relu(x)
    y, c_vjp = conv3d(h[None], blk.w, blk.b)
    out = x + y[0]

    def vjp(d: Array):
        d_h, d_w, d_b = c_vjp(d[None])
        (d_x,) = r_vjp(d_h[0])
        return d_x + d, {"w": d_w, "b": d_b}

    return out, vjp


def local_branch(v: Array, p: BranchParams):
    """Stride-2 residual conv3d pyramid merged back to full resolution.

    Requires spatial dims divisible by 2**(scales-1).  Merge is per-scale
    1x1 mix + nearest upsample, summed.
    """
    C, X, Y, Z = v.shape
    f = 2 ** (p.scales - 1)
    if X % f or Y % f or Z % f:
        raise ValueError(f"dims {v.shape[1:]} not divisible by {f}")
    feats, vjps = [], []
    cur = v
    for s in range(p.scales):
        steps = []
        if s > 0:
            w, b = p.down[s - 1]
            cur, dv = conv3d(cur[None], w, b, stride=2)
            cur = cur[0]
            steps.append(("down", dv))
        for blk in p.blocks[s]:
            cur, bv = _residual3d(cur, blk)
            steps.append(("block", bv))
        feats.append(cur)
        vjps.append(steps)

    out = None
    merge_vjps = []
    for s in range(p.scales):
        w, b = p.merge[s]
        m, mv = channel_mix(feats[s], w, b)
        if s > 0:
            m, uv = upsample_nearest(m, 2 ** s, (1, 2, 3))
        else:
            uv = None
        merge_vjps.append((mv, uv))
        out = m if out is None else out + m
    ensure_finite("local_branch", out)

    def vjp(d_out: Array):
        grads = {"down": [None] * max(p.scales - 1, 0),
                 "blocks": [[None] * len(bl) for bl in p.blocks],
                 "merge": [None] * p.scales}
        d_feats = []
        for s in range(p.scales):
            mv, uv = merge_vjps[s]
            d = d_out
            if uv is not None:
                (d,) = uv(d)
            g = mv(d)
            grads["merge"][s] = {"w": g[1], "b": g[2]}
            d_feats.append(g[0])
        d_cur = None
        for s in reversed(range(p.scales)):
            d = d_feats[s] if d_cur is None else d_feats[s] + d_cur
            bi = len(p.blocks[s]) - 1
            for kind, sv in reversed(vjps[s]):
                if kind == "block":
                    d, bg = sv(d)
                    grads["blocks"][s][bi] = bg
                    bi -= 1
                else:
                    d_in, dw, db = sv(d[None])
                    d = d_in[0]
                    grads["down"][s - 1] = {"w": dw, "b": db}
            d_cur = d
        return d_cur, grads

    return out, vjp


def deform_conv2d(x: Array, w: Array, b: Array, op: DeformOffsetParams):
    """Conv2d whose taps sample at learned per-position pixel offsets.

    Offsets come from a 3x3 conv over x, ordered (tap, dx, dy).  With the
    offset predictor at zero this reproduces plain zero-padded conv2d.
    """
    Co, Ci, kh, kw = w.shape
    _, H, W = x.shape
    offs, off_vjp = conv2d(x[None], op.w, op.b)
    offs = offs[0].reshape(kh * kw, 2, H, W)

    xx, yy = np.meshgrid(np.arange(W, dtype=x.dtype),
                         np.arange(H, dtype=x.dtype), indexing="xy")
    base = np.stack([xx, yy], axis=0).reshape(2, H * W)
    y = np.zeros((Co, H * W), dtype=x.dtype)
    samp_vjps, samples = [], []
    for t in range(kh * kw):
        ti, tj = divmod(t, kw)
        dx = tj - kw // 2
        dy = ti - kh // 2
        pts = np.stack([base[0] + dx + offs[t, 0].reshape(-1),
                        base[1] + dy + offs[t, 1].reshape(-1)], axis=1)
        s, _, sv = bilinear_sample_2d(x, pts)
        samples.append(s)
        samp_vjps.append(sv)
        y += w[:, :, ti, tj] @ s
    out = y.reshape(Co, H, W) + b[:, None, None]
    ensure_finite("deform_conv2d", out)

    def vjp(d_out: Array):
        d_y = d_out.reshape(Co, H * W)
        d_x = np.zeros_like(x)
        d_w = np.zeros_like(w)
        d_offs = np.zeros_like(offs)
        for t in range(kh * kw):
            ti, tj = divmod(t, kw)
            d_s = w[:, :, ti, tj].T @ d_y
            d_w[:, :, ti, tj] = d_y @ samples[t].T
            d_feat, d_pts = samp_vjps[t](d_s)
            d_x += d_feat
            d_offs[t, 0] = d_pts[:, 0].reshape(H, W)
            d_offs[t, 1] = d_pts[:, 1].reshape(H, W)
        d_in, d_ow, d_ob = off_vjp(d_offs.reshape(1, -1, H, W))
        d_x += d_in[0]
        d_b = d_y.sum(axis=1)
        return d_x, {"w": d_w, "b": d_b, "off_w": d_ow, "off_b": d_ob}

    return out, vjp


def _residual2d(x: Array, blk: ConvBlockParams, deform: DeformOffsetParams | None):
    h, r_vjp = relu(x)
    if deform is None:
        y, c_vjp = conv2d(h[None], blk.w, blk.b)
        y = y[0]
    else:
        y, c_vjp = deform_conv2d(h, blk.w, blk.b, deform)
    out = x + y

    def vjp(d: Array):
        if deform is None:
            d_h, d_w, d_b = c_vjp(d[None])
            d_h = d_h[0]
            g = {"w": d_w, "b": d_b}
        else:
            d_h, g = c_vjp(d)
        (d_x,) = r_vjp(d_h)
        return d_x + d, g

    return out, vjp


def global_branch(bev: Array, p: BranchParams):
    """2-D analogue of local_branch; residual blocks may use deformable taps."""
    C, X, Y = bev.shape
    f = 2 ** (p.scales - 1)
    if X % f or Y % f:
        raise ValueError(f"dims {bev.shape[1:]} not divisible by {f}")
    feats, vjps = [], []
    cur = bev
    for s in range(p.scales):
        steps = []
        if s > 0:
            w, b = p.down[s - 1]
            cur, dv = conv2d(cur[None], w, b, stride=2)
            cur = cur[0]
            steps.append(("down", dv))
        for i, blk in enumerate(p.blocks[s]):
            deform = p.deform[s][i] if p.deform is not None else None
            cur, bv = _residual2d(cur, blk, deform)
            steps.append(("block", bv))
        feats.append(cur)
        vjps.append(steps)

    out = None
    merge_vjps = []
    for s in range(p.scales):
        w, b = p.merge[s]
        m, mv = channel_mix(feats[s], w, b)
        uv = None
        if s > 0:
            m, uv = upsample_nearest(m, 2 ** s, (1, 2))
        merge_vjps.append((mv, uv))
        out = m if out is None else out + m
    ensure_finite("global_branch", out)

    def vjp(d_out: Array):
        grads = {"down": [None] * max(p.scales - 1, 0),
                 "blocks": [[None] * len(bl) for bl in p.blocks],
                 "merge": [None] * p.scales}
        d_feats = []
        for s in range(p.scales):
            mv, uv = merge_vjps[s]
            d = d_out
            if uv is not None:
                (d,) = uv(d)
            g = mv(d)
            grads["merge"][s] = {"w": g[1], "b": g[2]}
            d_feats.append(g[0])
        d_cur = None
        for s in reversed(range(p.scales)):
            d = d_feats[s] if d_cur is None else d_feats[s] + d_cur
            bi = len(p.blocks[s]) - 1
            for kind, sv in reversed(vjps[s]):
                if kind == "block":
                    d, bg = sv(d)
                    grads["blocks"][s][bi] = bg
                    bi -= 1
                else:
                    d_in, dw, db = sv(d[None])
                    d = d_in[0]
                    grads["down"][s - 1] = {"w": dw, "b": db}
            d_cur = d
        return d_cur, grads

    return out, vjp


# ---------------------------------------------------------------------------
# windowed neighborhood cross-attention

@dataclass
class InteractionParams:
    """Projections for one side of the cross-representation exchange."""

    w_q: Array
    w_k: Array
    w_v: Array
    w_o: Array
    b_o: Array

    FIELDS = ("w_q", "w_k", "w_v", "w_o", "b_o")


def _shift(arr: Array, deltas: tuple[int, ...]):
    """shifted[p] = arr[p + delta] with zero fill; returns (shifted, valid)."""
    spatial = arr.shape[1:]
    out = np.zeros_like(arr)
    valid = np.zeros(spatial, dtype=bool)
    src, dst = [slice(None)], [slice(None)]
    for n, d in zip(spatial, deltas):
        lo_dst, hi_dst = max(0, -d), n - max(0, d)
        if lo_dst >= hi_dst:
            return out, valid
        dst.append(slice(lo_dst, hi_dst))
        src.append(slice(lo_dst + d, hi_dst + d))
    out[tuple(dst)] = arr[tuple(src)]
    valid[tuple(d for d in dst[1:])] = True
    return out, valid


def _unshift_add(acc: Array, d_shifted: Array, deltas: tuple[int, ...]) -> None:
    """Adjoint of _shift: acc[p + delta] += d_shifted[p] on the valid region."""
    spatial = acc.shape[1:]
    src, dst = [slice(None)], [slice(None)]
    for n, d in zip(spatial, deltas):
        lo_dst, hi_dst = max(0, -d), n - max(0, d)
        if lo_dst >= hi_dst:
            return
        dst.append(slice(lo_dst, hi_dst))
        src.append(slice(lo_dst + d, hi_dst + d))
    acc[tuple(src)] += d_shifted[tuple(dst)]


def neighborhood_cross_attention(query_map: Array, kv_map: Array,
                                 p: InteractionParams,
                                 window: tuple[int, ...]):
    """Windowed cross-attention: each position attends over the window of the
    key/value map centered on it (masked softmax at borders), with a residual
    from the raw query map.  Works for 2-D (C, X, Y) and 3-D (C, X, Y, Z).

    Returns (out, vjp); vjp(d_out) -> (d_query_map, d_kv_map, d_params dict).
    """
    if query_map.shape != kv_map.shape:
        raise ValueError("query and kv maps must share shape")
    if len(window) != query_map.ndim - 1:
        raise ValueError(f"window rank {len(window)} for map {query_map.shape}")
    for wsz in window:
        if wsz % 2 != 1:
            raise ValueError("window sizes must be odd")
    C = query_map.shape[0]
    scale = 1.0 / np.sqrt(C)

    Q, q_vjp = channel_mix(query_map, p.w_q)
    K, k_vjp = channel_mix(kv_map, p.w_k)
    V, v_vjp = channel_mix(kv_map, p.w_v)

    radii = [wsz // 2 for wsz in window]
    ranges = [range(-r, r + 1) for r in radii]
    deltas: list[tuple[int, ...]] = []
    if len(window) == 2:
        deltas = [(a, b) for a in ranges[0] for b in ranges[1]]
    else:
        deltas = [(a, b, c) for a in ranges[0] for b in ranges[1]
                  for c in ranges[2]]

    shifted_k, shifted_v, valids = [], [], []
    logits = []
    for d in deltas:
        ks, val = _shift(K, d)
        vs, _ = _shift(V, d)
        shifted_k.append(ks)
        shifted_v.append(vs)
        valids.append(val)
        lg = (Q * ks).sum(axis=0) * scale
        logits.append(np.where(val, lg, NEG_INF))
    L = np.stack(logits, axis=0)                      # (O, *spatial)
    m = L.max(axis=0, keepdims=True)
    e = np.exp(L - m)
    s = e.sum(axis=0, keepdims=True)
    attw = e / s                                      # masked softmax over window

    att = np.zeros_like(V)
    for i, _ in enumerate(deltas):
        att += attw[i] * shifted_v[i]
    proj, o_vjp = channel_mix(att, p.w_o, p.b_o)
    out = query_map + proj
    ensure_finite("neighborhood_cross_attention", out)

    def vjp(d_out: Array):
        d_att, d_wo, d_bo = o_vjp(d_out)
        d_attw = np.zeros_like(attw)
        d_V = np.zeros_like(V)
        for i, d in enumerate(deltas):
            d_attw[i] = (d_att * shifted_v[i]).sum(axis=0)
            _unshift_add(d_V, attw[i] * d_att, d)
        dot = (d_attw * attw).sum(axis=0, keepdims=True)
        d_L = attw * (d_attw - dot)
        d_Q = np.zeros_like(Q)
        d_K = np.zeros_like(K)
        for i, d in enumerate(deltas):
            g = np.where(valids[i], d_L[i], 0.0) * scale
            d_Q += g * shifted_k[i]
            _unshift_add(d_K, g[None] * Q, d)
        d_qm, d_wq = q_vjp(d_Q)
        d_kv_k, d_wk = k_vjp(d_K)
        d_kv_v, d_wv = v_vjp(d_V)
        d_params = {"w_q": d_wq, "w_k": d_wk, "w_v": d_wv,
                    "w_o": d_wo, "b_o": d_bo}
        return d_out + d_qm, d_kv_k + d_kv_v, d_params

    return out, vjp
