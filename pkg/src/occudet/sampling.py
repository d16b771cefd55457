"""Bilinear and trilinear interpolation with hand-written backward passes.

Points that fall outside the valid lattice ([0, extent-1] per sampled axis)
produce zeros plus a per-point validity flag; their gradients are zero.
Sampling is exact at lattice points and linear along each axis.
"""
from __future__ import annotations

import numpy as np

from .ops import Array, ensure_finite


def scatter_rows(indices: Array, values: Array, n_rows: int) -> Array:
    """Sum value rows (M, C) into (n_rows, C) at the given row indices.

    Built on bincount, which accumulates in input order, so results are
    reproducible and match a sequential loop bit for bit.
    """
    out = np.empty((n_rows, values.shape[1]), dtype=values.dtype)
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(indices, weights=values[:, c],
                                minlength=n_rows)
    return out


def bilinear_sample_2d(feat: Array, points: Array):
    """Sample feat (C, H, W) at continuous pixel coords points (P, 2) = (x, y).

    x runs along W, y along H.  Returns (out (C, P), valid (P,), vjp) where
    vjp(d_out) -> (d_feat, d_points).
    """
    if feat.ndim != 3:
        raise ValueError(f"feat must be (C, H, W), got {feat.shape}")
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError(f"points must be (P, 2), got {points.shape}")
    C, H, W = feat.shape
    if H < 2 or W < 2:
        raise ValueError("sampled axes need extent >= 2")
    x = points[:, 0]
    y = points[:, 1]
    valid = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)

    x0 = np.clip(np.floor(x), 0, W - 2).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, H - 2).astype(np.int64)
    fx = np.where(valid, x - x0, 0.0)
    fy = np.where(valid, y - y0, 0.0)

    flat = feat.reshape(C, H * W)
    i00 = y0 * W + x0
    f00 = flat[:, i00]
    f10 = flat[:, i00 + 1]
    f01 = flat[:, i00 + W]
    f11 = flat[:, i00 + W + 1]

    w00 = (1.0 - fx) * (1.0 - fy)
    w10 = fx * (1.0 - fy)
    w01 = (1.0 - fx) * fy
    w11 = fx * fy
    out = f00 * w00 + f10 * w10 + f01 * w01 + f11 * w11
    out *= valid
    ensure_finite("bilinear_sample_2d", out)

    def vjp(d_out: Array):
        d = d_out * valid
        idx4 = np.concatenate([i00, i00 + 1, i00 + W, i00 + W + 1])
        vals4 = np.concatenate([(d * w00).T, (d * w10).T, (d * w01).T,
                                (d * w11).T], axis=0)
        d_feat = scatter_rows(idx4, vals4, H * W).T.reshape(C, H, W) \
            .astype(feat.dtype)

        gx = (f10 - f00) * (1.0 - fy) + (f11 - f01) * fy
        gy = (f01 - f00) * (1.0 - fx) + (f11 - f10) * fx
        d_points = np.stack([(d * gx).sum(axis=0), (d * gy).sum(axis=0)],
                            axis=1)
        return d_feat, d_points

    return out, valid, vjp


def trilinear_sample_3d(vol: Array, points: Array):
    """Sample vol (C, X, Y, Z) at continuous index coords points (P, 3).

    Returns (out (C, P), valid (P,), vjp); vjp(d_out) -> (d_vol, d_points).
    """
    if vol.ndim != 4:
        raise ValueError(f"vol must be (C, X, Y, Z), got {vol.shape}")
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (P, 3), got {points.shape}")
    C, X, Y, Z = vol.shape
    if min(X, Y, Z) < 2:
        raise ValueError("sampled axes need extent >= 2")
    px, py, pz = points[:, 0], points[:, 1], points[:, 2]
    valid = ((px >= 0) & (px <= X - 1) & (py >= 0) & (py <= Y - 1)
             & (pz >= 0) & (pz <= Z - 1))

    x0 = np.clip(np.floor(px), 0, X - 2).astype(np.int64)
    y0 = np.clip(np.floor(py), 0, Y - 2).astype(np.int64)
    z0 = np.clip(np.floor(pz), 0, Z - 2).astype(np.int64)
    fx = np.where(valid, px - x0, 0.0)
    fy = np.where(valid, py - y0, 0.0)
    fz = np.where(valid, pz - z0, 0.0)

    flat = vol.reshape(C, X * Y * Z)
    base = (x0 * Y + y0) * Z + z0
    # corner order: (dx, dy, dz) bits
    offs = [((dx * Y + dy) * Z + dz, dx, dy, dz)
            for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]
    corners = [flat[:, base + o] for o, _, _, _ in offs]
    weights = [np.where(dx, fx, 1.0 - fx) * np.where(dy, fy, 1.0 - fy)
               * np.where(dz, fz, 1.0 - fz)
               for _, dx, dy, dz in offs]
    out = corners[0] * weights[0]
    for c, w in zip(corners[1:], weights[1:]):
        out += c * w
    out *= valid
    ensure_finite("trilinear_sample_3d", out)

    def vjp(d_out: Array):
        d = d_out * valid
        idx8 = np.concatenate([base + o for o, _, _, _ in offs])
        vals8 = np.concatenate([(d * w).T for w in weights], axis=0)
        d_vol = scatter_rows(idx8, vals8, X * Y * Z).T \
            .reshape(C, X, Y, Z).astype(vol.dtype)

        gx = np.zeros_like(px)
        gy = np.zeros_like(py)
        gz = np.zeros_like(pz)
        for (_, dx, dy, dz), c in zip(offs, corners):
            wx = np.where(dx, fx, 1.0 - fx)
            wy = np.where(dy, fy, 1.0 - fy)
            wz = np.where(dz, fz, 1.0 - fz)
            sx = 1.0 if dx else -1.0
            sy = 1.0 if dy else -1.0
            sz = 1.0 if dz else -1.0
            cd = (d * c).sum(axis=0)
            gx += cd * sx * wy * wz
            gy += cd * wx * sy * wz
            gz += cd * wx * wy * sz
        d_points = np.stack([gx, gy, gz], axis=1)
        return d_vol, d_points

    return out, valid, vjp
