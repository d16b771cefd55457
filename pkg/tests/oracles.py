"""Independent brute-force oracles shared across test modules."""
import numpy as np

from occudet.geometry import back_project_pixel


def lift_oracle(depth_probs, feats, grid, cams, bins):
    """Loop every (camera, v, u, d) in order, accumulate in float64, drop
    out-of-grid contributions, cast back to the feature dtype."""
    N, D, H, W = depth_probs.shape
    C = feats.shape[1]
    X, Y, Z = grid.dims
    acc = np.zeros((C, X, Y, Z), dtype=np.float64)
    centers = bins.centers()
    for n in range(N):
        for v in range(H):
            for u in range(W):
                for d in range(D):
                    pt = back_project_pixel(float(u), float(v),
                                            float(centers[d]), cams[n])
                    idx = np.floor((pt - grid.origin)
                                   / grid.voxel_size).astype(int)
                    if np.any(idx < 0) or np.any(idx >= grid.dims):
                        continue
                    acc[:, idx[0], idx[1], idx[2]] += (
                        np.float64(depth_probs[n, d, v, u])
                        * feats[n, :, v, u].astype(np.float64))
    return acc.astype(feats.dtype)
