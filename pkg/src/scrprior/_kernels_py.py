"""Numpy implementations of the compiled kernels (fallback backend)."""

import numpy as np

_CHUNK = 2048


def raycast_rectangles(origin, dirs, rect_o, rect_u, rect_v):
    """Nearest hit of each ray ``origin + t * dirs[i]`` against rectangles (``rect_u`` orthogonal to ``rect_v``).

    Returns ``(t, idx, a, b)``: hit parameter (inf on miss), surface index
    (-1 on miss) and the fractional position along the two edges.
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    normals = np.cross(rect_u, rect_v)
    uu = np.einsum("ij,ij->i", rect_u, rect_u)
    vv = np.einsum("ij,ij->i", rect_v, rect_v)
    offs = np.einsum("ij,ij->i", normals, rect_o - origin)

    den = dirs @ normals.T  # (n, S)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(den) < 1e-12, np.inf, offs[None, :] / den)
    t = np.where(t <= 1e-9, np.inf, t)
    hit = origin[None, None, :] + t[..., None] * dirs[:, None, :] - rect_o[None, :, :]
    with np.errstate(invalid="ignore"):
        a = np.einsum("nsk,sk->ns", hit, rect_u) / uu
        b = np.einsum("nsk,sk->ns", hit, rect_v) / vv
        inside = (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1) & np.isfinite(t)
    t = np.where(inside, t, np.inf)
    idx = np.argmin(t, axis=1)
    rows = np.arange(n)
    t_best = t[rows, idx]
    miss = ~np.isfinite(t_best)
    a_best = np.where(miss, np.nan, a[rows, idx])
    b_best = np.where(miss, np.nan, b[rows, idx])
    idx = np.where(miss, -1, idx).astype(np.int64)
    return t_best, idx, a_best, b_best


def nearest_sqdist(a, b):
    """Squared distance and index of the nearest row of ``b`` for each row of ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d_out = np.empty(a.shape[0])
    j_out = np.empty(a.shape[0], dtype=np.int64)
    for s in range(0, a.shape[0], _CHUNK):
        block = a[s:s + _CHUNK]
        d = ((block[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        j = np.argmin(d, axis=1)
        j_out[s:s + _CHUNK] = j
        d_out[s:s + _CHUNK] = d[np.arange(block.shape[0]), j]
    return d_out, j_out


def count_inliers(rotations, translations, k4, points, pixels, threshold, min_depth):
    """Inlier count per world-to-camera hypothesis under a pixel threshold."""
    cam = np.einsum("hij,nj->hni", rotations, points) + translations[:, None, :]
    z = cam[..., 2]
    front = z > min_depth
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k4[0] * cam[..., 0] / z + k4[2]
        v = k4[1] * cam[..., 1] / z + k4[3]
        err2 = (u - pixels[None, :, 0]) ** 2 + (v - pixels[None, :, 1]) ** 2
    ok = front & (err2 < threshold * threshold)
    return ok.sum(axis=1).astype(np.int64)
