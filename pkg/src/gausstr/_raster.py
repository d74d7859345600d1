"""numba kernels for front-to-back splatting.

Both the tiled and the brute-force paths call ``_blend_pixel`` so that each
pixel performs the same floating-point operations in the same order; the
only difference is which Gaussians are skipped by the 3-sigma test, and a
skipped Gaussian never touches the accumulators.
"""
import numpy as np
from numba import njit, prange

TILE = 16
T_EPS = 1e-4
ALPHA_MAX = 0.999
# contributions vanish beyond Mahalanobis distance 3 (power -4.5); a smoothstep
# window over power in [-4.5, -4.0] keeps the falloff C1 at the cutoff
POWER_CUTOFF = -4.5
TAPER_START = -4.0


@njit(cache=True)
def falloff(power):
    """Windowed Gaussian falloff and its derivative w.r.t. power."""
    G = np.exp(power)
    if power >= TAPER_START:
        return G, G
    u = (power - POWER_CUTOFF) / (TAPER_START - POWER_CUTOFF)
    s = u * u * (3.0 - 2.0 * u)
    ds = 6.0 * u * (1.0 - u) / (TAPER_START - POWER_CUTOFF)
    return G * s, G * (s + ds)


@njit(cache=True)
def _blend_pixel(px, py, ids, start, stop, uv, conic, opac, feat, depth, out_f):
    T = 1.0
    D = 0.0
    last = start - 1
    C = feat.shape[1]
    for k in range(start, stop):
        i = ids[k]
        dx = px - uv[i, 0]
        dy = py - uv[i, 1]
        power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
        if power < POWER_CUTOFF:
            continue
        G, _ = falloff(power)
        a = opac[i] * G
        if a > ALPHA_MAX:
            a = ALPHA_MAX
        w = a * T
        for c in range(C):
            out_f[c] += feat[i, c] * w
        D += depth[i] * w
        T = T * (1.0 - a)
        last = k
        if T < T_EPS:
            break
    return T, D, last


@njit(cache=True)
def bin_tiles(order, rect, n_tiles, tiles_x):
    """CSR tile lists; ``order`` is the global depth order, rect = (x0, y0, x1, y1) tiles, exclusive."""
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for i in order:
        for ty in range(rect[i, 1], rect[i, 3]):
            for tx in range(rect[i, 0], rect[i, 2]):
                counts[ty * tiles_x + tx + 1] += 1
    ptr = np.cumsum(counts)
    fill = ptr[:-1].copy()
    ids = np.empty(ptr[-1], dtype=np.int64)
    for i in order:
        for ty in range(rect[i, 1], rect[i, 3]):
            for tx in range(rect[i, 0], rect[i, 2]):
                t = ty * tiles_x + tx
                ids[fill[t]] = i
                fill[t] += 1
    return ptr, ids


@njit(parallel=True, cache=True)
def raster_tiled(H, W, tiles_x, ptr, ids, uv, conic, opac, feat, depth,
                 out_feat, out_depth, out_T, out_last):
    n_tiles = len(ptr) - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        for i in range(ty * TILE, min(H, (ty + 1) * TILE)):
            for j in range(tx * TILE, min(W, (tx + 1) * TILE)):
                T, D, last = _blend_pixel(j + 0.5, i + 0.5, ids, ptr[t], ptr[t + 1],
                                          uv, conic, opac, feat, depth, out_feat[i, j])
                out_depth[i, j] = D
                out_T[i, j] = T
                out_last[i, j] = last


@njit(cache=True)
def raster_brute(H, W, ids, uv, conic, opac, feat, depth, out_feat, out_depth, out_T):
    for i in range(H):
        for j in range(W):
            T, D, last = _blend_pixel(j + 0.5, i + 0.5, ids, 0, len(ids),
                                      uv, conic, opac, feat, depth, out_feat[i, j])
            out_depth[i, j] = D
            out_T[i, j] = T


@njit(parallel=True, cache=True)
def raster_backward(H, W, tiles_x, ptr, ids, uv, conic, opac, feat, depth,
                    T_final, last_idx, g_feat, g_depth,
                    buf_uv, buf_conic, buf_opac, buf_feat, buf_depth):
    """Per-tile gradient buffers (leading axis = tile); caller reduces in tile order."""
    n_tiles = len(ptr) - 1
    C = feat.shape[1]
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        acc_f = np.zeros(C)
        for i in range(ty * TILE, min(H, (ty + 1) * TILE)):
            for j in range(tx * TILE, min(W, (tx + 1) * TILE)):
                T = T_final[i, j]
                acc_f[:] = 0.0
                acc_d = 0.0
                gD = g_depth[i, j]
                px = j + 0.5
                py = i + 0.5
                for k in range(last_idx[i, j], ptr[t] - 1, -1):
                    gi = ids[k]
                    dx = px - uv[gi, 0]
                    dy = py - uv[gi, 1]
                    A = conic[gi, 0]
                    B = conic[gi, 1]
                    Cc = conic[gi, 2]
                    power = -0.5 * (A * dx * dx + Cc * dy * dy) - B * dx * dy
                    if power < POWER_CUTOFF:
                        continue
                    G, dG = falloff(power)
                    a = opac[gi] * G
                    clipped = a > ALPHA_MAX
                    if clipped:
                        a = ALPHA_MAX
                    one_m = 1.0 - a
                    T = T / one_m
                    w = a * T
                    dLda = gD * (T * depth[gi] - acc_d / one_m)
                    for c in range(C):
                        gfc = g_feat[i, j, c]
                        dLda += gfc * (T * feat[gi, c] - acc_f[c] / one_m)
                        buf_feat[t, gi, c] += gfc * w
                        acc_f[c] += feat[gi, c] * w
                    buf_depth[t, gi] += gD * w
                    acc_d += depth[gi] * w
                    if not clipped:
                        buf_opac[t, gi] += dLda * G
                        dLdp = dLda * opac[gi] * dG
                        buf_conic[t, gi, 0] += -0.5 * dLdp * dx * dx
                        buf_conic[t, gi, 1] += -dLdp * dx * dy
                        buf_conic[t, gi, 2] += -0.5 * dLdp * dy * dy
                        buf_uv[t, gi, 0] += dLdp * (A * dx + B * dy)
                        buf_uv[t, gi, 1] += dLdp * (B * dx + Cc * dy)
