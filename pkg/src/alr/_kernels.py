"""Compiled inner loops for the voxel field.

Parameter grids are flattened to ``(V, 4 + C)``: channel 0 is the density
pre-activation, 1..3 colour pre-activations, 4.. semantic logits. Activation
happens per grid node *before* interpolation, so kernels work on a cached
activated copy ``act`` plus the activation derivatives ``dact`` (V, 4).
"""

import math

import numpy as np
from numba import njit, prange

NEUTRAL_COLOR = 0.5


@njit(cache=True, inline="always")
def softplus(x):
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True, inline="always")
def sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, inline="always")
def activate_row(params, act, dact, v):
    s = sigmoid(params[v, 0])
    act[v, 0] = softplus(params[v, 0])
    dact[v, 0] = s
    for ch in range(1, 4):
        s = sigmoid(params[v, ch])
        act[v, ch] = s
        dact[v, ch] = s * (1.0 - s)
    for ch in range(4, params.shape[1]):
        act[v, ch] = params[v, ch]


@njit(cache=True)
def activate(params):
    V = params.shape[0]
    act = np.empty_like(params)
    dact = np.empty((V, 4))
    for v in range(V):
        activate_row(params, act, dact, v)
    return act, dact


@njit(cache=True, inline="always")
def corners(px, py, pz, dims, bmin, spacing, idx, wt):
    """Trilinear corner indices/weights for one point; False outside the grid."""
    nx, ny, nz = dims[0], dims[1], dims[2]
    gx = (px - bmin[0]) / spacing[0]
    gy = (py - bmin[1]) / spacing[1]
    gz = (pz - bmin[2]) / spacing[2]
    if not (gx >= 0.0 and gx <= nx - 1 and gy >= 0.0 and gy <= ny - 1
            and gz >= 0.0 and gz <= nz - 1):
        return False
    ix = min(int(math.floor(gx)), nx - 2)
    iy = min(int(math.floor(gy)), ny - 2)
    iz = min(int(math.floor(gz)), nz - 2)
    fx = gx - ix
    fy = gy - iy
    fz = gz - iz
    k = 0
    for a in range(2):
        wa = fx if a == 1 else 1.0 - fx
        for b in range(2):
            wb = fy if b == 1 else 1.0 - fy
            for c in range(2):
                wc = fz if c == 1 else 1.0 - fz
                idx[k] = ((ix + a) * ny + (iy + b)) * nz + (iz + c)
                wt[k] = wa * wb * wc
                k += 1
    return True


@njit(cache=True, inline="always")
def interp(act, idx, wt, out):
    """Interpolated (sigma, rgb, logits) into ``out``."""
    F = act.shape[1]
    for ch in range(F):
        out[ch] = 0.0
    for k in range(8):
        b = wt[k]
        v = idx[k]
        for ch in range(F):
            out[ch] += b * act[v, ch]


@njit(cache=True)
def sample_points(act, dims, bmin, spacing, pts):
    n = pts.shape[0]
    F = act.shape[1]
    out = np.zeros((n, F))
    idx = np.empty(8, np.int64)
    wt = np.empty(8)
    for i in range(n):
        if corners(pts[i, 0], pts[i, 1], pts[i, 2], dims, bmin, spacing, idx, wt):
            interp(act, idx, wt, out[i])
        else:
            out[i, 1] = NEUTRAL_COLOR
            out[i, 2] = NEUTRAL_COLOR
            out[i, 3] = NEUTRAL_COLOR
    return out


@njit(cache=True, parallel=True)
def render_rays(act, dims, bmin, spacing, ro, rd, ts, deltas,
                out_rgb, out_logits, out_depth, out_acc, out_w):
    R, N = ts.shape
    F = act.shape[1]
    for r in prange(R):
        idx = np.empty(8, np.int64)
        wt = np.empty(8)
        q = np.empty(F)
        T = 1.0
        acc = 0.0
        depth = 0.0
        for ch in range(3):
            out_rgb[r, ch] = 0.0
        for ch in range(F - 4):
            out_logits[r, ch] = 0.0
        for i in range(N):
            t = ts[r, i]
            if corners(ro[r, 0] + t * rd[r, 0], ro[r, 1] + t * rd[r, 1], ro[r, 2] + t * rd[r, 2],
                       dims, bmin, spacing, idx, wt):
                interp(act, idx, wt, q)
            else:
                for ch in range(F):
                    q[ch] = 0.0
                q[1] = NEUTRAL_COLOR
                q[2] = NEUTRAL_COLOR
                q[3] = NEUTRAL_COLOR
            a = q[0] * deltas[r, i]
            w = T * (1.0 - math.exp(-a))
            T = T * math.exp(-a)
            out_w[r, i] = w
            acc += w
            depth += w * t
            for ch in range(3):
                out_rgb[r, ch] += w * q[1 + ch]
            for ch in range(F - 4):
                out_logits[r, ch] += w * q[4 + ch]
        out_depth[r] = depth
        out_acc[r] = acc


@njit(cache=True)
def loss_grad(act, dact, dims, bmin, spacing, ro, rd, ts, deltas, gt_rgb, gt_sem, lam,
              grad, stamp, touched, n_touched, step):
    """Photometric MSE + lam * cross-entropy over labelled rays.

    Accumulates d(loss)/d(params) into ``grad`` and records each voxel with
    a non-zero interpolation weight in ``touched`` (deduplicated by
    ``stamp == step``). Returns ``(photo_loss, sem_loss, n_touched)``.
    """
    R, N = ts.shape
    F = act.shape[1]
    C = F - 4
    n_lab = 0
    for r in range(R):
        if gt_sem[r] >= 0:
            n_lab += 1
    photo = 0.0
    sem = 0.0
    idx = np.empty((N, 8), np.int64)
    wt = np.empty((N, 8))
    inside = np.empty(N, np.bool_)
    q = np.empty((N, F))
    w = np.empty(N)
    t_next = np.empty(N)
    chat = np.empty(3)
    lhat = np.empty(C)
    g_c = np.empty(3)
    g_l = np.empty(C)
    prob = np.empty(C)
    for r in range(R):
        T = 1.0
        for ch in range(3):
            chat[ch] = 0.0
        for ch in range(C):
            lhat[ch] = 0.0
        for i in range(N):
            t = ts[r, i]
            inside[i] = corners(ro[r, 0] + t * rd[r, 0], ro[r, 1] + t * rd[r, 1],
                                ro[r, 2] + t * rd[r, 2], dims, bmin, spacing, idx[i], wt[i])
            if inside[i]:
                interp(act, idx[i], wt[i], q[i])
            else:
                for ch in range(F):
                    q[i, ch] = 0.0
                q[i, 1] = NEUTRAL_COLOR
                q[i, 2] = NEUTRAL_COLOR
                q[i, 3] = NEUTRAL_COLOR
            a = q[i, 0] * deltas[r, i]
            w[i] = T * (1.0 - math.exp(-a))
            T = T * math.exp(-a)
            t_next[i] = T
            for ch in range(3):
                chat[ch] += w[i] * q[i, 1 + ch]
            for ch in range(C):
                lhat[ch] += w[i] * q[i, 4 + ch]

        for ch in range(3):
            diff = chat[ch] - gt_rgb[r, ch]
            photo += diff * diff
            g_c[ch] = 2.0 * diff / (3.0 * R)
        labelled = gt_sem[r] >= 0
        if labelled:
            mx = lhat[0]
            for ch in range(1, C):
                mx = max(mx, lhat[ch])
            z = 0.0
            for ch in range(C):
                prob[ch] = math.exp(lhat[ch] - mx)
                z += prob[ch]
            y = gt_sem[r]
            sem += -(lhat[y] - mx - math.log(z))
            for ch in range(C):
                g_l[ch] = lam * (prob[ch] / z - (1.0 if ch == y else 0.0)) / n_lab

        # reverse sweep: dL/da_k = T_{k+1} e_k - sum_{i>k} w_i e_i
        suffix = 0.0
        for k in range(N - 1, -1, -1):
            e = g_c[0] * q[k, 1] + g_c[1] * q[k, 2] + g_c[2] * q[k, 3]
            if labelled:
                for ch in range(C):
                    e += g_l[ch] * q[k, 4 + ch]
            d_a = t_next[k] * e - suffix
            suffix += w[k] * e
            if not inside[k]:
                continue
            d_sig = d_a * deltas[r, k]
            for j in range(8):
                b = wt[k, j]
                if b == 0.0:
                    continue
                v = idx[k, j]
                if stamp[v] != step:
                    stamp[v] = step
                    touched[n_touched] = v
                    n_touched += 1
                grad[v, 0] += b * d_sig * dact[v, 0]
                bw = b * w[k]
                for ch in range(3):
                    grad[v, 1 + ch] += bw * g_c[ch] * dact[v, 1 + ch]
                if labelled:
                    for ch in range(C):
                        grad[v, 4 + ch] += bw * g_l[ch]
    return photo / (3.0 * R), sem / max(n_lab, 1), n_touched


@njit(cache=True)
def adam_step(params, act, dact, grad, m, v, touched, n_touched, lr, beta1, beta2, eps, step):
    """Lazy Adam: only rows touched this step move; their grads are cleared
    and their cached activations refreshed."""
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    F = params.shape[1]
    for q in range(n_touched):
        vox = touched[q]
        for ch in range(F):
            g = grad[vox, ch]
            m[vox, ch] = beta1 * m[vox, ch] + (1.0 - beta1) * g
            v[vox, ch] = beta2 * v[vox, ch] + (1.0 - beta2) * g * g
            params[vox, ch] -= lr * (m[vox, ch] / bc1) / (math.sqrt(v[vox, ch] / bc2) + eps)
            grad[vox, ch] = 0.0
        activate_row(params, act, dact, vox)
