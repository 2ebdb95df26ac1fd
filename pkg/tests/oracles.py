"""Independent reference implementations written with explicit loops."""

import math

import numpy as np


def cost_volume_loops(F1, F2):
    H, W, D = F1.shape
    C = np.zeros((H, W, H, W))
    for i in range(H):
        for j in range(W):
            for h in range(H):
                for k in range(W):
                    s = 0.0
                    for d in range(D):
                        s += F1[i, j, d] * F2[h, k, d]
                    C[i, j, h, k] = s
    return C


def motion_field_loops(C, tau):
    H, W = C.shape[:2]
    U = np.zeros_like(C)
    for i in range(H):
        for j in range(W):
            m = max(C[i, j, h, k] for h in range(H) for k in range(W))
            z = 0.0
            for h in range(H):
                for k in range(W):
                    z += math.exp((C[i, j, h, k] - m) / tau)
            for h in range(H):
                for k in range(W):
                    U[i, j, h, k] = math.exp((C[i, j, h, k] - m) / tau) / z
    return U


def normalize_loops(F):
    out = np.zeros_like(F)
    H, W, _ = F.shape
    for i in range(H):
        for j in range(W):
            n = math.sqrt(sum(x * x for x in F[i, j]))
            out[i, j] = F[i, j] / n if n > 0 else 0.0
    return out


def motion_loss_loops(fv, fd, tau):
    """fv, fd: [L, D, H, W]."""
    L = fv.shape[0]
    total, count = 0.0, 0
    for l in range(L - 1):
        uv = motion_field_loops(cost_volume_loops(normalize_loops(fv[l].transpose(1, 2, 0)),
                                                  normalize_loops(fv[l + 1].transpose(1, 2, 0))), tau)
        ud = motion_field_loops(cost_volume_loops(normalize_loops(fd[l].transpose(1, 2, 0)),
                                                  normalize_loops(fd[l + 1].transpose(1, 2, 0))), tau)
        total += float(((uv - ud) ** 2).sum())
        count += uv.size
    return total / count


def dilate_loops(mask, r):
    H, W = mask.shape
    out = np.zeros_like(mask)
    for i in range(H):
        for j in range(W):
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    a, b = i + di, j + dj
                    if 0 <= a < H and 0 <= b < W and mask[a, b]:
                        out[i, j] = 1
    return out
