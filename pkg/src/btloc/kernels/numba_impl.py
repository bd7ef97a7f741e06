"""Numba-compiled hot kernels (default path).

Loop-oriented twins of :mod:`btloc.kernels.numpy_impl`; the equivalence tests
keep both paths interchangeable.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

IMPL_NAME = "numba"

_TWO_PI = 2.0 * math.pi
_DET_TINY = 1e-12


@njit(cache=True)
def _wrap(angle):
    a = math.fmod(angle, _TWO_PI)
    if a <= -math.pi:
        a += _TWO_PI
    elif a > math.pi:
        a -= _TWO_PI
    return a


@njit(cache=True)
def propagate_mean(x, y, th, v, om, dt):
    return (x + v * dt * math.cos(th),
            y + v * dt * math.sin(th),
            _wrap(th + om * dt))


@njit(cache=True)
def motion_jacobian(th, v, dt):
    f = np.eye(3)
    f[0, 2] = -v * dt * math.sin(th)
    f[1, 2] = v * dt * math.cos(th)
    return f


@njit(cache=True)
def process_noise_rate(th, v_psd, om_psd, floor3):
    c = math.cos(th)
    s = math.sin(th)
    q = np.empty((3, 3))
    q[0, 0] = v_psd * c * c + floor3[0]
    q[0, 1] = v_psd * c * s
    q[0, 2] = 0.0
    q[1, 0] = q[0, 1]
    q[1, 1] = v_psd * s * s + floor3[1]
    q[1, 2] = 0.0
    q[2, 0] = 0.0
    q[2, 1] = 0.0
    q[2, 2] = om_psd + floor3[2]
    return q


@njit(cache=True)
def predict_step(pose, cov, v, om, dt, v_psd, om_psd, floor3):
    x, y, th = propagate_mean(pose[0], pose[1], pose[2], v, om, dt)
    f = motion_jacobian(pose[2], v, dt)
    q = process_noise_rate(pose[2], v_psd, om_psd, floor3)
    new_cov = f @ cov @ f.T + q * dt
    new_cov = 0.5 * (new_cov + new_cov.T)
    new_pose = np.empty(3)
    new_pose[0] = x
    new_pose[1] = y
    new_pose[2] = th
    return new_pose, new_cov


@njit(cache=True)
def gate_d2(nu, s_mat):
    n = nu.shape[0]
    scale = 0.0
    for i in range(n):
        for j in range(n):
            a = abs(s_mat[i, j])
            if a > scale:
                scale = a
    if scale <= 0.0:
        return (math.inf, False)
    if n == 1:
        det = s_mat[0, 0]
        if abs(det) <= _DET_TINY * scale:
            return (math.inf, False)
        return (nu[0] * nu[0] / det, det > 0.0)
    if n == 2:
        det = s_mat[0, 0] * s_mat[1, 1] - s_mat[0, 1] * s_mat[1, 0]
        if abs(det) <= _DET_TINY * scale * scale:
            return (math.inf, False)
        d2 = (nu[0] * (s_mat[1, 1] * nu[0] - s_mat[0, 1] * nu[1])
              + nu[1] * (s_mat[0, 0] * nu[1] - s_mat[1, 0] * nu[0])) / det
        return (d2, det > 0.0)
    if n == 3:
        a = s_mat[0, 0]
        b = s_mat[0, 1]
        c = s_mat[0, 2]
        d = s_mat[1, 0]
        e = s_mat[1, 1]
        f = s_mat[1, 2]
        g = s_mat[2, 0]
        h = s_mat[2, 1]
        i = s_mat[2, 2]
        det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
        if abs(det) <= _DET_TINY * scale ** 3:
            return (math.inf, False)
        x0 = ((e * i - f * h) * nu[0] + (c * h - b * i) * nu[1] + (b * f - c * e) * nu[2]) / det
        x1 = ((f * g - d * i) * nu[0] + (a * i - c * g) * nu[1] + (c * d - a * f) * nu[2]) / det
        x2 = ((d * h - e * g) * nu[0] + (b * g - a * h) * nu[1] + (a * e - b * d) * nu[2]) / det
        return (nu[0] * x0 + nu[1] * x1 + nu[2] * x2, det > 0.0)
    x = np.linalg.solve(s_mat, nu)
    d2 = 0.0
    for i in range(n):
        d2 += nu[i] * x[i]
    return (d2, True)


@njit(cache=True)
def associate(obs_xy, obs_kind, cand_xy, cand_kind, radius):
    n = obs_xy.shape[0]
    m = cand_xy.shape[0]
    if n == 0 or m == 0:
        return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
    r2 = radius * radius
    best = np.full(n, -1, dtype=np.int64)
    best_d2 = np.full(n, np.inf)
    for i in range(n):
        ox = obs_xy[i, 0]
        oy = obs_xy[i, 1]
        for j in range(m):
            if obs_kind[i] != cand_kind[j]:
                continue
            dx = ox - cand_xy[j, 0]
            dy = oy - cand_xy[j, 1]
            d2 = dx * dx + dy * dy
            if d2 <= r2 and d2 < best_d2[i]:
                best_d2[i] = d2
                best[i] = j
    claim_owner = np.full(m, -1, dtype=np.int64)
    claim_d2 = np.full(m, np.inf)
    for i in range(n):
        j = best[i]
        if j < 0:
            continue
        if best_d2[i] < claim_d2[j]:
            claim_owner[j] = i
            claim_d2[j] = best_d2[i]
    count = 0
    for i in range(n):
        j = best[i]
        if j >= 0 and claim_owner[j] == i:
            count += 1
    obs_idx = np.empty(count, dtype=np.int64)
    cand_idx = np.empty(count, dtype=np.int64)
    k = 0
    for i in range(n):
        j = best[i]
        if j >= 0 and claim_owner[j] == i:
            obs_idx[k] = i
            cand_idx[k] = j
            k += 1
    return (obs_idx, cand_idx)


@njit(cache=True)
def rigid_align(src_xy, dst_xy):
    k = src_xy.shape[0]
    sx = 0.0
    sy = 0.0
    dx = 0.0
    dy = 0.0
    for i in range(k):
        sx += src_xy[i, 0]
        sy += src_xy[i, 1]
        dx += dst_xy[i, 0]
        dy += dst_xy[i, 1]
    sx /= k
    sy /= k
    dx /= k
    dy /= k
    s_dot = 0.0
    s_cross = 0.0
    for i in range(k):
        ax = src_xy[i, 0] - sx
        ay = src_xy[i, 1] - sy
        bx = dst_xy[i, 0] - dx
        by = dst_xy[i, 1] - dy
        s_dot += ax * bx + ay * by
        s_cross += ax * by - ay * bx
    theta = math.atan2(s_cross, s_dot) if k >= 2 else 0.0
    c = math.cos(theta)
    s = math.sin(theta)
    tx = dx - (c * sx - s * sy)
    ty = dy - (s * sx + c * sy)
    sq = 0.0
    for i in range(k):
        rx = c * src_xy[i, 0] - s * src_xy[i, 1] + tx - dst_xy[i, 0]
        ry = s * src_xy[i, 0] + c * src_xy[i, 1] + ty - dst_xy[i, 1]
        sq += rx * rx + ry * ry
    rms = math.sqrt(sq / k)
    return (tx, ty, theta, rms)


@njit(cache=True)
def dr_propagate_batch(pose0, vs, oms, dts):
    n = vs.shape[0]
    out = np.empty((n, 3))
    x = pose0[0]
    y = pose0[1]
    th = pose0[2]
    for i in range(n):
        x, y, th = propagate_mean(x, y, th, vs[i], oms[i], dts[i])
        out[i, 0] = x
        out[i, 1] = y
        out[i, 2] = th
    return out
