"""Pure-numpy implementations of the numeric hot kernels.

Reference path used when ``BTLOC_KERNELS=numpy`` (or when numba is not
importable).  Semantics are pinned to the numba implementations by the
equivalence tests.
"""

from __future__ import annotations

import math

import numpy as np

IMPL_NAME = "numpy"

_TWO_PI = 2.0 * math.pi
_DET_TINY = 1e-12


def _wrap(angle: float) -> float:
    a = math.fmod(angle, _TWO_PI)
    if a <= -math.pi:
        a += _TWO_PI
    elif a > math.pi:
        a -= _TWO_PI
    return a


def propagate_mean(x: float, y: float, th: float, v: float, om: float, dt: float):
    """One Euler step of the unicycle model."""
    return (x + v * dt * math.cos(th),
            y + v * dt * math.sin(th),
            _wrap(th + om * dt))


def motion_jacobian(th: float, v: float, dt: float) -> np.ndarray:
    """Jacobian of the Euler unicycle step wrt (x, y, heading)."""
    return np.array([
        [1.0, 0.0, -v * dt * math.sin(th)],
        [0.0, 1.0, v * dt * math.cos(th)],
        [0.0, 0.0, 1.0],
    ])


def process_noise_rate(th: float, v_psd: float, om_psd: float, floor3: np.ndarray) -> np.ndarray:
    """Continuous-time process noise (per second) at the given heading."""
    c, s = math.cos(th), math.sin(th)
    g = np.array([[c, 0.0], [s, 0.0], [0.0, 1.0]])
    q = g @ np.diag([v_psd, om_psd]) @ g.T
    q[0, 0] += floor3[0]
    q[1, 1] += floor3[1]
    q[2, 2] += floor3[2]
    return q


def predict_step(pose: np.ndarray, cov: np.ndarray, v: float, om: float, dt: float,
                 v_psd: float, om_psd: float, floor3: np.ndarray):
    """Propagate mean and covariance over ``dt`` seconds; Q scales linearly in dt."""
    x, y, th = propagate_mean(pose[0], pose[1], pose[2], v, om, dt)
    f = motion_jacobian(pose[2], v, dt)
    q = process_noise_rate(pose[2], v_psd, om_psd, floor3)
    new_cov = f @ cov @ f.T + q * dt
    new_cov = 0.5 * (new_cov + new_cov.T)
    return np.array([x, y, th]), new_cov


def gate_d2(nu: np.ndarray, s_mat: np.ndarray):
    """Squared Mahalanobis distance of an innovation, closed form up to 3 DOF.

    Returns ``(d2, ok)``; ``ok`` is False when S is (near) singular.
    """
    n = nu.shape[0]
    scale = float(np.max(np.abs(s_mat)))
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
        a, b, c = s_mat[0]
        d, e, f = s_mat[1]
        g, h, i = s_mat[2]
        det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
        if abs(det) <= _DET_TINY * scale ** 3:
            return (math.inf, False)
        # adjugate solve
        adj = np.array([
            [e * i - f * h, c * h - b * i, b * f - c * e],
            [f * g - d * i, a * i - c * g, c * d - a * f],
            [d * h - e * g, b * g - a * h, a * e - b * d],
        ])
        x = adj @ nu / det
        return (float(nu @ x), det > 0.0)
    try:
        x = np.linalg.solve(s_mat, nu)
    except np.linalg.LinAlgError:
        return (math.inf, False)
    return (float(nu @ x), True)


def associate(obs_xy: np.ndarray, obs_kind: np.ndarray,
              cand_xy: np.ndarray, cand_kind: np.ndarray, radius: float):
    """Nearest-neighbor association of observations to same-kind candidates.

    Each observation claims its nearest candidate within ``radius``; when two
    observations claim one candidate the nearer wins and the loser is dropped.
    Returns (obs_indices, cand_indices) sorted by observation index.
    """
    n = obs_xy.shape[0]
    m = cand_xy.shape[0]
    if n == 0 or m == 0:
        return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
    diff = obs_xy[:, None, :] - cand_xy[None, :, :]
    d2 = np.einsum("nmk,nmk->nm", diff, diff)
    d2[obs_kind[:, None] != cand_kind[None, :]] = np.inf
    d2[d2 > radius * radius] = np.inf
    best = np.argmin(d2, axis=1)
    best_d2 = d2[np.arange(n), best]

    claim_owner = np.full(m, -1, dtype=np.int64)
    claim_d2 = np.full(m, np.inf)
    for i in range(n):
        if not np.isfinite(best_d2[i]):
            continue
        j = best[i]
        if best_d2[i] < claim_d2[j]:
            claim_owner[j] = i
            claim_d2[j] = best_d2[i]
    obs_idx = [i for i in range(n)
               if np.isfinite(best_d2[i]) and claim_owner[best[i]] == i]
    obs_idx = np.array(obs_idx, dtype=np.int64)
    return (obs_idx, best[obs_idx] if obs_idx.size else np.empty(0, dtype=np.int64))


def rigid_align(src_xy: np.ndarray, dst_xy: np.ndarray):
    """Closed-form 2D rigid transform minimizing sum ||R src + t - dst||^2.

    Returns ``(tx, ty, theta, rms)``.
    """
    k = src_xy.shape[0]
    src_c = src_xy.mean(axis=0)
    dst_c = dst_xy.mean(axis=0)
    a = src_xy - src_c
    b = dst_xy - dst_c
    s_dot = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    s_cross = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    theta = math.atan2(s_cross, s_dot) if k >= 2 else 0.0
    c, s = math.cos(theta), math.sin(theta)
    tx = dst_c[0] - (c * src_c[0] - s * src_c[1])
    ty = dst_c[1] - (s * src_c[0] + c * src_c[1])
    rx = c * src_xy[:, 0] - s * src_xy[:, 1] + tx - dst_xy[:, 0]
    ry = s * src_xy[:, 0] + c * src_xy[:, 1] + ty - dst_xy[:, 1]
    rms = math.sqrt(float(np.mean(rx * rx + ry * ry)))
    return (tx, ty, theta, rms)


def dr_propagate_batch(pose0: np.ndarray, vs: np.ndarray, oms: np.ndarray, dts: np.ndarray):
    """Sequentially integrate a batch of (v, omega, dt) motion steps."""
    n = vs.shape[0]
    out = np.empty((n, 3))
    x, y, th = pose0[0], pose0[1], pose0[2]
    for i in range(n):
        x, y, th = propagate_mean(x, y, th, vs[i], oms[i], dts[i])
        out[i, 0] = x
        out[i, 1] = y
        out[i, 2] = th
    return out
