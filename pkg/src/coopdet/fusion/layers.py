"""Parametric building blocks composed from tape ops.

All blocks take ``P``, a mapping from parameter name to :class:`Tensor`, so
the same code serves inference (constant tensors) and training.
"""

from __future__ import annotations

import math

import numpy as np

from ..geometry import Pose
from .tensor import Tensor, add, attention, layer_norm, linear, mul, tanh

POS_SCALE = 50.0
TIME_SCALE = 0.1
SPEED_SCALE = 20.0
# wavelengths (m) of the sinusoidal position code fed to the position MLP
POS_WAVELENGTHS = (3.2, 6.4, 12.8, 25.6, 51.2, 102.4)
POS_CODE_DIM = 2 + 4 * len(POS_WAVELENGTHS)


def dense(P, prefix: str, x) -> Tensor:
    return linear(x, P[f"{prefix}.W"], P.get(f"{prefix}.b"))


def mlp(P, prefix: str, x) -> Tensor:
    """Two-layer perceptron with a tanh hidden layer."""
    return dense(P, f"{prefix}.1", tanh(dense(P, f"{prefix}.0", x)))


def mln(P, prefix: str, x, m) -> Tensor:
    """Motion-aware layer norm: ``(1 + W_g m) * LN(x) + W_b m``."""
    gamma = add(linear(m, P[f"{prefix}.gamma.W"]), 1.0)
    beta = linear(m, P[f"{prefix}.beta.W"])
    return add(mul(gamma, layer_norm(x)), beta)


def motion_vector(tau: np.ndarray, poses_rel: np.ndarray, vel_rel: np.ndarray,
                  t_ref: float) -> np.ndarray:
    """Rows of ``[dt, x, y, cos yaw, sin yaw, vx, vy]`` (scaled) per query.

    ``poses_rel`` (n, 4) and ``vel_rel`` (n, 2) are expressed in the frame of
    the agent the alignment targets.
    """
    tau = np.asarray(tau, dtype=float).reshape(-1)
    out = np.empty((tau.size, 7))
    out[:, 0] = (t_ref - tau) / TIME_SCALE
    out[:, 1] = poses_rel[:, 0] / POS_SCALE
    out[:, 2] = poses_rel[:, 1] / POS_SCALE
    out[:, 3] = np.cos(poses_rel[:, 3])
    out[:, 4] = np.sin(poses_rel[:, 3])
    out[:, 5] = vel_rel[:, 0] / SPEED_SCALE
    out[:, 6] = vel_rel[:, 1] / SPEED_SCALE
    return out


def motion_embed(P, tau, poses_rel, vel_rel, t_ref: float) -> Tensor:
    """Embedding of query time offset, agent pose and agent velocity."""
    return mlp(P, "motion_mlp", motion_vector(tau, poses_rel, vel_rel, t_ref))


def time_embed(P, tau, t_ref: float) -> Tensor:
    dt = (t_ref - np.asarray(tau, dtype=float).reshape(-1, 1)) / TIME_SCALE
    return mlp(P, "time_mlp", dt)


def relative_xy(ref: Pose, xy: np.ndarray) -> np.ndarray:
    """World (n, 2) points expressed in ``ref``'s frame."""
    c, s = math.cos(ref.yaw), math.sin(ref.yaw)
    dx = xy[:, 0] - ref.x
    dy = xy[:, 1] - ref.y
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=1)


def relative_poses(ref: Pose, poses: np.ndarray) -> np.ndarray:
    out = np.empty((len(poses), 4))
    out[:, :2] = relative_xy(ref, poses[:, :2])
    out[:, 2] = poses[:, 2] - ref.z
    out[:, 3] = np.remainder(poses[:, 3] - ref.yaw + math.pi, 2 * math.pi) - math.pi
    return out


def rotate_to(ref: Pose, v: np.ndarray) -> np.ndarray:
    c, s = math.cos(ref.yaw), math.sin(ref.yaw)
    return np.stack([c * v[:, 0] + s * v[:, 1], -s * v[:, 0] + c * v[:, 1]], axis=1)


def pos_code(xy: np.ndarray) -> np.ndarray:
    """Scaled coordinates plus sin/cos of each at several wavelengths."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    parts = [xy / POS_SCALE]
    for lam in POS_WAVELENGTHS:
        w = 2.0 * math.pi / lam
        parts += [np.sin(w * xy), np.cos(w * xy)]
    return np.concatenate(parts, axis=1)


def pos_embed(P, ref: Pose, xy_world: np.ndarray) -> Tensor:
    return mlp(P, "pos_mlp", pos_code(relative_xy(ref, xy_world)))


def attention_block(P, prefix: str, q, k, v) -> Tensor:
    """Single-head attention with input and output projections."""
    Q = dense(P, f"{prefix}.q", q)
    K = dense(P, f"{prefix}.k", k)
    V = dense(P, f"{prefix}.v", v)
    return dense(P, f"{prefix}.o", attention(Q, K, V))


def head(P, prefix: str, x) -> tuple[Tensor, Tensor]:
    """Center-based head: per-row confidence logit and 8-d box encoding."""
    h = tanh(dense(P, f"{prefix}.hidden", x))
    return dense(P, f"{prefix}.cls", h), dense(P, f"{prefix}.reg", h)
