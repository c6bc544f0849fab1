"""Scalar reference losses, box encoding and detection-target assignment."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..geometry import BBox, Pose
from ..scene_sim import ObjectTrack, object_poses_at
from .layers import relative_xy


class LossError(ValueError):
    pass


def focal_loss(p: float, y: int, alpha: float = 0.25, gamma: float = 2.0) -> float:
    if not 0.0 < p < 1.0:
        raise LossError(f"probability must lie in (0, 1), got {p}")
    if y == 1:
        return -alpha * (1.0 - p) ** gamma * math.log(p)
    return -(1.0 - alpha) * p ** gamma * math.log(1.0 - p)


def smooth_l1(x: float, beta: float = 1.0) -> float:
    if not beta > 0:
        raise LossError(f"beta must be > 0, got {beta}")
    a = abs(x)
    return 0.5 * x * x / beta if a < beta else a - 0.5 * beta


# Box encoding relative to an anchor and a reference yaw:
# (dx, dy, z, log l, log w, log h, sin dyaw, cos dyaw); dx, dy in the
# reference frame.

def encode_boxes(anchors_xy: np.ndarray, ref: Pose, boxes: np.ndarray) -> np.ndarray:
    """``boxes`` rows are (x, y, z, l, w, h, yaw) in world frame."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 7)
    out = np.empty((len(boxes), 8))
    delta = relative_xy(Pose(0.0, 0.0, 0.0, ref.yaw), boxes[:, :2] - anchors_xy)
    out[:, 0:2] = delta
    out[:, 2] = boxes[:, 2]
    out[:, 3:6] = np.log(boxes[:, 3:6])
    dyaw = boxes[:, 6] - ref.yaw
    out[:, 6] = np.sin(dyaw)
    out[:, 7] = np.cos(dyaw)
    return out


def decode_boxes(anchors_xy: np.ndarray, ref: Pose, enc: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; returns (n, 7) world boxes."""
    enc = np.asarray(enc, dtype=float).reshape(-1, 8)
    c, s = math.cos(ref.yaw), math.sin(ref.yaw)
    out = np.empty((len(enc), 7))
    out[:, 0] = anchors_xy[:, 0] + c * enc[:, 0] - s * enc[:, 1]
    out[:, 1] = anchors_xy[:, 1] + s * enc[:, 0] + c * enc[:, 1]
    out[:, 2] = enc[:, 2]
    out[:, 3:6] = np.exp(np.clip(enc[:, 3:6], -10.0, 10.0))
    yaw = np.arctan2(enc[:, 6], enc[:, 7]) + ref.yaw
    out[:, 6] = np.remainder(yaw + math.pi, 2 * math.pi) - math.pi
    return out


def assign_objects(xy: np.ndarray, obs_time: np.ndarray, objects: Sequence[ObjectTrack],
                   margin: float) -> np.ndarray:
    """Object index observed at each anchor, or -1.

    An anchor is assigned to an object when it lies inside that object's
    footprint (enlarged by ``margin``) at the anchor's own observation time.
    Overlaps go to the object with the nearest center.
    """
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    obs_time = np.asarray(obs_time, dtype=float).reshape(-1)
    best = np.full(len(xy), -1)
    best_d = np.full(len(xy), np.inf)
    for k, track in enumerate(objects):
        t = np.clip(obs_time, track.t_first, track.t_last)
        poses = object_poses_at(track, t)
        c, s = np.cos(poses[:, 3]), np.sin(poses[:, 3])
        dx = xy[:, 0] - poses[:, 0]
        dy = xy[:, 1] - poses[:, 1]
        u = c * dx + s * dy
        v = -s * dx + c * dy
        inside = (np.abs(u) <= 0.5 * track.dims[0] + margin) & (np.abs(v) <= 0.5 * track.dims[1] + margin)
        d = np.hypot(dx, dy)
        take = inside & (d < best_d)
        best = np.where(take, k, best)
        best_d = np.where(take, d, best_d)
    return best


def box_array(b: BBox) -> np.ndarray:
    return np.array([*b.center, *b.dims, b.yaw])
