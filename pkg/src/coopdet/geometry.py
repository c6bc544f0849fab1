"""Planar pose algebra, oriented boxes and BEV rotated IoU."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    if not math.isfinite(a):
        raise GeometryError(f"cannot wrap non-finite angle {a!r}")
    r = math.remainder(a, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


def wrap_angles(a: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_angle`."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise GeometryError("cannot wrap non-finite angles")
    r = np.remainder(a + math.pi, TWO_PI) - math.pi
    r = np.where(r <= -math.pi, r + TWO_PI, r)
    return r


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self) -> None:
        vals = (self.x, self.y, self.z, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"pose has non-finite component: {vals}")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def inverse(self) -> "Pose":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.z, -self.yaw)

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self * other`` (apply ``other`` first, then ``self``)."""
        x, y, z = transform_point(self, (other.x, other.y, other.z))
        return Pose(x, y, z, self.yaw + other.yaw)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.yaw])

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Pose":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class BBox:
    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self) -> None:
        center = tuple(float(v) for v in self.center)
        dims = tuple(float(v) for v in self.dims)
        if len(center) != 3 or len(dims) != 3:
            raise GeometryError("center and dims must have three components")
        if not all(math.isfinite(v) for v in center + dims):
            raise GeometryError("box has non-finite component")
        if min(dims) <= 0.0:
            raise GeometryError(f"box dims must be positive, got {dims}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def pose(self) -> Pose:
        return Pose(self.center[0], self.center[1], self.center[2], self.yaw)

    def to_list(self) -> list[float]:
        return [*self.center, *self.dims, self.yaw]

    @classmethod
    def from_list(cls, v: Sequence[float]) -> "BBox":
        return cls(tuple(v[0:3]), tuple(v[3:6]), float(v[6]))


def interpolate_pose(p0: Pose, p1: Pose, alpha: float) -> Pose:
    """Linear translation, shortest-path yaw.

    Exactly antipodal yaws (difference of pi) rotate in the positive direction.
    """
    if not 0.0 <= alpha <= 1.0:
        raise GeometryError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return p0
    if alpha == 1.0:
        return p1
    dyaw = wrap_angle(p1.yaw - p0.yaw)
    return Pose(
        p0.x + alpha * (p1.x - p0.x),
        p0.y + alpha * (p1.y - p0.y),
        p0.z + alpha * (p1.z - p0.z),
        p0.yaw + alpha * dyaw,
    )


def transform_point(pose: Pose, pt: Sequence[float]) -> tuple[float, float, float]:
    """Rotate ``pt`` by the pose yaw about z, then translate."""
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    x, y, z = float(pt[0]), float(pt[1]), float(pt[2])
    return (c * x - s * y + pose.x, s * x + c * y + pose.y, z + pose.z)


def transform_points(pose: Pose, pts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`transform_point` for an (n, 2) or (n, 3) array."""
    pts = np.asarray(pts, dtype=float)
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    out = np.empty_like(pts)
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + pose.x
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + pose.y
    if pts.shape[1] > 2:
        out[:, 2] = pts[:, 2] + pose.z
    return out


def bbox_corners_bev(b: BBox) -> np.ndarray:
    """Four BEV corners in counterclockwise order, shape (4, 2)."""
    hl, hw = 0.5 * b.dims[0], 0.5 * b.dims[1]
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array(b.center[:2])


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area; positive for counterclockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by a CCW convex polygon."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        prev = inp[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inp:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    out.append(_edge_cross(prev, cur, prev_side, cur_side))
                out.append(cur)
            elif prev_side >= 0.0:
                out.append(_edge_cross(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return np.array(out, dtype=float).reshape(-1, 2)


def _edge_cross(p, q, sp: float, sq: float) -> tuple[float, float]:
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rotated_iou_bev(a: BBox, b: BBox) -> float:
    """BEV IoU of two oriented boxes via convex polygon intersection."""
    area_a = a.dims[0] * a.dims[1]
    area_b = b.dims[0] * b.dims[1]
    if area_a <= 0.0 or area_b <= 0.0:
        raise GeometryError("degenerate box footprint")
    ca, cb = bbox_corners_bev(a), bbox_corners_bev(b)
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.dims[0], a.dims[1])
    rb = 0.5 * math.hypot(b.dims[0], b.dims[1])
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) >= ra + rb:
        return 0.0
    inter = clip_convex(ca, cb)
    inter_area = max(polygon_area(inter), 0.0)
    union = area_a + area_b - inter_area
    iou = inter_area / union
    return min(max(iou, 0.0), 1.0)


def interpolate_bbox(b0: BBox, b1: BBox, alpha: float) -> BBox:
    pose = interpolate_pose(b0.pose, b1.pose, alpha)
    dims = tuple(d0 + alpha * (d1 - d0) for d0, d1 in zip(b0.dims, b1.dims))
    return BBox((pose.x, pose.y, pose.z), dims, pose.yaw)


def points_in_bbox_bev(b: BBox, xy: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of BEV points inside the (optionally enlarged) footprint."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    dx = xy[:, 0] - b.center[0]
    dy = xy[:, 1] - b.center[1]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= 0.5 * b.dims[0] + margin) & (np.abs(v) <= 0.5 * b.dims[1] + margin)
