"""Pillar-statistics BEV grids, coordinate dilation, top-K RoI selection and
per-query observation timestamps.

This is a fixed, parameter-free stand-in for a sparse-convolution backbone.
Raw cell features are::

    [normalized count, mean offset x, mean offset y, mean z, mean (t - t_ref)]
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import DEFAULT_X_RANGE, DEFAULT_Y_RANGE
from .scene_sim import PointCloud

FEATURE_NAMES = ("count", "offset_x", "offset_y", "mean_z", "mean_dt")
NUM_FEATURES = len(FEATURE_NAMES)
COUNT_NORM = 10.0

DEFAULT_K_ROI_LOCAL = 1024
DEFAULT_K_ROI_GLOBAL = 512


class FeaturizerError(ValueError):
    pass


@dataclass
class SparseBEVGrid:
    """Sparse cell -> feature map in the capturing agent's sensor frame.

    ``coords`` is an (n, 2) integer array of unique cells kept in
    lexicographic (i, j) order; ``feats`` is the matching (n, F) array.
    """

    resolution: float
    origin: tuple[float, float]
    coords: np.ndarray
    feats: np.ndarray
    agent_id: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.resolution > 0:
            raise FeaturizerError("grid resolution must be > 0")
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        feats = np.asarray(self.feats, dtype=float)
        self.feats = feats.reshape(len(self.coords), feats.shape[-1] if feats.ndim == 2 else -1)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def cells(self) -> dict[tuple[int, int], np.ndarray]:
        return {(int(i), int(j)): f for (i, j), f in zip(self.coords, self.feats)}

    def centers(self) -> np.ndarray:
        """Sensor-frame (x, y) of cell centers."""
        return np.asarray(self.origin) + (self.coords + 0.5) * self.resolution


def _sorted_unique(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique rows in lexicographic order plus the inverse index."""
    if len(coords) == 0:
        return coords.reshape(0, 2), np.zeros(0, dtype=np.int64)
    uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1)


def voxelize(cloud: PointCloud, resolution: float, t_ref: float,
             x_range: tuple[float, float] = DEFAULT_X_RANGE,
             y_range: tuple[float, float] = DEFAULT_Y_RANGE) -> SparseBEVGrid:
    if not resolution > 0:
        raise FeaturizerError(f"resolution must be > 0, got {resolution}")
    origin = (float(x_range[0]), float(y_range[0]))
    pts = cloud.points
    inside = ((pts[:, 0] >= x_range[0]) & (pts[:, 0] < x_range[1])
              & (pts[:, 1] >= y_range[0]) & (pts[:, 1] < y_range[1]))
    pts = pts[inside]
    if len(pts) == 0:
        return SparseBEVGrid(resolution, origin, np.zeros((0, 2)), np.zeros((0, NUM_FEATURES)),
                             cloud.agent_id)
    ij = np.floor((pts[:, :2] - np.asarray(origin)) / resolution).astype(np.int64)
    coords, inv = _sorted_unique(ij)
    n = len(coords)
    count = np.bincount(inv, minlength=n).astype(float)
    centers = np.asarray(origin) + (coords + 0.5) * resolution

    def mean(v: np.ndarray) -> np.ndarray:
        return np.bincount(inv, weights=v, minlength=n) / count

    feats = np.empty((n, NUM_FEATURES))
    feats[:, 0] = count / COUNT_NORM
    feats[:, 1] = mean(pts[:, 0]) - centers[:, 0]
    feats[:, 2] = mean(pts[:, 1]) - centers[:, 1]
    feats[:, 3] = mean(pts[:, 2])
    feats[:, 4] = mean(pts[:, 3] - t_ref)
    return SparseBEVGrid(resolution, origin, coords, feats, cloud.agent_id)


def downsample_grid(g: SparseBEVGrid, factor: int) -> SparseBEVGrid:
    if not (isinstance(factor, (int, np.integer)) and factor >= 1):
        raise FeaturizerError(f"factor must be an integer >= 1, got {factor}")
    if factor == 1 or len(g) == 0:
        return SparseBEVGrid(g.resolution * factor, g.origin, g.coords.copy(), g.feats.copy(),
                             g.agent_id)
    coarse = np.floor_divide(g.coords, factor)
    coords, inv = _sorted_unique(coarse)
    n = len(coords)
    count = np.bincount(inv, minlength=n).astype(float)
    feats = np.zeros((n, g.feats.shape[1]))
    np.add.at(feats, inv, g.feats)
    feats /= count[:, None]
    return SparseBEVGrid(g.resolution * factor, g.origin, coords, feats, g.agent_id)


_NEIGHBORHOOD = np.array([(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)], dtype=np.int64)


def dilate_grid(g: SparseBEVGrid, layers: int = 3) -> SparseBEVGrid:
    """Grow the occupied set by one 3x3 ring per layer; new cells get zeros."""
    if layers < 0:
        raise FeaturizerError("layers must be >= 0")
    coords = g.coords
    for _ in range(layers):
        if len(coords) == 0:
            break
        coords = np.unique((coords[:, None, :] + _NEIGHBORHOOD[None]).reshape(-1, 2), axis=0)
    if layers == 0 or len(g) == 0:
        return SparseBEVGrid(g.resolution, g.origin, g.coords.copy(), g.feats.copy(), g.agent_id)
    feats = np.zeros((len(coords), g.feats.shape[1]))
    # both coordinate arrays are lexicographically sorted
    idx = _lookup(coords, g.coords)
    feats[idx] = g.feats
    return SparseBEVGrid(g.resolution, g.origin, coords, feats, g.agent_id)


def _lookup(table: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Row indices of ``keys`` inside the sorted unique ``table`` (all present)."""
    shift = int(max(np.abs(table).max(), np.abs(keys).max(), 1)) + 1
    t = table[:, 0] * (2 * shift + 1) + table[:, 1]
    k = keys[:, 0] * (2 * shift + 1) + keys[:, 1]
    return np.searchsorted(t, k)


def score_topk(coords: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best candidates, best first.

    Ties are broken by ascending (i, j) cell coordinate, so the result does not
    depend on candidate order.
    """
    if not (isinstance(k, (int, np.integer)) and k >= 1):
        raise FeaturizerError(f"k must be an integer >= 1, got {k}")
    coords = np.asarray(coords).reshape(-1, 2)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if len(scores) != len(coords):
        raise FeaturizerError("scores and coords differ in length")
    order = np.lexsort((coords[:, 1], coords[:, 0], -scores))
    return order[:k]


def gt_scorer(centers_world: np.ndarray, boxes) -> np.ndarray:
    """Oracle RoI scores: 1 inside any box footprint, else 0."""
    from .geometry import points_in_bbox_bev

    s = np.zeros(len(centers_world))
    for b in boxes:
        s[points_in_bbox_bev(b, centers_world)] = 1.0
    return s


@dataclass
class RoIPoint:
    position: tuple[float, float]
    feature: np.ndarray
    score: float
    tau: float


def _circular_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.abs(a - b) % (2.0 * math.pi)
    return np.minimum(d, 2.0 * math.pi - d)


def assign_query_timestamp(query_xy, cloud: PointCloud, wrap: bool = True) -> float:
    """Timestamp of the point whose azimuth is closest to the query's."""
    return float(query_timestamps(np.asarray(query_xy, dtype=float).reshape(1, 2), cloud,
                                  wrap=wrap)[0])


def brute_force_timestamps(queries_xy: np.ndarray, cloud: PointCloud, wrap: bool = True) -> np.ndarray:
    """Exhaustive scan over all points; reference for :func:`query_timestamps`."""
    if len(cloud) == 0:
        raise FeaturizerError("cannot assign timestamps from an empty cloud")
    qa = np.arctan2(queries_xy[:, 1], queries_xy[:, 0])
    pa = np.arctan2(cloud.points[:, 1], cloud.points[:, 0])
    out = np.empty(len(qa))
    for n, a in enumerate(qa):
        d = _circular_distance(a, pa) if wrap else np.abs(a - pa)
        out[n] = cloud.points[int(np.argmin(d)), 3]  # argmin keeps the first minimum
    return out


def query_timestamps(queries_xy: np.ndarray, cloud: PointCloud, wrap: bool = True) -> np.ndarray:
    """Vectorized nearest-azimuth timestamp lookup.

    With ``wrap`` the angular distance is measured on the circle; otherwise the
    plain difference of the two ``atan2`` values is used.  Exact ties go to the
    point with the smaller index.
    """
    if len(cloud) == 0:
        raise FeaturizerError("cannot assign timestamps from an empty cloud")
    queries_xy = np.asarray(queries_xy, dtype=float).reshape(-1, 2)
    qa = np.arctan2(queries_xy[:, 1], queries_xy[:, 0])
    pa = np.arctan2(cloud.points[:, 1], cloud.points[:, 0])
    # collapse duplicate azimuths onto their smallest index
    order = np.lexsort((np.arange(len(pa)), pa))
    sa = pa[order]
    first = np.ones(len(sa), dtype=bool)
    first[1:] = sa[1:] != sa[:-1]
    ua, uidx = sa[first], order[first]
    m = len(ua)
    pos = np.searchsorted(ua, qa)
    if wrap:
        cand = np.stack([(pos - 1) % m, pos % m], axis=1)
        dist = _circular_distance(qa[:, None], ua[cand])
    else:
        cand = np.stack([np.clip(pos - 1, 0, m - 1), np.clip(pos, 0, m - 1)], axis=1)
        dist = np.abs(qa[:, None] - ua[cand])
    pidx = uidx[cand]
    pick_second = (dist[:, 1] < dist[:, 0]) | ((dist[:, 1] == dist[:, 0]) & (pidx[:, 1] < pidx[:, 0]))
    chosen = np.where(pick_second, pidx[:, 1], pidx[:, 0])
    return cloud.points[chosen, 3]


# ---------------------------------------------------------------------------
# per-agent candidate bundles consumed by the fusion model


@dataclass
class LevelCandidates:
    """Dilated cells of one resolution level with everything the model reads.

    Column 4 of ``feats`` holds the absolute mean point time of occupied cells
    (made relative to the alignment time when the model consumes it).
    """

    coords: np.ndarray
    centers_sensor: np.ndarray
    centers_world: np.ndarray
    feats: np.ndarray
    occupied: np.ndarray
    tau: np.ndarray
    obs_time: np.ndarray

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class AgentFeatures:
    agent_id: int
    state: "AgentState"
    tick_start: float
    tick_end: float
    local: LevelCandidates
    global_: LevelCandidates
    num_points: int


def _level(grid: SparseBEVGrid, dilated: SparseBEVGrid, cloud_model: PointCloud,
           cloud_true: PointCloud, pose, wrap: bool) -> LevelCandidates:
    from .geometry import transform_points

    centers = dilated.centers()
    occupied = np.zeros(len(dilated), dtype=bool)
    if len(grid):
        occupied[_lookup(dilated.coords, grid.coords)] = True
    if len(centers) and len(cloud_model):
        tau = query_timestamps(centers, cloud_model, wrap=wrap)
        obs = query_timestamps(centers, cloud_true, wrap=True)
    else:
        tau = obs = np.zeros(len(centers))
    world = transform_points(pose, centers) if len(centers) else np.zeros((0, 2))
    return LevelCandidates(dilated.coords, centers, world, dilated.feats, occupied, tau, obs)


def featurize_agent(cloud: PointCloud, state, *, local_resolution: float = 0.8,
                    global_factor: int = 4, dilation_layers: int = 3,
                    timestamp_mode: str = "pointwise", eq1_wrap: bool = True,
                    frame_time: Optional[float] = None,
                    x_range: tuple[float, float] = DEFAULT_X_RANGE,
                    y_range: tuple[float, float] = DEFAULT_Y_RANGE) -> AgentFeatures:
    """Voxelize, downsample and dilate one agent's scan into RoI candidates.

    In ``framewise`` mode every point time is replaced by one stamp per frame,
    ``frame_time`` (shared by all agents of the frame) or the scan end when it
    is not given, so neither cell features nor query timestamps see sub-scan
    timing.  True observation times are kept separately for supervision.
    """
    if timestamp_mode == "framewise":
        pts = cloud.points.copy()
        pts[:, 3] = cloud.tick_end if frame_time is None else float(frame_time)
        model_cloud = PointCloud(cloud.agent_id, pts, cloud.tick_start, cloud.tick_end)
    elif timestamp_mode == "pointwise":
        model_cloud = cloud
    else:
        raise FeaturizerError(f"unknown timestamp mode {timestamp_mode!r}")
    local = voxelize(model_cloud, local_resolution, 0.0, x_range, y_range)
    glob = downsample_grid(local, global_factor)
    levels = []
    for g in (local, glob):
        levels.append(_level(g, dilate_grid(g, dilation_layers), model_cloud, cloud,
                             state.pose, eq1_wrap))
    return AgentFeatures(cloud.agent_id, state, cloud.tick_start, cloud.tick_end, levels[0],
                         levels[1], len(cloud))
