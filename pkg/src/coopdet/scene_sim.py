"""Continuous-time multi-agent scenes and rolling-shutter LiDAR scans.

Every point carries its absolute emission time.  A scan starts at sensor
azimuth -pi at the agent's tick and sweeps counterclockwise through a full
turn in ``1/f`` seconds; each ray is intersected with the world as it is at
that ray's own emission time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from .config import ScenarioConfig
from .geometry import BBox, Pose, interpolate_pose, transform_points, wrap_angles

SUBFRAME_DT = 0.01
SUBFRAMES_PER_SCAN = 10


class SimulationError(ValueError):
    pass


def rng_for(*key: int) -> np.random.Generator:
    """Counter-based generator keyed by integers; independent of call order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class AgentState:
    id: int
    pose: Pose
    velocity: tuple[float, float]
    tick_offset: float
    frequency: float = 10.0
    time: float = 0.0  # time at which ``pose`` holds

    def __post_init__(self) -> None:
        if not self.frequency > 0:
            raise SimulationError("agent frequency must be > 0")
        if not 0.0 <= self.tick_offset < 1.0 / self.frequency:
            raise SimulationError(f"tick offset {self.tick_offset} outside [0, 1/f)")

    def pose_at(self, t: float) -> Pose:
        dt = t - self.time
        return Pose(self.pose.x + self.velocity[0] * dt, self.pose.y + self.velocity[1] * dt,
                    self.pose.z, self.pose.yaw)

    def at(self, t: float) -> "AgentState":
        return replace(self, pose=self.pose_at(t), time=float(t))

    def tick_start(self, j: int) -> float:
        return self.tick_offset + j / self.frequency

    def poses_at(self, t: np.ndarray) -> np.ndarray:
        dt = np.asarray(t, dtype=float) - self.time
        out = np.empty((dt.size, 4))
        out[:, 0] = self.pose.x + self.velocity[0] * dt
        out[:, 1] = self.pose.y + self.velocity[1] * dt
        out[:, 2] = self.pose.z
        out[:, 3] = self.pose.yaw
        return out


@dataclass(frozen=True)
class ObjectTrack:
    id: int
    dims: tuple[float, float, float]
    waypoints: tuple[tuple[float, Pose], ...]

    def __post_init__(self) -> None:
        if len(self.waypoints) < 2:
            raise SimulationError("a track needs at least two waypoints")
        times = [w[0] for w in self.waypoints]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise SimulationError("waypoint times must be strictly increasing")

    @property
    def t_first(self) -> float:
        return self.waypoints[0][0]

    @property
    def t_last(self) -> float:
        return self.waypoints[-1][0]

    def speed_at(self, t: float) -> float:
        i = _segment_index(self, t)
        (ta, pa), (tb, pb) = self.waypoints[i], self.waypoints[i + 1]
        return math.hypot(pb.x - pa.x, pb.y - pa.y) / (tb - ta)

    def velocity_at(self, t: float) -> tuple[float, float]:
        i = _segment_index(self, t)
        (ta, pa), (tb, pb) = self.waypoints[i], self.waypoints[i + 1]
        return ((pb.x - pa.x) / (tb - ta), (pb.y - pa.y) / (tb - ta))


def _segment_index(track: ObjectTrack, t: float) -> int:
    if not track.t_first <= t <= track.t_last:
        raise SimulationError(f"t={t} outside track {track.id} span [{track.t_first}, {track.t_last}]")
    times = [w[0] for w in track.waypoints]
    i = int(np.searchsorted(times, t, side="right")) - 1
    return min(max(i, 0), len(times) - 2)


def object_pose_at(track: ObjectTrack, t: float) -> Pose:
    i = _segment_index(track, t)
    (ta, pa), (tb, pb) = track.waypoints[i], track.waypoints[i + 1]
    if t == ta:
        return pa
    if t == tb:
        return pb
    return interpolate_pose(pa, pb, (t - ta) / (tb - ta))


def object_poses_at(track: ObjectTrack, t: np.ndarray) -> np.ndarray:
    """Vectorized :func:`object_pose_at`; returns (n, 4) rows of x, y, z, yaw."""
    t = np.asarray(t, dtype=float)
    if t.size and (t.min() < track.t_first or t.max() > track.t_last):
        raise SimulationError(f"times outside track {track.id} span")
    times = np.array([w[0] for w in track.waypoints])
    poses = np.array([w[1].as_array() for w in track.waypoints])
    i = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2)
    alpha = (t - times[i]) / (times[i + 1] - times[i])
    p0, p1 = poses[i], poses[i + 1]
    out = p0 + alpha[:, None] * (p1 - p0)
    dyaw = wrap_angles(p1[:, 3] - p0[:, 3])
    out[:, 3] = wrap_angles(p0[:, 3] + alpha * dyaw)
    return out


@dataclass(frozen=True)
class SensorModel:
    angular_resolution_deg: float = 0.2
    max_range: float = 40.0
    clutter_density: float = 0.0
    sensor_height: float = 1.8

    @property
    def num_rays(self) -> int:
        return int(round(360.0 / self.angular_resolution_deg))


@dataclass(frozen=True)
class Scene:
    agents: tuple[AgentState, ...]
    objects: tuple[ObjectTrack, ...]
    duration: float
    ego_id: int
    seed: int
    frequency: float = 10.0
    sensor: SensorModel = field(default_factory=SensorModel)
    x_range: tuple[float, float] = (-140.8, 140.8)
    y_range: tuple[float, float] = (-38.4, 38.4)

    def __post_init__(self) -> None:
        ids = [a.id for a in self.agents]
        if self.ego_id not in ids:
            raise SimulationError(f"ego id {self.ego_id} not among agents {ids}")

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.frequency))

    @property
    def horizon(self) -> float:
        """Last instant covered by tracks: one scan beyond ``duration``."""
        return self.duration + 1.0 / self.frequency

    def agent(self, agent_id: int) -> AgentState:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise SimulationError(f"unknown agent {agent_id}")

    @property
    def ego(self) -> AgentState:
        return self.agent(self.ego_id)


@dataclass
class PointCloud:
    """Points as an (n, 4) array of sensor-frame x, y, z and absolute t."""

    agent_id: int
    points: np.ndarray
    tick_start: float
    tick_end: float

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 4)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def t(self) -> np.ndarray:
        return self.points[:, 3]

    def timed_points(self) -> Iterator[tuple[float, float, float, float]]:
        for row in self.points:
            yield tuple(float(v) for v in row)


@dataclass
class Frame:
    index: int
    clouds: dict[int, PointCloud]
    states: dict[int, AgentState]  # pose reported at each agent's own tick start
    t_aligned: float
    ego_id: int

    @property
    def agent_ids(self) -> list[int]:
        return sorted(self.clouds)


# ---------------------------------------------------------------------------
# scene construction


def build_scene(config: ScenarioConfig, seed: Optional[int] = None) -> Scene:
    """Deterministic synthetic straight-road scene."""
    config.validate()
    seed = config.seed if seed is None else int(seed)
    f = float(config.frequency)
    period = 1.0 / f
    horizon = config.duration + period

    rng = rng_for(seed, 0)
    if config.tick_offsets == "random":
        offsets = [float(o) for o in rng.uniform(0.0, period, size=config.num_agents)]
    elif config.tick_offsets == "subframe":
        drops = rng.integers(1, 6, size=config.num_agents)
        offsets = [float(d) * SUBFRAME_DT for d in drops]
    else:
        offsets = [float(o) for o in config.tick_offsets]
        rng.uniform(size=config.num_agents)  # keep the stream aligned across modes

    lo, hi = config.agent_speed_range
    agents = []
    for i in range(config.num_agents):
        speed = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        pose = Pose(i * config.agent_spacing, 0.0, config.sensor_height, 0.0)
        agents.append(AgentState(i, pose, (speed, 0.0), offsets[i], f, 0.0))

    lanes = list(config.lanes)
    lane_speed = {}
    olo, ohi = config.object_speed_range
    for lane in lanes:
        lane_speed[lane] = float(rng.uniform(olo, ohi)) if ohi > olo else float(olo)
    l, w, h = config.object_dims
    objects = []
    placed: dict[float, list[float]] = {lane: [] for lane in lanes}
    n_seg = max(1, int(math.ceil(horizon / config.segment_duration)))
    for k in range(config.num_objects):
        lane = lanes[k % len(lanes)]
        for _ in range(100):
            x0 = float(rng.uniform(*config.spawn_x_range))
            if all(abs(x0 - other) >= l + 3.0 for other in placed[lane]):
                break
        placed[lane].append(x0)
        speed = lane_speed[lane]
        yaw = 0.0
        t, x, y = 0.0, x0, lane
        waypoints = [(0.0, Pose(x, y, 0.5 * h, yaw))]
        for s in range(n_seg):
            t_next = min(horizon, (s + 1) * config.segment_duration)
            dt = t_next - t
            x += speed * math.cos(yaw) * dt
            y += speed * math.sin(yaw) * dt
            yaw += config.object_turn_rate * dt
            waypoints.append((t_next, Pose(x, y, 0.5 * h, yaw)))
            t = t_next
        objects.append(ObjectTrack(k, (l, w, h), tuple(waypoints)))

    sensor = SensorModel(config.angular_resolution_deg, config.max_range,
                         config.clutter_density, config.sensor_height)
    return Scene(tuple(agents), tuple(objects), float(config.duration), config.ego_id, seed,
                 f, sensor, tuple(config.x_range), tuple(config.y_range))


# ---------------------------------------------------------------------------
# ray casting


def _ray_box_hits(origin: np.ndarray, direction: np.ndarray, poses: np.ndarray,
                  dims: Sequence[float]) -> np.ndarray:
    """Entry distance of each ray into its (per-ray posed) rectangle; inf on miss."""
    c, s = np.cos(poses[:, 3]), np.sin(poses[:, 3])
    ox = origin[:, 0] - poses[:, 0]
    oy = origin[:, 1] - poses[:, 1]
    lox, loy = c * ox + s * oy, -s * ox + c * oy
    ldx = c * direction[:, 0] + s * direction[:, 1]
    ldy = -s * direction[:, 0] + c * direction[:, 1]
    hl, hw = 0.5 * dims[0], 0.5 * dims[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        tx1, tx2 = (-hl - lox) / ldx, (hl - lox) / ldx
        ty1, ty2 = (-hw - loy) / ldy, (hw - loy) / ldy
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par_x = ldx == 0.0
    par_y = ldy == 0.0
    in_x = np.abs(lox) <= hl
    in_y = np.abs(loy) <= hw
    tx_near = np.where(par_x, np.where(in_x, -np.inf, np.inf), np.minimum(tx1, tx2))
    tx_far = np.where(par_x, np.where(in_x, np.inf, -np.inf), np.maximum(tx1, tx2))
    ty_near = np.where(par_y, np.where(in_y, -np.inf, np.inf), np.minimum(ty1, ty2))
    ty_far = np.where(par_y, np.where(in_y, np.inf, -np.inf), np.maximum(ty1, ty2))
    t_near = np.maximum(tx_near, ty_near)
    t_far = np.minimum(tx_far, ty_far)
    hit = (t_near <= t_far) & (t_near > 0.0)
    return np.where(hit, t_near, np.inf)


def _cast(scene: Scene, agent: AgentState, azimuth: np.ndarray, t_emit: np.ndarray,
          t_geom: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Cast rays at sensor-frame ``azimuth``; geometry is evaluated at ``t_geom``.

    Returns (n, 4) sensor-frame points stamped with ``t_emit``.
    """
    n = azimuth.size
    sensor = agent.poses_at(t_geom)
    heading = sensor[:, 3] + azimuth
    direction = np.stack([np.cos(heading), np.sin(heading)], axis=1)
    best = np.full(n, np.inf)
    best_obj = np.full(n, -1)
    for k, track in enumerate(scene.objects):
        poses = object_poses_at(track, t_geom)
        r = _ray_box_hits(sensor[:, :2], direction, poses, track.dims)
        closer = r < best
        best = np.where(closer, r, best)
        best_obj = np.where(closer, k, best_obj)
    best = np.where(best <= scene.sensor.max_range, best, np.inf)
    best_obj = np.where(np.isfinite(best), best_obj, -1)

    # z sampled on the side face of the hit object
    u = rng.uniform(size=n)
    z_world = np.zeros(n)
    for k, track in enumerate(scene.objects):
        sel = best_obj == k
        if np.any(sel):
            zc = object_poses_at(track, t_geom[sel])[:, 2]
            z_world[sel] = zc + (u[sel] - 0.5) * track.dims[2]

    if scene.sensor.clutter_density > 0.0:
        clutter = (~np.isfinite(best)) & (rng.uniform(size=n) < scene.sensor.clutter_density)
        rng_c = rng.uniform(2.0, scene.sensor.max_range, size=n)
        zc = rng.uniform(0.0, 0.3, size=n)
        best = np.where(clutter, rng_c, best)
        z_world = np.where(clutter, zc, z_world)

    keep = np.isfinite(best)
    r = best[keep]
    pts = np.empty((int(keep.sum()), 4))
    pts[:, 0] = r * np.cos(azimuth[keep])
    pts[:, 1] = r * np.sin(azimuth[keep])
    pts[:, 2] = z_world[keep] - sensor[keep, 2]
    pts[:, 3] = t_emit[keep]
    return pts


def ray_schedule(scene: Scene, agent: AgentState, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Sensor-frame azimuths and emission times of the rays of scan ``j``."""
    n = scene.sensor.num_rays
    k = np.arange(n)
    azimuth = -math.pi + k * (2.0 * math.pi / n)
    t0 = agent.tick_start(j)
    t = t0 + (k / n) / agent.frequency
    return azimuth, t


def simulate_scan(scene: Scene, agent_id: int, j: int) -> PointCloud:
    """Rolling-shutter scan ``j`` of one agent."""
    agent = scene.agent(agent_id)
    if not (isinstance(j, (int, np.integer)) and 0 <= j < scene.num_frames):
        raise SimulationError(f"frame {j} outside [0, {scene.num_frames})")
    azimuth, t = ray_schedule(scene, agent, int(j))
    rng = rng_for(scene.seed, 1, agent_id, int(j))
    pts = _cast(scene, agent, azimuth, t, t, rng)
    t0 = agent.tick_start(int(j))
    return PointCloud(agent_id, pts, t0, t0 + 1.0 / agent.frequency)


def make_async_frame(scene: Scene, j: int) -> Frame:
    if not (isinstance(j, (int, np.integer)) and 0 <= j < scene.num_frames):
        raise SimulationError(f"frame {j} outside [0, {scene.num_frames})")
    j = int(j)
    clouds, states = {}, {}
    for a in scene.agents:
        clouds[a.id] = simulate_scan(scene, a.id, j)
        states[a.id] = a.at(a.tick_start(j))
    ego = scene.ego
    t_aligned = ego.tick_start(j) + 1.0 / ego.frequency
    return Frame(j, clouds, states, t_aligned, scene.ego_id)


def gt_boxes_at(scene: Scene, t: float) -> list[tuple[int, BBox]]:
    """World-frame boxes at ``t`` of objects inside the ego detection range."""
    if not 0.0 <= t <= scene.horizon:
        raise SimulationError(f"t={t} outside scene span [0, {scene.horizon}]")
    ego_inv = scene.ego.pose_at(t).inverse()
    out = []
    for track in scene.objects:
        p = object_pose_at(track, t)
        local = transform_points(ego_inv, np.array([[p.x, p.y]]))[0]
        if (scene.x_range[0] <= local[0] <= scene.x_range[1]
                and scene.y_range[0] <= local[1] <= scene.y_range[1]):
            out.append((track.id, BBox((p.x, p.y, p.z), track.dims, p.yaw)))
    return out


# ---------------------------------------------------------------------------
# sub-frame replay recipe


@dataclass
class SubFrame:
    agent_id: int
    t_start: float
    points: np.ndarray
    duration: float = SUBFRAME_DT


def simulate_subframes(scene: Scene, agent_id: int, count: int, drop_n: int) -> list[SubFrame]:
    """Replay ``count`` synchronized 0.01 s sub-frames starting at t=0.

    The sweep phase assumes scans begin after ``drop_n`` sub-frames.  Within
    a sub-frame, objects and sensor are frozen at the sub-frame start while
    points keep their per-ray emission times.
    """
    agent = scene.agent(agent_id)
    n = scene.sensor.num_rays
    phased = replace(agent, tick_offset=drop_n * SUBFRAME_DT)
    out = []
    for s in range(count):
        t_lo, t_hi = s * SUBFRAME_DT, (s + 1) * SUBFRAME_DT
        rel = (np.arange(n) / n) / agent.frequency
        # a sub-frame may straddle two scans of the (phased) sweep schedule
        times, azis = [], []
        for m in range(-1, int(t_hi * agent.frequency) + 2):
            t = phased.tick_offset + m / agent.frequency + rel
            sel = (t >= t_lo - 1e-12) & (t < t_hi - 1e-12)
            if np.any(sel):
                times.append(t[sel])
                azis.append(-math.pi + np.nonzero(sel)[0] * (2.0 * math.pi / n))
        if times:
            t_emit = np.concatenate(times)
            azimuth = np.concatenate(azis)
            order = np.argsort(t_emit, kind="stable")
            t_emit, azimuth = t_emit[order], azimuth[order]
            keep = t_emit >= 0.0
            t_emit, azimuth = t_emit[keep], azimuth[keep]
        else:
            t_emit = azimuth = np.zeros(0)
        rng = rng_for(scene.seed, 2, agent_id, s)
        pts = _cast(scene, agent, azimuth, t_emit, np.full(t_emit.size, t_lo), rng)
        out.append(SubFrame(agent_id, t_lo, pts))
    return out


def assemble_subframes(subframes: Sequence[SubFrame], drop_n: int) -> list[PointCloud]:
    """Drop the first ``drop_n`` sub-frames, then join every 10 into a scan."""
    if not (isinstance(drop_n, (int, np.integer)) and 1 <= drop_n <= 5):
        raise SimulationError(f"drop_n must lie in [1, 5], got {drop_n}")
    kept = list(subframes)[drop_n:]
    scans = []
    for g in range(len(kept) // SUBFRAMES_PER_SCAN):
        group = kept[g * SUBFRAMES_PER_SCAN:(g + 1) * SUBFRAMES_PER_SCAN]
        pts = np.concatenate([sf.points for sf in group]) if group else np.zeros((0, 4))
        start = group[0].t_start
        end = group[-1].t_start + group[-1].duration
        scans.append(PointCloud(group[0].agent_id, pts, start, end))
    return scans
