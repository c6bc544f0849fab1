"""Running the full pipeline over frame windows, its losses, and toy training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .config import ConfigError, ModelConfig, ScenarioConfig
from .evalkit import (VARIANTS, EvalError, EvalResult, center_errors, evaluate_frames,
                      inject_latency, nms_bev)
from .featurizer import AgentFeatures, featurize_agent
from .fusion.losses import assign_objects, encode_boxes
from .fusion.memory import MemoryQueue, QueryBatch
from .fusion.model import FusionOutput, LocalOutput, local_pass, spatial_fusion
from .fusion.params import ModelParams
from .fusion.tensor import Tensor, add, focal_loss_logits, mul, rows, smooth_l1_loss
from .geometry import Pose
from .scene_sim import (Frame, PointCloud, Scene, build_scene, gt_boxes_at, make_async_frame,
                        object_pose_at, object_poses_at, rng_for)

LOSS_KEYS = ("roi_cls", "roi_reg", "lq_cls", "lq_reg", "gq_cls", "gq_reg")


class TrainingError(RuntimeError):
    pass


def toy_scenario(**overrides) -> ScenarioConfig:
    return replace(ScenarioConfig(duration=1.0, num_agents=2, num_objects=6), **overrides)


def toy_model(**overrides) -> ModelConfig:
    return replace(ModelConfig(d=32, k_roi_local=64, k_roi_global=32, k_q=16, T=4), **overrides)


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_scenes: int = 1
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    timestamp_mode: str = "pointwise"
    latency_augmentation: str = "random"  # "off" or "random" (0..max_latency frames)
    max_latency: int = 2
    rotation_augmentation_deg: float = 0.0
    cls_weight: float = 1.0
    reg_weight: float = 1.0
    label_time: str = "aligned"  # or "observed"
    grad_all_agents: bool = False
    oracle_rois: bool = False
    train_scenes: int = 12
    eval_scenes: int = 4
    min_points: int = 3
    center_radius: float = 5.0
    scenario: ScenarioConfig = field(default_factory=toy_scenario)
    model: ModelConfig = field(default_factory=toy_model)

    def validate(self) -> "TrainConfig":
        p: dict[str, str] = {}
        if not (isinstance(self.steps, int) and self.steps >= 1):
            p["steps"] = "must be an integer >= 1"
        if not (isinstance(self.batch_scenes, int) and self.batch_scenes >= 1):
            p["batch_scenes"] = "must be an integer >= 1"
        if not (isinstance(self.lr, (int, float)) and self.lr >= 0):
            p["lr"] = "must be >= 0"
        if self.latency_augmentation not in ("off", "random"):
            p["latency_augmentation"] = "must be 'off' or 'random'"
        if self.label_time not in ("aligned", "observed"):
            p["label_time"] = "must be 'aligned' or 'observed'"
        if self.timestamp_mode not in ("pointwise", "framewise"):
            p["timestamp_mode"] = "must be 'pointwise' or 'framewise'"
        if not (isinstance(self.max_latency, int) and self.max_latency >= 0):
            p["max_latency"] = "must be an integer >= 0"
        if not (isinstance(self.train_scenes, int) and self.train_scenes >= 1):
            p["train_scenes"] = "must be an integer >= 1"
        if p:
            raise ConfigError(p)
        self.scenario.validate()
        self.model_config().validate()
        return self

    def model_config(self) -> ModelConfig:
        return replace(self.model, timestamp_mode=self.timestamp_mode)

    def train_seeds(self) -> list[int]:
        return [self.seed * 1000 + i for i in range(self.train_scenes)]

    def eval_seeds(self) -> list[int]:
        return [self.seed * 1000 + 500 + i for i in range(self.eval_scenes)]


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Training configuration of one ablation variant."""
    m = cfg.model
    if variant == "full":
        return cfg
    if variant == "no-temp-fusion":
        return replace(cfg, model=replace(m, temp_fusion=False, time_features=False))
    if variant == "framewise-timestamps":
        return replace(cfg, timestamp_mode="framewise")
    if variant == "no-latency-augmentation":
        return replace(cfg, latency_augmentation="off")
    if variant == "no-dilation":
        return replace(cfg, model=replace(m, dilation_layers=0))
    if variant == "no-roi-regression":
        return replace(cfg, model=replace(m, roi_regression=False))
    if variant == "no-global-attention":
        return replace(cfg, model=replace(m, global_attention=False))
    raise EvalError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


# ---------------------------------------------------------------------------
# scenes and per-agent inputs


@dataclass
class SceneData:
    scene: Scene
    frames: list[Frame]
    _cache: dict = field(default_factory=dict, repr=False)


def prepare_scenes(scenario: ScenarioConfig, seeds: Sequence[int]) -> list[SceneData]:
    out = []
    for s in seeds:
        scene = build_scene(scenario, seed=int(s))
        out.append(SceneData(scene, [make_async_frame(scene, j) for j in range(scene.num_frames)]))
    return out


def rotate_input(cloud: PointCloud, state, angle: float):
    """Rotate a scan about its sensor and counter-rotate the reported pose.

    World geometry is unchanged, but the link between a point's azimuth and
    its emission time is shifted by ``angle``.
    """
    if angle == 0.0:
        return cloud, state
    c, s = math.cos(angle), math.sin(angle)
    pts = cloud.points.copy()
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y
    p = state.pose
    return (PointCloud(cloud.agent_id, pts, cloud.tick_start, cloud.tick_end),
            replace(state, pose=Pose(p.x, p.y, p.z, p.yaw - angle)))


def frame_stamp(scene: Scene, cloud: PointCloud) -> float:
    """Unified frame time of the frame a scan belongs to: the ego's scan end.

    Scans delayed by injected latency keep the stamp of their own frame.
    """
    agent = scene.agent(cloud.agent_id)
    j = int(round((cloud.tick_start - agent.tick_offset) * agent.frequency))
    ego = scene.ego
    return ego.tick_start(j) + 1.0 / ego.frequency


def agent_inputs(data: SceneData, frame: Frame, agent_id: int, mcfg: ModelConfig,
                 angle: float = 0.0) -> AgentFeatures:
    cloud, state = frame.clouds[agent_id], frame.states[agent_id]
    key = (agent_id, cloud.tick_start, mcfg.timestamp_mode, mcfg.eq1_wrap, mcfg.local_resolution,
           mcfg.global_factor, mcfg.dilation_layers)
    if angle == 0.0 and key in data._cache:
        return data._cache[key]
    sc = data.scene
    stamp = frame_stamp(sc, cloud)
    cloud, state = rotate_input(cloud, state, angle)
    feats = featurize_agent(cloud, state, local_resolution=mcfg.local_resolution,
                            global_factor=mcfg.global_factor, dilation_layers=mcfg.dilation_layers,
                            timestamp_mode=mcfg.timestamp_mode, eq1_wrap=mcfg.eq1_wrap,
                            frame_time=stamp,
                            x_range=sc.x_range, y_range=sc.y_range)
    if angle == 0.0:
        data._cache[key] = feats
    return feats


def oracle_roi_scores(scene: Scene, feats: AgentFeatures, margin: float) -> np.ndarray:
    idx = assign_objects(feats.local.centers_world, feats.local.obs_time, scene.objects, margin)
    return (idx >= 0).astype(float)


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class FrameOutput:
    frame: Frame
    t_ref: float
    locals_: dict[int, Optional[LocalOutput]]
    inputs: dict[int, Optional[AgentFeatures]]
    fusion: Optional[FusionOutput]


def run_frames(P_hist, P_new, data: SceneData, frames: Sequence[Frame], mcfg: ModelConfig, *,
               fuse: Callable[[int], bool], angles: Optional[dict[int, float]] = None,
               grad_all_agents: bool = False, oracle_rois: bool = False,
               positive_margin: Optional[float] = None):
    """Stream ``frames`` through per-agent temporal fusion with fresh memories.

    ``P_new`` is used for the last frame (ego only unless ``grad_all_agents``)
    and ``P_hist`` everywhere else.  Yields a :class:`FrameOutput` for every
    frame index ``n`` with ``fuse(n)`` true.
    """
    angles = angles or {}
    margin = mcfg.positive_margin if positive_margin is None else positive_margin
    memories: dict[int, MemoryQueue] = {}
    last = len(frames) - 1
    for n, fr in enumerate(frames):
        ego = fr.ego_id
        order = [ego] + [a for a in fr.agent_ids if a != ego]
        outs: dict[int, Optional[LocalOutput]] = {}
        ins: dict[int, Optional[AgentFeatures]] = {}
        for a in order:
            mem = memories.get(a) or MemoryQueue(mcfg.T, mcfg.k_q)
            feats = agent_inputs(data, fr, a, mcfg, angles.get(a, 0.0))
            ins[a] = feats
            if len(feats.local) == 0:
                outs[a] = None
                continue
            use_new = n == last and (a == ego or grad_all_agents)
            scores = oracle_roi_scores(data.scene, feats, margin) if oracle_rois else None
            out = local_pass(P_new if use_new else P_hist, feats, mem, fr.t_aligned, mcfg,
                             fr.index, scores)
            outs[a] = out
            memories[a] = out.memory
        fusion = None
        if fuse(n):
            d = mcfg.d
            parts = []
            for a in order:
                o = outs[a]
                if o is None:
                    parts.append((QueryBatch.empty(d), Tensor(np.zeros((0, d)))))
                elif a == ego or (n == last and grad_all_agents):
                    parts.append((o.queries, o.context))
                else:
                    parts.append((o.queries, Tensor(o.context.data)))
            if any(len(q) for q, _ in parts):
                ego_state = ins[ego].state
                fusion = spatial_fusion(P_new if n == last else P_hist, parts, ego_state.pose, mcfg)
            yield FrameOutput(fr, fr.t_aligned, outs, ins, fusion)


# ---------------------------------------------------------------------------
# losses


def _boxes_at(scene: Scene, t: float) -> np.ndarray:
    out = np.empty((len(scene.objects), 7))
    for k, tr in enumerate(scene.objects):
        p = object_pose_at(tr, min(max(t, tr.t_first), tr.t_last))
        out[k] = (p.x, p.y, p.z, *tr.dims, p.yaw)
    return out


def _head_loss(cls: Tensor, reg: Tensor, anchors: np.ndarray, assigned: np.ndarray,
               boxes: np.ndarray, ref: Pose, use_reg: bool) -> tuple[Tensor, Optional[Tensor]]:
    pos = np.nonzero(assigned >= 0)[0]
    norm = 1.0 / max(1, len(pos))
    y = (assigned >= 0).astype(float).reshape(-1, 1)
    lc = mul(focal_loss_logits(cls, y), norm)
    lr = None
    if use_reg and len(pos):
        target = encode_boxes(anchors[pos], ref, boxes[assigned[pos]])
        lr = mul(smooth_l1_loss(rows(reg, pos), target), norm)
    return lc, lr


def frame_loss(out: FrameOutput, scene: Scene, mcfg: ModelConfig, cls_weight: float = 1.0,
               reg_weight: float = 1.0, label_time: str = "aligned"
               ) -> tuple[Optional[Tensor], dict[str, float]]:
    """Detection loss of the ego's local heads and the fused head at one frame.

    With ``label_time="aligned"`` an anchor is positive when it lies inside a
    box at the alignment time; with ``"observed"`` the box is taken at the
    anchor's own observation time.
    """
    ego = out.frame.ego_id

    def when(obs):
        return np.full(len(obs), out.t_ref) if label_time == "aligned" else obs

    lo = out.locals_.get(ego)
    boxes = _boxes_at(scene, out.t_ref)
    margin = mcfg.positive_margin
    terms: dict[str, Tensor] = {}
    if lo is not None:
        loc = out.inputs[ego].local
        a = assign_objects(loc.centers_world, when(loc.obs_time), scene.objects, margin)
        terms["roi_cls"], r = _head_loss(lo.rois.cls, lo.rois.reg, loc.centers_world, a, boxes,
                                         lo.ref, mcfg.roi_regression)
        if r is not None:
            terms["roi_reg"] = r
        q = lo.queries
        a = assign_objects(q.positions, when(q.obs_time), scene.objects, margin)
        terms["lq_cls"], r = _head_loss(lo.cls, lo.reg, q.positions, a, boxes, lo.ref, True)
        if r is not None:
            terms["lq_reg"] = r
    fu = out.fusion
    if fu is not None:
        a = np.full(len(fu.positions), -1)
        for col in range(fu.obs_time.shape[1]):
            valid = np.nonzero(~np.isnan(fu.obs_time[:, col]) & (a < 0))[0]
            if len(valid):
                a[valid] = assign_objects(fu.positions[valid], when(fu.obs_time[valid, col]),
                                          scene.objects, margin)
        terms["gq_cls"], r = _head_loss(fu.cls, fu.reg, fu.positions, a, boxes, fu.ref, True)
        if r is not None:
            terms["gq_reg"] = r
    if not terms:
        return None, {}
    total = None
    for k, v in terms.items():
        w = cls_weight if k.endswith("cls") else reg_weight
        v = mul(v, w)
        total = v if total is None else add(total, v)
    return total, {k: float(v.data) for k, v in terms.items()}


# ---------------------------------------------------------------------------
# evaluation


def observed_counts(scene: Scene, frame: Frame, margin: float = 0.3) -> dict[int, int]:
    """Number of returns of each object across all clouds of ``frame``."""
    counts = {tr.id: 0 for tr in scene.objects}
    for a, cloud in frame.clouds.items():
        if not len(cloud):
            continue
        t = cloud.t
        poses = scene.agent(a).poses_at(t)
        c, s = np.cos(poses[:, 3]), np.sin(poses[:, 3])
        wx = poses[:, 0] + c * cloud.points[:, 0] - s * cloud.points[:, 1]
        wy = poses[:, 1] + s * cloud.points[:, 0] + c * cloud.points[:, 1]
        for tr in scene.objects:
            op = object_poses_at(tr, np.clip(t, tr.t_first, tr.t_last))
            co, so = np.cos(op[:, 3]), np.sin(op[:, 3])
            dx, dy = wx - op[:, 0], wy - op[:, 1]
            u, v = co * dx + so * dy, -so * dx + co * dy
            inside = (np.abs(u) <= tr.dims[0] / 2 + margin) & (np.abs(v) <= tr.dims[1] / 2 + margin)
            counts[tr.id] += int(inside.sum())
    return counts


def eval_targets(scene: Scene, frame: Frame, min_points: int, moving_only: bool = True):
    counts = observed_counts(scene, frame)
    by_id = {tr.id: tr for tr in scene.objects}
    out = []
    for oid, box in gt_boxes_at(scene, frame.t_aligned):
        if counts.get(oid, 0) < min_points:
            continue
        if moving_only and by_id[oid].speed_at(frame.t_aligned) <= 0.5:
            continue
        out.append(box)
    return out


def evaluate(params: ModelParams, scenes: Sequence[SceneData], cfg: TrainConfig, latency: int = 0,
             iou_thresholds: Sequence[float] = (), warmup: Optional[int] = None) -> EvalResult:
    """Held-out metrics of fused detections at each frame's alignment time.

    Frames are streamed with a rolling memory; only frames whose original
    index is at least ``warmup`` (default: window length minus one plus the
    maximum training latency) are scored, so every latency is scored on the
    same frames.
    """
    mcfg = cfg.model_config()
    P = params.as_tensors(requires_grad=False)
    if warmup is None:
        warmup = mcfg.T - 1 + cfg.max_latency
    errors = []
    ap_frames = []
    for data in scenes:
        frames = inject_latency(data.frames, latency)
        scored = {n for n, fr in enumerate(frames) if fr.index >= warmup}
        for out in run_frames(P, P, data, frames, mcfg, fuse=lambda n: n in scored,
                              oracle_rois=cfg.oracle_rois):
            targets = eval_targets(data.scene, out.frame, cfg.min_points)
            dets = out.fusion.detections() if out.fusion is not None else []
            centers = np.array([b.center[:2] for b in targets]).reshape(-1, 2)
            errors.append(center_errors(dets, centers, cfg.center_radius))
            if iou_thresholds:
                ap_frames.append((nms_bev(dets, 0.1, min_confidence=0.05), targets))
    err = np.concatenate(errors) if errors else np.zeros(0)
    if iou_thresholds:
        res = evaluate_frames(ap_frames, iou_thresholds)
    else:
        res = EvalResult(ap={})
    res.center_error = float(err.mean()) if len(err) else float("nan")
    res.num_center_targets = int(len(err))
    return res


# ---------------------------------------------------------------------------
# optimization


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, np.zeros_like(p)) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(k, np.zeros_like(p)) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        return out


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float]
    components: list[dict[str, float]]
    metrics: Optional[EvalResult] = None
    diverged: bool = False

    def loss_log(self) -> str:
        lines = ["step loss " + " ".join(LOSS_KEYS)]
        for i, (l, c) in enumerate(zip(self.losses, self.components)):
            parts = [f"{c.get(k, 0.0):.17g}" for k in LOSS_KEYS]
            lines.append(f"{i} {l:.17g} " + " ".join(parts))
        return "\n".join(lines) + "\n"


def sample_window(rng: np.random.Generator, data: SceneData, cfg: TrainConfig):
    k = int(rng.integers(0, cfg.max_latency + 1)) if cfg.latency_augmentation == "random" else 0
    k = min(k, len(data.frames) - 1)
    frames = inject_latency(data.frames, k)
    end = int(rng.integers(0, len(frames)))
    start = max(0, end - cfg.model.T + 1)
    angles = {}
    if cfg.rotation_augmentation_deg > 0:
        lim = math.radians(cfg.rotation_augmentation_deg)
        for a in frames[end].agent_ids:
            angles[a] = float(rng.uniform(-lim, lim))
    return frames[start:end + 1], angles


def window_loss(P_hist, P_new, data: SceneData, frames: Sequence[Frame], cfg: TrainConfig,
                angles: Optional[dict[int, float]] = None):
    mcfg = cfg.model_config()
    last = len(frames) - 1
    (out,) = run_frames(P_hist, P_new, data, frames, mcfg, fuse=lambda n: n == last,
                        angles=angles, grad_all_agents=cfg.grad_all_agents,
                        oracle_rois=cfg.oracle_rois)
    return frame_loss(out, data.scene, mcfg, cfg.cls_weight, cfg.reg_weight, cfg.label_time)


def train_toy(cfg: TrainConfig, scenes: Optional[Sequence[SceneData]] = None,
              eval_scenes: Optional[Sequence[SceneData]] = None, evaluate_at_end: bool = True,
              init: Optional[ModelParams] = None,
              progress: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Fit the whole pipeline with Adam on windows of synthetic frames.

    Each step draws a scene, a cooperative latency (when augmenting), a
    window end and per-agent input rotations; memories start empty at the
    first frame of the window and only the newest frame is supervised.
    """
    cfg.validate()
    mcfg = cfg.model_config()
    if scenes is None:
        scenes = prepare_scenes(cfg.scenario, cfg.train_seeds())
    params = init.copy() if init is not None else ModelParams.init(mcfg.d, seed=cfg.seed)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = rng_for(cfg.seed, 11)
    losses: list[float] = []
    comps: list[dict[str, float]] = []
    diverged = False
    for step in range(cfg.steps):
        P_new = params.as_tensors(requires_grad=True)
        P_hist = params.as_tensors(requires_grad=False)
        total = 0.0
        parts: dict[str, float] = {}
        for _ in range(cfg.batch_scenes):
            data = scenes[int(rng.integers(0, len(scenes)))]
            frames, angles = sample_window(rng, data, cfg)
            loss, c = window_loss(P_hist, P_new, data, frames, cfg, angles)
            if loss is None:
                continue
            if not np.isfinite(loss.data):
                diverged = True
                break
            loss.backward(np.asarray(1.0 / cfg.batch_scenes))
            total += float(loss.data) / cfg.batch_scenes
            for k, v in c.items():
                parts[k] = parts.get(k, 0.0) + v / cfg.batch_scenes
        if diverged:
            break
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P_new.items()}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            diverged = True
            break
        losses.append(total)
        comps.append(parts)
        if progress is not None:
            progress(step, total)
        if cfg.lr > 0:
            params = ModelParams(opt.step(params.tensors, grads))
    metrics = None
    if evaluate_at_end and cfg.eval_scenes > 0:
        if eval_scenes is None:
            eval_scenes = prepare_scenes(cfg.scenario, cfg.eval_seeds())
        metrics = evaluate(params, eval_scenes, cfg, latency=0)
    return TrainResult(params, losses, comps, metrics, diverged)
