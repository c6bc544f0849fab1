"""Temporal query fusion per agent and spatial fusion across agents."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from ..config import ModelConfig
from ..featurizer import AgentFeatures, LevelCandidates, score_topk
from ..geometry import BBox, Pose
from ..scene_sim import AgentState
from . import layers as L
from .losses import decode_boxes
from .memory import MemoryQueue, QueryBatch
from .params import ModelParams
from .tensor import Tensor, add, concat, layer_norm, linear, mul, rows, scatter, sigmoid

FEATURE_SCALE = np.array([1.0, 1.0 / 0.4, 1.0 / 0.4, 1.0, 1.0 / L.TIME_SCALE])


class FusionError(ValueError):
    pass


@dataclass
class Detection:
    bbox: BBox
    confidence: float
    source: Union[int, str]


@dataclass
class RoISet:
    """Selected RoI points of one level."""

    positions: np.ndarray  # world (n, 2)
    embed: Tensor  # (n, d)
    tau: np.ndarray
    obs_time: np.ndarray
    index: np.ndarray  # rows of the candidate level

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class RoIOutput:
    local: RoISet
    global_: RoISet
    cls: Tensor  # RoI head logits over all local candidates
    reg: Tensor


@dataclass
class LocalOutput:
    queries: QueryBatch  # anchors, fused context (detached), tau, pose, velocity, score
    context: Tensor  # fused per-query context with graph
    cls: Tensor
    reg: Tensor
    memory: MemoryQueue
    ref: Pose
    rois: Optional[RoIOutput] = None
    num_roi: int = 0

    def detections(self, source: Union[int, str]) -> list[Detection]:
        return decode_detections(self.queries.positions, self.ref, self.cls.data, self.reg.data,
                                 source)


def as_param_tensors(params) -> dict[str, Tensor]:
    if isinstance(params, ModelParams):
        return params.as_tensors(requires_grad=False)
    return params


def level_inputs(level: LevelCandidates, t_ref: float, cfg: ModelConfig) -> np.ndarray:
    x = level.feats.copy()
    if cfg.time_features:
        x[:, 4] = np.where(level.occupied, level.feats[:, 4] - t_ref, 0.0)
    else:
        x[:, 4] = 0.0
    return x * FEATURE_SCALE


def select_rois(P, feats: AgentFeatures, t_ref: float, cfg: ModelConfig,
                oracle_scores: Optional[np.ndarray] = None) -> RoIOutput:
    """Embed candidates, score them and keep the top-K of each level.

    Global RoI embeddings are weighted by the sigmoid of their score so the
    global scorer is trained through the attention that consumes them.
    """
    P = as_param_tensors(P)
    loc, glo = feats.local, feats.global_
    if len(loc) == 0:
        raise FusionError("empty local RoI candidate set")
    e_l = L.dense(P, "feat_embed", level_inputs(loc, t_ref, cfg))
    cls, reg = L.head(P, "roi_local", e_l)
    scores = cls.data[:, 0] if oracle_scores is None else np.asarray(oracle_scores, dtype=float)
    sel = score_topk(loc.coords, scores, cfg.k_roi_local)
    local = RoISet(loc.centers_world[sel], rows(e_l, sel), loc.tau[sel], loc.obs_time[sel], sel)

    if len(glo):
        e_g = L.dense(P, "feat_embed", level_inputs(glo, t_ref, cfg))
        s_g = L.dense(P, "roi_global.cls", e_g)
        sel_g = score_topk(glo.coords, s_g.data[:, 0], cfg.k_roi_global)
        g_emb = mul(rows(e_g, sel_g), sigmoid(rows(s_g, sel_g)))
        global_ = RoISet(glo.centers_world[sel_g], g_emb, glo.tau[sel_g], glo.obs_time[sel_g], sel_g)
    else:
        global_ = RoISet(np.zeros((0, 2)), Tensor(np.zeros((0, e_l.shape[1]))), np.zeros(0),
                         np.zeros(0), np.zeros(0, dtype=np.int64))
    return RoIOutput(local, global_, cls, reg)


@dataclass
class Aligned:
    position: Tensor  # Q_p^{mo,tau}
    content: Tensor  # motion-aware context (Q_c^mo for memory, tgt^mo for current)


def mta_align(P, positions: np.ndarray, content, tau: np.ndarray, poses: np.ndarray,
              velocities: np.ndarray, ego: AgentState, t_ref: float, stream: str) -> Aligned:
    """Motion-time-aware alignment of a set of queries to (ego pose, t_ref).

    ``stream`` selects the MLN used on the content: ``"tgt"`` for current RoI
    features, ``"ctx"`` for stored memory contexts.  The time embedding is
    added to the motion-aware position embedding only.
    """
    P = as_param_tensors(P)
    ref = ego.pose
    poses_rel = L.relative_poses(ref, poses)
    vel_rel = L.rotate_to(ref, velocities)
    m = L.motion_embed(P, tau, poses_rel, vel_rel, t_ref)
    pos = L.pos_embed(P, ref, positions)
    pos_mo = L.mln(P, "mln_pos", pos, m)
    pos_mo_tau = add(pos_mo, L.time_embed(P, tau, t_ref))
    content_mo = L.mln(P, f"mln_{stream}", content, m)
    return Aligned(pos_mo_tau, content_mo)


def temp_fusion_step(P, rois: RoIOutput, memory: MemoryQueue, ego: AgentState, t_ref: float,
                     cfg: ModelConfig, frame_index: int) -> LocalOutput:
    """One decoder layer of temporal fusion for a single agent frame.

    Current queries are the local RoIs extended by the newest memory slot.
    Hybrid attention runs against the current RoIs and every memory slot,
    cross attention against the global RoIs; the initial embeddings are added
    back and the sum is layer-normalized before the local detection head.  The best ``k_q`` queries (with
    positions moved to their predicted centers) form the new memory slot.
    """
    P = as_param_tensors(P)
    loc, glo = rois.local, rois.global_
    n_roi = len(loc)
    if n_roi == 0:
        raise FusionError("empty local RoI set")
    d = loc.embed.shape[1]
    pose_row = np.tile(ego.pose.as_array(), (n_roi, 1))
    vel_row = np.tile(np.asarray(ego.velocity, dtype=float), (n_roi, 1))

    mem_all = memory.all_queries(d) if cfg.temp_fusion else QueryBatch.empty(d)
    newest = memory.newest()
    n_new = len(newest.queries) if (cfg.temp_fusion and newest is not None) else 0
    n_mem = len(mem_all)

    if cfg.temp_fusion:
        cur = mta_align(P, loc.positions, loc.embed, loc.tau, pose_row, vel_row, ego, t_ref, "tgt")
        cur_x = add(cur.content, cur.position)
        if n_mem:
            mem_ctx = Tensor(mem_all.contexts)
            mem = mta_align(P, mem_all.positions, mem_ctx, mem_all.tau, mem_all.poses,
                            mem_all.velocities, ego, t_ref, "ctx")
            mem_x = add(mem.content, mem.position)
            new_idx = np.arange(n_mem - n_new, n_mem)
            x = concat([cur_x, rows(mem_x, new_idx)]) if n_new else cur_x
            kv = concat([cur_x, mem_x])
            init = concat([loc.embed, rows(mem_ctx, new_idx)]) if n_new else loc.embed
        else:
            x, kv, init = cur_x, cur_x, loc.embed
        h = add(x, L.attention_block(P, "hyb", x, kv, kv))
    else:
        x = add(loc.embed, L.pos_embed(P, ego.pose, loc.positions))
        h, init = x, loc.embed

    if cfg.global_attention and len(glo):
        g = add(glo.embed, L.pos_embed(P, ego.pose, glo.positions))
        o = add(h, L.attention_block(P, "cross", h, g, g))
    else:
        o = h
    q_out = layer_norm(add(o, init))
    cls, reg = L.head(P, "lqdet", q_out)

    if n_new:
        prop = mem_all.take(np.arange(n_mem - n_new, n_mem))
        positions = np.concatenate([loc.positions, prop.positions])
        tau = np.concatenate([loc.tau, prop.tau])
        obs = np.concatenate([loc.obs_time, prop.obs_time])
        poses = np.concatenate([pose_row, prop.poses])
        vels = np.concatenate([vel_row, prop.velocities])
    else:
        positions, tau, obs, poses, vels = loc.positions, loc.tau, loc.obs_time, pose_row, vel_row
    conf = 1.0 / (1.0 + np.exp(-cls.data[:, 0]))
    queries = QueryBatch(positions, q_out.data, tau, poses, vels, conf, obs)

    new_memory = memory
    if cfg.temp_fusion:
        centers = decode_boxes(positions, ego.pose, reg.data)[:, :2]
        n = len(queries)
        slot = QueryBatch(centers, q_out.data, np.full(n, t_ref), np.tile(ego.pose.as_array(), (n, 1)),
                          np.tile(np.asarray(ego.velocity, dtype=float), (n, 1)), conf,
                          np.full(n, t_ref))
        new_memory = memory.push(frame_index, slot)
    return LocalOutput(queries, q_out, cls, reg, new_memory, ego.pose, rois, n_roi)


def local_pass(P, feats: AgentFeatures, memory: MemoryQueue, t_ref: float, cfg: ModelConfig,
               frame_index: int, oracle_scores: Optional[np.ndarray] = None) -> LocalOutput:
    P = as_param_tensors(P)
    rois = select_rois(P, feats, t_ref, cfg, oracle_scores)
    return temp_fusion_step(P, rois, memory, feats.state, t_ref, cfg, frame_index)


# ---------------------------------------------------------------------------
# spatial fusion


@dataclass
class FusionOutput:
    positions: np.ndarray  # union anchors, world (n, 2)
    features: Tensor  # Q^{ts}
    cls: Tensor
    reg: Tensor
    ref: Pose
    sources: list[list[int]] = field(default_factory=list)  # per anchor: contributing agent slots
    obs_time: Optional[np.ndarray] = None  # per (anchor, agent slot) true observation time

    def detections(self) -> list[Detection]:
        return decode_detections(self.positions, self.ref, self.cls.data, self.reg.data, "fused")


def union_keys(positions: np.ndarray, resolution: float) -> np.ndarray:
    return np.floor(np.asarray(positions, dtype=float) / resolution).astype(np.int64)


def spatial_fusion(P, agents: Sequence[tuple[QueryBatch, Tensor]], ego_pose: Pose,
                   cfg: ModelConfig) -> FusionOutput:
    """Union-pad-attend fusion of per-agent query sets (ego first).

    Positions are snapped to a ``union_resolution`` world grid; within one
    agent, colliding queries keep the highest-scored one.  Each agent's
    contexts are zero-padded onto the union, the ego's padded set forms the
    attention queries and the row-concatenation of all padded sets forms keys
    and values.
    """
    P = as_param_tensors(P)
    if not agents:
        raise FusionError("spatial fusion needs at least one agent")
    d = agents[0][1].shape[1] if len(agents[0][1].shape) == 2 else cfg.d
    keys_per_agent, keep_per_agent = [], []
    for qb, _ in agents:
        k = union_keys(qb.positions, cfg.union_resolution)
        order = np.lexsort((np.arange(len(qb)), -qb.scores))
        if len(k):
            _, first = np.unique(k[order], axis=0, return_index=True)
            keep = np.sort(order[first])
        else:
            keep = np.zeros(0, dtype=np.int64)
        keys_per_agent.append(k[keep])
        keep_per_agent.append(keep)
    all_keys = np.concatenate(keys_per_agent) if keys_per_agent else np.zeros((0, 2), np.int64)
    if len(all_keys) == 0:
        raise FusionError("no queries to fuse")
    union, inverse = np.unique(all_keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n_u = len(union)
    positions = (union + 0.5) * cfg.union_resolution

    padded = []
    sources: list[list[int]] = [[] for _ in range(n_u)]
    obs = np.full((n_u, len(agents)), np.nan)
    start = 0
    for a, ((qb, ctx), keep) in enumerate(zip(agents, keep_per_agent)):
        idx = inverse[start:start + len(keep)]
        start += len(keep)
        padded.append(scatter(rows(ctx, keep), idx, n_u))
        for u in idx:
            sources[int(u)].append(a)
        obs[idx, a] = qb.obs_time[keep]

    if cfg.pos_embed_in_keys:
        pe = L.pos_embed(P, ego_pose, positions)
        q = add(padded[0], pe)
        k = concat([add(p, pe) for p in padded])
    else:
        q = padded[0]
        k = concat(padded)
    v = concat(padded)
    from .tensor import attention

    fused = attention(q, k, v)
    cls, reg = L.head(P, "gqdet", fused)
    return FusionOutput(positions, fused, cls, reg, ego_pose, sources, obs)


def decode_detections(anchors: np.ndarray, ref: Pose, logits: np.ndarray, reg: np.ndarray,
                      source) -> list[Detection]:
    boxes = decode_boxes(anchors, ref, reg)
    conf = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=float).reshape(-1)))
    conf = np.clip(conf, 1e-12, 1.0 - 1e-12)
    return [Detection(BBox(tuple(b[:3]), tuple(b[3:6]), float(b[6])), float(c), source)
            for b, c in zip(boxes, conf)]
