"""Object queries and the rolling per-frame memory queue."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..geometry import Pose


class QueueError(ValueError):
    pass


@dataclass
class Query:
    position: tuple[float, float]
    context: np.ndarray
    tau: float
    pose: Pose
    velocity: tuple[float, float]
    score: float = 0.0


@dataclass
class QueryBatch:
    """Struct-of-arrays form of a list of :class:`Query`.

    ``obs_time`` is supervision metadata (the physically true observation
    time of the anchor); models never read it.
    """

    positions: np.ndarray
    contexts: np.ndarray
    tau: np.ndarray
    poses: np.ndarray
    velocities: np.ndarray
    scores: np.ndarray
    obs_time: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        n = len(self.positions)
        self.positions = np.asarray(self.positions, dtype=float).reshape(n, 2)
        ctx = np.asarray(self.contexts, dtype=float)
        self.contexts = ctx.reshape(n, ctx.shape[-1] if ctx.ndim == 2 else -1)
        self.tau = np.asarray(self.tau, dtype=float).reshape(n)
        self.poses = np.asarray(self.poses, dtype=float).reshape(n, 4)
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(n, 2)
        self.scores = np.asarray(self.scores, dtype=float).reshape(n)
        if self.obs_time is None:
            self.obs_time = self.tau.copy()
        self.obs_time = np.asarray(self.obs_time, dtype=float).reshape(n)
        if not np.all(np.isfinite(self.tau)):
            raise QueueError("query timestamps must be finite")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def d(self) -> int:
        return self.contexts.shape[1]

    def take(self, idx) -> "QueryBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return QueryBatch(self.positions[idx], self.contexts[idx], self.tau[idx], self.poses[idx],
                          self.velocities[idx], self.scores[idx], self.obs_time[idx])

    @classmethod
    def empty(cls, d: int) -> "QueryBatch":
        return cls(np.zeros((0, 2)), np.zeros((0, d)), np.zeros(0), np.zeros((0, 4)),
                   np.zeros((0, 2)), np.zeros(0))

    @classmethod
    def concat(cls, batches: Sequence["QueryBatch"], d: int) -> "QueryBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls.empty(d)
        return cls(*(np.concatenate([getattr(b, f) for b in batches])
                     for f in ("positions", "contexts", "tau", "poses", "velocities", "scores",
                               "obs_time")))

    def to_queries(self) -> list[Query]:
        return [Query((float(p[0]), float(p[1])), c.copy(), float(t), Pose.from_array(e),
                      (float(v[0]), float(v[1])), float(s))
                for p, c, t, e, v, s in zip(self.positions, self.contexts, self.tau, self.poses,
                                            self.velocities, self.scores)]

    @classmethod
    def from_queries(cls, queries: Sequence[Query], d: Optional[int] = None) -> "QueryBatch":
        if not queries:
            if d is None:
                raise QueueError("need d to build an empty batch")
            return cls.empty(d)
        return cls(np.array([q.position for q in queries]),
                   np.stack([np.asarray(q.context, dtype=float) for q in queries]),
                   np.array([q.tau for q in queries]),
                   np.stack([q.pose.as_array() for q in queries]),
                   np.array([q.velocity for q in queries]),
                   np.array([q.score for q in queries]))


@dataclass
class MemorySlot:
    frame_index: int
    queries: QueryBatch


@dataclass
class MemoryQueue:
    """Top-``per_frame`` queries from each of the last ``capacity`` frames."""

    capacity: int = 4
    per_frame: int = 256
    slots: list[MemorySlot] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.capacity < 1 or self.per_frame < 1:
            raise QueueError("capacity and per_frame must be >= 1")

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def total(self) -> int:
        return sum(len(s.queries) for s in self.slots)

    def frame_indices(self) -> list[int]:
        return [s.frame_index for s in self.slots]

    def newest(self) -> Optional[MemorySlot]:
        return self.slots[-1] if self.slots else None

    def all_queries(self, d: int) -> QueryBatch:
        return QueryBatch.concat([s.queries for s in self.slots], d)

    def push(self, frame_index: int, queries: QueryBatch) -> "MemoryQueue":
        """Return a new queue with ``queries`` (best-scored first) as newest slot."""
        if self.slots and frame_index <= self.slots[-1].frame_index:
            raise QueueError(
                f"frame index {frame_index} not after newest slot {self.slots[-1].frame_index}")
        order = np.lexsort((np.arange(len(queries)), -queries.scores))[: self.per_frame]
        slots = list(self.slots) + [MemorySlot(int(frame_index), queries.take(order))]
        if len(slots) > self.capacity:
            slots = slots[len(slots) - self.capacity:]
        return MemoryQueue(self.capacity, self.per_frame, slots)

    def check(self) -> None:
        """Raise if any structural invariant is violated."""
        if len(self.slots) > self.capacity:
            raise QueueError("too many slots")
        idx = self.frame_indices()
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise QueueError("slot frame indices not strictly increasing")
        for s in self.slots:
            if len(s.queries) > self.per_frame:
                raise QueueError("slot over capacity")
            if np.any(np.diff(s.queries.scores) > 0):
                raise QueueError("slot not sorted by descending score")
