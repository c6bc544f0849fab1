"""Scenario and model configuration with field-level validation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Union

DEFAULT_X_RANGE = (-140.8, 140.8)
DEFAULT_Y_RANGE = (-38.4, 38.4)


class ConfigError(ValueError):
    """Invalid configuration; ``fields`` names every offending field."""

    def __init__(self, problems: dict[str, str]):
        self.fields = sorted(problems)
        msg = "; ".join(f"{k}: {v}" for k, v in sorted(problems.items()))
        super().__init__(f"invalid config: {msg}")


def _check_range(problems: dict[str, str], name: str, r, lo: float = -math.inf) -> None:
    try:
        a, b = float(r[0]), float(r[1])
    except (TypeError, ValueError, IndexError):
        problems[name] = "expected a [low, high] pair"
        return
    if not (math.isfinite(a) and math.isfinite(b)):
        problems[name] = "bounds must be finite"
    elif a > b:
        problems[name] = "bounds must be ordered"
    elif a < lo:
        problems[name] = f"lower bound must be >= {lo}"


@dataclass
class ScenarioConfig:
    duration: float = 1.0
    frequency: float = 10.0
    num_agents: int = 2
    ego_id: int = 0
    # "random", "subframe" (multiples of 0.01 s, 1..5 dropped sub-frames) or explicit list
    tick_offsets: Union[str, list[float]] = "random"
    agent_speed_range: tuple[float, float] = (5.0, 10.0)
    num_objects: int = 6
    object_speed_range: tuple[float, float] = (10.0, 20.0)
    x_range: tuple[float, float] = DEFAULT_X_RANGE
    y_range: tuple[float, float] = DEFAULT_Y_RANGE
    clutter_density: float = 0.0
    angular_resolution_deg: float = 0.2
    seed: int = 0
    # layout of the synthetic straight road
    max_range: float = 40.0
    agent_spacing: float = 35.0
    lanes: list[float] = field(default_factory=lambda: [-7.0, -3.5, 3.5, 7.0])
    spawn_x_range: tuple[float, float] = (-25.0, 65.0)
    object_dims: tuple[float, float, float] = (4.5, 1.8, 1.6)
    object_turn_rate: float = 0.0
    segment_duration: float = 0.5
    sensor_height: float = 1.8

    def validate(self) -> "ScenarioConfig":
        p: dict[str, str] = {}
        if not (isinstance(self.duration, (int, float)) and self.duration > 0):
            p["duration"] = "must be > 0"
        if not (isinstance(self.frequency, (int, float)) and self.frequency > 0):
            p["frequency"] = "must be > 0"
        if not (isinstance(self.num_agents, int) and self.num_agents >= 1):
            p["num_agents"] = "must be an integer >= 1"
        elif not (isinstance(self.ego_id, int) and 0 <= self.ego_id < self.num_agents):
            p["ego_id"] = "must index one of the agents"
        if not (isinstance(self.num_objects, int) and self.num_objects >= 0):
            p["num_objects"] = "must be an integer >= 0"
        _check_range(p, "agent_speed_range", self.agent_speed_range, lo=0.0)
        _check_range(p, "object_speed_range", self.object_speed_range, lo=0.0)
        _check_range(p, "x_range", self.x_range)
        _check_range(p, "y_range", self.y_range)
        _check_range(p, "spawn_x_range", self.spawn_x_range)
        if isinstance(self.tick_offsets, str):
            if self.tick_offsets not in ("random", "subframe"):
                p["tick_offsets"] = "must be 'random', 'subframe' or a list of offsets"
        elif "frequency" not in p and "num_agents" not in p:
            offs = list(self.tick_offsets)
            if len(offs) != self.num_agents:
                p["tick_offsets"] = "need one offset per agent"
            elif not all(0.0 <= float(o) < 1.0 / self.frequency for o in offs):
                p["tick_offsets"] = "offsets must lie in [0, 1/frequency)"
        if not (0.0 <= self.clutter_density <= 1.0):
            p["clutter_density"] = "must lie in [0, 1] (per-ray probability)"
        if not (0.0 < self.angular_resolution_deg <= 10.0):
            p["angular_resolution_deg"] = "must lie in (0, 10]"
        if not self.max_range > 0:
            p["max_range"] = "must be > 0"
        if not self.lanes:
            p["lanes"] = "need at least one lane"
        if len(self.object_dims) != 3 or min(self.object_dims) <= 0:
            p["object_dims"] = "need three positive dims"
        if not self.segment_duration > 0:
            p["segment_duration"] = "must be > 0"
        if p:
            raise ConfigError(p)
        return self

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.frequency))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScenarioConfig":
        return _from_dict(cls, d)


TIMESTAMP_MODES = ("pointwise", "framewise")


@dataclass
class ModelConfig:
    d: int = 32
    k_roi_local: int = 1024
    k_roi_global: int = 512
    k_q: int = 256
    T: int = 4
    timestamp_mode: str = "pointwise"
    eq1_wrap: bool = True
    pos_embed_in_keys: bool = True
    local_resolution: float = 0.8
    global_factor: int = 4
    dilation_layers: int = 3
    union_resolution: float = 0.8
    temp_fusion: bool = True
    global_attention: bool = True
    roi_regression: bool = True
    time_features: bool = True
    positive_margin: float = 0.5

    def validate(self) -> "ModelConfig":
        p: dict[str, str] = {}
        for name in ("d", "k_roi_local", "k_roi_global", "k_q", "T", "global_factor"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 1):
                p[name] = "must be an integer >= 1"
        if "k_q" not in p and "k_roi_local" not in p and self.k_q > self.k_roi_local:
            p["k_q"] = "must not exceed k_roi_local"
        if self.timestamp_mode not in TIMESTAMP_MODES:
            p["timestamp_mode"] = f"must be one of {TIMESTAMP_MODES}"
        if not self.local_resolution > 0:
            p["local_resolution"] = "must be > 0"
        if not self.union_resolution > 0:
            p["union_resolution"] = "must be > 0"
        if not (isinstance(self.dilation_layers, int) and self.dilation_layers >= 0):
            p["dilation_layers"] = "must be an integer >= 0"
        if p:
            raise ConfigError(p)
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        return _from_dict(cls, d)


def _from_dict(cls, d: dict[str, Any]):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError({k: "unknown field" for k in unknown})
    kwargs = {}
    for k, v in d.items():
        default = known[k].default
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        obj = cls(**kwargs)
    except TypeError as exc:  # pragma: no cover - defensive
        raise ConfigError({"<root>": str(exc)}) from exc
    return obj.validate()
