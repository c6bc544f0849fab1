"""On-disk formats: TPCD point files, full-precision JSON and frame directories.

TPCD layout (little-endian)::

    magic b"TPCD" | version u16 | count u32 | count * (x, y, z, t) float32

Frame directory layout::

    scene.json
    frames/000000/meta.json
    frames/000000/agent_<id>.tpcd
    ...
"""

from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .config import ScenarioConfig
from .fusion.model import Detection
from .fusion.params import atomic_write
from .geometry import BBox, Pose
from .scene_sim import (AgentState, Frame, ObjectTrack, PointCloud, Scene, SensorModel,
                        gt_boxes_at)

TPCD_MAGIC = b"TPCD"
TPCD_VERSION = 1
SCENE_FORMAT = "coopdet-scene"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# TPCD


def encode_tpcd(points: np.ndarray) -> bytes:
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 4), dtype="<f4")
    return TPCD_MAGIC + struct.pack("<HI", TPCD_VERSION, len(pts)) + pts.tobytes(order="C")


def decode_tpcd(buf: bytes) -> np.ndarray:
    if len(buf) < 10 or buf[:4] != TPCD_MAGIC:
        raise FormatError("not a TPCD point file (bad magic)")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != TPCD_VERSION:
        raise FormatError(f"unsupported TPCD version {version}")
    if len(buf) != 10 + 16 * count:
        raise FormatError(f"TPCD size mismatch: header says {count} points, "
                          f"payload holds {(len(buf) - 10) / 16:g}")
    return np.frombuffer(buf, dtype="<f4", count=4 * count, offset=10).reshape(count, 4).astype(float)


def write_tpcd(path, points: np.ndarray) -> None:
    atomic_write(path, encode_tpcd(points))


def read_tpcd(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tpcd(fh.read())


# ---------------------------------------------------------------------------
# JSON with 17 significant digits


def _fmt_float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    s = "%.17g" % x
    if "." not in s and "e" not in s and "n" not in s:
        s += ".0"
    return s


def _encode(obj: Any, indent: int, level: int) -> str:
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist(), indent, level)
    pad = "\n" + " " * (indent * (level + 1)) if indent else ""
    end = "\n" + " " * (indent * level) if indent else ""
    sep = "," + pad if indent else ", "
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{json.dumps(str(k), ensure_ascii=False)}: {_encode(v, indent, level + 1)}"
                 for k, v in obj.items()]
        return "{" + pad + sep.join(items) + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        return "[" + pad + sep.join(_encode(v, indent, level + 1) for v in obj) + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj: Any, indent: int = 2) -> str:
    """JSON text with every float written to 17 significant digits."""
    return _encode(obj, indent, 0)


def write_json(path, obj: Any, indent: int = 2) -> None:
    atomic_write(path, (dumps(obj, indent) + "\n").encode("utf-8"))


def read_json(path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# scenes and frames


def scene_to_dict(scene: Scene, config: ScenarioConfig | None = None) -> dict:
    return {
        "format": SCENE_FORMAT,
        "version": FORMAT_VERSION,
        "seed": scene.seed,
        "duration": scene.duration,
        "frequency": scene.frequency,
        "num_frames": scene.num_frames,
        "ego_id": scene.ego_id,
        "x_range": list(scene.x_range),
        "y_range": list(scene.y_range),
        "sensor": {
            "angular_resolution_deg": scene.sensor.angular_resolution_deg,
            "max_range": scene.sensor.max_range,
            "clutter_density": scene.sensor.clutter_density,
            "sensor_height": scene.sensor.sensor_height,
        },
        "agents": [{
            "id": a.id,
            "time": a.time,
            "pose": a.pose.as_array().tolist(),
            "velocity": list(a.velocity),
            "tick_offset": a.tick_offset,
            "frequency": a.frequency,
        } for a in scene.agents],
        "objects": [{
            "id": o.id,
            "dims": list(o.dims),
            "waypoints": [[t, *p.as_array().tolist()] for t, p in o.waypoints],
        } for o in scene.objects],
        "config": None if config is None else config.to_dict(),
    }


def scene_from_dict(d: dict) -> Scene:
    try:
        if d.get("format") != SCENE_FORMAT:
            raise FormatError("scene.json: unexpected format tag")
        if d.get("version") != FORMAT_VERSION:
            raise FormatError(f"scene.json: unsupported version {d.get('version')}")
        agents = tuple(AgentState(int(a["id"]), Pose.from_array(a["pose"]),
                                  tuple(float(v) for v in a["velocity"]), float(a["tick_offset"]),
                                  float(a["frequency"]), float(a["time"])) for a in d["agents"])
        objects = tuple(ObjectTrack(int(o["id"]), tuple(float(v) for v in o["dims"]),
                                    tuple((float(w[0]), Pose.from_array(w[1:5]))
                                          for w in o["waypoints"])) for o in d["objects"])
        s = d["sensor"]
        sensor = SensorModel(float(s["angular_resolution_deg"]), float(s["max_range"]),
                             float(s["clutter_density"]), float(s["sensor_height"]))
        return Scene(agents, objects, float(d["duration"]), int(d["ego_id"]), int(d["seed"]),
                     float(d["frequency"]), sensor, tuple(d["x_range"]), tuple(d["y_range"]))
    except (KeyError, TypeError, IndexError) as exc:
        raise FormatError(f"scene.json: missing or malformed field ({exc})") from exc


def frame_meta(frame: Frame, scene: Scene, counts: dict[int, int]) -> dict:
    return {
        "index": frame.index,
        "t_aligned": frame.t_aligned,
        "ego_id": frame.ego_id,
        "agents": [{
            "id": a,
            "tick_start": frame.clouds[a].tick_start,
            "tick_end": frame.clouds[a].tick_end,
            "pose_time": frame.states[a].time,
            "pose": frame.states[a].pose.as_array().tolist(),
            "velocity": list(frame.states[a].velocity),
            "num_points": len(frame.clouds[a]),
            "points_file": f"agent_{a}.tpcd",
        } for a in frame.agent_ids],
        "gt": [{
            "id": oid,
            "center": list(b.center),
            "dims": list(b.dims),
            "yaw": b.yaw,
            "num_points": int(counts.get(oid, 0)),
        } for oid, b in gt_boxes_at(scene, frame.t_aligned)],
    }


def frame_dir(root, index: int) -> Path:
    return Path(root) / "frames" / f"{index:06d}"


def write_frames(root, scene: Scene, frames: Sequence[Frame],
                 config: ScenarioConfig | None = None) -> None:
    from .training import observed_counts

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_json(root / "scene.json", scene_to_dict(scene, config))
    for fr in frames:
        fd = frame_dir(root, fr.index)
        fd.mkdir(parents=True, exist_ok=True)
        for a in fr.agent_ids:
            write_tpcd(fd / f"agent_{a}.tpcd", fr.clouds[a].points)
        write_json(fd / "meta.json", frame_meta(fr, scene, observed_counts(scene, fr)))


def read_scene(root) -> Scene:
    path = Path(root) / "scene.json"
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    return scene_from_dict(read_json(path))


def read_frames(root) -> tuple[Scene, list[Frame], list[dict]]:
    """Scene, frames (points as stored) and raw meta dicts of a frame directory."""
    root = Path(root)
    scene = read_scene(root)
    frames, metas = [], []
    for j in range(scene.num_frames):
        fd = frame_dir(root, j)
        meta_path = fd / "meta.json"
        if not meta_path.is_file():
            raise FileNotFoundError(f"{meta_path} not found")
        meta = read_json(meta_path)
        clouds, states = {}, {}
        try:
            for a in meta["agents"]:
                aid = int(a["id"])
                pts = read_tpcd(fd / a["points_file"])
                clouds[aid] = PointCloud(aid, pts, float(a["tick_start"]), float(a["tick_end"]))
                base = scene.agent(aid)
                states[aid] = AgentState(aid, Pose.from_array(a["pose"]),
                                         tuple(float(v) for v in a["velocity"]), base.tick_offset,
                                         base.frequency, float(a["pose_time"]))
            frames.append(Frame(int(meta["index"]), clouds, states, float(meta["t_aligned"]),
                                int(meta["ego_id"])))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{meta_path}: missing or malformed field ({exc})") from exc
        metas.append(meta)
    return scene, frames, metas


def gt_from_meta(meta: dict, min_points: int = 0) -> list[BBox]:
    return [BBox(tuple(g["center"]), tuple(g["dims"]), float(g["yaw"]))
            for g in meta["gt"] if int(g.get("num_points", 0)) >= min_points]


# ---------------------------------------------------------------------------
# detections


def detection_record(frame: int, det: Detection) -> dict:
    b = det.bbox
    return {
        "frame": int(frame),
        "x": b.center[0], "y": b.center[1], "z": b.center[2],
        "l": b.dims[0], "w": b.dims[1], "h": b.dims[2],
        "yaw": b.yaw,
        "confidence": det.confidence,
        "source": det.source,
    }


def write_detections(path, records: Iterable[dict]) -> None:
    text = "".join(dumps(r, indent=0) + "\n" for r in records)
    atomic_write(path, text.encode("utf-8"))


def read_detections(path) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                det = Detection(BBox((r["x"], r["y"], r["z"]), (r["l"], r["w"], r["h"]), r["yaw"]),
                                float(r["confidence"]), r.get("source", "fused"))
                out.setdefault(int(r["frame"]), []).append(det)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{n}: bad detection record ({exc})") from exc
    return out


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def file_bytes(path) -> bytes:
    with open(os.fspath(path), "rb") as fh:
        return fh.read()
