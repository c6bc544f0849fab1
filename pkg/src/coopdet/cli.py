"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 verification
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .config import ConfigError, ModelConfig, ScenarioConfig
from .evalkit import (DEFAULT_IOU_THRESHOLDS, VARIANTS, EvalError, center_errors,
                      evaluate_frames, format_table, inject_latency, latency_frames, nms_bev)
from .fusion.params import ModelParams, ParamsFormatError
from .gradcheck import DEFAULT_TOLERANCE, check_all, check_ops
from .scene_sim import SimulationError, build_scene, make_async_frame

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VERIFY = 4


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        data = io.read_json(path)
    except FileNotFoundError as exc:
        raise CLIError(EXIT_IO, f"config file not found: {path}") from exc
    except io.FormatError as exc:
        raise CLIError(EXIT_CONFIG, str(exc)) from exc
    if not isinstance(data, dict):
        raise CLIError(EXIT_CONFIG, f"{path}: top-level JSON value must be an object")
    return data


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise CLIError(EXIT_CONFIG, f"expected comma-separated numbers, got {text!r}") from exc


def train_config_from_dict(d: dict):
    """Build a training configuration; nested ``scenario``/``model`` objects allowed."""
    from .training import TrainConfig, toy_model, toy_scenario

    d = dict(d)
    scenario = dataclasses.asdict(toy_scenario())
    scenario.update(d.pop("scenario", {}) or {})
    model = dataclasses.asdict(toy_model())
    model.update(d.pop("model", {}) or {})
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError({k: "unknown field" for k in unknown})
    cfg = TrainConfig(**d, scenario=ScenarioConfig.from_dict(scenario),
                      model=ModelConfig.from_dict(model))
    return cfg.validate()


def _train_config(args):
    cfg = train_config_from_dict(_load_json(args.config))
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    if getattr(args, "timestamp_mode", None) is not None:
        changes["timestamp_mode"] = args.timestamp_mode
    return dataclasses.replace(cfg, **changes).validate() if changes else cfg


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    raw = _load_json(args.config)
    cfg = ScenarioConfig.from_dict(raw)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed).validate()
    scene = build_scene(cfg)
    frames = [make_async_frame(scene, j) for j in range(scene.num_frames)]
    io.write_frames(args.out, scene, frames, cfg)
    print(f"wrote {len(frames)} frames of {len(scene.agents)} agents to {args.out}")
    return EXIT_OK


def _model_for(params: ModelParams, path: Optional[str], timestamp_mode: Optional[str]) -> ModelConfig:
    from .training import toy_model

    base = dataclasses.asdict(toy_model(d=params.d))
    base.update(_load_json(path))
    cfg = ModelConfig.from_dict(base)
    if timestamp_mode is not None:
        cfg = dataclasses.replace(cfg, timestamp_mode=timestamp_mode).validate()
    if cfg.d != params.d:
        raise ConfigError({"d": f"model width {cfg.d} does not match parameters ({params.d})"})
    return cfg


def cmd_fuse(args) -> int:
    from .training import SceneData, run_frames

    params = ModelParams.load(args.params)
    mcfg = _model_for(params, args.config, args.timestamp_mode)
    scene, frames, _ = io.read_frames(args.frames)
    k = latency_frames(args.latency, scene.frequency)
    frames = inject_latency(frames, k)
    data = SceneData(scene, frames)
    P = params.as_tensors()
    records = []
    for out in run_frames(P, P, data, frames, mcfg, fuse=lambda n: True):
        if out.fusion is None:
            continue
        for det in nms_bev(out.fusion.detections(), 0.1, min_confidence=args.min_confidence):
            records.append(io.detection_record(out.frame.index, det))
    io.write_detections(args.out, records)
    print(f"wrote {len(records)} detections for {len(frames)} frames to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _, frames, metas = io.read_frames(args.frames)
    dets = io.read_detections(args.detections)
    thresholds = tuple(_floats(args.iou)) if args.iou else DEFAULT_IOU_THRESHOLDS
    pairs, errs = [], []
    for meta in metas:
        gts = io.gt_from_meta(meta, args.min_points)
        fd = dets.get(int(meta["index"]), [])
        pairs.append((fd, gts))
        errs.append(center_errors(fd, np.array([g.center[:2] for g in gts]).reshape(-1, 2)))
    if sum(len(g) for _, g in pairs) == 0:
        raise CLIError(EXIT_CONFIG, "no ground-truth boxes to evaluate against")
    res = evaluate_frames(pairs, thresholds)
    err = np.concatenate(errs)
    res.center_error = float(err.mean())
    res.num_center_targets = int(len(err))
    for thr in thresholds:
        print(f"AP@{thr:g} {res.ap[thr]:.4f}  TP {res.tp[thr]}  FP {res.fp[thr]}  FN {res.fn[thr]}")
    print(f"mean center error {res.center_error:.4f} m over {res.num_center_targets} objects")
    if args.out:
        io.write_json(args.out, res.to_dict())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    tol = args.tolerance
    reports = check_ops(points=10, seed=args.seed or 0)
    params = ModelParams.load(args.params) if args.params else None
    if params is None or params.d <= 8:
        batch = None
        if params is not None:
            from .gradcheck import default_batch
            batch = default_batch(d=params.d, seed=args.seed or 0)
        reports += check_all(params, batch, tol, seed=args.seed or 0)
    reports.sort(key=lambda r: -r.max_rel_err)
    bad = [r for r in reports if not r.ok(tol)]
    for r in reports:
        flag = "FAIL" if not r.ok(tol) else "ok"
        print(f"{flag:4} {r.op:24} rel {r.max_rel_err:.3e}  abs {r.max_abs_err:.3e}  {r.worst_slot}")
    if args.out:
        io.write_json(args.out, {"tolerance": tol, "reports": [r.to_dict() for r in reports]})
    print(f"{len(reports) - len(bad)}/{len(reports)} checks below {tol:g}")
    return EXIT_VERIFY if bad else EXIT_OK


def cmd_train_toy(args) -> int:
    from .training import train_toy

    cfg = _train_config(args)
    out = io.ensure_dir(args.out)
    result = train_toy(cfg)
    result.params.save(out / "params.tamp")
    io.atomic_write(out / "loss.log", result.loss_log().encode("utf-8"))
    io.write_json(out / "model.json", cfg.model_config().to_dict())
    metrics = result.metrics.to_dict() if result.metrics is not None else {}
    io.write_json(out / "metrics.json", {"steps": len(result.losses), "diverged": result.diverged,
                                         "final_loss": result.losses[-1] if result.losses else None,
                                         "eval": metrics})
    if result.metrics is not None:
        print(f"held-out mean center error {result.metrics.center_error:.4f} m")
    if result.diverged:
        print("training diverged; saved the last finite parameters", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evalkit import ablate

    cfg = _train_config(args)
    variants = [v.strip() for v in args.variant.split(",")] if args.variant else list(VARIANTS)
    lats = _floats(args.latency) if args.latency else [0.0, 100.0, 200.0]
    thresholds = tuple(_floats(args.iou)) if args.iou else ()
    table = ablate(variants, lats, cfg, iou_thresholds=thresholds)
    text = "mean center error (m)\n" + format_table(table)
    for thr in thresholds:
        text += f"\n\nAP@{thr:g}\n" + format_table(table, iou=thr)
    print(text)
    out = io.ensure_dir(args.out)
    io.atomic_write(out / "ablation.txt", (text + "\n").encode("utf-8"))
    io.write_json(out / "ablation.json", {v: {f"{ms:g}": r.to_dict() for ms, r in row.items()}
                                          for v, row in table.items()})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coopdet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a scene and write a frame directory")
    s.add_argument("--config", help="scenario JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fuse", help="run the fusion model over a frame directory")
    s.add_argument("--frames", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--config", help="model JSON (defaults to the toy model)")
    s.add_argument("--out", required=True, help="detections, JSON lines")
    s.add_argument("--latency", type=float, default=0.0, help="cooperative latency in ms")
    s.add_argument("--timestamp-mode", choices=("pointwise", "framewise"))
    s.add_argument("--min-confidence", type=float, default=0.05)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("eval", help="score detections against a frame directory")
    s.add_argument("--frames", required=True)
    s.add_argument("--detections", required=True)
    s.add_argument("--out")
    s.add_argument("--iou", help="comma-separated IoU thresholds (default 0.5,0.7)")
    s.add_argument("--min-points", type=int, default=3)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="analytic vs numeric gradients")
    s.add_argument("--params")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    s.set_defaults(func=cmd_gradcheck)

    for name, func, helptext in (("train-toy", cmd_train_toy, "train on synthetic scenes"),
                                 ("ablate", cmd_ablate, "variant x latency table")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="training JSON")
        s.add_argument("--out", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--steps", type=int)
        s.add_argument("--timestamp-mode", choices=("pointwise", "framewise"))
        if name == "ablate":
            s.add_argument("--variant", help=f"comma-separated subset of {','.join(VARIANTS)}")
            s.add_argument("--latency", help="comma-separated latencies in ms")
            s.add_argument("--iou")
        s.set_defaults(func=func)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EvalError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError, PermissionError, io.FormatError,
            ParamsFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
