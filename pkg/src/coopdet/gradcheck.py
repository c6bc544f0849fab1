"""Central-difference verification of every backward pass.

Three levels are checked: single tape ops, the parametric layers built from
them, and the complete pipeline loss with respect to every parameter tensor.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .fusion import layers as L
from .fusion.params import ModelParams
from .fusion.tensor import REGISTRY, Tensor, add, mul, tsum
from .fusion import tensor as T
from .geometry import Pose
from .scene_sim import rng_for

DEFAULT_TOLERANCE = 1e-4
DEFAULT_EPS = 1e-5


class GradcheckError(ValueError):
    pass


@dataclass
class GradReport:
    op: str
    max_abs_err: float
    max_rel_err: float
    worst_slot: str

    def ok(self, tol: float = DEFAULT_TOLERANCE) -> bool:
        return self.max_rel_err < tol

    def to_dict(self) -> dict:
        return {"op": self.op, "max_abs_err": self.max_abs_err, "max_rel_err": self.max_rel_err,
                "worst_slot": self.worst_slot}


def rel_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_diff_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = DEFAULT_EPS,
                     coords: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``x``.

    With ``coords`` only those flat positions are probed; the rest of the
    returned array is zero.
    """
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn(x))
        flat[i] = orig - eps
        fm = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradcheckError(f"non-finite function value probing coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


# ---------------------------------------------------------------------------
# single ops and layers


def _case_inputs(name: str, rng: np.random.Generator):
    """Inputs, keyword arguments and the differentiable slots of one op case."""
    n = lambda *s: rng.normal(size=s)
    if name == "add":
        return [n(3, 4), n(1, 4)], {}, (0, 1)
    if name == "mul":
        return [n(3, 4), n(3, 1)], {}, (0, 1)
    if name == "linear":
        return [n(3, 4), n(2, 4), n(1, 2)], {}, (0, 1, 2)
    if name in ("tanh", "sigmoid", "exp"):
        return [n(3, 4)], {}, (0,)
    if name == "layer_norm":
        return [n(3, 5)], {"eps": 1e-5}, (0,)
    if name == "attention":
        return [n(3, 4), n(5, 4), n(5, 4)], {}, (0, 1, 2)
    if name == "concat":
        return [n(2, 3), n(4, 3)], {"axis": 0}, (0, 1)
    if name == "rows":
        return [n(5, 3)], {"idx": np.array([4, 0, 4, 2])}, (0,)
    if name == "scatter":
        return [n(3, 2)], {"idx": np.array([5, 1, 3]), "n": 6}, (0,)
    if name == "sum":
        return [n(3, 4)], {}, (0,)
    if name == "focal":
        y = (rng.uniform(size=(6, 1)) < 0.5).astype(float)
        return [n(6, 1)], {"y": y, "alpha": 0.25, "gamma": 2.0}, (0,)
    if name == "smooth_l1":
        # keep residuals away from the kink at |r| = beta
        target = n(4, 3)
        r = rng.uniform(0.05, 0.9, size=(4, 3)) * rng.choice([-1, 1], size=(4, 3))
        r[0] *= 3.0
        return [target + r], {"target": target, "weight": rng.uniform(0.5, 2, (4, 3)),
                              "beta": 1.0}, (0,)
    raise GradcheckError(f"no gradient case for op {name!r}")


def check_op(name: str, points: int = 10, seed: int = 0, eps: float = DEFAULT_EPS) -> GradReport:
    """Analytic vs numeric gradients of one registered op at random points."""
    fn_cls = REGISTRY[name]
    worst = (0.0, 0.0, "")
    for p in range(points):
        rng = rng_for(seed, 31, p, sum(map(ord, name)))
        arrays, kw, slots = _case_inputs(name, rng)
        out0 = fn_cls.forward(*arrays, **kw)[0]
        proj = rng.normal(size=np.shape(out0))

        def scalar(arrs):
            return float(np.sum(fn_cls.forward(*arrs, **kw)[0] * proj))

        tensors = [Tensor(a, requires_grad=(i in slots)) for i, a in enumerate(arrays)]
        out = fn_cls.apply(*tensors, **kw)
        out.backward(proj)
        for s in slots:
            def f(x, s=s):
                arrs = list(arrays)
                arrs[s] = x
                return scalar(arrs)

            num = finite_diff_grad(f, arrays[s], eps)
            ana = tensors[s].grad if tensors[s].grad is not None else np.zeros_like(arrays[s])
            worst = _update(worst, ana, num, f"input{s}@point{p}")
    return GradReport(name, worst[0], worst[1], worst[2])


def _update(worst, ana, num, slot):
    abs_err = float(np.max(np.abs(ana - num))) if np.size(num) else 0.0
    rel = float(np.max(rel_error(ana, num))) if np.size(num) else 0.0
    if rel > worst[1] or (rel == worst[1] and abs_err > worst[0]):
        return (max(abs_err, worst[0]), rel, slot)
    return (max(abs_err, worst[0]), worst[1], worst[2])


def _layer_cases(d: int) -> dict[str, Callable]:
    """Parametric layers as functions of (param dict, rng) returning a tensor."""
    ref = Pose(3.0, -2.0, 0.0, 0.4)

    def x(rng, n):
        return rng.normal(size=(n, d))

    def motion(rng, n):
        tau = rng.uniform(0.0, 0.3, n)
        poses = np.column_stack([rng.normal(0, 20, (n, 2)), np.zeros(n), rng.uniform(-3, 3, n)])
        return tau, L.relative_poses(ref, poses), L.rotate_to(ref, rng.normal(0, 5, (n, 2)))

    return {
        "feat_embed": lambda P, rng: L.dense(P, "feat_embed", rng.normal(size=(4, 5))),
        "pos_mlp": lambda P, rng: L.pos_embed(P, ref, rng.normal(0, 30, (4, 2))),
        "time_mlp": lambda P, rng: L.time_embed(P, rng.uniform(0, 0.3, 4), 0.35),
        "motion_mlp": lambda P, rng: L.motion_embed(P, *motion(rng, 4), 0.35),
        "mln_pos": lambda P, rng: L.mln(P, "mln_pos", x(rng, 4), x(rng, 4)),
        "mln_ctx": lambda P, rng: L.mln(P, "mln_ctx", x(rng, 4), x(rng, 4)),
        "mln_tgt": lambda P, rng: L.mln(P, "mln_tgt", x(rng, 4), x(rng, 4)),
        "hyb": lambda P, rng: L.attention_block(P, "hyb", x(rng, 3), x(rng, 5), x(rng, 5)),
        "cross": lambda P, rng: L.attention_block(P, "cross", x(rng, 3), x(rng, 5), x(rng, 5)),
        "roi_local": lambda P, rng: _head_sum(L.head(P, "roi_local", x(rng, 4))),
        "lqdet": lambda P, rng: _head_sum(L.head(P, "lqdet", x(rng, 4))),
        "gqdet": lambda P, rng: _head_sum(L.head(P, "gqdet", x(rng, 4))),
        "roi_global": lambda P, rng: L.dense(P, "roi_global.cls", x(rng, 4)),
    }


def _head_sum(out):
    cls, reg = out
    return T.concat([cls, reg], axis=1)


def _random_params(d: int, rng: np.random.Generator) -> ModelParams:
    base = ModelParams.init(d, seed=int(rng.integers(1 << 30)))
    # move MLN generators and biases off their zero initialization
    return ModelParams({k: v + rng.normal(0.0, 0.3, v.shape) for k, v in base.tensors.items()})


def check_layer(name: str, points: int = 10, seed: int = 0, d: int = 4,
                eps: float = DEFAULT_EPS) -> GradReport:
    """Gradients of a layer's output (randomly projected) w.r.t. its parameters."""
    build = _layer_cases(d)[name]
    worst = (0.0, 0.0, "")
    for p in range(points):
        rng = rng_for(seed, 37, p, sum(map(ord, name)))
        params = _random_params(d, rng)
        state = rng.bit_generator.state
        out0 = build(params.as_tensors(), rng)
        proj = rng.normal(size=out0.shape)

        def run(P):
            rng.bit_generator.state = state
            return build(P, rng)

        P = params.as_tensors(requires_grad=True)
        out = run(P)
        out.backward(proj)
        used = [k for k, t in P.items() if t.grad is not None]
        for k in used:
            def f(xv, k=k):
                Q = params.as_tensors()
                Q[k] = Tensor(xv)
                return float(np.sum(run(Q).data * proj))

            num = finite_diff_grad(f, params[k], eps)
            worst = _update(worst, P[k].grad, num, f"{k}@point{p}")
    return GradReport(name, worst[0], worst[1], worst[2])


def check_ops(points: int = 10, seed: int = 0) -> list[GradReport]:
    reports = [check_op(n, points, seed) for n in sorted(REGISTRY)]
    reports += [check_layer(n, points, seed) for n in _layer_cases(4)]
    return sorted(reports, key=lambda r: -r.max_rel_err)


# ---------------------------------------------------------------------------
# whole pipeline


def default_batch(d: int = 4, seed: int = 0):
    """A small cooperative window for pipeline-level checks."""
    from .training import TrainConfig, prepare_scenes, toy_model, toy_scenario

    cfg = TrainConfig(seed=seed, model=toy_model(d=d, k_roi_local=12, k_roi_global=6, k_q=4),
                      scenario=toy_scenario(duration=0.4))
    data = prepare_scenes(cfg.scenario, [seed])[0]
    frames = data.frames[:3]
    return cfg, data, frames, {0: 0.3, 1: -0.2}


def check_all(params: Optional[ModelParams] = None, batch=None, tolerance: float = DEFAULT_TOLERANCE,
              coords_per_tensor: int = 4, seed: int = 0, eps: float = DEFAULT_EPS) -> list[GradReport]:
    """Check d(loss)/d(parameter) for every parameter tensor of the pipeline.

    History frames and cooperative agents are run with the unperturbed
    parameters on both the analytic and the numeric side, matching the
    gradient path used in training.  A few random coordinates of each tensor
    are probed.  Reports are sorted by descending relative error.
    """
    from .training import window_loss

    cfg, data, frames, angles = batch if batch is not None else default_batch(seed=seed)
    mcfg = cfg.model_config()
    if params is None:
        params = _random_params(mcfg.d, rng_for(seed, 41))
    if params.d != mcfg.d:
        raise GradcheckError(f"parameter width {params.d} does not match model width {mcfg.d}")
    hist = params.as_tensors()

    P = params.as_tensors(requires_grad=True)
    loss, _ = window_loss(hist, P, data, frames, cfg, angles)
    if loss is None:
        raise GradcheckError("sample batch produced no loss terms")
    loss.backward()

    rng = rng_for(seed, 43)
    reports = []
    for k in params.names():
        ana = P[k].grad if P[k].grad is not None else np.zeros_like(params[k])
        size = params[k].size
        coords = rng.choice(size, size=min(coords_per_tensor, size), replace=False)

        def f(xv, k=k):
            Q = params.as_tensors()
            Q[k] = Tensor(xv)
            val, _ = window_loss(hist, Q, data, frames, cfg, angles)
            return float(val.data)

        num = finite_diff_grad(f, params[k], eps, coords)
        a, n = ana.reshape(-1)[coords], num.reshape(-1)[coords]
        worst = int(np.argmax(rel_error(a, n)))
        reports.append(GradReport(k, float(np.max(np.abs(a - n))), float(np.max(rel_error(a, n))),
                                  f"{k}[{int(coords[worst])}]"))
    return sorted(reports, key=lambda r: -r.max_rel_err)


@contextlib.contextmanager
def corrupt_backward(op: str, slot: int = 0, scale: float = 1.5) -> Iterator[None]:
    """Temporarily scale one input gradient of a registered op (mutation test)."""
    fn_cls = REGISTRY[op]
    original = fn_cls.__dict__["backward"]
    inner = original.__func__

    def broken(ctx, g):
        grads = list(inner(ctx, g))
        if slot < len(grads) and grads[slot] is not None:
            grads[slot] = grads[slot] * scale
        return tuple(grads)

    fn_cls.backward = staticmethod(broken)
    try:
        yield
    finally:
        fn_cls.backward = original
