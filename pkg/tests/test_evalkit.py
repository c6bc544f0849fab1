import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopdet.config import ScenarioConfig
from coopdet.evalkit import (EvalError, average_precision, center_errors, evaluate_frames,
                            format_table, inject_latency, latency_frames, match_greedy, nms_bev)
from coopdet.geometry import BBox
from coopdet.scene_sim import build_scene, make_async_frame


@dataclass
class Det:
    bbox: BBox
    confidence: float


def box(x, y=0.0, l=4.0, w=2.0, yaw=0.0):
    return BBox((x, y, 0.0), (l, w, 1.5), yaw)


class TestMatching:
    def test_exact_detections_all_true_positives(self):
        gts = [box(0), box(10), box(20, 5)]
        m = match_greedy([Det(g, 1.0) for g in gts], gts, 0.7)
        assert m.tp.all() and m.gt_matched.all()

    def test_duplicate_on_one_gt(self):
        gts = [box(0)]
        m = match_greedy([Det(box(0.1), 0.6), Det(box(0.0), 0.9)], gts, 0.5)
        assert m.tp.tolist() == [False, True]

    def test_threshold(self):
        gts = [box(0)]
        dets = [Det(box(1.0), 0.8)]  # IoU 0.6
        assert match_greedy(dets, gts, 0.7).tp.tolist() == [False]
        assert match_greedy(dets, gts, 0.5).tp.tolist() == [True]

    def test_ties_by_index(self):
        gts = [box(0)]
        m = match_greedy([Det(box(0), 0.5), Det(box(0), 0.5)], gts, 0.5)
        assert m.tp.tolist() == [True, False]

    def test_bad_threshold(self):
        with pytest.raises(EvalError):
            match_greedy([], [box(0)], 1.0)


class TestAveragePrecision:
    def test_perfect(self):
        gts = [box(0), box(10)]
        r = evaluate_frames([([Det(g, 0.9) for g in gts], gts)], (0.5, 0.7))
        assert r.ap == {0.5: 1.0, 0.7: 1.0}

    def test_no_detections(self):
        assert evaluate_frames([([], [box(0)])], (0.5,)).ap[0.5] == 0.0

    def test_half_recall(self):
        gts = [box(0), box(10), box(20), box(30)]
        r = evaluate_frames([([Det(gts[0], 0.9), Det(gts[2], 0.8)], gts)], (0.5,))
        assert r.ap[0.5] == 0.5
        assert (r.tp[0.5], r.fp[0.5], r.fn[0.5]) == (2, 0, 2)

    def test_interpolation_uses_envelope(self):
        # precision 1, 1/2, 2/3 at recalls 1/2, 1/2, 1 -> area 1/2 * 1 + 1/2 * 2/3
        ap = average_precision(np.array([0.9, 0.8, 0.7]), np.array([True, False, True]), 2)
        assert ap == pytest.approx(0.5 + 1 / 3)

    @settings(max_examples=40)
    @given(st.integers(0, 10_000))
    def test_ap_monotone_in_iou_threshold(self, seed):
        rng = np.random.default_rng(seed)
        gts = [box(12 * k, rng.uniform(-1, 1)) for k in range(5)]
        dets = [Det(box(g.center[0] + rng.normal(0, 0.6), g.center[1] + rng.normal(0, 0.3),
                        yaw=rng.normal(0, 0.1)), float(rng.random())) for g in gts if rng.random() < 0.8]
        dets += [Det(box(rng.uniform(-5, 60), 6.0), float(rng.random())) for _ in range(2)]
        thr = sorted(rng.uniform(0.1, 0.9, 3))
        aps = [evaluate_frames([(dets, gts)], (t,)).ap[t] for t in thr]
        assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))

    @given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), max_size=30), st.integers(1, 30))
    def test_ap_bounded(self, rows, num_gt):
        tp = np.array([t for _, t in rows], dtype=bool)
        if tp.sum() > num_gt:
            return
        ap = average_precision(np.array([c for c, _ in rows]), tp, num_gt)
        assert 0.0 <= ap <= 1.0


class TestCenterErrorAndNms:
    def test_most_confident_detection_claims_nearest_target(self):
        dets = [Det(box(1.0), 0.4), Det(box(0.5), 0.9), Det(box(7.0), 0.99)]
        assert center_errors(dets, np.array([[0.0, 0.0]])).tolist() == [0.5]

    def test_one_to_one(self):
        # lanes 3.5 m apart: each exact detection keeps its own target
        gts = np.array([[0.0, 0.0], [0.0, 3.5]])
        dets = [Det(box(0.0, 3.5), 1.0), Det(box(0.0, 0.0), 1.0)]
        assert center_errors(dets, gts).tolist() == [0.0, 0.0]
        assert center_errors(dets[:1], gts).tolist() == [5.0, 0.0]

    def test_penalty_without_detection(self):
        assert center_errors([Det(box(9.0), 0.9)], np.array([[0.0, 0.0]]), 5.0).tolist() == [5.0]

    def test_nms_keeps_best_of_overlapping(self):
        dets = [Det(box(0.0), 0.5), Det(box(0.2), 0.9), Det(box(10.0), 0.3), Det(box(20.0), 0.01)]
        kept = nms_bev(dets, 0.1, min_confidence=0.05)
        assert [d.confidence for d in kept] == [0.9, 0.3]


SCENE = build_scene(ScenarioConfig(duration=0.6, num_objects=4), seed=2)
FRAMES = [make_async_frame(SCENE, j) for j in range(SCENE.num_frames)]


class TestLatency:
    scene, frames = SCENE, FRAMES

    def test_identity(self):
        assert inject_latency(self.frames, 0) == self.frames

    def test_two_frames(self):
        out = inject_latency(self.frames, 2)
        assert len(out) == len(self.frames) - 2
        for fr in out:
            assert fr.clouds[0] is self.frames[fr.index].clouds[0]
            assert fr.clouds[1] is self.frames[fr.index - 2].clouds[1]
            assert fr.t_aligned == self.frames[fr.index].t_aligned
            lag = fr.clouds[0].tick_start - fr.clouds[1].tick_start
            offset = self.scene.agent(0).tick_offset - self.scene.agent(1).tick_offset
            assert lag == pytest.approx(0.2 + offset)

    def test_errors(self):
        with pytest.raises(EvalError):
            inject_latency(self.frames, -1)
        with pytest.raises(EvalError):
            inject_latency(self.frames, len(self.frames))

    @pytest.mark.parametrize("ms, k", [(0, 0), (100, 1), (200, 2)])
    def test_latency_frames(self, ms, k):
        assert latency_frames(ms, 10.0) == k

    def test_latency_not_whole_frames(self):
        with pytest.raises(EvalError):
            latency_frames(50, 10.0)


def test_format_table():
    r = evaluate_frames([([Det(box(0), 0.9)], [box(0)])], (0.5,))
    r.center_error = 0.25
    text = format_table({"full": {0: r, 100: r}})
    assert text.splitlines()[0].split() == ["variant", "0ms", "100ms"]
    assert "0.250" in text
    assert "1.000" in format_table({"full": {0: r}}, iou=0.5)
