import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopdet.config import ModelConfig
from coopdet.fusion import layers as L
from coopdet.fusion.losses import decode_boxes, encode_boxes, focal_loss, smooth_l1
from coopdet.fusion.memory import MemoryQueue, QueryBatch, QueueError
from coopdet.fusion.model import FusionError, RoIOutput, RoISet, mta_align, spatial_fusion, temp_fusion_step
from coopdet.fusion.params import ModelParams, ParamsFormatError
from coopdet.fusion.tensor import Tensor, attention, focal_loss_logits, layer_norm, linear
from coopdet.geometry import Pose
from coopdet.scene_sim import AgentState

from .oracles import softmax_attention

D = 8


PARAMS = ModelParams.init(d=D, seed=3)


@pytest.fixture
def params():
    return PARAMS


def batch(positions, d=D, seed=0, scores=None):
    rng = np.random.default_rng(seed)
    n = len(positions)
    return QueryBatch(np.asarray(positions, dtype=float).reshape(n, 2), rng.normal(size=(n, d)),
                      rng.uniform(0, 0.1, n), np.zeros((n, 4)), np.zeros((n, 2)),
                      rng.random(n) if scores is None else scores)


def parts(qbs):
    return [(qb, Tensor(qb.contexts)) for qb in qbs]


class TestPrimitives:
    def test_linear(self):
        assert linear(np.eye(2), np.eye(2), np.zeros(2)).data.tolist() == np.eye(2).tolist()
        assert linear(np.ones((1, 2)), np.zeros((3, 2)), np.array([1.0, 2, 3])).data.tolist() == [[1, 2, 3]]
        out = linear(np.array([[1.0, 1.0]]), np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([1.0, 0.0]))
        assert out.data.tolist() == [[4.0, 1.0]]

    def test_layer_norm(self):
        np.testing.assert_allclose(layer_norm(np.array([[1.0, 3.0]])).data,
                                   [[-1 / math.sqrt(1 + 1e-5), 1 / math.sqrt(1 + 1e-5)]], atol=1e-12)
        assert layer_norm(np.full((1, 4), 7.0)).data.tolist() == [[0.0] * 4]

    def test_attention_examples(self):
        v = np.array([[1.0, 2.0]])
        assert attention(np.ones((3, 2)), np.ones((1, 2)), v).data.tolist() == [[1.0, 2.0]] * 3
        V = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_allclose(attention(np.zeros((2, 3)), np.ones((5, 3)), V).data,
                                   np.tile(V.mean(axis=0), (2, 1)), atol=1e-14)
        out = attention(np.array([[1.0]]), np.array([[1.0], [0.0]]), np.array([[1.0], [0.0]]))
        assert out.data[0, 0] == pytest.approx(math.e / (math.e + 1))

    @settings(max_examples=30)
    @given(st.integers(1, 6), st.integers(1, 9), st.integers(1, 5), st.integers(0, 1000))
    def test_attention_matches_loop(self, m, n, d, seed):
        rng = np.random.default_rng(seed)
        Q, K, V = rng.normal(size=(m, d)), rng.normal(size=(n, d)), rng.normal(size=(n, 3))
        np.testing.assert_allclose(attention(Q, K, V).data, softmax_attention(Q, K, V), atol=1e-12)

    def test_mln_identity_when_generators_zero(self, params):
        P = params.as_tensors()
        rng = np.random.default_rng(1)
        x, m = rng.normal(size=(4, D)), rng.normal(size=(4, D))
        np.testing.assert_allclose(L.mln(P, "mln_pos", x, m).data, layer_norm(x).data, atol=1e-15)

    def test_mln_hand_case(self):
        P = {"s.gamma.W": Tensor(np.array([[0.0, 0.0], [1.0, 0.0]])),
             "s.beta.W": Tensor(np.array([[0.5, 0.0], [0.0, 0.0]]))}
        out = L.mln(P, "s", np.array([[1.0, 3.0]]), np.array([[1.0, 0.0]]))
        assert out.data[0] == pytest.approx((-0.5, 2.0), abs=1e-4)

    def test_zero_mlp_gives_bias(self):
        P = {"m.0.W": Tensor(np.zeros((3, 2))), "m.0.b": Tensor(np.zeros((1, 3))),
             "m.1.W": Tensor(np.zeros((2, 3))), "m.1.b": Tensor(np.array([[0.3, -1.0]]))}
        out = L.mlp(P, "m", np.random.default_rng(0).normal(size=(5, 2)))
        assert out.data.tolist() == [[0.3, -1.0]] * 5


class TestLosses:
    def test_focal_examples(self):
        assert focal_loss(1 - 1e-12, 1) == pytest.approx(0.0, abs=1e-12)
        assert focal_loss(0.5, 1) == pytest.approx(0.25 * 0.25 * math.log(2), rel=1e-12)
        p = 0.3
        assert focal_loss(p, 1, alpha=0.5, gamma=0.0) == pytest.approx(-0.5 * math.log(p))
        assert focal_loss(p, 0, alpha=0.5, gamma=0.0) == pytest.approx(-0.5 * math.log(1 - p))

    @given(st.floats(-20, 20), st.sampled_from([0.0, 1.0]))
    def test_logit_focal_matches_probability_form(self, z, y):
        p = 1 / (1 + math.exp(-z))
        if not 1e-12 < p < 1 - 1e-12:
            return
        got = float(focal_loss_logits(np.array([[z]]), np.array([[y]])).data)
        # 1 - p cancels near |z| = 20, so the probability form is only good to ~1e-7 there
        assert got == pytest.approx(focal_loss(p, int(y)), rel=1e-6, abs=1e-12)

    @pytest.mark.parametrize("x, want", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
    def test_smooth_l1(self, x, want):
        assert smooth_l1(x) == pytest.approx(want)

    @given(st.floats(-30, 30), st.floats(-30, 30), st.floats(-math.pi, math.pi),
           st.floats(-math.pi, math.pi))
    def test_box_encoding_round_trip(self, x, y, yaw, ref_yaw):
        anchor = np.array([[x * 0.9, y * 1.1]])
        box = np.array([[x, y, 0.8, 4.5, 1.8, 1.6, yaw]])
        ref = Pose(3.0, -2.0, 0.0, ref_yaw)
        dec = decode_boxes(anchor, ref, encode_boxes(anchor, ref, box))
        np.testing.assert_allclose(dec[0, :6], box[0, :6], atol=1e-9)
        assert abs(math.remainder(dec[0, 6] - yaw, 2 * math.pi)) < 1e-9


class TestParams:
    def test_round_trip_bytes(self, params):
        back = ModelParams.from_bytes(params.to_bytes())
        assert back.names() == params.names() or sorted(back.names()) == sorted(params.names())
        for k in params:
            assert np.array_equal(back[k], params[k])

    def test_bad_magic(self, params):
        with pytest.raises(ParamsFormatError):
            ModelParams.from_bytes(b"XXXX" + params.to_bytes()[4:])

    def test_truncated(self, params):
        with pytest.raises(ParamsFormatError):
            ModelParams.from_bytes(params.to_bytes()[:-3])

    def test_shape_checked(self, params):
        t = dict(params.tensors)
        t["hyb.q.W"] = np.zeros((D, D + 1))
        with pytest.raises(ParamsFormatError):
            ModelParams(t)


class TestMotionAlignment:
    def test_time_enters_position_stream_only(self, params):
        P = params.as_tensors()
        ego = AgentState(0, Pose(1.0, 2.0, 1.8, 0.3), (5.0, 0.0), 0.0)
        ctx = Tensor(np.tile(np.random.default_rng(0).normal(size=(1, D)), (2, 1)))
        pos = np.array([[4.0, 4.0], [4.0, 4.0]])
        pose = np.tile(ego.pose.as_array(), (2, 1))
        vel = np.tile([5.0, 0.0], (2, 1))
        mo = mta_align(P, pos, ctx, np.array([0.95, 0.95]), pose, vel, ego, 1.0, "ctx")
        assert np.array_equal(mo.content.data[0], mo.content.data[1])
        assert np.array_equal(mo.position.data[0], mo.position.data[1])
        # with zero-initialised MLN generators content does not see time at all
        mo2 = mta_align(P, pos, ctx, np.array([0.95, 0.7]), pose, vel, ego, 1.0, "ctx")
        assert np.array_equal(mo2.content.data[0], mo2.content.data[1])
        assert not np.allclose(mo2.position.data[0], mo2.position.data[1])

    def test_motion_vector_at_reference(self):
        m = L.motion_vector(np.array([2.0]), np.zeros((1, 4)), np.zeros((1, 2)), 2.0)
        assert m.tolist() == [[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]]


def roi_set(n, d=D, seed=0):
    rng = np.random.default_rng(seed)
    return RoISet(rng.uniform(-10, 10, (n, 2)), Tensor(rng.normal(size=(n, d))),
                  rng.uniform(0.9, 1.0, n), rng.uniform(0.9, 1.0, n), np.arange(n))


class TestTempFusion:
    cfg = ModelConfig(d=D, k_roi_local=4, k_roi_global=2, k_q=2, T=3)
    ego = AgentState(0, Pose(0.0, 0.0, 1.8, 0.0), (5.0, 0.0), 0.0)

    def rois(self, seed=0):
        return RoIOutput(roi_set(4, seed=seed), roi_set(2, seed=seed + 50), Tensor(np.zeros((4, 1))),
                         Tensor(np.zeros((4, 8))))

    def test_cold_start(self, params):
        out = temp_fusion_step(params, self.rois(), MemoryQueue(3, 2), self.ego, 1.0, self.cfg, 0)
        assert len(out.queries) == 4
        assert len(out.memory) == 1 and len(out.memory.slots[0].queries) == 2
        assert np.all(out.memory.slots[0].queries.tau == 1.0)

    def test_newest_slot_joins_queries(self, params):
        mem = MemoryQueue(3, 2)
        for j in range(4):
            out = temp_fusion_step(params, self.rois(j), mem, self.ego, 0.1 * (j + 1), self.cfg, j)
            mem = out.memory
            mem.check()
        assert len(out.queries) == 4 + 2
        assert mem.frame_indices() == [1, 2, 3]

    def test_without_temporal_fusion_memory_untouched(self, params):
        cfg = replace(self.cfg, temp_fusion=False)
        mem = MemoryQueue(3, 2)
        out = temp_fusion_step(params, self.rois(), mem, self.ego, 1.0, cfg, 0)
        assert out.memory is mem and len(out.queries) == 4

    def test_empty_rois_rejected(self, params):
        empty = RoIOutput(roi_set(0), roi_set(0), Tensor(np.zeros((0, 1))), Tensor(np.zeros((0, 8))))
        with pytest.raises(FusionError):
            temp_fusion_step(params, empty, MemoryQueue(), self.ego, 1.0, self.cfg, 0)


class TestSpatialFusion:
    cfg = ModelConfig(d=D)
    ego_pose = Pose(0.5, -0.3, 1.8, 0.2)

    def test_single_agent_is_self_attention(self, params):
        qb = batch([[0.1, 0.1], [3.3, -2.0], [10.0, 4.0]], seed=1)
        out = spatial_fusion(params, parts([qb]), self.ego_pose, self.cfg)
        assert len(out.positions) == 3
        order = np.lexsort((np.floor(qb.positions[:, 1] / 0.8), np.floor(qb.positions[:, 0] / 0.8)))
        ctx = qb.contexts[order]
        pe = L.pos_embed(params.as_tensors(), self.ego_pose, out.positions).data
        assert np.array_equal(out.features.data, attention(ctx + pe, ctx + pe, ctx).data)
        np.testing.assert_allclose(out.features.data, softmax_attention(ctx + pe, ctx + pe, ctx),
                                   atol=1e-12)

    def test_two_agent_key_layout(self, params):
        ego = batch([[0.0, 0.0]], seed=2)
        coop = batch([[5.0, 5.0]], seed=3)
        out = spatial_fusion(params, parts([ego, coop]), self.ego_pose, self.cfg)
        assert len(out.positions) == 2
        pe = L.pos_embed(params.as_tensors(), self.ego_pose, out.positions).data
        z = np.zeros((1, D))
        q = np.vstack([ego.contexts, z])
        k_rows = np.vstack([ego.contexts, z, z, coop.contexts])  # rows 2, 3 hold one pad each
        want = softmax_attention(q + pe, k_rows + np.vstack([pe, pe]), k_rows)
        np.testing.assert_allclose(out.features.data, want, atol=1e-12)
        assert out.sources == [[0], [1]]

    def test_duplicates_keep_best_score(self, params):
        qb = batch([[0.1, 0.1], [0.3, 0.2]], seed=4, scores=np.array([0.2, 0.9]))
        solo = qb.take([1])
        a = spatial_fusion(params, parts([qb]), self.ego_pose, self.cfg)
        b = spatial_fusion(params, parts([solo]), self.ego_pose, self.cfg)
        assert np.array_equal(a.features.data, b.features.data)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4))
    def test_permutation_invariance(self, seed, n_coop):
        rng = np.random.default_rng(seed)
        qbs = [batch(rng.uniform(-20, 20, (rng.integers(1, 8), 2)), seed=seed + a)
               for a in range(n_coop + 1)]
        base = spatial_fusion(PARAMS, parts(qbs), self.ego_pose, self.cfg)
        coop = [qbs[a].take(rng.permutation(len(qbs[a]))) for a in rng.permutation(np.arange(1, n_coop + 1))]
        ego = qbs[0].take(rng.permutation(len(qbs[0])))
        other = spatial_fusion(PARAMS, parts([ego] + coop), self.ego_pose, self.cfg)
        assert np.array_equal(base.positions, other.positions)
        assert np.abs(base.features.data - other.features.data).max() <= 1e-9

    def test_empty_rejected(self, params):
        with pytest.raises(FusionError):
            spatial_fusion(params, parts([QueryBatch.empty(D)]), self.ego_pose, self.cfg)

    def test_shift_invariance_of_pose_relative_embedding(self, params):
        # moving ego and every query by the same rigid offset leaves fused features unchanged
        qbs = [batch([[1.1, 2.1], [7.3, -3.1]], seed=5), batch([[1.1, 2.1], [-4.1, 0.1]], seed=6)]
        shift = np.array([16.0, -8.0])  # multiple of the union cell keeps the grid aligned
        moved = [QueryBatch(q.positions + shift, q.contexts, q.tau, q.poses, q.velocities, q.scores)
                 for q in qbs]
        a = spatial_fusion(params, parts(qbs), self.ego_pose, self.cfg)
        b = spatial_fusion(params, parts(moved),
                           Pose(self.ego_pose.x + shift[0], self.ego_pose.y + shift[1], 1.8,
                                self.ego_pose.yaw), self.cfg)
        np.testing.assert_allclose(a.features.data, b.features.data, atol=1e-9)


class TestMemoryQueue:
    def test_fuzz_fifo_and_capacity(self):
        rng = np.random.default_rng(11)
        cap, per = 4, 5
        mem = MemoryQueue(cap, per)
        pushed = []
        frame = 0
        for _ in range(10_000):
            frame += int(rng.integers(1, 3))
            n = int(rng.integers(0, 9))
            qb = QueryBatch(rng.normal(size=(n, 2)), rng.normal(size=(n, 3)), np.zeros(n),
                            np.zeros((n, 4)), np.zeros((n, 2)), rng.integers(0, 3, n).astype(float))
            mem = mem.push(frame, qb)
            pushed.append((frame, qb))
            assert len(mem) == min(cap, len(pushed))
            newest = mem.newest()
            assert newest.frame_index == frame and len(newest.queries) == min(per, n)
            # kept queries are the best-scored ones, stable on ties
            want = np.lexsort((np.arange(n), -qb.scores))[:per]
            assert np.array_equal(newest.queries.positions, qb.positions[want])
            mem.check()
        assert mem.frame_indices() == [f for f, _ in pushed[-cap:]]

    def test_rejects_stale_frame(self):
        mem = MemoryQueue(2, 2).push(3, batch([[0, 0]], d=3))
        with pytest.raises(QueueError):
            mem.push(3, batch([[0, 0]], d=3))

    def test_push_returns_new_queue(self):
        mem = MemoryQueue(2, 2)
        after = mem.push(0, batch([[0, 0]], d=3))
        assert len(mem) == 0 and len(after) == 1

    def test_query_round_trip(self):
        qb = batch([[1, 2], [3, 4]], d=3)
        back = QueryBatch.from_queries(qb.to_queries())
        for f in ("positions", "contexts", "tau", "poses", "velocities", "scores"):
            assert np.array_equal(getattr(back, f), getattr(qb, f))
