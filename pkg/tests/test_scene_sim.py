import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopdet.config import ScenarioConfig
from coopdet.geometry import Pose, transform_points
from coopdet.scene_sim import (AgentState, ObjectTrack, Scene, SimulationError, assemble_subframes,
                              build_scene, gt_boxes_at, make_async_frame, object_pose_at,
                              simulate_scan, simulate_subframes)

DIMS = (4.5, 1.8, 1.6)


def straight_track(x0, y, speed, oid=0, t_end=2.0, dims=DIMS):
    return ObjectTrack(oid, dims, ((0.0, Pose(x0, y, 0.8, 0.0)),
                                   (t_end, Pose(x0 + speed * t_end, y, 0.8, 0.0))))


def static_agent(aid, x=0.0, y=0.0, offset=0.0):
    return AgentState(aid, Pose(x, y, 1.8, 0.0), (0.0, 0.0), offset)


def world_points(scene, cloud):
    """World-frame xy of every point using the sensor pose at its emission time."""
    agent = scene.agent(cloud.agent_id)
    poses = agent.poses_at(cloud.t)
    c, s = np.cos(poses[:, 3]), np.sin(poses[:, 3])
    x, y = cloud.points[:, 0], cloud.points[:, 1]
    return np.column_stack([poses[:, 0] + c * x - s * y, poses[:, 1] + s * x + c * y])


def boundary_residual(track, xy, t):
    """Distance of each point from the box outline at the given times."""
    out = np.empty(len(xy))
    for n, (p, tn) in enumerate(zip(xy, t)):
        pose = object_pose_at(track, float(tn))
        u, v = transform_points(pose.inverse(), p.reshape(1, 2))[0]
        hl, hw = track.dims[0] / 2, track.dims[1] / 2
        if abs(u) <= hl and abs(v) <= hw:
            out[n] = min(hl - abs(u), hw - abs(v))
        else:
            out[n] = math.hypot(max(abs(u) - hl, 0), max(abs(v) - hw, 0))
    return out


def fig2_scene(speed=16.67):
    # ego sweeps the object at azimuth 126 deg (0.135 s), the partner at -90 deg (0.025 s)
    r, te, tc = 15.0, 0.135, 0.025
    ye = r * math.sin(math.radians(126))
    x0 = r * math.cos(math.radians(126)) - speed * te
    ego = static_agent(0, offset=0.05)
    coop = static_agent(1, x=x0 + speed * tc, y=ye + 15.0)
    return Scene((ego, coop), (straight_track(x0, ye, speed),), 0.5, 0, 3)


class TestBuildScene:
    def test_deterministic(self):
        cfg = ScenarioConfig(duration=0.5, num_objects=4)
        assert build_scene(cfg, seed=5) == build_scene(cfg, seed=5)
        assert build_scene(cfg, seed=5) != build_scene(cfg, seed=6)

    def test_explicit_offsets(self):
        sc = build_scene(ScenarioConfig(tick_offsets=[0.0, 0.05]), seed=1)
        assert sc.agents[0].tick_offset - sc.agents[1].tick_offset == pytest.approx(-0.05)

    def test_no_objects_gives_empty_clouds(self):
        sc = build_scene(ScenarioConfig(duration=0.3, num_objects=0), seed=0)
        assert sc.objects == ()
        fr = make_async_frame(sc, 1)
        assert all(len(c) == 0 for c in fr.clouds.values())

    def test_subframe_offsets_are_whole_subframes(self):
        sc = build_scene(ScenarioConfig(tick_offsets="subframe", num_agents=4), seed=2)
        for a in sc.agents:
            n = a.tick_offset / 0.01
            assert abs(n - round(n)) < 1e-9 and 1 <= round(n) <= 5


class TestTracks:
    def test_waypoint_exact(self):
        tr = straight_track(3.0, 1.0, 10.0)
        assert object_pose_at(tr, 0.0) == tr.waypoints[0][1]
        assert object_pose_at(tr, 2.0) == tr.waypoints[1][1]

    def test_constant_velocity(self):
        tr = ObjectTrack(0, DIMS, ((0.0, Pose(0, 0, 0, 0)), (1.0, Pose(10, 0, 0, 0))))
        assert object_pose_at(tr, 0.15).x == pytest.approx(1.5)

    def test_turning_track(self):
        tr = ObjectTrack(0, DIMS, ((0.0, Pose(0, 0, 0, 0)), (1.0, Pose(0, 0, 0, math.pi / 2))))
        assert object_pose_at(tr, 0.5).yaw == pytest.approx(math.pi / 4)

    def test_outside_span_rejected(self):
        with pytest.raises(SimulationError):
            object_pose_at(straight_track(0, 0, 1.0), 2.5)


class TestScan:
    def test_static_object_at_quarter_turn_left(self):
        sc = Scene((static_agent(0),), (straight_track(0.0, 12.0, 0.0),), 0.5, 0, 0)
        cloud = simulate_scan(sc, 0, 2)
        assert len(cloud) > 0
        assert np.median(cloud.t) == pytest.approx(0.2 + 0.075, abs=2e-3)

    def test_empty_scene(self):
        sc = Scene((static_agent(0),), (), 0.5, 0, 0)
        assert len(simulate_scan(sc, 0, 0)) == 0

    def test_timestamps_follow_sweep(self):
        sc = build_scene(ScenarioConfig(duration=0.3, num_objects=8), seed=4)
        for a in sc.agents:
            cloud = simulate_scan(sc, a.id, 1)
            t = cloud.t
            assert np.all(np.diff(t) > 0)
            assert t.min() >= cloud.tick_start and t.max() < cloud.tick_end
            az = np.arctan2(cloud.points[:, 1], cloud.points[:, 0])
            frac = (az + math.pi) / (2 * math.pi)
            np.testing.assert_allclose(t, cloud.tick_start + frac / a.frequency, atol=1e-9)

    def test_points_lie_on_object_at_their_own_time(self):
        sc = Scene((AgentState(0, Pose(0, 0, 1.8, 0), (8.0, 0.0), 0.02),),
                   (straight_track(-5.0, 6.0, 20.0),), 0.5, 0, 11)
        cloud = simulate_scan(sc, 0, 1)
        xy = world_points(sc, cloud)
        assert boundary_residual(sc.objects[0], xy, cloud.t).max() < 1e-6

    @settings(max_examples=15, deadline=None)
    @given(st.floats(-25, 25), st.floats(0.0, 0.099))
    def test_implied_displacement_is_velocity_times_dt(self, speed, offset):
        sc = Scene((static_agent(0, offset=offset),), (straight_track(-10.0, 8.0, speed),), 0.3, 0, 1)
        cloud = simulate_scan(sc, 0, 0)
        if len(cloud) < 2:
            return
        xy = world_points(sc, cloud)
        tr = sc.objects[0]
        ref = 0.5 * (cloud.tick_start + cloud.tick_end)
        # shift each point back to the reference time; all must then fit the box there
        shifted = xy - np.column_stack([speed * (cloud.t - ref), np.zeros(len(xy))])
        assert boundary_residual(tr, shifted, np.full(len(xy), ref)).max() < 1e-6


class TestTwoAgentShift:
    def test_observed_shift_exceeds_1_8_m(self):
        sc = fig2_scene()
        fr = make_async_frame(sc, 0)
        gap = np.median(fr.clouds[0].t) - np.median(fr.clouds[1].t)
        assert gap == pytest.approx(0.11, abs=2e-3)
        tr = sc.objects[0]
        shift = (object_pose_at(tr, float(np.median(fr.clouds[0].t))).x
                 - object_pose_at(tr, float(np.median(fr.clouds[1].t))).x)
        assert shift >= 1.8
        assert shift == pytest.approx(1.83, abs=0.1)

    def test_alignment_time_and_scan_intervals(self):
        fr = make_async_frame(fig2_scene(), 0)
        assert fr.t_aligned == pytest.approx(0.15)
        assert (fr.clouds[1].tick_start, fr.clouds[1].tick_end) == pytest.approx((0.0, 0.1))
        assert (fr.clouds[0].tick_start, fr.clouds[0].tick_end) == pytest.approx((0.05, 0.15))

    def test_single_agent_aligns_to_own_scan_end(self):
        sc = Scene((static_agent(0, offset=0.03),), (), 0.5, 0, 0)
        fr = make_async_frame(sc, 2)
        assert list(fr.clouds) == [0]
        assert fr.t_aligned == pytest.approx(fr.clouds[0].tick_end)


class TestGroundTruth:
    def test_constant_velocity_box(self):
        sc = Scene((static_agent(0, offset=0.05),), (straight_track(0.0, 3.0, 10.0),), 0.5, 0, 0)
        (oid, box), = gt_boxes_at(sc, make_async_frame(sc, 0).t_aligned)
        assert box.center[0] == pytest.approx(1.5)

    def test_static_box_constant(self):
        sc = Scene((static_agent(0),), (straight_track(4.0, 3.0, 0.0),), 0.5, 0, 0)
        boxes = [gt_boxes_at(sc, t)[0][1] for t in (0.0, 0.23, 0.6)]
        assert all(b == boxes[0] for b in boxes)

    def test_out_of_range_excluded(self):
        sc = Scene((static_agent(0),), (straight_track(500.0, 0.0, 0.0),), 0.5, 0, 0)
        assert gt_boxes_at(sc, 0.1) == []


class TestSubframes:
    @pytest.mark.parametrize("drop_n, start", [(1, 0.01), (5, 0.05)])
    def test_first_scan_interval(self, drop_n, start):
        sc = Scene((static_agent(0),), (straight_track(0.0, 10.0, 5.0),), 0.5, 0, 0)
        scans = assemble_subframes(simulate_subframes(sc, 0, 25, drop_n), drop_n)
        assert scans[0].tick_start == pytest.approx(start)
        assert scans[0].tick_end == pytest.approx(start + 0.1)

    def test_bad_drop(self):
        with pytest.raises(SimulationError):
            assemble_subframes([], 0)
