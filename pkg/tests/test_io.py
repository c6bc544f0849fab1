import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coopdet import io
from coopdet.config import ScenarioConfig
from coopdet.fusion.model import Detection
from coopdet.geometry import BBox
from coopdet.scene_sim import build_scene, make_async_frame


class TestTpcd:
    def test_header_layout(self):
        buf = io.encode_tpcd(np.array([[1.0, 2.0, 3.0, 0.5]]))
        assert buf[:4] == b"TPCD"
        assert struct.unpack("<HI", buf[4:10]) == (1, 1)
        assert struct.unpack("<4f", buf[10:]) == (1.0, 2.0, 3.0, 0.5)
        assert len(buf) == 26

    def test_empty(self):
        assert io.decode_tpcd(io.encode_tpcd(np.zeros((0, 4)))).shape == (0, 4)

    @given(st.lists(st.tuples(*[st.floats(-1e4, 1e4, width=32)] * 4), max_size=50))
    def test_round_trip_float32_exact(self, rows):
        pts = np.array(rows, dtype=np.float32).reshape(-1, 4)
        np.testing.assert_array_equal(io.decode_tpcd(io.encode_tpcd(pts)), pts)

    def test_bad_magic(self):
        buf = bytearray(io.encode_tpcd(np.zeros((2, 4))))
        buf[:4] = b"PCD0"
        with pytest.raises(io.FormatError, match="magic"):
            io.decode_tpcd(bytes(buf))

    def test_truncated_payload(self):
        buf = io.encode_tpcd(np.zeros((3, 4)))
        with pytest.raises(io.FormatError, match="size mismatch"):
            io.decode_tpcd(buf[:-4])

    def test_unknown_version(self):
        buf = bytearray(io.encode_tpcd(np.zeros((1, 4))))
        buf[4:6] = struct.pack("<H", 9)
        with pytest.raises(io.FormatError, match="version"):
            io.decode_tpcd(bytes(buf))

    def test_file_round_trip(self, tmp_path):
        pts = np.array([[0.25, -1.5, 2.0, 10.125]])
        io.write_tpcd(tmp_path / "a.tpcd", pts)
        np.testing.assert_array_equal(io.read_tpcd(tmp_path / "a.tpcd"), pts)


class TestJson:
    @pytest.mark.parametrize("x, text", [(0.1, "0.10000000000000001"), (2.0, "2.0"),
                                         (1 / 3, "0.33333333333333331"), (-0.5, "-0.5")])
    def test_seventeen_digits(self, x, text):
        assert io.dumps(x) == text

    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_float_round_trip(self, x):
        assert json.loads(io.dumps({"v": [x]}))["v"][0] == x

    def test_nested_and_numpy(self):
        obj = {"a": np.float64(1.5), "b": np.arange(3), "c": [{"d": None, "e": True}], "f": "é"}
        assert json.loads(io.dumps(obj)) == {"a": 1.5, "b": [0, 1, 2], "c": [{"d": None, "e": True}],
                                             "f": "é"}

    def test_deterministic_text(self):
        assert io.dumps({"x": 1 / 3, "y": [1, 2]}) == io.dumps({"x": 1 / 3, "y": [1, 2]})

    def test_invalid_json_file(self, tmp_path):
        (tmp_path / "bad.json").write_text("{nope")
        with pytest.raises(io.FormatError):
            io.read_json(tmp_path / "bad.json")

    def test_unserializable(self):
        with pytest.raises(TypeError):
            io.dumps({"x": object()})


@pytest.fixture(scope="module")
def written(tmp_path_factory):
    cfg = ScenarioConfig(duration=0.4, num_objects=3, tick_offsets=[0.05, 0.0])
    scene = build_scene(cfg, seed=7)
    frames = [make_async_frame(scene, j) for j in range(scene.num_frames)]
    root = tmp_path_factory.mktemp("frames")
    io.write_frames(root, scene, frames, cfg)
    return scene, frames, root


class TestFrameDirectory:
    def test_scene_round_trip_exact(self, written):
        scene, _, root = written
        assert io.read_scene(root) == scene

    def test_frames_round_trip(self, written):
        scene, frames, root = written
        _, back, metas = io.read_frames(root)
        assert len(back) == len(frames) == 4
        for a, b in zip(frames, back):
            assert b.t_aligned == a.t_aligned and b.agent_ids == a.agent_ids
            for aid in a.agent_ids:
                np.testing.assert_array_equal(b.clouds[aid].points,
                                              a.clouds[aid].points.astype(np.float32))
                assert b.states[aid] == a.states[aid]
        assert metas[0]["t_aligned"] == pytest.approx(0.15)

    def test_meta_gt_boxes(self, written):
        _, _, root = written
        meta = io.read_json(io.frame_dir(root, 1) / "meta.json")
        boxes = io.gt_from_meta(meta)
        assert len(boxes) == len(meta["gt"])
        assert len(io.gt_from_meta(meta, min_points=10**9)) == 0

    def test_missing_frame(self, written, tmp_path):
        scene, frames, _ = written
        io.write_frames(tmp_path, scene, frames[:2])
        with pytest.raises(FileNotFoundError):
            io.read_frames(tmp_path)

    def test_bad_format_tag(self, tmp_path):
        (tmp_path / "scene.json").write_text('{"format": "other"}')
        with pytest.raises(io.FormatError):
            io.read_scene(tmp_path)


class TestDetections:
    def test_round_trip(self, tmp_path):
        dets = [Detection(BBox((1 / 3, -2.0, 0.8), (4.5, 1.8, 1.6), math.pi / 7), 0.9, "fused"),
                Detection(BBox((10.0, 5.0, 0.8), (4.0, 2.0, 1.5), 0.0), 0.125, 1)]
        path = tmp_path / "d.jsonl"
        io.write_detections(path, [io.detection_record(3, dets[0]), io.detection_record(5, dets[1])])
        assert len(path.read_text().splitlines()) == 2
        back = io.read_detections(path)
        assert back == {3: [dets[0]], 5: [dets[1]]}

    def test_bad_line_reports_position(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"frame": 0}\n')
        with pytest.raises(io.FormatError, match=":1:"):
            io.read_detections(path)
