import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streetsplat.errors import UnknownObject
from streetsplat.pointcloud import (
    ColoredPoints,
    DecomposedCloud,
    Edit,
    EditScript,
    aggregate,
    box_contains_canonical,
    build_aggregated_cloud,
    colorize_scan,
    decompose,
    decompose_scene,
)
from streetsplat.scene_io import (
    CameraIntrinsics,
    FrameRecord,
    LidarScan,
    Se3Pose,
    TrackedBox,
    load_scene,
)
from streetsplat.synthetic import forward_camera


def _frame(index=0, t=0.0, width=32, height=24, center=(0.0, 0.0, 0.0), points=None):
    intr = CameraIntrinsics(fx=40.0, fy=40.0, cx=width / 2, cy=height / 2, width=width, height=height)
    cam = forward_camera(np.asarray(center, dtype=float), intr)
    pts = np.zeros((0, 3), dtype=np.float32) if points is None else np.asarray(points, np.float32)
    return FrameRecord(
        index=index,
        timestamp=t,
        image_path=f"images/{index:04d}.png",
        camera=cam,
        lidar=LidarScan(t, pts),
    )


def _gradient_image(width=32, height=24):
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.dstack([u / (width - 1), v / (height - 1), np.full_like(u, 0.25)])


class TestColorize:
    def test_optical_axis_point_gets_center_pixel(self):
        frame = _frame()
        img = np.full((24, 32, 3), 0.5)
        scan = LidarScan(0.0, np.array([[5.0, 0.0, 0.0]], dtype=np.float32))
        got = colorize_scan(scan, frame, img)
        assert len(got) == 1
        np.testing.assert_allclose(got.colors[0], [0.5, 0.5, 0.5])

    def test_point_behind_camera_dropped(self):
        frame = _frame()
        scan = LidarScan(0.0, np.array([[-5.0, 0.0, 0.0]], dtype=np.float32))
        got = colorize_scan(scan, frame, _gradient_image())
        assert len(got) == 0

    def test_matches_per_point_projection_oracle(self):
        rng = np.random.default_rng(0)
        frame = _frame()
        img = _gradient_image()
        pts = np.column_stack(
            [rng.uniform(2, 20, 1000), rng.uniform(-3, 3, 1000), rng.uniform(-2, 2, 1000)]
        ).astype(np.float32)
        got = colorize_scan(LidarScan(0.0, pts), frame, img)

        # independent per-point oracle
        R, tvec = frame.camera.pose.rotation, frame.camera.pose.translation
        intr = frame.camera.intrinsics
        expected = {}
        for i, p in enumerate(pts.astype(np.float64)):
            c = R @ p + tvec
            if c[2] <= 0:
                continue
            u = intr.fx * c[0] / c[2] + intr.cx
            v = intr.fy * c[1] / c[2] + intr.cy
            if 0 <= u < intr.width and 0 <= v < intr.height:
                expected[i] = img[int(np.floor(v)), int(np.floor(u))]
        assert set(got.source_index.tolist()) == set(expected)
        for k, idx in enumerate(got.source_index):
            np.testing.assert_array_equal(got.colors[k], expected[int(idx)])


def _colored(positions, rng=None, frame=0):
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    colors = np.full((n, 3), 0.5) if rng is None else rng.uniform(0, 1, (n, 3))
    return ColoredPoints(positions, colors, np.full(n, frame), np.arange(n))


def _static_box(object_id, center, dims=(2.0, 2.0, 2.0), times=(0.0, 1.0)):
    pose = Se3Pose(np.eye(3), np.asarray(center, dtype=float))
    return TrackedBox.from_poses(object_id, "car", np.array(dims), [(t, pose) for t in times])


class TestDecompose:
    def test_no_boxes_all_background(self):
        pts = _colored([[1, 2, 3], [4, 5, 6]])
        bg, objs = decompose(pts, [], 0.0)
        assert len(bg) == 2 and objs == {}

    def test_box_center_maps_to_canonical_origin(self):
        box = _static_box("a", [5.0, 1.0, 0.0])
        pts = _colored([[5.0, 1.0, 0.0]])
        bg, objs = decompose(pts, [box], 0.0)
        assert len(bg) == 0
        np.testing.assert_allclose(objs["a"].positions[0], [0, 0, 0], atol=1e-12)

    def test_partition_matches_brute_force(self):
        rng = np.random.default_rng(1)
        boxes = [
            _static_box("b", [0.5, 0.0, 0.0]),
            _static_box("a", [-0.5, 0.0, 0.0]),
            _static_box("c", [8.0, 8.0, 8.0], dims=(1.0, 3.0, 2.0)),
        ]
        pts = _colored(rng.uniform(-3, 3, (500, 3)), rng)
        bg, objs = decompose(pts, boxes, 0.0)

        # exhaustive membership oracle with the same tie-break rule
        want = {b.object_id: [] for b in boxes}
        want_bg = []
        for i, p in enumerate(pts.positions):
            hits = []
            for b in boxes:
                local = p - b.translations[0]
                half = b.dimensions / 2
                if all(-half[k] <= local[k] < half[k] for k in range(3)):
                    d2 = float(((p - b.translations[0]) ** 2).sum())
                    hits.append((d2, b.object_id))
            if not hits:
                want_bg.append(i)
            else:
                hits.sort()
                want[hits[0][1]].append(i)
        assert sorted(bg.source_index.tolist()) == want_bg
        for oid in want:
            assert sorted(objs[oid].source_index.tolist()) == want[oid]

    def test_half_open_membership(self):
        dims = np.array([2.0, 2.0, 2.0])
        inside = box_contains_canonical(dims, np.array([[-1.0, 0.0, 0.0]]))
        outside = box_contains_canonical(dims, np.array([[1.0, 0.0, 0.0]]))
        assert inside[0] and not outside[0]


def _decomposed_two_frames(rng):
    """Two frames; background plus one object with canonical points."""
    box = _static_box("car", [5.0, 0.0, 0.0], times=(0.0, 1.0))
    bg0 = _colored(rng.uniform(-5, 5, (20, 3)), rng, frame=0)
    bg1 = _colored(rng.uniform(-5, 5, (15, 3)), rng, frame=1)
    obj0 = _colored(rng.uniform(-0.9, 0.9, (8, 3)), rng, frame=0)
    obj1 = _colored(rng.uniform(-0.9, 0.9, (6, 3)), rng, frame=1)
    return DecomposedCloud(
        background={0: bg0, 1: bg1},
        objects={"car": {0: obj0, 1: obj1}},
        boxes={"car": box},
        frame_timestamps={0: 0.0, 1: 1.0},
    )


class TestAggregate:
    def test_window_zero_only_target_frame(self):
        rng = np.random.default_rng(2)
        cloud = _decomposed_two_frames(rng)
        target = _frame(index=0, t=0.0)
        got = aggregate(cloud, target, window=0.0)
        assert set(got.points.source_frame.tolist()) == {0}
        assert len(got.points) == 28  # 20 background + 8 object points

    def test_identity_pose_keeps_canonical_points(self):
        rng = np.random.default_rng(3)
        box = TrackedBox.from_poses(
            "car", "car", np.array([2.0, 2.0, 2.0]), [(0.0, Se3Pose.identity())]
        )
        obj = _colored(rng.uniform(-0.9, 0.9, (5, 3)), rng, frame=0)
        cloud = DecomposedCloud(
            background={0: ColoredPoints.empty()},
            objects={"car": {0: obj}},
            boxes={"car": box},
            frame_timestamps={0: 0.0},
        )
        got = aggregate(cloud, _frame(index=0, t=0.0), window=0.0)
        np.testing.assert_allclose(got.points.positions, obj.positions, atol=1e-15)

    def test_remove_edit_drops_provenance(self):
        rng = np.random.default_rng(4)
        cloud = _decomposed_two_frames(rng)
        target = _frame(index=0, t=0.0)
        plain = aggregate(cloud, target, window=2.0)
        edited = aggregate(cloud, target, window=2.0, edits=EditScript([Edit("remove", "car")]))
        assert (plain.provenance == "car").sum() == 14
        assert (edited.provenance == "car").sum() == 0
        assert (edited.provenance == "").sum() == (plain.provenance == "").sum()

    def test_translate_then_inverse_is_identity(self):
        rng = np.random.default_rng(5)
        cloud = _decomposed_two_frames(rng)
        target = _frame(index=0, t=0.0)
        delta = Se3Pose(np.eye(3), np.array([1.0, -2.0, 0.5]))
        script = EditScript([Edit("translate", "car", delta=delta), Edit("translate", "car", delta=delta.inverse())])
        plain = aggregate(cloud, target, window=2.0)
        edited = aggregate(cloud, target, window=2.0, edits=script)
        np.testing.assert_allclose(edited.points.positions, plain.points.positions, atol=1e-9)

    def test_translate_moves_object_points_only(self):
        rng = np.random.default_rng(6)
        cloud = _decomposed_two_frames(rng)
        target = _frame(index=0, t=0.0)
        delta = Se3Pose(np.eye(3), np.array([0.0, 3.0, 0.0]))
        plain = aggregate(cloud, target, window=2.0)
        edited = aggregate(cloud, target, window=2.0, edits=EditScript([Edit("translate", "car", delta=delta)]))
        obj = plain.provenance == "car"
        np.testing.assert_allclose(
            edited.points.positions[obj], plain.points.positions[obj] + [0, 3, 0], atol=1e-12
        )
        np.testing.assert_array_equal(
            edited.points.positions[~obj], plain.points.positions[~obj]
        )

    def test_replace_uses_donor_points_with_target_pose(self):
        rng = np.random.default_rng(7)
        box_a = _static_box("a", [5.0, 0.0, 0.0])
        box_b = _static_box("b", [-5.0, 0.0, 0.0])
        pts_a = _colored(rng.uniform(-0.5, 0.5, (4, 3)), rng, frame=0)
        pts_b = _colored(rng.uniform(-0.5, 0.5, (6, 3)), rng, frame=0)
        cloud = DecomposedCloud(
            background={0: ColoredPoints.empty()},
            objects={"a": {0: pts_a}, "b": {0: pts_b}},
            boxes={"a": box_a, "b": box_b},
            frame_timestamps={0: 0.0},
        )
        got = aggregate(
            cloud, _frame(index=0, t=0.0), window=0.0, edits=EditScript([Edit("replace", "a", donor_object_id="b")])
        )
        a_rows = got.provenance == "a"
        assert a_rows.sum() == 6  # donor point count
        np.testing.assert_allclose(
            np.sort(got.points.positions[a_rows], axis=0),
            np.sort(pts_b.positions + [5.0, 0.0, 0.0], axis=0),
            atol=1e-12,
        )

    def test_unknown_object_edit_raises(self):
        rng = np.random.default_rng(8)
        cloud = _decomposed_two_frames(rng)
        with pytest.raises(UnknownObject):
            aggregate(cloud, _frame(index=0, t=0.0), window=1.0, edits=EditScript([Edit("remove", "ghost")]))

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.0, 0.4), st.floats(0.5, 2.0), st.integers(0, 10_000))
    def test_window_monotone_point_count(self, w1, w2, seed):
        rng = np.random.default_rng(seed)
        cloud = _decomposed_two_frames(rng)
        target = _frame(index=0, t=0.0)
        a = aggregate(cloud, target, window=w1)
        b = aggregate(cloud, target, window=w2)
        assert len(a.points) <= len(b.points)

    def test_canonical_ordering(self):
        rng = np.random.default_rng(9)
        cloud = _decomposed_two_frames(rng)
        got = aggregate(cloud, _frame(index=0, t=0.0), window=2.0)
        keys = list(zip(got.points.source_frame.tolist(), got.points.source_index.tolist()))
        assert keys == sorted(keys)

    def test_warp_round_trip(self):
        rng = np.random.default_rng(10)
        q = rng.normal(size=4)
        pose = Se3Pose.from_quat(q, rng.normal(size=3))
        pts = rng.uniform(-1, 1, (50, 3))
        np.testing.assert_allclose(pose.inverse().apply(pose.apply(pts)), pts, atol=1e-9)


def test_build_aggregated_cloud_from_scene(demo_scene_dir):
    scene = load_scene(demo_scene_dir)
    target = scene.frames[1]
    cloud = build_aggregated_cloud(scene, target, window=1.0)
    assert len(cloud.points) > 0
    assert (np.abs(cloud.points.colors) <= 1).all()
    # every contributing frame is inside the window
    ts = {f.index: f.timestamp for f in scene.frames}
    for fi in np.unique(cloud.points.source_frame):
        assert abs(ts[int(fi)] - target.timestamp) <= 1.0


def test_decompose_scene_object_points_inside_box(demo_scene_dir):
    scene = load_scene(demo_scene_dir)
    per_frame = {}
    for frame in scene.frames:
        img = scene.load_image(frame)
        per_frame[frame.index] = colorize_scan(frame.lidar, frame, img)
    dec = decompose_scene(scene, per_frame)
    box = scene.tracklets[0]
    half = box.dimensions / 2
    found = 0
    for block in dec.objects[box.object_id].values():
        found += len(block)
        assert (block.positions >= -half).all() and (block.positions < half).all()
    assert found > 0
