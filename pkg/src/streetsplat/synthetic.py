"""Deterministic synthetic scene builder for tests, demos, and CLI smoke runs.

Builds a small driving-like scene: a colored ground strip and back wall as the
static world, an optional moving box object, a forward-facing camera sliding
along +x, gradient images, per-frame world-frame lidar scans sampled from the
world points, and sky masks covering the top of each image.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from .scene_io import (
    Camera,
    CameraIntrinsics,
    FrameRecord,
    LidarScan,
    SceneManifest,
    Se3Pose,
    TrackedBox,
    write_scene,
)

# Camera looking along world +x: right = -y, down = -z, forward = +x.
FORWARD_X_ROTATION = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def forward_camera(center: np.ndarray, intr: CameraIntrinsics) -> Camera:
    R = FORWARD_X_ROTATION
    return Camera(intr, Se3Pose(R, -R @ np.asarray(center, dtype=np.float64)))


def _world_points(rng: np.random.Generator, n_points: int) -> np.ndarray:
    n_ground = n_points * 2 // 3
    ground = np.column_stack(
        [
            rng.uniform(2.0, 40.0, n_ground),
            rng.uniform(-8.0, 8.0, n_ground),
            np.zeros(n_ground),
        ]
    )
    wall = np.column_stack(
        [
            np.full(n_points - n_ground, 42.0),
            rng.uniform(-10.0, 10.0, n_points - n_ground),
            rng.uniform(0.0, 6.0, n_points - n_ground),
        ]
    )
    return np.vstack([ground, wall])


def _object_points(rng: np.random.Generator, dims: np.ndarray, n: int) -> np.ndarray:
    # Points on the box surface, canonical frame, strictly inside the half-open box.
    half = dims / 2.0
    pts = rng.uniform(-half, half * 0.999, size=(n, 3))
    face = rng.integers(0, 3, size=n)
    side = rng.integers(0, 2, size=n)
    for axis in range(3):
        sel = face == axis
        pts[sel, axis] = np.where(side[sel] == 1, half[axis] * 0.999, -half[axis])
    return pts


def _frame_image(width: int, height: int, frame_index: int) -> np.ndarray:
    """Smooth per-frame gradient with a bright disk so images are distinguishable."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    r = u / max(width - 1, 1)
    g = v / max(height - 1, 1)
    b = 0.5 + 0.5 * np.sin(2 * np.pi * (r + 0.13 * frame_index))
    img = np.dstack([r, g, b])
    cu, cv = width * 0.5 + 3 * frame_index, height * 0.6
    disk = (u - cu) ** 2 + (v - cv) ** 2 < (0.12 * min(width, height)) ** 2
    img[disk] = np.array([0.9, 0.8, 0.2])
    return np.clip(img, 0.0, 1.0)


def build_demo_scene(
    root,
    n_frames: int = 5,
    width: int = 96,
    height: int = 64,
    n_points: int = 1500,
    with_object: bool = True,
    seed: int = 0,
    frame_dt: float = 0.5,
) -> SceneManifest:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "sky").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    intr = CameraIntrinsics(
        fx=width * 0.9, fy=width * 0.9, cx=width / 2.0, cy=height / 2.0, width=width, height=height
    )
    world = _world_points(rng, n_points)

    obj_dims = np.array([4.0, 2.0, 1.6])
    obj_pts = _object_points(rng, obj_dims, max(60, n_points // 10))
    box_poses = []
    frames = []
    for i in range(n_frames):
        t = i * frame_dt
        center = np.array([1.0 * i, 0.0, 1.5])
        cam = forward_camera(center, intr)

        img = _frame_image(width, height, i)
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(root / f"images/{i:04d}.png")

        sky = np.zeros((height, width), dtype=np.uint8)
        sky[: height // 4] = 255
        Image.fromarray(sky, mode="L").save(root / f"sky/{i:04d}.png")

        obj_pose = Se3Pose(np.eye(3), np.array([8.0 + 0.6 * i, 2.5, obj_dims[2] / 2.0]))
        box_poses.append((t, obj_pose))

        scan_pts = [world]
        if with_object:
            scan_pts.append(obj_pose.apply(obj_pts))
        frames.append(
            FrameRecord(
                index=i,
                timestamp=t,
                image_path=f"images/{i:04d}.png",
                camera=cam,
                lidar=LidarScan(timestamp=t, points=np.vstack(scan_pts).astype(np.float32)),
                sky_mask_path=f"sky/{i:04d}.png",
            )
        )

    tracklets = []
    if with_object:
        tracklets.append(TrackedBox.from_poses("car_0", "vehicle", obj_dims, box_poses))
    scene = SceneManifest(frames=frames, tracklets=tracklets, metadata={"generator": "demo"}, root=root)
    write_scene(scene, root)
    return scene


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="Write a synthetic demo scene.")
    ap.add_argument("out_dir")
    ap.add_argument("--frames", type=int, default=5)
    ap.add_argument("--width", type=int, default=96)
    ap.add_argument("--height", type=int, default=64)
    ap.add_argument("--points", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-object", action="store_true")
    args = ap.parse_args(argv)
    build_demo_scene(
        args.out_dir,
        n_frames=args.frames,
        width=args.width,
        height=args.height,
        n_points=args.points,
        with_object=not args.no_object,
        seed=args.seed,
    )
    print(f"wrote demo scene to {args.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
