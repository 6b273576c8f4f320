"""Neutral on-disk scene format and typed in-memory model.

Layout under a scene root:

    scene.json          manifest (schema ``streetsplat-scene/v1``)
    images/NNNN.png     RGB frames
    lidar/NNNN.bin      little-endian float32 (x, y, z) triplets
    sky/NNNN.png        optional single-channel masks, 255 = sky

Conventions fixed here and used everywhere downstream:

* world frame is right-handed, z-up; camera frame is x-right, y-down,
  z-forward; camera poses are world-to-camera.
* continuous image coordinates have their origin at the top-left corner,
  u in [0, W), v in [0, H); the center of pixel (row i, col j) is
  (u, v) = (j + 0.5, i + 0.5).
* box canonical axes: x = length, y = width, z = height.
"""
from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import InvariantViolation, IoError, MissingAsset, OutOfRange, SchemaError
from .geometry import quat_slerp, quat_to_rotmat, rotmat_to_quat

SCENE_SCHEMA = "streetsplat-scene/v1"

ROTATION_ORTHO_TOL = 1e-6

FRAME_TAG_EGO = "ego"
FRAME_TAG_WORLD = "world"


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics in pixels for a rectified image."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise InvariantViolation(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvariantViolation(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )


@dataclass
class Se3Pose:
    """Rigid transform y = R x + t with an orthonormal, det +1 rotation."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Se3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quat(cls, quat: np.ndarray, translation: np.ndarray) -> "Se3Pose":
        return cls(quat_to_rotmat(np.asarray(quat) / np.linalg.norm(quat)), translation)

    def validate(self) -> None:
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err >= ROTATION_ORTHO_TOL:
            raise InvariantViolation(f"rotation not orthonormal: |R^T R - I|_inf = {err:.3e}")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) >= ROTATION_ORTHO_TOL:
            raise InvariantViolation(f"rotation determinant {det:.9f} != +1")

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (N, 3) or (3,) points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "Se3Pose") -> "Se3Pose":
        """self after other: (self.compose(other)).apply(x) == self.apply(other.apply(x))."""
        return Se3Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Se3Pose":
        return Se3Pose(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass
class Camera:
    """A calibrated view: intrinsics plus world-to-camera pose."""

    intrinsics: CameraIntrinsics
    pose: Se3Pose

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.pose.rotation.T @ self.pose.translation

    def project(self, points_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project (N, 3) world points to continuous (u, v) and camera depth z."""
        cam = self.pose.apply(points_world)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.intrinsics.fx * cam[:, 0] / z + self.intrinsics.cx
            v = self.intrinsics.fy * cam[:, 1] / z + self.intrinsics.cy
        return np.stack([u, v], axis=1), z


@dataclass
class LidarScan:
    timestamp: float
    points: np.ndarray  # (N, 3) float32, frame per frame_tag
    frame_tag: str = FRAME_TAG_WORLD

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)

    def validate(self) -> None:
        if self.frame_tag not in (FRAME_TAG_EGO, FRAME_TAG_WORLD):
            raise InvariantViolation(f"unknown lidar frame tag {self.frame_tag!r}")
        if self.points.size and not np.isfinite(self.points).all():
            raise InvariantViolation("lidar scan contains non-finite coordinates")


@dataclass
class TrackedBox:
    """A tracked object's box: fixed dimensions plus box-to-world poses over time."""

    object_id: str
    class_label: str
    dimensions: np.ndarray  # (3,) length, width, height in meters
    timestamps: np.ndarray  # (M,) strictly increasing
    rotations: np.ndarray  # (M, 3, 3)
    translations: np.ndarray  # (M, 3)

    def __post_init__(self) -> None:
        self.dimensions = np.asarray(self.dimensions, dtype=np.float64).reshape(3)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def from_poses(
        cls, object_id: str, class_label: str, dimensions, poses: list[tuple[float, Se3Pose]]
    ) -> "TrackedBox":
        poses = sorted(poses, key=lambda tp: tp[0])
        return cls(
            object_id=object_id,
            class_label=class_label,
            dimensions=dimensions,
            timestamps=np.array([t for t, _ in poses]),
            rotations=np.stack([p.rotation for _, p in poses]),
            translations=np.stack([p.translation for _, p in poses]),
        )

    def validate(self) -> None:
        if not (self.dimensions > 0).all():
            raise InvariantViolation(f"box {self.object_id!r} has non-positive dimensions")
        if len(self.timestamps) == 0:
            raise InvariantViolation(f"box {self.object_id!r} has no poses")
        if len(self.timestamps) > 1 and not (np.diff(self.timestamps) > 0).all():
            raise InvariantViolation(f"box {self.object_id!r} pose timestamps not strictly increasing")
        if not (len(self.timestamps) == len(self.rotations) == len(self.translations)):
            raise InvariantViolation(f"box {self.object_id!r} pose arrays disagree in length")
        for k in range(len(self.timestamps)):
            self.pose_at_index(k).validate()

    def pose_at_index(self, k: int) -> Se3Pose:
        return Se3Pose(self.rotations[k], self.translations[k])


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    image_path: str
    camera: Camera
    lidar: LidarScan
    sky_mask_path: str | None = None


@dataclass
class SceneManifest:
    frames: list[FrameRecord]
    tracklets: list[TrackedBox]
    metadata: dict = field(default_factory=dict)
    root: Path | None = None

    def validate(self) -> None:
        indices = [f.index for f in self.frames]
        if len(set(indices)) != len(indices):
            raise InvariantViolation("frame indices are not unique")
        ts = np.array([f.timestamp for f in self.frames])
        if len(ts) > 1 and not (np.diff(ts) > 0).all():
            raise InvariantViolation("frame timestamps not strictly increasing")
        for f in self.frames:
            f.camera.intrinsics.validate()
            f.camera.pose.validate()
            f.lidar.validate()
        seen = set()
        for box in self.tracklets:
            if box.object_id in seen:
                raise InvariantViolation(f"duplicate tracklet object_id {box.object_id!r}")
            seen.add(box.object_id)
            box.validate()

    def frame_by_index(self, index: int) -> FrameRecord:
        for f in self.frames:
            if f.index == index:
                return f
        raise OutOfRange(f"no frame with index {index}")

    def tracklet_by_id(self, object_id: str) -> TrackedBox:
        for box in self.tracklets:
            if box.object_id == object_id:
                return box
        raise OutOfRange(f"no tracklet with object_id {object_id!r}")

    def load_image(self, frame: FrameRecord) -> np.ndarray:
        """Load a frame's RGB image as float64 (H, W, 3) in [0, 1]."""
        if self.root is None:
            raise MissingAsset("scene has no root directory to load assets from")
        path = Path(self.root) / frame.image_path
        if not path.exists():
            raise MissingAsset(f"image not found: {path}")
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return arr

    def load_sky_mask(self, frame: FrameRecord) -> np.ndarray | None:
        """Load the optional sky mask as boolean (H, W); True = sky."""
        if frame.sky_mask_path is None:
            return None
        if self.root is None:
            raise MissingAsset("scene has no root directory to load assets from")
        path = Path(self.root) / frame.sky_mask_path
        if not path.exists():
            raise MissingAsset(f"sky mask not found: {path}")
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
        return arr >= 128

    def iter_sorted_frames(self) -> Iterator[FrameRecord]:
        return iter(sorted(self.frames, key=lambda f: f.index))


# ---------------------------------------------------------------------------
# JSON (de)serialization helpers
# ---------------------------------------------------------------------------


def _pose_to_json(pose: Se3Pose) -> dict:
    return {"rotation": pose.rotation.tolist(), "translation": pose.translation.tolist()}


def _pose_from_json(obj: dict, where: str) -> Se3Pose:
    try:
        return Se3Pose(np.array(obj["rotation"], dtype=np.float64), np.array(obj["translation"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad pose in {where}: {exc}") from exc


def scene_to_json(scene: SceneManifest) -> dict:
    frames = []
    for f in scene.frames:
        intr = f.camera.intrinsics
        frames.append(
            {
                "index": f.index,
                "timestamp": f.timestamp,
                "image": f.image_path,
                "lidar": _lidar_rel_path(f),
                "lidar_frame": f.lidar.frame_tag,
                "sky_mask": f.sky_mask_path,
                "camera": {
                    "fx": intr.fx,
                    "fy": intr.fy,
                    "cx": intr.cx,
                    "cy": intr.cy,
                    "width": intr.width,
                    "height": intr.height,
                    **_pose_to_json(f.camera.pose),
                },
            }
        )
    tracklets = []
    for box in scene.tracklets:
        tracklets.append(
            {
                "object_id": box.object_id,
                "class_label": box.class_label,
                "dimensions": box.dimensions.tolist(),
                "poses": [
                    {"timestamp": float(box.timestamps[k]), **_pose_to_json(box.pose_at_index(k))}
                    for k in range(len(box.timestamps))
                ],
            }
        )
    return {"schema": SCENE_SCHEMA, "metadata": scene.metadata, "frames": frames, "tracklets": tracklets}


def _lidar_rel_path(frame: FrameRecord) -> str:
    return f"lidar/{frame.index:04d}.bin"


def write_scene(scene: SceneManifest, root_dir) -> None:
    """Write the manifest, lidar binaries, and (copying if needed) image assets.

    Float32 point records are written bit-exact; reloading with load_scene
    reproduces the manifest structurally.
    """
    scene.validate()
    root = Path(root_dir)
    try:
        (root / "lidar").mkdir(parents=True, exist_ok=True)
        (root / "images").mkdir(parents=True, exist_ok=True)
        for f in scene.frames:
            pts = np.ascontiguousarray(f.lidar.points, dtype="<f4")
            (root / _lidar_rel_path(f)).write_bytes(pts.tobytes())
            _materialize_asset(scene, f.image_path, root)
            if f.sky_mask_path is not None:
                (root / f.sky_mask_path).parent.mkdir(parents=True, exist_ok=True)
                _materialize_asset(scene, f.sky_mask_path, root)
        text = json.dumps(scene_to_json(scene), indent=2, sort_keys=True)
        (root / "scene.json").write_text(text + "\n")
    except OSError as exc:
        raise IoError(f"failed to write scene to {root}: {exc}") from exc


def _materialize_asset(scene: SceneManifest, rel_path: str, dest_root: Path) -> None:
    dest = dest_root / rel_path
    if dest.exists():
        return
    if scene.root is not None:
        src = Path(scene.root) / rel_path
        if src.exists():
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, dest)
            return
    raise MissingAsset(f"asset {rel_path!r} not present at destination and no source to copy from")


def load_scene(root_dir) -> SceneManifest:
    """Load and fully validate a scene from disk."""
    root = Path(root_dir)
    manifest_path = root / "scene.json"
    if not manifest_path.exists():
        raise MissingAsset(f"manifest not found: {manifest_path}")
    try:
        raw = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict) or raw.get("schema") != SCENE_SCHEMA:
        raise SchemaError(f"unsupported or missing schema field (expected {SCENE_SCHEMA!r})")

    frames = []
    for i, fobj in enumerate(raw.get("frames", [])):
        where = f"frames[{i}]"
        try:
            cam = fobj["camera"]
            intr = CameraIntrinsics(
                fx=float(cam["fx"]),
                fy=float(cam["fy"]),
                cx=float(cam["cx"]),
                cy=float(cam["cy"]),
                width=int(cam["width"]),
                height=int(cam["height"]),
            )
            frame = FrameRecord(
                index=int(fobj["index"]),
                timestamp=float(fobj["timestamp"]),
                image_path=str(fobj["image"]),
                camera=Camera(intr, _pose_from_json(cam, where)),
                lidar=_load_lidar(root, fobj, where),
                sky_mask_path=fobj.get("sky_mask"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad frame entry {where}: {exc}") from exc
        _check_image(root, frame)
        frames.append(frame)

    tracklets = []
    for i, tobj in enumerate(raw.get("tracklets", [])):
        where = f"tracklets[{i}]"
        try:
            poses = tobj["poses"]
            box = TrackedBox(
                object_id=str(tobj["object_id"]),
                class_label=str(tobj["class_label"]),
                dimensions=np.array(tobj["dimensions"], dtype=np.float64),
                timestamps=np.array([p["timestamp"] for p in poses], dtype=np.float64),
                rotations=np.stack([_pose_from_json(p, where).rotation for p in poses])
                if poses
                else np.zeros((0, 3, 3)),
                translations=np.stack([_pose_from_json(p, where).translation for p in poses])
                if poses
                else np.zeros((0, 3)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad tracklet entry {where}: {exc}") from exc
        tracklets.append(box)

    scene = SceneManifest(
        frames=frames,
        tracklets=tracklets,
        metadata=raw.get("metadata", {}),
        root=root,
    )
    scene.validate()
    return scene


def _load_lidar(root: Path, fobj: dict, where: str) -> LidarScan:
    rel = fobj.get("lidar")
    if rel is None:
        raise SchemaError(f"{where}: missing lidar path")
    path = root / rel
    if not path.exists():
        raise MissingAsset(f"lidar scan not found: {path}")
    blob = path.read_bytes()
    if len(blob) % 12 != 0:
        raise SchemaError(f"{where}: lidar file length {len(blob)} is not a multiple of 12")
    pts = np.frombuffer(blob, dtype="<f4").reshape(-1, 3)
    tag = fobj.get("lidar_frame", FRAME_TAG_WORLD)
    return LidarScan(timestamp=float(fobj["timestamp"]), points=pts, frame_tag=tag)


def _check_image(root: Path, frame: FrameRecord) -> None:
    path = root / frame.image_path
    if not path.exists():
        raise MissingAsset(f"image not found: {path}")
    with Image.open(path) as im:
        w, h = im.size
    intr = frame.camera.intrinsics
    if (w, h) != (intr.width, intr.height):
        raise InvariantViolation(
            f"image {path} is {w}x{h} but frame {frame.index} declares {intr.width}x{intr.height}"
        )
    if frame.sky_mask_path is not None and not (root / frame.sky_mask_path).exists():
        raise MissingAsset(f"sky mask not found: {root / frame.sky_mask_path}")


# ---------------------------------------------------------------------------
# Tracklet pose interpolation
# ---------------------------------------------------------------------------


def interpolate_box_pose(box: TrackedBox, t: float) -> Se3Pose:
    """Box-to-world pose at time t.

    Exact at stored timestamps; between them, linear translation and
    sign-aligned quaternion slerp. Raises OutOfRange outside the span.
    """
    ts = box.timestamps
    if len(ts) == 0:
        raise OutOfRange(f"box {box.object_id!r} has no poses")
    if t < ts[0] or t > ts[-1]:
        raise OutOfRange(
            f"time {t} outside tracklet span [{ts[0]}, {ts[-1]}] of box {box.object_id!r}"
        )
    k = int(np.searchsorted(ts, t))
    if k < len(ts) and ts[k] == t:
        return box.pose_at_index(k)
    lo, hi = k - 1, k
    u = (t - ts[lo]) / (ts[hi] - ts[lo])
    trans = (1.0 - u) * box.translations[lo] + u * box.translations[hi]
    q = quat_slerp(rotmat_to_quat(box.rotations[lo]), rotmat_to_quat(box.rotations[hi]), u)
    return Se3Pose(quat_to_rotmat(q / np.linalg.norm(q)), trans)


# ---------------------------------------------------------------------------
# Structural equality (used by tests and round-trip checks)
# ---------------------------------------------------------------------------


def manifests_equal(a: SceneManifest, b: SceneManifest) -> bool:
    if len(a.frames) != len(b.frames) or len(a.tracklets) != len(b.tracklets):
        return False
    if a.metadata != b.metadata:
        return False
    for fa, fb in zip(a.frames, b.frames):
        ia, ib = fa.camera.intrinsics, fb.camera.intrinsics
        if (fa.index, fa.timestamp, fa.image_path, fa.sky_mask_path) != (
            fb.index,
            fb.timestamp,
            fb.image_path,
            fb.sky_mask_path,
        ):
            return False
        if (ia.fx, ia.fy, ia.cx, ia.cy, ia.width, ia.height) != (ib.fx, ib.fy, ib.cx, ib.cy, ib.width, ib.height):
            return False
        if not np.array_equal(fa.camera.pose.rotation, fb.camera.pose.rotation):
            return False
        if not np.array_equal(fa.camera.pose.translation, fb.camera.pose.translation):
            return False
        if fa.lidar.frame_tag != fb.lidar.frame_tag:
            return False
        if not np.array_equal(fa.lidar.points, fb.lidar.points):
            return False
    for ta, tb in zip(a.tracklets, b.tracklets):
        if (ta.object_id, ta.class_label) != (tb.object_id, tb.class_label):
            return False
        for x, y in ((ta.dimensions, tb.dimensions), (ta.timestamps, tb.timestamps), (ta.rotations, tb.rotations), (ta.translations, tb.translations)):
            if not np.array_equal(x, y):
                return False
    return True
