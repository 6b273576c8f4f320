"""Colorized LiDAR processing: projection colorization, background/object
decomposition, temporal-window aggregation, and box-level edit scripts.

Point sets are stored struct-of-arrays (`ColoredPoints`); each point carries
its provenance as (source_frame, source_index) plus the object id it was
assigned to (empty string for background). Aggregated clouds are canonically
sorted so results are independent of execution order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvariantViolation, SchemaError, UnknownObject
from .scene_io import (
    FRAME_TAG_WORLD,
    Camera,
    FrameRecord,
    LidarScan,
    SceneManifest,
    Se3Pose,
    TrackedBox,
    interpolate_box_pose,
)

BACKGROUND_ID = ""


@dataclass
class ColoredPoints:
    """A vectorized list of colored points (positions in the owner's frame)."""

    positions: np.ndarray  # (N, 3) float64
    colors: np.ndarray  # (N, 3) float64 in [0, 1]
    source_frame: np.ndarray  # (N,) int64
    source_index: np.ndarray  # (N,) int64

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.source_frame = np.asarray(self.source_frame, dtype=np.int64).reshape(-1)
        self.source_index = np.asarray(self.source_index, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "ColoredPoints":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    def take(self, idx: np.ndarray) -> "ColoredPoints":
        return ColoredPoints(
            self.positions[idx], self.colors[idx], self.source_frame[idx], self.source_index[idx]
        )

    @staticmethod
    def concatenate(blocks: list["ColoredPoints"]) -> "ColoredPoints":
        if not blocks:
            return ColoredPoints.empty()
        return ColoredPoints(
            np.concatenate([b.positions for b in blocks]),
            np.concatenate([b.colors for b in blocks]),
            np.concatenate([b.source_frame for b in blocks]),
            np.concatenate([b.source_index for b in blocks]),
        )


@dataclass
class DecomposedCloud:
    """Per-frame background points (world frame) and per-object canonical points."""

    background: dict[int, ColoredPoints]  # frame index -> points
    objects: dict[str, dict[int, ColoredPoints]]  # object id -> frame index -> canonical points
    boxes: dict[str, TrackedBox]
    frame_timestamps: dict[int, float]


@dataclass
class AggregatedCloud:
    """World-frame union of a temporal window, with per-point provenance."""

    points: ColoredPoints
    provenance: np.ndarray  # (N,) object id per point, '' for background
    query_time: float
    window: float

    def __post_init__(self) -> None:
        self.provenance = np.asarray(self.provenance, dtype=object).reshape(-1)


# ---------------------------------------------------------------------------
# Edits
# ---------------------------------------------------------------------------


@dataclass
class Edit:
    kind: str  # 'remove' | 'translate' | 'replace'
    object_id: str
    delta: Se3Pose | None = None  # translate only
    donor_object_id: str | None = None  # replace only


@dataclass
class EditScript:
    edits: list[Edit] = field(default_factory=list)

    @classmethod
    def from_json(cls, obj) -> "EditScript":
        if isinstance(obj, dict):
            obj = obj.get("edits", None)
        if not isinstance(obj, list):
            raise SchemaError("edit script must be a list of edits or {'edits': [...]}")
        edits = []
        for i, e in enumerate(obj):
            try:
                kind = e["kind"]
                if kind == "remove":
                    edits.append(Edit("remove", str(e["object_id"])))
                elif kind == "translate":
                    delta = Se3Pose(
                        np.array(e.get("rotation", np.eye(3).tolist()), dtype=np.float64),
                        np.array(e["translation"], dtype=np.float64),
                    )
                    edits.append(Edit("translate", str(e["object_id"]), delta=delta))
                elif kind == "replace":
                    edits.append(Edit("replace", str(e["object_id"]), donor_object_id=str(e["donor_object_id"])))
                else:
                    raise SchemaError(f"edits[{i}]: unknown kind {kind!r}")
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"edits[{i}] malformed: {exc}") from exc
        return cls(edits)

    @classmethod
    def load(cls, path) -> "EditScript":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"edit script is not valid JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# Colorization
# ---------------------------------------------------------------------------


def colorize_scan(
    scan: LidarScan, frame: FrameRecord, image: np.ndarray, camera: Camera | None = None
) -> ColoredPoints:
    """Assign each world-frame scan point the nearest-pixel color of its projection.

    Points projecting outside the image or with non-positive camera depth are
    dropped. Nearest pixel means the pixel whose center is closest to the
    continuous projection, i.e. (row, col) = (floor(v), floor(u)).
    """
    if scan.frame_tag != FRAME_TAG_WORLD:
        raise InvariantViolation("colorize_scan requires a world-frame scan")
    cam = camera if camera is not None else frame.camera
    pts = scan.points.astype(np.float64)
    if len(pts) == 0:
        return ColoredPoints.empty()
    uv, z = cam.project(pts)
    h, w = image.shape[:2]
    ok = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    idx = np.nonzero(ok)[0]
    cols = np.floor(uv[idx, 0]).astype(np.int64)
    rows = np.floor(uv[idx, 1]).astype(np.int64)
    colors = image[rows, cols, :3].astype(np.float64)
    return ColoredPoints(
        positions=pts[idx],
        colors=colors,
        source_frame=np.full(len(idx), frame.index, dtype=np.int64),
        source_index=idx.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# Decomposition
# ---------------------------------------------------------------------------


def box_contains_canonical(dimensions: np.ndarray, pts_canonical: np.ndarray) -> np.ndarray:
    """Membership in the half-open canonical box [-d/2, d/2) per axis."""
    half = np.asarray(dimensions, dtype=np.float64) / 2.0
    return ((pts_canonical >= -half) & (pts_canonical < half)).all(axis=1)


def decompose(
    points: ColoredPoints, boxes: list[TrackedBox], t: float
) -> tuple[ColoredPoints, dict[str, ColoredPoints]]:
    """Split one frame's world points into background and per-object canonical sets.

    A point inside several boxes goes to the box whose center is nearest at
    time t (ties broken by lexicographically smaller object_id).
    """
    n = len(points)
    if n == 0 or not boxes:
        return points, {box.object_id: ColoredPoints.empty() for box in boxes}

    boxes_sorted = sorted(boxes, key=lambda b: b.object_id)
    inside = np.zeros((len(boxes_sorted), n), dtype=bool)
    canon = np.zeros((len(boxes_sorted), n, 3), dtype=np.float64)
    center_d2 = np.full((len(boxes_sorted), n), np.inf)
    for bi, box in enumerate(boxes_sorted):
        pose = interpolate_box_pose(box, t)
        pc = pose.inverse().apply(points.positions)
        member = box_contains_canonical(box.dimensions, pc)
        inside[bi] = member
        canon[bi] = pc
        d2 = ((points.positions - pose.translation) ** 2).sum(axis=1)
        center_d2[bi] = np.where(member, d2, np.inf)

    any_inside = inside.any(axis=0)
    # argmin returns the first (lowest object_id, since sorted) among ties
    owner = np.argmin(center_d2, axis=0)

    background = points.take(~any_inside)
    objects: dict[str, ColoredPoints] = {}
    for bi, box in enumerate(boxes_sorted):
        sel = any_inside & (owner == bi)
        block = points.take(sel)
        block.positions = canon[bi][sel]
        objects[box.object_id] = block
    return background, objects


def decompose_scene(
    scene: SceneManifest, per_frame_points: dict[int, ColoredPoints]
) -> DecomposedCloud:
    """Decompose every frame's colorized world points against the scene tracklets.

    Frames outside a tracklet's time span simply contribute no points to it.
    """
    background: dict[int, ColoredPoints] = {}
    objects: dict[str, dict[int, ColoredPoints]] = {b.object_id: {} for b in scene.tracklets}
    timestamps: dict[int, float] = {}
    for frame in scene.frames:
        timestamps[frame.index] = frame.timestamp
        pts = per_frame_points.get(frame.index, ColoredPoints.empty())
        active = [
            b
            for b in scene.tracklets
            if len(b.timestamps) and b.timestamps[0] <= frame.timestamp <= b.timestamps[-1]
        ]
        bg, objs = decompose(pts, active, frame.timestamp)
        background[frame.index] = bg
        for oid, block in objs.items():
            if len(block):
                objects[oid][frame.index] = block
    return DecomposedCloud(
        background=background,
        objects=objects,
        boxes={b.object_id: b for b in scene.tracklets},
        frame_timestamps=timestamps,
    )


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def _apply_edits(
    cloud: DecomposedCloud, edits: EditScript | None
) -> tuple[dict[str, dict[int, ColoredPoints]], dict[str, Se3Pose | None]]:
    """Resolve the edit script into per-object point sources and pose deltas.

    Returns (points per object, world-side pose delta per object); removed
    objects are dropped from the mapping entirely.
    """
    sources = {oid: frames for oid, frames in cloud.objects.items()}
    deltas: dict[str, Se3Pose | None] = {oid: None for oid in sources}
    if edits is None:
        return sources, deltas
    for e in edits.edits:
        if e.object_id not in cloud.boxes:
            raise UnknownObject(f"edit references unknown object {e.object_id!r}")
        if e.kind == "remove":
            sources.pop(e.object_id, None)
            deltas.pop(e.object_id, None)
        elif e.kind == "translate":
            if e.object_id not in sources:
                continue  # removed earlier in the script
            prev = deltas[e.object_id]
            deltas[e.object_id] = e.delta if prev is None else e.delta.compose(prev)
        elif e.kind == "replace":
            if e.donor_object_id not in cloud.boxes:
                raise UnknownObject(f"replace donor {e.donor_object_id!r} unknown")
            if e.object_id in sources:
                sources[e.object_id] = cloud.objects[e.donor_object_id]
        else:  # pragma: no cover - EditScript.from_json rejects other kinds
            raise SchemaError(f"unknown edit kind {e.kind!r}")
    return sources, deltas


def aggregate(
    cloud: DecomposedCloud,
    target: FrameRecord,
    window: float,
    edits: EditScript | None = None,
) -> AggregatedCloud:
    """Union the temporal window around the target frame into one world cloud.

    Background points come from every frame with |timestamp - target| <= window;
    object canonical points from those frames are warped to world using the
    object's (possibly edited) pose at the target timestamp. The result is
    canonically sorted by (source_frame, source_index) with stable handling of
    duplicated provenance introduced by Replace edits.
    """
    if window < 0:
        raise InvariantViolation(f"window must be >= 0, got {window}")
    t0 = target.timestamp
    in_window = sorted(
        fi for fi, ts in cloud.frame_timestamps.items() if abs(ts - t0) <= window
    )

    blocks: list[ColoredPoints] = []
    prov: list[np.ndarray] = []
    for fi in in_window:
        bg = cloud.background.get(fi)
        if bg is not None and len(bg):
            blocks.append(bg)
            prov.append(np.full(len(bg), BACKGROUND_ID, dtype=object))

    sources, deltas = _apply_edits(cloud, edits)
    for oid in sorted(sources):
        box = cloud.boxes[oid]
        if not (len(box.timestamps) and box.timestamps[0] <= t0 <= box.timestamps[-1]):
            continue
        pose = interpolate_box_pose(box, t0)
        delta = deltas.get(oid)
        if delta is not None:
            pose = delta.compose(pose)
        frames = sources[oid]
        for fi in in_window:
            block = frames.get(fi)
            if block is None or not len(block):
                continue
            world = ColoredPoints(
                pose.apply(block.positions), block.colors, block.source_frame, block.source_index
            )
            blocks.append(world)
            prov.append(np.full(len(world), oid, dtype=object))

    merged = ColoredPoints.concatenate(blocks)
    provenance = (
        np.concatenate(prov) if prov else np.zeros(0, dtype=object)
    )
    # Canonical order; lexsort is stable, so Replace-duplicated keys keep the
    # deterministic construction order (background first, objects by id).
    order = np.lexsort((merged.source_index, merged.source_frame))
    return AggregatedCloud(
        points=merged.take(order), provenance=provenance[order], query_time=t0, window=window
    )


def build_aggregated_cloud(
    scene: SceneManifest,
    target: FrameRecord,
    window: float = 1.0,
    edits: EditScript | None = None,
) -> AggregatedCloud:
    """Colorize + decompose + aggregate in one call (each frame colorized by
    its own camera; points never colorized by any frame are excluded)."""
    per_frame: dict[int, ColoredPoints] = {}
    for frame in scene.frames:
        if abs(frame.timestamp - target.timestamp) > window:
            continue
        image = scene.load_image(frame)
        per_frame[frame.index] = colorize_scan(frame.lidar, frame, image)
    partial = SceneManifest(
        frames=[f for f in scene.frames if f.index in per_frame],
        tracklets=scene.tracklets,
        metadata=scene.metadata,
        root=scene.root,
    )
    decomposed = decompose_scene(partial, per_frame)
    return aggregate(decomposed, target, window, edits)
