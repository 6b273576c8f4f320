"""Distillation trainer: fits the dynamic Gaussian scene to input views plus
novel views supplied by a pluggable generator, with lane-shift trajectory
synthesis, a progressive noise-scale schedule, adaptive densification, and
tracklet pose optimization.

The generator interface receives (rendered frames, condition images, noise
scale, reference image) at model resolution and returns the same number of
frames at that resolution. Three implementations ship: an identity mock, a
directory reader for frames produced offline, and a noisy-identity generator
that runs the full noising/sampling path through the diffusion module.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .geometry import quat_normalize, quat_to_rotmat

from .condition import ConditionImage, crop_backward, crop_plan, crop_apply, rasterize_condition
from .diffusion import IdentityCodec, NoiseSchedule, NoisyRender, OracleDenoiser
from .diffusion import sample as diffusion_sample
from .errors import (
    DegenerateTrajectory,
    GeneratorFailure,
    NonFiniteLoss,
    SchemaError,
    StreetSplatError,
)
from .gsplat import (
    GaussianScene,
    GaussianSet,
    ObjectNode,
    RenderConfig,
    SkyCubemap,
    render,
    render_backward,
    sigmoid,
)
from .losses import (
    LossWeights,
    combine_input_view,
    combine_novel_view,
    loss_depth,
    loss_l1,
    loss_perceptual,
    loss_reg,
    loss_sky,
    loss_ssim,
    metric_psnr,
)
from .pointcloud import build_aggregated_cloud
from .scene_io import Camera, SceneManifest, Se3Pose, interpolate_box_pose

WORLD_UP = np.array([0.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class DistillConfig:
    iterations: int = 30000
    novel_ratio: float = 0.4  # probability of drawing a novel-view camera
    lane_shift: float = 3.0
    lane_shift_side: str = "left"
    noise_scale_max: float = 0.7
    noise_scale_min: float = 0.3
    noise_iter_start: int = 7000
    noise_iter_end: int = 22000
    generator_iters: tuple = (7000, 12000, 17000, 22000)
    densify_threshold: float = 0.0006
    densify_from: int = 500
    densify_until: int = 15000
    densify_every: int = 100
    prune_opacity: float = 0.005
    percent_dense: float = 0.01
    weights: LossWeights = field(default_factory=LossWeights)
    reg_sign: float = -1.0  # binarizing direction for the entropy term
    quantile_depth: float = 0.95
    lr_position: float = 1.6e-4  # scaled by scene extent, exponential decay
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_sky: float = 2.5e-2
    lr_tracklet_t: float = 5e-4
    lr_tracklet_t_final: float = 1e-5
    lr_tracklet_r: float = 1e-5
    lr_tracklet_r_final: float = 5e-6
    model_height: int = 576
    model_width: int = 1024
    window: float = 1.0
    sky_resolution: int = 32
    sh_coeffs: int = 4
    init_opacity: float = 0.1
    init_voxel: float = 0.05  # voxel dedup of aggregated init points (m); <= 0 disables
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 5000  # periodic checkpoints; 0 = final only
    holdout_indices: tuple = ()
    tile: int = 16
    threads: int = 1
    render_dtype: str = "float64"  # float32 production kernels are validated against float64

    def validate(self) -> None:
        if not (0.0 <= self.novel_ratio <= 1.0):
            raise SchemaError(f"novel_ratio must be in [0, 1], got {self.novel_ratio}")
        if self.noise_scale_min > self.noise_scale_max:
            raise SchemaError("noise_scale_min must be <= noise_scale_max")
        for f_ in fields(self):
            if f_.name.startswith("lr_") and getattr(self, f_.name) <= 0:
                raise SchemaError(f"{f_.name} must be > 0")
        self.weights.validate()

    @classmethod
    def from_file(cls, path) -> "DistillConfig":
        """Key-value text config: `name = value` per line, values parsed as
        JSON (weight_* keys address the loss weights)."""
        cfg = cls()
        names = {f_.name for f_ in fields(cls)}
        wnames = {f_.name for f_ in fields(LossWeights)}
        for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{ln}: expected `key = value`")
            key, raw = (s.strip() for s in line.split("=", 1))
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            if key.startswith("weight_") and key[7:] in wnames:
                setattr(cfg.weights, key[7:], float(value))
            elif key == "weights":
                raise SchemaError(f"{path}:{ln}: set loss weights via weight_<name> keys")
            elif key in names:
                current = getattr(cfg, key)
                if isinstance(current, tuple):
                    value = tuple(value)
                setattr(cfg, key, type(current)(value) if not isinstance(current, tuple) else value)
            else:
                raise SchemaError(f"{path}:{ln}: unknown config key {key!r}")
        cfg.validate()
        return cfg

    def render_config(self, **overrides) -> RenderConfig:
        dtype = {"float32": np.float32, "float64": np.float64}.get(self.render_dtype)
        if dtype is None:
            raise SchemaError(f"render_dtype must be float32 or float64, got {self.render_dtype!r}")
        return replace(RenderConfig(tile=self.tile, threads=self.threads, dtype=dtype), **overrides)


def noise_scale(iteration: int, config: DistillConfig) -> float:
    """Progressive schedule: max up to the start iteration, min from the end
    iteration, linear in between."""
    if iteration <= config.noise_iter_start:
        return config.noise_scale_max
    if iteration >= config.noise_iter_end:
        return config.noise_scale_min
    u = (iteration - config.noise_iter_start) / (config.noise_iter_end - config.noise_iter_start)
    return config.noise_scale_max + u * (config.noise_scale_min - config.noise_scale_max)


# ---------------------------------------------------------------------------
# Camera sampling and lane-shift trajectories
# ---------------------------------------------------------------------------


def sample_camera_index(
    rng: np.random.Generator, n_input: int, n_novel: int, p: float
) -> tuple[int, bool]:
    if n_novel == 0:
        p = 0.0
    is_novel = bool(rng.random() < p)
    idx = int(rng.integers(0, n_novel if is_novel else n_input))
    return idx, is_novel


def sample_camera(
    rng: np.random.Generator, input_cams: list[Camera], novel_cams: list[Camera], p: float
) -> tuple[Camera, bool]:
    idx, is_novel = sample_camera_index(rng, len(input_cams), len(novel_cams), p)
    return (novel_cams if is_novel else input_cams)[idx], is_novel


def lane_shift_trajectory(
    cameras: list[Camera], offset: float, side: str = "left"
) -> list[Camera]:
    """Translate each camera laterally to the ego heading (estimated from
    consecutive camera centers; the last camera reuses the previous heading).
    Orientations are unchanged."""
    if side not in ("left", "right"):
        raise SchemaError(f"side must be 'left' or 'right', got {side!r}")
    centers = np.stack([c.center for c in cameras])
    diffs = np.diff(centers, axis=0)
    lengths = np.linalg.norm(diffs, axis=1)
    if len(cameras) < 2 or not (lengths > 0).any():
        raise DegenerateTrajectory("camera positions do not define a heading")
    headings = []
    prev = None
    for i in range(len(cameras)):
        j = min(i, len(diffs) - 1)
        h = diffs[j] / lengths[j] if lengths[j] > 0 else prev
        if h is None:
            nz = int(np.nonzero(lengths > 0)[0][0])
            h = diffs[nz] / lengths[nz]
        headings.append(h)
        prev = h
    sign = 1.0 if side == "left" else -1.0
    out = []
    for cam, h in zip(cameras, headings):
        lateral = np.cross(WORLD_UP, h)
        norm = np.linalg.norm(lateral)
        if norm == 0:
            raise DegenerateTrajectory("heading parallel to the up axis")
        delta = sign * offset * lateral / norm
        pose = cam.pose
        out.append(
            Camera(cam.intrinsics, Se3Pose(pose.rotation.copy(), pose.translation - pose.rotation @ delta))
        )
    return out


# ---------------------------------------------------------------------------
# Novel-view generators
# ---------------------------------------------------------------------------


class NovelViewGenerator:
    """generate(renders, conditions, noise_scale, reference) -> frames; output
    count and resolution must equal the inputs (model resolution)."""

    def generate(
        self,
        renders: list[np.ndarray],
        conditions: list[ConditionImage],
        noise_scale: float,
        reference: np.ndarray,
    ) -> list[np.ndarray]:
        raise NotImplementedError


class IdentityGenerator(NovelViewGenerator):
    """Mock: returns the renders unchanged."""

    def generate(self, renders, conditions, noise_scale, reference):
        return [np.asarray(r, dtype=np.float64).copy() for r in renders]


class DirectoryGenerator(NovelViewGenerator):
    """Reads frames NNNN.png produced offline by an external model."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def generate(self, renders, conditions, noise_scale, reference):
        out = []
        for i, r in enumerate(renders):
            path = self.directory / f"{i:04d}.png"
            if not path.exists():
                raise GeneratorFailure(f"missing generated frame {path}")
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            if arr.shape != np.asarray(r).shape:
                raise GeneratorFailure(
                    f"frame {path} has shape {arr.shape}, expected {np.asarray(r).shape}"
                )
            out.append(arr)
        return out


class NoisyIdentityGenerator(NovelViewGenerator):
    """Adds schedule-consistent noise to the renders, then denoises them back
    through the sampling path with the oracle denoiser; exercises the full
    noisy-render sampling machinery end to end."""

    def __init__(self, schedule: NoiseSchedule | None = None, steps: int = 8, seed: int = 0):
        self.schedule = schedule or NoiseSchedule.cosine()
        self.steps = steps
        self.rng = np.random.default_rng(seed)
        self.codec = IdentityCodec()

    def generate(self, renders, conditions, noise_scale, reference):
        target = self.codec.encode([np.asarray(r, dtype=np.float64) for r in renders])
        cond_rgb = [c.rgb if isinstance(c, ConditionImage) else np.asarray(c) for c in conditions]
        return diffusion_sample(
            OracleDenoiser(target),
            self.schedule,
            self.codec,
            None,
            cond_rgb,
            NoisyRender(list(renders), noise_scale),
            self.rng,
            steps=self.steps,
            cfg_scale=1.0,
        )


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Per-array adaptive-moment optimizer with row-resize support for
    densification events."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
        v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        param -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def reindex(self, name: str, keep: np.ndarray, n_append: int) -> None:
        if name not in self.m:
            return
        for store in (self.m, self.v):
            kept = store[name][keep]
            pad = np.zeros((n_append,) + kept.shape[1:], dtype=kept.dtype)
            store[name] = np.concatenate([kept, pad])


def exp_decay(lr0: float, lr1: float, it: int, total: int) -> float:
    u = min(max(it / max(total, 1), 0.0), 1.0)
    return float(lr0 * (lr1 / lr0) ** u)


# ---------------------------------------------------------------------------
# Densification
# ---------------------------------------------------------------------------


@dataclass
class DensifyStats:
    accum: np.ndarray  # accumulated view-space gradient norms
    seen: np.ndarray  # observation counts

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))


def densify_and_prune(
    gaussians: GaussianSet,
    stats: DensifyStats,
    rng: np.random.Generator,
    threshold: float,
    extent: float,
    percent_dense: float = 0.01,
    prune_opacity: float = 0.005,
    split_shrink: float = 1.6,
) -> tuple[GaussianSet, DensifyStats, np.ndarray, int]:
    """Clone/split Gaussians whose mean view-space gradient norm exceeds the
    threshold, prune low-opacity ones, and reset the accumulators.

    Big-in-world-space pruning is deliberately not applied. Returns the new
    set, fresh stats, the survivor row indices (for optimizer reindexing),
    and the number of appended rows.
    """
    n = len(gaussians)
    mean = np.where(stats.seen > 0, stats.accum / np.maximum(stats.seen, 1), 0.0)
    keep_mask = sigmoid(gaussians.opacity_logits) >= prune_opacity
    keep_idx = np.nonzero(keep_mask)[0]
    g = gaussians.take(keep_idx)
    mean = mean[keep_idx]

    over = mean > threshold
    size = g.scales.max(axis=1)
    small = size <= percent_dense * extent
    clone_rows = np.nonzero(over & small)[0]
    split_rows = np.nonzero(over & ~small)[0]

    parts = [g]
    if len(clone_rows):
        parts.append(g.take(clone_rows))
    if len(split_rows):
        src = g.take(split_rows)
        R = quat_to_rotmat(quat_normalize(src.rotations))
        samples = []
        for _ in range(2):
            eps = rng.standard_normal((len(split_rows), 3)) * src.scales
            child = src.take(np.arange(len(split_rows)))
            child.positions = src.positions + np.einsum("nij,nj->ni", R, eps)
            child.log_scales = src.log_scales - np.log(split_shrink)
            samples.append(child)
        parts.extend(samples)

    merged = GaussianSet.concatenate(parts)
    if len(split_rows):
        # Split originals are removed after their children were appended.
        final_mask = np.ones(len(merged), dtype=bool)
        final_mask[split_rows] = False
        merged = merged.take(np.nonzero(final_mask)[0])
        survivors = keep_idx[np.setdiff1d(np.arange(len(g)), split_rows, assume_unique=True)]
        n_append = len(clone_rows) + 2 * len(split_rows)
    else:
        survivors = keep_idx
        n_append = len(clone_rows)
    return merged, DensifyStats.zeros(len(merged)), survivors, n_append


# ---------------------------------------------------------------------------
# Scene initialization from LiDAR
# ---------------------------------------------------------------------------


def _knn_scales(points: np.ndarray, k: int = 4, floor: float = 1e-3) -> np.ndarray:
    if len(points) <= k:
        return np.full(len(points), 0.1)
    tree = cKDTree(points)
    dists, _ = tree.query(points, k=k)
    mean = dists[:, 1:].mean(axis=1)
    return np.maximum(mean, floor)


def _voxel_dedup(points: np.ndarray, voxel: float) -> np.ndarray:
    """Indices of the first point in each occupied voxel (canonical order)."""
    if voxel <= 0 or not len(points):
        return np.arange(len(points))
    cells = np.floor(points / voxel).astype(np.int64)
    _, first = np.unique(cells, axis=0, return_index=True)
    return np.sort(first)


def init_scene_from_lidar(manifest: SceneManifest, config: DistillConfig) -> GaussianScene:
    """Background Gaussians from the colorized aggregated cloud; object nodes
    from each tracklet's canonical points; a neutral gray cubemap."""
    mid = manifest.frames[len(manifest.frames) // 2]
    cloud = build_aggregated_cloud(manifest, mid, window=np.inf)
    bg_rows = cloud.provenance == ""
    positions = cloud.points.positions[bg_rows]
    colors = cloud.points.colors[bg_rows]
    keep = _voxel_dedup(positions, config.init_voxel)
    positions, colors = positions[keep], colors[keep]
    background = GaussianSet.from_points(
        positions, colors, opacity=config.init_opacity, n_coeffs=config.sh_coeffs
    )
    background.log_scales = np.log(_knn_scales(positions))[:, None] * np.ones((1, 3))

    objects = []
    for box in manifest.tracklets:
        rows = cloud.provenance == box.object_id
        if not rows.any():
            continue
        # Points were warped to world at the aggregation query time; map them
        # back to canonical coordinates with that same pose.
        pose = interpolate_box_pose(box, cloud.query_time)
        canon = pose.inverse().apply(cloud.points.positions[rows])
        ocolors = cloud.points.colors[rows]
        okeep = _voxel_dedup(canon, config.init_voxel)
        canon, ocolors = canon[okeep], ocolors[okeep]
        gset = GaussianSet.from_points(
            canon, ocolors, opacity=config.init_opacity, n_coeffs=config.sh_coeffs
        )
        gset.log_scales = np.log(_knn_scales(canon))[:, None] * np.ones((1, 3))
        objects.append(ObjectNode(box.object_id, gset, copy.deepcopy(box)))
    sky = SkyCubemap.constant((0.5, 0.5, 0.5), config.sky_resolution)
    return GaussianScene(background=background, objects=objects, sky=sky)


def scene_extent(manifest: SceneManifest) -> float:
    centers = np.stack([f.camera.center for f in manifest.frames])
    mid = centers.mean(axis=0)
    r = np.linalg.norm(centers - mid, axis=1).max()
    return float(max(r * 1.1, 1.0))


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    scene: GaussianScene
    iteration: int
    stats: dict[str, DensifyStats]
    novel_cache: dict[int, np.ndarray]
    adam: Adam
    rng: np.random.Generator


def lidar_depth_map(frame, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Sparse min-depth raster of the frame's world-frame scan (nearest pixel)."""
    intr = camera.intrinsics
    depth = np.full((intr.height, intr.width), np.inf)
    pts = frame.lidar.points.astype(np.float64)
    if len(pts):
        uv, z = camera.project(pts)
        ok = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < intr.width) & (uv[:, 1] >= 0) & (uv[:, 1] < intr.height)
        cols = np.floor(uv[ok, 0]).astype(np.int64)
        rows = np.floor(uv[ok, 1]).astype(np.int64)
        np.minimum.at(depth, (rows, cols), z[ok])
    valid = np.isfinite(depth)
    return np.where(valid, depth, 0.0), valid


def train(
    scene_init: GaussianScene | None,
    manifest: SceneManifest,
    config: DistillConfig,
    generator: NovelViewGenerator,
    out_dir=None,
) -> tuple[GaussianScene, list[dict]]:
    """Run the full distillation loop; returns the trained scene and the
    metrics log (one dict per logged iteration)."""
    config.validate()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    scene = scene_init if scene_init is not None else init_scene_from_lidar(manifest, config)
    rng = np.random.default_rng(config.seed)
    adam = Adam()
    extent = scene_extent(manifest)
    rcfg = config.render_config()

    holdout = set(config.holdout_indices)
    train_frames = [f for f in manifest.frames if f.index not in holdout]
    holdout_frames = [f for f in manifest.frames if f.index in holdout]
    if not train_frames:
        raise SchemaError("no training frames left after holdout")
    resolutions = {(f.camera.intrinsics.height, f.camera.intrinsics.width) for f in train_frames}
    if len(resolutions) != 1:
        raise SchemaError(f"training frames mix resolutions: {sorted(resolutions)}")
    input_cams = [f.camera for f in train_frames]
    images = [manifest.load_image(f) for f in train_frames]
    sky_masks = [manifest.load_sky_mask(f) for f in train_frames]
    depth_maps = [lidar_depth_map(f, f.camera) for f in train_frames]

    use_novel = config.novel_ratio > 0
    novel_cams: list[Camera] = []
    novel_conditions: list[ConditionImage] = []
    if use_novel:
        novel_cams = lane_shift_trajectory(input_cams, config.lane_shift, config.lane_shift_side)
        for frame, cam in zip(train_frames, novel_cams):
            cloud = build_aggregated_cloud(manifest, frame, window=config.window)
            novel_conditions.append(rasterize_condition(cloud, cam))

    src_hw = (input_cams[0].intrinsics.height, input_cams[0].intrinsics.width)
    model_hw = (config.model_height, config.model_width)
    cropper = crop_plan(src_hw, model_hw)
    reference = crop_apply(images[0], cropper)
    cropped_conditions = [
        cond if cond.rgb.shape[:2] == model_hw else _crop_condition(cond, model_hw)
        for cond in novel_conditions
    ]

    state = TrainState(
        scene=scene,
        iteration=0,
        stats={
            "bg": DensifyStats.zeros(len(scene.background)),
            **{f"obj/{i}": DensifyStats.zeros(len(o.gaussians)) for i, o in enumerate(scene.objects)},
        },
        novel_cache={},
        adam=adam,
        rng=rng,
    )

    metrics: list[dict] = []
    gen_iters = set(int(i) for i in config.generator_iters)

    def refresh_cache(iteration: int) -> None:
        renders = []
        for cam, frame in zip(novel_cams, train_frames):
            out = render(state.scene, cam, frame.timestamp, rcfg)
            renders.append(crop_apply(np.clip(out.rgb, 0.0, 1.0), cropper))
        s = noise_scale(iteration, config)
        try:
            generated = generator.generate(renders, cropped_conditions, s, reference)
        except StreetSplatError:
            raise
        except Exception as exc:
            raise GeneratorFailure(f"novel-view generator failed: {exc}") from exc
        if len(generated) != len(renders):
            raise GeneratorFailure(
                f"generator returned {len(generated)} frames for {len(renders)} inputs"
            )
        for g in generated:
            if np.asarray(g).shape[:2] != model_hw:
                raise GeneratorFailure(
                    f"generated frame has shape {np.asarray(g).shape}, model is {model_hw}"
                )
        state.novel_cache = {i: np.asarray(g, dtype=np.float64) for i, g in enumerate(generated)}

    for it in range(1, config.iterations + 1):
        state.iteration = it
        if use_novel and it in gen_iters:
            refresh_cache(it)

        p_eff = config.novel_ratio if (use_novel and state.novel_cache) else 0.0
        idx, is_novel = sample_camera_index(rng, len(input_cams), len(novel_cams), p_eff)

        if is_novel:
            cam = novel_cams[idx]
            frame = train_frames[idx]
            out, ctx = render(state.scene, cam, frame.timestamp, rcfg, want_ctx=True)
            cropped = crop_apply(out.rgb, cropper)
            perc, g_perc = loss_perceptual(cropped, state.novel_cache[idx])
            report = combine_novel_view(config.weights, perc)
            grad_rgb = config.weights.novel * crop_backward(g_perc, cropper)
            grads = render_backward(state.scene, ctx, grad_rgb=grad_rgb)
        else:
            cam = input_cams[idx]
            frame = train_frames[idx]
            out, ctx = render(state.scene, cam, frame.timestamp, rcfg, want_ctx=True)
            gt = images[idx]
            v_l1, g_l1 = loss_l1(out.rgb, gt)
            v_ss, g_ss = loss_ssim(out.rgb, gt)
            v_pc, g_pc = loss_perceptual(out.rgb, gt)
            dmap, dvalid = depth_maps[idx]
            g_dp = np.zeros_like(out.depth, dtype=np.float64)
            g_dp_opa = np.zeros_like(out.opacity, dtype=np.float64)
            v_dp = 0.0
            opa = np.asarray(out.opacity, dtype=np.float64)
            dvalid_cov = dvalid & (opa > 0.25)
            if dvalid_cov.any() and config.weights.depth > 0:
                # Expected depth is the opacity-normalized accumulation;
                # gradients chain back to both the raw depth and the opacity.
                dnorm = np.where(dvalid_cov, out.depth / np.maximum(opa, 1e-12), 0.0)
                v_dp, g_dn = loss_depth(dnorm, dmap, dvalid_cov, config.quantile_depth)
                g_dp = g_dn / np.maximum(opa, 1e-12)
                g_dp_opa = -g_dn * out.depth / np.maximum(opa, 1e-12) ** 2
            mask = sky_masks[idx]
            if mask is not None and config.weights.sky > 0:
                v_sk, g_sk = loss_sky(out.opacity, mask)
            else:
                v_sk, g_sk = 0.0, np.zeros_like(out.opacity)
            if state.scene.objects and config.weights.reg > 0:
                v_rg, g_rg = loss_reg(out.object_alpha)
            else:
                v_rg, g_rg = 0.0, np.zeros_like(out.object_alpha)
            report = combine_input_view(
                config.weights, v_l1, v_ss, v_pc, v_dp, v_sk, v_rg, config.reg_sign
            )
            w = config.weights
            grad_rgb = w.l1 * g_l1 + w.ssim * g_ss + w.lpips * g_pc
            grads = render_backward(
                state.scene,
                ctx,
                grad_rgb=grad_rgb,
                grad_depth=w.depth * g_dp,
                grad_opacity=w.sky * g_sk + w.depth * g_dp_opa,
                grad_object_alpha=w.reg * config.reg_sign * g_rg,
            )

        total = report.total
        if not np.isfinite(total):
            if out_path is not None:
                (out_path / "diagnostic.json").write_text(
                    json.dumps({"iteration": it, "terms": report.terms}, indent=2)
                )
            raise NonFiniteLoss(f"non-finite loss at iteration {it}: {report.terms}")

        _apply_updates(state, grads, config, extent, it)

        if config.densify_from <= it <= config.densify_until and it % config.densify_every == 0:
            _densify_step(state, config, extent)

        if it % config.log_every == 0 or it == config.iterations:
            entry = {
                "iter": it,
                "total": total,
                "terms": report.terms,
                "gaussians": state.scene.total_gaussians(),
                "novel": bool(is_novel),
                "noise_scale": noise_scale(it, config),
            }
            if holdout_frames:
                psnrs = []
                for f in holdout_frames:
                    ro = render(state.scene, f.camera, f.timestamp, rcfg)
                    psnrs.append(metric_psnr(np.clip(ro.rgb, 0, 1), manifest.load_image(f)))
                entry["psnr_holdout"] = float(np.mean(psnrs))
            metrics.append(entry)

        if (
            out_path is not None
            and config.checkpoint_every > 0
            and it % config.checkpoint_every == 0
        ):
            from .gsplat import save_checkpoint

            save_checkpoint(state.scene, out_path / f"checkpoint_{it:06d}.ssck")

    if out_path is not None:
        from .gsplat import save_checkpoint

        save_checkpoint(state.scene, out_path / "checkpoint_final.ssck")
        with open(out_path / "metrics.jsonl", "w") as fh:
            for entry in metrics:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return state.scene, metrics


def _crop_condition(cond: ConditionImage, model_hw) -> ConditionImage:
    from .condition import crop_for_model

    return crop_for_model(cond, model_hw)


def _apply_updates(
    state: TrainState, grads, config: DistillConfig, extent: float, it: int
) -> None:
    adam = state.adam
    lr_pos = exp_decay(config.lr_position, config.lr_position_final, it, config.iterations) * extent
    bg = state.scene.background
    pg = grads.background
    adam.step("bg/positions", bg.positions, pg.positions, lr_pos)
    adam.step("bg/rotations", bg.rotations, pg.rotations, config.lr_rotation)
    adam.step("bg/log_scales", bg.log_scales, pg.log_scales, config.lr_scale)
    adam.step("bg/opacity_logits", bg.opacity_logits, pg.opacity_logits, config.lr_opacity)
    adam.step("bg/sh", bg.sh, pg.sh, config.lr_sh)
    state.stats["bg"].accum += pg.vs_grad_norm
    state.stats["bg"].seen += pg.seen

    lr_tt = exp_decay(config.lr_tracklet_t, config.lr_tracklet_t_final, it, config.iterations)
    lr_tr = exp_decay(config.lr_tracklet_r, config.lr_tracklet_r_final, it, config.iterations)
    for i, node in enumerate(state.scene.objects):
        og = grads.objects[i]
        g = node.gaussians
        adam.step(f"obj/{i}/positions", g.positions, og.positions, lr_pos)
        adam.step(f"obj/{i}/rotations", g.rotations, og.rotations, config.lr_rotation)
        adam.step(f"obj/{i}/log_scales", g.log_scales, og.log_scales, config.lr_scale)
        adam.step(f"obj/{i}/opacity_logits", g.opacity_logits, og.opacity_logits, config.lr_opacity)
        adam.step(f"obj/{i}/sh", g.sh, og.sh, config.lr_sh)
        cg = grads.corrections[i]
        adam.step(f"obj/{i}/corr_dt", node.corrections.dt, cg.dt, lr_tt)
        adam.step(f"obj/{i}/corr_dq", node.corrections.dq, cg.dq, lr_tr)
        state.stats[f"obj/{i}"].accum += og.vs_grad_norm
        state.stats[f"obj/{i}"].seen += og.seen

    adam.step("sky", state.scene.sky.faces, grads.sky_faces, config.lr_sky)
    np.clip(state.scene.sky.faces, 0.0, 1.0, out=state.scene.sky.faces)


def _densify_step(state: TrainState, config: DistillConfig, extent: float) -> None:
    scene = state.scene
    new_bg, stats, survivors, n_append = densify_and_prune(
        scene.background,
        state.stats["bg"],
        state.rng,
        config.densify_threshold,
        extent,
        config.percent_dense,
        config.prune_opacity,
    )
    scene.background = new_bg
    state.stats["bg"] = stats
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh"):
        state.adam.reindex(f"bg/{name}", survivors, n_append)
    for i, node in enumerate(scene.objects):
        new_g, stats_i, surv_i, app_i = densify_and_prune(
            node.gaussians,
            state.stats[f"obj/{i}"],
            state.rng,
            config.densify_threshold,
            extent,
            config.percent_dense,
            config.prune_opacity,
        )
        node.gaussians = new_g
        state.stats[f"obj/{i}"] = stats_i
        for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh"):
            state.adam.reindex(f"obj/{i}/{name}", surv_i, app_i)
