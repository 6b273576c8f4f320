"""Single-executable CLI for the pipeline.

Subcommands: validate, build-condition, render, edit, distill, sample, eval.
Exit codes: 0 success, 1 runtime error (structured message on stderr),
2 usage error. All randomized subcommands honor --seed; --threads changes
only the scheduling, never the bytes of any artifact.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .condition import crop_for_model, rasterize_condition, save_condition_png
from .diffusion import (
    ConditionEchoDenoiser,
    IdentityCodec,
    NoiseSchedule,
    NoisyRender,
    PureNoise,
    TinyDenoiser,
    sample,
    sample_long,
)
from .distill import (
    DirectoryGenerator,
    DistillConfig,
    IdentityGenerator,
    NoisyIdentityGenerator,
    train,
)
from .errors import SchemaError, StreetSplatError
from .gsplat import RenderConfig, load_checkpoint, render
from .losses import metric_psnr, metric_ssim
from .pointcloud import EditScript, build_aggregated_cloud
from .reporting import (
    save_eval_figure,
    save_training_curves,
    training_metrics_rows,
    write_json_report,
    write_metrics_csv,
)
from .scene_io import Camera, CameraIntrinsics, Se3Pose, load_scene

log = logging.getLogger("streetsplat")


def _load_camera_json(obj: dict, where: str) -> Camera:
    try:
        intr = CameraIntrinsics(
            fx=float(obj["fx"]),
            fy=float(obj["fy"]),
            cx=float(obj["cx"]),
            cy=float(obj["cy"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
        )
        pose = Se3Pose(
            np.array(obj["rotation"], dtype=np.float64),
            np.array(obj["translation"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad camera in {where}: {exc}") from exc
    intr.validate()
    pose.validate()
    return Camera(intr, pose)


def load_pose_file(path) -> list[tuple[Camera, float | None]]:
    """Camera pose file: one camera object or {'cameras': [...]}; each entry
    carries intrinsics, a world-to-camera pose, and an optional timestamp."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise SchemaError(f"pose file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"pose file is not valid JSON: {exc}") from exc
    entries = raw["cameras"] if isinstance(raw, dict) and "cameras" in raw else [raw]
    out = []
    for i, obj in enumerate(entries):
        cam = _load_camera_json(obj, f"{path}[{i}]")
        ts = obj.get("timestamp")
        out.append((cam, None if ts is None else float(ts)))
    return out


def _save_rgb_png(rgb: np.ndarray, path) -> None:
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _maybe_report(args, payload: dict) -> None:
    if getattr(args, "report", None):
        write_json_report(args.report, payload)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    scene = load_scene(args.scene)
    n_points = int(sum(len(f.lidar.points) for f in scene.frames))
    print(
        f"scene ok: {len(scene.frames)} frames, {len(scene.tracklets)} tracklets, "
        f"{n_points} lidar points"
    )
    _maybe_report(
        args,
        {
            "command": "validate",
            "frames": len(scene.frames),
            "tracklets": len(scene.tracklets),
            "lidar_points": n_points,
        },
    )
    return 0


def _condition_for_args(args):
    scene = load_scene(args.scene)
    frame = scene.frame_by_index(args.frame)
    camera = frame.camera
    if args.camera:
        camera = load_pose_file(args.camera)[0][0]
    edits = EditScript.load(args.edit) if args.edit else None
    cloud = build_aggregated_cloud(scene, frame, window=args.window, edits=edits)
    cond = rasterize_condition(cloud, camera, radius_ndc=args.radius)
    if args.model_size:
        h, w = (int(x) for x in args.model_size.split("x"))
        cond = crop_for_model(cond, (h, w))
    return cond, cloud


def cmd_build_condition(args) -> int:
    cond, cloud = _condition_for_args(args)
    save_condition_png(cond, args.out)
    covered = int(cond.mask.sum())
    print(f"wrote {args.out}: {cond.rgb.shape[1]}x{cond.rgb.shape[0]}, {covered} covered pixels")
    _maybe_report(
        args,
        {
            "command": "build-condition",
            "out": Path(args.out).name,
            "points": len(cloud.points),
            "covered_pixels": covered,
        },
    )
    return 0


def cmd_edit(args) -> int:
    if not args.edit:
        raise SchemaError("edit requires --edit <script.json>")
    return cmd_build_condition(args)


def cmd_render(args) -> int:
    scene = load_checkpoint(args.checkpoint)
    camera, ts = load_pose_file(args.camera)[0]
    t = args.time if args.time is not None else (ts if ts is not None else 0.0)
    cfg = RenderConfig(threads=args.threads)
    out = render(scene, camera, t, cfg)
    _save_rgb_png(out.rgb, args.out)
    print(f"wrote {args.out}")
    _maybe_report(
        args,
        {
            "command": "render",
            "out": Path(args.out).name,
            "time": t,
            "gaussians": scene.total_gaussians(),
            "mean_opacity": float(out.opacity.mean()),
        },
    )
    return 0


def cmd_distill(args) -> int:
    scene = load_scene(args.scene)
    config = DistillConfig.from_file(args.config) if args.config else DistillConfig()
    if args.seed is not None:
        config.seed = args.seed
    config.threads = args.threads
    gen_spec = args.generator
    if gen_spec == "mock":
        generator = IdentityGenerator()
    elif gen_spec == "noisy":
        generator = NoisyIdentityGenerator(seed=config.seed)
    elif gen_spec.startswith("dir:"):
        generator = DirectoryGenerator(gen_spec[4:])
    else:
        raise SchemaError(f"unknown generator {gen_spec!r} (expected mock|dir:<path>|noisy)")
    out_dir = Path(args.out)
    trained, metrics = train(None, scene, config, generator, out_dir=out_dir)
    rows, columns = training_metrics_rows(metrics)
    write_metrics_csv(out_dir / "metrics.csv", rows, columns)
    save_training_curves(out_dir / "training_curves.png", metrics)
    final = metrics[-1] if metrics else {}
    print(
        f"distilled {trained.total_gaussians()} gaussians in {config.iterations} iterations; "
        f"final loss {final.get('total', float('nan')):.6f}"
    )
    _maybe_report(
        args,
        {
            "command": "distill",
            "out": out_dir.name,
            "iterations": config.iterations,
            "gaussians": trained.total_gaussians(),
            "final": final,
        },
    )
    return 0


def cmd_sample(args) -> int:
    scene = load_scene(args.scene)
    cams = load_pose_file(args.trajectory)
    frame_ts = [f.timestamp for f in scene.frames]
    conditions = []
    for i, (cam, ts) in enumerate(cams):
        t = ts if ts is not None else frame_ts[min(i, len(frame_ts) - 1)]
        target = min(scene.frames, key=lambda f: abs(f.timestamp - t))
        cloud = build_aggregated_cloud(scene, target, window=args.window)
        conditions.append(rasterize_condition(cloud, cam, radius_ndc=args.radius))
    cond_rgb = [c.rgb for c in conditions]

    codec = IdentityCodec()
    schedule = NoiseSchedule.cosine()
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    if args.denoiser == "oracle":
        # Echoes the condition latent as its clean prediction, so the full
        # sampling path runs without any pretrained network.
        denoiser = ConditionEchoDenoiser()
    elif args.denoiser.startswith("tiny:"):
        denoiser = TinyDenoiser.load(args.denoiser[5:])
    else:
        raise SchemaError(f"unknown denoiser {args.denoiser!r} (expected oracle|tiny:<ckpt>)")

    init = PureNoise() if args.init == "noise" else NoisyRender(cond_rgb, float(args.init.split(":")[1]))
    if len(cond_rgb) > args.chunk:
        images = sample_long(
            denoiser, schedule, codec, None, cond_rgb, init, rng,
            steps=args.steps, cfg_scale=args.cfg, chunk=args.chunk, overlap=args.overlap,
        )
    else:
        images = sample(
            denoiser, schedule, codec, None, cond_rgb, init, rng,
            steps=args.steps, cfg_scale=args.cfg,
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        _save_rgb_png(np.clip(img, 0.0, 1.0), out_dir / f"{i:04d}.png")
    print(f"wrote {len(images)} frames to {out_dir}")
    _maybe_report(
        args,
        {"command": "sample", "out": out_dir.name, "frames": len(images), "steps": args.steps},
    )
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    preds = sorted(pred_dir.glob("*.png"))
    if not preds:
        raise SchemaError(f"no PNG frames in {pred_dir}")
    rows = []
    for p in preds:
        g = gt_dir / p.name
        if not g.exists():
            raise SchemaError(f"missing ground-truth frame {g}")
        with Image.open(p) as im:
            a = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        with Image.open(g) as im:
            b = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        rows.append(
            {"frame": p.stem, "psnr": metric_psnr(a, b), "ssim": metric_ssim(a, b)}
        )
    means = {
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
    }
    report_path = Path(args.report_path)
    write_json_report(report_path, {"command": "eval", "frames": rows, "means": means})
    write_metrics_csv(report_path.with_suffix(".csv"), rows, ["frame", "psnr", "ssim"])
    save_eval_figure(report_path.with_suffix(".png"), rows)
    print(f"evaluated {len(rows)} frames: PSNR {means['psnr']:.2f} dB, SSIM {means['ssim']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="streetsplat",
        description="LiDAR-conditioned street scene synthesis pipeline",
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="rng seed for randomized steps")
        p.add_argument("--threads", type=int, default=1, help="tile worker threads")
        p.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
        p.add_argument("--report", default=None, help="write a JSON run report to this path")

    p = sub.add_parser("validate", help="load and validate a scene directory")
    p.add_argument("--scene", required=True)
    common(p)
    p.set_defaults(func=cmd_validate)

    def condition_args(p):
        p.add_argument("--scene", required=True)
        p.add_argument("--frame", type=int, required=True)
        p.add_argument("--camera", default=None, help="pose-file JSON overriding the frame camera")
        p.add_argument("--radius", type=float, default=0.01, help="point radius in NDC")
        p.add_argument("--window", type=float, default=1.0, help="temporal window in seconds")
        p.add_argument("--edit", default=None, help="edit-script JSON")
        p.add_argument("--model-size", default=None, help="crop to HxW (e.g. 576x1024)")
        p.add_argument("--out", required=True)

    p = sub.add_parser("build-condition", help="rasterize the LiDAR condition image for a frame")
    condition_args(p)
    common(p)
    p.set_defaults(func=cmd_build_condition)

    p = sub.add_parser("edit", help="build a condition image with an edit script applied")
    condition_args(p)
    common(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("render", help="render a scene checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--camera", required=True, help="pose-file JSON")
    p.add_argument("--time", type=float, default=None)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("distill", help="train the dynamic Gaussian scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--config", default=None, help="key-value config file")
    p.add_argument("--generator", default="mock", help="mock | dir:<path> | noisy")
    p.add_argument("--out", required=True, help="output directory")
    common(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("sample", help="run the diffusion sampler along a trajectory")
    p.add_argument("--scene", required=True)
    p.add_argument("--trajectory", required=True, help="pose-file JSON with a camera list")
    p.add_argument("--denoiser", default="oracle", help="oracle | tiny:<ckpt>")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--cfg", type=float, default=2.5)
    p.add_argument("--init", default="noise", help="noise | noisy:<scale>")
    p.add_argument("--chunk", type=int, default=25)
    p.add_argument("--overlap", type=int, default=5)
    p.add_argument("--radius", type=float, default=0.01)
    p.add_argument("--window", type=float, default=1.0)
    p.add_argument("--out", required=True, help="output directory")
    common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="PSNR/SSIM report between two frame directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument(
        "--report", dest="report_path", required=True, help="JSON report path (CSV/PNG written alongside)"
    )
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()))
    try:
        return args.func(args)
    except StreetSplatError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
