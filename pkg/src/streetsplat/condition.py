"""Condition-image rasterization: fixed-NDC-radius point discs with
nearest-depth occlusion, plus the model-resolution crop.

NDC here maps the image to [-1, 1]^2 over the *shorter* axis: a radius r in
NDC becomes r * min(W, H) / 2 pixels. Uncovered pixels keep a black fill,
mask false, and +inf depth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import InvalidTarget, InvariantViolation
from .pointcloud import AggregatedCloud
from .scene_io import Camera


@dataclass
class ConditionImage:
    rgb: np.ndarray  # (H, W, 3) float64 in [0, 1]
    mask: np.ndarray  # (H, W) bool
    depth: np.ndarray  # (H, W) float64, +inf where uncovered
    winner: np.ndarray | None = None  # (H, W) int64 index into the source cloud, -1 uncovered


def pixel_radius(radius_ndc: float, width: int, height: int) -> float:
    return radius_ndc * min(width, height) / 2.0


def rasterize_condition(
    cloud: AggregatedCloud, camera: Camera, radius_ndc: float = 0.01
) -> ConditionImage:
    """Draw every positive-depth point as a screen-space disc; per pixel the
    smallest camera depth wins, ties broken by smaller (source_frame,
    source_index)."""
    if radius_ndc <= 0:
        raise InvariantViolation(f"radius_ndc must be positive, got {radius_ndc}")
    intr = camera.intrinsics
    h, w = intr.height, intr.width
    rgb = np.zeros((h, w, 3), dtype=np.float64)
    mask = np.zeros((h, w), dtype=bool)
    depth = np.full((h, w), np.inf, dtype=np.float64)
    winner = np.full((h, w), -1, dtype=np.int64)
    pts = cloud.points
    if len(pts) == 0:
        return ConditionImage(rgb, mask, depth, winner)

    uv, z = camera.project(pts.positions)
    front = np.nonzero(z > 0)[0]
    if len(front) == 0:
        return ConditionImage(rgb, mask, depth, winner)
    u, v, zf = uv[front, 0], uv[front, 1], z[front]
    r = pixel_radius(radius_ndc, w, h)
    r2 = r * r

    # Candidate pixels per point: a fixed (K x K) neighborhood around the
    # projection, then the exact circle test against pixel centers.
    lo = int(np.floor(0.5 - r))
    hi = int(np.floor(r - 0.5))  # j ranges over [ceil(u-r-0.5), floor(u+r-0.5)]
    offsets = np.arange(lo - 1, hi + 2)
    base_c = np.floor(u).astype(np.int64)
    base_r = np.floor(v).astype(np.int64)
    cols = base_c[:, None] + offsets[None, :]  # (P, K)
    rows = base_r[:, None] + offsets[None, :]
    cc = np.broadcast_to(cols[:, None, :], (len(front), len(offsets), len(offsets)))
    rr = np.broadcast_to(rows[:, :, None], (len(front), len(offsets), len(offsets)))
    du = (cc + 0.5) - u[:, None, None]
    dv = (rr + 0.5) - v[:, None, None]
    hit = (du * du + dv * dv <= r2) & (cc >= 0) & (cc < w) & (rr >= 0) & (rr < h)

    pidx, oi, oj = np.nonzero(hit)
    if len(pidx) == 0:
        return ConditionImage(rgb, mask, depth, winner)
    pix_r = rr[pidx, oi, oj]
    pix_c = cc[pidx, oi, oj]
    pix_id = pix_r * w + pix_c
    src = front[pidx]
    order = np.lexsort((pts.source_index[src], pts.source_frame[src], zf[pidx], pix_id))
    pix_sorted = pix_id[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    sel = order[first]

    win_pix = pix_id[sel]
    win_src = src[sel]
    rgb.reshape(-1, 3)[win_pix] = pts.colors[win_src]
    mask.reshape(-1)[win_pix] = True
    depth.reshape(-1)[win_pix] = z[win_src]
    winner.reshape(-1)[win_pix] = win_src
    return ConditionImage(rgb, mask, depth, winner)


def condition_to_rgba(cond: ConditionImage) -> np.ndarray:
    """uint8 RGBA with the coverage mask in the alpha channel."""
    rgb8 = np.clip(np.round(cond.rgb * 255.0), 0, 255).astype(np.uint8)
    alpha = np.where(cond.mask, 255, 0).astype(np.uint8)
    return np.dstack([rgb8, alpha])


def save_condition_png(cond: ConditionImage, path) -> None:
    Image.fromarray(condition_to_rgba(cond), mode="RGBA").save(path)


# ---------------------------------------------------------------------------
# Model-resolution crop
# ---------------------------------------------------------------------------


def resize_matrix(out_dim: int, in_dim: int) -> np.ndarray:
    """Dense 1D bilinear interpolation matrix (out_dim x in_dim), half-pixel
    centers, edge-clamped."""
    A = np.zeros((out_dim, in_dim), dtype=np.float64)
    x = (np.arange(out_dim) + 0.5) * (in_dim / out_dim) - 0.5
    i0 = np.floor(x).astype(np.int64)
    w1 = x - i0
    lo = np.clip(i0, 0, in_dim - 1)
    hi = np.clip(i0 + 1, 0, in_dim - 1)
    A[np.arange(out_dim), lo] += 1.0 - w1
    A[np.arange(out_dim), hi] += w1
    return A


def resize_bilinear(img: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    th, tw = target_hw
    Ah = resize_matrix(th, img.shape[0])
    Aw = resize_matrix(tw, img.shape[1])
    return np.einsum("ij,jkc,lk->ilc", Ah, np.atleast_3d(img), Aw, optimize=True)


def _nearest_indices(out_dim: int, in_dim: int) -> np.ndarray:
    x = (np.arange(out_dim) + 0.5) * (in_dim / out_dim)
    return np.clip(np.floor(x).astype(np.int64), 0, in_dim - 1)


@dataclass
class CropContext:
    """Forward state of crop_for_model, enough to run the exact adjoint."""

    src_hw: tuple[int, int]
    scaled_h: int
    crop_rows: int
    Ah: np.ndarray
    Aw: np.ndarray


def crop_plan(src_hw: tuple[int, int], target_hw: tuple[int, int]) -> CropContext:
    sh, sw = src_hw
    th, tw = target_hw
    scale = tw / sw
    scaled_h = int(round(sh * scale))
    if scaled_h < th:
        raise InvalidTarget(
            f"cannot reach {th}x{tw} from {sh}x{sw}: scaled height {scaled_h} < target height"
        )
    return CropContext(
        src_hw=(sh, sw),
        scaled_h=scaled_h,
        crop_rows=scaled_h - th,
        Ah=resize_matrix(scaled_h, sh),
        Aw=resize_matrix(tw, sw),
    )


def crop_for_model(image, target_hw: tuple[int, int]):
    """Uniformly scale to the target width, then drop rows from the top.

    Accepts an RGB array (bilinear) or a ConditionImage (bilinear rgb,
    nearest mask/depth so infinities and booleans stay intact).
    """
    if isinstance(image, ConditionImage):
        ctx = crop_plan(image.rgb.shape[:2], target_hw)
        rgb = crop_apply(image.rgb, ctx)
        ri = _nearest_indices(ctx.scaled_h, image.rgb.shape[0])[ctx.crop_rows :]
        ci = _nearest_indices(target_hw[1], image.rgb.shape[1])
        return ConditionImage(
            rgb=rgb,
            mask=image.mask[np.ix_(ri, ci)],
            depth=image.depth[np.ix_(ri, ci)],
            winner=None if image.winner is None else image.winner[np.ix_(ri, ci)],
        )
    img = np.asarray(image, dtype=np.float64)
    ctx = crop_plan(img.shape[:2], target_hw)
    return crop_apply(img, ctx)


def crop_apply(img: np.ndarray, ctx: CropContext) -> np.ndarray:
    squeeze = img.ndim == 2
    scaled = np.einsum("ij,jkc,lk->ilc", ctx.Ah, np.atleast_3d(img), ctx.Aw, optimize=True)
    out = scaled[ctx.crop_rows :]
    return out[..., 0] if squeeze else out


def crop_backward(grad_out: np.ndarray, ctx: CropContext) -> np.ndarray:
    """Adjoint of crop_apply: scatter the gradient back to source pixels."""
    g = np.atleast_3d(grad_out)
    full = np.zeros((ctx.scaled_h,) + g.shape[1:], dtype=np.float64)
    full[ctx.crop_rows :] = g
    back = np.einsum("ij,ilc,lk->jkc", ctx.Ah, full, ctx.Aw, optimize=True)
    return back[..., 0] if grad_out.ndim == 2 else back
