"""Analytic gradients of the splatting renderer.

Given per-pixel upstream gradients for any of (rgb, depth, opacity,
object_alpha), produces gradients for every Gaussian parameter (position,
quaternion, log-scale, opacity logit, SH coefficients), every cubemap texel,
and the per-timestamp tracklet pose corrections, plus the view-space position
gradient norms used for densification.

Derivatives follow the forward factorization exactly:

    alpha = sigmoid(o) * comp(Sigma*) * exp(-1/2 d^T Lam d),  Lam = (Sigma* + eps I)^-1
    C = sum_i w_i c_i + (1 - sum_i w_i) * sky,  w_i = alpha_i prod_{j<i}(1 - alpha_j)

Suffix sums give dC/dalpha_i = T_i c_i - S_i / (1 - alpha_i) with
S_i = sum_{k>i} w_k c_k; entries clamped at alpha_clamp or skipped below
alpha_min are locally constant and receive zero gradient (one-sided
convention at the guard boundaries).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..geometry import rotmat_grad_to_quat_grad
from . import sh as shlib
from .params import GaussianScene, GaussianSet, sigmoid
from .render import BACKGROUND_OWNER, ForwardContext, _tile_ranges, tile_eval_cached
from .projection import inv_2x2


@dataclass
class ParamGrads:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    vs_grad_norm: np.ndarray  # (N,) view-space position gradient norm (pixels)
    seen: np.ndarray  # (N,) bool: survived culling for this camera

    @classmethod
    def zeros_like(cls, g: GaussianSet) -> "ParamGrads":
        return cls(
            np.zeros_like(g.positions),
            np.zeros_like(g.rotations),
            np.zeros_like(g.log_scales),
            np.zeros_like(g.opacity_logits),
            np.zeros_like(g.sh),
            np.zeros(len(g)),
            np.zeros(len(g), dtype=bool),
        )


@dataclass
class CorrectionGrads:
    dt: np.ndarray  # (M, 3)
    dq: np.ndarray  # (M, 4)


@dataclass
class SceneGrads:
    background: ParamGrads
    objects: list[ParamGrads]
    corrections: list[CorrectionGrads]
    sky_faces: np.ndarray  # (6, F, F, 3)


def _suffix_sum(x: np.ndarray, axis: int = 1) -> np.ndarray:
    """S[..., i] = sum over k > i of x[..., k] along the given axis."""
    rev = np.flip(x, axis=axis)
    inclusive = np.flip(np.cumsum(rev, axis=axis), axis=axis)
    return inclusive - x


def _tile_backward(ctx: ForwardContext, upstream, x0, x1, y0, y1):
    cfg = ctx.config
    dt = cfg.dtype
    gC, gD_up, gO_eff, gOobj = upstream
    result = tile_eval_cached(ctx, x0, x1, y0, y1)
    if result is None:
        return None
    shape = (y1 - y0, x1 - x0)
    npix = shape[0] * shape[1]
    idx, du, dv, gval, alpha, skipped, clamped, T_excl, w = result
    A = ctx.Lam[idx, 0, 0]
    B = ctx.Lam[idx, 0, 1]
    C = ctx.Lam[idx, 1, 1]
    lu = A * du + B * dv  # (Lam d)_u
    lv = B * du + C * dv
    active = T_excl >= cfg.transmittance_min if cfg.transmittance_min > 0 else None

    colors = ctx.colors[idx]
    zdep = ctx.z[idx]
    isobj = ctx.is_object[idx].astype(dt)

    gC_t = gC[y0:y1, x0:x1].reshape(npix, 3)
    gD_t = gD_up[y0:y1, x0:x1].reshape(npix)
    gO_t = gO_eff[y0:y1, x0:x1].reshape(npix)
    gJ_t = gOobj[y0:y1, x0:x1].reshape(npix)

    # Fold the channel dot into 2D maps first so suffix sums stay (P, G):
    # sum_ch gC . (T c - S_c) / ...  ==  T (gC . c) - suffix(w (gC . c)).
    cc = gC_t @ colors.T  # (P, G): per-pixel, per-gaussian upstream . color
    lin = cc + gO_t[:, None] + gD_t[:, None] * zdep[None, :] + gJ_t[:, None] * isobj[None, :]
    g_alpha = T_excl * lin - _suffix_sum(w * lin) / (1.0 - alpha)
    mask = ~clamped if skipped is None else ~(skipped | clamped)
    if active is not None:
        mask &= active
    g_alpha = np.where(mask, g_alpha, 0.0)

    ga = g_alpha * alpha  # common factor alpha * dL/dalpha
    galu = ga * lu
    galv = ga * lv
    g_mu_screen = np.stack([galu.sum(axis=0), galv.sum(axis=0)], axis=1)
    g_Sq = np.empty((len(idx), 2, 2), dtype=dt)
    g_Sq[:, 0, 0] = 0.5 * np.einsum("pg,pg->g", galu, lu)
    g_Sq[:, 0, 1] = 0.5 * np.einsum("pg,pg->g", galu, lv)
    g_Sq[:, 1, 0] = g_Sq[:, 0, 1]
    g_Sq[:, 1, 1] = 0.5 * np.einsum("pg,pg->g", galv, lv)
    g_peak = np.einsum("pg,pg->g", g_alpha, gval)
    g_color = w.T @ gC_t
    g_z = w.T @ gD_t
    return idx, g_color, g_z, g_mu_screen, g_Sq, g_peak


def render_backward(
    scene: GaussianScene,
    ctx: ForwardContext,
    grad_rgb: np.ndarray | None = None,
    grad_depth: np.ndarray | None = None,
    grad_opacity: np.ndarray | None = None,
    grad_object_alpha: np.ndarray | None = None,
) -> SceneGrads:
    cfg = ctx.config
    dt = cfg.dtype
    intr = ctx.camera.intrinsics
    H, W = intr.height, intr.width
    if ctx.opacity is None:
        raise ValueError("forward context is incomplete: run render(..., want_ctx=True) first")

    gC = np.zeros((H, W, 3), dtype=dt) if grad_rgb is None else grad_rgb.astype(dt)
    gD = np.zeros((H, W), dtype=dt) if grad_depth is None else grad_depth.astype(dt)
    gO = np.zeros((H, W), dtype=dt) if grad_opacity is None else grad_opacity.astype(dt)
    gJ = np.zeros((H, W), dtype=dt) if grad_object_alpha is None else grad_object_alpha.astype(dt)

    # rgb = C_gauss + (1 - O) * sky: fold the sky mixing into the opacity path
    # and collect texel gradients directly.
    gO_eff = gO - np.einsum("hwc,hwc->hw", gC, ctx.sky_rgb)
    sky_grad = np.zeros_like(scene.sky.faces)
    np.add.at(
        sky_grad,
        (ctx.sky_face, ctx.sky_row, ctx.sky_col),
        gC * (1.0 - ctx.opacity)[..., None],
    )

    M = len(ctx.z)
    g_color = np.zeros((M, 3), dtype=dt)
    g_z = np.zeros(M, dtype=dt)
    g_mu_screen = np.zeros((M, 2), dtype=dt)
    g_Sq = np.zeros((M, 2, 2), dtype=dt)
    g_peak = np.zeros(M, dtype=dt)

    tiles = [
        (x0, x1, y0, y1)
        for y0, y1 in _tile_ranges(H, cfg.tile)
        for x0, x1 in _tile_ranges(W, cfg.tile)
    ]
    upstream = (gC, gD, gO_eff, gJ)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(lambda t4: _tile_backward(ctx, upstream, *t4), tiles))
    else:
        results = [_tile_backward(ctx, upstream, *t4) for t4 in tiles]
    # Fixed-order reduction keeps results independent of the thread count.
    for res in results:
        if res is None:
            continue
        idx, tc, tz, tmu, tsq, tpk = res
        np.add.at(g_color, idx, tc)
        np.add.at(g_z, idx, tz)
        np.add.at(g_mu_screen, idx, tmu)
        np.add.at(g_Sq, idx, tsq)
        np.add.at(g_peak, idx, tpk)

    # ---- per-Gaussian chains (vectorized over the kept, depth-sorted set) ----
    flat = ctx.flat
    keep = ctx.keep
    opac = sigmoid(flat.opacity_logits[keep]).astype(dt)
    g_logit = g_peak * ctx.comp * opac * (1.0 - opac)
    g_rho = g_peak * opac

    g_Sf = g_Sq
    if cfg.mip_filter:
        det_in = (
            ctx.Sigma_screen[:, 0, 0] * ctx.Sigma_screen[:, 1, 1]
            - ctx.Sigma_screen[:, 0, 1] * ctx.Sigma_screen[:, 1, 0]
        )
        ok = det_in > 0
        inv_s = np.zeros_like(ctx.Sigma_screen)
        inv_ok, _ = inv_2x2(ctx.Sigma_screen[ok])
        inv_s[ok] = inv_ok
        g_Ss = g_Sf + np.where(
            ok[:, None, None], (g_rho * ctx.comp * 0.5)[:, None, None] * (inv_s - ctx.Lam), 0.0
        )
    else:
        g_Ss = g_Sf

    Mp = ctx.M_proj
    Sw = ctx.Sigma_world
    g_M = 2.0 * np.einsum("nij,njk,nkl->nil", g_Ss, Mp, Sw)
    g_Sw = np.einsum("nji,njk,nkl->nil", Mp, g_Ss, Mp)
    R_wc = ctx.camera.pose.rotation.astype(dt)
    g_Jac = np.einsum("nij,kj->nik", g_M, R_wc)

    x, y, z = ctx.mu_cam[:, 0], ctx.mu_cam[:, 1], ctx.mu_cam[:, 2]
    fx, fy = intr.fx, intr.fy
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    g_mu_cam = np.empty((M, 3), dtype=dt)
    g_mu_cam[:, 0] = g_Jac[:, 0, 2] * (-fx * inv_z2) + g_mu_screen[:, 0] * fx * inv_z
    g_mu_cam[:, 1] = g_Jac[:, 1, 2] * (-fy * inv_z2) + g_mu_screen[:, 1] * fy * inv_z
    g_mu_cam[:, 2] = (
        g_Jac[:, 0, 0] * (-fx * inv_z2)
        + g_Jac[:, 1, 1] * (-fy * inv_z2)
        + g_Jac[:, 0, 2] * (2.0 * fx * x * inv_z2 * inv_z)
        + g_Jac[:, 1, 2] * (2.0 * fy * y * inv_z2 * inv_z)
        - g_mu_screen[:, 0] * fx * x * inv_z2
        - g_mu_screen[:, 1] * fy * y * inv_z2
        + g_z
    )
    g_mu_world = g_mu_cam @ R_wc

    # SH coefficients and the view-direction dependence of the color.
    k = flat.sh.shape[1]
    g_sh = ctx.basis[:, :, None] * g_color[:, None, :]
    if k > 1:
        dB = shlib.eval_basis_grad(ctx.dirs, k).astype(dt)
        g_dir = np.einsum("nkd,nkc,nc->nd", dB, flat.sh[keep].astype(dt), g_color)
        proj = g_dir - ctx.dirs * np.einsum("nd,nd->n", ctx.dirs, g_dir)[:, None]
        g_mu_world = g_mu_world + proj / ctx.dist[:, None]

    # Covariance chain to orientation and log-scales.
    R_world = flat.R_world[keep].astype(dt)
    scales2 = np.exp(2.0 * flat.log_scales[keep]).astype(dt)
    g_Rw = 2.0 * np.einsum("nij,njk,nk->nik", g_Sw, R_world, scales2)
    gD_diag = np.einsum("nik,nij,njk->nk", R_world, g_Sw, R_world)
    g_log_scales = 2.0 * scales2 * gD_diag

    # ---- scatter back to parameter containers ----
    out = SceneGrads(
        background=ParamGrads.zeros_like(scene.background),
        objects=[ParamGrads.zeros_like(o.gaussians) for o in scene.objects],
        corrections=[
            CorrectionGrads(np.zeros_like(o.corrections.dt), np.zeros_like(o.corrections.dq))
            for o in scene.objects
        ],
        sky_faces=sky_grad,
    )
    owner = flat.owner[keep]
    local = flat.local[keep]
    vs_norm = np.linalg.norm(g_mu_screen, axis=1)

    bg_rows = owner == BACKGROUND_OWNER
    if bg_rows.any():
        rows = np.nonzero(bg_rows)[0]
        li = local[rows]
        pg = out.background
        np.add.at(pg.positions, li, g_mu_world[rows])
        np.add.at(pg.sh, li, g_sh[rows])
        np.add.at(pg.opacity_logits, li, g_logit[rows])
        np.add.at(pg.log_scales, li, g_log_scales[rows])
        gq = rotmat_grad_to_quat_grad(g_Rw[rows], scene.background.rotations[li])
        np.add.at(pg.rotations, li, gq)
        np.add.at(pg.vs_grad_norm, li, vs_norm[rows])
        pg.seen[li] = True

    for slot, node in enumerate(scene.objects):
        rows = np.nonzero(owner == slot)[0]
        if len(rows) == 0 or flat.pose_terms[slot] is None:
            continue
        li = local[rows]
        R_v, t_v, pctx = flat.pose_terms[slot]
        R_v = R_v.astype(dt)
        pg = out.objects[slot]
        mu_c = node.gaussians.positions[li].astype(dt)
        g_mu_hat = g_mu_world[rows]

        np.add.at(pg.positions, li, g_mu_hat @ R_v)
        np.add.at(pg.sh, li, g_sh[rows])
        np.add.at(pg.opacity_logits, li, g_logit[rows])
        np.add.at(pg.log_scales, li, g_log_scales[rows])
        R_c = flat.R_canon[keep][rows].astype(dt)
        g_Rc = np.einsum("ji,njk->nik", R_v, g_Rw[rows])
        gq = rotmat_grad_to_quat_grad(g_Rc, node.gaussians.rotations[li])
        np.add.at(pg.rotations, li, gq)
        np.add.at(pg.vs_grad_norm, li, vs_norm[rows])
        pg.seen[li] = True

        # Pose gradient: mu_hat = R_v mu_c + t_v and R_hat = R_v R_c.
        g_Rv = np.einsum("ni,nj->ij", g_mu_hat, mu_c) + np.einsum("nij,nkj->ik", g_Rw[rows], R_c)
        g_tv = g_mu_hat.sum(axis=0)

        # R_v = R_corr(dq(t)) @ R_base; dq(t)/dt(t) blend linearly between keys.
        g_Rcorr = g_Rv @ pctx["R_base"].T
        g_dq_t = rotmat_grad_to_quat_grad(g_Rcorr, pctx["dq_t"])
        cg = out.corrections[slot]
        lo, hi, wgt = pctx["lo"], pctx["hi"], pctx["w"]
        cg.dq[lo] += (1.0 - wgt) * g_dq_t
        cg.dq[hi] += wgt * g_dq_t
        cg.dt[lo] += (1.0 - wgt) * g_tv
        cg.dt[hi] += wgt * g_tv

    return out
