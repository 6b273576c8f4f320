import numpy as np
import pytest

from conftest import random_scene, small_camera
from streetsplat.gsplat import grad_check_config, render, render_backward

REL_TOL = 1e-3
GRAD_FLOOR = 1e-6


def scalar_loss(scene, cam, t, cfg, pixel_grads):
    out = render(scene, cam, t, cfg)
    gC, gD, gO, gB = pixel_grads
    return float(
        (out.rgb * gC).sum()
        + (out.depth * gD).sum()
        + (out.opacity * gO).sum()
        + (out.object_alpha * gB).sum()
    )


def fd_compare(arr, analytic, loss_fn, h=1e-5):
    """Central finite differences over every element; returns the worst
    relative error among elements with |g| above the floor."""
    worst = 0.0
    for mi in np.ndindex(arr.shape):
        orig = arr[mi]
        arr[mi] = orig + h
        lp = loss_fn()
        arr[mi] = orig - h
        lm = loss_fn()
        arr[mi] = orig
        g_fd = (lp - lm) / (2 * h)
        g_an = analytic[mi]
        if max(abs(g_an), abs(g_fd)) > GRAD_FLOOR:
            worst = max(worst, abs(g_an - g_fd) / max(abs(g_an), abs(g_fd)))
    return worst


def check_scene_gradients(seed, n_bg=6, n_obj=4, sky_res=4, t=0.35):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, n_bg=n_bg, n_obj=n_obj, sky_res=sky_res)
    cam = small_camera(width=20, height=16)
    cfg = grad_check_config()
    out, ctx = render(scene, cam, t, cfg, want_ctx=True)
    pixel_grads = (
        rng.normal(size=out.rgb.shape),
        rng.normal(size=out.depth.shape) * 0.1,
        rng.normal(size=out.opacity.shape) * 0.1,
        rng.normal(size=out.object_alpha.shape) * 0.1,
    )
    grads = render_backward(scene, ctx, *pixel_grads)
    loss = lambda: scalar_loss(scene, cam, t, cfg, pixel_grads)

    worst = {}
    bg = scene.background
    pg = grads.background
    worst["position"] = fd_compare(bg.positions, pg.positions, loss)
    worst["rotation"] = fd_compare(bg.rotations, pg.rotations, loss)
    worst["log_scale"] = fd_compare(bg.log_scales, pg.log_scales, loss)
    worst["opacity"] = fd_compare(bg.opacity_logits, pg.opacity_logits, loss)
    worst["sh"] = fd_compare(bg.sh, pg.sh, loss)
    if scene.objects:
        node = scene.objects[0]
        og = grads.objects[0]
        worst["obj_position"] = max(worst.get("obj_position", 0), fd_compare(node.gaussians.positions, og.positions, loss))
        worst["obj_rotation"] = fd_compare(node.gaussians.rotations, og.rotations, loss)
        worst["obj_log_scale"] = fd_compare(node.gaussians.log_scales, og.log_scales, loss)
        worst["obj_opacity"] = fd_compare(node.gaussians.opacity_logits, og.opacity_logits, loss)
        worst["obj_sh"] = fd_compare(node.gaussians.sh, og.sh, loss)
        cg = grads.corrections[0]
        worst["tracklet_t"] = fd_compare(node.corrections.dt, cg.dt, loss)
        worst["tracklet_q"] = fd_compare(node.corrections.dq, cg.dq, loss, h=1e-5)
    worst["cubemap"] = fd_compare(scene.sky.faces, grads.sky_faces, loss, h=1e-4)
    return worst


@pytest.mark.parametrize("seed", range(3))
def test_all_parameter_gradients_match_fd(seed):
    worst = check_scene_gradients(seed)
    for name, err in worst.items():
        assert err < REL_TOL, f"{name}: rel err {err:.2e}"


def test_single_gaussian_position_gradient():
    rng = np.random.default_rng(100)
    scene = random_scene(rng, n_bg=1, n_obj=0, with_object=False)
    cam = small_camera(width=16, height=12)
    cfg = grad_check_config()
    out, ctx = render(scene, cam, 0.0, cfg, want_ctx=True)
    gC = np.zeros_like(out.rgb)
    gC[6, 8, 1] = 1.0  # single-pixel upstream gradient
    zeros = np.zeros_like(out.depth)
    grads = render_backward(scene, ctx, grad_rgb=gC)
    loss = lambda: scalar_loss(scene, cam, 0.0, cfg, (gC, zeros, zeros, zeros))
    worst = fd_compare(scene.background.positions, grads.background.positions, loss, h=1e-4)
    assert worst < REL_TOL


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(5)
    scene = random_scene(rng, n_bg=8, n_obj=3)
    cam = small_camera()
    out, ctx = render(scene, cam, 0.3, grad_check_config(), want_ctx=True)
    grads = render_backward(scene, ctx)
    assert (grads.background.positions == 0).all()
    assert (grads.background.rotations == 0).all()
    assert (grads.background.sh == 0).all()
    assert (grads.sky_faces == 0).all()
    assert (grads.objects[0].positions == 0).all()
    assert (grads.corrections[0].dt == 0).all()
    assert (grads.corrections[0].dq == 0).all()


def test_view_space_stats_populated():
    rng = np.random.default_rng(6)
    scene = random_scene(rng, n_bg=10, n_obj=4)
    cam = small_camera()
    out, ctx = render(scene, cam, 0.3, grad_check_config(), want_ctx=True)
    gC = rng.normal(size=out.rgb.shape)
    grads = render_backward(scene, ctx, grad_rgb=gC)
    assert grads.background.seen.any()
    assert (grads.background.vs_grad_norm[grads.background.seen] >= 0).all()
    assert grads.background.vs_grad_norm[grads.background.seen].max() > 0


def test_production_config_gradients_match_fd_away_from_guards():
    """With the numerical guards active, gradients still match FD when no
    alpha sits at a guard boundary (moderate opacities, soft scene)."""
    rng = np.random.default_rng(7)
    scene = random_scene(rng, n_bg=5, n_obj=0, with_object=False)
    scene.background.opacity_logits[:] = rng.uniform(-1.0, 0.0, 5)
    cam = small_camera(width=16, height=12)
    from streetsplat.gsplat import RenderConfig

    cfg = RenderConfig(alpha_min=0.0, transmittance_min=0.0)  # guards off = smooth
    out, ctx = render(scene, cam, 0.0, cfg, want_ctx=True)
    gC = rng.normal(size=out.rgb.shape)
    zeros = np.zeros_like(out.depth)
    grads = render_backward(scene, ctx, grad_rgb=gC)
    loss = lambda: scalar_loss(scene, cam, 0.0, cfg, (gC, zeros, zeros, zeros))
    assert fd_compare(scene.background.positions, grads.background.positions, loss) < REL_TOL
