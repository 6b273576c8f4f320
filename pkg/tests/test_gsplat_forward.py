import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_gaussians, random_scene, random_tracked_box, small_camera
from streetsplat.errors import BehindCamera
from streetsplat.geometry import quat_to_rotmat
from streetsplat.gsplat import (
    GaussianScene,
    GaussianSet,
    ObjectNode,
    RenderConfig,
    SkyCubemap,
    apply_mip_filter,
    covariance_world,
    inverse_sigmoid,
    project_covariance,
    render,
    render_reference,
    warp_object,
)
from streetsplat.scene_io import CameraIntrinsics, Se3Pose


class TestCovariance:
    def test_identity_unit_scales(self):
        S = covariance_world(np.array([1.0, 0, 0, 0]), np.ones(3))
        np.testing.assert_allclose(S, np.eye(3), atol=1e-15)

    def test_identity_axis_scales(self):
        S = covariance_world(np.array([1.0, 0, 0, 0]), np.array([2.0, 1.0, 1.0]))
        np.testing.assert_allclose(S, np.diag([4.0, 1.0, 1.0]), atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_eigenvalues_are_squared_scales(self, seed):
        rng = np.random.default_rng(seed)
        q = rng.normal(size=4)
        s = rng.uniform(0.1, 3.0, 3)
        S = covariance_world(q, s)
        np.testing.assert_allclose(S, S.T, atol=1e-12)
        eig = np.sort(np.linalg.eigvalsh(S))
        np.testing.assert_allclose(eig, np.sort(s**2), atol=1e-9)


class TestProjection:
    def _camera_pose(self):
        return Se3Pose(np.eye(3), np.zeros(3))

    def _intr(self):
        return CameraIntrinsics(fx=50.0, fy=60.0, cx=16.0, cy=12.0, width=32, height=24)

    def test_isotropic_on_axis_closed_form(self):
        sigma = 0.3
        d = 4.0
        S2 = project_covariance(sigma**2 * np.eye(3), self._camera_pose(), self._intr(), np.array([0, 0, d]))
        want = np.diag([(50.0 * sigma / d) ** 2, (60.0 * sigma / d) ** 2])
        np.testing.assert_allclose(S2, want, atol=1e-12)

    def test_depth_doubling_quarters_covariance(self):
        S = covariance_world(np.array([1.0, 0, 0, 0]), np.array([0.2, 0.3, 0.25]))
        a = project_covariance(S, self._camera_pose(), self._intr(), np.array([0, 0, 3.0]))
        b = project_covariance(S, self._camera_pose(), self._intr(), np.array([0, 0, 6.0]))
        np.testing.assert_allclose(b, a / 4.0, atol=1e-12)

    def test_zero_covariance_maps_to_zero(self):
        S2 = project_covariance(np.zeros((3, 3)), self._camera_pose(), self._intr(), np.array([0, 0, 5.0]))
        np.testing.assert_allclose(S2, 0, atol=1e-15)

    def test_behind_camera_raises(self):
        with pytest.raises(BehindCamera):
            project_covariance(np.eye(3), self._camera_pose(), self._intr(), np.array([0, 0, -1.0]))


class TestMipFilter:
    def test_zero_covariance(self):
        f, comp = apply_mip_filter(np.zeros((2, 2)))
        np.testing.assert_allclose(f, 0.3 * np.eye(2))
        assert comp == 0.0

    def test_large_covariance_compensation(self):
        f, comp = apply_mip_filter(np.diag([100.0, 100.0]))
        assert abs(comp - np.sqrt(10000.0 / 10060.09)) < 1e-9
        assert abs(comp - 0.9970) < 1e-4

    def test_additivity(self):
        once, _ = apply_mip_filter(np.diag([1.0, 2.0]))
        twice, _ = apply_mip_filter(once)
        np.testing.assert_allclose(twice, np.diag([1.0, 2.0]) + 0.6 * np.eye(2))


class TestWarp:
    def test_identity_pose_is_noop(self):
        rng = np.random.default_rng(0)
        gset = random_gaussians(rng, 5)
        gset.positions = rng.uniform(-0.9, 0.9, (5, 3))
        box = random_tracked_box(rng)
        box.rotations[:] = np.eye(3)
        box.translations[:] = 0
        node = ObjectNode("o", gset, box)
        warped = warp_object(node, 0.0)
        np.testing.assert_allclose(warped.positions, gset.positions, atol=1e-12)
        Ra = quat_to_rotmat(warped.unit_rotations())
        Rb = quat_to_rotmat(gset.unit_rotations())
        np.testing.assert_allclose(Ra, Rb, atol=1e-12)

    def test_pure_translation(self):
        rng = np.random.default_rng(1)
        gset = random_gaussians(rng, 4)
        gset.positions = rng.uniform(-0.9, 0.9, (4, 3))
        box = random_tracked_box(rng)
        box.rotations[:] = np.eye(3)
        box.translations[:] = np.array([1.0, 2.0, 3.0])
        node = ObjectNode("o", gset, box)
        warped = warp_object(node, 0.5)
        np.testing.assert_allclose(warped.positions, gset.positions + [1, 2, 3], atol=1e-12)
        np.testing.assert_allclose(
            quat_to_rotmat(warped.unit_rotations()), quat_to_rotmat(gset.unit_rotations()), atol=1e-12
        )
        np.testing.assert_array_equal(warped.log_scales, gset.log_scales)
        np.testing.assert_array_equal(warped.opacity_logits, gset.opacity_logits)
        np.testing.assert_array_equal(warped.sh, gset.sh)

    def test_warp_inverse_round_trip(self):
        rng = np.random.default_rng(2)
        gset = random_gaussians(rng, 6)
        gset.positions = rng.uniform(-0.9, 0.9, (6, 3))
        box = random_tracked_box(rng)
        node = ObjectNode("o", gset, box)
        warped = warp_object(node, 0.25)

        from streetsplat.scene_io import interpolate_box_pose

        pose = interpolate_box_pose(box, 0.25)
        back_pos = pose.inverse().apply(warped.positions)
        np.testing.assert_allclose(back_pos, gset.positions, atol=1e-9)
        R_back = np.einsum("ji,njk->nik", pose.rotation, quat_to_rotmat(warped.unit_rotations()))
        np.testing.assert_allclose(R_back, quat_to_rotmat(gset.unit_rotations()), atol=1e-9)


class TestRender:
    def test_empty_scene_is_pure_sky(self):
        rng = np.random.default_rng(0)
        sky = SkyCubemap(rng.uniform(0, 1, (6, 4, 4, 3)))
        scene = GaussianScene(GaussianSet.empty(), [], sky)
        cam = small_camera()
        out = render(scene, cam, 0.0)
        assert (out.opacity == 0).all()
        # every pixel equals a texel of the cubemap
        flat = out.rgb.reshape(-1, 3)
        texels = sky.faces.reshape(-1, 3)
        for px in flat[:: 37]:
            assert (np.abs(texels - px).max(axis=1) < 1e-12).any()

    def test_opaque_gaussian_center_color(self):
        sh = np.zeros((1, 1, 3))
        sh[0, 0] = (np.array([0.9, 0.2, 0.4]) - 0.5) / 0.28209479177387814
        gset = GaussianSet(
            positions=np.array([[5.0, 0.0, 0.0]]),
            rotations=np.array([[1.0, 0, 0, 0]]),
            log_scales=np.log(np.full((1, 3), 0.8)),
            opacity_logits=np.array([inverse_sigmoid(np.array(0.999))]).reshape(1),
            sh=sh,
        )
        scene = GaussianScene(gset, [], SkyCubemap.constant((0.0, 0.0, 0.0), 4))
        cam = small_camera()
        out = render(scene, cam, 0.0)
        cy, cx = cam.intrinsics.height // 2, cam.intrinsics.width // 2
        np.testing.assert_allclose(out.rgb[cy, cx], [0.9, 0.2, 0.4], atol=0.02)
        assert out.opacity[cy, cx] > 0.98

    @pytest.mark.parametrize("seed", range(4))
    def test_tiled_equals_reference(self, seed):
        rng = np.random.default_rng(seed)
        scene = random_scene(rng, n_bg=160, n_obj=40)
        cam = small_camera()
        for cfg in (RenderConfig(), RenderConfig(tile=7, threads=3)):
            out = render(scene, cam, 0.35, cfg)
            ref = render_reference(scene, cam, 0.35, cfg)
            assert np.abs(out.rgb - ref.rgb).max() < 1e-6
            assert np.abs(out.depth - ref.depth).max() < 1e-6
            assert np.abs(out.opacity - ref.opacity).max() < 1e-6
            assert np.abs(out.object_alpha - ref.object_alpha).max() < 1e-6

    def test_threads_bit_identical(self):
        rng = np.random.default_rng(11)
        scene = random_scene(rng, n_bg=120, n_obj=30)
        cam = small_camera()
        a = render(scene, cam, 0.5, RenderConfig(threads=1))
        b = render(scene, cam, 0.5, RenderConfig(threads=4))
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.opacity, b.opacity)
        assert np.array_equal(a.object_alpha, b.object_alpha)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        gset = random_gaussians(rng, 50)
        sky = SkyCubemap.constant((0.3, 0.4, 0.5), 4)
        cam = small_camera()
        a = render(GaussianScene(gset, [], sky), cam, 0.0)
        # permuting the list must not change the image (canonical depth sort);
        # ties in depth are broken by index, so keep depths distinct
        perm = rng.permutation(len(gset))
        b = render(GaussianScene(gset.take(perm), [], sky), cam, 0.0)
        assert np.abs(a.rgb - b.rgb).max() < 1e-12

    def test_float32_matches_float64(self):
        rng = np.random.default_rng(6)
        scene = random_scene(rng, n_bg=80, n_obj=20)
        cam = small_camera()
        a = render(scene, cam, 0.25, RenderConfig(dtype=np.float64))
        b = render(scene, cam, 0.25, RenderConfig(dtype=np.float32))
        assert np.abs(a.rgb - b.rgb).max() < 1e-4

    def test_warp_then_render_equals_prewarped(self):
        rng = np.random.default_rng(7)
        scene = random_scene(rng, n_bg=0, n_obj=10)
        node = scene.objects[0]
        t = 0.6
        warped = warp_object(node, t)
        static = GaussianScene(warped, [], scene.sky)
        cam = small_camera()
        a = render(scene, cam, t)
        b = render(static, cam, t)
        assert np.abs(a.rgb - b.rgb).max() < 1e-9

    def test_compositing_invariants(self):
        rng = np.random.default_rng(8)
        scene = random_scene(rng, n_bg=60, n_obj=20)
        cam = small_camera()
        out = render(scene, cam, 0.4)
        assert (out.opacity >= 0).all() and (out.opacity <= 1.0).all()
        assert (out.object_alpha <= out.opacity + 1e-6).all()
        assert (out.object_alpha >= -1e-12).all()


def test_compositing_weights_and_hull():
    """Per-pixel weights from an explicit recomputation: nonnegative, sum to
    opacity exactly, and rgb lies in the convex hull of contributor colors
    plus the sky sample."""
    rng = np.random.default_rng(9)
    scene = random_scene(rng, n_bg=40, n_obj=12)
    cam = small_camera(width=16, height=12)
    cfg = RenderConfig()
    out, ctx = render(scene, cam, 0.3, cfg, want_ctx=True)
    H, W = 12, 16
    for i in range(H):
        for j in range(W):
            pu, pv = j + 0.5, i + 0.5
            du = pu - ctx.uv[:, 0]
            dv = pv - ctx.uv[:, 1]
            m = (
                ctx.Lam[:, 0, 0] * du * du
                + 2 * ctx.Lam[:, 0, 1] * du * dv
                + ctx.Lam[:, 1, 1] * dv * dv
            )
            alpha = ctx.peak * np.exp(-0.5 * m)
            alpha = np.where(alpha >= cfg.alpha_min, alpha, 0.0)
            alpha = np.minimum(alpha, cfg.alpha_clamp)
            T = 1.0
            weights = np.zeros_like(alpha)
            for g in range(len(alpha)):
                if T < cfg.transmittance_min:
                    break
                weights[g] = alpha[g] * T
                T *= 1.0 - alpha[g]
            assert (weights >= 0).all()
            assert 0.0 <= weights.sum() <= 1.0 + 1e-12
            assert abs(out.opacity[i, j] - weights.sum()) < 1e-12
            # convex combination of contributor colors and the sky sample
            colors = np.vstack([ctx.colors, ctx.sky_rgb[i, j][None, :]])
            coeffs = np.concatenate([weights, [1.0 - weights.sum()]])
            lo = colors.min(axis=0) - 1e-9
            hi = colors.max(axis=0) + 1e-9
            np.testing.assert_allclose(out.rgb[i, j], coeffs @ colors, atol=1e-9)
            assert (out.rgb[i, j] >= lo).all() and (out.rgb[i, j] <= hi).all()


def test_object_extent_soft_check_warns():
    rng = np.random.default_rng(12)
    gset = random_gaussians(rng, 3)
    gset.positions = np.array([[9.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.1, 0.1, 0.1]])
    with pytest.warns(UserWarning, match="1.5x box extents"):
        ObjectNode("far", gset, random_tracked_box(rng))


def test_render_skips_objects_outside_tracklet_span():
    rng = np.random.default_rng(13)
    scene = random_scene(rng, n_bg=5, n_obj=3)
    t_inside, t_outside = 0.5, 5.0  # tracklet spans [0, 1]
    a = render(scene, small_camera(), t_inside)
    b = render(scene, small_camera(), t_outside)
    assert (b.object_alpha == 0).all()
    assert a.object_alpha.max() >= 0


def test_warp_object_out_of_range_raises():
    from streetsplat.errors import OutOfRange

    rng = np.random.default_rng(14)
    gset = random_gaussians(rng, 3)
    gset.positions = rng.uniform(-0.9, 0.9, (3, 3))
    node = ObjectNode("o", gset, random_tracked_box(rng))
    with pytest.raises(OutOfRange):
        warp_object(node, 7.5)
