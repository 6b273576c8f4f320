import numpy as np
import pytest

from streetsplat.gsplat import GaussianScene, GaussianSet, ObjectNode, SkyCubemap
from streetsplat.scene_io import Camera, CameraIntrinsics, Se3Pose, TrackedBox
from streetsplat.synthetic import build_demo_scene, forward_camera


@pytest.fixture(scope="session")
def demo_scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo_scene")
    build_demo_scene(root, n_frames=4, width=64, height=48, n_points=900, seed=7)
    return root


def small_camera(width=32, height=24, fx=40.0, fy=42.0) -> Camera:
    intr = CameraIntrinsics(fx=fx, fy=fy, cx=width / 2, cy=height / 2, width=width, height=height)
    return forward_camera(np.zeros(3), intr)


def random_gaussians(rng, n, k=4, depth=(3.0, 8.0), opacity=(-1.5, 2.0)) -> GaussianSet:
    pos = np.column_stack(
        [rng.uniform(*depth, n), rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n)]
    )
    return GaussianSet(
        positions=pos,
        rotations=rng.normal(size=(n, 4)),
        log_scales=np.log(rng.uniform(0.1, 0.5, (n, 3))),
        opacity_logits=rng.uniform(*opacity, n),
        sh=rng.uniform(-0.2, 0.2, (n, k, 3)),
    )


def random_tracked_box(rng, object_id="obj_0") -> TrackedBox:
    def pose(tr, q):
        return Se3Pose.from_quat(np.asarray(q, dtype=float), np.asarray(tr, dtype=float))

    poses = [
        (0.0, pose([5.0, 1.0, 0.0], [1, 0, 0, 0])),
        (1.0, pose([6.0, 0.0, 0.5], [0.9, 0.1, 0.2, 0.1])),
    ]
    return TrackedBox.from_poses(object_id, "vehicle", np.array([2.0, 2.0, 2.0]), poses)


def random_scene(rng, n_bg=8, n_obj=4, k=4, sky_res=4, with_object=True) -> GaussianScene:
    bg = random_gaussians(rng, n_bg, k)
    objects = []
    if with_object and n_obj:
        oset = random_gaussians(rng, n_obj, k)
        oset.positions = rng.uniform(-0.8, 0.8, (n_obj, 3))
        node = ObjectNode("obj_0", oset, random_tracked_box(rng))
        node.corrections.dt += rng.normal(0, 0.05, node.corrections.dt.shape)
        node.corrections.dq += rng.normal(0, 0.05, node.corrections.dq.shape)
        objects.append(node)
    sky = SkyCubemap(rng.uniform(0.2, 0.9, (6, sky_res, sky_res, 3)))
    return GaussianScene(bg, objects, sky)
