"""Scene checkpoint: all Gaussian parameters, cubemap texels, tracklet data,
and learnable pose corrections in one versioned binary container."""
from __future__ import annotations

import numpy as np

from ..container import read_container, write_container
from ..errors import SchemaError
from ..scene_io import TrackedBox
from .params import GaussianScene, GaussianSet, ObjectNode, PoseCorrections, SkyCubemap

CHECKPOINT_KIND = "streetsplat-checkpoint/v1"


def _set_arrays(prefix: str, g: GaussianSet, arrays: dict) -> None:
    arrays[f"{prefix}/positions"] = g.positions
    arrays[f"{prefix}/rotations"] = g.rotations
    arrays[f"{prefix}/log_scales"] = g.log_scales
    arrays[f"{prefix}/opacity_logits"] = g.opacity_logits
    arrays[f"{prefix}/sh"] = g.sh


def _set_from(prefix: str, arrays: dict) -> GaussianSet:
    return GaussianSet(
        arrays[f"{prefix}/positions"],
        arrays[f"{prefix}/rotations"],
        arrays[f"{prefix}/log_scales"],
        arrays[f"{prefix}/opacity_logits"],
        arrays[f"{prefix}/sh"],
    )


def save_checkpoint(scene: GaussianScene, path, meta: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    _set_arrays("background", scene.background, arrays)
    arrays["sky/faces"] = scene.sky.faces
    objects_meta = []
    for i, node in enumerate(scene.objects):
        p = f"objects/{i}"
        _set_arrays(p, node.gaussians, arrays)
        arrays[f"{p}/tracklet/timestamps"] = node.tracklet.timestamps
        arrays[f"{p}/tracklet/rotations"] = node.tracklet.rotations
        arrays[f"{p}/tracklet/translations"] = node.tracklet.translations
        arrays[f"{p}/tracklet/dimensions"] = node.tracklet.dimensions
        arrays[f"{p}/corrections/timestamps"] = node.corrections.timestamps
        arrays[f"{p}/corrections/dt"] = node.corrections.dt
        arrays[f"{p}/corrections/dq"] = node.corrections.dq
        objects_meta.append({"object_id": node.object_id, "class_label": node.tracklet.class_label})
    full_meta = {"kind": CHECKPOINT_KIND, "objects": objects_meta}
    if meta:
        full_meta["extra"] = meta
    write_container(path, arrays, full_meta)


def load_checkpoint(path) -> GaussianScene:
    arrays, meta = read_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise SchemaError(f"{path} is not a scene checkpoint (kind={meta.get('kind')!r})")
    background = _set_from("background", arrays)
    sky = SkyCubemap(arrays["sky/faces"])
    objects = []
    for i, om in enumerate(meta.get("objects", [])):
        p = f"objects/{i}"
        tracklet = TrackedBox(
            object_id=om["object_id"],
            class_label=om["class_label"],
            dimensions=arrays[f"{p}/tracklet/dimensions"],
            timestamps=arrays[f"{p}/tracklet/timestamps"],
            rotations=arrays[f"{p}/tracklet/rotations"],
            translations=arrays[f"{p}/tracklet/translations"],
        )
        corrections = PoseCorrections(
            arrays[f"{p}/corrections/timestamps"],
            arrays[f"{p}/corrections/dt"],
            arrays[f"{p}/corrections/dq"],
        )
        objects.append(
            ObjectNode(om["object_id"], _set_from(p, arrays), tracklet, corrections)
        )
    return GaussianScene(background=background, objects=objects, sky=sky)
