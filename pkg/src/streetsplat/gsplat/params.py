"""Parameter containers for the dynamic Gaussian scene graph.

Gaussians are stored struct-of-arrays: positions, raw (unnormalized)
quaternions, log-scales, pre-sigmoid opacity logits, and per-channel SH
coefficients. Object nodes keep canonical-frame Gaussians plus learnable
per-timestamp pose corrections on top of their tracklet.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvariantViolation, OutOfRange
from ..geometry import quat_normalize, quat_to_rotmat
from ..scene_io import TrackedBox, interpolate_box_pose
from . import sh as shlib


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def inverse_sigmoid(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class GaussianSet:
    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) raw quaternions, normalized on use
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray  # (N, K, 3), K = (degree + 1)^2

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(-1, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim == 2:
            self.sh = self.sh[:, None, :]
        shlib.degree_for(self.sh.shape[1])

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def sh_degree(self) -> int:
        return shlib.degree_for(self.sh.shape[1])

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def unit_rotations(self) -> np.ndarray:
        return quat_normalize(self.rotations)

    def validate(self) -> None:
        for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh"):
            arr = getattr(self, name)
            if not np.isfinite(arr).all():
                raise InvariantViolation(f"gaussian {name} contain non-finite values")
        if (np.linalg.norm(self.rotations, axis=1) == 0).any():
            raise InvariantViolation("zero-norm quaternion cannot be normalized")

    def take(self, idx) -> "GaussianSet":
        return GaussianSet(
            self.positions[idx],
            self.rotations[idx],
            self.log_scales[idx],
            self.opacity_logits[idx],
            self.sh[idx],
        )

    @staticmethod
    def concatenate(parts: list["GaussianSet"]) -> "GaussianSet":
        return GaussianSet(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.rotations for p in parts]),
            np.concatenate([p.log_scales for p in parts]),
            np.concatenate([p.opacity_logits for p in parts]),
            np.concatenate([p.sh for p in parts]),
        )

    @classmethod
    def empty(cls, n_coeffs: int = 1) -> "GaussianSet":
        return cls(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, n_coeffs, 3))
        )

    @classmethod
    def from_points(
        cls,
        positions: np.ndarray,
        colors: np.ndarray,
        scale: float = 0.1,
        opacity: float = 0.1,
        n_coeffs: int = 1,
    ) -> "GaussianSet":
        """Initialize isotropic Gaussians at given points with given base colors."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        quats = np.zeros((n, 4))
        quats[:, 0] = 1.0
        sh = np.zeros((n, n_coeffs, 3))
        sh[:, 0, :] = shlib.rgb_to_dc(colors)
        return cls(
            positions=positions,
            rotations=quats,
            log_scales=np.full((n, 3), np.log(scale)),
            opacity_logits=np.full(n, float(inverse_sigmoid(np.array(opacity)))),
            sh=sh,
        )


@dataclass
class PoseCorrections:
    """Learnable residual pose per tracklet timestamp: translation + raw quaternion."""

    timestamps: np.ndarray  # (M,)
    dt: np.ndarray  # (M, 3)
    dq: np.ndarray  # (M, 4), identity (1,0,0,0) at init

    def __post_init__(self) -> None:
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.dt = np.asarray(self.dt, dtype=np.float64).reshape(-1, 3)
        self.dq = np.asarray(self.dq, dtype=np.float64).reshape(-1, 4)

    @classmethod
    def identity(cls, timestamps: np.ndarray) -> "PoseCorrections":
        m = len(timestamps)
        dq = np.zeros((m, 4))
        dq[:, 0] = 1.0
        return cls(np.asarray(timestamps, dtype=np.float64), np.zeros((m, 3)), dq)

    def blend_weights(self, t: float) -> tuple[int, int, float]:
        """Bracketing correction indices and the upper weight at time t."""
        ts = self.timestamps
        if t < ts[0] or t > ts[-1]:
            raise OutOfRange(f"time {t} outside correction span [{ts[0]}, {ts[-1]}]")
        k = int(np.searchsorted(ts, t))
        if k < len(ts) and ts[k] == t:
            return k, k, 0.0
        lo, hi = k - 1, k
        return lo, hi, float((t - ts[lo]) / (ts[hi] - ts[lo]))


@dataclass
class ObjectNode:
    object_id: str
    gaussians: GaussianSet  # canonical box frame
    tracklet: TrackedBox
    corrections: PoseCorrections | None = None

    def __post_init__(self) -> None:
        if self.corrections is None:
            self.corrections = PoseCorrections.identity(self.tracklet.timestamps)
        self.check_extents()

    def pose_terms(self, t: float):
        """Corrected box-to-world pose pieces at time t.

        Returns (R_world (3,3), t_world (3,), ctx) where ctx carries the
        intermediate values the backward pass needs: blend weights, the blended
        raw correction quaternion, and the base (uncorrected) rotation.
        """
        base = interpolate_box_pose(self.tracklet, t)
        lo, hi, w = self.corrections.blend_weights(t)
        dq_t = (1.0 - w) * self.corrections.dq[lo] + w * self.corrections.dq[hi]
        dt_t = (1.0 - w) * self.corrections.dt[lo] + w * self.corrections.dt[hi]
        R_corr = quat_to_rotmat(quat_normalize(dq_t))
        R = R_corr @ base.rotation
        trans = base.translation + dt_t
        ctx = {"lo": lo, "hi": hi, "w": w, "dq_t": dq_t, "R_base": base.rotation, "R_corr": R_corr}
        return R, trans, ctx

    def check_extents(self) -> None:
        """Soft check: canonical positions within 1.5x the box extents (warn only)."""
        half = 1.5 * self.tracklet.dimensions / 2.0
        if len(self.gaussians) and (np.abs(self.gaussians.positions) > half).any():
            warnings.warn(
                f"object {self.object_id!r} has gaussians outside 1.5x box extents",
                stacklevel=2,
            )


@dataclass
class SkyCubemap:
    """Six faces (+x, -x, +y, -y, +z, -z), each (F, F, 3) in [0, 1]."""

    faces: np.ndarray  # (6, F, F, 3)

    def __post_init__(self) -> None:
        self.faces = np.asarray(self.faces, dtype=np.float64)
        if self.faces.ndim != 4 or self.faces.shape[0] != 6 or self.faces.shape[1] != self.faces.shape[2]:
            raise InvariantViolation(f"cubemap faces must be (6, F, F, 3), got {self.faces.shape}")

    @property
    def resolution(self) -> int:
        return self.faces.shape[1]

    def validate(self) -> None:
        if not np.isfinite(self.faces).all():
            raise InvariantViolation("cubemap contains non-finite texels")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() > 1):
            raise InvariantViolation("cubemap texels outside [0, 1]")

    @classmethod
    def constant(cls, color, resolution: int = 16) -> "SkyCubemap":
        faces = np.ones((6, resolution, resolution, 3)) * np.asarray(color, dtype=np.float64)
        return cls(faces)

    def sample_indices(self, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest-texel lookup indices (face, row, col) for world directions."""
        d = np.asarray(dirs, dtype=np.float64)
        ax, ay, az = np.abs(d[..., 0]), np.abs(d[..., 1]), np.abs(d[..., 2])
        face = np.where(
            (ax >= ay) & (ax >= az),
            np.where(d[..., 0] >= 0, 0, 1),
            np.where(ay >= az, np.where(d[..., 1] >= 0, 2, 3), np.where(d[..., 2] >= 0, 4, 5)),
        )
        x, y, z = d[..., 0], d[..., 1], d[..., 2]
        m = np.choose(face, [ax, ax, ay, ay, az, az])
        m = np.where(m == 0, 1.0, m)
        s = np.choose(face, [-z, z, x, x, x, -x]) / m
        t = np.choose(face, [-y, -y, z, -z, -y, -y]) / m
        f = self.resolution
        col = np.clip(np.floor((s + 1.0) * 0.5 * f).astype(np.int64), 0, f - 1)
        row = np.clip(np.floor((t + 1.0) * 0.5 * f).astype(np.int64), 0, f - 1)
        return face, row, col

    def sample(self, dirs: np.ndarray) -> np.ndarray:
        face, row, col = self.sample_indices(dirs)
        return self.faces[face, row, col]


@dataclass
class GaussianScene:
    background: GaussianSet
    objects: list[ObjectNode] = field(default_factory=list)
    sky: SkyCubemap = field(default_factory=lambda: SkyCubemap.constant((0.5, 0.6, 0.8)))

    def object_by_id(self, object_id: str) -> ObjectNode:
        for node in self.objects:
            if node.object_id == object_id:
                return node
        raise OutOfRange(f"no object node {object_id!r}")

    def total_gaussians(self) -> int:
        return len(self.background) + sum(len(o.gaussians) for o in self.objects)
