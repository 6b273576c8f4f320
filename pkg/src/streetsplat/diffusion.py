"""Diffusion mathematics over pluggable denoiser and codec interfaces.

Pure, network-agnostic procedures: the forward noising affine, zero-initialized
condition injection, the conditional training objective with independent
condition dropout, deterministic iterative sampling with classifier-free
guidance and noisy-render initialization, chunked long-video stitching with
frame clamping, and a tiny trainable convolutional denoiser for end-to-end
smoke tests.

Latents are arrays shaped (frames, channels, height, width). The denoiser
predicts the clean latent x0 directly, which makes the oracle denoiser and
the clamping trick exact; the epsilon parameterization is the algebraic
transform eps = (x_t - sqrt(ab) x0) / sqrt(1 - ab).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .errors import InvalidChunking, InvalidScale, SchemaError, ShapeMismatch

DEFAULT_STEPS = 50
DEFAULT_CFG_SCALE = 2.5
DEFAULT_DROPOUT = 0.15
DEFAULT_CHUNK = 25
DEFAULT_OVERLAP = 5


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    """Discrete alpha-bar ladder; alpha_bar[t-1] holds the value for step t,
    and t = 0 means clean data (alpha_bar = 1)."""

    alpha_bar: np.ndarray  # (T,) strictly decreasing in (0, 1]

    def __post_init__(self) -> None:
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64).reshape(-1)
        if len(self.alpha_bar) < 2:
            raise ShapeMismatch("schedule needs at least 2 steps")
        if not ((self.alpha_bar > 0) & (self.alpha_bar <= 1)).all():
            raise ShapeMismatch("alpha_bar values must lie in (0, 1]")
        if not (np.diff(self.alpha_bar) < 0).all():
            raise ShapeMismatch("alpha_bar must be strictly decreasing")

    @property
    def T(self) -> int:
        return len(self.alpha_bar)

    def at(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def timestep_for_scale(self, s: float) -> int:
        """Noise scale in [0, 1] -> discrete timestep round(s * T)."""
        if not (0.0 <= s <= 1.0):
            raise InvalidScale(f"noise scale {s} outside [0, 1]")
        return int(round(s * self.T))

    @classmethod
    def cosine(cls, T: int = 1000, offset: float = 0.008) -> "NoiseSchedule":
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + offset) / (1 + offset) * np.pi / 2.0) ** 2
        alpha_bar = f[1:] / f[0]
        betas = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 0.0, 0.999)
        ab = np.cumprod(np.concatenate([[alpha_bar[0]], 1.0 - betas]))
        return cls(ab)


# ---------------------------------------------------------------------------
# Interfaces
# ---------------------------------------------------------------------------


class Denoiser:
    """evaluate(x_t, t, c_ref, c_p) -> predicted clean latent; c_ref and c_p
    may be None (dropped conditioning / the unconditional CFG branch)."""

    def evaluate(self, x_t: np.ndarray, t: int, c_ref, c_p) -> np.ndarray:
        raise NotImplementedError


class OracleDenoiser(Denoiser):
    """Returns fixed target latents regardless of input; the exact-recovery
    fixed point of the sampler."""

    def __init__(self, target: np.ndarray):
        self.target = np.asarray(target, dtype=np.float64)

    def evaluate(self, x_t, t, c_ref, c_p):
        if x_t.shape != self.target.shape:
            raise ShapeMismatch(f"oracle target {self.target.shape} vs input {x_t.shape}")
        return self.target.copy()


class ConditionEchoDenoiser(Denoiser):
    """Returns the condition latent as the clean prediction (the noisy input
    when unconditioned); lets the sampler run end to end without a trained
    network, recovering the conditions exactly at cfg_scale 1."""

    def evaluate(self, x_t, t, c_ref, c_p):
        if c_p is None:
            return np.asarray(x_t, dtype=np.float64).copy()
        return np.asarray(c_p, dtype=np.float64).copy()


class Codec:
    """encode(images) -> latent, decode(latent) -> images."""

    def encode(self, images: list[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def decode(self, latent: np.ndarray) -> list[np.ndarray]:
        raise NotImplementedError


class IdentityCodec(Codec):
    """Channel transpose only; decode(encode(x)) == x exactly."""

    def encode(self, images):
        return np.stack([np.moveaxis(np.asarray(im, dtype=np.float64), -1, 0) for im in images])

    def decode(self, latent):
        return [np.moveaxis(latent[i], 0, -1).copy() for i in range(latent.shape[0])]


# ---------------------------------------------------------------------------
# Zero-convolution injection
# ---------------------------------------------------------------------------


def conv2d_same(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Plain stride-1 zero-padded convolution; x is (C_in, H, W), kernel is
    (C_out, C_in, kh, kw)."""
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[0] != c_in:
        raise ShapeMismatch(f"conv expects {c_in} channels, got {x.shape[0]}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    h, w = x.shape[1:]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    out = np.einsum("ihwkl,oikl->ohw", windows[:, :h, :w], kernel)
    return out + bias[:, None, None]


def conv2d_same_backward(
    x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (d kernel, d bias) of conv2d_same for an upstream gradient."""
    c_out, c_in, kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    h, w = x.shape[1:]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    g_kernel = np.einsum("ihwkl,ohw->oikl", windows[:, :h, :w], grad_out)
    g_bias = grad_out.sum(axis=(1, 2))
    return g_kernel, g_bias


@dataclass
class ZeroConvInjector:
    """Trainable convolution over the condition latent, all-zeros at init so
    injection starts as an exact no-op."""

    kernel: np.ndarray  # (C, C, kh, kw)
    bias: np.ndarray  # (C,)

    @classmethod
    def zeros(cls, channels: int, kernel_size: int = 3) -> "ZeroConvInjector":
        return cls(
            np.zeros((channels, channels, kernel_size, kernel_size)), np.zeros(channels)
        )

    def is_zero(self) -> bool:
        return not (self.kernel.any() or self.bias.any())

    def apply(self, z_c: np.ndarray) -> np.ndarray:
        """Convolve each frame of a (F, C, H, W) condition latent."""
        return np.stack([conv2d_same(z_c[i], self.kernel, self.bias) for i in range(z_c.shape[0])])


def inject_condition(z_t: np.ndarray, z_c: np.ndarray, injector: ZeroConvInjector) -> np.ndarray:
    """Element-wise addition of the injected condition; bitwise no-op at init."""
    z_t = np.asarray(z_t, dtype=np.float64)
    z_c = np.asarray(z_c, dtype=np.float64)
    if z_t.shape != z_c.shape:
        raise ShapeMismatch(f"latent {z_t.shape} vs condition {z_c.shape}")
    if injector.is_zero():
        return z_t.copy()
    return z_t + injector.apply(z_c)


# ---------------------------------------------------------------------------
# Forward process and training loss
# ---------------------------------------------------------------------------


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {x0.shape} vs eps {eps.shape}")
    ab = schedule.at(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def training_loss(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    z: np.ndarray,
    z_c: np.ndarray,
    c_ref,
    rng: np.random.Generator,
    dropout_p: float = DEFAULT_DROPOUT,
    injector: ZeroConvInjector | None = None,
) -> tuple[float, dict]:
    """One draw of the conditional denoising objective: uniform timestep,
    Gaussian noise, condition injection, independent dropout of c_ref and the
    condition latent, and the mean squared error against the clean latent."""
    z = np.asarray(z, dtype=np.float64)
    z_c = np.asarray(z_c, dtype=np.float64)
    if z.shape != z_c.shape:
        raise ShapeMismatch(f"latent {z.shape} vs condition {z_c.shape}")
    injector = injector or ZeroConvInjector.zeros(z.shape[1])
    t = int(rng.integers(1, schedule.T + 1))
    eps = rng.standard_normal(z.shape)
    drop_ref = bool(rng.random() < dropout_p)
    drop_cond = bool(rng.random() < dropout_p)
    x_t = forward_noise(z, t, eps, schedule)
    if drop_cond:
        z_hat = x_t
        pred = denoiser.evaluate(z_hat, t, None if drop_ref else c_ref, None)
    else:
        z_hat = inject_condition(x_t, z_c, injector)
        pred = denoiser.evaluate(z_hat, t, None if drop_ref else c_ref, z_c)
    if pred.shape != z.shape:
        raise ShapeMismatch(f"denoiser output {pred.shape} vs latent {z.shape}")
    loss = float(((z - pred) ** 2).mean())
    return loss, {"t": t, "drop_ref": drop_ref, "drop_cond": drop_cond}


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass
class PureNoise:
    pass


@dataclass
class NoisyRender:
    images: list  # rendered frames, (H, W, 3) each
    scale: float  # noise scale s in [0, 1]


def _ladder(t_start: int, steps: int) -> list[int]:
    if t_start <= 0:
        return [0]
    ts = np.round(np.linspace(t_start, 0, steps + 1)).astype(int)
    out = [int(ts[0])]
    for v in ts[1:]:
        if int(v) != out[-1]:
            out.append(int(v))
    return out


def sample(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    codec: Codec,
    c_ref,
    conditions: list[np.ndarray],
    init,
    rng: np.random.Generator,
    steps: int = DEFAULT_STEPS,
    cfg_scale: float = DEFAULT_CFG_SCALE,
    clamp_frames: dict[int, np.ndarray] | None = None,
    injector: ZeroConvInjector | None = None,
) -> list[np.ndarray]:
    """Deterministic-given-rng iterative sampling with classifier-free
    guidance. `conditions` are condition images, either raw (H, W, 3) arrays
    or objects carrying an `rgb` attribute; `clamp_frames` entries overwrite
    the clean prediction at those frame indices every step.
    """
    cond_arrays = [getattr(c, "rgb", c) for c in conditions]
    z_c = codec.encode([np.asarray(c, dtype=np.float64) for c in cond_arrays])
    injector = injector or ZeroConvInjector.zeros(z_c.shape[1])
    clamp_frames = clamp_frames or {}

    if isinstance(init, NoisyRender):
        if len(init.images) != len(conditions):
            raise ShapeMismatch(
                f"{len(init.images)} renders vs {len(conditions)} conditions"
            )
        t_start = schedule.timestep_for_scale(init.scale)
        x0_init = codec.encode([np.asarray(im, dtype=np.float64) for im in init.images])
        if t_start == 0:
            return codec.decode(x0_init)
        eps = rng.standard_normal(x0_init.shape)
        x = forward_noise(x0_init, t_start, eps, schedule)
    elif isinstance(init, PureNoise):
        t_start = schedule.T
        x = rng.standard_normal(z_c.shape)
    else:
        raise SchemaError(f"unknown sampler init {type(init).__name__}")

    ladder = _ladder(t_start, steps)
    for t_cur, t_nxt in zip(ladder[:-1], ladder[1:]):
        z_in = inject_condition(x, z_c, injector)
        x0_cond = denoiser.evaluate(z_in, t_cur, c_ref, z_c)
        if cfg_scale == 1.0:
            x0 = x0_cond
        else:
            x0_null = denoiser.evaluate(x, t_cur, None, None)
            x0 = x0_null + cfg_scale * (x0_cond - x0_null)
        for fi, clean in clamp_frames.items():
            x0[fi] = clean
        ab_cur = schedule.at(t_cur)
        ab_nxt = schedule.at(t_nxt)
        eps_hat = (x - np.sqrt(ab_cur) * x0) / np.sqrt(1.0 - ab_cur)
        x = np.sqrt(ab_nxt) * x0 + np.sqrt(1.0 - ab_nxt) * eps_hat
    return codec.decode(x)


def sample_long(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    codec: Codec,
    c_ref,
    conditions: list[np.ndarray],
    init,
    rng: np.random.Generator,
    steps: int = DEFAULT_STEPS,
    cfg_scale: float = DEFAULT_CFG_SCALE,
    chunk: int = DEFAULT_CHUNK,
    overlap: int = DEFAULT_OVERLAP,
    injector: ZeroConvInjector | None = None,
) -> list[np.ndarray]:
    """Sample a video longer than one chunk: successive chunks share `overlap`
    frames, clamped to the previous chunk's latents so shared frames are
    bitwise equal; duplicates are dropped on concatenation."""
    total = len(conditions)
    if total < chunk:
        raise InvalidChunking(f"{total} frames < chunk size {chunk}")
    if not (0 < overlap < chunk):
        raise InvalidChunking(f"overlap {overlap} must be in (0, chunk)")
    if total == chunk:
        return sample(
            denoiser, schedule, codec, c_ref, conditions, init, rng,
            steps=steps, cfg_scale=cfg_scale, injector=injector,
        )

    stride = chunk - overlap
    starts = list(range(0, total - chunk, stride)) + [total - chunk]
    out: list[np.ndarray | None] = [None] * total
    done = 0
    for start in starts:
        frames = list(range(start, start + chunk))
        conds = [conditions[i] for i in frames]
        if isinstance(init, NoisyRender):
            chunk_init = NoisyRender([init.images[i] for i in frames], init.scale)
        else:
            chunk_init = init
        clamp = {}
        for local, fi in enumerate(frames):
            if fi < done:
                clamp[local] = np.moveaxis(np.asarray(out[fi], dtype=np.float64), -1, 0)
        imgs = sample(
            denoiser, schedule, codec, c_ref, conds, chunk_init, rng,
            steps=steps, cfg_scale=cfg_scale, clamp_frames=clamp, injector=injector,
        )
        for local, fi in enumerate(frames):
            if fi >= done:
                out[fi] = imgs[local]
        done = max(done, start + chunk)
    return out  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Tiny trainable denoiser (smoke tests of the training objective)
# ---------------------------------------------------------------------------


@dataclass
class TinyDenoiser(Denoiser):
    """Single 3x3 convolution over [x_t, c_p-or-zeros, t/T] channels. Linear,
    so exact gradients are cheap; enough to show the conditional objective
    (and a zero-initialized injector) learn on toy data."""

    kernel: np.ndarray  # (C, 2C + 1, 3, 3)
    bias: np.ndarray  # (C,)
    T: int

    @classmethod
    def create(cls, channels: int, T: int, rng: np.random.Generator) -> "TinyDenoiser":
        k = rng.normal(0.0, 0.05, size=(channels, 2 * channels + 1, 3, 3))
        return cls(k, np.zeros(channels), T)

    def _features(self, x_t: np.ndarray, t: int, c_p) -> np.ndarray:
        f, c, h, w = x_t.shape
        cond = np.zeros_like(x_t) if c_p is None else np.asarray(c_p, dtype=np.float64)
        tmap = np.full((f, 1, h, w), t / self.T)
        return np.concatenate([x_t, cond, tmap], axis=1)

    def evaluate(self, x_t, t, c_ref, c_p):
        feats = self._features(np.asarray(x_t, dtype=np.float64), t, c_p)
        return np.stack([conv2d_same(feats[i], self.kernel, self.bias) for i in range(feats.shape[0])])

    def train_step(
        self,
        schedule: NoiseSchedule,
        z: np.ndarray,
        z_c: np.ndarray,
        rng: np.random.Generator,
        lr: float = 1e-2,
        dropout_p: float = DEFAULT_DROPOUT,
        injector: ZeroConvInjector | None = None,
        injector_lr: float = 0.0,
    ) -> float:
        """One SGD step of the conditional objective; optionally also trains
        the zero-conv injector (Eq.-style joint conditioning path)."""
        z = np.asarray(z, dtype=np.float64)
        z_c = np.asarray(z_c, dtype=np.float64)
        t = int(rng.integers(1, schedule.T + 1))
        eps = rng.standard_normal(z.shape)
        drop_ref = rng.random() < dropout_p  # noqa: F841 - draw kept for rng parity
        drop_cond = rng.random() < dropout_p
        x_t = forward_noise(z, t, eps, schedule)
        inj = injector if (injector is not None and not drop_cond) else None
        z_in = x_t if (drop_cond or injector is None) else inject_condition(x_t, z_c, injector)
        c_p = None if drop_cond else z_c
        feats = self._features(z_in, t, c_p)
        pred = np.stack([conv2d_same(feats[i], self.kernel, self.bias) for i in range(feats.shape[0])])
        diff = pred - z
        loss = float((diff**2).mean())
        g_out = 2.0 * diff / diff.size
        gk = np.zeros_like(self.kernel)
        gb = np.zeros_like(self.bias)
        for i in range(feats.shape[0]):
            k_i, b_i = conv2d_same_backward(feats[i], self.kernel, g_out[i])
            gk += k_i
            gb += b_i
        self.kernel -= lr * gk
        self.bias -= lr * gb
        if inj is not None and injector_lr > 0:
            # Gradient through z_in: both the x_t block of the features and the
            # injected condition path receive it.
            c = z.shape[1]
            gk_inj = np.zeros_like(inj.kernel)
            gb_inj = np.zeros_like(inj.bias)
            for i in range(feats.shape[0]):
                # d pred / d z_in is the conv against the first C input channels.
                g_zin = _conv_input_grad(g_out[i], self.kernel[:, :c])
                k_i, b_i = conv2d_same_backward(z_c[i], inj.kernel, g_zin)
                gk_inj += k_i
                gb_inj += b_i
            inj.kernel -= injector_lr * gk_inj
            inj.bias -= injector_lr * gb_inj
        return loss

    def save(self, path) -> None:
        write_container(path, {"kernel": self.kernel, "bias": self.bias}, {"kind": "tiny-denoiser/v1", "T": self.T})

    @classmethod
    def load(cls, path) -> "TinyDenoiser":
        arrays, meta = read_container(path)
        if meta.get("kind") != "tiny-denoiser/v1":
            raise SchemaError(f"{path} is not a tiny-denoiser checkpoint")
        return cls(arrays["kernel"], arrays["bias"], int(meta["T"]))


def _conv_input_grad(grad_out: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """d conv2d_same / d input: correlate the upstream with the flipped kernel."""
    c_out, c_in, kh, kw = kernel.shape
    flipped = kernel[:, :, ::-1, ::-1]
    ph, pw = kh // 2, kw // 2
    gp = np.pad(grad_out, ((0, 0), (ph, ph), (pw, pw)))
    h, w = grad_out.shape[1:]
    windows = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(1, 2))
    return np.einsum("ohwkl,oikl->ihw", windows[:, :h, :w], flipped)
