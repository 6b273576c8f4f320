"""Loss terms and image metrics for the distillation trainer.

Every loss returns (value, gradient w.r.t. the first argument). The
perceptual term is a pluggable interface; the default is a multi-scale
gradient-magnitude L1 over a 3-level average-pool pyramid, documented below,
standing in for a learned perceptual network.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import NoValidPixels, ShapeMismatch, TooSmall

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    """Nonnegative weights for the input-view and novel-view objectives."""

    l1: float = 0.2
    ssim: float = 0.8
    lpips: float = 0.5
    novel: float = 0.1
    depth: float = 0.01
    sky: float = 0.05
    reg: float = 0.1

    def validate(self) -> None:
        for name in ("l1", "ssim", "lpips", "novel", "depth", "sky", "reg"):
            if getattr(self, name) < 0:
                raise ShapeMismatch(f"loss weight {name} must be >= 0")


@dataclass
class LossReport:
    """Per-term values with weights; total == sum(weight * value) by construction."""

    terms: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def add(self, name: str, weight: float, value: float) -> None:
        self.terms[name] = float(value)
        self.weights[name] = float(weight)

    @property
    def total(self) -> float:
        return float(sum(self.weights[k] * self.terms[k] for k in self.terms))


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# L1
# ---------------------------------------------------------------------------


def loss_l1(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    diff = a - b
    value = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return value, grad


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def _gaussian_kernel() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


_KERNEL = _gaussian_kernel()
_HALF = SSIM_WINDOW // 2


def _filt_valid(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter, valid region only (crop HALF on each side)."""
    y = correlate1d(x, _KERNEL, axis=0, mode="constant")
    y = correlate1d(y, _KERNEL, axis=1, mode="constant")
    return y[_HALF:-_HALF, _HALF:-_HALF]


def _filt_adjoint(y: np.ndarray, out_shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of _filt_valid: zero-embed then filter (kernel is symmetric)."""
    full = np.zeros(out_shape, dtype=np.float64)
    full[_HALF:-_HALF, _HALF:-_HALF] = y
    full = correlate1d(full, _KERNEL, axis=0, mode="constant")
    full = correlate1d(full, _KERNEL, axis=1, mode="constant")
    return full


def loss_ssim(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """1 - mean SSIM with an 11x11 Gaussian window (sigma 1.5) on unit range."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise TooSmall(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
        b = b[:, :, None]
    n_ch = a.shape[2]
    vh, vw = a.shape[0] - 2 * _HALF, a.shape[1] - 2 * _HALF
    n_windows = vh * vw * n_ch
    value = 0.0
    grad = np.zeros_like(a)
    for c in range(n_ch):
        x, y = a[:, :, c], b[:, :, c]
        mu_x = _filt_valid(x)
        mu_y = _filt_valid(y)
        xx = _filt_valid(x * x)
        yy = _filt_valid(y * y)
        xy = _filt_valid(x * y)
        var_x = xx - mu_x**2
        var_y = yy - mu_y**2
        cov = xy - mu_x * mu_y
        A1 = 2 * mu_x * mu_y + SSIM_C1
        A2 = 2 * cov + SSIM_C2
        B1 = mu_x**2 + mu_y**2 + SSIM_C1
        B2 = var_x + var_y + SSIM_C2
        S = (A1 * A2) / (B1 * B2)
        value += S.sum()

        # dL/dS for L = 1 - mean(S)
        gS = -np.ones_like(S) / n_windows
        dS_dmux = 2 * mu_y * A2 / (B1 * B2) - S * 2 * mu_x / B1
        dS_dvarx = -S / B2
        dS_dcov = 2 * A1 / (B1 * B2)
        # mu_x = F[x]; var_x = F[x^2] - mu_x^2; cov = F[xy] - mu_x mu_y
        g_mu = gS * (dS_dmux + dS_dvarx * (-2 * mu_x) + dS_dcov * (-mu_y))
        g_xx = gS * dS_dvarx
        g_xy = gS * dS_dcov
        grad[:, :, c] = (
            _filt_adjoint(g_mu, x.shape)
            + 2 * x * _filt_adjoint(g_xx, x.shape)
            + y * _filt_adjoint(g_xy, x.shape)
        )
    value = 1.0 - value / n_windows
    return float(value), grad[:, :, 0] if squeeze else grad


def metric_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM (the similarity itself, not the loss)."""
    value, _ = loss_ssim(a, b)
    return 1.0 - value


# ---------------------------------------------------------------------------
# Perceptual proxy
# ---------------------------------------------------------------------------


class PerceptualLoss:
    """Interface for perceptual losses: __call__(a, b) -> (value, grad_a).

    The shipped default is PyramidGradientLoss; an implementation backed by a
    learned network can be plugged into the trainer through this interface.
    """

    def __call__(self, a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError


def _avg_pool(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _avg_pool_adjoint(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    out = np.zeros(shape, dtype=np.float64)
    q = 0.25 * g
    out[0 : 2 * g.shape[0] : 2, 0 : 2 * g.shape[1] : 2] = q
    out[1 : 2 * g.shape[0] : 2, 0 : 2 * g.shape[1] : 2] = q
    out[0 : 2 * g.shape[0] : 2, 1 : 2 * g.shape[1] : 2] = q
    out[1 : 2 * g.shape[0] : 2, 1 : 2 * g.shape[1] : 2] = q
    return out


class PyramidGradientLoss(PerceptualLoss):
    """Documented proxy: L = mean|a - b|  +  sum over 3 pyramid levels of
    mean|dx a_l - dx b_l| + mean|dy a_l - dy b_l|, where level l is the input
    average-pooled l times and dx/dy are forward differences. Emphasizes edge
    structure over absolute intensity; a constant offset contributes only
    through the base term."""

    levels: int = 3

    def __call__(self, a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        _check_same_shape(a, b)
        value, grad = loss_l1(a, b)
        xa, xb = a, b
        shapes = []
        grads_lvl = []
        for _ in range(self.levels):
            dxa = np.diff(xa, axis=1)
            dxb = np.diff(xb, axis=1)
            dya = np.diff(xa, axis=0)
            dyb = np.diff(xb, axis=0)
            gl = np.zeros_like(xa)
            if dxa.size:
                value += float(np.abs(dxa - dxb).mean())
                s = np.sign(dxa - dxb) / dxa.size
                gl[:, 1:] += s
                gl[:, :-1] -= s
            if dya.size:
                value += float(np.abs(dya - dyb).mean())
                s = np.sign(dya - dyb) / dya.size
                gl[1:, :] += s
                gl[:-1, :] -= s
            grads_lvl.append(gl)
            shapes.append(xa.shape)
            xa = _avg_pool(xa)
            xb = _avg_pool(xb)
        # Push level gradients back up the pyramid, coarsest first.
        acc = None
        for gl, shape in zip(reversed(grads_lvl), reversed(shapes)):
            acc = gl if acc is None else gl + _avg_pool_adjoint(acc, shape)
        return float(value), grad + acc


def loss_perceptual(
    a: np.ndarray, b: np.ndarray, impl: PerceptualLoss | None = None
) -> tuple[float, np.ndarray]:
    impl = impl or PyramidGradientLoss()
    return impl(a, b)


# ---------------------------------------------------------------------------
# Depth / sky / object-alpha regularization
# ---------------------------------------------------------------------------


def loss_depth(
    depth: np.ndarray, depth_lidar: np.ndarray, valid: np.ndarray, quantile: float = 0.95
) -> tuple[float, np.ndarray]:
    """L1 over the valid pixels whose absolute error falls in the smallest
    `quantile` fraction by count (ties broken by pixel index)."""
    depth = np.asarray(depth, dtype=np.float64)
    _check_same_shape(depth, np.asarray(depth_lidar))
    _check_same_shape(depth, np.asarray(valid))
    idx = np.nonzero(valid.ravel())[0]
    if len(idx) == 0:
        raise NoValidPixels("depth loss has no valid pixels")
    err = depth.ravel()[idx] - np.asarray(depth_lidar, dtype=np.float64).ravel()[idx]
    abs_err = np.abs(err)
    k = max(1, int(np.floor(quantile * len(idx))))
    order = np.lexsort((idx, abs_err))
    chosen = order[:k]
    value = float(abs_err[chosen].mean())
    grad = np.zeros(depth.size, dtype=np.float64)
    grad[idx[chosen]] = np.sign(err[chosen]) / k
    return value, grad.reshape(depth.shape)


CLAMP_EPS = 1e-6


def loss_sky(opacity: np.ndarray, sky_mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross entropy pushing rendered opacity to 0 on sky and 1 elsewhere."""
    o = np.asarray(opacity, dtype=np.float64)
    m = np.asarray(sky_mask, dtype=np.float64)
    _check_same_shape(o, m)
    oc = np.clip(o, CLAMP_EPS, 1.0 - CLAMP_EPS)
    value = float(-((1.0 - m) * np.log(oc) + m * np.log(1.0 - oc)).mean())
    inside = (o > CLAMP_EPS) & (o < 1.0 - CLAMP_EPS)
    grad = np.where(inside, -((1.0 - m) / oc - m / (1.0 - oc)) / o.size, 0.0)
    return value, grad


def loss_reg(object_alpha: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary entropy of the foreground accumulated alpha, as printed:
    -mean[O log O + (1-O) log(1-O)], which is positive with maximum ln 2 at
    O = 0.5. Minimizing the *negated* value binarizes O; the trainer exposes
    a reg_sign switch whose default applies the binarizing direction."""
    o = np.asarray(object_alpha, dtype=np.float64)
    oc = np.clip(o, CLAMP_EPS, 1.0 - CLAMP_EPS)
    value = float(-(oc * np.log(oc) + (1.0 - oc) * np.log(1.0 - oc)).mean())
    inside = (o > CLAMP_EPS) & (o < 1.0 - CLAMP_EPS)
    grad = np.where(inside, -(np.log(oc) - np.log(1.0 - oc)) / o.size, 0.0)
    return value, grad


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

PSNR_CAP_DB = 99.0
PSNR_MSE_FLOOR = 1e-10


def metric_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1/MSE) on unit-range images, capped at 99 dB for MSE < 1e-10."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# Combined objectives
# ---------------------------------------------------------------------------


def combine_input_view(
    weights: LossWeights,
    l1: float,
    ssim: float,
    perc: float,
    depth: float,
    sky: float,
    reg: float,
    reg_sign: float = -1.0,
) -> LossReport:
    """Input-view objective: photometric terms plus the geometry extras."""
    report = LossReport()
    report.add("l1", weights.l1, l1)
    report.add("ssim", weights.ssim, ssim)
    report.add("lpips", weights.lpips, perc)
    report.add("depth", weights.depth, depth)
    report.add("sky", weights.sky, sky)
    report.add("reg", weights.reg, reg_sign * reg)
    return report


def combine_novel_view(weights: LossWeights, perc: float) -> LossReport:
    report = LossReport()
    report.add("novel_lpips", weights.novel, perc)
    return report
