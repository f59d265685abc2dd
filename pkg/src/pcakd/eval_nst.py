"""Quantitative stylization metrics and a pixel-space transfer baseline.

Metrics: feature-space content loss, statistics-matching style loss (Gram or
covariance), and SSIM on luma. The baseline optimizer performs plain gradient
descent on pixels against the same losses; it exists to compare statistic
choices, not to be fast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .nets import (
    LEVELS,
    Model,
    encoder_backward_taps,
    encoder_forward_cached,
    forward_collect,
)
from .tensor_math import DTYPE, as_f32, check_finite

SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

STYLE_MODES = ("gram", "cov", "cov_centered_content")


def _tap_matrix(tap: np.ndarray) -> np.ndarray:
    """(1, C, H, W) tap to a float64 (C, positions) matrix."""
    if tap.ndim != 4 or tap.shape[0] != 1:
        raise ShapeError(f"expected a single-image tap, got {tap.shape}")
    c = tap.shape[1]
    return tap.reshape(c, -1).astype(np.float64)


def feature_stat(matrix: np.ndarray, mode: str) -> np.ndarray:
    """Position-normalized second-moment matrix of a (C, n) feature.

    "gram" uses raw features; the "cov" modes subtract the channel mean
    first, which makes the statistic blind to per-channel shifts.
    """
    if mode not in STYLE_MODES:
        raise ValueError(f"unknown style mode {mode!r}")
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"feature must be (C, n), got {m.shape}")
    if mode != "gram":
        m = m - m.mean(axis=1, keepdims=True)
    return m @ m.T / m.shape[1]


def content_loss(tap_a: np.ndarray, tap_b: np.ndarray,
                 centralized: bool = False) -> float:
    """Squared norm of the difference of two same-shape feature taps.

    With centralized=True the per-channel spatial means are removed first,
    making the loss blind to constant channel shifts.
    """
    a, b = np.asarray(tap_a, dtype=np.float64), np.asarray(tap_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"tap shapes differ: {a.shape} vs {b.shape}")
    if centralized:
        a = a - a.mean(axis=-1, keepdims=True)
        b = b - b.mean(axis=-1, keepdims=True)
    d = (a - b).ravel()
    return float(np.dot(d, d))


def style_loss(taps_a, taps_b, mode: str = "cov",
               levels: tuple[int, ...] = (1, 2, 3, 4)) -> float:
    """Sum over taps of the squared Frobenius statistic mismatch.

    taps_a, taps_b: indexable by level (TapFeatures or 1-based dicts) with
    single-image (1, C, H, W) entries. Statistics are position-normalized,
    so the two sides may have different spatial extents.
    """
    if not levels:
        raise ValueError("style_loss needs at least one level")
    total = 0.0
    for level in levels:
        sa = feature_stat(_tap_matrix(taps_a[level]), mode)
        sb = feature_stat(_tap_matrix(taps_b[level]), mode)
        if sa.shape != sb.shape:
            raise ShapeError(
                f"level {level}: channel counts differ ({sa.shape[0]} vs "
                f"{sb.shape[0]})")
        d = (sa - sb).ravel()
        total += float(np.dot(d, d))
    return total


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def _luma(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        r, g, b = LUMA_WEIGHTS
        return r * img[:, :, 0] + g * img[:, :, 1] + b * img[:, :, 2]
    raise ShapeError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def ssim(image_a, image_b, window: int = SSIM_WINDOW) -> float:
    """Mean structural similarity over all dense window x window patches.

    Uses population (biased) moments per window; identical inputs score
    exactly 1.0 because numerator and denominator are then computed from
    bitwise-equal terms.
    """
    la, lb = _luma(image_a), _luma(image_b)
    if la.shape != lb.shape:
        raise ShapeError(f"image shapes differ: {la.shape} vs {lb.shape}")
    if min(la.shape) < window:
        raise ShapeError(
            f"images must be at least {window}x{window}, got {la.shape}")
    wa = sliding_window_view(la, (window, window)).reshape(-1, window * window)
    wb = sliding_window_view(lb, (window, window)).reshape(-1, window * window)
    mu_a = wa.mean(axis=1)
    mu_b = wb.mean(axis=1)
    var_a = (wa * wa).mean(axis=1) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=1) - mu_b * mu_b
    cov = (wa * wb).mean(axis=1) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def evaluate_pair(image_a, image_b, model: Model,
                  style_mode: str = "cov") -> dict[str, float]:
    """Content loss (tap 4), style loss (taps 1..4), and SSIM for two images."""
    taps_a = forward_collect(model.encoder_spec, model.encoder_weights,
                             _image_batch(image_a))
    taps_b = forward_collect(model.encoder_spec, model.encoder_weights,
                             _image_batch(image_b))
    return {
        "content_loss": content_loss(taps_a[LEVELS], taps_b[LEVELS]),
        "style_loss": style_loss(taps_a, taps_b, style_mode),
        "ssim": ssim(image_a, image_b),
    }


# ---------------------------------------------------------------------------
# pixel-space reference optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NstConfig:
    """Pixel gradient-descent baseline settings.

    style_mode picks the matched statistic; "cov_centered_content" also
    centers the features inside the content term. lam weighs style against
    content. init is "content" or "noise".
    """

    style_mode: str = "cov"
    lam: float = 1.0
    iterations: int = 100
    step_size: float = 1e-2
    init: str = "content"
    seed: int = 0
    style_levels: tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self):
        if self.style_mode not in STYLE_MODES:
            raise ValueError(f"unknown style mode {self.style_mode!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.init not in ("content", "noise"):
            raise ValueError(f"init must be 'content' or 'noise', got {self.init!r}")
        bad = set(self.style_levels) - set(range(1, LEVELS + 1))
        if bad or not self.style_levels:
            raise ValueError(f"bad style levels {self.style_levels}")


@dataclass(frozen=True)
class NstResult:
    image: np.ndarray
    trace: list[dict[str, float]]


def _image_batch(image) -> np.ndarray:
    img = as_f32(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got {img.shape}")
    if img.shape[0] % 8 or img.shape[1] % 8:
        raise ShapeError("image extents must divide by 8; center-crop first")
    return img.transpose(2, 0, 1)[None]


def _stat_grad(matrix: np.ndarray, target_stat: np.ndarray, mode: str
               ) -> tuple[float, np.ndarray]:
    """Loss and d(loss)/d(feature) for one level's statistic mismatch.

    Loss is the raw squared Frobenius norm of the statistic difference,
    matching style_loss; the gradient uses the symmetry of the difference.
    """
    n = matrix.shape[1]
    m = matrix
    if mode != "gram":
        m = m - m.mean(axis=1, keepdims=True)
    stat = m @ m.T / n
    d = stat - target_stat
    loss = float(np.dot(d.ravel(), d.ravel()))
    grad = (4.0 / n) * (d @ m)
    if mode != "gram":
        grad = grad - grad.mean(axis=1, keepdims=True)
    return loss, grad


def nst_optimize(content_image, style_image, model: Model,
                 config: NstConfig | None = None) -> NstResult:
    """Gradient descent on pixels to match content at tap 4 and style stats.

    Each step clamps the image back to [0, 1]. The per-iteration trace
    records content, style, and total loss before that step's update.
    """
    config = config or NstConfig()
    spec, weights = model.encoder_spec, model.encoder_weights

    content_batch = _image_batch(content_image)
    content_taps = forward_collect(spec, weights, content_batch)
    target_c = content_taps[LEVELS].astype(np.float64)
    if config.style_mode == "cov_centered_content":
        target_c = target_c - target_c.mean(axis=(2, 3), keepdims=True)

    style_targets: dict[int, np.ndarray] = {}
    if config.lam > 0.0:
        style_taps = forward_collect(spec, weights, _image_batch(style_image))
        for level in config.style_levels:
            style_targets[level] = feature_stat(
                _tap_matrix(style_taps[level]), config.style_mode)

    if config.init == "content":
        x = content_batch.copy()
    else:
        rng = np.random.default_rng(config.seed)
        x = rng.uniform(0.0, 1.0, size=content_batch.shape).astype(DTYPE)

    trace: list[dict[str, float]] = []
    for it in range(config.iterations):
        taps, caches = encoder_forward_cached(spec, weights, x)
        tap_grads: list[np.ndarray | None] = [None] * LEVELS

        top = taps[LEVELS - 1].astype(np.float64)
        if config.style_mode == "cov_centered_content":
            top = top - top.mean(axis=(2, 3), keepdims=True)
        diff = top - target_c
        c_loss = float(np.dot(diff.ravel(), diff.ravel()))
        g_content = 2.0 * diff
        if config.style_mode == "cov_centered_content":
            g_content = g_content - g_content.mean(axis=(2, 3), keepdims=True)
        tap_grads[LEVELS - 1] = g_content

        s_loss = 0.0
        for level, target in style_targets.items():
            mat = _tap_matrix(taps[level - 1])
            lvl_loss, g = _stat_grad(mat, target, config.style_mode)
            s_loss += lvl_loss
            g = (config.lam * g).reshape(taps[level - 1].shape)
            prev = tap_grads[level - 1]
            tap_grads[level - 1] = g if prev is None else prev + g

        trace.append({"iteration": float(it), "content": c_loss,
                      "style": s_loss, "total": c_loss + config.lam * s_loss})

        gx, _ = encoder_backward_taps(spec, weights, caches, tap_grads)
        check_finite("nst_optimize", gx)
        x = np.clip(x - config.step_size * as_f32(gx), 0.0, 1.0)

    out = np.clip(x[0].transpose(1, 2, 0), 0.0, 1.0).astype(DTYPE)
    return NstResult(out, trace)
