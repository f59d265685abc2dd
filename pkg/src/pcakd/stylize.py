"""Coarse-to-fine ZCA stylization with high-frequency residual injection.

The transform whitens a content feature with its own covariance eigenbasis
and recolors it with the style covariance:

    F_out = E_s L_s^(1/2) E_s^T  E_c L_c^(-1/2) E_c^T  Fbar_c  + mu

where mu is the style mean (default) or the content mean. Transforms run
at tap 4 of the encoder and then at each decoder tap on the way down.
High-frequency residuals (pre-pool activation minus upsampled post-pool
activation, captured during the content encode) are injected right after
each mirrored upsample in the decoder.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .feature_stats import FeatureMap, FeatureStats
from .nets import (
    LEVELS,
    Model,
    TapFeatures,
    block_forward,
    decoder_block_index,
    forward_collect,
)
from .tensor_math import DTYPE, as_f32, check_finite, upsample_nearest

# Content eigenvalues are floored here before the inverse square root.
ZCA_EPSILON = 1e-5
TRANSFORM_LEVELS = (4, 3, 2, 1)


@dataclass(frozen=True)
class StylizeConfig:
    """Knobs of the stylization pipeline.

    alpha blends each transformed feature with the untransformed one;
    levels picks which taps are transformed (4 is the encoder tap, 3..1 the
    decoder taps); hfr toggles residual injection; match_mean moves the
    output feature to the style mean instead of keeping the content mean.
    """

    alpha: float = 1.0
    levels: tuple[int, ...] = TRANSFORM_LEVELS
    hfr: bool = True
    match_mean: bool = True
    epsilon: float = ZCA_EPSILON

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        bad = set(self.levels) - set(TRANSFORM_LEVELS)
        if bad:
            raise ValueError(f"unknown transform levels {sorted(bad)}")


@dataclass(frozen=True)
class HfrBundle:
    """High-frequency residuals keyed by the level whose block pooled them."""

    residuals: dict[int, np.ndarray] = field(default_factory=dict)


def whitening_matrix(stats: FeatureStats, epsilon: float = ZCA_EPSILON) -> np.ndarray:
    """E L^(-1/2) E^T with eigenvalues floored at epsilon.

    Warns when the floor dominates the spectrum (degenerate covariance): the
    whitened output is then mostly made up.
    """
    eig = stats.eig()
    vals = np.maximum(eig.eigenvalues, epsilon)
    floored = int(np.sum(eig.eigenvalues < epsilon))
    if floored > stats.channels // 2:
        warnings.warn(
            f"whitening: {floored}/{stats.channels} eigenvalues below epsilon "
            f"{epsilon:g}; covariance is near-degenerate", stacklevel=2)
    e = eig.eigenvectors
    return (e * (vals ** -0.5)) @ e.T


def coloring_matrix(stats: FeatureStats) -> np.ndarray:
    """E L^(1/2) E^T; tiny negative eigenvalues clamp to zero."""
    eig = stats.eig()
    vals = np.maximum(eig.eigenvalues, 0.0)
    e = eig.eigenvectors
    return (e * (vals ** 0.5)) @ e.T


def zca_transform(content: FeatureMap, style_stats: FeatureStats,
                  epsilon: float = ZCA_EPSILON,
                  match_mean: bool = True) -> FeatureMap:
    """Whiten a content feature and recolor it with the style statistics.

    The output covariance equals the style covariance (up to the epsilon
    floor); the output mean is the style mean when match_mean, else the
    content mean.
    """
    if content.channels != style_stats.channels:
        raise ShapeError(
            f"content has {content.channels} channels, style stats have "
            f"{style_stats.channels}")
    m = content.matrix
    mu_c = m.mean(axis=1, keepdims=True)
    centered = m - mu_c
    own_stats = FeatureStats(mu_c[:, 0], _cov_of(centered))
    white = whitening_matrix(own_stats, epsilon)
    color = coloring_matrix(style_stats)
    out = color @ (white @ centered)
    out += style_stats.mean[:, None] if match_mean else mu_c
    check_finite("zca_transform", out)
    return FeatureMap(out, content.layer_id, content.image_id)


def _cov_of(centered: np.ndarray) -> np.ndarray:
    cov = centered @ centered.T / centered.shape[1]
    return 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# high-frequency residuals
# ---------------------------------------------------------------------------


def capture_hfr(model: Model, images) -> tuple[TapFeatures, HfrBundle]:
    """Encode a batch, capturing pool-site residuals for later injection.

    The residual at the level-N pool is (pre-pool activation) minus
    (nearest-upsampled post-pool activation); it is what 2x2 pooling throws
    away and what the decoder's mirrored upsample cannot reinvent.
    """
    spec, weights = model.encoder_spec, model.encoder_weights
    if spec.role != "encoder":
        raise ShapeError("capture_hfr needs an encoder")
    x = as_f32(images)
    taps = []
    residuals: dict[int, np.ndarray] = {}
    for bi, (bspec, bw) in enumerate(zip(spec.blocks, weights.blocks)):
        has_pool = any(l.kind == "pool" for l in bspec.layers)
        capture: dict | None = {} if has_pool else None
        x, _ = block_forward(bspec, bw, x, capture=capture)
        taps.append(x)
        if capture:
            level = bi + 1
            residuals[level] = capture["pre_pool"] - upsample_nearest(
                capture["post_pool"], 2)
    return TapFeatures(tuple(taps)), HfrBundle(residuals)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def _image_to_batch(image: np.ndarray) -> np.ndarray:
    img = as_f32(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got {img.shape}")
    if img.shape[0] % 8 or img.shape[1] % 8:
        raise ShapeError("image extents must divide by 8; center-crop first")
    if img.min() < -1e-4 or img.max() > 1 + 1e-4:
        raise ShapeError("pixel values must lie in [0, 1]")
    return img.transpose(2, 0, 1)[None]


def _batch_to_image(batch: np.ndarray) -> np.ndarray:
    return np.clip(batch[0].transpose(1, 2, 0), 0.0, 1.0).astype(DTYPE)


def _transform_level(feat: np.ndarray, stats: FeatureStats | None,
                     config: StylizeConfig) -> np.ndarray:
    """ZCA at one level, blended as alpha*transformed + (1-alpha)*content.

    Skips the transform entirely when it cannot change the feature
    (no stats for this level or alpha == 0), keeping the decode path
    bit-identical to a plain reconstruction.
    """
    if stats is None or config.alpha == 0.0:
        return feat
    b, c, h, w = feat.shape
    out = np.empty_like(feat)
    for i in range(b):
        fmap = FeatureMap(feat[i].reshape(c, h * w))
        t = zca_transform(fmap, stats, config.epsilon, config.match_mean)
        out[i] = t.matrix.reshape(c, h, w).astype(DTYPE)
    if config.alpha == 1.0:
        return out
    return (config.alpha * out + (1.0 - config.alpha) * feat).astype(DTYPE)


def _style_stats(model: Model, style_image: np.ndarray,
                 levels: tuple[int, ...]) -> dict[int, FeatureStats]:
    taps = forward_collect(model.encoder_spec, model.encoder_weights,
                           _image_to_batch(style_image))
    stats = {}
    for level in levels:
        tap = taps[level]
        fmap = FeatureMap(tap[0].reshape(tap.shape[1], -1), layer_id=level)
        stats[level] = FeatureStats.from_feature(fmap)
    return stats


def _run_pipeline(model: Model, content_image: np.ndarray,
                  stats: dict[int, FeatureStats], config: StylizeConfig
                  ) -> np.ndarray:
    model.require_trained()
    batch = _image_to_batch(content_image)
    if config.hfr:
        taps, bundle = capture_hfr(model, batch)
        residuals = bundle.residuals
    else:
        taps = forward_collect(model.encoder_spec, model.encoder_weights, batch)
        residuals = {}

    x = _transform_level(taps[LEVELS], stats.get(LEVELS), config)
    dec_spec, dec_w = model.decoder_spec, model.decoder_weights
    for level in range(LEVELS, 0, -1):
        idx = decoder_block_index(level)
        x, _ = block_forward(dec_spec.blocks[idx], dec_w.blocks[idx], x,
                             residual=residuals.get(level))
        if level > 1:
            # This block's output is the decoder's tap (level - 1).
            x = _transform_level(x, stats.get(level - 1), config)
    return _batch_to_image(x)


def stylize(content_image, style_image, model: Model,
            eigenbases=None, config: StylizeConfig | None = None) -> np.ndarray:
    """Transfer the style image's feature statistics onto the content image.

    Args:
        content_image, style_image: (H, W, 3) float arrays in [0, 1] with
            extents divisible by 8.
        model: trained student (or any full encoder/decoder pair).
        eigenbases: optional bases used only to cross-check that the model's
            tap widths match the basis dims they were distilled for.
        config: StylizeConfig; defaults transform every level at alpha 1
            with HFR and mean matching on.

    Returns:
        (H, W, 3) float32 image clamped to [0, 1].
    """
    config = config or StylizeConfig()
    if eigenbases is not None:
        dims = tuple(b.rows for b in eigenbases)
        if dims != tuple(model.channels):
            raise ShapeError(
                f"eigenbasis dims {dims} do not match model channels "
                f"{tuple(model.channels)}")
    if config.alpha == 0.0:
        stats: dict[int, FeatureStats] = {}
    else:
        stats = _style_stats(model, as_f32(style_image), tuple(config.levels))
    return _run_pipeline(model, as_f32(content_image), stats, config)


def reconstruct(content_image, model: Model, hfr: bool = True) -> np.ndarray:
    """Plain encode-decode of an image through the model (no transforms)."""
    config = StylizeConfig(alpha=0.0, hfr=hfr)
    return _run_pipeline(model, as_f32(content_image), {}, config)
