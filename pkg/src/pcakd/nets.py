"""VGG-shaped encoder/decoder pairs and blockwise distillation training.

The encoder follows the classic stage plan of (2, 2, 4, 1) conv+relu layers
with 2x2 max pooling between stages; the decoder mirrors it layer for layer
with nearest-neighbor upsampling in place of pooling. Tap N is the output
of the first activation in stage N, so the network splits into four
encoder/decoder block pairs cut at the taps:

    enc_1: conv(3,C1)+relu                                   -> tap 1
    enc_2: conv(C1,C1)+relu, pool, conv(C1,C2)+relu          -> tap 2
    enc_3: conv(C2,C2)+relu, pool, conv(C2,C3)+relu          -> tap 3
    enc_4: [conv(C3,C3)+relu]x3, pool, conv(C3,C4)+relu      -> tap 4

and the mirrored dec_4 .. dec_1 run the same plan in reverse, ending in a
conv(C1, 3) image head with no activation. Distillation trains the pairs
one level at a time: the sub-autoencoder enc_1..enc_N -> dec_N..dec_1 runs
with every pair but N frozen, under a projection loss that pins tap N to
the teacher's tap projected through a shared eigenbasis, plus feature,
image, and teacher-feature reconstruction terms.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .eigenbasis import Eigenbasis
from .errors import MissingBlockError, NumericalError, ShapeError, TrainingDivergence
from .tensor_math import (
    DTYPE,
    as_f32,
    conv_input_grad,
    conv_layer_backward,
    conv_layer_forward,
    pool_backward,
    pool_forward,
    relu_backward,
    relu_forward,
    upsample_nearest,
    upsample_nearest_backward,
)

KERNEL = 3
LEVELS = 4
IMAGE_CHANNELS = 3
# Spatial extents must divide by this for the tap pyramid to line up.
SPATIAL_MULTIPLE = 8


# ---------------------------------------------------------------------------
# network specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "relu" | "pool" | "upsample"
    in_ch: int = 0
    out_ch: int = 0


@dataclass(frozen=True)
class BlockSpec:
    layers: tuple[LayerSpec, ...]
    out_channels: int


@dataclass(frozen=True)
class NetworkSpec:
    role: str  # "encoder" | "decoder"
    blocks: tuple[BlockSpec, ...]


def _conv(cin: int, cout: int) -> LayerSpec:
    return LayerSpec("conv", cin, cout)


_RELU = LayerSpec("relu")
_POOL = LayerSpec("pool")
_UP = LayerSpec("upsample")


def build_vgg_shaped_spec(channels: Sequence[int]) -> tuple[NetworkSpec, NetworkSpec]:
    """Encoder and mirrored decoder specs for the four tap channel lengths."""
    if len(channels) != LEVELS or any(int(c) < 1 for c in channels):
        raise ShapeError(f"need {LEVELS} positive channel lengths, got {channels}")
    a, b, c, d = (int(x) for x in channels)
    enc = NetworkSpec("encoder", (
        BlockSpec((_conv(IMAGE_CHANNELS, a), _RELU), a),
        BlockSpec((_conv(a, a), _RELU, _POOL, _conv(a, b), _RELU), b),
        BlockSpec((_conv(b, b), _RELU, _POOL, _conv(b, c), _RELU), c),
        BlockSpec((_conv(c, c), _RELU, _conv(c, c), _RELU, _conv(c, c), _RELU,
                   _POOL, _conv(c, d), _RELU), d),
    ))
    dec = NetworkSpec("decoder", (
        BlockSpec((_conv(d, c), _RELU, _UP, _conv(c, c), _RELU, _conv(c, c),
                   _RELU, _conv(c, c), _RELU), c),
        BlockSpec((_conv(c, b), _RELU, _UP, _conv(b, b), _RELU), b),
        BlockSpec((_conv(b, a), _RELU, _UP, _conv(a, a), _RELU), a),
        BlockSpec((_conv(a, IMAGE_CHANNELS),), IMAGE_CHANNELS),
    ))
    return enc, dec


def decoder_block_index(level: int) -> int:
    """Position of dec_N in the decoder's execution-ordered block tuple."""
    if not 1 <= level <= LEVELS:
        raise ShapeError(f"level must be 1..{LEVELS}, got {level}")
    return LEVELS - level


def spec_param_count(spec: NetworkSpec) -> int:
    """Analytic weight + bias count summed over conv layers."""
    total = 0
    for block in spec.blocks:
        for layer in block.layers:
            if layer.kind == "conv":
                total += layer.in_ch * layer.out_ch * KERNEL * KERNEL + layer.out_ch
    return total


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "role": spec.role,
        "blocks": [
            {
                "out_channels": b.out_channels,
                "layers": [
                    {"kind": l.kind, "in_ch": l.in_ch, "out_ch": l.out_ch}
                    for l in b.layers
                ],
            }
            for b in spec.blocks
        ],
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    blocks = tuple(
        BlockSpec(
            tuple(LayerSpec(l["kind"], int(l["in_ch"]), int(l["out_ch"]))
                  for l in b["layers"]),
            int(b["out_channels"]),
        )
        for b in d["blocks"]
    )
    return NetworkSpec(d["role"], blocks)


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


class Weights:
    """Per-block lists of (kernel, bias) pairs in execution order."""

    def __init__(self, blocks: list[list[tuple[np.ndarray, np.ndarray]]]):
        self.blocks = [[(as_f32(k), as_f32(b)) for k, b in blk] for blk in blocks]

    def param_count(self) -> int:
        return sum(k.size + b.size for blk in self.blocks for k, b in blk)

    def copy(self) -> "Weights":
        return Weights([[(k.copy(), b.copy()) for k, b in blk]
                        for blk in self.blocks])


def param_count(weights: Weights) -> int:
    return weights.param_count()


def init_weights(spec: NetworkSpec, seed: int | np.random.Generator = 0) -> Weights:
    """He-scaled zero-sum kernels, biases 0.3; quiet decoder output layers.

    Relu units that start dead stay dead: no gradient reaches a kernel whose
    unit never fires, and the training losses centralize features, which
    starves the bias gradient that could lift it back. Two choices keep every
    unit alive at init. Each 3x3 kernel slice is shifted to zero sum, so a
    unit's initial response to a constant input is exactly its bias, however
    large the input's mean. And biases start at +0.3, above the initial
    response to the fluctuating part.

    Decoder blocks get one more: their final conv starts at a tenth of He
    scale, so each block initially emits its bias plus a whisper. A decoder
    that starts loud turns the first reconstruction error into a spike that
    can shove upstream relu units into the dead zone faster than clipping
    can protect them; a quiet one lets encoder and decoder grow into each
    other. The image head starts at mid-range for the same reason, keeping
    the first reconstructions inside the pixel range rather than near black.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    blocks = []
    for block in spec.blocks:
        convs = []
        for layer in block.layers:
            if layer.kind == "conv":
                fan_in = layer.in_ch * KERNEL * KERNEL
                k = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                               (layer.out_ch, layer.in_ch, KERNEL, KERNEL))
                k -= k.mean(axis=(2, 3), keepdims=True)
                convs.append((k.astype(DTYPE), np.full(layer.out_ch, 0.3, DTYPE)))
        blocks.append(convs)
    if spec.role == "decoder":
        for convs in blocks:
            if convs:
                k, b = convs[-1]
                convs[-1] = (k * np.float32(0.1), b)
        if blocks and blocks[-1]:
            k, b = blocks[-1][-1]
            blocks[-1][-1] = (k, np.full_like(b, 0.5))
    return Weights(blocks)


def validate_weights(spec: NetworkSpec, weights: Weights) -> None:
    if len(weights.blocks) != len(spec.blocks):
        raise ShapeError(f"{spec.role}: {len(weights.blocks)} weight blocks for "
                         f"{len(spec.blocks)} spec blocks")
    for bi, block in enumerate(spec.blocks):
        convs = [l for l in block.layers if l.kind == "conv"]
        if len(convs) != len(weights.blocks[bi]):
            raise ShapeError(f"{spec.role} block {bi}: conv count mismatch")
        for layer, (k, b) in zip(convs, weights.blocks[bi]):
            want = (layer.out_ch, layer.in_ch, KERNEL, KERNEL)
            if k.shape != want or b.shape != (layer.out_ch,):
                raise ShapeError(
                    f"{spec.role} block {bi}: kernel {k.shape} / bias {b.shape} "
                    f"do not match layer {want}")


# ---------------------------------------------------------------------------
# block-level forward / backward
# ---------------------------------------------------------------------------


def block_forward(bspec: BlockSpec, bweights, x, keep: bool = False,
                  residual: np.ndarray | None = None,
                  capture: dict | None = None):
    """Run one block. Returns (output, cache-or-None).

    residual, when given, is added right after the block's upsample layer
    (the high-frequency injection site). capture, when a dict is given,
    receives the activations around the block's pool layer under keys
    "pre_pool" and "post_pool".
    """
    x = as_f32(x)
    cache = [] if keep else None
    ci = 0
    for layer in bspec.layers:
        if layer.kind == "conv":
            k, b = bweights[ci]
            ci += 1
            if keep:
                cache.append(("conv", x))
            x = conv_layer_forward(x, k, b)
        elif layer.kind == "relu":
            if keep:
                cache.append(("relu", x))
            x = relu_forward(x)
        elif layer.kind == "pool":
            pre = x
            x, memo = pool_forward(x)
            if keep:
                cache.append(("pool", memo))
            if capture is not None:
                capture["pre_pool"] = pre
                capture["post_pool"] = x
        elif layer.kind == "upsample":
            if keep:
                cache.append(("upsample", None))
            x = upsample_nearest(x, 2)
            if residual is not None:
                if residual.shape != x.shape:
                    raise ShapeError(
                        f"residual shape {residual.shape} does not match "
                        f"upsampled activation {x.shape}")
                x = x + as_f32(residual)
        else:
            raise ShapeError(f"unknown layer kind {layer.kind!r}")
    return x, cache


def block_backward(bspec: BlockSpec, bweights, cache, upstream_grad,
                   need_param_grads: bool = True):
    """Backprop one block. Returns (input_grad, per-conv (gk, gb) list).

    Parameter gradients are skipped (None entries) for frozen blocks.
    """
    gy = as_f32(upstream_grad)
    grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(bweights)
    ci = len(bweights)
    entry = len(cache)
    for layer in reversed(bspec.layers):
        entry -= 1
        kind, payload = cache[entry]
        if kind != layer.kind:
            raise ShapeError("block cache does not match block spec")
        if kind == "conv":
            ci -= 1
            k, _ = bweights[ci]
            if need_param_grads:
                gy, gw, gb = conv_layer_backward(payload, k, gy)
                grads[ci] = (gw, gb)
            else:
                gy = conv_input_grad(k, gy, payload.shape)
        elif kind == "relu":
            gy = relu_backward(payload, gy)
        elif kind == "pool":
            gy = pool_backward(payload, gy)
        elif kind == "upsample":
            gy = upsample_nearest_backward(gy, 2)
    return gy, grads


def _check_images(images: np.ndarray, strict_range: bool = False) -> np.ndarray:
    images = as_f32(images)
    if images.ndim != 4 or images.shape[1] != IMAGE_CHANNELS:
        raise ShapeError(f"expected (B, 3, H, W) images, got {images.shape}")
    if images.shape[2] % SPATIAL_MULTIPLE or images.shape[3] % SPATIAL_MULTIPLE:
        raise ShapeError(
            f"spatial extents {images.shape[2]}x{images.shape[3]} must divide "
            f"by {SPATIAL_MULTIPLE}")
    if strict_range and (images.min() < -1e-4 or images.max() > 1 + 1e-4):
        raise ShapeError("pixel values must lie in [0, 1]")
    return images


@dataclass(frozen=True)
class TapFeatures:
    """Per-level activations (B, C_N, H/2^(N-1), W/2^(N-1)) at the taps."""

    taps: tuple[np.ndarray, ...]

    def __getitem__(self, level: int) -> np.ndarray:
        if not 1 <= level <= len(self.taps):
            raise ShapeError(f"tap level {level} outside 1..{len(self.taps)}")
        return self.taps[level - 1]


def forward_collect(spec: NetworkSpec, weights: Weights, images) -> TapFeatures:
    """Encoder forward pass collecting all four tap activations."""
    if spec.role != "encoder":
        raise ShapeError("forward_collect runs on encoder specs")
    x = _check_images(images, strict_range=True)
    taps = []
    for bspec, bw in zip(spec.blocks, weights.blocks):
        x, _ = block_forward(bspec, bw, x)
        taps.append(x)
    return TapFeatures(tuple(taps))


def encoder_forward_cached(spec: NetworkSpec, weights: Weights, x,
                           upto: int = LEVELS):
    """Forward through encoder blocks 1..upto keeping caches.

    Returns (tap outputs list, caches list). Input range is not checked:
    reconstructions passing through a frozen teacher may leave [0, 1].
    """
    taps, caches = [], []
    for bspec, bw in zip(spec.blocks[:upto], weights.blocks[:upto]):
        x, cache = block_forward(bspec, bw, x, keep=True)
        taps.append(x)
        caches.append(cache)
    return taps, caches


def encoder_backward_taps(spec: NetworkSpec, weights: Weights, caches,
                          tap_grads, need_param_grads: bool = False):
    """Backprop tap-level gradients to the encoder input.

    tap_grads: one array or None per cached block, added where that block's
    output feeds the loss. Returns (input_grad, per-block grads).
    """
    upto = len(caches)
    if tap_grads[upto - 1] is None:
        raise ShapeError("the topmost cached block needs a tap gradient")
    gy = None
    all_grads = []
    for bi in range(upto - 1, -1, -1):
        g_tap = tap_grads[bi]
        if gy is None:
            gy = as_f32(g_tap)
        elif g_tap is not None:
            gy = gy + as_f32(g_tap)
        gy, grads = block_backward(spec.blocks[bi], weights.blocks[bi],
                                   caches[bi], gy, need_param_grads)
        all_grads.append(grads)
    all_grads.reverse()
    return gy, all_grads


def decoder_forward(spec: NetworkSpec, weights: Weights, z,
                    residuals: dict[int, np.ndarray] | None = None):
    """Full decode from tap-4 features to an image.

    residuals maps level N (2..4) to the high-frequency residual injected
    after dec_N's upsample. Returns (image, per-level outputs dict keyed by
    the tap level each block reproduces; level 0 is the image).
    """
    if spec.role != "decoder":
        raise ShapeError("decoder_forward runs on decoder specs")
    x = as_f32(z)
    outputs = {}
    for idx, (bspec, bw) in enumerate(zip(spec.blocks, weights.blocks)):
        level = LEVELS - idx  # block dec_N
        res = residuals.get(level) if residuals else None
        x, _ = block_forward(bspec, bw, x, residual=res)
        outputs[level - 1] = x
    return x, outputs


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------


@dataclass
class Model:
    """Paired encoder/decoder with per-level training provenance."""

    channels: tuple[int, ...]
    encoder_spec: NetworkSpec
    encoder_weights: Weights
    decoder_spec: NetworkSpec
    decoder_weights: Weights
    trained_blocks: set[int] = field(default_factory=set)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_weights(self.encoder_spec, self.encoder_weights)
        validate_weights(self.decoder_spec, self.decoder_weights)

    def param_count(self) -> int:
        return self.encoder_weights.param_count() + self.decoder_weights.param_count()

    def require_trained(self) -> None:
        missing = sorted(set(range(1, LEVELS + 1)) - self.trained_blocks)
        if missing:
            raise MissingBlockError(
                f"model is missing trained block pair(s) {missing}")


def init_model(channels: Sequence[int], seed: int = 0) -> Model:
    enc_spec, dec_spec = build_vgg_shaped_spec(channels)
    rng = np.random.default_rng(seed)
    return Model(
        channels=tuple(int(c) for c in channels),
        encoder_spec=enc_spec,
        encoder_weights=init_weights(enc_spec, rng),
        decoder_spec=dec_spec,
        decoder_weights=init_weights(dec_spec, rng),
    )


def autoencode(model: Model, images, residuals: dict[int, np.ndarray] | None = None):
    """Plain encode-decode of a batch, without clamping."""
    taps = forward_collect(model.encoder_spec, model.encoder_weights, images)
    out, _ = decoder_forward(model.decoder_spec, model.decoder_weights,
                             taps[LEVELS], residuals)
    return out


# ---------------------------------------------------------------------------
# distillation losses
# ---------------------------------------------------------------------------


def _sq_sum(diff: np.ndarray) -> float:
    d = diff.ravel()
    return float(np.dot(d.astype(np.float64), d.astype(np.float64)))


def _centralize_batch(t: np.ndarray) -> np.ndarray:
    """Per-image, per-channel spatial mean removal on a (B, C, H, W) tensor."""
    return t - t.mean(axis=(2, 3), keepdims=True)


def encoder_distill_loss(student_feature, teacher_feature, basis) -> float:
    """|| W^T Fbar_e - Fbar ||^2 for one image.

    student_feature: (c, n) matrix (or FeatureMap) from the student tap.
    teacher_feature: (C, n) matrix from the teacher tap at the same level.
    basis: (c, C) row-orthonormal eigenbasis. Both features are centralized
    here; the loss is minimized exactly at Fbar_e = W Fbar.
    """
    w = basis.w if isinstance(basis, Eigenbasis) else np.asarray(basis, np.float64)
    fe = _matrix_of(student_feature)
    f = _matrix_of(teacher_feature)
    if w.shape != (fe.shape[0], f.shape[0]):
        raise ShapeError(f"basis {w.shape} does not map student {fe.shape[0]} "
                         f"to teacher {f.shape[0]} channels")
    if fe.shape[1] != f.shape[1]:
        raise ShapeError("student and teacher features disagree on positions")
    fe = fe - fe.mean(axis=1, keepdims=True)
    f = f - f.mean(axis=1, keepdims=True)
    return _sq_sum(w.T @ fe - f)


def _matrix_of(feature) -> np.ndarray:
    m = feature.matrix if hasattr(feature, "matrix") else np.asarray(feature)
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D feature matrix, got shape {m.shape}")
    return m


def decoder_loss(dec_feature, enc_feature, reconstruction, image,
                 teacher_tap_rec, teacher_tap_orig, level: int) -> float:
    """Three-term decoder objective for one training level.

    Terms: decoder reproduction of the next-lower encoder feature, image
    reconstruction, and the teacher-feature (perceptual) term at the
    training level. At level 1 the decoder output *is* the image, so the
    feature reproduction term drops and dec_feature/enc_feature must be None.
    """
    if level == 1:
        if dec_feature is not None or enc_feature is not None:
            raise ShapeError("level 1 has no feature reproduction term")
        total = 0.0
    else:
        if dec_feature is None or enc_feature is None:
            raise ShapeError(f"level {level} requires the feature reproduction term")
        if np.shape(dec_feature) != np.shape(enc_feature):
            raise ShapeError("decoder/encoder feature shapes disagree")
        total = _sq_sum(as_f32(dec_feature) - as_f32(enc_feature))
    if np.shape(reconstruction) != np.shape(image):
        raise ShapeError("reconstruction and image shapes disagree")
    if np.shape(teacher_tap_rec) != np.shape(teacher_tap_orig):
        raise ShapeError("teacher tap shapes disagree")
    total += _sq_sum(as_f32(reconstruction) - as_f32(image))
    total += _sq_sum(as_f32(teacher_tap_rec) - as_f32(teacher_tap_orig))
    return total


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Plain gradient descent with momentum, per-tensor gradient clipping.

    clip_norm caps each parameter tensor's gradient L2 norm (0 disables).
    Converged gradients sit well under the default cap; it exists to absorb
    the first-steps error spike, which can otherwise bury a relu block or
    overflow f32 before training settles.

    warmup ramps the step size linearly from step_size/warmup to step_size
    over the first warmup steps (0 disables). The first iterations see the
    largest errors; at a step size chosen for converged progress, those
    errors arrive as parameter jolts big enough to push relu units into the
    dead zone, where no gradient ever reaches them again. The ramp lets the
    loudest part of the error burn off while steps are still small.
    """

    steps: int
    step_size: float = 1e-3
    momentum: float = 0.9
    clip_norm: float = 1.0
    warmup: int = 0

    def step_at(self, step: int) -> float:
        if self.warmup > 0 and step < self.warmup:
            return self.step_size * (step + 1) / self.warmup
        return self.step_size


@dataclass
class BlockTrainResult:
    level: int
    steps_run: int
    trace: list[tuple]  # (step, enc, repro, img, perc), per-image raw sums
    initial_combined: float
    final_combined: float
    leading_mean: float
    trailing_mean: float
    made_progress: bool


class _MomentumState:
    """One velocity buffer per parameter tensor of the updated blocks."""

    def __init__(self, bweights):
        self.vel = [(np.zeros_like(k), np.zeros_like(b)) for k, b in bweights]

    def step(self, bweights, grads, lr: float, momentum: float):
        if lr == 0.0:
            return  # keep weights bit-identical, including signed zeros
        for i, g in enumerate(grads):
            if g is None:
                continue
            gk, gb = g
            vk, vb = self.vel[i]
            vk *= momentum
            vk -= lr * gk
            vb *= momentum
            vb -= lr * gb
            k, b = bweights[i]
            k += vk
            b += vb


def _clip_grads(grads, cap: float):
    """Rescale any gradient tensor whose L2 norm exceeds cap (in place)."""
    if cap <= 0:
        return grads
    for g in grads:
        if g is None:
            continue
        for t in g:
            norm = float(np.sqrt(np.dot(t.ravel(), t.ravel())))
            if norm > cap:
                t *= np.float32(cap / norm)
    return grads


def _enc_loss_and_grad(tap: np.ndarray, teacher_tap: np.ndarray, w32: np.ndarray):
    """Raw projection loss over a batch and its gradient w.r.t. the tap."""
    bsz, c, h, wd = tap.shape
    fe = _centralize_batch(tap).reshape(bsz, c, h * wd)
    f = _centralize_batch(teacher_tap).reshape(bsz, teacher_tap.shape[1], h * wd)
    err = np.matmul(w32.T[None], fe) - f
    loss = _sq_sum(err)
    g = 2.0 * np.matmul(w32[None], err)
    # Backprop through the per-channel centralization.
    g -= g.mean(axis=2, keepdims=True)
    return loss, g.reshape(tap.shape).astype(DTYPE), err.size


def train_block_pair(
    student: Model,
    teacher: Model,
    basis,
    level: int,
    batches: Iterable[np.ndarray],
    config: TrainConfig,
) -> BlockTrainResult:
    """Train the level-N encoder/decoder pair with every other pair frozen.

    The forward path is the sub-autoencoder enc_1..enc_N -> dec_N..dec_1;
    lower pairs must already be trained (their weights are used, not
    updated). Both blocks descend the combined objective every iteration:
    the projection loss reaches only enc_N, the three reconstruction terms
    reach dec_N directly and enc_N through the shared tap. That second path
    matters: the projection target spans the top channel directions of the
    teacher feature, and on its own it leaves the tap blind to whatever
    image detail those directions drop. The image term is what pushes the
    encoder to keep that detail recoverable.

    Each quadratic term is measured relative to the energy of its own
    reference signal on the batch: the raw image for the pixel term, the raw
    teacher feature for the perceptual and reproduction terms, the centered
    teacher feature for the projection term (which is defined on centered
    features). Every trace column then reads as a relative error of the
    signal it fits, and signal magnitude drops out of the step sizes.
    """
    if not 1 <= level <= LEVELS:
        raise ShapeError(f"level must be 1..{LEVELS}, got {level}")
    if config.steps < 0 or config.step_size < 0 or not 0 <= config.momentum < 1:
        raise ValueError("steps >= 0, step_size > 0, 0 <= momentum < 1 required")
    w = basis.w if isinstance(basis, Eigenbasis) else np.asarray(basis, np.float64)
    if w.shape != (student.channels[level - 1], teacher.channels[level - 1]):
        raise ShapeError(
            f"basis {w.shape} does not match student/teacher channels "
            f"({student.channels[level - 1]}, {teacher.channels[level - 1]}) "
            f"at level {level}")
    w32 = w.astype(DTYPE)

    enc_spec, dec_spec = student.encoder_spec, student.decoder_spec
    enc_w, dec_w = student.encoder_weights, student.decoder_weights
    dec_idx = decoder_block_index(level)
    mom_enc = _MomentumState(enc_w.blocks[level - 1])
    mom_dec = _MomentumState(dec_w.blocks[dec_idx])

    trace: list[tuple] = []
    it: Iterator[np.ndarray] = iter(batches)
    steps_run = 0
    for step in range(config.steps):
        try:
            images = next(it)
        except StopIteration:
            break
        images = _check_images(images)
        bsz = images.shape[0]
        try:
            # Teacher taps of the originals are constants.
            t_taps = forward_collect(teacher.encoder_spec, teacher.encoder_weights,
                                     images)
            teacher_tap = t_taps[level]

            # Student encoder up to the trained block.
            x = images
            for bi in range(level - 1):
                x, _ = block_forward(enc_spec.blocks[bi], enc_w.blocks[bi], x)
            enc_input_feat = x  # F^e_(N-1); the image itself at level 1
            tap, enc_cache = block_forward(enc_spec.blocks[level - 1],
                                           enc_w.blocks[level - 1], x, keep=True)

            # Decoder: trained block, then the frozen tail down to the image.
            dec_out, dec_cache = block_forward(dec_spec.blocks[dec_idx],
                                               dec_w.blocks[dec_idx], tap,
                                               keep=True)
            frozen_caches = []
            y = dec_out
            for bi in range(dec_idx + 1, LEVELS):
                y, cache = block_forward(dec_spec.blocks[bi], dec_w.blocks[bi],
                                         y, keep=True)
                frozen_caches.append((bi, cache))
            rec = y

            # Teacher taps of the reconstruction (perceptual term).
            t_taps_rec, t_caches = encoder_forward_cached(
                teacher.encoder_spec, teacher.encoder_weights, rec, upto=level)
            tap_rec = t_taps_rec[level - 1]

            # Raw squared sums, then each term's own scale normalizer.
            loss_enc, g_tap_enc, _ = _enc_loss_and_grad(tap, teacher_tap, w32)
            diff_img = rec - images
            loss_img = _sq_sum(diff_img)
            diff_perc = tap_rec - teacher_tap
            loss_perc = _sq_sum(diff_perc)
            n_img = max(_sq_sum(images), 1e-30)
            n_perc = max(_sq_sum(teacher_tap), 1e-30)
            n_feat = max(_sq_sum(_centralize_batch(teacher_tap)), 1e-30)
            if level > 1:
                diff_repro = dec_out - enc_input_feat
                loss_repro = _sq_sum(diff_repro)
                # Scale against the frozen teacher tap, not the student
                # feature: early in training the student tap can pass through
                # near-zero energy, and dividing by it would blow up.
                n_rec = max(_sq_sum(t_taps[level - 1]), 1e-30)
            else:
                loss_repro, n_rec = 0.0, 1.0

            # Decoder backward: perceptual through the teacher, image term,
            # reproduction term; stops at the tap.
            tap_grads = [None] * level
            tap_grads[level - 1] = np.float32(2.0 / n_perc) * diff_perc
            g_rec, _ = encoder_backward_taps(teacher.encoder_spec,
                                             teacher.encoder_weights,
                                             t_caches, tap_grads)
            g_rec = g_rec + np.float32(2.0 / n_img) * diff_img
            for bi, cache in reversed(frozen_caches):
                g_rec, _ = block_backward(dec_spec.blocks[bi], dec_w.blocks[bi],
                                          cache, g_rec, need_param_grads=False)
            if level > 1:
                g_rec = g_rec + np.float32(2.0 / n_rec) * diff_repro
            g_tap_rec, dec_grads = block_backward(dec_spec.blocks[dec_idx],
                                                  dec_w.blocks[dec_idx],
                                                  dec_cache, g_rec,
                                                  need_param_grads=True)

            # Encoder backward: projection loss plus the reconstruction
            # terms arriving through the decoder.
            g_tap = g_tap_enc * np.float32(1.0 / n_feat) + g_tap_rec
            _, enc_grads = block_backward(enc_spec.blocks[level - 1],
                                          enc_w.blocks[level - 1], enc_cache,
                                          g_tap)
        except NumericalError as exc:
            raise TrainingDivergence(
                f"level {level}, step {step}: {exc}") from exc

        row = (step, loss_enc / n_feat, loss_repro / n_rec, loss_img / n_img,
               loss_perc / n_perc)
        if not all(np.isfinite(v) for v in row[1:]):
            raise TrainingDivergence(
                f"level {level}, step {step}: non-finite loss {row[1:]}")
        trace.append(row)

        lr = config.step_at(step)
        mom_dec.step(dec_w.blocks[dec_idx], _clip_grads(dec_grads, config.clip_norm),
                     lr, config.momentum)
        mom_enc.step(enc_w.blocks[level - 1], _clip_grads(enc_grads, config.clip_norm),
                     lr, config.momentum)
        steps_run += 1

    combined = [sum(r[1:]) for r in trace]
    window = max(1, min(10, len(combined) // 4)) if combined else 1
    leading = float(np.mean(combined[:window])) if combined else float("nan")
    trailing = float(np.mean(combined[-window:])) if combined else float("nan")
    if steps_run:
        student.trained_blocks.add(level)
    return BlockTrainResult(
        level=level,
        steps_run=steps_run,
        trace=trace,
        initial_combined=combined[0] if combined else float("nan"),
        final_combined=combined[-1] if combined else float("nan"),
        leading_mean=leading,
        trailing_mean=trailing,
        made_progress=bool(combined) and trailing < leading,
    )


def train_autoencoder(model: Model, batches: Iterable[np.ndarray],
                      config: TrainConfig) -> list[float]:
    """Image-reconstruction training of a full encoder/decoder, grown deep.

    This is how the desk-scale teacher is produced: a brief autoencoder fit
    so its features are structured rather than random. The step budget is
    split evenly across the four levels; stage N trains the (enc_N, dec_N)
    pair on image reconstruction through the already-trained shallower
    pairs, which stay frozen. Training all depths at once instead settles
    into a frozen-body equilibrium: the output conv fits the best linear
    readout of whatever the random encoder emits and the residual then
    carries almost no gradient to anything upstream. Growing one pair at a
    time keeps every new block next to a trained chain, where the same
    dynamics that distill student pairs are known to converge.

    Returns the per-step loss trace (per-image raw sums; one entry per step
    across all stages).
    """
    if config.steps < 0 or config.step_size < 0 or not 0 <= config.momentum < 1:
        raise ValueError("steps >= 0, step_size > 0, 0 <= momentum < 1 required")
    enc_spec, dec_spec = model.encoder_spec, model.decoder_spec
    enc_w, dec_w = model.encoder_weights, model.decoder_weights
    losses: list[float] = []
    it = iter(batches)
    per_stage = [config.steps // LEVELS] * LEVELS
    per_stage[-1] += config.steps - sum(per_stage)
    for level, stage_steps in zip(range(1, LEVELS + 1), per_stage):
        dec_idx = decoder_block_index(level)
        mom_enc = _MomentumState(enc_w.blocks[level - 1])
        mom_dec = _MomentumState(dec_w.blocks[dec_idx])
        for step in range(stage_steps):
            try:
                images = next(it)
            except StopIteration:
                break
            images = _check_images(images)
            try:
                x = images
                for bi in range(level - 1):
                    x, _ = block_forward(enc_spec.blocks[bi], enc_w.blocks[bi], x)
                tap, enc_cache = block_forward(enc_spec.blocks[level - 1],
                                               enc_w.blocks[level - 1], x,
                                               keep=True)
                y, dec_cache = block_forward(dec_spec.blocks[dec_idx],
                                             dec_w.blocks[dec_idx], tap,
                                             keep=True)
                frozen_caches = []
                for bi in range(dec_idx + 1, LEVELS):
                    y, cache = block_forward(dec_spec.blocks[bi],
                                             dec_w.blocks[bi], y, keep=True)
                    frozen_caches.append((bi, cache))
                diff = y - images
                loss = _sq_sum(diff)
                if not np.isfinite(loss):
                    raise TrainingDivergence(
                        f"autoencoder level {level}, step {step}: loss {loss}")
                losses.append(loss / images.shape[0])

                gy = np.float32(2.0 / max(_sq_sum(images), 1e-30)) * diff
                for bi, cache in reversed(frozen_caches):
                    gy, _ = block_backward(dec_spec.blocks[bi], dec_w.blocks[bi],
                                           cache, gy, need_param_grads=False)
                gy, dec_grads = block_backward(dec_spec.blocks[dec_idx],
                                               dec_w.blocks[dec_idx],
                                               dec_cache, gy)
                _, enc_grads = block_backward(enc_spec.blocks[level - 1],
                                              enc_w.blocks[level - 1],
                                              enc_cache, gy)
            except NumericalError as exc:
                raise TrainingDivergence(
                    f"autoencoder level {level}, step {step}: {exc}") from exc
            lr = config.step_at(step)
            mom_dec.step(dec_w.blocks[dec_idx],
                         _clip_grads(dec_grads, config.clip_norm),
                         lr, config.momentum)
            mom_enc.step(enc_w.blocks[level - 1],
                         _clip_grads(enc_grads, config.clip_norm),
                         lr, config.momentum)
    model.trained_blocks.update(range(1, LEVELS + 1))
    return losses


def normalize_activation_scales(model: Model, images: np.ndarray,
                                target: float = 1.0) -> list[float]:
    """Rescale the model so every tap has centered RMS = target on a probe.

    Autoencoder training leaves per-level activation scales arbitrary (the
    decoder absorbs any factor), which starves every feature-space loss
    downstream. This folds a per-level factor into the weights: each encoder
    block's closing conv scales its tap, the next block's opening kernel
    absorbs the inverse, and the decoder mirrors both, so the image->image
    function is unchanged up to float rounding while tap N (and everything
    living in its feature space, residuals included) scales exactly.

    Returns the applied per-level factors. Idempotent up to probe noise.
    """
    if target <= 0:
        raise ValueError("target RMS must be positive")
    images = _check_images(images)
    taps = forward_collect(model.encoder_spec, model.encoder_weights, images)
    gammas = []
    for level in range(1, LEVELS + 1):
        t = taps[level].astype(np.float64)
        centered = t - t.mean(axis=(2, 3), keepdims=True)
        rms = float(np.sqrt((centered ** 2).mean()))
        if rms <= 0.0:
            raise NumericalError(f"tap {level} is constant on the probe batch; "
                                 "cannot normalize a degenerate scale")
        gammas.append(target / rms)

    enc_w, dec_w = model.encoder_weights.blocks, model.decoder_weights.blocks
    for level in range(1, LEVELS + 1):
        g = np.float64(gammas[level - 1])
        g_prev = np.float64(gammas[level - 2]) if level > 1 else np.float64(1.0)
        enc = enc_w[level - 1]
        if level > 1:
            enc[0][0][...] = as_f32(enc[0][0].astype(np.float64) / g_prev)
        enc[-1][0][...] = as_f32(enc[-1][0].astype(np.float64) * g)
        enc[-1][1][...] = as_f32(enc[-1][1].astype(np.float64) * g)
        dec = dec_w[decoder_block_index(level)]
        dec[0][0][...] = as_f32(dec[0][0].astype(np.float64) / g)
        if level > 1:
            dec[-1][0][...] = as_f32(dec[-1][0].astype(np.float64) * g_prev)
            dec[-1][1][...] = as_f32(dec[-1][1].astype(np.float64) * g_prev)
    model.meta["tap_rms_target"] = float(target)
    return [float(g) for g in gammas]


# ---------------------------------------------------------------------------
# benchmarking
# ---------------------------------------------------------------------------


def bench_forward(spec: NetworkSpec, weights: Weights, image_size: int,
                  repetitions: int = 5, seed: int = 0) -> float:
    """Median wall-clock seconds for one forward pass at the given size.

    Encoders take a (1, 3, s, s) image; decoders take the matching tap-4
    activation. The first (warm-up) run is excluded from the median.
    """
    if image_size % SPATIAL_MULTIPLE:
        raise ShapeError(f"image size must divide by {SPATIAL_MULTIPLE}")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    rng = np.random.default_rng(seed)
    if spec.role == "encoder":
        x = rng.uniform(0.0, 1.0, (1, 3, image_size, image_size)).astype(DTYPE)
    else:
        cin = spec.blocks[0].layers[0].in_ch
        s = image_size // SPATIAL_MULTIPLE
        x = rng.uniform(0.0, 1.0, (1, cin, s, s)).astype(DTYPE)

    def run():
        y = x
        for bspec, bw in zip(spec.blocks, weights.blocks):
            y, _ = block_forward(bspec, bw, y)
        return y

    run()  # warm-up
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_autoencoder(model: Model, image_size: int, repetitions: int = 5,
                      seed: int = 0) -> float:
    """Median seconds per image for a full encode+decode at the given size."""
    if image_size % SPATIAL_MULTIPLE:
        raise ShapeError(f"image size must divide by {SPATIAL_MULTIPLE}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, (1, 3, image_size, image_size)).astype(DTYPE)
    autoencode(model, x)  # warm-up
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        autoencode(model, x)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))
