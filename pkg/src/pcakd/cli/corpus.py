"""Corpus loading, random-crop batching, and the bundled synthetic corpus.

The synthetic generator exists so the whole pipeline runs with zero
downloads: 64 textured images made of multi-octave value noise blended
with linear color fields.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import ImageReadError
from ..tensor_math import DTYPE
from .images import load_image, save_png

CORPUS_EXTENSIONS = (".png", ".ppm")
DEFAULT_CORPUS_COUNT = 64
DEFAULT_CORPUS_SIZE = 96


@dataclass
class Corpus:
    """Loaded images plus bookkeeping about what was skipped."""

    images: list[np.ndarray]
    names: list[str]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.images)


def load_corpus(directory: str | os.PathLike, min_size: int = 0) -> Corpus:
    """Load every PNG/PPM under a directory in sorted name order.

    Unreadable files and images smaller than min_size on either side are
    skipped with a warning and counted, not fatal: a corpus survives a few
    bad files.
    """
    directory = os.fspath(directory)
    try:
        entries = sorted(os.listdir(directory))
    except OSError as exc:
        raise ImageReadError(f"cannot list corpus directory {directory}: {exc}") from exc
    images, names, skipped = [], [], 0
    for name in entries:
        if not name.lower().endswith(CORPUS_EXTENSIONS):
            continue
        path = os.path.join(directory, name)
        try:
            img = load_image(path)
        except ImageReadError as exc:
            warnings.warn(f"skipping unreadable image: {exc}", stacklevel=2)
            skipped += 1
            continue
        if min_size and (img.shape[0] < min_size or img.shape[1] < min_size):
            warnings.warn(
                f"skipping {name}: {img.shape[0]}x{img.shape[1]} is smaller "
                f"than the {min_size} crop", stacklevel=2)
            skipped += 1
            continue
        images.append(img)
        names.append(name)
    if not images:
        raise ImageReadError(f"no usable images in {directory}")
    return Corpus(images, names, skipped)


@dataclass
class RandomCropBatcher:
    """Seeded random-crop sampler over a fixed image list.

    Each epoch visits images in a freshly shuffled order; every sample is a
    uniformly positioned crop_size x crop_size crop. Batches come out
    channel-major (B, 3, crop, crop) ready for the networks.
    """

    images: list[np.ndarray]
    crop_size: int
    batch_size: int = 8
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)
    _order: np.ndarray = field(init=False, repr=False)
    _pos: int = field(init=False, repr=False)

    def __post_init__(self):
        if self.crop_size % 8:
            raise ValueError("crop size must divide by 8")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if not self.images:
            raise ValueError("batcher needs at least one image")
        for img in self.images:
            if img.shape[0] < self.crop_size or img.shape[1] < self.crop_size:
                raise ImageReadError(
                    f"image {img.shape[0]}x{img.shape[1]} is smaller than "
                    f"the {self.crop_size} crop")
        self._rng = np.random.default_rng(self.seed)
        self._order = self._rng.permutation(len(self.images))
        self._pos = 0

    def _next_image(self) -> np.ndarray:
        if self._pos == len(self._order):
            self._order = self._rng.permutation(len(self.images))
            self._pos = 0
        img = self.images[self._order[self._pos]]
        self._pos += 1
        return img

    def sample_crop(self) -> np.ndarray:
        img = self._next_image()
        top = int(self._rng.integers(0, img.shape[0] - self.crop_size + 1))
        left = int(self._rng.integers(0, img.shape[1] - self.crop_size + 1))
        crop = img[top:top + self.crop_size, left:left + self.crop_size]
        return crop.transpose(2, 0, 1).astype(DTYPE)

    def next_batch(self) -> np.ndarray:
        return np.stack([self.sample_crop() for _ in range(self.batch_size)])

    def iter_batches(self, steps: int):
        for _ in range(steps):
            yield self.next_batch()


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Resample a small square grid to size x size with bilinear weights."""
    g = grid.shape[0]
    xs = np.linspace(0.0, g - 1.0, size)
    i0 = np.floor(xs).astype(int)
    i1 = np.minimum(i0 + 1, g - 1)
    f = xs - i0
    rows = grid[i0] + f[:, None] * (grid[i1] - grid[i0])
    return rows[:, i0] + f[None, :] * (rows[:, i1] - rows[:, i0])


# Shared planar color gamut: every texture is base + a*U + b*V with scalar
# fields a, b. One fixed plane across the whole corpus means even a very
# narrow first layer can code the colors losslessly, while the per-image
# fields still give each image its own covariance inside the plane.
GAMUT_BASE = np.array([0.52, 0.48, 0.50])
GAMUT_U = np.array([1.0, 0.25, -0.6])
GAMUT_V = np.array([-0.2, 1.0, 0.45])


def generate_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """One synthetic (size, size, 3) texture in [0, 1].

    Multi-octave value noise drives one gamut axis; a linear gradient field
    at a random angle drives the other. Amplitudes are kept small enough
    that the result never clips, so the planar color structure is exact.
    """
    octaves = ((4, 1.0), (8, 0.5), (16, 0.35))
    noise = np.zeros((size, size))
    for g, weight in octaves:
        noise += weight * _bilinear_upsample(rng.random((g, g)), size)
    noise /= sum(w for _, w in octaves)

    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    grad = (xx - 0.5) * math.cos(angle) + (yy - 0.5) * math.sin(angle)

    # In-plane rotation plus independent amplitudes: distinct second-order
    # statistics per image, same plane for all of them.
    theta = rng.uniform(0.0, 2.0 * math.pi)
    a = math.cos(theta) * (noise - 0.5) - math.sin(theta) * grad
    b = math.sin(theta) * (noise - 0.5) + math.cos(theta) * grad
    amp_a = rng.uniform(0.25, 0.42)
    amp_b = rng.uniform(0.18, 0.32)

    img = (GAMUT_BASE
           + (amp_a * a)[:, :, None] * GAMUT_U
           + (amp_b * b)[:, :, None] * GAMUT_V)
    return np.clip(img, 0.0, 1.0).astype(DTYPE)


def make_synthetic_corpus(directory: str | os.PathLike,
                          count: int = DEFAULT_CORPUS_COUNT,
                          size: int = DEFAULT_CORPUS_SIZE,
                          seed: int = 0) -> list[str]:
    """Write count synthetic PNGs into a directory; returns their paths."""
    if size % 8:
        raise ValueError("synthetic image size must divide by 8")
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        path = os.path.join(directory, f"tex_{i:03d}.png")
        save_png(path, generate_texture(rng, size))
        paths.append(path)
    return paths
