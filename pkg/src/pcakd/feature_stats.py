"""Feature-map statistics: centralization, covariance, Gram matrices, and
explained-variance profiles that drive channel-length selection.

A feature map is the channel-major matrix view of one image's activation at
one layer: C rows (channels), n = H*W columns (positions). Statistics are
computed in float64. Covariance uses the 1/n convention; the trace and
reconstruction objectives elsewhere deliberately use the unnormalized
scatter matrix, which shares its eigenvectors.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError
from .tensor_math import SymEigResult, check_finite, sym_eig

# Eigenvalues below this fraction of the largest one count as zero when
# normalizing explained variance.
EIG_CLAMP_REL = 1e-10
# Covariance eigenvalues below -1e-6 * sigma_max indicate a broken input.
PSD_TOL_REL = 1e-6


@dataclass(frozen=True)
class FeatureMap:
    """One image's activation at one layer, viewed as a (C, n) matrix."""

    matrix: np.ndarray
    layer_id: int = 0
    image_id: str = ""

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise ShapeError(f"FeatureMap expects a non-empty 2-D matrix, got {self.matrix.shape}")
        check_finite("FeatureMap", m)
        object.__setattr__(self, "matrix", m)

    @property
    def channels(self) -> int:
        return self.matrix.shape[0]

    @property
    def positions(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def from_tensor(cls, activation: np.ndarray, layer_id: int = 0,
                    image_id: str = "") -> "FeatureMap":
        """Channel-major reshape of a (C, H, W) activation."""
        a = np.asarray(activation)
        if a.ndim != 3:
            raise ShapeError(f"from_tensor expects (C, H, W), got {a.shape}")
        return cls(a.reshape(a.shape[0], -1), layer_id, image_id)


def centralize(fmap: FeatureMap) -> FeatureMap:
    """Subtract each channel's spatial mean. Row sums of the result vanish."""
    m = fmap.matrix
    mean = m.mean(axis=1, keepdims=True)
    return FeatureMap(m - mean, fmap.layer_id, fmap.image_id)


def channel_mean(fmap: FeatureMap) -> np.ndarray:
    """(C,) per-channel spatial mean."""
    return fmap.matrix.mean(axis=1)


def covariance(fmap: FeatureMap) -> np.ndarray:
    """(C, C) covariance (1/n) * Fbar @ Fbar.T, symmetrized against rounding."""
    m = centralize(fmap).matrix
    cov = m @ m.T / m.shape[1]
    return 0.5 * (cov + cov.T)


def gram(fmap: FeatureMap) -> np.ndarray:
    """(C, C) Gram matrix (1/n) * F @ F.T of the uncentralized feature."""
    m = fmap.matrix
    g = m @ m.T / m.shape[1]
    return 0.5 * (g + g.T)


def scatter(fmap: FeatureMap) -> np.ndarray:
    """Unnormalized scatter Fbar @ Fbar.T; same eigenvectors as covariance."""
    m = centralize(fmap).matrix
    s = m @ m.T
    return 0.5 * (s + s.T)


def psd_eig(matrix: np.ndarray) -> SymEigResult:
    """Eigendecomposition of a covariance-like matrix.

    Enforces positive semidefiniteness: eigenvalues below
    -PSD_TOL_REL * sigma_max are an error; mild negatives from rounding
    clamp to zero.
    """
    res = sym_eig(matrix)
    vals = res.eigenvalues
    smax = float(vals[0]) if vals.size else 0.0
    floor = -PSD_TOL_REL * max(smax, 0.0)
    if vals.min(initial=0.0) < floor:
        raise NumericalError(
            f"covariance eigenvalue {vals.min():.3e} below PSD tolerance "
            f"{floor:.3e}"
        )
    return SymEigResult(np.maximum(vals, 0.0), res.eigenvectors)


@dataclass(frozen=True)
class FeatureStats:
    """Per-channel mean and covariance of a feature map, with a lazy eig cache."""

    mean: np.ndarray
    cov: np.ndarray
    _eig_cache: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        cov = np.ascontiguousarray(self.cov, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.shape[0], mean.shape[0]):
            raise ShapeError(
                f"FeatureStats: mean {mean.shape} and covariance {cov.shape} disagree"
            )
        check_finite("FeatureStats", mean, cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_feature(cls, fmap: FeatureMap) -> "FeatureStats":
        return cls(channel_mean(fmap), covariance(fmap))

    def eig(self) -> SymEigResult:
        if not self._eig_cache:
            self._eig_cache.append(psd_eig(self.cov))
        return self._eig_cache[0]


# ---------------------------------------------------------------------------
# explained-variance profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VarianceProfile:
    """Mean explained-variance spectrum of one layer over an image set.

    mev[i] is the dataset-mean fraction of per-image variance carried by the
    (i+1)-th principal component; mcev is its prefix sum. Both have length C.
    """

    layer_id: int
    channels: int
    mev: np.ndarray
    mcev: np.ndarray
    images: int
    skipped: int = 0

    def __post_init__(self):
        mev = np.ascontiguousarray(self.mev, dtype=np.float64)
        mcev = np.ascontiguousarray(self.mcev, dtype=np.float64)
        if mev.shape != (self.channels,) or mcev.shape != (self.channels,):
            raise ShapeError("VarianceProfile: spectrum length must equal channels")
        if np.any(mev < -1e-12):
            raise NumericalError("VarianceProfile: negative mEV entry")
        if np.any(np.diff(mcev) < -1e-12):
            raise NumericalError("VarianceProfile: mCEV must be non-decreasing")
        object.__setattr__(self, "mev", mev)
        object.__setattr__(self, "mcev", mcev)


def variance_profile(features: Iterable[FeatureMap], layer_id: int | None = None
                     ) -> VarianceProfile:
    """Stream per-image explained-variance fractions into a running mean.

    Images whose features have zero total variance are skipped with a
    warning and counted in the profile's `skipped` field. The stream is
    consumed once; nothing is retained beyond the running mean.
    """
    mean_ev = None
    channels = 0
    used = 0
    skipped = 0
    lid = layer_id
    for fmap in features:
        if lid is None:
            lid = fmap.layer_id
        if mean_ev is None:
            channels = fmap.channels
            mean_ev = np.zeros(channels, dtype=np.float64)
        elif fmap.channels != channels:
            raise ShapeError(
                f"variance_profile: channel count changed from {channels} "
                f"to {fmap.channels} mid-stream"
            )
        vals = psd_eig(covariance(fmap)).eigenvalues
        vals = np.where(vals < EIG_CLAMP_REL * vals[0], 0.0, vals) if vals[0] > 0 else vals
        total = vals.sum()
        if total <= 0.0:
            skipped += 1
            warnings.warn(
                f"variance_profile: skipping zero-variance image "
                f"{fmap.image_id!r} at layer {lid}", stacklevel=2)
            continue
        used += 1
        mean_ev += (vals / total - mean_ev) / used
    if mean_ev is None or used == 0:
        raise ValueError("variance_profile: empty feature stream")
    return VarianceProfile(
        layer_id=int(lid or 0), channels=channels, mev=mean_ev,
        mcev=np.cumsum(mean_ev), images=used, skipped=skipped,
    )


def select_channel_lengths(profiles: Sequence[VarianceProfile],
                           threshold: float = 0.85,
                           first_layer_doubling: bool = True) -> tuple[int, ...]:
    """Smallest channel count whose mCEV reaches the threshold, per layer.

    With first_layer_doubling the first layer's result is doubled (capped at
    its channel count); the distillation through the second layer otherwise
    starves when the first layer is cut too aggressively.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    if not profiles:
        raise ValueError("select_channel_lengths: no profiles given")
    picks = []
    for prof in profiles:
        hit = np.nonzero(prof.mcev >= threshold - 1e-6)[0]
        if hit.size == 0:
            raise ValueError(
                f"layer {prof.layer_id}: threshold {threshold} unreachable "
                f"(mCEV tops out at {prof.mcev[-1]:.6f})"
            )
        picks.append(int(hit[0]) + 1)
    if first_layer_doubling:
        picks[0] = min(2 * picks[0], profiles[0].channels)
    return tuple(picks)


# ---------------------------------------------------------------------------
# text-table serialization (consumed by the CLI's analyze command)
# ---------------------------------------------------------------------------


def profiles_to_table(profiles: Sequence[VarianceProfile]) -> str:
    """Render profiles as a CSV text table: layer, index, mEV, mCEV."""
    out = io.StringIO()
    for prof in profiles:
        out.write(f"# layer {prof.layer_id}: images={prof.images} "
                  f"skipped={prof.skipped}\n")
    out.write("layer,index,mev,mcev\n")
    for prof in profiles:
        for i in range(prof.channels):
            out.write(f"{prof.layer_id},{i + 1},{prof.mev[i]:.12g},"
                      f"{prof.mcev[i]:.12g}\n")
    return out.getvalue()


def profiles_from_table(text: str) -> list[VarianceProfile]:
    """Parse the analyze table back into VarianceProfile objects."""
    meta: dict[int, tuple[int, int]] = {}
    rows: dict[int, list[tuple[int, float, float]]] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].replace(":", "").split()
            if len(parts) >= 4 and parts[0] == "layer":
                lid = int(parts[1])
                kv = dict(p.split("=") for p in parts[2:] if "=" in p)
                meta[lid] = (int(kv.get("images", 0)), int(kv.get("skipped", 0)))
            continue
        if line.startswith("layer,"):
            continue
        lid_s, idx_s, mev_s, mcev_s = line.split(",")
        rows.setdefault(int(lid_s), []).append(
            (int(idx_s), float(mev_s), float(mcev_s)))
    profiles = []
    for lid in sorted(rows):
        entries = sorted(rows[lid])
        mev = np.array([e[1] for e in entries])
        mcev = np.array([e[2] for e in entries])
        images, skipped = meta.get(lid, (0, 0))
        profiles.append(VarianceProfile(
            layer_id=lid, channels=len(entries), mev=mev, mcev=mcev,
            images=images, skipped=skipped))
    return profiles
