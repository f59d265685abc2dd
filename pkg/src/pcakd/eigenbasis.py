"""Eigenbases for feature projection.

A basis is a (c, C) row-orthonormal matrix W: c projected channels over C
source channels. The local basis of one image stacks the top-c eigenvectors
of that image's feature covariance. The global basis is image-independent
and is fit by minibatch projected gradient descent on the reconstruction
objective, with a QR retraction back onto the row-orthonormal manifold
after every step. Maximizing the projected trace and minimizing the
reconstruction error are dual: their values sum to the scatter trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError, TrainingDivergence
from .feature_stats import FeatureMap, centralize, psd_eig
from .tensor_math import check_finite

ORTHONORMAL_TOL = 1e-4
# Eigenvalue ties at the cut make the local basis non-unique.
TIE_REL_TOL = 1e-6
# Held-out mean loss may exceed the closed-form optimum by at most this factor.
VALIDATION_FACTOR = 1.05
# An epoch whose mean loss grows by more than 1% over the previous one aborts.
DIVERGENCE_REL_TOL = 1e-2


@dataclass(frozen=True)
class Eigenbasis:
    """Row-orthonormal projection basis with provenance metadata."""

    w: np.ndarray
    layer_id: int = 0
    kind: str = "local"
    tied_cut: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        w = np.ascontiguousarray(self.w, dtype=np.float64)
        if w.ndim != 2 or not 1 <= w.shape[0] <= w.shape[1]:
            raise ShapeError(
                f"Eigenbasis expects a (c, C) matrix with 1 <= c <= C, got {w.shape}"
            )
        check_finite("Eigenbasis", w)
        gram_err = np.abs(w @ w.T - np.eye(w.shape[0])).max()
        if gram_err > ORTHONORMAL_TOL:
            raise ShapeError(
                f"Eigenbasis rows are not orthonormal (max |WW^T - I| = {gram_err:.3e})"
            )
        object.__setattr__(self, "w", w)

    @property
    def rows(self) -> int:
        return self.w.shape[0]

    @property
    def cols(self) -> int:
        return self.w.shape[1]


def _basis_matrix(w) -> np.ndarray:
    m = w.w if isinstance(w, Eigenbasis) else np.asarray(w, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"basis must be 2-D, got shape {m.shape}")
    return m


def _covariance_of(fmap: FeatureMap) -> np.ndarray:
    m = centralize(fmap).matrix
    cov = m @ m.T / m.shape[1]
    return 0.5 * (cov + cov.T)


def local_eigenbasis(fbar: FeatureMap, c: int) -> Eigenbasis:
    """Top-c covariance eigenvectors of one image's centralized feature.

    Flags a tie when the spectrum is flat across the cut (the basis is then
    not unique up to rotation of the tied block).
    """
    if not 1 <= c <= fbar.channels:
        raise ShapeError(f"requested {c} rows from {fbar.channels} channels")
    eig = psd_eig(_covariance_of(fbar))
    vals, vecs = eig.eigenvalues, eig.eigenvectors
    tied = False
    if c < len(vals):
        scale = max(float(vals[0]), 1e-30)
        tied = (vals[c - 1] - vals[c]) <= TIE_REL_TOL * scale
    return Eigenbasis(vecs[:, :c].T, layer_id=fbar.layer_id, kind="local",
                      tied_cut=tied, meta={"image_id": fbar.image_id})


def trace_objective(w, fbar: FeatureMap) -> float:
    """tr(W Fbar Fbar^T W^T): variance captured by the projection.

    Uses the unnormalized scatter so that the duality with the
    reconstruction loss is exact: objective + loss = tr(Fbar Fbar^T).
    """
    m = _basis_matrix(w)
    x = centralize(fbar).matrix
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"basis has {m.shape[1]} columns, feature has "
                         f"{x.shape[0]} channels")
    p = m @ x
    return float(np.einsum("ij,ij->", p, p))


def reconstruction_loss(w, fbar: FeatureMap) -> float:
    """||W^T W Fbar - Fbar||^2: energy lost by projecting and lifting back."""
    m = _basis_matrix(w)
    x = centralize(fbar).matrix
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"basis has {m.shape[1]} columns, feature has "
                         f"{x.shape[0]} channels")
    r = m.T @ (m @ x) - x
    return float(np.einsum("ij,ij->", r, r))


def _orthonormalize_rows(w: np.ndarray) -> np.ndarray:
    """QR retraction onto the row-orthonormal manifold, sign-stabilized."""
    q, r = np.linalg.qr(w.T)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return (q * signs).T


def random_orthonormal(c: int, big_c: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded Gaussian init followed by row orthonormalization."""
    if not 1 <= c <= big_c:
        raise ShapeError(f"cannot build a ({c}, {big_c}) orthonormal basis")
    return _orthonormalize_rows(rng.standard_normal((c, big_c)))


def _recon_of(w: np.ndarray, s: np.ndarray) -> float:
    """Reconstruction loss against a scatter matrix: tr(S) - tr(W S W^T)."""
    return float(np.trace(s)) - float(np.einsum("ij,ij->", w @ s, w))


DatasetLike = Sequence[Sequence[FeatureMap]] | Callable[[], Iterable[Sequence[FeatureMap]]]


def _materialize(dataset: DatasetLike) -> list[list[FeatureMap]]:
    groups = dataset() if callable(dataset) else dataset
    out = []
    for group in groups:
        maps = list(group)
        if not maps:
            raise ValueError("empty per-image feature group in dataset")
        out.append(maps)
    if not out:
        raise ValueError("global basis solver needs a non-empty dataset")
    layers = len(out[0])
    for maps in out:
        if len(maps) != layers:
            raise ShapeError("every image must provide the same layer count")
    return out


def global_eigenbasis_sgd(
    dataset: DatasetLike,
    dims: Sequence[int],
    epochs: int = 5,
    batch_size: int = 8,
    step_size: float = 0.25,
    seed: int = 0,
    holdout: int = 8,
    validate: bool = True,
) -> list[Eigenbasis]:
    """Fit image-independent bases for all layers jointly.

    Args:
        dataset: per-image groups of per-layer FeatureMaps, either a
            re-iterable sequence or a callable returning one.
        dims: target row count c per layer; len(dims) fixes the layer count.
        epochs, batch_size, step_size: plain minibatch gradient descent with
            a QR retraction after every step. Each layer's objective is the
            batch-mean reconstruction loss divided by that layer's mean
            scatter trace (a constant fixed before training), so one step
            size serves layers whose feature energies differ by orders of
            magnitude. Useful steps are O(0.1) on this objective.
        holdout: images reserved from the head of the stream; the fitted
            bases are compared there against the closed-form optimum of the
            pooled covariance.
        validate: raise TrainingDivergence when the held-out mean loss
            exceeds VALIDATION_FACTOR times the closed-form optimum.

    Returns:
        One Eigenbasis per layer (kind "global") with fit metadata.
    """
    if epochs < 0 or batch_size < 1 or step_size <= 0:
        raise ValueError("epochs >= 0, batch_size >= 1, step_size > 0 required")
    groups = _materialize(dataset)
    layers = len(groups[0])
    if len(dims) != layers:
        raise ShapeError(f"got {len(dims)} dims for {layers} layers")

    big_cs = [f.channels for f in groups[0]]
    for maps in groups:
        for i, f in enumerate(maps):
            if f.channels != big_cs[i]:
                raise ShapeError("channel count varies across images within a layer")
    for i, (c, big_c) in enumerate(zip(dims, big_cs)):
        if not 1 <= c <= big_c:
            raise ShapeError(f"layer {i + 1}: dim {c} outside [1, {big_c}]")

    n_hold = min(holdout, max(len(groups) - 1, 0))
    hold, train = groups[:n_hold], groups[n_hold:]
    if not train:
        raise ValueError("dataset too small: nothing left to train on after holdout")

    # Scatter matrices are all the solver touches; features can be dropped
    # early.
    def _scatter(f: FeatureMap) -> np.ndarray:
        m = centralize(f).matrix
        s = m @ m.T
        return 0.5 * (s + s.T)

    train_sc = [[_scatter(f) for f in maps] for maps in train]
    hold_sc = [[_scatter(f) for f in maps] for maps in hold]

    # Per-layer normalizers, fixed before the first step: layer energies can
    # differ by orders of magnitude, and a shared step size is only usable on
    # the relative (trace-normalized) objective.
    norms = [max(float(np.mean([covs[li].trace() for covs in train_sc])), 1e-30)
             for li in range(layers)]

    rng = np.random.default_rng(seed)
    ws = [random_orthonormal(c, big_c, rng) for c, big_c in zip(dims, big_cs)]

    epoch_losses: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(len(train_sc))
        running = 0.0
        for start in range(0, len(order), batch_size):
            batch = [train_sc[i] for i in order[start:start + batch_size]]
            for li in range(layers):
                s_mean = sum(covs[li] for covs in batch) / len(batch)
                w = ws[li]
                running += _recon_of(w, s_mean) / norms[li] * len(batch)
                ws_grad = w @ s_mean
                # Closed-form derivative of the reconstruction objective,
                # using W W^T = I after the previous retraction.
                grad = 2.0 / norms[li] * ((ws_grad @ w.T) @ w - ws_grad)
                ws[li] = _orthonormalize_rows(w - step_size * grad)
        mean_loss = running / len(train_sc)
        if not np.isfinite(mean_loss):
            raise TrainingDivergence(
                f"global basis fit: non-finite loss in epoch {epoch + 1}")
        if epoch_losses and mean_loss > epoch_losses[-1] * (1 + DIVERGENCE_REL_TOL):
            raise TrainingDivergence(
                f"global basis fit diverged: epoch {epoch + 1} loss "
                f"{mean_loss:.6e} above previous {epoch_losses[-1]:.6e}; "
                f"lower the step size"
            )
        epoch_losses.append(mean_loss)

    # Held-out comparison against the closed-form optimum of the pooled
    # scatter, independently per layer.
    ratios = []
    if hold_sc:
        for li in range(layers):
            pooled = sum(covs[li] for covs in hold_sc) / len(hold_sc)
            opt = psd_eig(pooled).eigenvectors[:, :dims[li]].T
            loss_fit = float(np.mean([_recon_of(ws[li], covs[li]) for covs in hold_sc]))
            loss_opt = float(np.mean([_recon_of(opt, covs[li]) for covs in hold_sc]))
            scale = max(float(np.mean([np.trace(covs[li]) for covs in hold_sc])), 1e-30)
            ratios.append(loss_fit / max(loss_opt, 1e-12 * scale))
        if validate and max(ratios) > VALIDATION_FACTOR:
            raise TrainingDivergence(
                f"held-out loss ratio {max(ratios):.4f} exceeds "
                f"{VALIDATION_FACTOR}; increase epochs or lower the step size "
                f"(per-layer ratios: {[f'{r:.4f}' for r in ratios]})"
            )

    bases = []
    for li, w in enumerate(ws):
        meta = {
            "epochs": epochs, "batch_size": batch_size, "step_size": step_size,
            "seed": seed, "train_images": len(train_sc),
            "holdout_images": len(hold_sc),
            "epoch_losses": [float(x) for x in epoch_losses],
        }
        if ratios:
            meta["holdout_ratio"] = ratios[li]
        bases.append(Eigenbasis(w, layer_id=li + 1, kind="global", meta=meta))
    return bases
