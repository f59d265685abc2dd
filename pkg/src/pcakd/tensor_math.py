"""Dense numeric kernels every other module is built on.

Conventions: images and activations are float32 arrays of shape
(batch, channels, height, width); feature matrices are 2-D. Tensors are
stored in 32-bit floats while statistics, eigensolves, and loss reductions
accumulate in 64-bit floats. Kernels are pure functions; any NaN or Inf in
a kernel output is a hard error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, NumericalError, ShapeError

DTYPE = np.float32

# Relative threshold below which off-diagonal mass counts as annihilated.
JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100


def check_finite(name: str, *arrays: np.ndarray) -> None:
    """Raise NumericalError if any of the arrays contains NaN or Inf."""
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericalError(f"{name}: non-finite values detected")


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


# ---------------------------------------------------------------------------
# symmetric eigendecomposition (cyclic Jacobi rotations)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SymEigResult:
    """Eigendecomposition of a symmetric matrix.

    eigenvalues: (C,) float64, sorted descending.
    eigenvectors: (C, C) float64, column j pairs with eigenvalues[j].
    Columns are orthonormal and sign-fixed so that the entry of largest
    magnitude in each eigenvector is positive.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _jacobi_rotate(a: np.ndarray, v: np.ndarray, p: int, q: int) -> None:
    """Annihilate a[p, q] with one Jacobi rotation, updating a and v in place."""
    apq = a[p, q]
    app = a[p, p]
    aqq = a[q, q]
    theta = (aqq - app) / (2.0 * apq)
    # Smaller-magnitude root keeps the rotation angle below 45 degrees.
    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
    c = 1.0 / math.sqrt(t * t + 1.0)
    s = t * c

    colp = a[:, p].copy()
    colq = a[:, q].copy()
    a[:, p] = c * colp - s * colq
    a[:, q] = s * colp + c * colq
    rowp = a[p, :].copy()
    rowq = a[q, :].copy()
    a[p, :] = c * rowp - s * rowq
    a[q, :] = s * rowp + c * rowq
    # Exact annihilation of the target entry; the closed form for the new
    # diagonal avoids the cancellation in the generic row/col update.
    a[p, p] = app - t * apq
    a[q, q] = aqq + t * apq
    a[p, q] = 0.0
    a[q, p] = 0.0

    vp = v[:, p].copy()
    vq = v[:, q].copy()
    v[:, p] = c * vp - s * vq
    v[:, q] = s * vp + c * vq


def sym_eig(a, max_sweeps: int = JACOBI_MAX_SWEEPS) -> SymEigResult:
    """Full eigendecomposition of a symmetric matrix via cyclic Jacobi sweeps.

    Args:
        a: (C, C) symmetric matrix (asymmetry beyond 1e-6 max-abs is an error).
        max_sweeps: sweep budget before ConvergenceError.

    Returns:
        SymEigResult with descending eigenvalues and matching columns.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"sym_eig expects a square matrix, got {a.shape}")
    check_finite("sym_eig input", a)
    n = a.shape[0]
    if np.abs(a - a.T).max(initial=0.0) > 1e-6:
        raise NumericalError("sym_eig: input is not symmetric within 1e-6")
    a = 0.5 * (a + a.T)

    v = np.eye(n)
    if n == 1:
        return SymEigResult(a[0, 0].reshape(1).copy(), v)

    fro = float(np.linalg.norm(a))
    thresh = JACOBI_TOL * fro
    if fro == 0.0:
        return SymEigResult(np.zeros(n), v)

    iu = np.triu_indices(n, k=1)
    converged = False
    for _ in range(max_sweeps):
        if np.abs(a[iu]).max() <= thresh:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) > thresh:
                    _jacobi_rotate(a, v, p, q)
    else:
        if np.abs(a[iu]).max() <= thresh:
            converged = True
    if not converged:
        raise ConvergenceError(
            f"sym_eig: no convergence after {max_sweeps} sweeps "
            f"(residual {np.abs(a[iu]).max():.3e}, threshold {thresh:.3e})"
        )

    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = v[:, order]
    # Deterministic sign: largest-magnitude entry of each column is positive.
    peak = np.argmax(np.abs(vecs), axis=0)
    flip = vecs[peak, np.arange(n)] < 0
    vecs[:, flip] *= -1.0
    check_finite("sym_eig", vals, vecs)
    return SymEigResult(vals, vecs)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _same_padding(kh: int, kw: int) -> int:
    if kh != kw or kh % 2 == 0:
        raise ShapeError("default 'same' padding requires odd square kernels")
    return (kh - 1) // 2


def _conv_geometry(x_shape, w_shape, stride: int, padding: int):
    b, cin, h, w = x_shape
    cout, cin_w, kh, kw = w_shape
    if cin != cin_w:
        raise ShapeError(f"conv: input has {cin} channels, kernel expects {cin_w}")
    if stride < 1:
        raise ShapeError("conv: stride must be >= 1")
    if padding < 0:
        raise ShapeError("conv: padding must be >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError("conv: kernel larger than padded input")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return ho, wo


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Unfold (B, C, H, W) into (B, C*kh*kw, Ho*Wo) patch columns."""
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    b, c, h, w = x.shape
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def conv_layer_forward(x, weights, bias, stride: int = 1, padding: int | None = None):
    """2-D cross-correlation with bias.

    Args:
        x: (B, Cin, H, W) float32.
        weights: (Cout, Cin, kh, kw) float32.
        bias: (Cout,) float32.
        stride: positive step between output positions.
        padding: zero-padding on each side; None means 'same' for odd kernels
            at stride 1.

    Returns:
        (B, Cout, Ho, Wo) with Ho = floor((H + 2p - kh) / stride) + 1.
    """
    x = as_f32(x)
    w = as_f32(weights)
    b = as_f32(bias)
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1 or b.shape[0] != w.shape[0]:
        raise ShapeError(
            f"conv: bad shapes x={x.shape} w={w.shape} bias={b.shape}"
        )
    if padding is None:
        padding = _same_padding(w.shape[2], w.shape[3])
    ho, wo = _conv_geometry(x.shape, w.shape, stride, padding)
    cols = _im2col(x, w.shape[2], w.shape[3], stride, padding)
    out = np.matmul(w.reshape(w.shape[0], -1), cols)
    out += b[:, None]
    out = out.reshape(x.shape[0], w.shape[0], ho, wo)
    check_finite("conv_layer_forward", out)
    return out


def conv_layer_backward(x, weights, upstream_grad, stride: int = 1,
                        padding: int | None = None):
    """Gradients of a conv layer w.r.t. input, weights, and bias.

    upstream_grad has the forward output's shape. Returns (grad_x, grad_w,
    grad_b) with the shapes of x, weights, and bias.
    """
    x = as_f32(x)
    w = as_f32(weights)
    gy = as_f32(upstream_grad)
    if padding is None:
        padding = _same_padding(w.shape[2], w.shape[3])
    ho, wo = _conv_geometry(x.shape, w.shape, stride, padding)
    bsz, cout = gy.shape[0], gy.shape[1]
    if gy.shape != (bsz, w.shape[0], ho, wo) or bsz != x.shape[0]:
        raise ShapeError(f"conv backward: upstream grad shape {gy.shape} "
                         f"does not match output {(x.shape[0], w.shape[0], ho, wo)}")
    kh, kw = w.shape[2], w.shape[3]
    cols = _im2col(x, kh, kw, stride, padding)
    g = gy.reshape(bsz, cout, ho * wo)

    grad_b = g.sum(axis=(0, 2), dtype=np.float64).astype(DTYPE)
    grad_w = np.einsum("bop,bkp->ok", g, cols).reshape(w.shape).astype(DTYPE)
    gx = conv_input_grad(w, gy, x.shape, stride, padding)
    check_finite("conv_layer_backward", grad_w, grad_b)
    return gx, grad_w, grad_b


def conv_input_grad(weights, upstream_grad, x_shape, stride: int = 1,
                    padding: int | None = None):
    """Input gradient alone, for backprop through frozen layers.

    Matches conv_layer_backward's grad_x without building patch columns of
    the forward input.
    """
    w = as_f32(weights)
    gy = as_f32(upstream_grad)
    if padding is None:
        padding = _same_padding(w.shape[2], w.shape[3])
    ho, wo = _conv_geometry(x_shape, w.shape, stride, padding)
    bsz, cout = gy.shape[0], gy.shape[1]
    if gy.shape != (x_shape[0], w.shape[0], ho, wo):
        raise ShapeError(f"conv input grad: upstream grad shape {gy.shape} "
                         f"does not match output {(x_shape[0], w.shape[0], ho, wo)}")
    kh, kw = w.shape[2], w.shape[3]
    g = gy.reshape(bsz, cout, ho * wo)
    grad_cols = np.matmul(w.reshape(cout, -1).T, g)
    grad_cols = grad_cols.reshape(bsz, x_shape[1], kh, kw, ho, wo)
    hp, wp = x_shape[2] + 2 * padding, x_shape[3] + 2 * padding
    gx_pad = np.zeros((bsz, x_shape[1], hp, wp), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            gx_pad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                grad_cols[:, :, i, j]
    if padding > 0:
        gx = gx_pad[:, :, padding:-padding, padding:-padding]
    else:
        gx = gx_pad
    gx = np.ascontiguousarray(gx)
    check_finite("conv_input_grad", gx)
    return gx


# ---------------------------------------------------------------------------
# activation
# ---------------------------------------------------------------------------


def relu_forward(x):
    x = as_f32(x)
    out = np.maximum(x, 0.0)
    check_finite("relu_forward", out)
    return out


def relu_backward(x, upstream_grad):
    """Subgradient at zero is zero."""
    x = as_f32(x)
    gy = as_f32(upstream_grad)
    if x.shape != gy.shape:
        raise ShapeError("relu backward: shape mismatch")
    gx = np.where(x > 0.0, gy, np.float32(0.0))
    check_finite("relu_backward", gx)
    return gx


# ---------------------------------------------------------------------------
# 2x2 max pooling with index memo
# ---------------------------------------------------------------------------


def _replicate_pad_to_even(x: np.ndarray):
    """Edge-replicate odd spatial extents to even ones."""
    b, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return x, ph, pw


def pool_forward(x):
    """2x2 max pooling with stride 2.

    Odd extents are edge-replicated before pooling. Ties resolve to the
    first maximal index in row-major order within each window.

    Returns:
        (out, memo) where out is (B, C, ceil(H/2), ceil(W/2)) and memo carries
        the winning indices for pool_backward.
    """
    x = as_f32(x)
    if x.ndim != 4:
        raise ShapeError(f"pool expects (B, C, H, W), got {x.shape}")
    orig_shape = x.shape
    xp, ph, pw = _replicate_pad_to_even(x)
    b, c, h2, w2 = xp.shape
    win = xp.reshape(b, c, h2 // 2, 2, w2 // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h2 // 2, w2 // 2, 4)
    idx = np.argmax(win, axis=-1)  # first max wins, row-major window order
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)
    check_finite("pool_forward", out)
    memo = (idx, orig_shape, (ph, pw))
    return out, memo


def pool_backward(memo, upstream_grad):
    """Route the gradient to each window's winning position."""
    idx, orig_shape, (ph, pw) = memo
    gy = as_f32(upstream_grad)
    b, c, h, w = orig_shape
    h2, w2 = h + ph, w + pw
    if gy.shape != (b, c, h2 // 2, w2 // 2):
        raise ShapeError(f"pool backward: upstream grad shape {gy.shape} "
                         f"does not match pooled output")
    flat = np.zeros((b, c, h2 // 2, w2 // 2, 4), dtype=DTYPE)
    np.put_along_axis(flat, idx[..., None], gy[..., None], axis=-1)
    gp = flat.reshape(b, c, h2 // 2, w2 // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    gp = gp.reshape(b, c, h2, w2)
    gx = gp[:, :, :h, :w].copy()
    # Replicated cells are copies of edge cells; fold their gradient back.
    if ph:
        gx[:, :, h - 1, :] += gp[:, :, h, :w]
    if pw:
        gx[:, :, :, w - 1] += gp[:, :, :h, w]
    if ph and pw:
        gx[:, :, h - 1, w - 1] += gp[:, :, h, w]
    check_finite("pool_backward", gx)
    return gx


# ---------------------------------------------------------------------------
# nearest-neighbor upsampling
# ---------------------------------------------------------------------------


def upsample_nearest(x, factor: int = 2):
    x = as_f32(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample expects (B, C, H, W), got {x.shape}")
    if factor < 1:
        raise ShapeError("upsample factor must be >= 1")
    out = np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)
    check_finite("upsample_nearest", out)
    return out


def upsample_nearest_backward(upstream_grad, factor: int = 2):
    """Each input cell collects the sum of its replicated cells' gradients."""
    gy = as_f32(upstream_grad)
    b, c, h, w = gy.shape
    if h % factor or w % factor:
        raise ShapeError("upsample backward: extents not divisible by factor")
    gx = gy.reshape(b, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))
    gx = np.ascontiguousarray(gx, dtype=DTYPE)
    check_finite("upsample_nearest_backward", gx)
    return gx
