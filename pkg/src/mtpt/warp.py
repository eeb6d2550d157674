"""Learnable affine view augmentation.

Each view owns a 2x3 matrix [[a, b, t_x], [c, d, t_y]] acting on normalized
pixel-center coordinates u_p = -1 + (2p+1)/S. The convention is inverse
warping: the matrix maps an *output* coordinate to the *source* location that
is then sampled bilinearly, so a diagonal below 1 reads as a zoomed-in crop.
Samples falling outside [-1, 1] contribute zero (zero padding). Both
conventions (interpolation scheme and padding) are artifact choices; see the
README.

The sampler is one fused autodiff primitive with an analytic
vector-Jacobian product for both the image and all six affine entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_GAMMA_RANGE = (0.0, math.pi / 6.0)
DEFAULT_SCALE_RANGE = (0.2, 1.0)
DEFAULT_RATIO_RANGE = (3.0 / 4.0, 4.0 / 3.0)
_CROP_ATTEMPTS = 10


@dataclass
class AffineBatch:
    """A batch of per-view affine matrices, shape (N, 2, 3)."""

    params: np.ndarray
    role: str = "K"

    def __post_init__(self) -> None:
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.ndim != 3 or self.params.shape[1:] != (2, 3):
            raise ValueError(f"affine batch must have shape (N, 2, 3), got {self.params.shape}")
        if self.params.shape[0] < 1:
            raise ValueError("affine batch needs at least one view")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("affine batch contains non-finite entries")

    @property
    def n(self) -> int:
        return self.params.shape[0]

    @classmethod
    def identity(cls, n: int, role: str = "K") -> "AffineBatch":
        eye = np.zeros((n, 2, 3), dtype=np.float64)
        eye[:, 0, 0] = 1.0
        eye[:, 1, 1] = 1.0
        return cls(eye, role)

    def copy(self) -> "AffineBatch":
        return AffineBatch(self.params.copy(), self.role)


def init_phi_V(rng: np.random.Generator, n: int, gamma_range=DEFAULT_GAMMA_RANGE) -> AffineBatch:
    """Rotation-initialized batch: view i rotates by gamma_i ~ U(gamma_range)."""
    if n < 1:
        raise ValueError("view count must be >= 1")
    lo, hi = gamma_range
    if not (-math.pi < lo <= hi < math.pi):
        raise ValueError(f"gamma range must lie inside (-pi, pi), got {gamma_range}")
    gammas = rng.uniform(lo, hi, size=n)
    params = np.zeros((n, 2, 3), dtype=np.float64)
    params[:, 0, 0] = np.cos(gammas)
    params[:, 0, 1] = -np.sin(gammas)
    params[:, 1, 0] = np.sin(gammas)
    params[:, 1, 1] = np.cos(gammas)
    return AffineBatch(params, role="V")


def init_phi_K(
    rng: np.random.Generator,
    n: int,
    scale_range=DEFAULT_SCALE_RANGE,
    ratio_range=DEFAULT_RATIO_RANGE,
    width: int = 32,
    height: int = 32,
) -> AffineBatch:
    """Resize-crop-flip-initialized batch.

    Per view: sample flip in {-1, +1}, then up to 10 (scale, ratio) draws
    looking for a crop w x h fitting inside the image; on success place the
    crop origin uniformly, else fall back to the full-image center crop. The
    diagonal holds (flip * w / width, h / height); translations move the view
    center onto the crop center in normalized coordinates.
    """
    if n < 1:
        raise ValueError("view count must be >= 1")
    params = np.zeros((n, 2, 3), dtype=np.float64)
    for k in range(n):
        flip = -1.0 if rng.random() < 0.5 else 1.0
        w = h = None
        for _ in range(_CROP_ATTEMPTS):
            s = rng.uniform(*scale_range)
            ratio = rng.uniform(*ratio_range)
            target_area = s * width * height
            w_try = math.sqrt(target_area * ratio)
            h_try = math.sqrt(target_area / ratio)
            if w_try <= width and h_try <= height:
                w, h = w_try, h_try
                break
        if w is None:
            w, h = float(width), float(height)
            i = j = 0.0
        else:
            i = rng.uniform(0.0, height - h)
            j = rng.uniform(0.0, width - w)
        params[k, 0, 0] = flip * w / width
        params[k, 1, 1] = h / height
        params[k, 0, 2] = (2.0 * j + w) / width - 1.0
        params[k, 1, 2] = (2.0 * i + h) / height - 1.0
    return AffineBatch(params, role="K")


def ema_update(phi_V: AffineBatch, phi_K: AffineBatch, alpha: float) -> None:
    """phi_V <- alpha * phi_V + (1 - alpha) * phi_K, in place."""
    if phi_V.params.shape != phi_K.params.shape:
        raise ValueError(
            f"EMA shape mismatch: {phi_V.params.shape} vs {phi_K.params.shape}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"EMA momentum must be in [0, 1], got {alpha}")
    phi_V.params *= alpha
    phi_V.params += (1.0 - alpha) * phi_K.params


def _centers(s: int) -> np.ndarray:
    return -1.0 + (2.0 * np.arange(s) + 1.0) / s


def warp_image(image, phis) -> Tensor:
    """Warp one C x S x S image into N views, differentiably.

    `image` may be a Tensor or array; `phis` a Tensor, array, or AffineBatch.
    Returns an (N, C, S, S) Tensor.
    """
    img_t = image if isinstance(image, Tensor) else Tensor(image)
    if isinstance(phis, AffineBatch):
        phi_t = Tensor(phis.params)
    elif isinstance(phis, Tensor):
        phi_t = phis
    else:
        phi_t = Tensor(phis)

    img = img_t.data
    phi = phi_t.data
    if img.ndim != 3 or img.shape[1] != img.shape[2]:
        raise ad.ShapeMismatch("warp", img.shape)
    if phi.ndim != 3 or phi.shape[1:] != (2, 3):
        raise ad.ShapeMismatch("warp", phi.shape)
    c, s, _ = img.shape
    if s < 4:
        raise ValueError(f"image side must be >= 4, got {s}")
    n = phi.shape[0]

    u = _centers(s)  # x coordinate, varies along columns
    v = _centers(s)  # y coordinate, varies along rows
    # source coords per view/pixel: (N, S_rows, S_cols)
    xs = phi[:, 0, 0, None, None] * u[None, None, :] + phi[:, 0, 1, None, None] * v[None, :, None] + phi[:, 0, 2, None, None]
    ys = phi[:, 1, 0, None, None] * u[None, None, :] + phi[:, 1, 1, None, None] * v[None, :, None] + phi[:, 1, 2, None, None]
    fx = (xs + 1.0) * s / 2.0 - 0.5
    fy = (ys + 1.0) * s / 2.0 - 0.5

    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    wx = fx - x0
    wy = fy - y0
    x1 = x0 + 1
    y1 = y0 + 1

    def tap(xi, yj):
        valid = (xi >= 0) & (xi < s) & (yj >= 0) & (yj < s)
        xi_c = np.clip(xi, 0, s - 1)
        yj_c = np.clip(yj, 0, s - 1)
        vals = img[:, yj_c, xi_c]  # (C, N, S, S)
        vals = vals * valid[None]
        return np.moveaxis(vals, 0, 1)  # (N, C, S, S)

    t00 = tap(x0, y0)
    t10 = tap(x1, y0)
    t01 = tap(x0, y1)
    t11 = tap(x1, y1)

    wxb = wx[:, None]  # (N, 1, S, S)
    wyb = wy[:, None]
    out = (
        (1.0 - wxb) * (1.0 - wyb) * t00
        + wxb * (1.0 - wyb) * t10
        + (1.0 - wxb) * wyb * t01
        + wxb * wyb * t11
    )

    def vjp(g):
        g_img = None
        g_phi = None
        if img_t.requires_grad:
            g_img = np.zeros_like(img)
            weights = (
                ((1.0 - wxb) * (1.0 - wyb), x0, y0),
                (wxb * (1.0 - wyb), x1, y0),
                ((1.0 - wxb) * wyb, x0, y1),
                (wxb * wyb, x1, y1),
            )
            for w8, xi, yj in weights:
                valid = (xi >= 0) & (xi < s) & (yj >= 0) & (yj < s)
                xi_c = np.clip(xi, 0, s - 1)
                yj_c = np.clip(yj, 0, s - 1)
                contrib = g * w8 * valid[:, None]
                for ch in range(c):
                    np.add.at(g_img[ch], (yj_c, xi_c), contrib[:, ch])
        if phi_t.requires_grad:
            d_wx = (1.0 - wyb) * (t10 - t00) + wyb * (t11 - t01)
            d_wy = (1.0 - wxb) * (t01 - t00) + wxb * (t11 - t10)
            gx = (g * d_wx).sum(axis=1) * (s / 2.0)  # (N, S, S), d/d fx
            gy = (g * d_wy).sum(axis=1) * (s / 2.0)
            g_phi = np.empty_like(phi)
            g_phi[:, 0, 0] = np.einsum("nrp,p->n", gx, u)
            g_phi[:, 0, 1] = np.einsum("nrp,r->n", gx, v)
            g_phi[:, 0, 2] = gx.sum(axis=(1, 2))
            g_phi[:, 1, 0] = np.einsum("nrp,p->n", gy, u)
            g_phi[:, 1, 1] = np.einsum("nrp,r->n", gy, v)
            g_phi[:, 1, 2] = gy.sum(axis=(1, 2))
        return g_img, g_phi

    return ad.custom_op("warp", (img_t, phi_t), out, vjp)
