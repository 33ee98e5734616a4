"""Small image helpers shared by the VO backends and labelling."""

from __future__ import annotations

import numpy as np


def bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Bilinearly sample img at float pixel coordinates.

    Returns (values, valid): valid requires the 2x2 support inside the image
    and finite corner values. Coordinates use pixel centers at integers.
    """
    h, w = img.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    valid = (u0 >= 0) & (u0 + 1 <= w - 1) & (v0 >= 0) & (v0 + 1 <= h - 1)
    u0c = np.clip(u0, 0, w - 2)
    v0c = np.clip(v0, 0, h - 2)
    fu = u - u0c
    fv = v - v0c
    c00 = img[v0c, u0c]
    c10 = img[v0c, u0c + 1]
    c01 = img[v0c + 1, u0c]
    c11 = img[v0c + 1, u0c + 1]
    vals = (c00 * (1 - fu) + c10 * fu) * (1 - fv) + (c01 * (1 - fu) + c11 * fu) * fv
    valid = valid & np.isfinite(vals)
    return vals, valid


def bilinear_with_gradient(img: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Bilinear sample plus the exact partial derivatives of the interpolant.

    Returns (values, d/du, d/dv, valid). The derivatives are the in-cell
    slopes of the piecewise-bilinear surface, so they are consistent with
    finite differences of `bilinear` away from texel boundaries.
    """
    h, w = img.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    valid = (u0 >= 0) & (u0 + 1 <= w - 1) & (v0 >= 0) & (v0 + 1 <= h - 1)
    u0c = np.clip(u0, 0, w - 2)
    v0c = np.clip(v0, 0, h - 2)
    fu = u - u0c
    fv = v - v0c
    c00 = img[v0c, u0c]
    c10 = img[v0c, u0c + 1]
    c01 = img[v0c + 1, u0c]
    c11 = img[v0c + 1, u0c + 1]
    vals = (c00 * (1 - fu) + c10 * fu) * (1 - fv) + (c01 * (1 - fu) + c11 * fu) * fv
    gu = (c10 - c00) * (1 - fv) + (c11 - c01) * fv
    gv = (c01 - c00) * (1 - fu) + (c11 - c10) * fu
    valid = valid & np.isfinite(vals)
    return vals, gu, gv, valid


def image_gradients(img: np.ndarray):
    """Central-difference gradients (gx, gy); one-sided at the borders."""
    gx = np.empty_like(img)
    gy = np.empty_like(img)
    gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gx[:, 0] = img[:, 1] - img[:, 0]
    gx[:, -1] = img[:, -1] - img[:, -2]
    gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
    gy[0, :] = img[1, :] - img[0, :]
    gy[-1, :] = img[-1, :] - img[-2, :]
    return gx, gy


def box_downsample(img: np.ndarray) -> np.ndarray:
    """2x decimation with a 2x2 box filter (odd trailing row/col dropped)."""
    h, w = img.shape[:2]
    h2, w2 = h // 2, w // 2
    c = img[: 2 * h2, : 2 * w2]
    return 0.25 * (c[0::2, 0::2] + c[0::2, 1::2] + c[1::2, 0::2] + c[1::2, 1::2])


def box_blur(img: np.ndarray, radius: int = 2) -> np.ndarray:
    """Separable box blur with edge clamping (used before BRIEF sampling)."""
    size = 2 * radius + 1
    padded = np.pad(img, radius, mode="edge")
    csum = np.cumsum(padded, axis=0)
    rows = (csum[size - 1 :, :] - np.vstack([np.zeros((1, padded.shape[1])), csum[: -size, :]])) / size
    csum = np.cumsum(rows, axis=1)
    cols = (csum[:, size - 1 :] - np.hstack([np.zeros((rows.shape[0], 1)), csum[:, : -size]])) / size
    return cols
