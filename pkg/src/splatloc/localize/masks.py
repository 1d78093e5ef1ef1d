"""Pixel selection for photometric refinement: edges, keypoint boxes and rendered coverage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
# 3x3 Scharr derivative along x (columns); transpose for y
SCHARR_X = np.array([[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]]) / 32.0

HARRIS_K = 0.04
HARRIS_SIGMA = 1.0
NMS_RADIUS = 4
HARRIS_REL_THRESHOLD = 0.01


@dataclass(frozen=True)
class MaskConfig:
    tau_grad: float = 1.0    # Scharr magnitude on a 0..255 gray scale
    tau_fea: int = 10        # half-width of the box around each keypoint, pixels
    tau_occ: float = 0.99
    max_keypoints: int = 500

    def __post_init__(self):
        if self.tau_fea < 0:
            raise ValueError("tau_fea must be >= 0")
        if not 0.0 < self.tau_occ < 1.0:
            raise ValueError("tau_occ must lie in (0, 1)")


def to_gray255(image):
    """0..255 luminance of an RGB image in [0, 1]; 2-D input is taken as gray in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img @ GRAY_WEIGHTS
    return img * 255.0


def scharr_magnitude(image):
    g = to_gray255(image)
    gx = ndimage.correlate(g, SCHARR_X, mode="nearest")
    gy = ndimage.correlate(g, SCHARR_X.T, mode="nearest")
    return np.hypot(gx, gy)


def scharr_gradient_mask(image, tau_grad=1.0):
    return scharr_magnitude(image) > tau_grad


def harris_response(image):
    g = to_gray255(image)
    ix = ndimage.sobel(g, axis=1, mode="nearest")
    iy = ndimage.sobel(g, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(ix * ix, HARRIS_SIGMA, mode="nearest")
    syy = ndimage.gaussian_filter(iy * iy, HARRIS_SIGMA, mode="nearest")
    sxy = ndimage.gaussian_filter(ix * iy, HARRIS_SIGMA, mode="nearest")
    return sxx * syy - sxy * sxy - HARRIS_K * (sxx + syy) ** 2


def detect_keypoints(image, max_count=500):
    """Harris corners as an (N, 2) array of ``(x, y)`` pixel coordinates, strongest first.

    Candidates must be local maxima within ``NMS_RADIUS`` and exceed 1% of the
    strongest response. Equal responses are ordered by row, then column.
    """
    R = harris_response(image)
    peak = R.max() if R.size else 0.0
    if not peak > 0:
        return np.zeros((0, 2))
    size = 2 * NMS_RADIUS + 1
    cand = (R == ndimage.maximum_filter(R, size=size, mode="nearest")) & (R > HARRIS_REL_THRESHOLD * peak)
    rows, cols = np.nonzero(cand)
    order = np.lexsort((cols, rows, -R[rows, cols]))
    rows, cols = rows[order], cols[order]
    # plateaus give several equal maxima; keep the first of any cluster
    taken = np.zeros(R.shape, dtype=bool)
    out = []
    for r, c in zip(rows, cols):
        if taken[r, c]:
            continue
        out.append((c, r))
        taken[max(r - NMS_RADIUS, 0):r + NMS_RADIUS + 1, max(c - NMS_RADIUS, 0):c + NMS_RADIUS + 1] = True
        if len(out) >= max_count:
            break
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def feature_mask(keypoints, tau_fea, H, W):
    """Union of ``(2*tau_fea + 1)``-wide boxes centered on the keypoints, clipped to the image."""
    m = np.zeros((H, W), dtype=bool)
    t = int(tau_fea)
    for x, y in np.asarray(keypoints, dtype=np.float64).reshape(-1, 2):
        xi, yi = int(round(x)), int(round(y))
        r0, r1 = max(yi - t, 0), min(yi + t + 1, H)
        c0, c1 = max(xi - t, 0), min(xi + t + 1, W)
        if r0 < r1 and c0 < c1:
            m[r0:r1, c0:c1] = True
    return m


def occupancy_mask(O, tau_occ=0.99):
    return np.asarray(O) > tau_occ


def combine_masks(grad, fea, occ):
    grad, fea, occ = (np.asarray(m, dtype=bool) for m in (grad, fea, occ))
    if not (grad.shape == fea.shape == occ.shape):
        raise ValueError(f"mask shapes differ: {grad.shape}, {fea.shape}, {occ.shape}")
    return (grad | fea) & occ


def photometric_residual(C, C_ref, a=0.0, b=0.0):
    """Per-pixel sum over channels of ``|exp(a) * C + b - C_ref|``."""
    return np.abs(np.exp(a) * np.asarray(C) + b - np.asarray(C_ref)).sum(axis=-1)


def geometric_residual(D, D_ref):
    D_ref = np.asarray(D_ref)
    return np.where(D_ref > 0, np.abs(np.asarray(D) - D_ref), 0.0)
