"""Camera pose from 2D-3D correspondences: P3P hypotheses, RANSAC consensus, LM polish."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from ..geom import Pose, Rotation

DEGENERATE_MESSAGE = "degenerate or outlier-dominated input"
MIN_INLIERS = 6


class PnPError(RuntimeError):
    pass


@dataclass
class Correspondences:
    pixels: np.ndarray   # (N, 2) (x, y)
    points: np.ndarray   # (N, 3) world

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.pixels) != len(self.points):
            raise ValueError("pixel and point counts differ")
        if not (np.isfinite(self.pixels).all() and np.isfinite(self.points).all()):
            raise ValueError("correspondences must be finite")

    def __len__(self):
        return len(self.pixels)


def bearings(pixels, K):
    x = (pixels[:, 0] - K.cx) / K.fx
    y = (pixels[:, 1] - K.cy) / K.fy
    b = np.column_stack([x, y, np.ones_like(x)])
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def _kabsch(P, Q):
    """R, t minimizing sum |R P_i + t - Q_i|^2."""
    pc, qc = P.mean(axis=0), Q.mean(axis=0)
    H = (P - pc).T @ (Q - qc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, qc - R @ pc


def p3p(bear, pts):
    """Grunert's solution: up to four ``(R, t)`` world-to-camera candidates.

    ``bear`` are unit bearing vectors (3, 3) and ``pts`` the matching world points.
    """
    p1, p2, p3 = pts
    j1, j2, j3 = bear
    a = np.linalg.norm(p2 - p3)
    b = np.linalg.norm(p1 - p3)
    c = np.linalg.norm(p1 - p2)
    if min(a, b, c) < 1e-12:
        return []
    ca, cb, cg = float(j2 @ j3), float(j1 @ j3), float(j1 @ j2)
    a2, b2, c2 = a * a, b * b, c * c
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca * ca
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca * ca * cb)
    A2 = 2 * (amc * amc - 1 + 2 * amc * amc * cb * cb + 2 * (b2 - c2) / b2 * ca * ca
              - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg * cg)
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg * cg * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg * cg
    coeffs = np.array([A4, A3, A2, A1, A0])
    if not np.isfinite(coeffs).all() or np.abs(coeffs).max() < 1e-300:
        return []
    roots = np.roots(coeffs)
    out = []
    for r in roots:
        if abs(r.imag) > 1e-6 * max(1.0, abs(r.real)):
            continue
        v = r.real
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-12 or v <= 0:
            continue
        u = ((-1 + amc) * v * v - 2 * amc * cb * v + 1 + amc) / den
        if u <= 0:
            continue
        q = 1 + u * u - 2 * u * cg
        if q <= 0:
            continue
        s1 = math.sqrt(c2 / q)
        d = np.array([s1, u * s1, v * s1])
        d = _polish_distances(d, bear, (a, b, c))
        Q = d[:, None] * bear
        R, t = _kabsch(pts, Q)
        out.append((R, t))
    return out


def _polish_distances(d, bear, sides):
    """A few Gauss-Newton steps on the three law-of-cosines equations."""
    a, b, c = sides
    pairs = ((1, 2, a), (0, 2, b), (0, 1, c))
    for _ in range(3):
        F = np.empty(3)
        Jm = np.zeros((3, 3))
        for k, (i, j, L) in enumerate(pairs):
            diff = d[i] * bear[i] - d[j] * bear[j]
            F[k] = diff @ diff - L * L
            Jm[k, i] = 2 * diff @ bear[i]
            Jm[k, j] = -2 * diff @ bear[j]
        try:
            d = d - np.linalg.solve(Jm, F)
        except np.linalg.LinAlgError:
            break
    return d


def reprojection_errors(R, t, pts, pixels, K):
    Xc = pts @ R.T + t
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Xc[:, 0] / z + K.cx
        v = K.fy * Xc[:, 1] / z + K.cy
    e = np.hypot(u - pixels[:, 0], v - pixels[:, 1])
    return np.where(z > 0, e, np.inf)


def _is_degenerate(pts, rel=1e-6):
    if len(pts) < 3:
        return True
    s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    return s[0] <= 0 or s[1] <= rel * s[0]


def _rodrigues(w):
    th = math.sqrt(w @ w)
    W = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if th < 1e-12:
        return np.eye(3) + W
    return np.eye(3) + math.sin(th) / th * W + (1 - math.cos(th)) / th**2 * (W @ W)


def _refine_lm(pose, pts, pixels, K):
    # left update (R, t) -> (exp(w) R, exp(w) t + v); inline to keep the residual cheap
    R0, t0 = pose.R, pose.translation
    Xc0 = pts @ R0.T + t0

    def update(x):
        dR = _rodrigues(x[:3])
        return dR, Xc0 @ dR.T + x[3:]

    def resid(x):
        Xc = update(x)[1]
        return np.concatenate([K.fx * Xc[:, 0] / Xc[:, 2] + K.cx - pixels[:, 0],
                               K.fy * Xc[:, 1] / Xc[:, 2] + K.cy - pixels[:, 1]])

    sol = least_squares(resid, np.zeros(6), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    dR = _rodrigues(sol.x[:3])
    return Pose(Rotation.from_matrix(dR @ R0), dR @ t0 + sol.x[3:])


def pnp_ransac(corr, K, inlier_px=3.0, max_iters=1000, seed=0, confidence=0.9999):
    """Robust pose from correspondences; returns ``(Pose, sorted inlier indices)``.

    Besides the 90% inlier-ratio early exit, sampling stops once the usual
    RANSAC bound says an all-inlier sample has been drawn with ``confidence``.
    """
    n = len(corr)
    if n < 4:
        raise PnPError(f"need at least 4 correspondences, got {n}")
    pts, pix = corr.points, corr.pixels
    if _is_degenerate(pts):
        raise PnPError(DEGENERATE_MESSAGE)
    bear = bearings(pix, K)
    rng = np.random.default_rng(seed)
    best_count, best_R, best_t = 0, None, None
    needed = max_iters
    it = 0
    while it < min(max_iters, needed):
        it += 1
        idx = rng.choice(n, 4, replace=False)
        tri = pts[idx[:3]]
        if np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0])) < 1e-9:
            continue
        cands = p3p(bear[idx[:3]], tri)
        chosen, chosen_err = None, np.inf
        for R, t in cands:
            e4 = reprojection_errors(R, t, pts[idx[3:4]], pix[idx[3:4]], K)[0]
            if e4 < chosen_err:
                chosen, chosen_err = (R, t), e4
        if chosen is None:
            continue
        R, t = chosen
        count = int((reprojection_errors(R, t, pts, pix, K) < inlier_px).sum())
        if count > best_count:
            best_count, best_R, best_t = count, R, t
            w = count / n
            if w > 0.9:
                break
            p_good = w ** 4
            if p_good > 0:
                needed = min(max_iters, int(math.ceil(math.log(1 - confidence)
                                                       / math.log(max(1 - p_good, 1e-300)))))
    if best_R is None or best_count < MIN_INLIERS:
        raise PnPError(DEGENERATE_MESSAGE)
    pose = Pose(Rotation.from_matrix(best_R), best_t)
    inl = np.nonzero(reprojection_errors(pose.R, pose.translation, pts, pix, K) < inlier_px)[0]
    for _ in range(2):
        if len(inl) < MIN_INLIERS or _is_degenerate(pts[inl]):
            raise PnPError(DEGENERATE_MESSAGE)
        pose = _refine_lm(pose, pts[inl], pix[inl], K)
        new = np.nonzero(reprojection_errors(pose.R, pose.translation, pts, pix, K) < inlier_px)[0]
        if np.array_equal(new, inl):
            break
        inl = new
    if len(inl) < MIN_INLIERS:
        raise PnPError(DEGENERATE_MESSAGE)
    return pose, inl
