"""Vectorized EWA projection of 3D Gaussians and its reverse-mode derivative."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geom import quat_to_matrix
from ..splat import sigmoid

DILATION = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.999
NEAR_FRACTION = 0.01
# the projection Jacobian is evaluated no further out than this multiple of the half field of view
JACOBIAN_FOV_LIMIT = 1.3


@dataclass
class Projection:
    """Visible Gaussians of one view, sorted front to back (depth, then source index)."""

    index: np.ndarray      # (P,) source indices into the map
    means2d: np.ndarray    # (P, 2) pixel coordinates (u = column, v = row)
    cov2d: np.ndarray      # (P, 3) dilated (a, b, c) of [[a, b], [b, c]]
    conics: np.ndarray     # (P, 3) inverse of cov2d, same layout
    depths: np.ndarray     # (P,)
    opacities: np.ndarray  # (P,)
    colors: np.ndarray     # (P, 3)
    radii: np.ndarray      # (P,) pixel radius beyond which alpha < ALPHA_MIN
    # kept for the backward pass
    Xc: np.ndarray
    J: np.ndarray
    cov3d: np.ndarray
    R_prim: np.ndarray
    qnorm: np.ndarray
    clamped: np.ndarray    # (P, 2) whether x/z, y/z were limited when forming J

    def __len__(self):
        return len(self.index)


def cutoff_radius(cov2d, opacities):
    """Radius (pixels) outside which ``alpha' < 1/255`` for every direction."""
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    k = 2.0 * np.log(np.maximum(opacities, 1e-300) / ALPHA_MIN)
    return np.sqrt(np.maximum(k, 0.0) * lam) + 0.01


def project_gaussians(gmap, pose, K, near=None):
    """Cull, project and depth-sort every primitive of ``gmap`` for one camera."""
    if near is None:
        near = NEAR_FRACTION * gmap.scene_scale
    R = pose.R
    Xc_all = gmap.means @ R.T + pose.translation
    opac_all = sigmoid(gmap.opacity_logits)
    keep = np.nonzero((Xc_all[:, 2] > near) & (opac_all > ALPHA_MIN))[0]
    Xc = Xc_all[keep]
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    qn = np.linalg.norm(gmap.quats[keep], axis=1)
    R_prim = quat_to_matrix(gmap.quats[keep])
    S2 = np.exp(2.0 * gmap.log_scales[keep])
    cov3d = np.einsum("nij,nj,nkj->nik", R_prim, S2, R_prim)

    # far off-axis primitives close to the camera plane would otherwise get unbounded footprints
    lim = JACOBIAN_FOV_LIMIT * np.array([0.5 * K.width / K.fx, 0.5 * K.height / K.fy])
    txy = np.stack([x / z, y / z], axis=1)
    clamped = np.abs(txy) > lim
    txy = np.clip(txy, -lim, lim)
    J = np.zeros((len(keep), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * txy[:, 0] / z
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * txy[:, 1] / z
    M = J @ R
    cov = M @ cov3d @ np.transpose(M, (0, 2, 1))
    cov2d = np.stack([cov[:, 0, 0] + DILATION, cov[:, 0, 1], cov[:, 1, 1] + DILATION], axis=1)
    det = cov2d[:, 0] * cov2d[:, 2] - cov2d[:, 1] ** 2
    conics = np.stack([cov2d[:, 2], -cov2d[:, 1], cov2d[:, 0]], axis=1) / det[:, None]
    means2d = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=1)
    opac = opac_all[keep]
    radii = cutoff_radius(cov2d, opac)

    u, v = means2d[:, 0], means2d[:, 1]
    on_image = ((u + radii >= 0) & (u - radii <= K.width - 1)
                & (v + radii >= 0) & (v - radii <= K.height - 1) & (det > 0))
    sel = np.nonzero(on_image)[0]
    sel = sel[np.lexsort((keep[sel], z[sel]))]
    return Projection(
        index=keep[sel], means2d=means2d[sel], cov2d=cov2d[sel], conics=conics[sel],
        depths=z[sel].copy(), opacities=opac[sel], colors=gmap.colors[keep[sel]],
        radii=radii[sel], Xc=Xc[sel], J=J[sel], cov3d=cov3d[sel], R_prim=R_prim[sel],
        qnorm=qn[sel], clamped=clamped[sel],
    )


def _quat_grad(q, G):
    """d loss / d (unit) q given d loss / d R, batched."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = np.empty_like(q)
    g[:, 0] = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0]
                   - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    g[:, 1] = (2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0]
                    - w * G[:, 1, 2] + z * G[:, 2, 0] + w * G[:, 2, 1])
               - 4 * x * (G[:, 1, 1] + G[:, 2, 2]))
    g[:, 2] = (2 * (x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0]
                    + z * G[:, 1, 2] - w * G[:, 2, 0] + z * G[:, 2, 1])
               - 4 * y * (G[:, 0, 0] + G[:, 2, 2]))
    g[:, 3] = (2 * (-w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0]
                    + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
               - 4 * z * (G[:, 0, 0] + G[:, 1, 1]))
    return g


def project_backward(proj, gmap, pose, K, g_means2d, g_conics, g_opac, g_colors, g_depths,
                     want_map=True):
    """Chain per-projection gradients back to the pose twist and primitive parameters.

    ``g_conics`` holds derivatives with respect to the three conic parameters
    (A, B, C) of ``[[A, B], [B, C]]``. Returns ``(d_twist, param_grads)`` where
    ``d_twist`` is ``(d_omega, d_v)`` for a left update ``exp(xi) * T`` and
    ``param_grads`` is a dict of per-primitive arrays for the full map (or None).
    """
    R = pose.R
    Xc, J = proj.Xc, proj.J
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]

    # conic = inv(cov2d): dL/dCov = -Q G_Q Q with full symmetric matrices
    c = proj.conics
    Q = np.empty((len(c), 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = c[:, 0], c[:, 1], c[:, 1], c[:, 2]
    GQ = np.empty_like(Q)
    GQ[:, 0, 0] = g_conics[:, 0]
    GQ[:, 0, 1] = GQ[:, 1, 0] = 0.5 * g_conics[:, 1]
    GQ[:, 1, 1] = g_conics[:, 2]
    Gcov = -Q @ GQ @ Q

    M = J @ R
    Mt = np.transpose(M, (0, 2, 1))
    gM = 2.0 * Gcov @ M @ proj.cov3d
    gJ = gM @ R.T

    fx, fy = K.fx, K.fy
    gX = np.zeros_like(Xc)
    gu, gv = g_means2d[:, 0], g_means2d[:, 1]
    # J[0, 2] = -fx * xj / z^2 with xj = x, or xj = +-lim * z once clamped (then it tracks z only)
    free = ~proj.clamped
    xj = -J[:, 0, 2] * z * z / fx
    yj = -J[:, 1, 2] * z * z / fy
    gX[:, 0] = gu * fx / z - np.where(free[:, 0], gJ[:, 0, 2] * fx / (z * z), 0.0)
    gX[:, 1] = gv * fy / z - np.where(free[:, 1], gJ[:, 1, 2] * fy / (z * z), 0.0)
    gX[:, 2] = (g_depths - gu * fx * x / (z * z) - gv * fy * y / (z * z)
                - gJ[:, 0, 0] * fx / (z * z) - gJ[:, 1, 1] * fy / (z * z)
                + gJ[:, 0, 2] * fx * np.where(free[:, 0], 2 * xj / z**3, xj / z**3)
                + gJ[:, 1, 2] * fy * np.where(free[:, 1], 2 * yj / z**3, yj / z**3))

    # left perturbation: dXc = omega x Xc + v, dR = hat(omega) R
    d_v = gX.sum(axis=0)
    d_omega = np.cross(Xc, gX).sum(axis=0)
    A = np.einsum("nji,njk->ik", J, gM)  # sum_n J^T gM
    P = R @ A.T
    d_omega = d_omega + np.array([P[1, 2] - P[2, 1], P[2, 0] - P[0, 2], P[0, 1] - P[1, 0]])

    param_grads = None
    if want_map:
        n = len(gmap)
        idx = proj.index
        Gc3 = Mt @ Gcov @ M
        s = np.exp(gmap.log_scales[idx])
        L = proj.R_prim * s[:, None, :]
        gL = 2.0 * Gc3 @ L
        g_s = np.einsum("nik,nik->nk", gL, proj.R_prim)
        g_Rp = gL * s[:, None, :]
        qhat = gmap.quats[idx] / proj.qnorm[:, None]
        gq_hat = _quat_grad(qhat, g_Rp)
        gq = (gq_hat - qhat * np.sum(qhat * gq_hat, axis=1, keepdims=True)) / proj.qnorm[:, None]
        o = proj.opacities

        param_grads = {
            "means": np.zeros((n, 3)), "quats": np.zeros((n, 4)),
            "log_scales": np.zeros((n, 3)), "opacity_logits": np.zeros(n),
            "colors": np.zeros((n, 3)), "means2d_norm": np.zeros(n),
            "visible": np.zeros(n, dtype=bool),
        }
        param_grads["means"][idx] = gX @ R
        param_grads["quats"][idx] = gq
        param_grads["log_scales"][idx] = g_s * s
        param_grads["opacity_logits"][idx] = g_opac * o * (1 - o)
        param_grads["colors"][idx] = g_colors
        # screen-space gradient in NDC units, as used by density control
        ndc = g_means2d * np.array([0.5 * K.width, 0.5 * K.height])
        param_grads["means2d_norm"][idx] = np.linalg.norm(ndc, axis=1)
        param_grads["visible"][idx] = True
    return (d_omega, d_v), param_grads
