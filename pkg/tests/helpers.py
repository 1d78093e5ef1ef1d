import numpy as np

from splatloc.geom import CameraIntrinsics, Pose, Rotation
from splatloc.splat import GaussianMap, logit


def smooth_scene(seed, n=60, size=64, extent=0.8, depth=3.0, sigma=(0.08, 0.25)):
    """Random Gaussians in front of a camera at the origin looking down +z.

    Returns (map, pose, intrinsics). Opacities stay below the clamp and scales
    are large enough that footprints are smooth at this resolution.
    """
    rng = np.random.default_rng(seed)
    means = np.column_stack([rng.uniform(-extent, extent, (n, 2)), rng.uniform(depth - 0.7, depth + 0.7, n)])
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    ls = np.log(rng.uniform(*sigma, (n, 3)))
    op = logit(rng.uniform(0.3, 0.8, n))
    col = rng.uniform(0.05, 0.95, (n, 3))
    gmap = GaussianMap(means, q, ls, op, col, scene_scale=depth)
    K = CameraIntrinsics.from_fov(size, size, 50.0)
    return gmap, Pose.identity(), K


def nudged(pose, rng, rot=0.02, trans=0.05):
    return Pose(Rotation.from_rotvec(rng.uniform(-rot, rot, 3)) * pose.rotation,
                pose.translation + rng.uniform(-trans, trans, 3))


def central_difference(f, h, rel=1e-4):
    """Central difference of ``f`` at 0, or None if a jump (cull or cutoff change) lies within the step.

    A jump inside +-h shows up as disagreement between steps h and h/2.
    """
    d1 = (f(h) - f(-h)) / (2 * h)
    d2 = (f(h / 2) - f(-h / 2)) / h
    if abs(d1 - d2) > rel * max(abs(d1), abs(d2)) + 1e-9:
        return None
    return d2


def smooth_central_difference(f, steps=(1e-5, 3e-6, 1e-6, 3e-5)):
    for h in steps:
        d = central_difference(f, h)
        if d is not None:
            return d
    raise AssertionError("no discontinuity-free step found")


PNP_K = CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


def pnp_problem(seed, n=100, outlier_frac=0.3, noise_px=1.0, K=PNP_K):
    """Synthetic 2D-3D correspondences seen by a random camera.

    Returns (pixels, points, true pose, is_outlier). Points lie 2 to 6 units
    in front of the camera and inside the image; outliers get random pixels.
    """
    rng = np.random.default_rng(seed)
    pose = Pose(Rotation.from_rotvec(rng.normal(0, 1.0, 3)), rng.uniform(-1, 1, 3))
    z = rng.uniform(2, 6, n)
    u = rng.uniform(0, K.width - 1, n)
    v = rng.uniform(0, K.height - 1, n)
    Xc = np.column_stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])
    Xw = (Xc - pose.translation) @ pose.R
    pix = np.column_stack([u, v]) + rng.normal(0, noise_px, (n, 2)) if noise_px else np.column_stack([u, v])
    out = np.zeros(n, dtype=bool)
    out[rng.permutation(n)[:int(round(outlier_frac * n))]] = True
    pix[out] = np.column_stack([rng.uniform(0, K.width - 1, out.sum()), rng.uniform(0, K.height - 1, out.sum())])
    return pix, Xw, pose, out
