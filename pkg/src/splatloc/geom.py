"""Rigid-body geometry: quaternions, SE(3) poses, twists, interpolation, pose ordering.

Conventions
-----------
* Quaternions are ``(w, x, y, z)``, unit norm, canonicalized to ``w >= 0``.
* A :class:`Pose` maps world to camera: ``X_cam = R @ X_world + t``. The camera
  looks down ``+z`` with ``x`` right and ``y`` down (image rows).
* Twists are ``(omega, v)`` and are applied on the left: ``exp(xi) * T``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-8


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def hat(w):
    """Skew-symmetric matrix with ``hat(w) @ x == cross(w, x)``."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    """Rotation matrix of a (not necessarily unit) quaternion, normalizing first.

    Works on a single ``(4,)`` quaternion or a stack ``(..., 4)``.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    # Shepperd: branch on the largest diagonal combination for stability.
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return np.array(q)


def so3_exp(omega):
    """Rodrigues' formula, with a second-order series below ``1e-8`` rad."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + (math.sin(theta) / theta) * W + ((1 - math.cos(theta)) / theta**2) * W @ W


def so3_left_jacobian(omega):
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (np.eye(3) + ((1 - math.cos(theta)) / theta**2) * W
            + ((theta - math.sin(theta)) / theta**3) * W @ W)


def so3_left_jacobian_inv(omega):
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    coef = 1.0 / theta**2 - (1 + math.cos(theta)) / (2 * theta * math.sin(theta))
    return np.eye(3) - 0.5 * W + coef * W @ W


@dataclass(frozen=True)
class Rotation:
    """Unit quaternion ``(w, x, y, z)``; renormalized and sign-canonicalized on construction."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("rotation quaternion must be finite and non-zero")
        q = q / n
        # w >= 0; for w == 0 the first non-zero component decides, so q and -q agree
        lead = q[np.flatnonzero(q)[0]]
        if lead < 0:
            q = -q
        object.__setattr__(self, "q", _frozen(q))

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_rotvec(cls, omega):
        omega = np.asarray(omega, dtype=np.float64)
        theta = float(np.linalg.norm(omega))
        if theta < _SMALL_ANGLE:
            return cls(np.concatenate([[1.0], 0.5 * omega]))
        axis = omega / theta
        return cls(np.concatenate([[math.cos(theta / 2)], math.sin(theta / 2) * axis]))

    @classmethod
    def from_axis_angle(cls, axis, angle):
        axis = np.asarray(axis, dtype=np.float64)
        return cls.from_rotvec(axis / np.linalg.norm(axis) * angle)

    @classmethod
    def from_matrix(cls, R):
        return cls(matrix_to_quat(R))

    def as_matrix(self):
        return quat_to_matrix(self.q)

    def as_rotvec(self):
        w = self.q[0]
        v = self.q[1:]
        s = float(np.linalg.norm(v))
        if s < _SMALL_ANGLE:
            return 2.0 * v / w
        angle = 2.0 * math.atan2(s, w)
        return v / s * angle

    def angle(self):
        """Rotation angle in radians, in ``[0, pi]``."""
        return 2.0 * math.asin(min(1.0, float(np.linalg.norm(self.q[1:]))))

    def inverse(self):
        return Rotation(self.q * np.array([1.0, -1.0, -1.0, -1.0]))

    def __mul__(self, other):
        return Rotation(quat_multiply(self.q, other.q))

    def apply(self, x):
        return np.asarray(x, dtype=np.float64) @ self.as_matrix().T

    def __eq__(self, other):
        if not isinstance(other, Rotation):
            return NotImplemented
        return np.array_equal(self.q, other.q)

    def __hash__(self):
        return hash(self.q.tobytes())


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform ``X_c = R X + t``."""

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not isinstance(self.rotation, Rotation):
            object.__setattr__(self, "rotation", Rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls(Rotation.from_matrix(M[:3, :3]), M[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)):
        """Camera at ``eye`` looking at ``target``; image ``y`` points away from ``up``."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(Rotation.from_matrix(R), -R @ eye)

    @property
    def R(self):
        return self.rotation.as_matrix()

    @property
    def t(self):
        return self.translation

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.R.T @ self.translation

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def compose(self, other):
        """``self * other``: apply ``other`` first."""
        rot = self.rotation * other.rotation
        return Pose(rot, self.R @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self):
        inv = self.rotation.inverse()
        return Pose(inv, -(inv.as_matrix() @ self.translation))

    def to_dict(self):
        return {"q": [float(v) for v in self.rotation.q], "t": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, d):
        return cls(Rotation(d["q"]), d["t"])

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))

    def to_text(self):
        """4x4 row-major matrix, one row per line."""
        return "\n".join(" ".join(repr(float(v)) for v in row) for row in self.matrix()) + "\n"

    @classmethod
    def from_text(cls, text):
        M = np.array([[float(v) for v in line.split()] for line in text.strip().splitlines()])
        if M.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {M.shape}")
        return cls.from_matrix(M)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation.q, other.rotation.q)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.q.tobytes(), self.translation.tobytes()))


@dataclass(frozen=True)
class Twist:
    """Tangent increment: ``omega`` (rad, axis-angle) and ``v`` (scene units)."""

    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "omega", _frozen(np.asarray(self.omega, dtype=np.float64).reshape(3)))
        object.__setattr__(self, "v", _frozen(np.asarray(self.v, dtype=np.float64).reshape(3)))

    @classmethod
    def from_vector(cls, xi):
        xi = np.asarray(xi, dtype=np.float64)
        return cls(xi[:3], xi[3:6])

    def as_vector(self):
        return np.concatenate([self.omega, self.v])


def se3_exp(xi):
    if not isinstance(xi, Twist):
        xi = Twist.from_vector(xi)
    if not xi.omega.any() and not xi.v.any():
        return Pose.identity()
    R = so3_exp(xi.omega)
    t = so3_left_jacobian(xi.omega) @ xi.v
    return Pose(Rotation.from_matrix(R), t)


def se3_log(T):
    omega = T.rotation.as_rotvec()
    v = so3_left_jacobian_inv(omega) @ T.translation
    return Twist(omega, v)


def apply_twist(T, xi):
    """Left-multiplicative update ``exp(xi) * T``."""
    return se3_exp(xi).compose(T)


def world_to_camera(T, X):
    X = np.asarray(X, dtype=np.float64)
    return X @ T.R.T + T.translation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @classmethod
    def from_fov(cls, width, height, fov_x_deg):
        f = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, X_cam):
        """Pinhole projection of camera-frame points to ``(u, v)`` pixels (u = column)."""
        X_cam = np.asarray(X_cam, dtype=np.float64)
        z = X_cam[..., 2]
        u = self.fx * X_cam[..., 0] / z + self.cx
        v = self.fy * X_cam[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class PoseError:
    translation_err: float
    rotation_err: float


def slerp(q0, q1, alpha):
    """Shortest-path spherical interpolation between two rotations.

    ``q1`` is sign-flipped when the quaternions lie in opposite hemispheres, so
    inputs that are exactly antipodal (the same rotation) interpolate to that
    rotation. The angle is taken with ``atan2`` of chord lengths, which stays
    accurate for nearly identical inputs; below ``1e-12`` the result is a
    normalized lerp.
    """
    a = q0.q if isinstance(q0, Rotation) else Rotation(q0).q
    b = q1.q if isinstance(q1, Rotation) else Rotation(q1).q
    if np.dot(a, b) < 0:
        b = -b
    theta = 2.0 * math.atan2(np.linalg.norm(a - b), np.linalg.norm(a + b))
    if theta < 1e-12:
        return Rotation(a + alpha * (b - a))
    s = math.sin(theta)
    return Rotation((math.sin((1 - alpha) * theta) / s) * a + (math.sin(alpha * theta) / s) * b)


def pseudo_view_alpha(k, K):
    return (1.0 - math.cos(k * math.pi / (K + 1))) / 2.0


def interpolate_pose_pair(T_i, T_j, K):
    out = []
    for k in range(1, K + 1):
        a = pseudo_view_alpha(k, K)
        t = (1 - a) * T_i.translation + a * T_j.translation
        out.append(Pose(slerp(T_i.rotation, T_j.rotation, a), t))
    return out


def _path_length(D, perm):
    return float(sum(D[perm[i], perm[i + 1]] for i in range(len(perm) - 1)))


def _held_karp_path(D):
    # Open path, free start and end. Strict improvements keep lower-index choices.
    n = len(D)
    full = (1 << n) - 1
    cost = {}
    parent = {}
    for i in range(n):
        cost[(1 << i, i)] = 0.0
        parent[(1 << i, i)] = -1
    for mask in range(1, full + 1):
        for last in range(n):
            key = (mask, last)
            if key not in cost:
                continue
            c = cost[key]
            for nxt in range(n):
                if mask & (1 << nxt):
                    continue
                nk = (mask | (1 << nxt), nxt)
                nc = c + D[last, nxt]
                if nk not in cost or nc < cost[nk]:
                    cost[nk] = nc
                    parent[nk] = last
    best_last = min(range(n), key=lambda i: (cost[(full, i)], i))
    path = []
    mask, last = full, best_last
    while last != -1:
        path.append(last)
        prev = parent[(mask, last)]
        mask &= ~(1 << last)
        last = prev
    return path


def _greedy_two_opt(D, centers):
    n = len(D)
    start = int(np.argmin(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    path = [start]
    left = set(range(n)) - {start}
    while left:
        cur = path[-1]
        nxt = min(left, key=lambda j: (D[cur, j], j))
        path.append(nxt)
        left.remove(nxt)
    improved = True
    while improved:
        improved = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                # reverse path[i..j]; open path so the ends have no outgoing edge
                before = (D[path[i - 1], path[i]] if i > 0 else 0.0) + (D[path[j], path[j + 1]] if j < n - 1 else 0.0)
                after = (D[path[i - 1], path[j]] if i > 0 else 0.0) + (D[path[i], path[j + 1]] if j < n - 1 else 0.0)
                if after < before - 1e-12:
                    path[i:j + 1] = path[i:j + 1][::-1]
                    improved = True
    return path


def order_poses(poses, exact_limit=10):
    """Order poses to (approximately) minimize the open-path translation length.

    Exact (Held-Karp) for up to ``exact_limit`` poses, nearest-neighbour plus
    2-opt above that. Distances are between ``Pose.translation`` vectors.
    """
    n = len(poses)
    if n == 0:
        return []
    if n == 1:
        return [0]
    ts = np.array([p.translation for p in poses])
    D = np.linalg.norm(ts[:, None, :] - ts[None, :, :], axis=-1)
    if n <= exact_limit:
        return _held_karp_path(D)
    return _greedy_two_opt(D, ts)


def path_length(poses, perm):
    ts = np.array([p.translation for p in poses])
    D = np.linalg.norm(ts[:, None, :] - ts[None, :, :], axis=-1)
    return _path_length(D, perm)


def brute_force_order(poses):
    """Exhaustive minimizer over all permutations (reference for small N)."""
    n = len(poses)
    ts = np.array([p.translation for p in poses])
    D = np.linalg.norm(ts[:, None, :] - ts[None, :, :], axis=-1)
    perms = np.array(list(itertools.permutations(range(n))))
    lengths = D[perms[:, :-1], perms[:, 1:]].sum(axis=1) if n > 1 else np.zeros(1)
    best = int(np.argmin(lengths))
    return list(perms[best]), float(lengths[best])


def pose_error(T_est, T_gt):
    """Camera-position distance and geodesic rotation angle (degrees)."""
    t_err = float(np.linalg.norm(T_est.center - T_gt.center))
    q_rel = T_gt.rotation.inverse() * T_est.rotation
    r_err = math.degrees(2.0 * math.asin(min(1.0, float(np.linalg.norm(q_rel.q[1:])))))
    return PoseError(t_err, r_err)
