"""Rotations, rigid/similarity transforms and pinhole projection.

Rotation conventions used throughout the package:

* axis-angle vectors have shape ``(..., 3)``; the canonical form has magnitude
  in ``[0, pi]``.
* 6D rotations have shape ``(..., 6)`` and hold the first two *columns* of a
  rotation matrix, ``[M[:, 0], M[:, 1]]``.
* matrices act on column vectors, ``x_world = R @ x_local``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegenerateConfiguration, DegenerateRotation, InvalidParameter

_SMALL_ANGLE = 1e-8
_MIN_DEPTH = 1e-6


def skew(v):
    """Cross-product matrix, ``skew(a) @ b == np.cross(a, b)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def aa_to_matrix(r):
    """Rodrigues formula, vectorised over leading axes. Zero maps to identity."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)[..., None, None]
    K = skew(r)
    K2 = K @ K
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # Taylor branch keeps the tiny-angle case exact to double precision
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a * K + b * K2


def matrix_to_quat(R):
    """Rotation matrix to unit quaternion ``(w, x, y, z)`` with ``w >= 0`` (Shepperd)."""
    R = np.asarray(R, dtype=float)
    m = R.reshape(-1, 3, 3)
    m00, m11, m22 = m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]
    tr = m00 + m11 + m22
    d21 = m[:, 2, 1] - m[:, 1, 2]
    d02 = m[:, 0, 2] - m[:, 2, 0]
    d10 = m[:, 1, 0] - m[:, 0, 1]
    s01 = m[:, 0, 1] + m[:, 1, 0]
    s02 = m[:, 0, 2] + m[:, 2, 0]
    s12 = m[:, 1, 2] + m[:, 2, 1]
    # four algebraically equivalent branches; pick the best-conditioned one
    cands = np.stack(
        [
            np.stack([1 + tr, d21, d02, d10], axis=1),
            np.stack([d21, 1 + m00 - m11 - m22, s01, s02], axis=1),
            np.stack([d02, s01, 1 - m00 + m11 - m22, s12], axis=1),
            np.stack([d10, s02, s12, 1 - m00 - m11 + m22], axis=1),
        ],
        axis=1,
    )
    choice = np.argmax(np.stack([tr, m00, m11, m22], axis=1), axis=1)
    q = cands[np.arange(len(m)), choice]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1.0
    return q.reshape(R.shape[:-2] + (4,))


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
            2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
            2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def matrix_to_aa(R):
    """Inverse of :func:`aa_to_matrix`; returns the canonical vector (angle in [0, pi])."""
    q = matrix_to_quat(R)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    angle = 2.0 * np.arctan2(s, q[..., 0])
    small = s < 1e-12
    scale = np.where(small, 2.0, angle / np.where(small, 1.0, s))
    return v * scale[..., None]


def canonical_aa(r):
    """Wrap the rotation angle into [0, pi], flipping the axis when needed."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    safe = np.where(theta > 0, theta, 1.0)
    axis = r / safe
    wrapped = np.mod(theta, 2.0 * np.pi)
    flip = wrapped > np.pi
    wrapped = np.where(flip, 2.0 * np.pi - wrapped, wrapped)
    axis = np.where(flip, -axis, axis)
    return np.where(theta > 0, axis * wrapped, 0.0 * r)


def rot6d_to_matrix(r6, tol=1e-9):
    """Gram-Schmidt orthonormalisation of the two stored columns.

    Raises :class:`DegenerateRotation` when the columns are parallel (sine of
    the enclosed angle below ``tol``) or either column vanishes.
    """
    r6 = np.asarray(r6, dtype=float)
    a1 = r6[..., :3]
    a2 = r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1)
    n2 = np.linalg.norm(a2, axis=-1)
    cross = np.linalg.norm(np.cross(a1, a2), axis=-1)
    if np.any(n1 <= 0) or np.any(n2 <= 0) or np.any(cross < tol * n1 * n2):
        raise DegenerateRotation("6D rotation columns are parallel or zero")
    b1 = a1 / n1[..., None]
    b2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    b2 = b2 / np.linalg.norm(b2, axis=-1, keepdims=True)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R):
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def project_to_so3(M):
    """Nearest rotation (Frobenius norm) to a 3x3 matrix."""
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    return U @ D @ Vt


def chordal_mean(rotations, weights=None):
    """Weighted chordal L2 mean: average the matrices, then project onto SO(3)."""
    Rs = np.asarray(rotations, dtype=float).reshape(-1, 3, 3)
    if weights is None:
        weights = np.ones(len(Rs))
    weights = np.asarray(weights, dtype=float)
    M = np.einsum("n,nij->ij", weights, Rs) / weights.sum()
    return project_to_so3(M)


def geodesic_angle(R1, R2):
    """Angle of the relative rotation ``R1^T R2`` in radians."""
    Rrel = np.swapaxes(np.asarray(R1), -1, -2) @ np.asarray(R2)
    c = (np.trace(Rrel, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))


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
            raise InvalidParameter("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise InvalidParameter("principal point must lie inside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, s):
        """Intrinsics of the same camera resampled by factor ``s`` (e.g. 0.25 for heatmaps)."""
        return CameraIntrinsics(
            self.fx * s, self.fy * s, self.cx * s, self.cy * s,
            int(round(self.width * s)), int(round(self.height * s)),
        )

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def project_points(p, k: CameraIntrinsics):
    """Project camera-frame points; returns ``(uv, valid)``.

    Points with ``z <= 1e-6`` are flagged invalid and get ``nan`` coordinates.
    """
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    valid = z > _MIN_DEPTH
    zs = np.where(valid, z, np.nan)
    u = k.fx * p[..., 0] / zs + k.cx
    v = k.fy * p[..., 1] / zs + k.cy
    return np.stack([u, v], axis=-1), valid


def project_pinhole(p, k: CameraIntrinsics):
    uv, valid = project_points(p, k)
    if not np.all(valid):
        raise BehindCamera("point at or behind the camera plane (z <= 1e-6)")
    return uv


def unproject(uv, depth, k: CameraIntrinsics):
    uv = np.asarray(uv, dtype=float)
    depth = np.asarray(depth, dtype=float)
    x = (uv[..., 0] - k.cx) / k.fx * depth
    y = (uv[..., 1] - k.cy) / k.fy * depth
    return np.stack([x, y, depth * np.ones_like(x)], axis=-1)


@dataclass(frozen=True)
class Similarity:
    """``x -> scale * R @ x + t``."""

    scale: float
    R: np.ndarray
    t: np.ndarray

    def apply(self, x):
        return self.scale * np.asarray(x) @ self.R.T + self.t


def procrustes_align(source, target, with_scale=True) -> Similarity:
    """Least-squares similarity (Umeyama) or rigid (Kabsch) alignment of source onto target."""
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise DegenerateConfiguration(f"expected matching (n, 3) point sets, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise DegenerateConfiguration("need at least 3 correspondences")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] == 0 or sv[1] < 1e-9 * sv[0]:
        raise DegenerateConfiguration("source points are collinear")
    H = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(H)
    d = 1.0 if np.linalg.det(U) * np.linalg.det(Vt) > 0 else -1.0
    D = np.diag([1.0, 1.0, d])
    R = U @ D @ Vt
    if with_scale:
        var_s = np.sum(xs**2) / len(src)
        scale = float(np.sum(S * np.diag(D)) / var_s)
    else:
        scale = 1.0
    t = mu_d - scale * R @ mu_s
    return Similarity(scale, R, t)


def rigid_transform(R, t, x):
    return np.asarray(x) @ np.asarray(R).T + np.asarray(t)
