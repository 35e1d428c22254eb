"""Pinhole camera, rigid transforms and the SO(3) exponential map.

Poses are world-to-camera: ``x_cam = R @ x_world + t``.  Pixel ``(u, v)``
(column, row) has its centre at ``(u + 0.5, v + 0.5)`` in the continuous
image plane, so integer coordinates returned by :func:`project` index pixel
centres directly.

All functions accept numpy arrays or :class:`npnf.ad.Var` handles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from npnf import ad

SMALL_ANGLE = 1e-6
Z_MIN = 1e-4
BORDER_TOL = 1e-6


class NonPositiveDepth(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def centered(cls, width: int, height: int, focal: float) -> "Intrinsics":
        return cls(focal, focal, width / 2.0, height / 2.0, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass
class PoseParam:
    """Axis-angle rotation ``phi`` and translation ``t`` of a world-to-camera pose."""

    phi: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64).reshape(3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "PoseParam":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, v) -> "PoseParam":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.phi, self.t])

    def canonical(self) -> "PoseParam":
        """Re-wrap the rotation vector so that its norm is below pi."""
        return PoseParam(canonical_phi(self.phi), self.t)


class RigidTransform(NamedTuple):
    R: object
    t: object

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        """Transform an (M, 3) array of points."""
        return ad.matmul(points, ad.transpose(self.R)) + self.t

    def inverse(self) -> "RigidTransform":
        Rt = ad.transpose(self.R)
        return RigidTransform(Rt, -ad.reshape(ad.matmul(ad.reshape(self.t, (1, 3)), self.R), (3,)))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        R = ad.matmul(self.R, other.R)
        t = ad.reshape(ad.matmul(self.R, ad.reshape(other.t, (3, 1))), (3,)) + self.t
        return RigidTransform(R, t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = ad.value(self.R)
        m[:3, 3] = ad.value(self.t)
        return m

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = ad.value(self.R)
        return (np.allclose(R.T @ R, np.eye(3), atol=tol)
                and abs(np.linalg.det(R) - 1.0) <= tol)


class Ray(NamedTuple):
    origin: object
    direction: object


def canonical_phi(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    if theta < np.pi:
        return phi.copy()
    axis = phi / theta
    theta = np.mod(theta + np.pi, 2 * np.pi) - np.pi
    return axis * theta


def skew(phi):
    """Cross-product matrix of a 3-vector."""
    x, y, z = phi[0], phi[1], phi[2]
    zero = 0.0 * x
    return ad.reshape(ad.stack([zero, -z, y, z, zero, -x, -y, x, zero]), (3, 3))


def exp_so3(phi):
    """Rodrigues' formula, with a Taylor expansion of the coefficients near zero."""
    theta2 = ad.sum_(phi * phi)
    if float(ad.value(theta2)) < SMALL_ANGLE ** 2:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = ad.sqrt(theta2)
        a = ad.sin(theta) / theta
        b = (1.0 - ad.cos(theta)) / theta2
    K = skew(phi)
    return np.eye(3) + a * K + b * ad.matmul(K, K)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix (numpy only)."""
    R = np.asarray(R, dtype=np.float64)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = 0.5 * np.linalg.norm(w)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if s < 1e-12:
        if c > 0:
            return 0.5 * w
        # rotation by pi: axis from the symmetric part
        B = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(B[k, k])
        return np.pi * axis / np.linalg.norm(axis)
    return theta * w / (2.0 * s)


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle in radians, stable near 0 and pi."""
    R = np.asarray(R, dtype=np.float64)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(w), 0.5 * (np.trace(R) - 1.0)))


def pose_to_transform(p) -> RigidTransform:
    """World-to-camera transform from a :class:`PoseParam` or a 6-vector (phi, t)."""
    if isinstance(p, PoseParam):
        return RigidTransform(exp_so3(p.phi), p.t.copy())
    return RigidTransform(exp_so3(p[0:3]), p[3:6])


def camera_center(T: RigidTransform):
    """World position of the camera: ``-R^T t``."""
    return T.inverse().t


def relative_pose(Ti: RigidTransform, Tj: RigidTransform) -> RigidTransform:
    """``Tj ∘ Ti^-1``: maps camera-i coordinates to camera-j coordinates."""
    return Tj.compose(Ti.inverse())


def pixel_rays(K: Intrinsics, pixels: np.ndarray) -> np.ndarray:
    """Camera-frame rays ``K^-1 (u+0.5, v+0.5, 1)`` with unit z component."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    x = (px[:, 0] + 0.5 - K.cx) / K.fx
    y = (px[:, 1] + 0.5 - K.cy) / K.fy
    return np.stack([x, y, np.ones_like(x)], axis=1)


def backproject(depth, K: Intrinsics, pixels: np.ndarray):
    """Camera-frame points for integer ``pixels`` (M, 2) of a z-depth map.

    ``depth`` is either the (H, W) map itself or the (M,) depths already
    gathered at ``pixels`` (possibly a Var).
    """
    px = np.asarray(pixels).reshape(-1, 2)
    dv = ad.value(depth)
    if dv.ndim == 2:
        d = ad.getitem(depth, (px[:, 1].astype(int), px[:, 0].astype(int)))
    else:
        d = depth
    if np.any(~(ad.value(d) > 0)):
        raise NonPositiveDepth("sampled depth must be positive and finite")
    return ad.reshape(d, (-1, 1)) * pixel_rays(K, px)


def project(points, K: Intrinsics, z_min: float = Z_MIN, margin: float = BORDER_TOL):
    """Continuous pixel coordinates (M, 2) and a visibility mask (M,).

    ``margin`` keeps points that back-project from border pixels visible when
    roundoff lands them a hair outside ``[0, W-1]``.
    """
    pv = ad.value(points)
    z_ok = pv[:, 2] > z_min
    z = ad.where(z_ok, points[:, 2], 1.0)
    u = K.fx * points[:, 0] / z + (K.cx - 0.5)
    v = K.fy * points[:, 1] / z + (K.cy - 0.5)
    uv = ad.stack([u, v], axis=1)
    uvv = ad.value(uv)
    with np.errstate(invalid="ignore"):
        mask = (z_ok & (uvv[:, 0] >= -margin) & (uvv[:, 0] <= K.width - 1 + margin)
                & (uvv[:, 1] >= -margin) & (uvv[:, 1] <= K.height - 1 + margin))
    return uv, mask


def camera_rays(pose, K: Intrinsics, pixels: np.ndarray):
    """World-frame ray origin (3,) and unit directions (M, 3) for ``pixels``."""
    T = pose_to_transform(pose)
    d_cam = pixel_rays(K, pixels)
    d_cam = d_cam / np.linalg.norm(d_cam, axis=1, keepdims=True)
    # rows: R^T d  ==  d @ R
    dirs = ad.matmul(d_cam, T.R)
    return camera_center(T), dirs


def camera_ray(pose, K: Intrinsics, pixel) -> Ray:
    origin, dirs = camera_rays(pose, K, np.asarray(pixel).reshape(1, 2))
    return Ray(origin, dirs[0])


def ray_cosines(K: Intrinsics, pixels: np.ndarray) -> np.ndarray:
    """z component of each pixel's unit ray; converts ray distance to z-depth."""
    r = pixel_rays(K, pixels)
    return 1.0 / np.linalg.norm(r, axis=1)
