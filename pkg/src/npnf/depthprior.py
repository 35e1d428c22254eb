"""Pseudo-depth undistortion ``D* = alpha D + beta`` and point-cloud construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from npnf import ad, geom

ALPHA_MIN = 1e-4


class InsufficientValidDepth(ValueError):
    pass


class DegenerateCloud(ValueError):
    pass


@dataclass
class DistortionParam:
    alpha: float = 1.0
    beta: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array([self.alpha, self.beta])


@dataclass
class PointCloud:
    points: object          # (M, 3) array or Var
    pixels: np.ndarray      # (M, 2) source pixels (u, v)
    frame: str = "camera"   # coordinate frame tag, e.g. "camera:3" or "world"

    def __len__(self):
        return len(self.pixels)


def undistort(D, alpha, beta):
    """Elementwise affine correction of a depth map or gathered depth values."""
    return alpha * D + beta


def sample_pixels(width: int, height: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` distinct pixels (u, v) drawn uniformly without replacement."""
    if n > width * height:
        raise ValueError("more points requested than pixels available")
    flat = rng.choice(width * height, size=n, replace=False)
    return np.stack([flat % width, flat // width], axis=1)


def sample_valid_pixels(D: np.ndarray, alpha: float, beta: float, n: int,
                        rng: np.random.Generator, max_attempts: int = 4) -> np.ndarray:
    """``n`` distinct pixels with positive undistorted depth, uniform among those.

    At most ``max_attempts * n`` distinct candidate pixels are examined in a
    random order; the first ``n`` valid ones are kept.
    """
    H, W = D.shape
    if n > W * H:
        raise ValueError("more points requested than pixels available")
    ok = (alpha * D + beta > 0).ravel()
    candidates = rng.choice(W * H, size=min(max_attempts * n, W * H), replace=False)
    flat = candidates[ok[candidates]][:n]
    if len(flat) < n:
        raise InsufficientValidDepth(f"only {len(flat)} of {n} valid depths")
    return np.stack([flat % W, flat // W], axis=1)


def build_cloud(D: np.ndarray, alpha, beta, K: geom.Intrinsics, n_points: int,
                rng: np.random.Generator, frame: str = "camera",
                max_attempts: int = 4) -> PointCloud:
    """Sample pixels with positive undistorted depth and back-project them to camera space."""
    pixels = sample_valid_pixels(D, float(ad.value(alpha)), float(ad.value(beta)), n_points, rng,
                                 max_attempts)
    depth = undistort(D[pixels[:, 1], pixels[:, 0]], alpha, beta)
    return PointCloud(geom.backproject(depth, K, pixels), pixels, frame)


def reference_scale(P) -> float:
    """Mean point norm, as a plain number."""
    pts = P.points if isinstance(P, PointCloud) else P
    return float(np.mean(np.linalg.norm(ad.value(pts), axis=1)))


def normalize_pair(Pi, Pj, scale: float | None = None):
    """Divide both clouds by the mean point norm of ``Pj`` (treated as a constant).

    Accepts point arrays/Vars or :class:`PointCloud` objects; returns the same
    kind plus the scale.  A given ``scale`` is used as is.
    """
    pi = Pi.points if isinstance(Pi, PointCloud) else Pi
    pj = Pj.points if isinstance(Pj, PointCloud) else Pj
    s = reference_scale(pj) if scale is None else float(scale)
    if not s >= 1e-9:
        raise DegenerateCloud("reference cloud has (near) zero extent")
    qi, qj = pi / s, pj / s
    if isinstance(Pi, PointCloud):
        qi = PointCloud(qi, Pi.pixels, Pi.frame)
    if isinstance(Pj, PointCloud):
        qj = PointCloud(qj, Pj.pixels, Pj.frame)
    return qi, qj, s


def cloud_at(D: np.ndarray, alpha, beta, K: geom.Intrinsics, pixels: np.ndarray,
             frame: str = "camera") -> PointCloud:
    """Back-project the undistorted depth at fixed ``pixels`` (differentiable in alpha, beta)."""
    pixels = np.asarray(pixels).reshape(-1, 2)
    depth = undistort(D[pixels[:, 1], pixels[:, 0]], alpha, beta)
    return PointCloud(geom.backproject(depth, K, pixels), pixels, frame)
