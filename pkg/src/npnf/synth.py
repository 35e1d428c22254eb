"""Analytic sphere scenes, camera trajectories and oracle renderings.

The oracle is deliberately independent of :mod:`npnf.render`: it looks up
density and colour analytically, integrates with a dense fixed midpoint rule
through a cumulative product, and takes ground-truth depth from the
ray-sphere quadratic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from npnf import geom
from npnf.dataset import Dataset


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: np.ndarray
    density: float
    # low-frequency sinusoidal texture: colour *= 1 - amp + amp * (0.5 + 0.5 sin(freq . x + phase))
    texture_amp: float = 0.0
    texture_freq: np.ndarray = field(default_factory=lambda: np.zeros(3))
    texture_phase: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        self.texture_freq = np.asarray(self.texture_freq, dtype=np.float64)
        if self.radius <= 0 or self.density <= 0:
            raise ValueError("spheres need positive radius and density")

    def color_at(self, x: np.ndarray) -> np.ndarray:
        if self.texture_amp == 0.0:
            return np.broadcast_to(self.color, x.shape[:-1] + (3,))
        s = 0.5 + 0.5 * np.sin(x @ self.texture_freq + self.texture_phase)
        m = 1.0 - self.texture_amp + self.texture_amp * s
        return m[..., None] * self.color

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "radius": self.radius,
                "color": self.color.tolist(), "density": self.density,
                "texture_amp": self.texture_amp, "texture_freq": self.texture_freq.tolist(),
                "texture_phase": self.texture_phase}


@dataclass
class AnalyticScene:
    spheres: list
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bbox: tuple = ((-50.0, -50.0, -90.0), (50.0, 50.0, 50.0))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)
        lo, hi = np.asarray(self.bbox[0]), np.asarray(self.bbox[1])
        for s in self.spheres:
            if np.any(s.center - s.radius < lo) or np.any(s.center + s.radius > hi):
                raise ValueError("sphere outside the scene bounding box")

    def density_color(self, x: np.ndarray):
        """Total density (...,) and density-weighted colour (..., 3) at points x (..., 3)."""
        sigma = np.zeros(x.shape[:-1])
        csum = np.zeros(x.shape[:-1] + (3,))
        for s in self.spheres:
            inside = np.sum((x - s.center) ** 2, axis=-1) < s.radius ** 2
            sigma = sigma + s.density * inside
            csum = csum + (s.density * inside)[..., None] * s.color_at(x)
        safe = np.where(sigma > 0, sigma, 1.0)
        return sigma, csum / safe[..., None]

    def field(self, points, dirs):
        """Renderer-compatible field callable (ignores view direction)."""
        sigma, color = self.density_color(np.asarray(points))
        return color, sigma

    def ray_density_color(self, origin: np.ndarray, dirs: np.ndarray, hs: np.ndarray,
                          bin_width: float | None = None):
        """Density (R, S) and colour (R, S, 3) along rays at depths ``hs``.

        Membership comes from each ray's entry/exit interval per sphere, and
        textures are only evaluated inside a sphere.  With ``bin_width`` each
        sample stands for the bin ``[h - w/2, h + w/2]`` and gets the density
        averaged over it, which makes the optical depth of piecewise-constant
        media exact; otherwise densities are point samples.
        """
        n_r, n_s = len(dirs), len(hs)
        sigma = np.zeros((n_r, n_s))
        csum = np.zeros((n_r, n_s, 3))
        for s in self.spheres:
            oc = origin - s.center
            b = dirs @ oc
            disc = b * b - (oc @ oc - s.radius ** 2)
            sq = np.sqrt(np.maximum(disc, 0.0))
            t0 = np.where(disc > 0, -b - sq, np.inf)[:, None]
            t1 = np.where(disc > 0, -b + sq, -np.inf)[:, None]
            if bin_width is None:
                frac = ((hs[None, :] > t0) & (hs[None, :] < t1)).astype(np.float64)
                r, k = np.nonzero(frac)
                where = hs[k]
            else:
                lo = np.maximum(t0, hs[None, :] - bin_width / 2)
                hi = np.minimum(t1, hs[None, :] + bin_width / 2)
                frac = np.clip(hi - lo, 0.0, None) / bin_width
                r, k = np.nonzero(frac > 0)
                where = 0.5 * (lo[r, k] + hi[r, k])
            if len(r) == 0:
                continue
            pts = origin + dirs[r] * where[:, None]
            sigma[r, k] += s.density * frac[r, k]
            csum[r, k] += (s.density * frac[r, k])[:, None] * s.color_at(pts)
        safe = np.where(sigma > 0, sigma, 1.0)
        return sigma, csum / safe[..., None]

    def first_hit(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Distance to the nearest forward ray-sphere intersection (inf on a miss)."""
        best = np.full(len(dirs), np.inf)
        for s in self.spheres:
            oc = origin - s.center
            b = dirs @ oc
            c = oc @ oc - s.radius ** 2
            disc = b * b - c
            hit = disc >= 0
            sq = np.sqrt(np.where(hit, disc, 0.0))
            t0 = -b - sq
            t1 = -b + sq
            t = np.where(t0 > 0, t0, t1)
            t = np.where(hit & (t > 0), t, np.inf)
            best = np.minimum(best, t)
        return best

    def to_dict(self) -> dict:
        return {"spheres": [s.to_dict() for s in self.spheres],
                "background": self.background.tolist(),
                "bbox": [list(self.bbox[0]), list(self.bbox[1])]}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticScene":
        return cls([Sphere(**s) for s in d["spheres"]], np.asarray(d["background"]),
                   (tuple(d["bbox"][0]), tuple(d["bbox"][1])))


def default_scene(textured: bool = True) -> AnalyticScene:
    """A few coloured spheres in front of a large textured backdrop sphere."""
    amp = 0.6 if textured else 0.0
    spheres = [
        Sphere((0.0, 0.0, 0.0), 0.8, (0.9, 0.3, 0.2), 60.0, amp, (2.1, 1.3, 0.7), 0.3),
        Sphere((1.0, 0.5, 0.6), 0.45, (0.2, 0.8, 0.3), 60.0, amp, (-1.1, 2.4, 1.0), 1.1),
        Sphere((-1.0, -0.4, 0.5), 0.5, (0.25, 0.35, 0.9), 60.0, amp, (1.7, -0.9, 2.2), 2.0),
        Sphere((0.4, -0.7, -0.9), 0.55, (0.9, 0.8, 0.2), 60.0, amp, (0.8, 1.9, -1.4), 0.7),
        # backdrop: surface about 2.5 units behind the origin
        Sphere((0.0, 0.0, -42.5), 40.0, (0.6, 0.6, 0.65), 60.0, 0.7 if textured else 0.0,
               (1.6, 1.1, 0.9), 0.0),
    ]
    return AnalyticScene(spheres, np.zeros(3))


def sphere_only_scene() -> AnalyticScene:
    """Single semi-transparent sphere on black, for renderer oracle checks."""
    return AnalyticScene([Sphere((0.0, 0.0, 0.0), 1.0, (0.8, 0.4, 0.2), 2.0, 0.5,
                                 (2.0, 1.0, 0.5), 0.0)], np.zeros(3))


# ------------------------------------------------------------------ trajectories


@dataclass
class Trajectory:
    kind: str
    poses: list  # of geom.PoseParam, world-to-camera
    max_rotation_deg: float

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def as_array(self) -> np.ndarray:
        return np.stack([p.as_vector() for p in self.poses])

    def centers(self) -> np.ndarray:
        return np.stack([geom.camera_center(geom.pose_to_transform(p)) for p in self.poses])


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> geom.PoseParam:
    """World-to-camera pose with +z forward and image rows increasing against ``up``."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])  # rows: camera axes in world coordinates
    return geom.PoseParam(geom.log_so3(R), -R @ center)


def max_pairwise_rotation(poses) -> float:
    Rs = [geom.exp_so3(p.phi) for p in poses]
    best = 0.0
    for a, b in combinations(Rs, 2):
        best = max(best, geom.rotation_angle(a @ b.T))
    return float(np.degrees(best))


def make_trajectory(kind: str, n_frames: int, radius: float = 4.0, sweep_deg: float = 60.0,
                    height: float = 0.0, step: float = 0.15, jitter_deg: float = 5.0,
                    rise: float = 0.6, seed: int = 0) -> Trajectory:
    """Camera paths around (or towards) the origin.

    ``orbit``: cameras on a horizontal circle looking at the origin, spanning
    ``sweep_deg``.  ``arc``: the same but rising by ``rise`` over the path.
    ``forward``: cameras advancing towards the origin along -z with random
    rotations so that no two frames differ by more than ``jitter_deg``.
    """
    if n_frames < 2:
        raise ValueError("a trajectory needs at least two frames")
    poses = []
    if kind in ("orbit", "arc"):
        angles = np.radians(np.linspace(-sweep_deg / 2, sweep_deg / 2, n_frames))
        ys = np.full(n_frames, height)
        if kind == "arc":
            ys = height + np.linspace(-rise / 2, rise / 2, n_frames)
        for a, y in zip(angles, ys):
            c = np.array([radius * np.sin(a), y, radius * np.cos(a)])
            poses.append(look_at(c, np.zeros(3)))
    elif kind == "forward":
        rng = np.random.default_rng(seed)
        for k in range(n_frames):
            c = np.array([0.0, height, radius - k * step])
            base = look_at(c, np.array([0.0, height, c[2] - 1.0]))
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            ang = np.radians(jitter_deg / 2) * rng.random()
            R = geom.exp_so3(axis * ang) @ geom.exp_so3(base.phi)
            poses.append(geom.PoseParam(geom.log_so3(R), -R @ c))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return Trajectory(kind, poses, max_pairwise_rotation(poses))


# ------------------------------------------------------------------------ oracle


def oracle_render(scene: AnalyticScene, pose, K: geom.Intrinsics, h_near: float = 0.1,
                  h_far: float = 10.0, n_quad: int = 4096, pixels: np.ndarray | None = None,
                  chunk: int = 256):
    """Dense fixed-bin quadrature render with bin-averaged sphere densities.

    Returns ``(image, gt_depth, volumetric_depth)``; depths are ray distances
    unless a full image is rendered, in which case the two depth maps are
    converted to z-depth.  Rays that miss get the background colour through the
    residual transmittance and a ground-truth distance of ``h_far``.
    """
    full = pixels is None
    if full:
        vv, uu = np.mgrid[0:K.height, 0:K.width]
        pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)
    pixels = np.asarray(pixels).reshape(-1, 2)
    T = geom.pose_to_transform(pose)
    R, t = np.asarray(T.R), np.asarray(T.t)
    origin = -R.T @ t
    rays = geom.pixel_rays(K, pixels)
    dirs = (rays / np.linalg.norm(rays, axis=1, keepdims=True)) @ R

    dh = (h_far - h_near) / n_quad
    hs = h_near + (np.arange(n_quad) + 0.5) * dh
    img = np.zeros((len(pixels), 3))
    vdepth = np.zeros(len(pixels))
    for s in range(0, len(pixels), chunk):
        d = dirs[s:s + chunk]
        sigma, color = scene.ray_density_color(origin, d, hs, bin_width=dh)
        seg = np.exp(-sigma * dh)
        trans = np.cumprod(np.concatenate([np.ones((len(d), 1)), seg[:, :-1]], axis=1), axis=1)
        w = trans * (1.0 - seg)
        resid = trans[:, -1] * seg[:, -1]
        img[s:s + chunk] = np.einsum("rk,rkc->rc", w, color) + resid[:, None] * scene.background
        vdepth[s:s + chunk] = w @ hs
    gt = scene.first_hit(origin, dirs)
    gt = np.where(np.isfinite(gt) & (gt <= h_far), gt, h_far)
    if full:
        cosz = geom.ray_cosines(K, pixels)
        return (img.reshape(K.height, K.width, 3), (gt * cosz).reshape(K.height, K.width),
                (vdepth * cosz).reshape(K.height, K.width))
    return img, gt, vdepth


# ----------------------------------------------------------------------- dataset


def distortion_spec(n_frames: int, seed: int = 0, alpha_range=(0.7, 1.4),
                    beta_range=(-0.2, 0.2)) -> np.ndarray:
    """Per-frame (alpha, beta); the last frame is always (1, 0)."""
    rng = np.random.default_rng(seed)
    spec = np.stack([rng.uniform(*alpha_range, n_frames), rng.uniform(*beta_range, n_frames)],
                    axis=1)
    spec[-1] = (1.0, 0.0)
    return spec


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid used by the image files."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def make_dataset(scene: AnalyticScene, trajectory: Trajectory, K: geom.Intrinsics,
                 distortion: np.ndarray | None = None, seed: int = 0, h_near: float = 0.1,
                 h_far: float = 10.0, n_quad: int = 4096) -> Dataset:
    """Render every frame and inject the affine pseudo-depth distortion.

    The pseudo-depth is ``(D_gt - beta) / alpha`` so that undistorting with the
    true parameters recovers ``D_gt``.  Images are quantized to 8 bits.
    """
    n = trajectory.n_frames
    if distortion is None:
        distortion = np.tile([1.0, 0.0], (n, 1))
    distortion = np.asarray(distortion, dtype=np.float64)
    if distortion.shape != (n, 2):
        raise ValueError("distortion spec must be (n_frames, 2)")
    if distortion[-1, 0] != 1.0 or distortion[-1, 1] != 0.0:
        raise ValueError("the last frame must be undistorted (alpha=1, beta=0)")
    images, gts = [], []
    for p in trajectory.poses:
        img, gt, _ = oracle_render(scene, p, K, h_near, h_far, n_quad)
        images.append(quantize(img))
        gts.append(gt)
    gts = np.stack(gts)
    pseudo = (gts - distortion[:, 1, None, None]) / distortion[:, 0, None, None]
    manifest = {
        "seed": seed, "n_quad": n_quad, "h_near": h_near, "h_far": h_far,
        "trajectory": {"kind": trajectory.kind, "max_rotation_deg": trajectory.max_rotation_deg},
        "scene": scene.to_dict(),
    }
    return Dataset(images=np.stack(images), depths=pseudo, K=K, gt_depths=gts,
                   gt_poses=trajectory.as_array(), gt_dists=distortion, meta=manifest)
