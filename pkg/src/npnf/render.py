"""Stratified volumetric quadrature of colour and depth along rays."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from npnf import ad, geom


@dataclass(frozen=True)
class RenderConfig:
    h_near: float = 0.1
    h_far: float = 10.0
    n_samples: int = 128
    stratified_noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.h_near < self.h_far:
            raise ValueError("need 0 < h_near < h_far")
        if self.n_samples < 2:
            raise ValueError("need at least two samples per ray")

    def to_dict(self) -> dict:
        return {"h_near": self.h_near, "h_far": self.h_far, "n_samples": self.n_samples,
                "stratified_noise": self.stratified_noise, "seed": self.seed}


class RayRender(NamedTuple):
    color: object          # (..., 3)
    depth: object          # (...,) ray distance
    trans_residual: object  # (...,)
    weights: object        # (..., S)


FieldFn = Callable[[object, object], tuple]


def sample_along_ray(cfg: RenderConfig, rng: np.random.Generator | None = None,
                     n_rays: int | None = None, noise: bool | None = None) -> np.ndarray:
    """Stratified depths ``h_near + (k + u_k)/n (h_far - h_near)``.

    ``u_k`` is uniform in [0, 1) when noise is on, otherwise 0.5.  Returns
    shape (n_samples,) or (n_rays, n_samples).
    """
    noise = cfg.stratified_noise if noise is None else noise
    n = cfg.n_samples
    shape = (n,) if n_rays is None else (n_rays, n)
    if noise:
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        u = rng.random(shape)
    else:
        u = np.full(shape, 0.5)
    k = np.arange(n)
    return cfg.h_near + (k + u) / n * (cfg.h_far - cfg.h_near)


def composite(sigma, rgb, h, h_far: float) -> RayRender:
    """Alpha-composite densities (R, S) and colours (R, S, 3) at depths h (R, S)."""
    h = np.asarray(h, dtype=np.float64)
    delta = np.concatenate([np.diff(h, axis=-1), h_far - h[..., -1:]], axis=-1)
    tau = sigma * delta
    acc = ad.cumsum(tau, axis=-1)
    total = acc[..., -1]
    # exclusive cumulative optical depth
    trans = ad.exp(-(acc - tau))
    alpha = 1.0 - ad.exp(-tau)
    w = trans * alpha
    shape = ad.value(w).shape
    color = ad.sum_(ad.reshape(w, shape + (1,)) * rgb, axis=-2)
    depth = ad.sum_(w * h, axis=-1)
    return RayRender(color, depth, ad.exp(-total), w)


def render_rays(field: FieldFn, origins, dirs, h: np.ndarray, h_far: float) -> RayRender:
    """Render rays with a shared or per-ray origin and (R, 3) unit directions."""
    h = np.asarray(h, dtype=np.float64)
    n_rays = ad.value(dirs).shape[0]
    if h.ndim == 1:
        h = np.broadcast_to(h, (n_rays, h.shape[0]))
    o = ad.reshape(origins, (-1, 1, 3))
    pts = o + ad.reshape(dirs, (n_rays, 1, 3)) * h[..., None]
    rgb, sigma = field(pts, dirs)
    return composite(sigma, rgb, h, h_far)


def render_ray(field: FieldFn, ray: geom.Ray, cfg: RenderConfig,
               rng: np.random.Generator | None = None) -> RayRender:
    h = sample_along_ray(cfg, rng)
    out = render_rays(field, ad.reshape(ray.origin, (1, 3)), ad.reshape(ray.direction, (1, 3)),
                      h[None, :], cfg.h_far)
    return RayRender(out.color[0], out.depth[0], out.trans_residual[0], out.weights[0])


def render_pixels(field: FieldFn, pose, K: geom.Intrinsics, cfg: RenderConfig,
                  pixels: np.ndarray, rng: np.random.Generator | None = None,
                  noise: bool | None = None, h: np.ndarray | None = None):
    """Differentiable render of a pixel batch.

    Returns ``(colors (M, 3), zdepth (M,), trans_residual (M,))``; depth is
    converted from ray distance to z-depth so it is comparable with depth maps.
    Pass ``h`` to reuse previously drawn sample depths.
    """
    pixels = np.asarray(pixels).reshape(-1, 2)
    origin, dirs = geom.camera_rays(pose, K, pixels)
    if h is None:
        h = sample_along_ray(cfg, rng, n_rays=len(pixels), noise=noise)
    out = render_rays(field, origin, dirs, h, cfg.h_far)
    return out.color, out.depth * geom.ray_cosines(K, pixels), out.trans_residual


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("NPNF_THREADS", "1")))
    except ValueError:
        return 1


def render_image(field: FieldFn, pose, K: geom.Intrinsics, cfg: RenderConfig,
                 pixels: np.ndarray | None = None, chunk: int = 1024,
                 rng: np.random.Generator | None = None, noise: bool = False):
    """Untaped render of ``pixels`` (default: the full image).

    Returns ``(colors (M, 3), zdepth (M,))``; with the default pixel set the
    results are reshaped to (H, W, 3) and (H, W).  Noise is off by default.
    """
    full = pixels is None
    if full:
        vv, uu = np.mgrid[0:K.height, 0:K.width]
        pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)
    pixels = np.asarray(pixels).reshape(-1, 2)
    pose = ad.value(pose) if not isinstance(pose, geom.PoseParam) else pose
    starts = list(range(0, len(pixels), chunk))
    # per-chunk depth samples are drawn up front so results do not depend on thread scheduling
    if noise:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        seeds = rng.integers(0, 2**63 - 1, size=len(starts))
    colors = np.zeros((len(pixels), 3))
    depths = np.zeros(len(pixels))

    def work(k):
        s = starts[k]
        px = pixels[s:s + chunk]
        sub_rng = np.random.default_rng(seeds[k]) if noise else None
        c, d, _ = render_pixels(field, pose, K, cfg, px, sub_rng, noise=noise)
        colors[s:s + len(px)] = c
        depths[s:s + len(px)] = d

    n_threads = _threads()
    if n_threads == 1 or len(starts) == 1:
        for k in range(len(starts)):
            work(k)
    else:
        with ThreadPoolExecutor(n_threads) as pool:
            list(pool.map(work, range(len(starts))))
    if full:
        return colors.reshape(K.height, K.width, 3), depths.reshape(K.height, K.width)
    return colors, depths
