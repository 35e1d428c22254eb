"""Positional-encoded MLP radiance field ``(x, d) -> (rgb, sigma)``.

The density branch sees only the encoded position; the view direction enters
after the density head, through a small colour MLP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from npnf import ad


@dataclass(frozen=True)
class FieldConfig:
    n_layers: int = 4
    width: int = 64
    l_pos: int = 6
    l_dir: int = 2

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.l_pos

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.l_dir

    @property
    def color_width(self) -> int:
        return max(self.width // 2, 1)

    def layers(self) -> list[tuple[str, int, int]]:
        """(name, fan_in, fan_out) for every affine layer, in packing order."""
        w = self.width
        out = [("hidden0", self.pos_dim, w)]
        out += [(f"hidden{k}", w, w) for k in range(1, self.n_layers)]
        out += [
            ("sigma", w, 1),
            ("feature", w, w),
            ("color_hidden", w + self.dir_dim, self.color_width),
            ("color_out", self.color_width, 3),
        ]
        return out

    @property
    def n_params(self) -> int:
        return sum((fi + 1) * fo for _, fi, fo in self.layers())

    def to_dict(self) -> dict:
        return {"n_layers": self.n_layers, "width": self.width,
                "l_pos": self.l_pos, "l_dir": self.l_dir}


@dataclass
class FieldParams:
    config: FieldConfig
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.config.n_params,):
            raise ValueError(f"expected {self.config.n_params} parameters, got {self.flat.shape}")

    def copy(self) -> "FieldParams":
        return FieldParams(self.config, self.flat.copy())


@dataclass
class FieldSample:
    c: np.ndarray
    sigma: float


def init_field(config: FieldConfig, seed: int = 0) -> FieldParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    blocks = []
    for _, fi, fo in config.layers():
        bound = np.sqrt(6.0 / (fi + fo))
        blocks.append(rng.uniform(-bound, bound, size=fi * fo))
        blocks.append(np.zeros(fo))
    return FieldParams(config, np.concatenate(blocks))


def unpack(theta, config: FieldConfig) -> dict:
    """Slice the flat parameter vector into per-layer (W, b) pairs."""
    out = {}
    k = 0
    for name, fi, fo in config.layers():
        W = ad.reshape(theta[k:k + fi * fo], (fi, fo))
        k += fi * fo
        b = theta[k:k + fo]
        k += fo
        out[name] = (W, b)
    return out


def positional_encode(v, L: int):
    """``(v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(...))`` on the last axis."""
    parts = [v]
    for k in range(L):
        s = (2.0 ** k) * np.pi
        parts.append(ad.sin(s * v))
        parts.append(ad.cos(s * v))
    if len(parts) == 1:
        return v
    return ad.concat(parts, axis=-1)


def _affine(x, Wb):
    W, b = Wb
    return ad.matmul(x, W) + b


def eval_points(theta, config: FieldConfig, x, dir_features):
    """Evaluate the field on (M, 3) points.

    ``dir_features`` is either (M, dir_dim) or a callable mapping the colour
    layer's direction weights to an (M, color_width) contribution; the latter
    lets a batch of rays share one direction encoding across its samples.
    Returns ``(rgb (M, 3), sigma (M,))``.
    """
    p = unpack(theta, config)
    h = positional_encode(x, config.l_pos)
    for k in range(config.n_layers):
        h = ad.softplus(_affine(h, p[f"hidden{k}"]))
    sigma = ad.softplus(_affine(h, p["sigma"]))
    feat = _affine(h, p["feature"])
    W, b = p["color_hidden"]
    w = config.width
    pre = ad.matmul(feat, W[:w]) + b
    W_dir = W[w:]
    if callable(dir_features):
        pre = pre + dir_features(W_dir)
    else:
        pre = pre + ad.matmul(dir_features, W_dir)
    ch = ad.softplus(pre)
    rgb = ad.sigmoid(_affine(ch, p["color_out"]))
    return rgb, ad.reshape(sigma, (-1,))


def eval_field(theta, config: FieldConfig, x, d) -> FieldSample:
    """Single-point evaluation (x, d are 3-vectors)."""
    xd = ad.reshape(x, (1, 3))
    dd = positional_encode(ad.reshape(d, (1, 3)), config.l_dir)
    rgb, sigma = eval_points(theta, config, xd, dd)
    return FieldSample(ad.reshape(rgb, (3,)), ad.reshape(sigma, ()))


def ray_field(theta, config: FieldConfig):
    """Field callable for the renderer: ``(points (R,S,3), dirs (R,3)) -> (rgb, sigma)``."""

    def fn(points, dirs):
        n_rays, n_s = ad.value(points).shape[:2]
        flat = ad.reshape(points, (n_rays * n_s, 3))
        enc_d = positional_encode(dirs, config.l_dir)

        def dir_term(W_dir):
            per_ray = ad.matmul(enc_d, W_dir)
            cw = ad.value(per_ray).shape[1]
            per_ray = ad.reshape(per_ray, (n_rays, 1, cw))
            # broadcast over samples without materialising copies of enc_d
            ones = np.ones((1, n_s, 1))
            return ad.reshape(per_ray * ones, (n_rays * n_s, cw))

        rgb, sigma = eval_points(theta, config, flat, dir_term)
        return ad.reshape(rgb, (n_rays, n_s, 3)), ad.reshape(sigma, (n_rays, n_s))

    return fn
