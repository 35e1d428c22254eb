"""Photometric, depth, point-cloud and surface-photometric losses.

Every term is a per-sample mean so the default weights do not depend on the
batch size.  Term functions are polymorphic: called on numpy arrays they just
return numbers, called on ``Var`` inputs they extend the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from npnf import ad, geom
from npnf.depthprior import PointCloud, cloud_at, normalize_pair
from npnf.render import RenderConfig, render_pixels
from npnf.field import FieldConfig, ray_field

TERMS = ("l_rgb", "l_depth", "l_pc", "l_rgbs")


class NoVisibleOverlap(ValueError):
    pass


@dataclass
class LossWeights:
    lambda1: float = 0.04
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(self.lambda1 * k, self.lambda2 * k, self.lambda3 * k)


@dataclass
class LossReport:
    l_rgb: float
    l_depth: float
    l_pc: float
    l_rgbs: float
    total: float
    counts: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {"l_rgb": self.l_rgb, "l_depth": self.l_depth, "l_pc": self.l_pc,
                "l_rgbs": self.l_rgbs, "total": self.total}


def _reduce(diff, norm: str):
    if norm == "l1":
        return ad.mean(ad.abs_(diff))
    if norm == "l2":
        return ad.mean(diff * diff)
    raise ValueError(f"unknown norm {norm!r}")


def loss_rgb(rendered, target):
    """Mean squared error over pixels and channels."""
    return _reduce(rendered - np.asarray(target), "l2")


def loss_depth(undistorted, rendered, norm: str = "l1"):
    return _reduce(undistorted - rendered, norm)


def nearest_indices(A: np.ndarray, B: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Index of the exact nearest neighbour in ``B`` for every row of ``A``."""
    out = np.empty(len(A), dtype=int)
    for s in range(0, len(A), chunk):
        diff = A[s:s + chunk, None, :] - B[None, :, :]
        out[s:s + chunk] = np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)
    return out


def chamfer(Pi, Pj):
    """Symmetric mean nearest-neighbour Euclidean distance.

    The matching is fixed per evaluation; gradients flow only through the
    distances of the selected pairs.
    """
    a, b = ad.value(Pi), ad.value(Pj)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs non-empty clouds")
    to_b = nearest_indices(a, b)
    to_a = nearest_indices(b, a)
    d_ab = ad.norm(Pi - ad.getitem(Pj, to_b), axis=1)
    d_ba = ad.norm(Pj - ad.getitem(Pi, to_a), axis=1)
    return ad.mean(d_ab) + ad.mean(d_ba)


def pair_pc(Ti: geom.RigidTransform, Tj: geom.RigidTransform, Pi, Pj, scale=None):
    """Chamfer between cloud j and cloud i moved into camera j, after normalisation."""
    Tji = geom.relative_pose(Ti, Tj)
    moved = Tji.apply(Pi.points if isinstance(Pi, PointCloud) else Pi)
    qi, qj, _ = normalize_pair(moved, Pj.points if isinstance(Pj, PointCloud) else Pj, scale)
    return chamfer(qj, qi)


def loss_pc(pairs, transforms, clouds, scales=None):
    """Sum of pair terms over consecutive ``pairs``; ``transforms``/``clouds`` map frame -> value.

    ``scales`` optionally pins the normalisation of each pair (keyed by pair).
    """
    total = 0.0
    for i, j in pairs:
        s = None if scales is None else scales[i, j]
        total = total + pair_pc(transforms[i], transforms[j], clouds[i], clouds[j], s)
    return total


def loss_rgb_surface(Ti: geom.RigidTransform, Tj: geom.RigidTransform, Pi,
                     image_i: np.ndarray, image_j: np.ndarray, K: geom.Intrinsics,
                     norm: str = "l1"):
    """Colour consistency of cloud ``Pi`` (camera-i frame) seen from cameras i and j.

    Only points that project inside both images contribute.  Returns
    ``(loss, n_visible)``; raises :class:`NoVisibleOverlap` if none do.
    """
    pts = Pi.points if isinstance(Pi, PointCloud) else Pi
    uv_i, vis_i = geom.project(pts, K)
    uv_j, vis_j = geom.project(geom.relative_pose(Ti, Tj).apply(pts), K)
    vis = vis_i & vis_j
    n_vis = int(vis.sum())
    if n_vis == 0:
        raise NoVisibleOverlap("no point of the cloud is visible in both frames")
    idx = np.flatnonzero(vis)
    ci = ad.bilinear(image_i, ad.getitem(uv_i, idx))
    cj = ad.bilinear(image_j, ad.getitem(uv_j, idx))
    return _reduce(ci - cj, norm), n_vis


# --------------------------------------------------------------- full objective


@dataclass
class Scene:
    """Training observations shared by all loss evaluations."""

    images: np.ndarray   # (N, H, W, 3) in [0, 1]
    depths: np.ndarray   # (N, H, W) pseudo-depth
    K: geom.Intrinsics

    @property
    def n_frames(self) -> int:
        return len(self.images)


@dataclass
class Batch:
    """Everything random about one loss evaluation, drawn ahead of time."""

    frame: int
    pixels: np.ndarray                 # (M, 2) ray pixels of ``frame``
    h: np.ndarray                      # (M, S) sample depths
    pairs: list                        # consecutive (i, j) frame pairs
    cloud_pixels: dict                 # frame -> (P, 2) pixels for its cloud


@dataclass
class Setup:
    field: FieldConfig
    render: RenderConfig
    depth_norm: str = "l1"
    rgbs_norm: str = "l1"


def loss_terms(batch: Batch, theta, poses, dists, scene: Scene, setup: Setup,
               pc_scales: dict | None = None):
    """Evaluate the four terms; returns ``(terms dict, counts dict)``.

    ``poses`` is (N, 6) rows of (phi, t); ``dists`` is (N, 2) rows of (alpha, beta).
    ``pc_scales`` pins the point-cloud normalisation per pair, which finite
    differences need because the scale is a constant to the gradient.
    """
    i = batch.frame
    K = scene.K
    needed = {i} | {f for p in batch.pairs for f in p}
    T = {f: geom.pose_to_transform(poses[f]) for f in needed}

    fieldfn = ray_field(theta, setup.field)
    colors, zdepth, _ = render_pixels(fieldfn, poses[i], K, setup.render, batch.pixels, h=batch.h)
    px = batch.pixels
    target = scene.images[i][px[:, 1], px[:, 0]]
    l_rgb = loss_rgb(colors, target)
    d_star = dists[i, 0] * scene.depths[i][px[:, 1], px[:, 0]] + dists[i, 1]
    l_depth = loss_depth(d_star, zdepth, setup.depth_norm)

    clouds = {f: cloud_at(scene.depths[f], dists[f, 0], dists[f, 1], K, batch.cloud_pixels[f],
                          frame=f"camera:{f}")
              for f in batch.cloud_pixels}
    l_pc = loss_pc(batch.pairs, T, clouds, pc_scales) if batch.pairs else 0.0

    l_rgbs = 0.0
    skipped = 0
    n_visible = 0
    for a, b in batch.pairs:
        try:
            term, n = loss_rgb_surface(T[a], T[b], clouds[a], scene.images[a], scene.images[b],
                                       K, setup.rgbs_norm)
        except NoVisibleOverlap:
            skipped += 1
            continue
        l_rgbs = l_rgbs + term
        n_visible += n
    counts = {"rays": len(px), "pairs": len(batch.pairs), "skipped_pairs": skipped,
              "visible_points": n_visible,
              "cloud_points": int(sum(len(c) for c in clouds.values()))}
    return {"l_rgb": l_rgb, "l_depth": l_depth, "l_pc": l_pc, "l_rgbs": l_rgbs}, counts


def combine(terms: dict, w: LossWeights):
    return (terms["l_rgb"] + w.lambda1 * terms["l_depth"] + w.lambda2 * terms["l_pc"]
            + w.lambda3 * terms["l_rgbs"])


def make_report(terms: dict, w: LossWeights, counts: dict) -> LossReport:
    vals = {k: float(ad.value(v)) for k, v in terms.items()}
    total = vals["l_rgb"] + w.lambda1 * vals["l_depth"] + w.lambda2 * vals["l_pc"] \
        + w.lambda3 * vals["l_rgbs"]
    return LossReport(total=total, counts=counts, **vals)


def total_loss(batch: Batch, theta: np.ndarray, poses: np.ndarray, dists: np.ndarray,
               scene: Scene, setup: Setup, weights: LossWeights,
               trainable=("theta", "poses", "dists")):
    """One taped evaluation of the weighted objective.

    Returns ``(LossReport, grads)`` where ``grads`` maps each trainable group
    name to an array shaped like that group.
    """
    tape = ad.Tape()
    inputs = {"theta": theta, "poses": poses, "dists": dists}
    leaves = {}
    for name in ("theta", "poses", "dists"):
        if name in trainable:
            leaves[name] = tape.leaf(inputs[name])
            inputs[name] = leaves[name]
    terms, counts = loss_terms(batch, inputs["theta"], inputs["poses"], inputs["dists"],
                               scene, setup)
    total = combine(terms, weights)
    report = make_report(terms, weights, counts)
    if isinstance(total, ad.Var):
        names = list(leaves)
        gs = ad.backward(tape, total, [leaves[n] for n in names])
        grads = dict(zip(names, gs))
    else:
        grads = {n: np.zeros_like(ad.value(leaves[n])) for n in leaves}
    return report, grads
