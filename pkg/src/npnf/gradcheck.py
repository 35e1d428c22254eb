"""Finite-difference checks of every loss term against the taped gradients.

The fixture is tiny (3 frames of 8x8, a 2-layer field) so that a central
difference over every scalar parameter stays well under a minute.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from npnf import ad, geom, synth
from npnf.field import FieldConfig, init_field
from npnf.losses import TERMS, Batch, LossWeights, Scene, Setup, combine, loss_terms
from npnf.render import RenderConfig, sample_along_ray
from npnf.trainer import neighbour_pairs
from npnf.depthprior import cloud_at, reference_scale, sample_pixels, sample_valid_pixels

GROUPS = ("theta", "poses", "dists")
OBJECTIVES = TERMS + ("total",)


@dataclass
class Fixture:
    scene: Scene
    setup: Setup
    weights: LossWeights
    theta: np.ndarray
    poses: np.ndarray
    dists: np.ndarray
    batches: list

    def params(self) -> dict:
        return {"theta": self.theta, "poses": self.poses, "dists": self.dists}


@dataclass
class GradReport:
    errors: dict = field(default_factory=dict)   # (objective, group) -> max relative error
    tol: float = 1e-4
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    def lines(self) -> list[str]:
        out = []
        for (obj, grp), e in sorted(self.errors.items()):
            flag = "ok" if e < self.tol else "FAIL"
            out.append(f"{obj:8s} {grp:6s} max_rel_err={e:.3e} {flag}")
        return out


def make_fixture(seed: int = 0, size: int = 8, n_frames: int = 3, rays: int = 16,
                 samples: int = 12, cloud_points: int = 24) -> Fixture:
    K = geom.Intrinsics.centered(size, size, float(size))
    traj = synth.make_trajectory("orbit", n_frames, sweep_deg=20)
    ds = synth.make_dataset(synth.default_scene(), traj, K, synth.distortion_spec(n_frames, seed),
                            seed=seed, n_quad=256)
    scene = Scene(ds.images, ds.depths, K)
    fcfg = FieldConfig(n_layers=2, width=8, l_pos=4, l_dir=2)
    render = RenderConfig(h_near=2.0, h_far=9.0, n_samples=samples)
    rng = np.random.default_rng(seed)
    # start away from the ground truth so no gradient vanishes by symmetry
    poses = ds.gt_poses + rng.normal(scale=0.01, size=ds.gt_poses.shape)
    dists = np.column_stack([rng.uniform(0.9, 1.1, n_frames), rng.uniform(-0.05, 0.05, n_frames)])
    theta = init_field(fcfg, seed).flat + rng.normal(scale=0.05, size=fcfg.n_params)
    batches = []
    for frame in range(n_frames):
        px = sample_pixels(size, size, rays, rng)
        h = sample_along_ray(render, rng, n_rays=rays, noise=True)
        pairs = neighbour_pairs(frame, n_frames)
        frames = sorted({f for p in pairs for f in p})
        clouds = {f: sample_valid_pixels(ds.depths[f], dists[f, 0], dists[f, 1], cloud_points, rng)
                  for f in frames}
        batches.append(Batch(frame, px, h, pairs, clouds))
    return Fixture(scene, Setup(fcfg, render), LossWeights(), theta, poses, dists, batches)


def flip_gradient(x):
    """Identity on values with a negated gradient: a deliberate VJP sign bug."""
    if not isinstance(x, ad.Var):
        return x
    return x.tape.push("flip", (x,), x.value, lambda g: (-g,))


def pinned_scales(fx: Fixture, batch: Batch) -> dict:
    """Per-pair normalisation scales at the unperturbed parameters."""
    out = {}
    for i, j in batch.pairs:
        cloud = cloud_at(fx.scene.depths[j], fx.dists[j, 0], fx.dists[j, 1], fx.scene.K,
                         batch.cloud_pixels[j])
        out[i, j] = reference_scale(cloud)
    return out


def _objectives(fx: Fixture, params: dict, inject: str | None = None) -> dict:
    out = {k: 0.0 for k in OBJECTIVES}
    for batch in fx.batches:
        terms, _ = loss_terms(batch, params["theta"], params["poses"], params["dists"],
                              fx.scene, fx.setup, pinned_scales(fx, batch))
        if inject is not None:
            terms[inject] = flip_gradient(terms[inject])
        for k in TERMS:
            out[k] = out[k] + terms[k]
        out["total"] = out["total"] + combine(terms, fx.weights)
    return out


def analytic_gradients(fx: Fixture, inject: str | None = None) -> dict:
    """(objective, group) -> gradient array from the tape."""
    grads = {}
    for obj in OBJECTIVES:
        tape = ad.Tape()
        leaves = {g: tape.leaf(v) for g, v in fx.params().items()}
        val = _objectives(fx, leaves, inject)[obj]
        if isinstance(val, ad.Var):
            gs = ad.backward(tape, val, [leaves[g] for g in GROUPS])
        else:
            gs = [np.zeros_like(fx.params()[g]) for g in GROUPS]
        for g, arr in zip(GROUPS, gs):
            grads[obj, g] = arr
    return grads


def numeric_gradients(fx: Fixture, step: float = 1e-5) -> dict:
    """Central differences; one perturbed evaluation yields every objective."""
    base = {g: np.array(v, dtype=np.float64) for g, v in fx.params().items()}
    grads = {(o, g): np.zeros_like(base[g]) for o in OBJECTIVES for g in GROUPS}
    for g in GROUPS:
        flat = base[g].reshape(-1)
        for k in range(flat.size):
            vals = []
            for sign in (1.0, -1.0):
                p = {n: v.copy() for n, v in base.items()}
                p[g].reshape(-1)[k] = flat[k] + sign * step
                vals.append({o: float(v) for o, v in _objectives(fx, p).items()})
            for o in OBJECTIVES:
                grads[o, g].reshape(-1)[k] = (vals[0][o] - vals[1][o]) / (2 * step)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max-norm error scaled by the max-norm of the numeric gradient."""
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    return float(diff / max(np.max(np.abs(numeric)) if numeric.size else 0.0, floor))


def run(seed: int = 0, tol: float = 1e-4, step: float = 1e-5, inject: str | None = None,
        fixture: Fixture | None = None) -> GradReport:
    t0 = time.perf_counter()
    fx = make_fixture(seed) if fixture is None else fixture
    ana = analytic_gradients(fx, inject)
    num = numeric_gradients(fx, step)
    report = GradReport(tol=tol)
    for key in ana:
        report.errors[key] = relative_error(ana[key], num[key])
    report.seconds = time.perf_counter() - t0
    return report
