"""Joint optimisation of the field, camera poses and depth distortions."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from npnf import ad, geom
from npnf.depthprior import ALPHA_MIN, sample_pixels, sample_valid_pixels
from npnf.field import FieldConfig, FieldParams, init_field, ray_field
from npnf.losses import TERMS, Batch, LossReport, LossWeights, Scene, Setup, total_loss
from npnf.render import RenderConfig, render_pixels, sample_along_ray

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """A failure inside one optimisation step, tagged with where it happened."""


@dataclass
class TrainConfig:
    rays_per_image: int = 1024
    samples_per_ray: int = 128
    cloud_points: int = 1024
    lr_nerf: float = 1e-3
    lr_pose_dist: float = 5e-4
    phase1_epochs: int = 500
    phase2_epochs: int = 500
    nerf_lr_decay: float = 0.9954
    nerf_lr_every: int = 10
    pose_lr_decay: float = 0.9
    pose_lr_every: int = 100
    interframe_weight_decay: float = 0.995
    seed: int = 0
    freeze_poses: bool = False
    freeze_dists: bool = False
    freeze_field: bool = False
    # optional plateau stop for phase 1: relative change below tol over `plateau_window` epochs
    plateau: bool = False
    plateau_tol: float = 1e-4
    plateau_window: int = 20

    def __post_init__(self):
        if self.lr_nerf <= 0 or self.lr_pose_dist <= 0:
            raise ValueError("learning rates must be positive")
        for f in ("nerf_lr_decay", "pose_lr_decay", "interframe_weight_decay"):
            v = getattr(self, f)
            if not 0 < v <= 1:
                raise ValueError(f"{f} must be in (0, 1]")

    @property
    def total_epochs(self) -> int:
        return self.phase1_epochs + self.phase2_epochs


@dataclass
class TrainState:
    field: FieldParams
    poses: np.ndarray          # (N, 6) world-to-camera (phi, t)
    dists: np.ndarray          # (N, 2) (alpha, beta); alpha of the last frame pinned to 1
    adam_nerf: ad.AdamState
    adam_pose: ad.AdamState
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    phase1_done_at: int | None = None  # epoch at which a plateau ended phase 1 early

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def copy(self) -> "TrainState":
        gen = np.random.Generator(np.random.PCG64())
        gen.bit_generator.state = self.rng.bit_generator.state
        return TrainState(self.field.copy(), self.poses.copy(), self.dists.copy(),
                          ad.AdamState(self.adam_nerf.m.copy(), self.adam_nerf.v.copy(),
                                       self.adam_nerf.step),
                          ad.AdamState(self.adam_pose.m.copy(), self.adam_pose.v.copy(),
                                       self.adam_pose.step),
                          gen, self.epoch, self.step, self.phase1_done_at)


@dataclass
class Trainer:
    """Bundles the fixed ingredients of a run."""

    scene: Scene
    config: TrainConfig
    field_config: FieldConfig = field(default_factory=FieldConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    depth_norm: str = "l1"
    rgbs_norm: str = "l1"

    def __post_init__(self):
        if self.scene.n_frames < 2:
            raise ValueError("training needs at least two frames")
        self.render = replace(self.render, n_samples=self.config.samples_per_ray,
                              stratified_noise=True)

    @property
    def setup(self) -> Setup:
        return Setup(self.field_config, self.render, self.depth_norm, self.rgbs_norm)


def init_state(trainer: Trainer) -> TrainState:
    """Identity poses, identity distortions, seeded field."""
    n = trainer.scene.n_frames
    cfg = trainer.config
    theta = init_field(trainer.field_config, seed=cfg.seed)
    dists = np.tile([1.0, 0.0], (n, 1))
    return TrainState(field=theta, poses=np.zeros((n, 6)), dists=dists,
                      adam_nerf=ad.AdamState.zeros(theta.flat.size),
                      adam_pose=ad.AdamState.zeros(n * 8),
                      rng=np.random.default_rng(cfg.seed))


def pose_dist_mask(n_frames: int, config: TrainConfig) -> np.ndarray:
    """Which entries of the packed [poses, dists] vector the second optimiser may move."""
    poses = np.full((n_frames, 6), not config.freeze_poses)
    dists = np.full((n_frames, 2), not config.freeze_dists)
    dists[-1, 0] = False  # the last frame's scale fixes the scene scale
    return np.concatenate([poses.ravel(), dists.ravel()])


# ------------------------------------------------------------------- schedules


def phase2_epochs_done(state_epoch: int, config: TrainConfig, phase1_end: int | None = None) -> int:
    start = config.phase1_epochs if phase1_end is None else phase1_end
    return max(0, state_epoch - start)


def learning_rates(epoch: int, config: TrainConfig, phase1_end: int | None = None):
    """(lr_nerf, lr_pose_dist) in effect at the start of ``epoch``."""
    e2 = phase2_epochs_done(epoch, config, phase1_end)
    lr_n = config.lr_nerf * config.nerf_lr_decay ** (e2 // config.nerf_lr_every)
    lr_p = config.lr_pose_dist * config.pose_lr_decay ** (e2 // config.pose_lr_every)
    return lr_n, lr_p


def loss_weights(epoch: int, trainer: Trainer, phase1_end: int | None = None) -> LossWeights:
    e2 = phase2_epochs_done(epoch, trainer.config, phase1_end)
    return trainer.weights.scaled(trainer.config.interframe_weight_decay ** e2)


# ------------------------------------------------------------------- one epoch


def neighbour_pairs(frame: int, n_frames: int) -> list[tuple[int, int]]:
    pairs = []
    if frame > 0:
        pairs.append((frame - 1, frame))
    if frame < n_frames - 1:
        pairs.append((frame, frame + 1))
    return pairs


def draw_batch(frame: int, state: TrainState, trainer: Trainer) -> Batch:
    scene, cfg = trainer.scene, trainer.config
    K = scene.K
    rng = state.rng
    pixels = sample_pixels(K.width, K.height, min(cfg.rays_per_image, K.width * K.height), rng)
    h = sample_along_ray(trainer.render, rng, n_rays=len(pixels), noise=True)
    pairs = neighbour_pairs(frame, scene.n_frames)
    frames = sorted({f for p in pairs for f in p})
    n_cloud = min(cfg.cloud_points, K.width * K.height)
    cloud_pixels = {f: sample_valid_pixels(scene.depths[f], state.dists[f, 0], state.dists[f, 1],
                                           n_cloud, rng)
                    for f in frames}
    return Batch(frame, pixels, h, pairs, cloud_pixels)


def apply_step(state: TrainState, grads: dict, lr_nerf: float, lr_pose: float,
               config: TrainConfig) -> None:
    if "theta" in grads:
        flat, state.adam_nerf = ad.adam_step(state.field.flat, grads["theta"], state.adam_nerf,
                                             lr_nerf)
        state.field = FieldParams(state.field.config, flat)
    n = state.n_frames
    gp = grads.get("poses", np.zeros_like(state.poses))
    gd = grads.get("dists", np.zeros_like(state.dists))
    if "poses" in grads or "dists" in grads:
        packed = np.concatenate([state.poses.ravel(), state.dists.ravel()])
        g = np.concatenate([gp.ravel(), gd.ravel()])
        packed, state.adam_pose = ad.adam_step(packed, g, state.adam_pose, lr_pose,
                                               mask=pose_dist_mask(n, config))
        state.poses = packed[:n * 6].reshape(n, 6)
        dists = packed[n * 6:].reshape(n, 2)
        dists[:, 0] = np.maximum(dists[:, 0], ALPHA_MIN)
        state.dists = dists
    state.step += 1


def trainable_groups(config: TrainConfig) -> tuple:
    groups = []
    if not config.freeze_field:
        groups.append("theta")
    if not config.freeze_poses:
        groups.append("poses")
    if not config.freeze_dists:
        groups.append("dists")
    return tuple(groups)


StepCallback = Callable[[TrainState, LossReport, float, float], None]


def train_epoch(state: TrainState, trainer: Trainer, on_step: StepCallback | None = None,
                phase1_end: int | None = None) -> LossReport:
    """Visit every frame once in a seeded shuffled order, one step per visit."""
    cfg = trainer.config
    lr_n, lr_p = learning_rates(state.epoch, cfg, phase1_end)
    weights = loss_weights(state.epoch, trainer, phase1_end)
    groups = trainable_groups(cfg)
    reports = []
    for frame in state.rng.permutation(state.n_frames):
        try:
            batch = draw_batch(int(frame), state, trainer)
            report, grads = total_loss(batch, state.field.flat, state.poses, state.dists,
                                       trainer.scene, trainer.setup, weights, groups)
        except Exception as exc:
            raise TrainingError(f"epoch {state.epoch}, step {state.step}, frame {frame}: "
                                f"{type(exc).__name__}: {exc}") from exc
        apply_step(state, grads, lr_n, lr_p, cfg)
        reports.append(report)
        if on_step is not None:
            on_step(state, report, lr_n, lr_p)
    state.epoch += 1
    return mean_report(reports, weights)


def mean_report(reports: list, weights: LossWeights) -> LossReport:
    vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in TERMS}
    total = (vals["l_rgb"] + weights.lambda1 * vals["l_depth"] + weights.lambda2 * vals["l_pc"]
             + weights.lambda3 * vals["l_rgbs"])
    counts = {}
    for r in reports:
        for k, v in r.counts.items():
            counts[k] = counts.get(k, 0) + v
    return LossReport(total=total, counts=counts, **vals)


def plateaued(history: list, tol: float, window: int) -> bool:
    if len(history) <= window:
        return False
    old, new = history[-window - 1], history[-1]
    return abs(old - new) / max(abs(old), 1e-12) < tol


def run_schedule(state: TrainState, trainer: Trainer, on_step: StepCallback | None = None,
                 on_epoch: Callable[[TrainState, LossReport], None] | None = None,
                 until_epoch: int | None = None) -> TrainState:
    """Phase 1 at constant rates, then phase 2 with decays, up to ``until_epoch``.

    Resumable: the phase, rates and weights follow from ``state.epoch``.
    """
    cfg = trainer.config
    end = cfg.total_epochs if until_epoch is None else min(until_epoch, cfg.total_epochs)
    history: list[float] = []
    while state.epoch < end:
        if (cfg.plateau and state.phase1_done_at is None and state.epoch < cfg.phase1_epochs
                and plateaued(history, cfg.plateau_tol, cfg.plateau_window)):
            state.phase1_done_at = state.epoch
            log.info("phase 1 plateaued at epoch %d", state.epoch)
        report = train_epoch(state, trainer, on_step, state.phase1_done_at)
        history.append(report.total)
        if on_epoch is not None:
            on_epoch(state, report)
        if state.phase1_done_at is not None and \
                state.epoch - state.phase1_done_at >= cfg.phase2_epochs:
            break
    return state


# ------------------------------------------------------------ test-time poses


def nearest_frame(index: int, train_indices) -> int:
    """Position (in ``train_indices``) of the training frame closest in sequence order."""
    train_indices = np.asarray(train_indices)
    return int(np.argmin(np.abs(train_indices - index)))


def register_test_pose(theta: FieldParams, image: np.ndarray, K: geom.Intrinsics,
                       init_pose: np.ndarray, render: RenderConfig, steps: int = 200,
                       lr: float = 1e-3, rays: int = 1024, seed: int = 0) -> geom.PoseParam:
    """Fit one camera pose to ``image`` by photometric error with the field frozen.

    Sample depths are jittered only if ``render.stratified_noise`` is set.
    """
    rng = np.random.default_rng(seed)
    fieldfn = None
    pose = np.asarray(init_pose, dtype=np.float64).reshape(6).copy()
    state = ad.AdamState.zeros(6)
    flat = theta.flat.copy()
    for _ in range(steps):
        px = sample_pixels(K.width, K.height, min(rays, K.width * K.height), rng)
        h = sample_along_ray(render, rng, n_rays=len(px))
        tape = ad.Tape()
        p = tape.leaf(pose)
        fieldfn = ray_field(flat, theta.config)
        colors, _, _ = render_pixels(fieldfn, p, K, render, px, h=h)
        target = image[px[:, 1], px[:, 0]]
        diff = colors - target
        loss = ad.mean(diff * diff)
        (g,) = ad.backward(tape, loss, [p])
        pose, state = ad.adam_step(pose, g, state, lr)
    return geom.PoseParam.from_vector(pose)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
