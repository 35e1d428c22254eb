"""End-to-end helpers shared by the command line and the acceptance suite."""

from __future__ import annotations

import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from npnf import checkpoint, evaluate, formats, geom, plots
from npnf.config import RunConfig
from npnf.dataset import Dataset, cam_to_world
from npnf.field import ray_field
from npnf.losses import Scene
from npnf.render import render_image
from npnf.trainer import (Trainer, TrainState, init_state, nearest_frame, register_test_pose,
                          run_schedule)

CSV_COLUMNS = ("step", "l_rgb", "l_depth", "l_pc", "l_rgbs", "total", "lr_nerf", "lr_pose")
HOLDOUT_EVERY = 8


class MissingGroundTruth(ValueError):
    pass


def split_frames(n_frames: int, holdout: bool = True) -> tuple[list[int], list[int]]:
    """(train, test) frame indices; every 8th frame (index 7, 15, ...) is held out."""
    test = [i for i in range(n_frames) if holdout and i % HOLDOUT_EVERY == HOLDOUT_EVERY - 1]
    train = [i for i in range(n_frames) if i not in test]
    return train, test


def make_trainer(ds: Dataset, cfg: RunConfig, train_idx) -> Trainer:
    scene = Scene(ds.images[train_idx], ds.depths[train_idx], ds.K)
    return Trainer(scene, cfg.train, cfg.field_config, cfg.render, cfg.weights)


def _write_rows(path: Path, rows, mode: str) -> None:
    with open(path, mode, newline="") as f:
        w = csv.writer(f)
        if mode == "w":
            w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


def _truncate_csv(path: Path, last_step: int) -> None:
    if not path.exists():
        _write_rows(path, [], "w")
        return
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    kept = [[int(r[0])] + [float(v) for v in r[1:]] for r in rows if int(r[0]) <= last_step]
    _write_rows(path, kept, "w")


def train(ds: Dataset, cfg: RunConfig, out=None, resume=None, on_epoch=None) -> TrainState:
    """Run the full schedule; with ``out`` set, write checkpoints and the metrics CSV."""
    if resume is not None:
        ck = checkpoint.load(resume)
        if ck.meta["n_frames"] != len(ck.train_indices) or max(ck.train_indices) >= ds.n_frames:
            raise ValueError("checkpoint does not match the dataset")
        cfg = replace(cfg, train=ck.train, field_config=ck.field, render=ck.render,
                      weights=ck.weights)
        train_idx = ck.train_indices
        state = ck.state
    else:
        train_idx, _ = split_frames(ds.n_frames, cfg.holdout)
        state = None
    trainer = make_trainer(ds, cfg, train_idx)
    if state is None:
        state = init_state(trainer)
    out = Path(out) if out is not None else None
    rows = []
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        csv_path = out / "metrics.csv"
        if resume is None:
            _write_rows(csv_path, [], "w")
        else:
            _truncate_csv(csv_path, state.step)

    def on_step(st, report, lr_n, lr_p):
        rows.append((st.step, report.l_rgb, report.l_depth, report.l_pc, report.l_rgbs,
                     report.total, lr_n, lr_p))

    def save(st, name):
        checkpoint.save(out / name, st, trainer.config, trainer.field_config, trainer.render,
                        trainer.weights, train_idx)

    def epoch_done(st, report):
        if out is not None:
            _write_rows(csv_path, rows, "a")
            rows.clear()
            every = cfg.checkpoint_every
            if every and st.epoch % every == 0:
                save(st, f"checkpoints/epoch_{st.epoch:05d}.npnf")
        if on_epoch is not None:
            on_epoch(st, report)

    run_schedule(state, trainer, on_step=on_step, on_epoch=epoch_done)
    if out is not None:
        save(state, "final.npnf")
        learned = cam_to_world(state.poses)
        formats.write_trajectory(out / "trajectory.txt", learned)
    return state


# ------------------------------------------------------------------ evaluation


def eval_pose(ck: checkpoint.Checkpoint, ds: Dataset, svg=None) -> dict:
    if ds.gt_poses is None:
        raise MissingGroundTruth("dataset has no ground-truth poses")
    idx = ck.train_indices
    est = cam_to_world(ck.state.poses)
    gt = cam_to_world(ds.gt_poses[idx])
    sim = evaluate.align(est, gt)
    metrics = evaluate.PoseMetrics(evaluate.ate(est, gt, sim),
                                   *_scaled_rpe(est, gt, sim.s))
    if svg is not None:
        _, rot = evaluate.rpe_pairs(est, gt, scale=sim.s)
        plots.pose_figure(svg, sim.apply(est[:, :3, 3]), gt[:, :3, 3], rot)
    return metrics.to_dict()


def _scaled_rpe(est, gt, scale):
    t, r = evaluate.rpe(est, gt, scale=scale)
    return 100.0 * t, r


def _render_cfg(ck: checkpoint.Checkpoint):
    return replace(ck.render, n_samples=ck.train.samples_per_ray, stratified_noise=False)


def eval_depth(ck: checkpoint.Checkpoint, ds: Dataset) -> dict:
    if ds.gt_depths is None:
        raise MissingGroundTruth("dataset has no ground-truth depth maps")
    fieldfn = ray_field(ck.state.field.flat, ck.field)
    preds, gts = [], []
    for k, i in enumerate(ck.train_indices):
        _, z = render_image(fieldfn, ck.state.poses[k], ds.K, _render_cfg(ck))
        preds.append(z)
        gts.append(ds.gt_depths[i])
    return evaluate.depth_metrics(np.stack(preds), np.stack(gts)).to_dict()


def eval_nvs(ck: checkpoint.Checkpoint, ds: Dataset, on_train: bool = False, steps: int = 200,
             lr: float = 1e-3, rays: int = 1024, seed: int = 0) -> dict:
    """Register each target frame's pose against the frozen field, then score its render.

    Targets are the held-out frames, or the training frames with ``on_train``.
    Registration starts from the learned pose of the nearest training frame and
    its result is kept only if it lowers the photometric error.
    """
    train_idx = ck.train_indices
    targets = train_idx if on_train else [i for i in range(ds.n_frames) if i not in train_idx]
    if not targets:
        raise MissingGroundTruth("no held-out frames to evaluate")
    cfg = _render_cfg(ck)
    fieldfn = ray_field(ck.state.field.flat, ck.field)
    per_frame = []
    for i in targets:
        start = ck.state.poses[nearest_frame(i, train_idx)]
        reg = register_test_pose(ck.state.field, ds.images[i], ds.K, start, ck.render,
                                 steps=steps, lr=lr, rays=rays, seed=seed).as_vector()
        best = None
        for pose in (start, reg):
            img, _ = render_image(fieldfn, pose, ds.K, cfg)
            err = float(np.mean((img - ds.images[i]) ** 2))
            if best is None or err < best[0]:
                best = (err, img)
        img = np.clip(best[1], 0.0, 1.0)
        per_frame.append({"frame": int(i), "psnr": evaluate.psnr(img, ds.images[i]),
                          "ssim": evaluate.ssim(img, ds.images[i])})
    return {"psnr": float(np.mean([f["psnr"] for f in per_frame])),
            "ssim": float(np.mean([f["ssim"] for f in per_frame])),
            "frames": per_frame}


def render_poses(ck: checkpoint.Checkpoint, K: geom.Intrinsics, cam_to_world_poses, out) -> list:
    """Noise-free renders at camera-to-world poses given in the learned world frame."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fieldfn = ray_field(ck.state.field.flat, ck.field)
    written = []
    for k, T in enumerate(cam_to_world_poses):
        w2c = geom.RigidTransform(T[:3, :3], T[:3, 3]).inverse()
        pose = np.concatenate([geom.log_so3(w2c.R), w2c.t])
        img, z = render_image(fieldfn, pose, K, _render_cfg(ck))
        formats.write_ppm(out / f"{k:03d}.ppm", img)
        formats.write_pfm(out / f"{k:03d}_depth.pfm", z)
        written.append(out / f"{k:03d}.ppm")
    return written

