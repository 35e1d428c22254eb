"""``npnf`` command line: synth, train, eval, render, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from npnf import checkpoint, config, formats, geom, gradcheck, pipeline, synth
from npnf.dataset import load_dataset, write_dataset

log = logging.getLogger("npnf")


# ----------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    K = geom.Intrinsics.centered(args.size, args.size, args.focal or float(args.size))
    scene = synth.sphere_only_scene() if args.scene == "spheres" else synth.default_scene()
    traj = synth.make_trajectory(args.trajectory, args.frames, radius=args.radius,
                                 sweep_deg=args.sweep, seed=args.seed)
    dist = synth.distortion_spec(args.frames, args.seed) if args.distort else None
    ds = synth.make_dataset(scene, traj, K, dist, seed=args.seed, n_quad=args.n_quad)
    root = write_dataset(ds, args.out)
    print(f"wrote {ds.n_frames} frames to {root}")
    return 0


# ----------------------------------------------------------------------- train

TRAIN_FLAGS = {
    # flag: (section, key, type)
    "rays": ("train", "rays_per_image", int),
    "samples": ("train", "samples_per_ray", int),
    "cloud_points": ("train", "cloud_points", int),
    "lr_nerf": ("train", "lr_nerf", float),
    "lr_pose": ("train", "lr_pose_dist", float),
    "epochs1": ("train", "phase1_epochs", int),
    "epochs2": ("train", "phase2_epochs", int),
    "seed": ("train", "seed", int),
    "lambda1": ("weights", "lambda1", float),
    "lambda2": ("weights", "lambda2", float),
    "lambda3": ("weights", "lambda3", float),
    "h_near": ("render", "h_near", float),
    "h_far": ("render", "h_far", float),
    "layers": ("field", "n_layers", int),
    "width": ("field", "width", int),
}


def overrides_from_args(args) -> dict:
    out: dict = {"dataset": getattr(args, "data", None), "out": getattr(args, "out", None),
                 "preset": getattr(args, "preset", None),
                 "checkpoint_every": getattr(args, "checkpoint_every", None)}
    for flag, (section, key, _) in TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            out.setdefault(section, {})[key] = val
    for flag in ("freeze_poses", "freeze_dists", "freeze_field"):
        if getattr(args, flag, False):
            out.setdefault("train", {})[flag] = True
    if getattr(args, "no_holdout", False):
        out["holdout"] = False
    return out


def resolve_config(args) -> config.RunConfig:
    file_data = config.load_file(args.config) if getattr(args, "config", None) else None
    return config.build(file_data, overrides_from_args(args))


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    cfg.validate_paths()
    if cfg.out is None:
        raise SystemExit("train: an output directory is required (--out or config 'out')")
    ds = load_dataset(cfg.dataset)

    def on_epoch(st, report):
        if st.epoch == 1 or st.epoch % args.log_every == 0:
            log.info("epoch %d step %d total %.5f rgb %.5f depth %.5f pc %.5f rgbs %.5f",
                     st.epoch, st.step, report.total, report.l_rgb, report.l_depth,
                     report.l_pc, report.l_rgbs)

    state = pipeline.train(ds, cfg, cfg.out, resume=args.resume, on_epoch=on_epoch)
    print(f"finished at epoch {state.epoch} (step {state.step}); "
          f"checkpoint {Path(cfg.out) / 'final.npnf'}")
    return 0


# ------------------------------------------------------------------------ eval


def cmd_eval(args) -> int:
    ck = checkpoint.load(args.checkpoint)
    ds = load_dataset(args.data)
    if max(ck.train_indices) >= ds.n_frames:
        raise SystemExit("eval: checkpoint frame count does not match the dataset")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    which = ("pose", "depth", "nvs") if args.which == "all" else (args.which,)
    result = {}
    runners = {
        "pose": lambda: pipeline.eval_pose(ck, ds, svg=out / "pose.svg"),
        "depth": lambda: pipeline.eval_depth(ck, ds),
        "nvs": lambda: pipeline.eval_nvs(ck, ds, on_train=args.on_train, steps=args.reg_steps,
                                         lr=args.reg_lr),
    }
    for w in which:
        try:
            result[w] = runners[w]()
        except pipeline.MissingGroundTruth as exc:
            if args.which != "all":
                print(f"eval: {exc}", file=sys.stderr)
                return 2
            result[w] = {"skipped": str(exc)}
    path = out / "metrics.json"
    path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------- render


def cmd_render(args) -> int:
    ck = checkpoint.load(args.checkpoint)
    text = Path(args.poses).read_text()
    has_lines = any(ln.strip() and not ln.lstrip().startswith("#") for ln in text.splitlines())
    poses = formats.read_trajectory(args.poses) if has_lines else np.zeros((0, 4, 4))
    if args.data:
        K = load_dataset(args.data).K
    else:
        K = geom.Intrinsics(**json.loads(Path(args.intrinsics).read_text()))
    written = pipeline.render_poses(ck, K, poses, args.out)
    print(f"rendered {len(written)} views to {args.out}")
    return 0


# ------------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    report = gradcheck.run(seed=args.seed, tol=args.tol, inject=args.inject_sign_error)
    for line in report.lines():
        print(line)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} ({len(report.errors)} checks, {report.seconds:.1f}s)")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npnf", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=5)
    s.add_argument("--size", type=int, default=48)
    s.add_argument("--focal", type=float, default=None, help="focal length in pixels (default: size)")
    s.add_argument("--trajectory", choices=("orbit", "arc", "forward"), default="orbit")
    s.add_argument("--sweep", type=float, default=30.0, help="orbit/arc sweep in degrees")
    s.add_argument("--radius", type=float, default=4.0)
    s.add_argument("--scene", choices=("default", "spheres"), default="default")
    s.add_argument("--no-distort", dest="distort", action="store_false",
                   help="write undistorted pseudo-depth")
    s.add_argument("--n-quad", type=int, default=4096)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="optimise field, poses and distortions")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--config", help="JSON run configuration")
    t.add_argument("--preset", choices=sorted(config.PRESETS))
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--log-every", type=int, default=25)
    t.add_argument("--no-holdout", action="store_true", help="train on every frame")
    for flag, (_, _, typ) in TRAIN_FLAGS.items():
        t.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
    for flag in ("freeze_poses", "freeze_dists", "freeze_field"):
        t.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="pose, depth or novel-view metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--which", choices=("pose", "depth", "nvs", "all"), default="pose")
    e.add_argument("--out", required=True)
    e.add_argument("--on-train", action="store_true", help="nvs on training frames")
    e.add_argument("--reg-steps", type=int, default=200)
    e.add_argument("--reg-lr", type=float, default=1e-3)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render camera-to-world poses from a trajectory file")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--poses", required=True)
    r.add_argument("--out", required=True)
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset whose intrinsics to use")
    src.add_argument("--intrinsics", help="JSON file with fx, fy, cx, cy, width, height")
    r.set_defaults(func=cmd_render)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--inject-sign-error", choices=gradcheck.TERMS, default=None,
                   help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
