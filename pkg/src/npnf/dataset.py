"""On-disk dataset layout and the in-memory :class:`Dataset`.

Layout::

    <root>/manifest.json
    <root>/frames/NNN.ppm          RGB image
    <root>/frames/NNN_pseudo.pfm   pseudo-depth (training input)
    <root>/frames/NNN_gt.pfm       ground-truth z-depth (optional)
    <root>/gt_trajectory.txt       camera-to-world ground truth (optional)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from npnf import formats, geom

FORMAT_VERSION = 1

MANIFEST_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["format_version", "n_frames", "intrinsics", "frames"],
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "n_frames": {"type": "integer", "minimum": 2},
        "intrinsics": {
            "type": "object",
            "required": ["fx", "fy", "cx", "cy", "width", "height"],
            "properties": {
                "fx": {"type": "number", "exclusiveMinimum": 0},
                "fy": {"type": "number", "exclusiveMinimum": 0},
                "cx": {"type": "number"},
                "cy": {"type": "number"},
                "width": {"type": "integer", "minimum": 1},
                "height": {"type": "integer", "minimum": 1},
            },
        },
        "frames": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image", "depth"],
                "properties": {
                    "image": {"type": "string"},
                    "depth": {"type": "string"},
                    "gt_depth": {"type": "string"},
                    "gt_pose": {"type": "array", "items": {"type": "number"},
                                "minItems": 6, "maxItems": 6},
                    "gt_distortion": {"type": "array", "items": {"type": "number"},
                                      "minItems": 2, "maxItems": 2},
                },
            },
        },
        "gt_trajectory": {"type": "string"},
        "meta": {"type": "object"},
    },
}


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray                   # (N, H, W, 3) in [0, 1]
    depths: np.ndarray                   # (N, H, W) pseudo-depth
    K: geom.Intrinsics
    gt_depths: np.ndarray | None = None  # (N, H, W) z-depth
    gt_poses: np.ndarray | None = None   # (N, 6) world-to-camera (phi, t)
    gt_dists: np.ndarray | None = None   # (N, 2) (alpha, beta)
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        pick = (lambda a: None if a is None else a[idx])
        return Dataset(self.images[idx], self.depths[idx], self.K, pick(self.gt_depths),
                       pick(self.gt_poses), pick(self.gt_dists), dict(self.meta))


def validate_manifest(manifest: dict) -> None:
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    if len(manifest["frames"]) != manifest["n_frames"]:
        raise DatasetError("frame list length does not match n_frames")


def write_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    frames = []
    for k in range(ds.n_frames):
        entry = {"image": f"frames/{k:03d}.ppm", "depth": f"frames/{k:03d}_pseudo.pfm"}
        formats.write_ppm(root / entry["image"], ds.images[k])
        formats.write_pfm(root / entry["depth"], ds.depths[k])
        if ds.gt_depths is not None:
            entry["gt_depth"] = f"frames/{k:03d}_gt.pfm"
            formats.write_pfm(root / entry["gt_depth"], ds.gt_depths[k])
        if ds.gt_poses is not None:
            entry["gt_pose"] = [float(v) for v in ds.gt_poses[k]]
        if ds.gt_dists is not None:
            entry["gt_distortion"] = [float(v) for v in ds.gt_dists[k]]
        frames.append(entry)
    manifest = {"format_version": FORMAT_VERSION, "n_frames": ds.n_frames,
                "intrinsics": ds.K.to_dict(), "frames": frames, "meta": ds.meta}
    if ds.gt_poses is not None:
        manifest["gt_trajectory"] = "gt_trajectory.txt"
        formats.write_trajectory(root / "gt_trajectory.txt", cam_to_world(ds.gt_poses))
    validate_manifest(manifest)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"{root}: no manifest.json")
    manifest = json.loads(path.read_text())
    validate_manifest(manifest)
    K = geom.Intrinsics(**manifest["intrinsics"])
    images, depths, gts, poses, dists = [], [], [], [], []
    for entry in manifest["frames"]:
        for key in ("image", "depth", "gt_depth"):
            if key in entry and not (root / entry[key]).exists():
                raise DatasetError(f"{root}: missing file {entry[key]}")
        img = formats.read_ppm(root / entry["image"])
        dep = formats.read_pfm(root / entry["depth"]).astype(np.float64)
        if img.shape[:2] != (K.height, K.width) or dep.shape != (K.height, K.width):
            raise DatasetError(f"{entry['image']}: size does not match the intrinsics")
        images.append(img)
        depths.append(dep)
        if "gt_depth" in entry:
            gts.append(formats.read_pfm(root / entry["gt_depth"]).astype(np.float64))
        if "gt_pose" in entry:
            poses.append(entry["gt_pose"])
        if "gt_distortion" in entry:
            dists.append(entry["gt_distortion"])
    n = manifest["n_frames"]
    opt = (lambda xs: np.array(xs, dtype=np.float64) if len(xs) == n else None)
    return Dataset(np.stack(images), np.stack(depths), K, opt(gts), opt(poses), opt(dists),
                   manifest.get("meta", {}))


def cam_to_world(poses: np.ndarray) -> np.ndarray:
    """(N, 4, 4) camera-to-world matrices from (N, 6) world-to-camera parameters."""
    out = []
    for p in np.asarray(poses):
        T = geom.pose_to_transform(geom.PoseParam.from_vector(p)).inverse()
        out.append(T.matrix())
    return np.stack(out)
