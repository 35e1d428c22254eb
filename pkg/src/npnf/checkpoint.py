"""Save and restore a full training state in the binary block format."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from npnf import ad, formats
from npnf.field import FieldConfig, FieldParams
from npnf.losses import LossWeights
from npnf.render import RenderConfig
from npnf.trainer import TrainConfig, TrainState


def _text_block(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def _read_text_block(vals: np.ndarray):
    return json.loads(vals.astype(np.uint8).tobytes().decode("utf-8"))


def save(path, state: TrainState, train: TrainConfig, field: FieldConfig, render: RenderConfig,
         weights: LossWeights, train_indices=None, extra: dict | None = None) -> Path:
    meta = {
        "train": asdict(train), "field": field.to_dict(), "render": asdict(render),
        "weights": asdict(weights), "epoch": state.epoch, "step": state.step,
        "phase1_done_at": state.phase1_done_at, "n_frames": state.n_frames,
        "train_indices": list(range(state.n_frames)) if train_indices is None
        else [int(i) for i in train_indices],
        "adam_nerf_step": state.adam_nerf.step, "adam_pose_step": state.adam_pose.step,
        "extra": extra or {},
    }
    blocks = {
        "META": _text_block(meta),
        "THET": state.field.flat,
        "POSE": state.poses,
        "DIST": state.dists,
        "ANM1": state.adam_nerf.m,
        "ANV1": state.adam_nerf.v,
        "APM1": state.adam_pose.m,
        "APV1": state.adam_pose.v,
        "RNG0": formats.encode_rng(state.rng),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    formats.write_blocks(tmp, blocks)
    tmp.replace(path)
    return path


class Checkpoint:
    """A loaded checkpoint: the state plus the configuration it was trained with."""

    def __init__(self, path):
        blocks = formats.read_blocks(path)
        missing = {"META", "THET", "POSE", "DIST"} - set(blocks)
        if missing:
            raise formats.FormatError(f"{path}: missing blocks {sorted(missing)}")
        self.path = Path(path)
        self.meta = _read_text_block(blocks["META"])
        self.train = TrainConfig(**self.meta["train"])
        self.field = FieldConfig(**self.meta["field"])
        self.render = RenderConfig(**self.meta["render"])
        self.weights = LossWeights(**self.meta["weights"])
        self.train_indices = list(self.meta["train_indices"])
        n = self.meta["n_frames"]
        self.state = TrainState(
            field=FieldParams(self.field, blocks["THET"]),
            poses=blocks["POSE"].reshape(n, 6),
            dists=blocks["DIST"].reshape(n, 2),
            adam_nerf=ad.AdamState(blocks["ANM1"], blocks["ANV1"], self.meta["adam_nerf_step"]),
            adam_pose=ad.AdamState(blocks["APM1"], blocks["APV1"], self.meta["adam_pose_step"]),
            rng=formats.decode_rng(blocks["RNG0"]),
            epoch=self.meta["epoch"], step=self.meta["step"],
            phase1_done_at=self.meta["phase1_done_at"],
        )


def load(path) -> Checkpoint:
    return Checkpoint(path)
