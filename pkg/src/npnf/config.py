"""Run configuration: defaults, an optional JSON file, then command-line flags.

A config file is a JSON object with any of these sections::

    {
      "dataset": "data/fixture",
      "out": "runs/fixture",
      "preset": "desk",
      "train":   {"rays_per_image": 64, "phase1_epochs": 200, ...},   # TrainConfig fields
      "weights": {"lambda1": 0.04, "lambda2": 1.0, "lambda3": 1.0},
      "render":  {"h_near": 0.1, "h_far": 10.0},
      "field":   {"n_layers": 3, "width": 64},
      "eval":    {"pose": true, "depth": true, "nvs": false},
      "checkpoint_every": 50,
      "holdout": true
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import jsonschema

from npnf.field import FieldConfig
from npnf.losses import LossWeights
from npnf.render import RenderConfig
from npnf.trainer import TrainConfig

# "full" keeps the dataclass defaults; "desk" finishes on one CPU core in minutes
PRESETS = {
    "full": {"train": {}, "field": {}},
    "desk": {
        "train": {"rays_per_image": 64, "samples_per_ray": 32, "cloud_points": 256,
                  "lr_pose_dist": 5e-3, "phase1_epochs": 200, "phase2_epochs": 500},
        "field": {"n_layers": 3, "width": 64},
    },
}


def _section(cls) -> dict:
    types = {"int": "integer", "float": "number", "bool": "boolean", "str": "string"}
    props = {f.name: {"type": types[str(f.type)]} for f in fields(cls) if str(f.type) in types}
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "properties": {
        "dataset": {"type": "string"},
        "out": {"type": "string"},
        "preset": {"enum": sorted(PRESETS)},
        "train": _section(TrainConfig),
        "weights": _section(LossWeights),
        "render": _section(RenderConfig),
        "field": _section(FieldConfig),
        "eval": {"type": "object", "properties": {k: {"type": "boolean"}
                                                  for k in ("pose", "depth", "nvs")},
                 "additionalProperties": False},
        "checkpoint_every": {"type": "integer", "minimum": 0},
        "holdout": {"type": "boolean"},
    },
    "additionalProperties": False,
}


@dataclass
class RunConfig:
    dataset: str | None = None
    out: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    render: RenderConfig = field(default_factory=RenderConfig)
    field_config: FieldConfig = field(default_factory=FieldConfig)
    eval: dict = field(default_factory=lambda: {"pose": True, "depth": True, "nvs": False})
    checkpoint_every: int = 50
    holdout: bool = True

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "out": self.out, "train": asdict(self.train),
                "weights": asdict(self.weights), "render": self.render.to_dict(),
                "field": self.field_config.to_dict(), "eval": dict(self.eval),
                "checkpoint_every": self.checkpoint_every, "holdout": self.holdout}

    def validate_paths(self) -> None:
        if self.dataset is None or not (Path(self.dataset) / "manifest.json").exists():
            raise FileNotFoundError(f"dataset {self.dataset!r} has no manifest.json")


def load_file(path) -> dict:
    data = json.loads(Path(path).read_text())
    jsonschema.validate(data, CONFIG_SCHEMA)
    return data


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build(file_data: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Resolve defaults < preset < config file < flag overrides.

    ``overrides`` uses the same nested layout as the file; ``None`` values
    (flags that were not given) are ignored.
    """
    file_data = file_data or {}
    overrides = _drop_none(overrides or {})
    preset = overrides.get("preset", file_data.get("preset", "full"))
    merged = _merge(_merge(PRESETS[preset], file_data), overrides)
    jsonschema.validate(merged, CONFIG_SCHEMA)
    cfg = RunConfig()
    return RunConfig(
        dataset=merged.get("dataset"),
        out=merged.get("out"),
        train=replace(cfg.train, **merged.get("train", {})),
        weights=replace(cfg.weights, **merged.get("weights", {})),
        render=replace(cfg.render, **merged.get("render", {})),
        field_config=replace(cfg.field_config, **merged.get("field", {})),
        eval=_merge(cfg.eval, merged.get("eval", {})),
        checkpoint_every=merged.get("checkpoint_every", cfg.checkpoint_every),
        holdout=merged.get("holdout", cfg.holdout),
    )


def _drop_none(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            v = _drop_none(v)
            if v:
                out[k] = v
        elif v is not None:
            out[k] = v
    return out
