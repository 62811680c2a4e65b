"""Experiment configuration files.

A config is one JSON object; every section is optional and unknown keys
are errors::

    {
      "scenes":   {"count": 50, "seed": 0, "mean_instances": 12.0, ...},
      "anchors":  {"kind": "grid", "image_w": 64, "image_h": 64,
                   "strides": [4], "scales_per_level": [4.5], "ratios": [1.0]},
      "assigner": {"preset": "retinanet", "nt_pos": 0.4, ...},
      "trainer":  {"epochs": 300, "learning_rate": 0.02, ...},
      "output_dir": "runs/demo"
    }

``anchors.kind`` is ``"grid"`` or ``"prior"`` (``grid_w``, ``grid_h``,
``stride``, ``priors: [[w, h], ...]``). ``assigner.preset`` names one of the
:class:`AssignerConfig` constructors; explicit keys override it. Missing
sections default to :meth:`DriftSetup.default`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .anchors import AnchorGridSpec, PriorGridSpec, generate_from_spec
from .assignment import AssignerConfig
from .drift import DriftSetup
from .errors import ConfigError, LabError
from .scenes import SceneGenConfig
from .trainer import TrainConfig, check_consistency

_PRESETS = {
    "retinanet": AssignerConfig.retinanet,
    "faster_rcnn_rpn": AssignerConfig.faster_rcnn_rpn,
    "faster_rcnn_rcnn": AssignerConfig.faster_rcnn_rcnn,
    "yolo": AssignerConfig.yolo,
}
_TOP_KEYS = {"scenes", "anchors", "assigner", "trainer", "output_dir"}


@dataclass(frozen=True)
class ExperimentConfig:
    scenes: SceneGenConfig
    anchors: AnchorGridSpec | PriorGridSpec
    assigner: AssignerConfig
    trainer: TrainConfig
    scene_count: int = 50
    output_dir: Optional[str] = None

    def __post_init__(self) -> None:
        if self.scene_count < 1:
            raise ConfigError("scenes.count must be >= 1")
        check_consistency(generate_from_spec(self.anchors), self.assigner, self.trainer.codec_kind)

    @classmethod
    def default(cls) -> "ExperimentConfig":
        d = DriftSetup.default()
        return cls(d.scenes, d.anchors, d.assigner, d.trainer, d.n_scenes)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, scenes=replace(self.scenes, seed=seed), trainer=replace(self.trainer, seed=seed))


def _build(cls, section: str, data: dict, base=None):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {unknown}")
    for f in fields(cls):
        v = data.get(f.name)
        if f.type == "int" and f.name in data and (isinstance(v, bool) or not isinstance(v, int)):
            raise ConfigError(f"{section}.{f.name}: expected an integer, got {v!r}")
    try:
        return replace(base, **data) if base is not None else cls(**data)
    except TypeError as e:
        raise ConfigError(f"{section}: {e}") from None
    except ValueError as e:
        # enum coercion failures
        raise ConfigError(f"{section}: {e}") from None


def anchor_spec_to_dict(spec: AnchorGridSpec | PriorGridSpec) -> dict:
    if isinstance(spec, AnchorGridSpec):
        return {"kind": "grid", "image_w": spec.image_w, "image_h": spec.image_h,
                "strides": list(spec.strides), "scales_per_level": list(spec.scales_per_level),
                "ratios": list(spec.ratios)}
    return {"kind": "prior", "grid_w": spec.grid_w, "grid_h": spec.grid_h, "stride": spec.stride,
            "priors": [list(p) for p in spec.priors]}


def anchor_spec_from_dict(data: dict, section: str = "anchors") -> AnchorGridSpec | PriorGridSpec:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    body = dict(data)
    kind = body.pop("kind", "grid")
    if kind == "grid":
        for key in ("strides", "scales_per_level", "ratios"):
            if key in body and not isinstance(body[key], list):
                raise ConfigError(f"{section}.{key}: expected a list")
        body = {k: tuple(v) if isinstance(v, list) else v for k, v in body.items()}
        return _build(AnchorGridSpec, section, body)
    if kind == "prior":
        if "priors" in body:
            if not isinstance(body["priors"], list) or any(
                    not isinstance(p, list) or len(p) != 2 for p in body["priors"]):
                raise ConfigError(f"{section}.priors: expected a list of [w, h] pairs")
            body["priors"] = tuple(tuple(p) for p in body["priors"])
        return _build(PriorGridSpec, section, body)
    raise ConfigError(f"{section}.kind: expected 'grid' or 'prior', got {kind!r}")


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be an object")
    unknown = sorted(set(data) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {unknown}")
    for key in ("scenes", "anchors", "assigner", "trainer"):
        if key in data and not isinstance(data[key], dict):
            raise ConfigError(f"{key}: expected an object")
    base = ExperimentConfig.default()

    scenes_raw = dict(data.get("scenes", {}))
    count = scenes_raw.pop("count", base.scene_count)
    if isinstance(count, bool) or not isinstance(count, int):
        raise ConfigError("scenes.count: expected an integer")
    scenes = _build(SceneGenConfig, "scenes", scenes_raw, base.scenes)

    anchors = anchor_spec_from_dict(data["anchors"]) if "anchors" in data else base.anchors

    assigner_raw = dict(data.get("assigner", {}))
    preset = assigner_raw.pop("preset", None)
    if preset is None:
        assigner_base = base.assigner
    elif preset in _PRESETS:
        assigner_base = _PRESETS[preset]()
    else:
        raise ConfigError(f"assigner.preset: expected one of {sorted(_PRESETS)}, got {preset!r}")
    assigner = _build(AssignerConfig, "assigner", assigner_raw, assigner_base)

    trainer = _build(TrainConfig, "trainer", data.get("trainer", {}), base.trainer)

    out = data.get("output_dir")
    if out is not None and not isinstance(out, str):
        raise ConfigError("output_dir: expected a string")
    return ExperimentConfig(scenes, anchors, assigner, trainer, count, out)


def load_config(path: Optional[str | Path]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig.default()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{p}: cannot read config ({e.strerror})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}:{e.lineno}:{e.colno}: {e.msg}") from None
    try:
        return config_from_dict(data)
    except LabError as e:
        raise type(e)(f"{p}: {e}") from None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(obj):
        return {k: (v.value if hasattr(v, "value") else v) for k, v in dataclasses.asdict(obj).items()}

    scenes = plain(cfg.scenes)
    scenes["count"] = cfg.scene_count
    out = {"scenes": scenes, "anchors": anchor_spec_to_dict(cfg.anchors),
           "assigner": plain(cfg.assigner), "trainer": plain(cfg.trainer)}
    if cfg.output_dir is not None:
        out["output_dir"] = cfg.output_dir
    return out
