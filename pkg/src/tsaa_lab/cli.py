"""Command line front end: ``lab generate|assign|train|eval``.

Exit status is 0 on success, 2 for bad input (files, configs, flags) and
1 for anything unexpected. Outputs depend only on the inputs, so reruns
produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .anchors import generate_from_spec
from .assignment import baseline_assign, first_stage, second_stage, decode_offsets
from .codec import CodecKind
from .config import ExperimentConfig, anchor_spec_from_dict, anchor_spec_to_dict, load_config
from .errors import ConfigError, LabError, ParseError
from .geometry import Box
from .metrics import evaluate
from .nms import Detection, nms_indices
from .scenes import crowdedness_stats, dumps_scenes, generate_scenes, read_scenes
from .trainer import AssignmentMode, RegressorParams, TrainedModel, train

log = logging.getLogger("tsaa_lab.cli")

PARAMS_FORMAT = 1


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_path(args, cfg: Optional[ExperimentConfig], default_name: Optional[str]) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        base = Path(cfg.output_dir)
        return base / default_name if default_name else base
    raise ConfigError("no output location: pass --out or set output_dir in the config")


# -- generate -------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _config(args)
    n = args.count if args.count is not None else cfg.scene_count
    scenes = generate_scenes(cfg.scenes, n)
    out = _out_path(args, cfg, "scenes.json")
    _write(out, dumps_scenes(scenes))
    inst, pairs = crowdedness_stats(scenes)
    print(f"wrote {n} scenes to {out}")
    print(f"mean instances per scene: {inst:.3f}")
    print(f"mean dense pairs per scene: {pairs:.3f}")
    return 0


# -- assign ---------------------------------------------------------------------


def _read_offsets(path: str, scene_ids: Sequence[str], n_anchors: int) -> dict[str, np.ndarray]:
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except OSError as e:
        raise ParseError(f"{p}: cannot read offsets file ({e.strerror})") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"{p}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(data, dict) or not isinstance(data.get("scenes"), list):
        raise ParseError(f"{p}: top level must be an object with a 'scenes' list")
    out = {}
    for i, rec in enumerate(data["scenes"]):
        if not isinstance(rec, dict) or "id" not in rec or "offsets" not in rec:
            raise ParseError(f"{p}: scenes[{i}] needs 'id' and 'offsets'")
        try:
            arr = np.asarray(rec["offsets"], dtype=np.float64)
        except (TypeError, ValueError):
            raise ParseError(f"{p}: scenes[{i}].offsets must be numbers") from None
        if arr.shape != (n_anchors, 4) or not np.all(np.isfinite(arr)):
            raise ParseError(f"{p}: scenes[{i}].offsets must be {n_anchors} finite rows of 4")
        out[str(rec["id"])] = arr
    missing = [s for s in scene_ids if s not in out]
    if missing:
        raise ParseError(f"{p}: no offsets for scene(s) {missing[:5]}")
    return out


def cmd_assign(args) -> int:
    cfg = _config(args)
    scenes = read_scenes(args.scenes)
    anchors = generate_from_spec(cfg.anchors)
    codec = cfg.trainer.codec_kind
    offsets = None
    if args.mode == "tsaa":
        if args.offsets:
            offsets = _read_offsets(args.offsets, [s.id for s in scenes], len(anchors))
        else:
            log.warning("no --offsets given; assuming zero offsets (TSAA then equals the baseline)")
    elif args.offsets:
        log.warning("--offsets is ignored in baseline mode")

    lines, total = [], {}
    for s in scenes:
        if args.mode == "baseline":
            lab = baseline_assign(anchors, s.array, cfg.assigner)
        else:
            first = first_stage(anchors, s.array, cfg.assigner)
            off = offsets[s.id] if offsets is not None else np.zeros((len(anchors), 4))
            lab = second_stage(first, decode_offsets(anchors, off, codec), s.array, cfg.assigner)
        rec = {"id": s.id, **lab.to_json_dict()}
        lines.append(json.dumps(rec, sort_keys=True))
        for k, v in lab.summary().items():
            total[k] = total.get(k, 0) + v
    head = json.dumps({"mode": args.mode, "summary": total}, sort_keys=True)[:-1]
    text = head + ', "scenes": [\n' + ",\n".join(lines) + "\n]}\n"
    out = _out_path(args, cfg, "assignments.json")
    _write(out, text)
    print(f"wrote {len(scenes)} labelings to {out}")
    print(" ".join(f"{k}={total[k]}" for k in sorted(total)))
    return 0


# -- train ----------------------------------------------------------------------


def params_to_json(model: TrainedModel) -> str:
    return _dump_json({
        "format": PARAMS_FORMAT,
        **model.params.to_json_dict(),
        "anchors": anchor_spec_to_dict(model.anchors_spec),
        "codec": model.codec_kind.value,
        "patch_radius": model.patch_radius,
        "grid_res": model.grid_res,
    })


def load_params(path: str | Path) -> TrainedModel:
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except OSError as e:
        raise ParseError(f"{p}: cannot read params file ({e.strerror})") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"{p}:{e.lineno}:{e.colno}: {e.msg}") from None
    need = {"format", "weights", "bias", "anchors", "codec", "patch_radius", "grid_res"}
    if not isinstance(data, dict) or need - data.keys():
        raise ParseError(f"{p}: params file needs keys {sorted(need)}")
    if data["format"] != PARAMS_FORMAT:
        raise ParseError(f"{p}: unsupported params format {data['format']!r}")
    try:
        params = RegressorParams.from_json_dict(data)
        codec = CodecKind(data["codec"])
    except (TypeError, ValueError) as e:
        raise ParseError(f"{p}: {e}") from None
    model = TrainedModel(params, anchor_spec_from_dict(data["anchors"], f"{p}: anchors"), codec,
                         int(data["patch_radius"]), int(data["grid_res"]))
    if params.feature_dim != (2 * model.patch_radius + 1) ** 2 + 4:
        raise ParseError(f"{p}: weights do not match patch_radius={model.patch_radius}")
    return model


def cmd_train(args) -> int:
    cfg = _config(args)
    tcfg = cfg.trainer if args.mode is None else replace(cfg.trainer, assignment_mode=AssignmentMode(args.mode))
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    scenes = read_scenes(args.scenes)
    params, trace = train(scenes, cfg.anchors, cfg.assigner, tcfg)
    out = _out_path(args, cfg, None)
    _write(out / "train_log.csv", trace.to_csv())
    model = TrainedModel(params, cfg.anchors, tcfg.codec_kind, tcfg.patch_radius, tcfg.grid_res)
    _write(out / "params.json", params_to_json(model))
    print(f"mode={tcfg.assignment_mode.value} epochs={tcfg.epochs} final mean MITP={trace.mean_mitp[-1]:.4f}")
    print(f"wrote {out / 'train_log.csv'} and {out / 'params.json'}")
    return 0


# -- eval -----------------------------------------------------------------------


def detect(model: TrainedModel, scenes, score_threshold: float, nms_threshold: float) -> list[list[Detection]]:
    anchors = model.anchors()
    out = []
    for s in scenes:
        boxes, scores = model.predict(s, anchors)
        keep = np.flatnonzero(scores >= score_threshold)
        kept = nms_indices(boxes[keep], scores[keep], nms_threshold)
        out.append([Detection(Box(*map(float, boxes[keep][i])), float(scores[keep][i])) for i in kept])
    return out


def cmd_eval(args) -> int:
    if not 0.0 < args.nms_threshold < 1.0:
        raise ConfigError(f"--nms-threshold must lie in (0, 1), got {args.nms_threshold}")
    if not 0.0 <= args.score_threshold <= 1.0:
        raise ConfigError(f"--score-threshold must lie in [0, 1], got {args.score_threshold}")
    model = load_params(args.params)
    scenes = read_scenes(args.scenes)
    dets = detect(model, scenes, args.score_threshold, args.nms_threshold)
    res = evaluate(dets, [s.gt_boxes for s in scenes], iou_thresh=args.iou_threshold,
                   ji_score_thresh=args.ji_score_threshold)
    res.extra = {"scenes": len(scenes), "detections": sum(len(d) for d in dets),
                 "nms_threshold": args.nms_threshold, "score_threshold": args.score_threshold,
                 "ji_score_threshold": args.ji_score_threshold, "iou_threshold": args.iou_threshold}
    out = Path(args.out)
    _write(out / "eval.json", res.to_json())
    _write(out / "eval.csv", res.to_csv())
    print(f"AP={res.ap:.4f} MR-2={res.mr2:.4f} JI={res.ji:.4f}")
    return 0


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lab", description="Anchor assignment experiments on synthetic crowds.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_config=True):
        if with_config:
            p.add_argument("--config", help="experiment config (JSON); defaults to the built-in drift setup")
            p.add_argument("--seed", type=int, help="overrides every seed in the config")
        return p

    g = common(sub.add_parser("generate", help="write a synthetic scene file"))
    g.add_argument("--out", help="scene file to write")
    g.add_argument("--count", type=int, help="number of scenes (default: scenes.count)")
    g.set_defaults(func=cmd_generate)

    a = common(sub.add_parser("assign", help="label every anchor of every scene"))
    a.add_argument("--scenes", required=True)
    a.add_argument("--mode", choices=["baseline", "tsaa"], default="baseline")
    a.add_argument("--offsets", help='predicted offsets: {"scenes": [{"id": ..., "offsets": [[tx, ty, tw, th], ...]}]}')
    a.add_argument("--out", help="labeling file to write")
    a.set_defaults(func=cmd_assign)

    t = common(sub.add_parser("train", help="train the shared linear head and log mean MITP per epoch"))
    t.add_argument("--scenes", required=True)
    t.add_argument("--mode", choices=["baseline", "tsaa"], help="overrides trainer.assignment_mode")
    t.add_argument("--epochs", type=int, help="overrides trainer.epochs")
    t.add_argument("--out", help="directory for train_log.csv and params.json")
    t.set_defaults(func=cmd_train)

    e = common(sub.add_parser("eval", help="detect, suppress and score"), with_config=False)
    e.add_argument("--scenes", required=True)
    e.add_argument("--params", required=True)
    e.add_argument("--nms-threshold", type=float, default=0.5)
    e.add_argument("--score-threshold", type=float, default=0.05, help="objectness filter before NMS")
    e.add_argument("--ji-score-threshold", type=float, default=0.0,
                   help="detections below this score are left out of the Jaccard index")
    e.add_argument("--iou-threshold", type=float, default=0.5)
    e.add_argument("--out", required=True, help="directory for eval.json and eval.csv")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except LabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
