"""Synthetic crowded scenes.

Boxes are scattered around a few cluster centers with log-normal heights
and H/W aspects. Crowding is controlled by contracting every cluster toward
its center: each scene gets a dense-pair quota, the contraction factor whose
pair count best meets the quota is kept, and quotas are then nudged until
the batch mean is close to ``target_dense_pairs``. A *dense pair* is an
unordered pair of boxes with IoU > 0.5.

Scene file format::

    {"scenes": [{"id": "scene_00000", "w": 64.0, "h": 64.0,
                 "boxes": [[cx, cy, w, h], ...]}, ...]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, GenerationError, ParseError, ValidationError
from .geometry import Box, boxes_to_array, pairwise_iou

DENSE_IOU = 0.5
# contraction factors tried per scene, loosest first
_LAMBDAS = np.geomspace(2.0, 0.02, 64)
_BOUND_TOL = 1e-9
# fresh layouts tried when a scene's quota is outside what its layout can reach
_REDRAWS = 10


@dataclass
class Scene:
    id: str
    scene_w: float
    scene_h: float
    gt_boxes: list[Box] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not (self.scene_w > 0 and self.scene_h > 0):
            raise ValidationError(f"scene {self.id!r}: extents must be positive")
        if not self.gt_boxes:
            raise ValidationError(f"scene {self.id!r}: needs at least one box")
        for k, b in enumerate(self.gt_boxes):
            x1, y1, x2, y2 = b.corners
            if (x1 < -_BOUND_TOL or y1 < -_BOUND_TOL or x2 > self.scene_w + _BOUND_TOL
                    or y2 > self.scene_h + _BOUND_TOL):
                raise ValidationError(f"scene {self.id!r}: box {k} leaves the scene bounds")

    @property
    def array(self) -> np.ndarray:
        return boxes_to_array(self.gt_boxes)


@dataclass(frozen=True)
class SceneGenConfig:
    scene_w: float = 64.0
    scene_h: float = 64.0
    mean_instances: float = 12.0
    target_dense_pairs: float = 2.4
    aspect_mu: float = math.log(2.2)
    aspect_sigma: float = 0.15
    size_mu: float = math.log(18.0)
    size_sigma: float = 0.2
    cluster_count: int = 3
    seed: int = 0
    min_instances: int = 8
    max_instances: Optional[int] = 20
    cluster_spread: float = 0.18  # offset std as a fraction of min(scene_w, scene_h)
    max_rounds: int = 20

    def __post_init__(self) -> None:
        positive = ("scene_w", "scene_h", "mean_instances", "aspect_sigma", "size_sigma", "cluster_spread")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"scene config: {name} must be positive")
        if self.target_dense_pairs < 0:
            raise ConfigError("scene config: target_dense_pairs must be non-negative")
        if self.cluster_count < 1 or self.min_instances < 1:
            raise ConfigError("scene config: cluster_count and min_instances must be >= 1")
        if self.max_instances is not None and self.max_instances < self.min_instances:
            raise ConfigError("scene config: max_instances < min_instances")

    @classmethod
    def crowdhuman_like(cls, seed: int = 0) -> "SceneGenConfig":
        """Calibrated to 22.64 instances and 2.40 dense pairs per image."""
        return cls(scene_w=128.0, scene_h=128.0, mean_instances=22.64, target_dense_pairs=2.40,
                   size_mu=math.log(26.0), cluster_count=4, seed=seed,
                   min_instances=1, max_instances=None, cluster_spread=0.2)


def dense_pair_count(boxes: np.ndarray) -> int:
    n = boxes.shape[0]
    if n < 2:
        return 0
    ious = pairwise_iou(boxes, boxes)
    return int(np.sum(np.triu(ious > DENSE_IOU, k=1)))


def crowdedness_stats(scenes: Sequence[Scene]) -> tuple[float, float]:
    """Mean instances per scene and mean dense pairs per scene."""
    if not scenes:
        raise ValidationError("crowdedness_stats needs at least one scene")
    inst = [len(s.gt_boxes) for s in scenes]
    pairs = [dense_pair_count(s.array) for s in scenes]
    return float(np.mean(inst)), float(np.mean(pairs))


@dataclass
class _Draft:
    centers: np.ndarray  # cluster center per instance
    offsets: np.ndarray
    sizes: np.ndarray  # (w, h)
    counts: np.ndarray  # dense pairs at each contraction factor

    def boxes(self, lam: float, w: float, h: float) -> np.ndarray:
        # clamp centers so every box stays whole inside the scene
        half = self.sizes / 2
        c = self.centers + lam * self.offsets
        c[:, 0] = np.clip(c[:, 0], half[:, 0], w - half[:, 0])
        c[:, 1] = np.clip(c[:, 1], half[:, 1], h - half[:, 1])
        return np.column_stack([c, self.sizes])


def _draft(cfg: SceneGenConfig, rng: np.random.Generator) -> _Draft:
    n = int(rng.poisson(cfg.mean_instances))
    n = max(n, cfg.min_instances)
    if cfg.max_instances is not None:
        n = min(n, cfg.max_instances)
    k = min(cfg.cluster_count, n)
    W, H = cfg.scene_w, cfg.scene_h
    hubs = np.column_stack([rng.uniform(0.15 * W, 0.85 * W, k), rng.uniform(0.15 * H, 0.85 * H, k)])
    member = rng.integers(0, k, n)
    offsets = rng.normal(0.0, cfg.cluster_spread * min(W, H), size=(n, 2))
    heights = np.exp(rng.normal(cfg.size_mu, cfg.size_sigma, n))
    aspects = np.exp(rng.normal(cfg.aspect_mu, cfg.aspect_sigma, n))
    sizes = np.column_stack([np.minimum(heights / aspects, 0.9 * W), np.minimum(heights, 0.9 * H)])
    d = _Draft(hubs[member], offsets, sizes, np.zeros(len(_LAMBDAS), dtype=np.int64))
    d.counts = np.array([dense_pair_count(d.boxes(lam, W, H)) for lam in _LAMBDAS])
    return d


def _pick(counts: np.ndarray, quota: int) -> int:
    # argmin returns the first hit, i.e. the loosest placement meeting the quota
    return int(np.argmin(np.abs(counts - quota)))


def _step(counts: np.ndarray, current: int, step: int) -> int:
    """Loosest placement whose count is the nearest one strictly above (below) ``current``."""
    ok = counts > current if step > 0 else counts < current
    gap = np.where(ok, np.abs(counts - current), np.iinfo(np.int64).max)
    return int(np.argmin(gap))


def generate_scenes(cfg: SceneGenConfig, n: int) -> list[Scene]:
    if n < 1:
        raise ConfigError("generate_scenes needs n >= 1")
    children = np.random.SeedSequence(cfg.seed).spawn(n)
    drafts, quotas = [], []
    for child in children:
        rng = np.random.default_rng(child)
        quota = int(rng.poisson(cfg.target_dense_pairs))
        d = _draft(cfg, rng)
        for _ in range(_REDRAWS):
            if d.counts.min() <= quota <= d.counts.max():
                break
            d = _draft(cfg, rng)
        drafts.append(d)
        quotas.append(quota)
    choice = np.array([_pick(d.counts, q) for d, q in zip(drafts, quotas)])

    def achieved() -> np.ndarray:
        return np.array([d.counts[c] for d, c in zip(drafts, choice)])

    target = cfg.target_dense_pairs
    tol = 0.1 * target
    quotas = np.array(quotas)
    for _ in range(cfg.max_rounds * n):
        got = achieved()
        gap = target - got.mean()
        if abs(gap) <= tol:
            break
        step = 1 if gap > 0 else -1
        # the scene whose quota is furthest behind in the needed direction
        slack = (quotas - got) * step
        movable = [s for s in np.argsort(-slack, kind="stable")
                   if (drafts[s].counts.max() > got[s] if step > 0 else got[s] > drafts[s].counts.min())]
        if not movable:
            break
        s = movable[0]
        choice[s] = _step(drafts[s].counts, int(got[s]), step)
        quotas[s] = drafts[s].counts[choice[s]]

    mean_pairs = achieved().mean()
    if abs(mean_pairs - target) > 0.2 * target + 1e-12:
        raise GenerationError(
            f"target_dense_pairs={target} is unreachable: best batch mean is {mean_pairs:.3f} dense pairs "
            f"per scene with mean_instances={cfg.mean_instances}")

    scenes = []
    for i, (d, c) in enumerate(zip(drafts, choice)):
        arr = d.boxes(_LAMBDAS[c], cfg.scene_w, cfg.scene_h)
        boxes = [Box(*map(float, row)) for row in arr]
        scenes.append(Scene(f"scene_{i:05d}", float(cfg.scene_w), float(cfg.scene_h), boxes))
    return scenes


# -- file I/O -----------------------------------------------------------------


def scene_to_dict(s: Scene) -> dict:
    return {"id": s.id, "w": s.scene_w, "h": s.scene_h, "boxes": [list(b.as_tuple()) for b in s.gt_boxes]}


def dumps_scenes(scenes: Sequence[Scene]) -> str:
    lines = [json.dumps(scene_to_dict(s)) for s in scenes]
    return '{"scenes": [\n' + ",\n".join(lines) + "\n]}\n"


def write_scenes(scenes: Sequence[Scene], path: str | Path) -> None:
    Path(path).write_text(dumps_scenes(scenes), encoding="utf-8")


def _num(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{where}: expected a number, got {value!r}")
    return float(value)


def parse_scenes(text: str, source: str = "<string>") -> list[Scene]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{source}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(data, dict) or not isinstance(data.get("scenes"), list):
        raise ParseError(f"{source}: top level must be an object with a 'scenes' list")
    out = []
    for i, rec in enumerate(data["scenes"]):
        where = f"{source}: scenes[{i}]"
        if not isinstance(rec, dict):
            raise ParseError(f"{where}: expected an object")
        missing = {"id", "w", "h", "boxes"} - rec.keys()
        if missing:
            raise ParseError(f"{where}: missing field(s) {sorted(missing)}")
        if not isinstance(rec["boxes"], list):
            raise ParseError(f"{where}.boxes: expected a list")
        boxes = []
        for k, raw in enumerate(rec["boxes"]):
            bwhere = f"{where}.boxes[{k}]"
            if not isinstance(raw, list) or len(raw) != 4:
                raise ParseError(f"{bwhere}: expected [cx, cy, w, h]")
            vals = [_num(v, bwhere) for v in raw]
            try:
                boxes.append(Box(*vals))
            except ValidationError as e:
                raise ValidationError(f"{bwhere}: {e}") from None
        try:
            out.append(Scene(str(rec["id"]), _num(rec["w"], f"{where}.w"), _num(rec["h"], f"{where}.h"), boxes))
        except ValidationError as e:
            raise ValidationError(f"{where}: {e}") from None
    return out


def read_scenes(path: str | Path) -> list[Scene]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"{p}: cannot read scene file ({e.strerror})") from None
    return parse_scenes(text, str(p))
