"""A crowded setup on which anchor drift shows up in a few seconds.

Pedestrian-shaped objects (about 8 x 18) of nearly uniform size are
tiled by one square 18 x 18 anchor per 4-unit cell. A perfectly centred
anchor overlaps its object by about 0.44, so the positive threshold is
lowered to 0.4 / 0.3. Only anchors close to an object's centre become
positive, which makes neighbouring objects compete for the same anchors.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .anchors import AnchorGridSpec
from .assignment import AssignerConfig
from .scenes import SceneGenConfig, generate_scenes
from .trainer import AssignmentMode, TrainConfig, TrainLog, train


@dataclass(frozen=True)
class DriftSetup:
    scenes: SceneGenConfig
    anchors: AnchorGridSpec
    assigner: AssignerConfig
    trainer: TrainConfig
    n_scenes: int = 50

    @classmethod
    def default(cls, seed: int = 0) -> "DriftSetup":
        return cls(
            scenes=SceneGenConfig(size_sigma=0.05, aspect_sigma=0.05, seed=seed),
            anchors=AnchorGridSpec(64.0, 64.0, (4.0,), (4.5,), (1.0,)),
            assigner=AssignerConfig(nt_pos=0.4, nt_neg=0.3),
            trainer=TrainConfig(seed=seed),
        )


def run_both_modes(setup: DriftSetup) -> dict[AssignmentMode, TrainLog]:
    """Train the baseline and TSAA on the same scenes from the same initial parameters."""
    scenes = generate_scenes(setup.scenes, setup.n_scenes)
    logs = {}
    for mode in (AssignmentMode.FIXED_BASELINE, AssignmentMode.TSAA):
        _, log = train(scenes, setup.anchors, setup.assigner, replace(setup.trainer, assignment_mode=mode))
        logs[mode] = log
    return logs
