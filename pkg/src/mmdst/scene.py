"""Synthetic CATER-like scenes and a parametric perception front-end.

Scenes are small object sets with attribute tuples, piecewise-linear box
trajectories and action timelines. ``perceive`` and ``segment_features``
stand in for the object detector and the clip-level video encoder.
"""

from __future__ import annotations

import itertools
import json
import math
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Attribute labels are kept in sorted order so that the itertools.product
# order is also the lexicographic order of the label strings.
SIZES = ("large", "medium", "small")
COLORS = ("blue", "brown", "cyan", "gold", "gray", "green", "purple", "red", "yellow")
MATERIALS = ("metal", "rubber")
SHAPES = ("cone", "cube", "cylinder", "snitch", "sphere")

SLOTS = ("size", "color", "material", "shape")
SLOT_VALUES = {"size": SIZES, "color": COLORS, "material": MATERIALS, "shape": SHAPES}
MAX_CLASSES = len(SIZES) * len(COLORS) * len(MATERIALS) * len(SHAPES)
DEFAULT_NUM_CLASSES = 193

ACTIONS = ("rotate", "slide", "fly", "contain", "no_action")
ACTION_WEIGHTS = (0.3, 0.3, 0.25, 0.1, 0.05)
MOVING_ACTIONS = ("slide", "fly")

# half extent of a box per size label, in normalized frame units
_HALF_EXTENT = {"small": 0.04, "medium": 0.06, "large": 0.08}
_MIN_BOX_SIDE = 1e-3


class ConfigError(ValueError):
    pass


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeUniverse:
    sizes: tuple[str, ...]
    colors: tuple[str, ...]
    materials: tuple[str, ...]
    shapes: tuple[str, ...]
    valid_classes: tuple[tuple[str, str, str, str], ...]

    @property
    def num_classes(self) -> int:
        return len(self.valid_classes)

    def attributes(self, class_index: int) -> dict[str, str]:
        return dict(zip(SLOTS, self.valid_classes[class_index]))

    def class_of(self, attrs: Sequence[str]) -> int:
        return self.valid_classes.index(tuple(attrs))


def build_universe(num_valid_classes: int = DEFAULT_NUM_CLASSES) -> AttributeUniverse:
    """First ``num_valid_classes`` tuples of the ordered attribute product."""
    if not 1 <= num_valid_classes <= MAX_CLASSES:
        raise ConfigError(
            f"num_valid_classes must be in [1, {MAX_CLASSES}], got {num_valid_classes}"
        )
    product = itertools.product(SIZES, COLORS, MATERIALS, SHAPES)
    valid = tuple(itertools.islice(product, num_valid_classes))
    return AttributeUniverse(SIZES, COLORS, MATERIALS, SHAPES, valid)


@dataclass(frozen=True)
class ActionEvent:
    kind: str
    start_frame: int
    end_frame: int

    def overlap(self, start: int, end: int) -> int:
        """Number of shared frame steps with the closed window [start, end], -1 if disjoint."""
        lo, hi = max(self.start_frame, start), min(self.end_frame, end)
        return hi - lo if lo <= hi else -1


Box = tuple[float, float, float, float]


@dataclass
class SceneObject:
    class_index: int
    attributes: tuple[str, str, str, str]
    keyframes: list[tuple[int, Box]]
    actions: list[ActionEvent]

    def box_at(self, frame: int) -> Box:
        """Linear interpolation between keyframes, constant outside them."""
        kf = self.keyframes
        if frame <= kf[0][0]:
            return kf[0][1]
        for (f0, b0), (f1, b1) in zip(kf, kf[1:]):
            if f0 <= frame <= f1:
                if f1 == f0:
                    return b1
                w = (frame - f0) / (f1 - f0)
                return tuple(a + w * (b - a) for a, b in zip(b0, b1))  # type: ignore[return-value]
        return kf[-1][1]

    def trajectory(self, num_frames: int) -> np.ndarray:
        return np.array([self.box_at(f) for f in range(1, num_frames + 1)])


@dataclass
class SceneSpec:
    scene_id: str
    num_frames: int
    objects: list[SceneObject]
    rng_seed: int
    num_classes: int = DEFAULT_NUM_CLASSES

    def object_by_class(self, class_index: int) -> SceneObject:
        for obj in self.objects:
            if obj.class_index == class_index:
                return obj
        raise KeyError(class_index)

    def to_json(self) -> str:
        doc = {
            "scene_id": self.scene_id,
            "num_frames": self.num_frames,
            "num_classes": self.num_classes,
            "objects": [
                {
                    "class_index": o.class_index,
                    "attributes": list(o.attributes),
                    "actions": [
                        {"kind": a.kind, "start": a.start_frame, "end": a.end_frame}
                        for a in o.actions
                    ],
                    "trajectory_keyframes": [[f, list(b)] for f, b in o.keyframes],
                    "interpolation": "linear",
                }
                for o in self.objects
            ],
            "rng_seed": self.rng_seed,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        doc = json.loads(text)
        objects = [
            SceneObject(
                class_index=o["class_index"],
                attributes=tuple(o["attributes"]),
                keyframes=[(int(f), tuple(b)) for f, b in o["trajectory_keyframes"]],
                actions=[ActionEvent(a["kind"], a["start"], a["end"]) for a in o["actions"]],
            )
            for o in doc["objects"]
        ]
        return cls(doc["scene_id"], doc["num_frames"], objects, doc["rng_seed"],
                   doc.get("num_classes", DEFAULT_NUM_CLASSES))


def _sample_events(rng: np.random.Generator, num_frames: int) -> list[ActionEvent]:
    n_events = int(rng.integers(1, 5))
    n_events = min(n_events, num_frames // 2)
    cuts = np.sort(rng.choice(np.arange(1, num_frames + 1), size=2 * n_events, replace=False))
    kinds = rng.choice(len(ACTIONS), size=n_events, p=ACTION_WEIGHTS)
    return [
        ActionEvent(ACTIONS[k], int(cuts[2 * i]), int(cuts[2 * i + 1]))
        for i, k in enumerate(kinds)
    ]


def _box(cx: float, cy: float, half: float) -> Box:
    return (round(cx - half, 4), round(cy - half, 4), round(cx + half, 4), round(cy + half, 4))


def generate_scene(
    universe: AttributeUniverse,
    num_frames: int = 300,
    num_objects: int = 6,
    seed: int = 0,
    scene_id: str | None = None,
) -> SceneSpec:
    if num_frames < 2:
        raise GenerationError("num_frames must be >= 2")
    if num_objects > universe.num_classes:
        raise GenerationError(
            f"cannot place {num_objects} distinct objects with {universe.num_classes} classes"
        )
    if num_objects < 1:
        raise GenerationError("num_objects must be >= 1")
    rng = np.random.default_rng(seed)
    classes = sorted(int(c) for c in rng.choice(universe.num_classes, num_objects, replace=False))
    objects = []
    for cls in classes:
        attrs = universe.valid_classes[cls]
        half = _HALF_EXTENT[attrs[0]]
        cx, cy = rng.uniform(half, 1 - half, size=2)
        box = _box(cx, cy, half)
        events = _sample_events(rng, num_frames)
        keyframes: list[tuple[int, Box]] = [(1, box)]
        for ev in events:
            if ev.kind in MOVING_ACTIONS:
                if keyframes[-1][0] != ev.start_frame:
                    keyframes.append((ev.start_frame, box))
                cx, cy = rng.uniform(half, 1 - half, size=2)
                box = _box(cx, cy, half)
                keyframes.append((ev.end_frame, box))
        objects.append(SceneObject(cls, attrs, keyframes, events))
    return SceneSpec(scene_id or f"scene_{seed:08d}", num_frames, objects, seed, universe.num_classes)


def sampled_frames(num_frames: int, n_stride: int) -> list[int]:
    return list(range(1, num_frames + 1, n_stride))


@dataclass(frozen=True)
class PerceptionConfig:
    detection_recall: float = 1.0
    class_confusion_rate: float = 0.0
    box_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("detection_recall", "class_confusion_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.box_noise_sigma < 0:
            raise ConfigError("box_noise_sigma must be >= 0")

    @property
    def is_perfect(self) -> bool:
        return (self.detection_recall == 1.0 and self.class_confusion_rate == 0.0
                and self.box_noise_sigma == 0.0)


PERFECT_PERCEPTION = PerceptionConfig()


@dataclass(frozen=True)
class Detection:
    class_index: int
    box: Box
    source: int  # class index of the true object that produced it


@dataclass
class PerceivedVideo:
    scene_id: str
    num_frames: int
    n_stride: int
    frames: list[int]
    detections: list[list[Detection]] = field(default_factory=list)

    def detected_classes(self) -> list[int]:
        return sorted({d.class_index for dets in self.detections for d in dets})


def clamp_box(box: Sequence[float]) -> Box:
    x1, y1, x2, y2 = (float(v) for v in box)
    x1, x2 = min(x1, x2), max(x1, x2)
    y1, y2 = min(y1, y2), max(y1, y2)
    x1 = min(max(x1, 0.0), 1.0 - _MIN_BOX_SIDE)
    y1 = min(max(y1, 0.0), 1.0 - _MIN_BOX_SIDE)
    x2 = min(max(x2, x1 + _MIN_BOX_SIDE), 1.0)
    y2 = min(max(y2, y1 + _MIN_BOX_SIDE), 1.0)
    return (x1, y1, x2, y2)


def perceive(scene: SceneSpec, cfg: PerceptionConfig, n_obj: int = 10, n_stride: int = 12) -> PerceivedVideo:
    """Simulated detector output on the sampled frame grid.

    Every random quantity is drawn for every (frame, object) pair whatever the
    configuration, so two configs sharing a seed share their coins: lowering
    recall only removes detections.
    """
    if n_stride < 1:
        raise ConfigError("n_stride must be >= 1")
    frames = sampled_frames(scene.num_frames, n_stride)
    n_f, n_o = len(frames), len(scene.objects)
    rng = np.random.default_rng([cfg.seed, scene.rng_seed])
    keep_coin = rng.uniform(size=(n_f, n_o))
    confuse_coin = rng.uniform(size=(n_f, n_o))
    other_class = rng.integers(0, max(scene.num_classes - 1, 1), size=(n_f, n_o))
    noise = rng.standard_normal(size=(n_f, n_o, 4))

    out = PerceivedVideo(scene.scene_id, scene.num_frames, n_stride, frames)
    for fi, frame in enumerate(frames):
        dets = []
        for oi, obj in enumerate(scene.objects):
            if keep_coin[fi, oi] >= cfg.detection_recall:
                continue
            cls = obj.class_index
            if confuse_coin[fi, oi] < cfg.class_confusion_rate and scene.num_classes > 1:
                r = int(other_class[fi, oi])
                cls = r if r < obj.class_index else r + 1
            box = obj.box_at(frame)
            if cfg.box_noise_sigma > 0:
                box = clamp_box(np.asarray(box) + cfg.box_noise_sigma * noise[fi, oi])
            dets.append(Detection(cls, tuple(box), obj.class_index))
        dets.sort(key=lambda d: (d.class_index, d.source))
        out.detections.append(dets[:n_obj])
    return out


@lru_cache(maxsize=None)
def _basis(d_cnn: int, *key: int) -> np.ndarray:
    v = np.random.default_rng([7919, *key]).standard_normal(d_cnn) / math.sqrt(d_cnn)
    v.setflags(write=False)
    return v


def segment_features(scene: SceneSpec, n_stride: int = 12, d_cnn: int = 64, seed: int = 0) -> np.ndarray:
    """One vector per sampled segment, shape (num_segments, d_cnn).

    A segment vector is the sum of fixed per-(class, action) basis vectors for
    every action active in the segment, a fixed per-index positional vector and
    N(0, 0.01^2) noise.
    """
    if d_cnn < 8:
        raise ConfigError("d_cnn must be >= 8")
    frames = sampled_frames(scene.num_frames, n_stride)
    rng = np.random.default_rng([seed, scene.rng_seed, 104729])
    feats = np.zeros((len(frames), d_cnn))
    for m, f0 in enumerate(frames):
        f1 = min(f0 + n_stride - 1, scene.num_frames)
        for obj in scene.objects:
            for ev in obj.actions:
                if ev.overlap(f0, f1) >= 0:
                    feats[m] += _basis(d_cnn, 0, obj.class_index, ACTIONS.index(ev.kind))
        feats[m] += 0.5 * _basis(d_cnn, 1, m)
    feats += 0.01 * rng.standard_normal(feats.shape)
    return feats
