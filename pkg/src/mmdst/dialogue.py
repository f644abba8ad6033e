"""Template dialogues over synthetic scenes with per-turn gold states.

Each question is backed by a small program that ``execute_question`` runs
against the scene, so answers are exact. Objects are referred to by a minimal
distinguishing attribute subset; the gold state accumulates exactly the
attributes that were uttered.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .scene import (
    AttributeUniverse,
    GenerationError,
    SceneObject,
    SceneSpec,
    SLOT_VALUES,
    SLOTS,
    generate_scene,
)
from .state import DialogueState

NUM_TURNS = 10
COUNT_CAP = 10
ANSWERS = tuple(str(i) for i in range(COUNT_CAP + 1)) + (
    "TRUE", "FALSE", "rotating", "sliding", "flying", "no action",
)
VERB_ING = {"rotate": "rotating", "slide": "sliding", "fly": "flying"}
EVENT_NOUN = {"rotate": "rotation", "slide": "slide", "fly": "flight"}
ORDINALS = ("first", "second", "third", "fourth")
RELATIONS = {
    "left": ("to", "the", "left", "of"),
    "right": ("to", "the", "right", "of"),
    "front": ("in", "front", "of"),
}
PROGRAM_KINDS = ("count_action", "exist_action", "same_actions", "count_same", "doing", "spatial")
WINDOW_KINDS = ("whole_video", "until_now", "event_anchored", "carried")
REREFER_PROB = 0.5
SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}

_BODY_WORDS = (
    "how many things are is there a do and perform the same set of activities other as "
    "what doing about earlier mentioned thing throughout whole video up until now during "
    "after before 's , ? it"
).split()
LEXICON: tuple[str, ...] = tuple(dict.fromkeys(
    _BODY_WORDS
    + [w for ws in RELATIONS.values() for w in ws]
    + list(VERB_ING.values()) + list(EVENT_NOUN.values()) + list(ORDINALS)
    + [v for s in SLOTS for v in SLOT_VALUES[s]]
    + list(ANSWERS)
))


class ExecutionError(ValueError):
    pass


@dataclass(frozen=True)
class Program:
    kind: str
    start: int
    end: int
    objects: tuple[int, ...] = ()
    action: str | None = None
    relation: str | None = None
    filter: tuple[str, str] | None = None

    def to_json(self) -> dict:
        return {
            "kind": self.kind, "start": self.start, "end": self.end,
            "objects": list(self.objects), "action": self.action,
            "relation": self.relation, "filter": list(self.filter) if self.filter else None,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Program":
        return cls(doc["kind"], doc["start"], doc["end"], tuple(doc["objects"]),
                   doc.get("action"), doc.get("relation"),
                   tuple(doc["filter"]) if doc.get("filter") else None)


@dataclass
class Turn:
    question: list[str]
    answer: str
    gold_state: DialogueState
    window_kind: str
    program: Program | None = None


@dataclass
class Dialogue:
    dialogue_id: str
    scene_id: str
    turns: list[Turn] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "dialogue_id": self.dialogue_id,
            "scene_id": self.scene_id,
            "turns": [
                {
                    "question": t.question,
                    "answer": t.answer,
                    "state": t.gold_state.to_json(),
                    "window_kind": t.window_kind,
                    "program": t.program.to_json() if t.program else None,
                }
                for t in self.turns
            ],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Dialogue":
        doc = json.loads(text)
        turns = [
            Turn(t["question"], t["answer"], DialogueState.from_json(t["state"]),
                 t["window_kind"], Program.from_json(t["program"]) if t.get("program") else None)
            for t in doc["turns"]
        ]
        return cls(doc["dialogue_id"], doc["scene_id"], turns)


def action_set(obj: SceneObject, start: int, end: int) -> frozenset[str]:
    return frozenset(ev.kind for ev in obj.actions
                     if ev.kind != "no_action" and ev.overlap(start, end) >= 0)


def _center(obj: SceneObject, frame: int) -> tuple[float, float]:
    x1, y1, x2, y2 = obj.box_at(frame)
    return (x1 + x2) / 2, (y1 + y2) / 2


def _count(n: int) -> str:
    return str(min(n, COUNT_CAP))


def execute_question(scene: SceneSpec, program: Program) -> str:
    """Exact answer of ``program`` on ``scene``."""
    p = program
    if p.kind not in PROGRAM_KINDS:
        raise ExecutionError(f"unknown program kind {p.kind!r}")
    if not 1 <= p.start < p.end <= scene.num_frames:
        raise ExecutionError(f"invalid window ({p.start}, {p.end})")
    arity = {"count_action": 0, "exist_action": 0, "same_actions": 2,
             "count_same": 1, "doing": 1, "spatial": 1}[p.kind]
    if len(p.objects) != arity:
        raise ExecutionError(f"{p.kind} takes {arity} objects, got {len(p.objects)}")
    try:
        refs = [scene.object_by_class(c) for c in p.objects]
    except KeyError as exc:
        raise ExecutionError(f"object class {exc.args[0]} not in scene") from None

    if p.kind in ("count_action", "exist_action"):
        if p.action not in VERB_ING:
            raise ExecutionError(f"bad action {p.action!r}")
        pool = scene.objects
        if p.filter is not None:
            slot, value = p.filter
            if slot not in SLOTS:
                raise ExecutionError(f"bad filter slot {slot!r}")
            pool = [o for o in pool if o.attributes[SLOTS.index(slot)] == value]
        n = sum(1 for o in pool if p.action in action_set(o, p.start, p.end))
        if p.kind == "count_action":
            return _count(n)
        return "TRUE" if n > 0 else "FALSE"
    if p.kind == "same_actions":
        a, b = refs
        return "TRUE" if action_set(a, p.start, p.end) == action_set(b, p.start, p.end) else "FALSE"
    (ref,) = refs
    if p.kind == "count_same":
        target = action_set(ref, p.start, p.end)
        return _count(sum(1 for o in scene.objects
                          if o is not ref and action_set(o, p.start, p.end) == target))
    if p.kind == "doing":
        best, best_overlap = None, -1
        for ev in ref.actions:
            ov = ev.overlap(p.start, p.end)
            if ev.kind in VERB_ING and ov > best_overlap:
                best, best_overlap = ev.kind, ov
        return VERB_ING[best] if best is not None else "no action"
    # spatial
    if p.relation not in RELATIONS:
        raise ExecutionError(f"bad relation {p.relation!r}")
    mid = (p.start + p.end) // 2
    rx, ry = _center(ref, mid)
    n = 0
    for o in scene.objects:
        if o is ref:
            continue
        x, y = _center(o, mid)
        if (p.relation == "left" and x < rx) or (p.relation == "right" and x > rx) \
                or (p.relation == "front" and y > ry):
            n += 1
    return _count(n)


def distinguishing_subsets(scene: SceneSpec, target: SceneObject) -> list[tuple[str, ...]]:
    """All minimum-size slot subsets whose values single out ``target``."""
    for size in range(1, len(SLOTS) + 1):
        found = []
        for subset in itertools.combinations(SLOTS, size):
            idx = [SLOTS.index(s) for s in subset]
            matches = [o for o in scene.objects
                       if all(o.attributes[i] == target.attributes[i] for i in idx)]
            if len(matches) == 1:
                found.append(subset)
        if found:
            return found
    raise GenerationError(f"object {target.class_index} cannot be singled out")


def referring_expression(obj: SceneObject, slots: Iterable[str], earlier: bool) -> list[str]:
    slots = set(slots)
    toks = ["the"]
    if earlier:
        toks += ["earlier", "mentioned"]
    for s in ("size", "color", "material"):
        if s in slots:
            toks.append(obj.attributes[SLOTS.index(s)])
    toks.append(obj.attributes[3] if "shape" in slots else "thing")
    return toks


def resolve_reference(scene: SceneSpec, tokens: list[str]) -> list[SceneObject]:
    """Objects matching the attribute words of a referring expression."""
    words = set(tokens)
    out = []
    for o in scene.objects:
        ok = True
        for i, s in enumerate(SLOTS):
            said = words & set(SLOT_VALUES[s])
            if said and o.attributes[i] not in said:
                ok = False
        if ok:
            out.append(o)
    return out


class _DialogueBuilder:
    def __init__(self, scene: SceneSpec, rng: np.random.Generator):
        self.scene = scene
        self.rng = rng
        self.T = scene.num_frames
        self.triples: set[tuple[int, str, str]] = set()
        self.mentioned: list[int] = []

    def _pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def refer(self, candidates: list[SceneObject], exclude: set[int]) -> tuple[SceneObject, list[str]]:
        """Choose an object among ``candidates`` and produce its referring expression."""
        pool = [o for o in candidates if o.class_index not in exclude]
        old = [o for o in pool if o.class_index in self.mentioned]
        new = [o for o in pool if o.class_index not in self.mentioned]
        earlier = bool(old) and (not new or self.rng.uniform() < REREFER_PROB)
        obj = self._pick(old if earlier else new)
        subset = self._pick(distinguishing_subsets(self.scene, obj))
        for s in subset:
            self.triples.add((obj.class_index, s, obj.attributes[SLOTS.index(s)]))
        if obj.class_index not in self.mentioned:
            self.mentioned.append(obj.class_index)
        return obj, referring_expression(obj, subset, earlier)

    def fresh_window(self, turn: int, exclude: set[int]) -> tuple[str, int, int, list[str], set[int]]:
        anchors = [o for o in self.scene.objects
                   if o.class_index not in exclude and any(ev.kind in VERB_ING for ev in o.actions)]
        u = self.rng.uniform()
        if anchors and u < 0.5:
            obj, ref = self.refer(anchors, exclude)
            events = [ev for ev in obj.actions if ev.kind in VERB_ING]
            ev = self._pick(events)
            same_kind = [e for e in obj.actions if e.kind == ev.kind]
            ordinal = ORDINALS[same_kind.index(ev)]
            options = ["during"]
            if ev.end_frame < self.T:
                options.append("after")
            if ev.start_frame > 1:
                options.append("before")
            prep = self._pick(options)
            start, end = {
                "during": (ev.start_frame, ev.end_frame),
                "after": (ev.end_frame, self.T),
                "before": (1, ev.start_frame),
            }[prep]
            phrase = [prep, *ref, "'s", ordinal, EVENT_NOUN[ev.kind], ","]
            return "event_anchored", start, end, phrase, {obj.class_index}
        if u < 0.8:
            return "whole_video", 1, self.T, ["throughout", "the", "whole", "video", ","], set()
        end = max(2, turn * self.T // NUM_TURNS)
        return "until_now", 1, end, ["up", "until", "now", ","], set()

    def fresh_turn(self, turn: int) -> tuple[list[str], Program, str]:
        kind = self._pick(PROGRAM_KINDS)
        wkind, start, end, phrase, used = self.fresh_window(turn, set())
        objs: list[int] = []
        body: list[str]
        if kind in ("count_action", "exist_action"):
            action = self._pick(list(VERB_ING))
            filt = None
            if self.rng.uniform() < 0.4:
                slot = self._pick(SLOTS)
                filt = (slot, self._pick(SLOT_VALUES[slot]))
            if kind == "count_action":
                body = ["how", "many"] + ([filt[1]] if filt else []) + ["things", "are", VERB_ING[action], "?"]
            else:
                body = ["is", "there", "a", VERB_ING[action]] + ([filt[1]] if filt else []) + ["thing", "?"]
            prog = Program(kind, start, end, (), action, None, filt)
        else:
            n_refs = 2 if kind == "same_actions" else 1
            if len(self.scene.objects) - len(used) < n_refs:
                used = set()  # small scenes: the anchor object may be asked about too
            refs = []
            for _ in range(n_refs):
                obj, ref = self.refer(self.scene.objects, used | set(objs))
                objs.append(obj.class_index)
                refs.append(ref)
            relation = None
            if kind == "same_actions":
                body = ["do", *refs[0], "and", *refs[1],
                        "perform", "the", "same", "set", "of", "activities", "?"]
            elif kind == "count_same":
                body = ["how", "many", "other", "things", "perform", "the", "same", "set",
                        "of", "activities", "as", *refs[0], "?"]
            elif kind == "doing":
                body = ["what", "is", *refs[0], "doing", "?"]
            else:
                relation = self._pick(list(RELATIONS))
                body = ["how", "many", "things", "are", *RELATIONS[relation], *refs[0], "?"]
            prog = Program(kind, start, end, tuple(objs), None, relation, None)
        return phrase + body, prog, wkind

    def carried_turn(self, prev: Program) -> tuple[list[str], Program] | None:
        options = []
        if prev.end < self.T:
            options.append("extend")
        if prev.kind in ("doing", "count_same", "spatial") and len(self.scene.objects) > 1:
            options.append("swap_object")
        if prev.kind == "spatial":
            options.append("swap_relation")
        if not options:
            return None
        choice = self._pick(options)
        if choice == "extend":
            return (["how", "about", "up", "until", "now", "?"],
                    replace(prev, end=self.T))
        if choice == "swap_relation":
            relation = self._pick([r for r in RELATIONS if r != prev.relation])
            return ["what", "about", *RELATIONS[relation], "it", "?"], replace(prev, relation=relation)
        obj, ref = self.refer(self.scene.objects, set(prev.objects))
        return ["what", "about", *ref, "?"], replace(prev, objects=(obj.class_index,))


def generate_dialogue(
    scene: SceneSpec,
    universe: AttributeUniverse | None = None,
    seed: int = 0,
    num_turns: int = NUM_TURNS,
    dialogue_id: str | None = None,
) -> Dialogue:
    """Ten template turns over ``scene`` with cumulative gold states."""
    if len(scene.objects) < 2:
        raise GenerationError("a dialogue needs a scene with at least 2 objects")
    rng = np.random.default_rng([seed, scene.rng_seed])
    b = _DialogueBuilder(scene, rng)
    dlg = Dialogue(dialogue_id or f"dlg_{scene.rng_seed:08d}", scene.scene_id)
    prev: Program | None = None
    for t in range(1, num_turns + 1):
        carried = None
        if prev is not None and rng.uniform() < 0.25:
            carried = b.carried_turn(prev)
        if carried is not None:
            question, prog = carried
            wkind = "carried"
        else:
            question, prog, wkind = b.fresh_turn(t)
        answer = execute_question(scene, prog)
        state = DialogueState(prog.start, prog.end, frozenset(b.triples))
        dlg.turns.append(Turn(question, answer, state, wkind, prog))
        prev = prog
    return dlg


def split_seed(seed: int, split: str) -> int:
    return seed + SPLIT_OFFSETS[split]


def generate_split(
    universe: AttributeUniverse,
    num_dialogues: int,
    frames: int = 300,
    seed: int = 0,
    split: str = "train",
    min_objects: int = 3,
    max_objects: int = 10,
) -> tuple[list[Dialogue], list[SceneSpec]]:
    """One fresh scene per dialogue; scene seeds of different splits never collide."""
    if num_dialogues < 1:
        raise GenerationError("num_dialogues must be >= 1")
    if num_dialogues >= 1_000_000:
        raise GenerationError("at most 999999 dialogues per split")
    if not 2 <= min_objects <= max_objects:
        raise GenerationError("need 2 <= min_objects <= max_objects")
    base = split_seed(seed, split)
    dialogues, scenes = [], []
    for i in range(num_dialogues):
        s = base + i
        n_obj = int(np.random.default_rng([s, 17]).integers(min_objects, max_objects + 1))
        n_obj = min(n_obj, universe.num_classes)
        scene = generate_scene(universe, frames, n_obj, seed=s)
        scenes.append(scene)
        dialogues.append(generate_dialogue(scene, universe, seed=s))
    return dialogues, scenes


def write_split(path: str | Path, dialogues: list[Dialogue]) -> None:
    Path(path).write_text("".join(d.to_json() + "\n" for d in dialogues))


def read_split(path: str | Path) -> list[Dialogue]:
    return [Dialogue.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_scenes(directory: str | Path, scenes: list[SceneSpec]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for sc in scenes:
        (directory / f"{sc.scene_id}.json").write_text(sc.to_json() + "\n")


def read_scene(directory: str | Path, scene_id: str) -> SceneSpec:
    return SceneSpec.from_json((Path(directory) / f"{scene_id}.json").read_text())
