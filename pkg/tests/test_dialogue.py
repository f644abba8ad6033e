import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmdst.dialogue import (
    ANSWERS, NUM_TURNS, Dialogue, ExecutionError, Program, _DialogueBuilder, distinguishing_subsets,
    execute_question, generate_dialogue, generate_split, read_split, referring_expression,
    resolve_reference, write_split,
)
from mmdst.scene import ActionEvent, GenerationError, SceneObject, SceneSpec, build_universe, generate_scene


def _static(cls, attrs, box, actions):
    return SceneObject(cls, attrs, [(1, box)], actions)


@pytest.fixture
def toy_scene():
    u = build_universe(270)
    a = u.class_of(("large", "brown", "metal", "cube"))
    b = u.class_of(("small", "red", "rubber", "sphere"))
    c = u.class_of(("small", "red", "metal", "cone"))
    objs = [
        _static(a, u.valid_classes[a], (0.1, 0.1, 0.26, 0.26), [ActionEvent("rotate", 102, 138)]),
        _static(b, u.valid_classes[b], (0.5, 0.5, 0.58, 0.58), [ActionEvent("fly", 10, 50),
                                                                ActionEvent("rotate", 120, 200)]),
        _static(c, u.valid_classes[c], (0.7, 0.2, 0.78, 0.28), [ActionEvent("no_action", 5, 290)]),
    ]
    objs.sort(key=lambda o: o.class_index)
    return SceneSpec("scene_toy", 300, objs, 123, 270), (a, b, c)


def test_answer_vocabulary():
    assert len(ANSWERS) == 17
    assert set(ANSWERS) >= {"0", "10", "TRUE", "FALSE", "rotating", "sliding", "flying", "no action"}


def test_execute_examples(toy_scene):
    scene, (a, b, c) = toy_scene
    assert execute_question(scene, Program("exist_action", 1, 300, action="fly")) == "TRUE"
    assert execute_question(scene, Program("exist_action", 60, 100, action="fly")) == "FALSE"
    assert execute_question(scene, Program("count_action", 60, 100, action="slide")) == "0"
    assert execute_question(scene, Program("count_action", 1, 300, action="rotate")) == "2"
    assert execute_question(scene, Program("doing", 100, 140, objects=(a,))) == "rotating"
    assert execute_question(scene, Program("doing", 1, 300, objects=(c,))) == "no action"
    assert execute_question(scene, Program("same_actions", 1, 300, objects=(a, b))) == "FALSE"
    assert execute_question(scene, Program("same_actions", 100, 110, objects=(a, c))) == "FALSE"
    assert execute_question(scene, Program("count_same", 130, 135, objects=(a,))) == "1"
    assert execute_question(scene, Program("spatial", 1, 300, objects=(a,), relation="right")) == "2"
    assert execute_question(scene, Program("spatial", 1, 300, objects=(b,), relation="front")) == "0"
    filt = Program("count_action", 1, 300, action="rotate", filter=("color", "brown"))
    assert execute_question(scene, filt) == "1"


def test_execute_errors(toy_scene):
    scene, (a, _, _) = toy_scene
    with pytest.raises(ExecutionError):
        execute_question(scene, Program("doing", 10, 5, objects=(a,)))
    with pytest.raises(ExecutionError):
        execute_question(scene, Program("doing", 1, 300, objects=(269,)))
    with pytest.raises(ExecutionError):
        execute_question(scene, Program("juggle", 1, 300))
    with pytest.raises(ExecutionError):
        execute_question(scene, Program("doing", 1, 300))


def test_count_clamps_at_ten():
    u = build_universe(270)
    objs = [_static(k, u.valid_classes[k], (0.1, 0.1, 0.2, 0.2), [ActionEvent("rotate", 1, 300)])
            for k in range(12)]
    scene = SceneSpec("s", 300, objs, 0, 270)
    assert execute_question(scene, Program("count_action", 1, 300, action="rotate")) == "10"


def test_brown_thing_mentions_color_only(toy_scene):
    scene, (a, _, _) = toy_scene
    obj = scene.object_by_class(a)
    assert ("color",) in distinguishing_subsets(scene, obj)
    ref = referring_expression(obj, ("color",), earlier=False)
    assert ref == ["the", "brown", "thing"]
    assert resolve_reference(scene, ref) == [obj]
    b = _DialogueBuilder(scene, np.random.default_rng(0))
    # force the choice of the brown object and its color-only description
    b._pick = lambda seq: seq[0] if not isinstance(seq[0], tuple) else ("color",)
    chosen, words = b.refer([obj], set())
    assert chosen is obj and words == ["the", "brown", "thing"]
    assert b.triples == {(a, "color", "brown")}


def test_rereference_accumulates(toy_scene):
    scene, (a, _, _) = toy_scene
    obj = scene.object_by_class(a)
    b = _DialogueBuilder(scene, np.random.default_rng(0))
    b.triples.add((a, "color", "brown"))
    b.mentioned.append(a)
    b._pick = lambda seq: seq[0] if not isinstance(seq[0], tuple) else ("size", "material")
    b.rng = np.random.default_rng(1)
    _, words = b.refer([obj], set())
    assert words[:3] == ["the", "earlier", "mentioned"]
    assert b.triples == {(a, "color", "brown"), (a, "size", "large"), (a, "material", "metal")}


def test_how_about_up_until_now_keeps_start(toy_scene):
    scene, (a, _, _) = toy_scene
    b = _DialogueBuilder(scene, np.random.default_rng(0))
    prev = Program("doing", 102, 138, objects=(a,))
    b._pick = lambda seq: "extend" if "extend" in seq else seq[0]
    words, prog = b.carried_turn(prev)
    assert words == ["how", "about", "up", "until", "now", "?"]
    assert (prog.start, prog.end) == (102, 300)


def test_dialogue_requires_two_objects():
    u = build_universe(193)
    with pytest.raises(GenerationError):
        generate_dialogue(generate_scene(u, 300, 1, seed=0), u)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(2, 10))
def test_dialogue_invariants(seed, n):
    u = build_universe(193)
    scene = generate_scene(u, 300, n, seed=seed)
    dlg = generate_dialogue(scene, u, seed=seed)
    assert len(dlg.turns) == NUM_TURNS
    classes = {o.class_index for o in scene.objects}
    prev = frozenset()
    for turn in dlg.turns:
        st_ = turn.gold_state
        assert 1 <= st_.start < st_.end <= scene.num_frames
        assert st_.triples >= prev
        assert st_.objects() <= classes
        for c, s, v in st_.triples:
            assert scene.object_by_class(c).attributes[["size", "color", "material", "shape"].index(s)] == v
        # every newly recorded value was uttered in this turn
        for c, s, v in st_.triples - prev:
            assert v in turn.question
        assert turn.answer in ANSWERS
        assert execute_question(scene, turn.program) == turn.answer
        assert (turn.program.start, turn.program.end) == st_.window
        prev = st_.triples


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_referring_expressions_unique(seed):
    u = build_universe(193)
    scene = generate_scene(u, 300, 8, seed=seed)
    for obj in scene.objects:
        for subset in distinguishing_subsets(scene, obj):
            for earlier in (False, True):
                assert resolve_reference(scene, referring_expression(obj, subset, earlier)) == [obj]


def test_split_counts_and_determinism(tmp_path):
    u = build_universe(193)
    dlgs, scenes = generate_split(u, 100, seed=3)
    assert len(dlgs) == 100 and sum(len(d.turns) for d in dlgs) == 1000
    write_split(tmp_path / "a.jsonl", dlgs)
    write_split(tmp_path / "b.jsonl", generate_split(u, 100, seed=3)[0])
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = read_split(tmp_path / "a.jsonl")
    assert [d.to_json() for d in back] == [d.to_json() for d in dlgs]


def test_split_scene_ids_disjoint():
    u = build_universe(193)
    _, train = generate_split(u, 30, seed=0, split="train")
    _, test = generate_split(u, 30, seed=0, split="test")
    assert not {s.scene_id for s in train} & {s.scene_id for s in test}


def test_jsonl_schema(toy_scene):
    scene, _ = toy_scene
    dlg = generate_dialogue(scene, seed=1)
    import json

    doc = json.loads(dlg.to_json())
    assert set(doc) == {"dialogue_id", "scene_id", "turns"}
    t0 = doc["turns"][0]
    assert {"question", "answer", "state", "window_kind"} <= set(t0)
    assert set(t0["state"]) == {"start", "end", "triples"}
    assert Dialogue.from_json(dlg.to_json()).to_json() == dlg.to_json()
