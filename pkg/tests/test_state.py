import pytest
from hypothesis import given, settings, strategies as st

from mmdst.dialogue import Dialogue, Turn
from mmdst.scene import SLOT_VALUES, SLOTS
from mmdst.state import (
    END_STATE, PRIOR_STATE, SPECIALS, SYS, USR, ContextWindowConfig, DialogueState, StateError,
    Vocabulary, build_context, flatten_state, full_history, parse_state,
)

FRAMES, CLASSES = 300, 193


@st.composite
def states(draw, include_time=True):
    objs = draw(st.lists(st.integers(0, CLASSES - 1), max_size=6, unique=True))
    triples = set()
    for c in objs:
        for s in draw(st.lists(st.sampled_from(SLOTS), min_size=1, max_size=4, unique=True)):
            triples.add((c, s, draw(st.sampled_from(SLOT_VALUES[s]))))
    if include_time:
        start = draw(st.integers(1, FRAMES - 1))
        end = draw(st.integers(start + 1, FRAMES))
        return DialogueState(start, end, frozenset(triples))
    return DialogueState(None, None, frozenset(triples))


def S(text):
    return text.split()


def test_flatten_examples():
    s = DialogueState(None, None, frozenset({(4, "shape", "cube"), (24, "size", "small"), (24, "color", "red")}))
    assert flatten_state(s, False) == S("OBJ4 shape cube OBJ24 size small color red")
    assert flatten_state(DialogueState(), False) == []
    t = DialogueState(102, 138, frozenset({(21, "shape", "cube"), (165, "color", "brown")}))
    assert flatten_state(t) == S("start 102 end 138 OBJ21 shape cube OBJ165 color brown")


def test_flatten_rejects_invalid_values():
    with pytest.raises(StateError):
        flatten_state(DialogueState(None, None, frozenset({(1, "shape", "brown")})))
    with pytest.raises(StateError):
        flatten_state(DialogueState(None, None, frozenset({(1, "shape", "cube"), (1, "shape", "cone")})))


def test_parse_examples():
    st_, _ = parse_state(S("OBJ4 shape cube shape sphere"), include_time=False)
    assert st_.triples == {(4, "shape", "sphere")}
    st_, notes = parse_state(S("start 200 end 100 OBJ4 shape cube"))
    assert st_.triples == {(4, "shape", "cube")} and st_.window is None
    assert any("invalid window" in n for n in notes)
    st_, notes = parse_state(S("OBJ4 shape cube"))
    assert st_.window is None and "window missing" in notes


def test_parse_recovery():
    st_, notes = parse_state(S("shape cube OBJ3 color blorp OBJ3 size large END_STATE OBJ5 size small"),
                             include_time=False)
    assert st_.triples == {(3, "size", "large")}
    assert notes
    st_, _ = parse_state(S("start 10 end 400 OBJ1 size large"), num_frames=300)
    assert st_.window is None
    st_, _ = parse_state(S("OBJ500 size large"), num_classes=193)
    assert not st_.triples


@settings(max_examples=1000, deadline=None)
@given(states())
def test_round_trip(s):
    assert parse_state(flatten_state(s), num_frames=FRAMES, num_classes=CLASSES) == (s, [])


@settings(max_examples=300, deadline=None)
@given(states(include_time=False))
def test_round_trip_without_time(s):
    assert parse_state(flatten_state(s, False), include_time=False)[0] == s


VOCAB = Vocabulary.build(CLASSES, FRAMES, ["what", "is", "doing", "?"])


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.integers(0, len(VOCAB) - 1), max_size=40))
def test_parser_total(ids):
    s, notes = parse_state(VOCAB.decode(ids), num_frames=FRAMES, num_classes=CLASSES)
    assert isinstance(notes, list)
    # output always serializes, i.e. satisfies the state invariants
    flatten_state(s)
    if s.window is not None:
        assert 1 <= s.start < s.end <= FRAMES


@settings(max_examples=200, deadline=None)
@given(states())
def test_flatten_deterministic(s):
    same = DialogueState(s.start, s.end, frozenset(sorted(s.triples, reverse=True)))
    assert flatten_state(s) == flatten_state(same)


def test_vocabulary():
    v = VOCAB
    assert v.tokens[: len(SPECIALS)] == list(SPECIALS)
    assert v.decode(v.encode(S("OBJ4 shape cube start 1 end 300"))) == S("OBJ4 shape cube start 1 end 300")
    assert v.encode(["zebra"]) == [v.id("UNK")]
    assert "FRAME300" in v and "FRAME301" not in v
    with pytest.raises(StateError):
        Vocabulary(["a", "b"])
    with pytest.raises(StateError):
        Vocabulary(list(SPECIALS) + ["x", "x"])


def test_vocabulary_save_load(tmp_path):
    VOCAB.save(tmp_path / "v.txt")
    back = Vocabulary.load(tmp_path / "v.txt")
    assert back.tokens == VOCAB.tokens and back.digest() == VOCAB.digest()


def _dialogue():
    turns = [Turn(S(f"q{t} ?"), str(t), DialogueState(1, 300, frozenset({(t, "size", "small")})), "whole_video", None)
             for t in range(1, 4)]
    return Dialogue("d0", "s0", turns)


def test_context_examples():
    d = _dialogue()
    b2 = d.turns[1].gold_state
    ctx = build_context(d, 3, b2, ContextWindowConfig(True, 1))
    assert ctx == [PRIOR_STATE, *flatten_state(b2), USR, "q2", "?", SYS, "2", USR, "q3", "?"]
    assert build_context(d, 1, None, ContextWindowConfig(True, 0)) == [USR, "q1", "?"]
    full = build_context(d, 3, b2, ContextWindowConfig(False, 10))
    assert full == [USR, "q1", "?", SYS, "1", USR, "q2", "?", SYS, "2", USR, "q3", "?"]
    assert full == full_history(d, 3)
    # turn 1 never gets a prior block even when prior states are on
    assert build_context(d, 1, b2, ContextWindowConfig(True, 1)) == [USR, "q1", "?"]


def test_context_never_reads_current_answer():
    d = _dialogue()
    ctx = build_context(d, 2, None, ContextWindowConfig(False, 10))
    assert "2" not in ctx


def test_context_errors():
    with pytest.raises(IndexError):
        build_context(_dialogue(), 0, None, ContextWindowConfig())
    with pytest.raises(ValueError):
        ContextWindowConfig(True, -1)


def test_end_state_is_special():
    assert END_STATE in SPECIALS
