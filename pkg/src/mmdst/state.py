"""Multimodal dialogue state, its token grammar and the prior-state context."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .scene import SLOT_VALUES, SLOTS

USR, SYS, PRIOR_STATE, STATE, END_STATE, PAD, UNK = (
    "USR", "SYS", "PRIOR_STATE", "STATE", "END_STATE", "PAD", "UNK",
)
SPECIALS = (USR, SYS, PRIOR_STATE, STATE, END_STATE, PAD, UNK)
TIME_SLOTS = ("start", "end")
SLOT_TOKENS = SLOTS + TIME_SLOTS

_OBJ_RE = re.compile(r"^OBJ(\d+)$")

Triple = tuple[int, str, str]


class StateError(ValueError):
    pass


def obj_token(class_index: int) -> str:
    return f"OBJ{class_index}"


def frame_token(m: int) -> str:
    return f"FRAME{m}"


def parse_obj_token(tok: str) -> int | None:
    m = _OBJ_RE.match(tok)
    return int(m.group(1)) if m else None


@dataclass(frozen=True)
class DialogueState:
    """Turn-level state: a temporal window plus (class, slot, value) triples.

    ``start``/``end`` are None when temporal slots are disabled or unknown.
    """

    start: int | None = None
    end: int | None = None
    triples: frozenset[Triple] = field(default_factory=frozenset)

    @property
    def window(self) -> tuple[int, int] | None:
        if self.start is None or self.end is None:
            return None
        return (self.start, self.end)

    def objects(self) -> set[int]:
        return {t[0] for t in self.triples}

    def assignment(self, class_index: int) -> dict[str, str]:
        return {s: v for c, s, v in self.triples if c == class_index}

    def without_time(self) -> "DialogueState":
        return DialogueState(None, None, self.triples)

    def to_json(self) -> dict:
        return {
            "start": self.start,
            "end": self.end,
            "triples": [list(t) for t in sorted(self.triples)],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DialogueState":
        return cls(doc.get("start"), doc.get("end"),
                   frozenset((int(c), s, v) for c, s, v in doc["triples"]))


EMPTY_STATE = DialogueState()


class Vocabulary:
    """Token <-> id bijection; the seven specials always hold ids 0..6."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise StateError("vocabulary must start with the reserved specials")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise StateError("duplicate token in vocabulary")

    @classmethod
    def build(cls, num_classes: int, num_frames: int, words: Iterable[str] = ()) -> "Vocabulary":
        tokens: list[str] = list(SPECIALS)
        tokens += [obj_token(k) for k in range(num_classes)]
        tokens += list(SLOT_TOKENS)
        for slot in SLOTS:
            tokens += list(SLOT_VALUES[slot])
        tokens += [str(f) for f in range(0, num_frames + 1)]
        tokens += [frame_token(m) for m in range(1, num_frames + 1)]
        seen = set(tokens)
        for w in words:
            if w not in seen:
                seen.add(w)
                tokens.append(w)
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def id(self, tok: str) -> int:
        return self.index.get(tok, self.index[UNK])

    def encode(self, toks: Iterable[str]) -> list[int]:
        return [self.id(t) for t in toks]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text().rstrip("\n").split("\n"))


def _check_state(state: DialogueState) -> None:
    seen = set()
    for c, s, v in state.triples:
        if s not in SLOT_VALUES:
            raise StateError(f"unknown slot {s!r}")
        if v not in SLOT_VALUES[s]:
            raise StateError(f"value {v!r} not valid for slot {s!r}")
        if (c, s) in seen:
            raise StateError(f"two values for ({c}, {s})")
        seen.add((c, s))


def flatten_state(state: DialogueState, include_time: bool = True) -> list[str]:
    """Canonical token sequence: window first, then objects by class index,
    slots in size/color/material/shape order."""
    _check_state(state)
    toks: list[str] = []
    if include_time and state.window is not None:
        toks += ["start", str(state.start), "end", str(state.end)]
    by_obj: dict[int, dict[str, str]] = {}
    for c, s, v in state.triples:
        by_obj.setdefault(c, {})[s] = v
    for c in sorted(by_obj):
        toks.append(obj_token(c))
        for s in SLOTS:
            if s in by_obj[c]:
                toks += [s, by_obj[c][s]]
    return toks


def parse_state(
    tokens: Sequence[str],
    include_time: bool = True,
    num_frames: int | None = None,
    num_classes: int | None = None,
) -> tuple[DialogueState, list[str]]:
    """Error-tolerant inverse of ``flatten_state``.

    Never raises. Unknown or misplaced tokens are skipped, a repeated
    (object, slot) keeps the last value, and an incomplete or invalid window is
    dropped. Returns the state and a list of recovery notes.
    """
    notes: list[str] = []
    values: dict[tuple[int, str], str] = {}
    times: dict[str, int] = {}
    current: int | None = None
    i, n = 0, len(tokens)
    while i < n:
        tok = tokens[i]
        if tok == END_STATE:
            if i != n - 1:
                notes.append(f"stopped at END_STATE (pos {i})")
            break
        k = parse_obj_token(tok)
        if k is not None:
            if num_classes is not None and k >= num_classes:
                notes.append(f"unknown class {tok}")
                current = None
            else:
                current = k
            i += 1
            continue
        if tok in TIME_SLOTS:
            nxt = tokens[i + 1] if i + 1 < n else None
            if nxt is not None and nxt.isascii() and nxt.isdigit():
                if tok in times:
                    notes.append(f"{tok} overwritten")
                times[tok] = int(nxt)
                i += 2
            else:
                notes.append(f"{tok} without frame value (pos {i})")
                i += 1
            continue
        if tok in SLOT_VALUES:
            nxt = tokens[i + 1] if i + 1 < n else None
            if nxt is not None and nxt in SLOT_VALUES[tok]:
                if current is None:
                    notes.append(f"{tok} {nxt} without object (pos {i})")
                else:
                    if (current, tok) in values:
                        notes.append(f"OBJ{current} {tok} overwritten")
                    values[(current, tok)] = nxt
                i += 2
            else:
                notes.append(f"{tok} without valid value (pos {i})")
                i += 1
            continue
        notes.append(f"skipped {tok!r} (pos {i})")
        i += 1

    start = end = None
    if include_time:
        s, e = times.get("start"), times.get("end")
        if s is None or e is None:
            notes.append("window missing")
        elif not (1 <= s < e and (num_frames is None or e <= num_frames)):
            notes.append(f"invalid window ({s}, {e}) dropped")
        else:
            start, end = s, e
    triples = frozenset((c, s, v) for (c, s), v in values.items())
    return DialogueState(start, end, triples), notes


@dataclass(frozen=True)
class ContextWindowConfig:
    use_prior_state: bool = True
    max_turns: int = 1

    def __post_init__(self):
        if self.max_turns < 0:
            raise ValueError("max_turns must be >= 0")


def build_context(
    dialogue,
    turn_index: int,
    prior_state: DialogueState | None,
    cfg: ContextWindowConfig,
    include_time: bool = True,
) -> list[str]:
    """X_ctx for 1-based ``turn_index`` of ``dialogue`` (anything with ``.turns``
    whose items carry ``.question`` tokens and an ``.answer``).

    Answers are read only for turns before ``turn_index``.
    """
    turns = dialogue.turns
    if not 1 <= turn_index <= len(turns):
        raise IndexError(f"turn_index {turn_index} out of range")
    toks: list[str] = []
    if cfg.use_prior_state and turn_index > 1:
        toks.append(PRIOR_STATE)
        toks += flatten_state(prior_state or EMPTY_STATE, include_time)
    first = max(1, turn_index - cfg.max_turns)
    for t in range(first, turn_index):
        toks += [USR, *turns[t - 1].question, SYS, turns[t - 1].answer]
    toks += [USR, *turns[turn_index - 1].question]
    return toks


def full_history(dialogue, turn_index: int) -> list[str]:
    """All utterances up to the current question (the unabridged D_t)."""
    return build_context(dialogue, turn_index, None, ContextWindowConfig(False, turn_index))


__all__ = [
    "ContextWindowConfig", "DialogueState", "EMPTY_STATE", "END_STATE", "PAD",
    "PRIOR_STATE", "SPECIALS", "STATE", "SYS", "StateError", "UNK", "USR", "Vocabulary",
    "build_context", "flatten_state", "frame_token", "full_history", "obj_token",
    "parse_obj_token", "parse_state",
]
