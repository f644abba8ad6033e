"""Reference trackers: tf-idf question retrieval, state prior, perception-only and recurrent models."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.feature_extraction.text import TfidfVectorizer
from torch import Tensor, nn
from torch.nn import functional as F

from .dialogue import Dialogue
from .scene import SLOT_VALUES, SLOTS, AttributeUniverse, PerceivedVideo
from .state import DialogueState, Vocabulary, full_history
from .neural import AdamHyper, OptimizerState, Schedule, adam_step

log = logging.getLogger(__name__)

Key = tuple[str, int]


class BaselineError(ValueError):
    pass


# question retrieval


def _identity(tokens):
    return tokens


@dataclass
class TfIdfIndex:
    vectorizer: TfidfVectorizer
    matrix: object  # sparse (n_questions, n_terms), rows L2-normalised
    keys: list[Key]
    states: list[DialogueState]

    def __len__(self) -> int:
        return len(self.keys)


def build_tfidf_index(dialogues: list[Dialogue]) -> TfIdfIndex:
    """Index every training question; rows are ordered by (dialogue_id, turn) so the
    first maximum is the tie-break winner."""
    items = sorted(((d.dialogue_id, t), turn.question, turn.gold_state)
                   for d in dialogues for t, turn in enumerate(d.turns, 1))
    if not items:
        raise BaselineError("cannot build a retrieval index from no questions")
    vec = TfidfVectorizer(analyzer=_identity, lowercase=False, norm="l2")
    matrix = vec.fit_transform([q for _, q, _ in items])
    return TfIdfIndex(vec, matrix, [k for k, _, _ in items], [s for _, _, s in items])


def retrieval_scores(index: TfIdfIndex, question: list[str]) -> np.ndarray:
    q = index.vectorizer.transform([question])
    return (index.matrix @ q.T).toarray().ravel()


def q_retrieval_predict(index: TfIdfIndex, question: list[str]) -> DialogueState:
    if len(index) == 0:
        raise BaselineError("empty retrieval index")
    return index.states[int(np.argmax(retrieval_scores(index, question)))]


# state prior


def state_prior_predict(dialogues: list[Dialogue]) -> DialogueState:
    """Most frequent triple and most frequent window over all gold turn states;
    ties go to the lexicographically smallest."""
    triples: Counter = Counter()
    windows: Counter = Counter()
    for d in dialogues:
        for turn in d.turns:
            triples.update(turn.gold_state.triples)
            if turn.gold_state.window is not None:
                windows[turn.gold_state.window] += 1
    if not triples and not windows:
        raise BaselineError("state prior needs a nonempty split")
    best_triple = min(triples.items(), key=lambda kv: (-kv[1], kv[0]))[0] if triples else None
    best_window = min(windows.items(), key=lambda kv: (-kv[1], kv[0]))[0] if windows else None
    start, end = best_window if best_window else (None, None)
    return DialogueState(start, end, frozenset([best_triple]) if best_triple else frozenset())


# perception-only


def class_triples(universe: AttributeUniverse, class_index: int) -> list[tuple[int, str, str]]:
    attrs = universe.attributes(class_index)
    return [(class_index, s, attrs[s]) for s in SLOTS]


def object_random_predict(perceived: PerceivedVideo, universe: AttributeUniverse,
                          seed: int | np.random.Generator = 0) -> DialogueState:
    classes = perceived.detected_classes()
    if not classes:
        return DialogueState()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = classes[int(rng.integers(len(classes)))]
    triple = class_triples(universe, k)[int(rng.integers(len(SLOTS)))]
    return DialogueState(1, perceived.num_frames, frozenset([triple]))


def object_all_predict(perceived: PerceivedVideo, universe: AttributeUniverse) -> DialogueState:
    classes = perceived.detected_classes()
    if not classes:
        return DialogueState()
    triples = frozenset(t for k in classes for t in class_triples(universe, k))
    return DialogueState(1, perceived.num_frames, triples)


# recurrent tracker


@dataclass(frozen=True)
class RnnConfig:
    use_video: bool = True
    use_dialogue: bool = True
    use_attention: bool = False
    d: int = 128
    epochs: int = 15
    batch_size: int = 32
    peak_lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not (self.use_video or self.use_dialogue):
            raise BaselineError("an RNN tracker needs video, dialogue or both")

    @property
    def label(self) -> str:
        parts = [p for p, on in (("V", self.use_video), ("D", self.use_dialogue)) if on]
        return f"RNN({'+'.join(parts)})" + ("+Att" if self.use_attention else "")


# per-slot value vocabularies: index 0 is "none"
SLOT_CHOICES = {s: ("none",) + SLOT_VALUES[s] for s in SLOTS}
SLOT_WIDTH = sum(len(v) for v in SLOT_CHOICES.values())
_SLOT_OFFSETS = np.cumsum([0] + [len(SLOT_CHOICES[s]) for s in SLOTS])


class RnnTracker(nn.Module):
    """GRU encoder with fixed-vocabulary heads: presence per class, one categorical
    per (class, slot) and start/end distributions over frames."""

    def __init__(self, cfg: RnnConfig, vocab_size: int, num_classes: int, num_frames: int, d_cnn: int):
        super().__init__()
        self.cfg = cfg
        self.k, self.t = num_classes, num_frames
        d = cfg.d
        self.embed = nn.Embedding(vocab_size, d)
        self.bb_proj = nn.Linear(4, d)
        self.cnn_proj = nn.Linear(d_cnn, d)
        self.gru = nn.GRU(d, d, batch_first=True)
        if cfg.use_attention:
            # one query per class (shared by its presence and slot heads) plus start and end
            self.queries = nn.Parameter(torch.randn(num_classes + 2, d) / math.sqrt(d))
            self.presence_w = nn.Parameter(torch.randn(num_classes, d) / math.sqrt(d))
            self.presence_b = nn.Parameter(torch.zeros(num_classes))
            self.slot_w = nn.Parameter(torch.randn(num_classes, d, SLOT_WIDTH) / math.sqrt(d))
            self.slot_b = nn.Parameter(torch.zeros(num_classes, SLOT_WIDTH))
        else:
            self.presence = nn.Linear(d, num_classes)
            self.slots = nn.Linear(d, num_classes * SLOT_WIDTH)
        self.start = nn.Linear(d, num_frames)
        self.end = nn.Linear(d, num_frames)

    def encode(self, batch: dict) -> tuple[Tensor, Tensor]:
        """GRU outputs (B, L, d) and a validity mask (B, L)."""
        parts, masks = [], []
        if self.cfg.use_video:
            z = self.embed(batch["obj_ids"]) + F.relu(self.bb_proj(batch["bb"])) + F.relu(self.cnn_proj(batch["cnn"]))
            parts.append(z)
            masks.append(torch.ones(z.shape[:2], dtype=torch.bool))
        if self.cfg.use_dialogue:
            parts.append(self.embed(batch["ctx_ids"]))
            masks.append(torch.arange(batch["ctx_ids"].shape[1])[None] < batch["ctx_len"][:, None])
        x = torch.cat(parts, dim=1)
        mask = torch.cat(masks, dim=1)
        lengths = mask.sum(1)
        packed = nn.utils.rnn.pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.gru(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out, mask

    def attention(self, h: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
        scores = torch.einsum("bld,qd->bql", h, self.queries) / math.sqrt(h.shape[-1])
        scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        w = torch.softmax(scores, dim=-1)
        return w @ h, w

    def forward(self, batch: dict) -> dict[str, Tensor]:
        h, mask = self.encode(batch)
        if self.cfg.use_attention:
            ctx, w = self.attention(h, mask)
            cls = ctx[:, : self.k]
            presence = (cls * self.presence_w).sum(-1) + self.presence_b
            slots = torch.einsum("bkd,kdv->bkv", cls, self.slot_w) + self.slot_b
            start, end = self.start(ctx[:, self.k]), self.end(ctx[:, self.k + 1])
            return {"presence": presence, "slots": slots, "start": start, "end": end, "weights": w}
        last = h[torch.arange(h.shape[0]), mask.sum(1) - 1]
        return {
            "presence": self.presence(last),
            "slots": self.slots(last).view(-1, self.k, SLOT_WIDTH),
            "start": self.start(last),
            "end": self.end(last),
        }


def state_targets(state: DialogueState, num_classes: int) -> tuple[np.ndarray, np.ndarray, int, int]:
    presence = np.zeros(num_classes, dtype=np.float32)
    slots = np.zeros((num_classes, len(SLOTS)), dtype=np.int64)
    for c, s, v in state.triples:
        presence[c] = 1.0
        slots[c, SLOTS.index(s)] = SLOT_CHOICES[s].index(v)
    start = state.start - 1 if state.start else -100
    end = state.end - 1 if state.end else -100
    return presence, slots, start, end


def rnn_loss(out: dict[str, Tensor], tgt: dict[str, Tensor]) -> Tensor:
    loss = F.binary_cross_entropy_with_logits(out["presence"], tgt["presence"])
    for i, s in enumerate(SLOTS):
        lo, hi = _SLOT_OFFSETS[i], _SLOT_OFFSETS[i + 1]
        loss = loss + F.cross_entropy(out["slots"][..., lo:hi].reshape(-1, hi - lo), tgt["slots"][..., i].reshape(-1))
    for k in ("start", "end"):
        if (tgt[k] >= 0).any():
            loss = loss + F.cross_entropy(out[k], tgt[k], ignore_index=-100)
    return loss


def decode_rnn(out: dict[str, Tensor]) -> list[DialogueState]:
    """Classes with presence probability strictly above 0.5, their argmax slot values
    (skipping "none"), argmax start and end."""
    states = []
    present = out["presence"] > 0.0  # sigmoid(x) > 0.5
    starts = out["start"].argmax(-1) + 1
    ends = out["end"].argmax(-1) + 1
    for b in range(present.shape[0]):
        triples = set()
        for c in torch.nonzero(present[b]).flatten().tolist():
            for i, s in enumerate(SLOTS):
                lo, hi = _SLOT_OFFSETS[i], _SLOT_OFFSETS[i + 1]
                v = int(out["slots"][b, c, lo:hi].argmax())
                if v > 0:
                    triples.add((c, s, SLOT_CHOICES[s][v]))
        states.append(DialogueState(int(starts[b]), int(ends[b]), frozenset(triples)))
    return states


@dataclass
class RnnItem:
    key: Key
    video: object  # model.VideoInput
    ctx_ids: list[int]
    state: DialogueState


def rnn_items(dialogues: list[Dialogue], videos: dict[str, object], vocab: Vocabulary) -> list[RnnItem]:
    """One item per turn; the dialogue stream is the full history up to the question."""
    return [RnnItem((d.dialogue_id, t), videos[d.scene_id], vocab.encode(full_history(d, t)), turn.gold_state)
            for d in dialogues for t, turn in enumerate(d.turns, 1)]


def rnn_collate(items: list[RnnItem], num_classes: int) -> tuple[dict, dict]:
    lc = max(len(it.ctx_ids) for it in items)
    ctx = torch.zeros(len(items), lc, dtype=torch.long)
    for i, it in enumerate(items):
        ctx[i, : len(it.ctx_ids)] = torch.tensor(it.ctx_ids)
    batch = {
        "obj_ids": torch.stack([it.video.obj_ids for it in items]),
        "bb": torch.stack([it.video.bb for it in items]),
        "cnn": torch.stack([it.video.cnn for it in items]),
        "ctx_ids": ctx,
        "ctx_len": torch.tensor([len(it.ctx_ids) for it in items]),
    }
    tg = [state_targets(it.state, num_classes) for it in items]
    tgt = {
        "presence": torch.tensor(np.stack([t[0] for t in tg])),
        "slots": torch.tensor(np.stack([t[1] for t in tg])),
        "start": torch.tensor([t[2] for t in tg]),
        "end": torch.tensor([t[3] for t in tg]),
    }
    return batch, tgt


@dataclass
class RnnResult:
    model: RnnTracker
    history: list[float] = field(default_factory=list)


def train_rnn_tracker(cfg: RnnConfig, items: list[RnnItem], vocab_size: int, num_classes: int,
                      num_frames: int, d_cnn: int) -> RnnResult:
    torch.manual_seed(cfg.seed)
    model = RnnTracker(cfg, vocab_size, num_classes, num_frames, d_cnn)
    params = dict(model.named_parameters())
    opt = OptimizerState()
    per_epoch = math.ceil(len(items) / cfg.batch_size)
    sched = Schedule(cfg.peak_lr, per_epoch, per_epoch * cfg.epochs)
    rng = np.random.default_rng(cfg.seed)
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            batch, tgt = rnn_collate([items[j] for j in order[i : i + cfg.batch_size]], num_classes)
            loss = rnn_loss(model(batch), tgt)
            for p in params.values():
                p.grad = None
            loss.backward()
            adam_step(params, opt, sched.lr(opt.step + 1), AdamHyper(beta2=0.999, eps=1e-8, clip_norm=5.0))
            total += loss.item()
        history.append(total / per_epoch)
        log.info("%s epoch %d loss %.4f", cfg.label, epoch + 1, history[-1])
    model.eval()
    return RnnResult(model, history)


@torch.no_grad()
def rnn_predict(model: RnnTracker, items: list[RnnItem], num_classes: int,
                batch_size: int = 64) -> dict[Key, DialogueState]:
    model.eval()
    preds = {}
    for i in range(0, len(items), batch_size):
        chunk = items[i : i + batch_size]
        batch, _ = rnn_collate(chunk, num_classes)
        for it, st in zip(chunk, decode_rnn(model(batch))):
            preds[it.key] = st
    return preds
