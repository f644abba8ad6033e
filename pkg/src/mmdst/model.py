"""VDTN: multimodal forward pass, state decoding, DST and visual denoising losses."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .features import FRAME_ROW, FeatureBundle, sinusoidal_encoding
from .neural import Dense, ModelConfig, TransformerStack, glorot_, label_smoothed_nll
from .state import END_STATE, PAD, SPECIALS, STATE, StateError, Vocabulary, obj_token

log = logging.getLogger(__name__)

STATE_ID = SPECIALS.index(STATE)
END_ID = SPECIALS.index(END_STATE)
PAD_ID = SPECIALS.index(PAD)

SELF_SUPERVISION_MODES = ("none", "obj", "obj_tracking", "seg", "obj+seg")
LOSS_KINDS = ("L1", "L2")


@dataclass
class VideoInput:
    """Tensorised visual rows of one video; shared by every turn of its dialogue."""

    obj_ids: Tensor  # (L_obj,) long
    bb: Tensor  # (L_obj, 4)
    cnn: Tensor  # (L_obj, d_cnn)
    bundle: FeatureBundle
    oracle_bb: Tensor | None = None


@dataclass
class Example:
    key: tuple[str, int]
    video: VideoInput
    ctx_ids: list[int]
    target_ids: list[int] | None = None  # flattened gold state + END_STATE


@dataclass
class Batch:
    obj_ids: Tensor
    bb: Tensor
    cnn: Tensor
    ctx_ids: Tensor
    ctx_len: Tensor
    state_in: Tensor | None
    state_tgt: Tensor | None
    oracle_bb: Tensor | None
    bundles: list[FeatureBundle]
    keys: list[tuple[str, int]]

    @property
    def size(self) -> int:
        return self.obj_ids.shape[0]


@dataclass
class ForwardTrace:
    z_v: Tensor  # transformer outputs at video positions, (B, L_obj, d)


def video_input(bundle: FeatureBundle, vocab: Vocabulary, oracle_bb: np.ndarray | None = None,
                features: str = "bb+cnn", dtype: torch.dtype = torch.float32) -> VideoInput:
    """With ``features="cnn"`` object identities are hidden: detection rows carry PAD."""
    toks = bundle.x_obj
    if features == "cnn":
        toks = [t if c == FRAME_ROW else PAD for t, (_, _, c) in zip(toks, bundle.frame_slots)]
    return VideoInput(
        obj_ids=torch.tensor(vocab.encode(toks)),
        bb=torch.tensor(bundle.x_bb, dtype=dtype),
        cnn=torch.tensor(bundle.x_cnn, dtype=dtype),
        bundle=bundle,
        oracle_bb=None if oracle_bb is None else torch.tensor(oracle_bb, dtype=dtype),
    )


def encode_target(tokens: list[str], vocab: Vocabulary) -> list[int]:
    """Strict encoding of a gold state sequence; appends END_STATE when absent."""
    missing = [t for t in tokens if t not in vocab]
    if missing:
        raise StateError(f"gold tokens not in vocabulary: {missing[:5]}")
    ids = vocab.encode(tokens)
    if not ids or ids[-1] != END_ID:
        ids.append(END_ID)
    return ids


def collate(examples: list[Example]) -> Batch:
    b = len(examples)
    lc = max(len(e.ctx_ids) for e in examples)
    ctx = torch.full((b, lc), PAD_ID, dtype=torch.long)
    for i, e in enumerate(examples):
        ctx[i, : len(e.ctx_ids)] = torch.tensor(e.ctx_ids)
    state_in = state_tgt = None
    if all(e.target_ids is not None for e in examples):
        ls = max(len(e.target_ids) for e in examples)
        state_in = torch.full((b, ls), PAD_ID, dtype=torch.long)
        state_tgt = torch.full((b, ls), PAD_ID, dtype=torch.long)
        for i, e in enumerate(examples):
            t = torch.tensor(e.target_ids)
            state_in[i, 0] = STATE_ID
            state_in[i, 1 : len(t)] = t[:-1]
            state_tgt[i, : len(t)] = t
    have_oracle = all(e.video.oracle_bb is not None for e in examples)
    return Batch(
        obj_ids=torch.stack([e.video.obj_ids for e in examples]),
        bb=torch.stack([e.video.bb for e in examples]),
        cnn=torch.stack([e.video.cnn for e in examples]),
        ctx_ids=ctx,
        ctx_len=torch.tensor([len(e.ctx_ids) for e in examples]),
        state_in=state_in,
        state_tgt=state_tgt,
        oracle_bb=torch.stack([e.video.oracle_bb for e in examples]) if have_oracle else None,
        bundles=[e.video.bundle for e in examples],
        keys=[e.key for e in examples],
    )


def prefix_causal_mask(l_video: int, ctx_len: Tensor, l_ctx: int, l_state: int) -> Tensor:
    """Boolean (B, L, L) mask, True where query may attend key.

    Encoder rows (video + valid context) see every valid encoder row; state row k
    additionally sees state rows 0..k.
    """
    b = ctx_len.shape[0]
    l_enc = l_video + l_ctx
    total = l_enc + l_state
    enc_valid = torch.cat([torch.ones(b, l_video, dtype=torch.bool),
                           torch.arange(l_ctx)[None, :] < ctx_len[:, None]], dim=1)
    dec = torch.zeros(total, l_state, dtype=torch.bool)
    dec[l_enc:] = torch.ones(l_state, l_state, dtype=torch.bool).tril()
    return torch.cat([enc_valid[:, None, :].expand(b, total, l_enc),
                      dec[None].expand(b, -1, -1)], dim=2)


class VDTN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.embedding = nn.Parameter(glorot_(torch.empty(cfg.vocab_size, d)))
        self.bb_proj = Dense(4, d)
        self.cnn_proj = Dense(cfg.d_cnn, d)
        self.stack = TransformerStack(d, cfg.n_layers, cfg.n_heads, cfg.ffn_mult, cfg.dropout_rate)
        if cfg.tie_output:
            self.state_out_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        else:
            self.state_out = Dense(d, cfg.vocab_size)
        self.f_bb = Dense(d, 4)
        self.f_cnn = Dense(d, cfg.d_cnn)
        self.register_buffer(
            "pe", torch.tensor(sinusoidal_encoding(cfg.max_positions, d), dtype=torch.float32),
            persistent=False)
        self.scale = math.sqrt(d)

    # embeddings

    def token_embedding(self, ids: Tensor) -> Tensor:
        return F.embedding(ids, self.embedding) * self.scale

    def embed_tokens(self, ids: Tensor, positions: Tensor) -> Tensor:
        if positions.numel() and int(positions.max()) >= self.cfg.max_positions:
            raise ValueError("sequence longer than max_positions")
        return self.token_embedding(ids) + self.pe[positions].to(self.embedding.dtype)

    def output_logits(self, h: Tensor) -> Tensor:
        if self.cfg.tie_output:
            return F.linear(h, self.embedding, self.state_out_bias)
        return self.state_out(h)

    def embed_video(self, obj_ids: Tensor, bb: Tensor, cnn: Tensor) -> Tensor:
        """Z_V = Z_obj + ReLU(bb proj) + ReLU(cnn proj), restricted to the configured features."""
        z = self.token_embedding(obj_ids)
        if self.cfg.features in ("bb", "bb+cnn"):
            z = z + F.relu(self.bb_proj(bb))
        if self.cfg.features in ("cnn", "bb+cnn"):
            z = z + F.relu(self.cnn_proj(cnn))
        return z

    # forward

    def forward(self, batch: Batch, bb: Tensor | None = None, cnn: Tensor | None = None
                ) -> tuple[Tensor, ForwardTrace]:
        """Teacher-forced pass. ``bb``/``cnn`` override the batch's (e.g. masked copies)."""
        bb = batch.bb if bb is None else bb
        cnn = batch.cnn if cnn is None else cnn
        b, lv = batch.obj_ids.shape
        lc = batch.ctx_ids.shape[1]
        ls = batch.state_in.shape[1]
        z_v = self.embed_video(batch.obj_ids, bb, cnn)
        z_c = self.embed_tokens(batch.ctx_ids, torch.arange(lc).expand(b, -1))
        # decoding positions restart at 0, so state row k sits a fixed offset from
        # the k-th token of the prior-state block it often copies
        z_s = self.embed_tokens(batch.state_in, torch.arange(ls).expand(b, -1))
        z = torch.cat([z_v, z_c, z_s], dim=1)
        h, _ = self.stack(z, prefix_causal_mask(lv, batch.ctx_len, lc, ls))
        logits = self.output_logits(h[:, lv + lc :])
        return logits, ForwardTrace(h[:, :lv])

    def dst_loss(self, logits: Tensor, batch: Batch) -> Tensor:
        return label_smoothed_nll(logits, batch.state_tgt, self.cfg.label_smoothing_epsilon, PAD_ID)

    # incremental decoding

    def encode(self, batch: Batch, bb: Tensor | None = None, cnn: Tensor | None = None) -> dict:
        """Run encoder rows once and keep their per-layer keys/values."""
        bb = batch.bb if bb is None else bb
        cnn = batch.cnn if cnn is None else cnn
        b, lv = batch.obj_ids.shape
        lc = batch.ctx_ids.shape[1]
        z = torch.cat([self.embed_video(batch.obj_ids, bb, cnn),
                       self.embed_tokens(batch.ctx_ids, torch.arange(lc).expand(b, -1))], dim=1)
        mask = prefix_causal_mask(lv, batch.ctx_len, lc, 0)
        _, kvs = self.stack(z, mask, keep_kv=True)
        key_mask = mask[:, 0, :]
        return {
            "layers": [{"k": k, "v": v} for k, v in kvs],
            "key_mask": key_mask,
            "next_pos": torch.zeros_like(batch.ctx_len),
        }

    def step(self, cache: dict, ids: Tensor) -> Tensor:
        """Feed one token per row; returns next-token log-probabilities (B, V)."""
        x = self.embed_tokens(ids[:, None], cache["next_pos"][:, None])
        base = cache["key_mask"]
        for block, layer in zip(self.stack.blocks, cache["layers"]):
            n_prev = layer["k"].shape[2] - base.shape[1]
            key_mask = torch.cat([base, torch.ones(base.shape[0], n_prev, dtype=torch.bool)], dim=1)
            x = block.step(x, layer, key_mask)
        cache["next_pos"] = cache["next_pos"] + 1
        return torch.log_softmax(self.output_logits(x[:, 0]), dim=-1)


@torch.no_grad()
def compose_object_embeddings(model: VDTN, vocab: Vocabulary, valid_classes) -> int:
    """Start each OBJ<k> row at the scaled sum of its attribute-value rows.

    The rows stay free parameters; only their starting point changes, so an
    object token begins close to the words that describe it. Returns the
    number of rows set.
    """
    n = 0
    for k, attrs in enumerate(valid_classes):
        tok = obj_token(k)
        if tok not in vocab or not all(a in vocab for a in attrs):
            continue
        rows = model.embedding[[vocab.id(a) for a in attrs]]
        model.embedding[vocab.id(tok)] = rows.sum(0) / math.sqrt(len(attrs))
        n += 1
    return n


def select_cache(cache: dict, index: Tensor) -> dict:
    return {
        "layers": [{"k": l["k"][index], "v": l["v"][index]} for l in cache["layers"]],
        "key_mask": cache["key_mask"][index],
        "next_pos": cache["next_pos"][index],
    }


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"
    beam_size: int = 5
    max_len: int = 60

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")


@dataclass
class Hypothesis:
    ids: list[int]  # generated ids, END_STATE included when complete
    score: float
    complete: bool

    def tokens(self, vocab: Vocabulary) -> list[str]:
        return vocab.decode(self.ids)


@torch.no_grad()
def greedy_decode(model: VDTN, batch: Batch, max_len: int = 60) -> list[Hypothesis]:
    cache = model.encode(batch)
    b = batch.size
    ids = torch.full((b,), STATE_ID, dtype=torch.long)
    out: list[list[int]] = [[] for _ in range(b)]
    score = [0.0] * b
    done = [False] * b
    for _ in range(max_len):
        logp = model.step(cache, ids)
        nxt = logp.argmax(-1)
        for i in range(b):
            if not done[i]:
                tok = int(nxt[i])
                out[i].append(tok)
                score[i] += float(logp[i, tok])
                done[i] = tok == END_ID
        if all(done):
            break
        ids = nxt
    return [Hypothesis(o, s, d) for o, s, d in zip(out, score, done)]


def _better(a: Hypothesis, b: Hypothesis | None) -> bool:
    if b is None:
        return True
    if a.complete != b.complete:
        return a.complete
    return a.score > b.score


@torch.no_grad()
def beam_decode(model: VDTN, batch: Batch, beam_size: int = 5, max_len: int = 60) -> list[Hypothesis]:
    """Per-example beam search without length normalisation.

    Each step keeps the ``beam_size`` best extensions (stable order, so ties go
    to the lower vocabulary id as in greedy); extensions ending in END_STATE
    retire as complete. Search stops once no live hypothesis can beat the best
    complete one.
    """
    results = []
    full = model.encode(batch)
    for i in range(batch.size):
        cache = select_cache(full, torch.tensor([i]))
        live_ids: list[list[int]] = [[]]
        live_scores = torch.zeros(1, dtype=torch.float64)
        last = torch.tensor([STATE_ID])
        best: Hypothesis | None = None
        for t in range(max_len):
            logp = model.step(cache, last).double()
            cand = (live_scores[:, None] + logp).reshape(-1)
            order = torch.sort(cand, descending=True, stable=True).indices[:beam_size]
            v = logp.shape[1]
            keep_rows, new_ids, new_scores = [], [], []
            for idx in order.tolist():
                row, tok = divmod(idx, v)
                s = float(cand[idx])
                seq = live_ids[row] + [tok]
                if tok == END_ID:
                    h = Hypothesis(seq, s, True)
                    if _better(h, best):
                        best = h
                else:
                    keep_rows.append(row)
                    new_ids.append(seq)
                    new_scores.append(s)
            if not keep_rows:
                live_ids = []
                break
            if best is not None and best.complete and max(new_scores) <= best.score:
                live_ids = []
                break
            cache = select_cache(cache, torch.tensor(keep_rows))
            live_ids = new_ids
            live_scores = torch.tensor(new_scores, dtype=torch.float64)
            last = torch.tensor([s[-1] for s in new_ids])
        if best is None and live_ids:
            j = int(torch.argmax(live_scores))
            best = Hypothesis(live_ids[j], float(live_scores[j]), False)
        results.append(best)
    return results


def decode_state(model: VDTN, batch: Batch, cfg: DecodeConfig) -> list[Hypothesis]:
    """Decode every example of ``batch``.

    Beam results are compared with the greedy hypothesis and the better one is
    kept, so a beam output never scores below greedy under the same model.
    """
    was_training = model.training
    model.eval()
    try:
        greedy = greedy_decode(model, batch, cfg.max_len)
        if cfg.strategy == "greedy":
            return greedy
        beams = beam_decode(model, batch, cfg.beam_size, cfg.max_len)
        return [b if not _better(g, b) else g for b, g in zip(beams, greedy)]
    finally:
        model.train(was_training)


# visual self-supervision


@dataclass(frozen=True)
class MaskPlan:
    masked_object_rows: frozenset[tuple[int, int]] = frozenset()
    masked_segments: frozenset[int] = frozenset()
    # the one stacked row (index within the frame block) scored per masked segment
    segment_rows: tuple[tuple[int, int], ...] = ()

    @property
    def empty(self) -> bool:
        return not self.masked_object_rows and not self.masked_segments


def make_mask_plan(bundle: FeatureBundle, p_obj: float = 0.15, p_seg: float = 0.15,
                   seed: int | np.random.Generator = 0) -> MaskPlan:
    """Sample masks frame by frame, rejecting any row whose object slot (or
    segment) was masked in the previous frame."""
    if not (0.0 <= p_obj <= 1.0 and 0.0 <= p_seg <= 1.0):
        raise ValueError("masking probabilities must be in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rows: set[tuple[int, int]] = set()
    segs: set[int] = set()
    seg_rows = []
    by_frame: dict[int, list[int]] = {}
    for m, j, c in bundle.frame_slots:
        if c >= 0:
            by_frame.setdefault(m, []).append(j)
    for m in range(bundle.num_segments):
        for j in by_frame.get(m, []):
            coin = rng.random()
            if (m - 1, j) not in rows and coin < p_obj:
                rows.add((m, j))
        coin = rng.random()
        pick = int(rng.integers(0, bundle.n_obj + 1))
        if (m - 1) not in segs and coin < p_seg:
            segs.add(m)
            seg_rows.append((m, pick))
    return MaskPlan(frozenset(rows), frozenset(segs), tuple(seg_rows))


def row_index(m: int, j: int, n_obj: int) -> int:
    return m * (n_obj + 1) + j


def apply_mask(bb: Tensor, cnn: Tensor, plans: list[MaskPlan], n_obj: int) -> tuple[Tensor, Tensor]:
    """Copies of batched ``bb``/``cnn`` with planned rows zeroed."""
    bb = bb.clone()
    cnn = cnn.clone()
    for b, plan in enumerate(plans):
        for m, j in plan.masked_object_rows:
            bb[b, row_index(m, j, n_obj)] = 0
        for m in plan.masked_segments:
            lo = row_index(m, 0, n_obj)
            cnn[b, lo : lo + n_obj + 1] = 0
    return bb, cnn


def reconstruction(pred: Tensor, target: Tensor, kind: str) -> Tensor:
    """Mean over coordinates, then mean over rows."""
    if kind == "L1":
        per_row = (pred - target).abs().mean(-1)
    elif kind == "L2":
        per_row = ((pred - target) ** 2).mean(-1)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return per_row.mean()


def _zero(like: Tensor) -> Tensor:
    return like.sum() * 0.0


def denoise_obj_loss(model: VDTN, trace: ForwardTrace, plans: list[MaskPlan], target_bb: Tensor,
                     n_obj: int, kind: str = "L1") -> tuple[Tensor, int]:
    """Returns (loss, number of scored rows); zero rows yields a zero loss."""
    idx = [(b, row_index(m, j, n_obj)) for b, p in enumerate(plans) for m, j in sorted(p.masked_object_rows)]
    if not idx:
        log.debug("object mask plan empty")
        return _zero(trace.z_v), 0
    bi, ri = map(torch.tensor, zip(*idx))
    return reconstruction(model.f_bb(trace.z_v[bi, ri]), target_bb[bi, ri], kind), len(idx)


def denoise_seg_loss(model: VDTN, trace: ForwardTrace, plans: list[MaskPlan], target_cnn: Tensor,
                     n_obj: int, kind: str = "L1") -> tuple[Tensor, int]:
    idx = [(b, row_index(m, j, n_obj)) for b, p in enumerate(plans) for m, j in p.segment_rows]
    if not idx:
        log.debug("segment mask plan empty")
        return _zero(trace.z_v), 0
    bi, ri = map(torch.tensor, zip(*idx))
    return reconstruction(model.f_cnn(trace.z_v[bi, ri]), target_cnn[bi, ri], kind), len(idx)


def tracking_obj_loss(model: VDTN, trace: ForwardTrace, batch: Batch, kind: str = "L1") -> tuple[Tensor, int]:
    if batch.oracle_bb is None:
        raise ValueError("tracking loss needs oracle boxes")
    idx = [(b, r) for b, bundle in enumerate(batch.bundles) for r in bundle.object_rows()]
    if not idx:
        return _zero(trace.z_v), 0
    bi, ri = map(torch.tensor, zip(*idx))
    return reconstruction(model.f_bb(trace.z_v[bi, ri]), batch.oracle_bb[bi, ri], kind), len(idx)


@dataclass(frozen=True)
class SelfSupervision:
    mode: str = "none"
    loss_kind: str = "L1"
    weight: float = 1.0
    p_obj: float = 0.15
    p_seg: float = 0.15

    def __post_init__(self):
        if self.mode not in SELF_SUPERVISION_MODES:
            raise ValueError(f"unknown self-supervision mode {self.mode!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")


@dataclass
class LossParts:
    total: Tensor
    dst: Tensor
    visual: dict[str, Tensor] = field(default_factory=dict)
    plans: list[MaskPlan] = field(default_factory=list)


def joint_training_loss(model: VDTN, batch: Batch, ssl: SelfSupervision,
                        rng: np.random.Generator | None = None) -> LossParts:
    """L_dst + weight * (selected visual losses); masking draws from ``rng``."""
    n_obj = batch.bundles[0].n_obj
    # a zero weight disables the visual task entirely, masking included
    active = ssl.weight != 0
    masks_obj = active and ssl.mode in ("obj", "obj+seg")
    masks_seg = active and ssl.mode in ("seg", "obj+seg")
    plans: list[MaskPlan] = []
    bb, cnn = batch.bb, batch.cnn
    if masks_obj or masks_seg:
        rng = rng if rng is not None else np.random.default_rng(0)
        plans = [make_mask_plan(bd, ssl.p_obj if masks_obj else 0.0, ssl.p_seg if masks_seg else 0.0, rng)
                 for bd in batch.bundles]
        bb, cnn = apply_mask(batch.bb, batch.cnn, plans, n_obj)
    logits, trace = model(batch, bb, cnn)
    dst = model.dst_loss(logits, batch)
    visual: dict[str, Tensor] = {}
    if masks_obj:
        visual["obj"], _ = denoise_obj_loss(model, trace, plans, batch.bb, n_obj, ssl.loss_kind)
    if masks_seg:
        visual["seg"], _ = denoise_seg_loss(model, trace, plans, batch.cnn, n_obj, ssl.loss_kind)
    if active and ssl.mode == "obj_tracking":
        visual["obj_tracking"], _ = tracking_obj_loss(model, trace, batch, ssl.loss_kind)
    total = dst
    for v in visual.values():
        total = total + ssl.weight * v
    return LossParts(total, dst, visual, plans)
