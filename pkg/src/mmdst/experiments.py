"""Corpus preparation, training, rollout evaluation, ablation grid and the response task."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch.nn import functional as F

from . import baselines
from .dialogue import ANSWERS, LEXICON, Dialogue, generate_split, read_scene, read_split, write_scenes, write_split
from .features import FeatureBundle, build_visual_inputs, oracle_boxes, sinusoidal_encoding
from .metrics import MetricConfig, MetricsReport, evaluate_predictions, render_table
from .model import (
    VDTN, DecodeConfig, Example, SelfSupervision, collate, compose_object_embeddings, decode_state, encode_target,
    joint_training_loss, video_input,
)
from .neural import (
    AdamHyper, Dense, ModelConfig, NumericError, OptimizerState, Schedule, TransformerStack, adam_step,
    glorot_, read_checkpoint, save_checkpoint,
)
from .scene import PERFECT_PERCEPTION, PerceptionConfig, SceneSpec, build_universe, perceive, segment_features
from .state import (
    EMPTY_STATE, ContextWindowConfig, DialogueState, Vocabulary, build_context, flatten_state, parse_state,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DATA_SCHEMA = "mmdst-data-v1"


class ExperimentError(RuntimeError):
    pass


# configuration


@dataclass
class ExperimentConfig:
    name: str = "run"
    data: str = ""
    # model
    d: int = 128
    n_layers: int = 1
    n_heads: int = 8
    d_cnn: int = 64
    dropout_rate: float = 0.1
    label_smoothing_epsilon: float = 0.1
    features: str = "bb+cnn"
    include_time: bool = True
    tie_output: bool = True
    compose_obj_init: bool = True
    # self-supervision
    ssl_mode: str = "none"
    loss_kind: str = "L1"
    ssl_weight: float = 1.0
    p_obj: float = 0.15
    p_seg: float = 0.15
    # context
    use_prior_state: bool = True
    max_turns: int = 1
    # perception
    detection_recall: float = 0.9
    class_confusion_rate: float = 0.05
    box_noise_sigma: float = 0.02
    perception_seed: int = 0
    n_obj: int = 10
    n_stride: int = 12
    # evaluation
    prior_state_source: str = "predicted"
    decode: str = "greedy"
    beam_size: int = 5
    max_decode_len: int = 60
    # optimisation
    epochs: int = 40
    batch_size: int = 32
    peak_lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.prior_state_source not in ("predicted", "oracle"):
            raise ValueError("prior_state_source must be 'predicted' or 'oracle'")
        self.ssl()  # validates mode and loss kind
        self.decode_config()

    def perception(self) -> PerceptionConfig:
        return PerceptionConfig(self.detection_recall, self.class_confusion_rate,
                                self.box_noise_sigma, self.perception_seed)

    def context(self) -> ContextWindowConfig:
        return ContextWindowConfig(self.use_prior_state, self.max_turns)

    def ssl(self) -> SelfSupervision:
        return SelfSupervision(self.ssl_mode, self.loss_kind, self.ssl_weight, self.p_obj, self.p_seg)

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(self.decode, self.beam_size, self.max_decode_len)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d=self.d, n_layers=self.n_layers, n_heads=self.n_heads,
                           d_cnn=self.d_cnn, max_decode_len=self.max_decode_len,
                           label_smoothing_epsilon=self.label_smoothing_epsilon,
                           dropout_rate=self.dropout_rate, features=self.features,
                           include_time=self.include_time, tie_output=self.tie_output)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def digest(self, exclude: Iterable[str] = ()) -> str:
        doc = {k: v for k, v in asdict(self).items() if k not in set(exclude)}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _coerce(text: str, kind):
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool, "str": str}[kind]
    if kind is bool:
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    return kind(text.strip())


def parse_key_values(text: str, cls=ExperimentConfig, base=None):
    """Flat ``key = value`` lines; '#' starts a comment. Unknown keys are errors."""
    types = {f.name: f.type for f in fields(cls)}
    updates = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in types:
            raise ValueError(f"line {n}: unknown key {k!r}")
        updates[k] = _coerce(v, types[k])
    base = base if base is not None else cls()
    return dataclasses.replace(base, **updates)


def load_config(path: str | Path, cls=ExperimentConfig):
    return parse_key_values(Path(path).read_text(), cls)


def dump_key_values(cfg) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


# corpus


@dataclass
class Corpus:
    splits: dict[str, list[Dialogue]]
    scenes: dict[str, SceneSpec]
    vocab: Vocabulary
    num_frames: int
    num_classes: int
    seed: int = 0

    def dialogues(self, split: str) -> list[Dialogue]:
        return self.splits[split]

    def manifest(self) -> dict:
        return {
            "schema": DATA_SCHEMA,
            "seed": self.seed,
            "frames": self.num_frames,
            "classes": self.num_classes,
            "vocab_hash": self.vocab.digest(),
            "vocab_size": len(self.vocab),
            "dialogues": sum(len(d) for d in self.splits.values()),
            "turns": sum(len(x.turns) for d in self.splits.values() for x in d),
            "splits": {
                s: {"dialogues": len(d), "turns": sum(len(x.turns) for x in d)}
                for s, d in self.splits.items()
            },
        }


def generate_corpus(n_train: int = 300, n_val: int = 60, n_test: int = 60, frames: int = 300,
                    classes: int = 193, seed: int = 0) -> Corpus:
    universe = build_universe(classes)
    splits, scenes = {}, {}
    for split, n in zip(SPLITS, (n_train, n_val, n_test)):
        dlgs, scs = generate_split(universe, n, frames=frames, seed=seed, split=split)
        splits[split] = dlgs
        scenes.update({s.scene_id: s for s in scs})
    vocab = Vocabulary.build(classes, frames, LEXICON)
    return Corpus(splits, scenes, vocab, frames, classes, seed)


def write_corpus(corpus: Corpus, out: str | Path) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_scenes(out / "scenes", list(corpus.scenes.values()))
    for split, dlgs in corpus.splits.items():
        write_split(out / f"{split}.jsonl", dlgs)
    corpus.vocab.save(out / "vocab.txt")
    manifest = corpus.manifest()
    digest = hashlib.sha256()
    for name in [f"{s}.jsonl" for s in corpus.splits] + ["vocab.txt"]:
        digest.update((out / name).read_bytes())
    manifest["checksum"] = digest.hexdigest()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise ExperimentError(f"no dataset manifest in {path}")
    manifest = json.loads((path / "manifest.json").read_text())
    vocab = Vocabulary.load(path / "vocab.txt")
    if vocab.digest() != manifest["vocab_hash"]:
        raise ExperimentError("vocab.txt does not match the manifest hash")
    splits = {s: read_split(path / f"{s}.jsonl") for s in SPLITS if (path / f"{s}.jsonl").exists()}
    scenes = {}
    for dlgs in splits.values():
        for d in dlgs:
            scenes[d.scene_id] = read_scene(path / "scenes", d.scene_id)
    return Corpus(splits, scenes, vocab, manifest["frames"], manifest["classes"], manifest["seed"])


# visual inputs


class VideoCache:
    """Memoised visual inputs per (scene, perception, grid, features)."""

    def __init__(self, corpus: Corpus, vocab: Vocabulary):
        self.corpus = corpus
        self.vocab = vocab
        self._store: dict = {}

    def bundle(self, scene_id: str, perception: PerceptionConfig, n_obj: int, n_stride: int,
               d_cnn: int) -> FeatureBundle:
        key = ("bundle", scene_id, perception, n_obj, n_stride, d_cnn)
        if key not in self._store:
            scene = self.corpus.scenes[scene_id]
            perceived = perceive(scene, perception, n_obj, n_stride)
            seg = segment_features(scene, n_stride, d_cnn, seed=perception.seed)
            self._store[key] = build_visual_inputs(perceived, seg, n_obj, n_stride)
        return self._store[key]

    def video(self, scene_id: str, perception: PerceptionConfig, n_obj: int, n_stride: int,
              d_cnn: int, features: str, with_oracle: bool = False):
        key = ("video", scene_id, perception, n_obj, n_stride, d_cnn, features, with_oracle)
        if key not in self._store:
            b = self.bundle(scene_id, perception, n_obj, n_stride, d_cnn)
            ob = oracle_boxes(b, self.corpus.scenes[scene_id]) if with_oracle else None
            self._store[key] = video_input(b, self.vocab, ob, features)
        return self._store[key]


def turn_target(state: DialogueState, include_time: bool) -> list[str]:
    return flatten_state(state if include_time else state.without_time(), include_time)


def build_examples(corpus: Corpus, split: str, cfg: ExperimentConfig, cache: VideoCache,
                   perception: PerceptionConfig | None = None) -> list[Example]:
    """Teacher-forced examples: the prior state of turn t is the gold state of t-1."""
    perception = perception or cfg.perception()
    out = []
    tracking = cfg.ssl_mode == "obj_tracking"
    for dlg in corpus.dialogues(split):
        video = cache.video(dlg.scene_id, perception, cfg.n_obj, cfg.n_stride, cfg.d_cnn,
                            cfg.features, tracking)
        for t, turn in enumerate(dlg.turns, 1):
            prior = dlg.turns[t - 2].gold_state if t > 1 else EMPTY_STATE
            ctx = build_context(dlg, t, prior, cfg.context(), cfg.include_time)
            tgt = encode_target(turn_target(turn.gold_state, cfg.include_time), corpus.vocab)
            out.append(Example((dlg.dialogue_id, t), video, corpus.vocab.encode(ctx), tgt))
    return out


def batches(items: list, size: int, order: Iterable[int] | None = None) -> Iterable[list]:
    order = list(range(len(items))) if order is None else list(order)
    for i in range(0, len(order), size):
        yield [items[j] for j in order[i : i + size]]


# training


@dataclass
class TrainResult:
    model: VDTN
    vocab: Vocabulary
    cfg: ExperimentConfig
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    checkpoint: Path | None = None
    seconds: float = 0.0


def build_model(cfg: ExperimentConfig, vocab: Vocabulary, num_classes: int | None = None) -> VDTN:
    torch.manual_seed(cfg.seed)
    model = VDTN(cfg.model_config(len(vocab)))
    if cfg.compose_obj_init and num_classes:
        compose_object_embeddings(model, vocab, build_universe(num_classes).valid_classes)
    return model


@torch.no_grad()
def mean_dst_loss(model: VDTN, examples: list[Example], batch_size: int = 64) -> float:
    was = model.training
    model.eval()
    total, count = 0.0, 0
    for chunk in batches(examples, batch_size):
        batch = collate(chunk)
        logits, _ = model(batch)
        total += float(model.dst_loss(logits, batch)) * len(chunk)
        count += len(chunk)
    model.train(was)
    return total / max(count, 1)


def train(cfg: ExperimentConfig, corpus: Corpus, out_dir: str | Path | None = None,
          cache: VideoCache | None = None, train_split: str = "train", val_split: str | None = "val",
          callback=None) -> TrainResult:
    """Epoch loop with teacher forcing; keeps the weights with the lowest validation L_dst
    (training L_dst when ``val_split`` is None)."""
    started = time.perf_counter()
    cache = cache or VideoCache(corpus, corpus.vocab)
    train_ex = build_examples(corpus, train_split, cfg, cache)
    val_ex = build_examples(corpus, val_split, cfg, cache) if val_split else None
    model = build_model(cfg, corpus.vocab, corpus.num_classes)
    model.train()
    params = dict(model.named_parameters())
    opt = OptimizerState()
    per_epoch = math.ceil(len(train_ex) / cfg.batch_size)
    sched = Schedule(cfg.peak_lr, per_epoch, per_epoch * cfg.epochs)
    rng = np.random.default_rng(cfg.seed)
    ssl = cfg.ssl()
    result = TrainResult(model, corpus.vocab, cfg)
    best_state = copy.deepcopy(model.state_dict())
    ckpt = Path(out_dir) / "checkpoints" / "best" if out_dir else None
    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = {}
        n = 0
        for chunk in batches(train_ex, cfg.batch_size, rng.permutation(len(train_ex))):
            batch = collate(chunk)
            try:
                parts = joint_training_loss(model, batch, ssl, rng)
                if not torch.isfinite(parts.total):
                    raise NumericError("non-finite training loss")
                for p in params.values():
                    p.grad = None
                parts.total.backward()
                adam_step(params, opt, sched.lr(opt.step + 1), AdamHyper())
            except NumericError as exc:
                model.load_state_dict(best_state)
                raise ExperimentError(f"training diverged in epoch {epoch}: {exc}") from exc
            sums["loss"] = sums.get("loss", 0.0) + parts.total.item()
            sums["dst"] = sums.get("dst", 0.0) + parts.dst.item()
            for k, v in parts.visual.items():
                sums[k] = sums.get(k, 0.0) + v.item()
            n += 1
        row = {"epoch": epoch, **{k: v / n for k, v in sums.items()}, "lr": sched.lr(opt.step)}
        sel = mean_dst_loss(model, val_ex) if val_ex is not None else row["dst"]
        row["val_dst" if val_ex is not None else "select_dst"] = sel
        if sel < result.best_val:
            result.best_val, result.best_epoch = sel, epoch
            best_state = copy.deepcopy(model.state_dict())
            if ckpt is not None:
                save_checkpoint(ckpt, model, model.cfg, corpus.vocab.digest(), opt.step,
                                {"val_dst": sel, "epoch": epoch}, {"experiment": asdict(cfg)})
        result.history.append(row)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
        if callback is not None:
            callback(row, model)
    model.load_state_dict(best_state)
    model.eval()
    result.checkpoint = ckpt
    result.seconds = time.perf_counter() - started
    if out_dir:
        out = Path(out_dir)
        (out / "config.txt").write_text(dump_key_values(cfg))
        (out / "history.json").write_text(json.dumps(result.history, indent=2))
    return result


def load_model(path: str | Path, vocab: Vocabulary) -> tuple[VDTN, ExperimentConfig]:
    side, arrays = read_checkpoint(path)
    if side["vocab_hash"] != vocab.digest():
        raise ExperimentError(
            f"checkpoint vocabulary {side['vocab_hash']} does not match dataset {vocab.digest()}")
    mcfg = ModelConfig.from_dict(side["model_config"])
    model = VDTN(mcfg)
    model.load_state_dict({k: torch.tensor(v) for k, v in arrays.items()})
    model.eval()
    known = {f.name for f in fields(ExperimentConfig)}
    cfg = ExperimentConfig(**{k: v for k, v in side.get("experiment", {}).items() if k in known})
    return model, cfg


# evaluation


@dataclass
class Rollout:
    predictions: dict[tuple[str, int], DialogueState]
    records: list[dict]
    golds: list[tuple[tuple[str, int], DialogueState]]


def rollout(model: VDTN, corpus: Corpus, split: str, cfg: ExperimentConfig,
            prior: str = "predicted", decode: DecodeConfig | None = None,
            perception: PerceptionConfig | None = None, cache: VideoCache | None = None,
            batch_size: int = 64) -> Rollout:
    """Decode every turn in dialogue order.

    With ``prior="predicted"`` turn t sees the parsed prediction of turn t-1, so
    gold states of turns >= t are never read while predicting turn t.
    """
    if prior not in ("predicted", "oracle"):
        raise ValueError("prior must be 'predicted' or 'oracle'")
    decode = decode or cfg.decode_config()
    perception = perception or cfg.perception()
    cache = cache or VideoCache(corpus, corpus.vocab)
    dlgs = corpus.dialogues(split)
    videos = [cache.video(d.scene_id, perception, cfg.n_obj, cfg.n_stride, cfg.d_cnn, cfg.features)
              for d in dlgs]
    prev: list[DialogueState] = [EMPTY_STATE] * len(dlgs)
    preds, records = {}, []
    max_turns = max(len(d.turns) for d in dlgs)
    for t in range(1, max_turns + 1):
        live = [i for i, d in enumerate(dlgs) if t <= len(d.turns)]
        exs = []
        for i in live:
            d = dlgs[i]
            p = prev[i] if prior == "predicted" else (d.turns[t - 2].gold_state if t > 1 else EMPTY_STATE)
            ctx = build_context(d, t, p, cfg.context(), cfg.include_time)
            exs.append(Example((d.dialogue_id, t), videos[i], corpus.vocab.encode(ctx)))
        for chunk_idx in batches(live, batch_size):
            chunk = [exs[live.index(i)] for i in chunk_idx]
            hyps = decode_state(model, collate(chunk), decode)
            for i, ex, h in zip(chunk_idx, chunk, hyps):
                toks = h.tokens(corpus.vocab)
                state, notes = parse_state(toks, cfg.include_time, corpus.num_frames, corpus.num_classes)
                prev[i] = state
                preds[ex.key] = state
                records.append({
                    "dialogue_id": ex.key[0], "turn": ex.key[1], "tokens": toks,
                    "parsed_state": state.to_json(), "score": h.score, "strategy": decode.strategy,
                    "complete": h.complete, "notes": notes,
                })
    golds = [((d.dialogue_id, t), turn.gold_state) for d in dlgs for t, turn in enumerate(d.turns, 1)]
    return Rollout(preds, records, golds)


def evaluate(model: VDTN, corpus: Corpus, split: str, cfg: ExperimentConfig, prior: str = "predicted",
             decode: DecodeConfig | None = None, perception: PerceptionConfig | None = None,
             cache: VideoCache | None = None, out_dir: str | Path | None = None,
             tag: str = "") -> MetricsReport:
    ro = rollout(model, corpus, split, cfg, prior, decode, perception, cache)
    report = evaluate_predictions(ro.predictions, ro.golds, MetricConfig(include_time=cfg.include_time))
    decode = decode or cfg.decode_config()
    report.extra.update({"split": split, "prior": prior, "decode": decode.strategy,
                         "perfect_perception": (perception or cfg.perception()).is_perfect})
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        suffix = f"_{tag}" if tag else ""
        write_predictions(out / f"predictions{suffix}.jsonl", ro.records)
        (out / f"report{suffix}.json").write_text(report.to_json())
    return report


def write_predictions(path: str | Path, records: list[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_predictions(path: str | Path) -> dict[tuple[str, int], DialogueState]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            r = json.loads(line)
            out[(r["dialogue_id"], r["turn"])] = DialogueState.from_json(r["parsed_state"])
    return out


def gold_pairs(corpus: Corpus, split: str) -> list[tuple[tuple[str, int], DialogueState]]:
    return [((d.dialogue_id, t), turn.gold_state)
            for d in corpus.dialogues(split) for t, turn in enumerate(d.turns, 1)]


# baselines

BASELINES = ("q-retrieval", "state-prior", "object-random", "object-all",
             "rnn-v", "rnn-d", "rnn-vd", "rnn-vd-att")


def baseline_predictions(name: str, corpus: Corpus, split: str, cfg: ExperimentConfig,
                         perception: PerceptionConfig | None = None, cache: VideoCache | None = None,
                         rnn_epochs: int = 15) -> dict[tuple[str, int], DialogueState]:
    """Predictions of a named reference tracker for every turn of ``split``."""
    if name not in BASELINES:
        raise ValueError(f"unknown baseline {name!r}; choose from {', '.join(BASELINES)}")
    perception = perception or cfg.perception()
    dlgs = corpus.dialogues(split)
    preds: dict[tuple[str, int], DialogueState] = {}
    if name == "q-retrieval":
        index = baselines.build_tfidf_index(corpus.dialogues("train"))
        for d in dlgs:
            for t, turn in enumerate(d.turns, 1):
                preds[(d.dialogue_id, t)] = baselines.q_retrieval_predict(index, turn.question)
    elif name == "state-prior":
        const = baselines.state_prior_predict(corpus.dialogues("train"))
        preds = {(d.dialogue_id, t): const for d in dlgs for t in range(1, len(d.turns) + 1)}
    elif name in ("object-random", "object-all"):
        universe = build_universe(corpus.num_classes)
        for d in dlgs:
            scene = corpus.scenes[d.scene_id]
            seen = perceive(scene, perception, cfg.n_obj, cfg.n_stride)
            for t in range(1, len(d.turns) + 1):
                if name == "object-all":
                    preds[(d.dialogue_id, t)] = baselines.object_all_predict(seen, universe)
                else:
                    rng = np.random.default_rng([cfg.seed, scene.rng_seed, t])
                    preds[(d.dialogue_id, t)] = baselines.object_random_predict(seen, universe, rng)
    else:
        rcfg = baselines.RnnConfig(
            use_video=name != "rnn-d", use_dialogue=name != "rnn-v", use_attention=name.endswith("att"),
            d=cfg.d, epochs=rnn_epochs, batch_size=cfg.batch_size, peak_lr=cfg.peak_lr, seed=cfg.seed)
        cache = cache or VideoCache(corpus, corpus.vocab)

        def videos(split_name, perc):
            return {d.scene_id: cache.video(d.scene_id, perc, cfg.n_obj, cfg.n_stride, cfg.d_cnn, "bb+cnn")
                    for d in corpus.dialogues(split_name)}

        train_items = baselines.rnn_items(corpus.dialogues("train"), videos("train", cfg.perception()),
                                          corpus.vocab)
        res = baselines.train_rnn_tracker(rcfg, train_items, len(corpus.vocab), corpus.num_classes,
                                          corpus.num_frames, cfg.d_cnn)
        items = baselines.rnn_items(dlgs, videos(split, perception), corpus.vocab)
        preds = baselines.rnn_predict(res.model, items, corpus.num_classes)
    return preds


def evaluate_baseline(name: str, corpus: Corpus, split: str, cfg: ExperimentConfig,
                      perception: PerceptionConfig | None = None, cache: VideoCache | None = None,
                      out_dir: str | Path | None = None, rnn_epochs: int = 15) -> MetricsReport:
    preds = baseline_predictions(name, corpus, split, cfg, perception, cache, rnn_epochs)
    report = evaluate_predictions(preds, gold_pairs(corpus, split), MetricConfig(include_time=cfg.include_time))
    report.extra.update({"baseline": name, "split": split})
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        records = [{"dialogue_id": k[0], "turn": k[1], "tokens": flatten_state(v, cfg.include_time),
                    "parsed_state": v.to_json(), "score": None, "strategy": name}
                   for k, v in sorted(preds.items())]
        write_predictions(out / "predictions.jsonl", records)
        (out / "report.json").write_text(report.to_json())
    return report


# ablation grid


def parse_grid(text: str) -> tuple[ExperimentConfig, dict[str, list]]:
    """Grid file: ``key = value`` fixes a base setting, ``key = v1 | v2 | ...`` sweeps it."""
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    base_lines, sweep = [], {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        k, v = (x.strip() for x in line.split("=", 1))
        if k not in types:
            raise ValueError(f"line {n}: unknown key {k!r}")
        if "|" in v:
            sweep[k] = [_coerce(x, types[k]) for x in v.split("|")]
        else:
            base_lines.append(f"{k} = {v}")
    return parse_key_values("\n".join(base_lines)), sweep


def grid_cells(base: ExperimentConfig, sweep: dict[str, list]) -> list[ExperimentConfig]:
    cells = [base]
    for k, values in sweep.items():
        cells = [c.replace(**{k: v}) for c in cells for v in values]
    return cells


def cell_label(cfg: ExperimentConfig) -> dict:
    return {
        "features": {"bb": "x_bb", "bb+cnn": "x_bb+x_cnn", "cnn": "x_cnn"}[cfg.features],
        "state": "B" if cfg.include_time else "B\\time",
        "self_supervision": cfg.ssl_mode,
        "loss": cfg.loss_kind if cfg.ssl_mode != "none" else "-",
        "n_obj": cfg.n_obj,
        "n_stride": cfg.n_stride,
    }


def run_ablation_grid(base: ExperimentConfig, sweep: dict[str, list], corpus: Corpus,
                      out_dir: str | Path | None = None, split: str = "test") -> list[dict]:
    """Train and evaluate every cell under the shared seed; failures are logged and skipped."""
    cells = grid_cells(base, sweep)
    if not cells:
        raise ExperimentError("empty grid")
    rows = []
    cache = VideoCache(corpus, corpus.vocab)
    for i, cfg in enumerate(cells):
        label = cell_label(cfg)
        cell_dir = Path(out_dir) / f"cell_{i:03d}" if out_dir else None
        try:
            res = train(cfg, corpus, cell_dir, cache)
            report = evaluate(res.model, corpus, split, cfg, cfg.prior_state_source, cache=cache, out_dir=cell_dir)
            rows.append({"cell": i, **label, "report": asdict(report), "status": "ok"})
        except Exception as exc:  # noqa: BLE001 - a failing cell must not stop the grid
            log.error("grid cell %d (%s) failed: %s", i, label, exc)
            rows.append({"cell": i, **label, "report": None, "status": f"failed: {exc}"})
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "grid.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
        (Path(out_dir) / "grid.txt").write_text(render_grid(rows) + "\n")
    return rows


def render_grid(rows: list[dict]) -> str:
    def pct(x):
        return "N/A" if x is None else f"{100 * x:5.1f}"

    head = f"{'features':<11} {'state':<7} {'ssl':<12} {'loss':<4} {'n_obj':>5} {'stride':>6} {'Joint':>6} {'IoU@.5':>6} {'IoU@.7':>6}"
    lines = [head, "-" * len(head)]
    for r in rows:
        rep = r["report"]
        if rep is None:
            vals = ("fail", "", "")
        else:
            ious = rep["joint_acc_iou"]
            vals = (pct(rep["joint_acc"]), pct(ious.get("0.5")), pct(ious.get("0.7")))
        lines.append(f"{r['features']:<11} {r['state']:<7} {r['self_supervision']:<12} {r['loss']:<4} "
                     f"{r['n_obj']:>5} {r['n_stride']:>6} {vals[0]:>6} {vals[1]:>6} {vals[2]:>6}")
    return "\n".join(lines)


# response prediction


RESPONSE_SOURCES = ("none", "predicted_no_time", "predicted_full", "oracle")


@dataclass
class ResponseTaskConfig:
    state_source: str = "oracle"
    n_layers: int = 2
    d: int = 128
    n_heads: int = 8
    epochs: int = 6
    batch_size: int = 32
    peak_lr: float = 1e-3
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.state_source not in RESPONSE_SOURCES:
            raise ValueError(f"state_source must be one of {RESPONSE_SOURCES}")


def filter_rows(bundle: FeatureBundle, state: DialogueState | None, use_window: bool = True) -> list[int]:
    """Visual rows kept for the answer classifier.

    Detection rows whose class is in the state and whose frame lies in the state's
    window (when ``use_window``); all rows when ``state`` is None. An empty
    selection falls back to the FRAME rows.
    """
    if state is None:
        return list(range(bundle.l_obj))
    objs = state.objects()
    win = state.window if use_window else None
    keep = []
    for i, (m, _, c) in enumerate(bundle.frame_slots):
        if c < 0 or c not in objs:
            continue
        if win is not None and not (win[0] <= bundle.frames[m] <= win[1]):
            continue
        keep.append(i)
    if not keep:
        log.debug("no visual rows left after state filtering; using FRAME rows")
        keep = [i for i, (_, _, c) in enumerate(bundle.frame_slots) if c == -1]
    return keep


class AnswerClassifier(torch.nn.Module):
    def __init__(self, cfg: ResponseTaskConfig, vocab_size: int, d_cnn: int, n_answers: int):
        super().__init__()
        self.embedding = torch.nn.Parameter(glorot_(torch.empty(vocab_size, cfg.d)))
        self.bb_proj = Dense(4, cfg.d)
        self.cnn_proj = Dense(d_cnn, cfg.d)
        self.stack = TransformerStack(cfg.d, cfg.n_layers, cfg.n_heads, 4, cfg.dropout_rate)
        self.head = Dense(cfg.d, n_answers)
        self.register_buffer("pe", torch.tensor(sinusoidal_encoding(1024, cfg.d), dtype=torch.float32),
                             persistent=False)
        self.scale = math.sqrt(cfg.d)

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        return F.embedding(ids, self.embedding) * self.scale

    def forward(self, batch: dict) -> torch.Tensor:
        zv = (self._embed(batch["obj_ids"]) + F.relu(self.bb_proj(batch["bb"]))
              + F.relu(self.cnn_proj(batch["cnn"])))
        lc = batch["ctx_ids"].shape[1]
        zc = self._embed(batch["ctx_ids"]) + self.pe[:lc]
        z = torch.cat([zv, zc], dim=1)
        valid = torch.cat([batch["v_mask"], batch["c_mask"]], dim=1)
        mask = valid[:, None, :].expand(-1, z.shape[1], -1)
        h, _ = self.stack(z, mask)
        w = valid[..., None].to(h.dtype)
        pooled = (h * w).sum(1) / w.sum(1)
        return self.head(pooled)


@dataclass
class ResponseItem:
    video: object
    rows: list[int]
    ctx_ids: list[int]
    answer: int


def response_items(corpus: Corpus, split: str, states: dict | None, src: str, answers: tuple[str, ...],
                   exp: ExperimentConfig, cache: VideoCache) -> list[ResponseItem]:
    items = []
    ctx_cfg = ContextWindowConfig(use_prior_state=False, max_turns=exp.max_turns)
    for d in corpus.dialogues(split):
        video = cache.video(d.scene_id, exp.perception(), exp.n_obj, exp.n_stride, exp.d_cnn, "bb+cnn")
        for t, turn in enumerate(d.turns, 1):
            state = None if src == "none" else states[(d.dialogue_id, t)]
            rows = filter_rows(video.bundle, state, use_window=(src != "predicted_no_time"))
            ctx = build_context(d, t, None, ctx_cfg)
            items.append(ResponseItem(video, rows, corpus.vocab.encode(ctx), answers.index(turn.answer)))
    return items


def response_collate(items: list[ResponseItem]) -> tuple[dict, torch.Tensor]:
    b = len(items)
    lv = max(len(it.rows) for it in items)
    lc = max(len(it.ctx_ids) for it in items)
    d_cnn = items[0].video.cnn.shape[1]
    obj = torch.zeros(b, lv, dtype=torch.long)
    bb = torch.zeros(b, lv, 4)
    cnn = torch.zeros(b, lv, d_cnn)
    vm = torch.zeros(b, lv, dtype=torch.bool)
    ctx = torch.zeros(b, lc, dtype=torch.long)
    cm = torch.zeros(b, lc, dtype=torch.bool)
    for i, it in enumerate(items):
        r = torch.tensor(it.rows)
        n = len(it.rows)
        obj[i, :n] = it.video.obj_ids[r]
        bb[i, :n] = it.video.bb[r]
        cnn[i, :n] = it.video.cnn[r]
        vm[i, :n] = True
        ctx[i, : len(it.ctx_ids)] = torch.tensor(it.ctx_ids)
        cm[i, : len(it.ctx_ids)] = True
    batch = {"obj_ids": obj, "bb": bb, "cnn": cnn, "v_mask": vm, "ctx_ids": ctx, "c_mask": cm}
    return batch, torch.tensor([it.answer for it in items])


@torch.no_grad()
def response_accuracy(model: AnswerClassifier, items: list[ResponseItem], batch_size: int = 64) -> dict:
    """Argmax accuracy and expected accuracy (mean probability of the gold answer)."""
    model.eval()
    hits, expected = 0, 0.0
    for chunk in batches(items, batch_size):
        batch, y = response_collate(chunk)
        probs = torch.softmax(model(batch), dim=-1)
        hits += int((probs.argmax(-1) == y).sum())
        expected += float(probs[torch.arange(len(y)), y].sum())
    n = max(len(items), 1)
    return {"accuracy": hits / n, "expected_accuracy": expected / n, "n": len(items)}


def response_task(cfg: ResponseTaskConfig, corpus: Corpus, exp: ExperimentConfig | None = None,
                  tracker: VDTN | None = None, cache: VideoCache | None = None,
                  train_split: str = "train", eval_split: str = "test") -> dict:
    """Train an answer classifier on state-filtered visual rows plus dialogue context."""
    exp = exp or ExperimentConfig()
    cache = cache or VideoCache(corpus, corpus.vocab)
    src = cfg.state_source
    states: dict[str, dict | None] = {train_split: None, eval_split: None}
    if src == "oracle":
        for sp in states:
            states[sp] = dict(gold_pairs(corpus, sp))
    elif src.startswith("predicted"):
        if tracker is None:
            raise ExperimentError("predicted states need a tracker model")
        for sp in states:
            states[sp] = rollout(tracker, corpus, sp, exp, "predicted", DecodeConfig("greedy"),
                                 cache=cache).predictions
    train_items = response_items(corpus, train_split, states[train_split], src, ANSWERS, exp, cache)
    eval_items = response_items(corpus, eval_split, states[eval_split], src, ANSWERS, exp, cache)
    torch.manual_seed(cfg.seed)
    model = AnswerClassifier(cfg, len(corpus.vocab), exp.d_cnn, len(ANSWERS))
    chance = response_accuracy(model, eval_items)
    params = dict(model.named_parameters())
    opt = OptimizerState()
    per_epoch = math.ceil(len(train_items) / cfg.batch_size)
    sched = Schedule(cfg.peak_lr, per_epoch, per_epoch * cfg.epochs)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        model.train()
        total = 0.0
        for chunk in batches(train_items, cfg.batch_size, rng.permutation(len(train_items))):
            batch, y = response_collate(chunk)
            loss = F.cross_entropy(model(batch), y)
            for p in params.values():
                p.grad = None
            loss.backward()
            adam_step(params, opt, sched.lr(opt.step + 1))
            total += loss.item()
        log.info("response[%s] epoch %d loss %.4f", src, epoch + 1, total / per_epoch)
    final = response_accuracy(model, eval_items)
    return {
        "state_source": src,
        "accuracy": final["accuracy"],
        "expected_accuracy": final["expected_accuracy"],
        "untrained": chance,
        "chance": 1.0 / len(ANSWERS),
        "n_eval": final["n"],
        "mean_rows": float(np.mean([len(it.rows) for it in eval_items])),
    }


__all__ = [
    "BASELINES", "Corpus", "ExperimentConfig", "baseline_predictions", "evaluate_baseline", "ExperimentError", "PERFECT_PERCEPTION", "Rollout", "TrainResult",
    "VideoCache", "build_examples", "dump_key_values", "evaluate", "generate_corpus", "gold_pairs",
    "load_config", "load_corpus", "load_model", "parse_grid", "parse_key_values", "render_table",
    "response_task", "rollout", "run_ablation_grid", "train", "write_corpus", "write_predictions",
]
