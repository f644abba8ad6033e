"""Joint state accuracy with IoU gating, component P/R/F1 and per-turn tables."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

from .scene import SLOTS
from .state import DialogueState

log = logging.getLogger(__name__)

SCHEMA_VERSION = "mmdst-metrics-v1"
GRANULARITIES = ("identity", "slot_triple", "complete_state") + tuple(f"slot:{s}" for s in SLOTS)

Key = tuple[str, int]
Window = tuple[int, int] | None


@dataclass(frozen=True)
class MetricConfig:
    iou_thresholds: tuple[float, ...] = (0.5, 0.7)
    include_time: bool = True

    def __post_init__(self):
        for p in self.iou_thresholds:
            if not 0.0 < p < 1.0:
                raise ValueError(f"IoU threshold must be in (0, 1), got {p}")


def interval_iou(a: Window, b: Window) -> float:
    """IoU of two frame intervals measured by length; 0 for missing or degenerate ones."""
    if a is None or b is None:
        return 0.0
    (s1, e1), (s2, e2) = a, b
    if not (s1 < e1 and s2 < e2):
        return 0.0
    inter = max(0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union


@dataclass
class PRF:
    tp: int = 0
    n_pred: int = 0
    n_gold: int = 0

    def add(self, tp: int, n_pred: int, n_gold: int) -> None:
        self.tp += tp
        self.n_pred += n_pred
        self.n_gold += n_gold

    @property
    def precision(self) -> float:
        return self.tp / self.n_pred if self.n_pred else 0.0

    @property
    def recall(self) -> float:
        return self.tp / self.n_gold if self.n_gold else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "n_pred": self.n_pred, "n_gold": self.n_gold}


def component_counts(pred: DialogueState, gold: DialogueState, granularity: str) -> tuple[int, int, int]:
    """(true positives, predicted items, gold items) for one turn."""
    if granularity == "identity":
        p, g = pred.objects(), gold.objects()
        return len(p & g), len(p), len(g)
    if granularity == "slot_triple":
        return len(pred.triples & gold.triples), len(pred.triples), len(gold.triples)
    if granularity == "complete_state":
        p, g = pred.objects(), gold.objects()
        tp = sum(1 for c in p & g if pred.assignment(c) == gold.assignment(c))
        return tp, len(p), len(g)
    if granularity.startswith("slot:"):
        slot = granularity[5:]
        pt = {t for t in pred.triples if t[1] == slot}
        gt = {t for t in gold.triples if t[1] == slot}
        return len(pt & gt), len(pt), len(gt)
    raise ValueError(f"unknown granularity {granularity!r}")


def component_f1(
    pairs: Iterable[tuple[DialogueState, DialogueState]], granularity: str
) -> tuple[float, float, float]:
    """Micro-averaged (P, R, F1) pooled over (pred, gold) pairs."""
    acc = PRF()
    for pred, gold in pairs:
        acc.add(*component_counts(pred, gold, granularity))
    return acc.precision, acc.recall, acc.f1


class _Accumulator:
    def __init__(self, cfg: MetricConfig):
        self.cfg = cfg
        self.n = 0
        self.joint = 0
        self.joint_iou = {p: 0 for p in cfg.iou_thresholds}
        self.iou_sum = 0.0
        self.prf = {g: PRF() for g in GRANULARITIES}

    def add(self, pred: DialogueState, gold: DialogueState) -> None:
        self.n += 1
        exact = pred.triples == gold.triples
        self.joint += exact
        if self.cfg.include_time:
            iou = interval_iou(pred.window, gold.window)
            self.iou_sum += iou
            for p in self.cfg.iou_thresholds:
                self.joint_iou[p] += exact and iou > p
        for g in GRANULARITIES:
            self.prf[g].add(*component_counts(pred, gold, g))

    def row(self) -> dict:
        n = max(self.n, 1)
        row = {
            "n_turns": self.n,
            "joint_acc": self.joint / n,
            "joint_acc_iou": {
                str(p): (self.joint_iou[p] / n if self.cfg.include_time else None)
                for p in self.cfg.iou_thresholds
            },
            "mean_iou": self.iou_sum / n if self.cfg.include_time else None,
        }
        for g in GRANULARITIES:
            row[g] = self.prf[g].as_dict()
        return row


@dataclass
class MetricsReport:
    joint_acc: float
    joint_acc_iou: dict[str, float | None]
    mean_iou: float | None
    components: dict[str, dict]
    per_turn: list[dict]
    n_turns: int
    n_missing: int
    include_time: bool
    schema: str = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def f1(self, granularity: str) -> float:
        return self.components[granularity]["f1"]

    def iou_acc(self, p: float) -> float | None:
        return self.joint_acc_iou[str(p)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def evaluate_predictions(
    preds: Mapping[Key, DialogueState],
    golds: Sequence[tuple[Key, DialogueState]],
    cfg: MetricConfig = MetricConfig(),
) -> MetricsReport:
    """Score predictions keyed by (dialogue_id, turn) against aligned gold states.

    A gold turn without a prediction is scored against an empty state.
    """
    total = _Accumulator(cfg)
    buckets: dict[int, _Accumulator] = defaultdict(lambda: _Accumulator(cfg))
    missing = 0
    for key, gold in golds:
        pred = preds.get(key)
        if pred is None:
            missing += 1
            log.warning("no prediction for %s turn %d", *key)
            pred = DialogueState()
        if not cfg.include_time:
            pred, gold = pred.without_time(), gold.without_time()
        total.add(pred, gold)
        buckets[key[1]].add(pred, gold)
    per_turn = []
    for t in sorted(buckets):
        per_turn.append({"turn": str(t), **buckets[t].row()})
    avg = total.row()
    per_turn.append({"turn": "Average", **avg})
    return MetricsReport(
        joint_acc=avg["joint_acc"],
        joint_acc_iou=avg["joint_acc_iou"],
        mean_iou=avg["mean_iou"],
        components={g: avg[g] for g in GRANULARITIES},
        per_turn=per_turn,
        n_turns=total.n,
        n_missing=missing,
        include_time=cfg.include_time,
    )


def joint_accuracy(preds, golds, cfg: MetricConfig = MetricConfig()) -> dict:
    r = evaluate_predictions(preds, golds, cfg)
    return {"joint_acc": r.joint_acc, "joint_acc_iou": r.joint_acc_iou}


def per_turn_breakdown(preds, golds, cfg: MetricConfig = MetricConfig()) -> list[dict]:
    return evaluate_predictions(preds, golds, cfg).per_turn


def _pct(x: float | None) -> str:
    return "N/A" if x is None else f"{100 * x:5.1f}"


def render_table(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    """Plain-text table in the column order Obj Ident F1 | Obj Slot F1 |
    Obj State F1 | Joint Acc | Acc IoU@.5 | Acc IoU@.7."""
    header = f"{'Model':<28} {'IdentF1':>7} {'SlotF1':>7} {'StateF1':>7} {'Joint':>7} {'IoU@.5':>7} {'IoU@.7':>7}"
    lines = [header, "-" * len(header)]
    for name, r in rows:
        lines.append(
            f"{name:<28} {_pct(r.f1('identity')):>7} {_pct(r.f1('slot_triple')):>7} "
            f"{_pct(r.f1('complete_state')):>7} {_pct(r.joint_acc):>7} "
            f"{_pct(r.iou_acc(0.5) if '0.5' in r.joint_acc_iou else None):>7} "
            f"{_pct(r.iou_acc(0.7) if '0.7' in r.joint_acc_iou else None):>7}"
        )
    return "\n".join(lines)


def render_per_turn(report: MetricsReport) -> str:
    lines = [f"{'Turn':<8} {'IdentF1':>7} {'SlotF1':>7} {'StateF1':>7} {'Joint':>7} {'IoU@.5':>7}"]
    for row in report.per_turn:
        iou5 = row["joint_acc_iou"].get("0.5")
        lines.append(
            f"{row['turn']:<8} {_pct(row['identity']['f1']):>7} {_pct(row['slot_triple']['f1']):>7} "
            f"{_pct(row['complete_state']['f1']):>7} {_pct(row['joint_acc']):>7} {_pct(iou5):>7}"
        )
    return "\n".join(lines)
