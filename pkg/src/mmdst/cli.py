"""Command-line entry point: ``mmdst {gen,train,eval,baseline,ablate,respond,inspect}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from . import experiments as ex
from .metrics import render_per_turn, render_table
from .model import DecodeConfig
from .scene import MAX_CLASSES, PERFECT_PERCEPTION, ConfigError
from .state import flatten_state

log = logging.getLogger("mmdst")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
USER_ERRORS = (ValueError, FileNotFoundError, NotADirectoryError, PermissionError, ex.ExperimentError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def env_seed(default: int) -> int:
    """MMDST_SEED overrides configured seeds."""
    raw = os.environ.get("MMDST_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ValueError(f"MMDST_SEED must be an integer, got {raw!r}") from exc


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_cfg(path: str | None) -> ex.ExperimentConfig:
    cfg = ex.load_config(path) if path else ex.ExperimentConfig()
    return cfg.replace(seed=env_seed(cfg.seed))


def _writable(out: str) -> Path:
    p = Path(out)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise PermissionError(f"cannot write to {out}: {exc}") from exc
    return p


def cmd_gen(a) -> int:
    if not 1 <= a.classes <= MAX_CLASSES:
        raise ConfigError(f"--classes must be in [1, {MAX_CLASSES}], got {a.classes}")
    if a.dialogues < 3:
        raise ValueError("--dialogues must be >= 3 (one per split at least)")
    out = _writable(a.out)
    n_val = a.val if a.val is not None else max(1, a.dialogues // 7)
    n_test = a.test if a.test is not None else max(1, a.dialogues // 7)
    n_train = a.dialogues - n_val - n_test
    if n_train < 1:
        raise ValueError("not enough dialogues left for the training split")
    corpus = ex.generate_corpus(n_train, n_val, n_test, a.frames, a.classes, env_seed(a.seed))
    manifest = ex.write_corpus(corpus, out)
    _emit({"out": str(out), "dialogues": manifest["dialogues"], "turns": manifest["turns"],
           "checksum": manifest["checksum"]})
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = _load_cfg(a.config)
    corpus = ex.load_corpus(a.data)
    out = _writable(a.out)
    res = ex.train(cfg, corpus, out)
    summary = {"checkpoint": str(res.checkpoint), "best_epoch": res.best_epoch, "best_val_dst": res.best_val,
               "seconds": round(res.seconds, 1)}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2))
    _emit(summary)
    return EXIT_OK


def cmd_eval(a) -> int:
    corpus = ex.load_corpus(a.data)
    model, cfg = ex.load_model(a.ckpt, corpus.vocab)
    decode = DecodeConfig(a.decode, a.beam_size, cfg.max_decode_len)
    perception = PERFECT_PERCEPTION if a.perfect_perception else None
    out = _writable(a.out) if a.out else Path(a.ckpt).parent.parent
    tag = f"{a.split}_{a.prior}_{a.decode}" + ("_perfect" if a.perfect_perception else "")
    report = ex.evaluate(model, corpus, a.split, cfg, a.prior, decode, perception, out_dir=out, tag=tag)
    print(render_table([(f"VDTN [{a.prior}, {a.decode}]", report)]))
    if a.per_turn:
        print(render_per_turn(report))
    _emit({"report": str(out / f"report_{tag}.json"), "joint_acc": report.joint_acc,
           "joint_acc_iou": report.joint_acc_iou})
    return EXIT_OK


def cmd_baseline(a) -> int:
    corpus = ex.load_corpus(a.data)
    cfg = _load_cfg(a.config)
    perception = PERFECT_PERCEPTION if a.perfect_perception else None
    out = _writable(a.out)
    report = ex.evaluate_baseline(a.name, corpus, a.split, cfg, perception, out_dir=out, rnn_epochs=a.epochs)
    print(render_table([(a.name, report)]))
    _emit({"report": str(out / "report.json"), "joint_acc": report.joint_acc,
           "identity_recall": report.components["identity"]["recall"]})
    return EXIT_OK


def cmd_ablate(a) -> int:
    corpus = ex.load_corpus(a.data)
    base, sweep = ex.parse_grid(Path(a.grid).read_text())
    base = base.replace(seed=env_seed(base.seed))
    out = _writable(a.out)
    rows = ex.run_ablation_grid(base, sweep, corpus, out, a.split)
    print(ex.render_grid(rows))
    _emit({"grid": str(out / "grid.json"), "cells": len(rows),
           "failed": sum(r["status"] != "ok" for r in rows)})
    return EXIT_OK


_STATE_FLAGS = {"none": "none", "pred": "predicted_full", "pred-no-time": "predicted_no_time", "oracle": "oracle"}


def cmd_respond(a) -> int:
    corpus = ex.load_corpus(a.data)
    tracker, exp = None, ex.ExperimentConfig()
    if a.states.startswith("pred"):
        if not a.ckpt:
            raise ValueError("--states pred/pred-no-time needs --ckpt")
        tracker, exp = ex.load_model(a.ckpt, corpus.vocab)
    rcfg = ex.ResponseTaskConfig(state_source=_STATE_FLAGS[a.states], epochs=a.epochs, seed=env_seed(a.seed))
    result = ex.response_task(rcfg, corpus, exp, tracker)
    out = _writable(a.out)
    (out / f"response_{a.states}.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    _emit(result)
    return EXIT_OK


def cmd_inspect(a) -> int:
    if a.ckpt:
        side = json.loads(Path(a.ckpt).with_suffix(".json").read_text())
        _emit(side)
        return EXIT_OK
    if a.report:
        from .metrics import MetricsReport

        r = MetricsReport.from_json(Path(a.report).read_text())
        print(render_table([(Path(a.report).stem, r)]))
        print(render_per_turn(r))
        return EXIT_OK
    if not a.data:
        raise ValueError("inspect needs --data, --ckpt or --report")
    corpus = ex.load_corpus(a.data)
    dlgs = corpus.dialogues(a.split)
    dlg = next((d for d in dlgs if d.dialogue_id == a.dialogue), None) if a.dialogue else dlgs[0]
    if dlg is None:
        raise KeyError(f"no dialogue {a.dialogue!r} in split {a.split}")
    print(f"{dlg.dialogue_id} ({dlg.scene_id})")
    for t, turn in enumerate(dlg.turns, 1):
        print(f"[{t}] Q: {' '.join(turn.question)}  A: {turn.answer}")
        print(f"    B: {' '.join(flatten_state(turn.gold_state))}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmdst", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate scenes, dialogues and vocabulary")
    g.add_argument("--out", required=True)
    g.add_argument("--dialogues", type=int, default=420, help="total over train/val/test")
    g.add_argument("--val", type=int, help="validation dialogues (default: total // 7)")
    g.add_argument("--test", type=int, help="test dialogues (default: total // 7)")
    g.add_argument("--frames", type=int, default=300)
    g.add_argument("--classes", type=int, default=193)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a tracker from a key=value config")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a checkpoint over a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--prior", choices=("predicted", "oracle"), default="predicted")
    e.add_argument("--decode", choices=("greedy", "beam"), default="greedy")
    e.add_argument("--beam-size", type=int, default=5)
    e.add_argument("--perfect-perception", action="store_true")
    e.add_argument("--per-turn", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", help="evaluate a reference tracker")
    b.add_argument("--name", required=True, choices=ex.BASELINES)
    b.add_argument("--data", required=True)
    b.add_argument("--split", default="test")
    b.add_argument("--config")
    b.add_argument("--epochs", type=int, default=15, help="RNN baselines only")
    b.add_argument("--perfect-perception", action="store_true")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_baseline)

    ab = sub.add_parser("ablate", help="train and evaluate a grid of configurations")
    ab.add_argument("--grid", required=True)
    ab.add_argument("--data", required=True)
    ab.add_argument("--split", default="test")
    ab.add_argument("--out", required=True)
    ab.set_defaults(func=cmd_ablate)

    r = sub.add_parser("respond", help="answer prediction from state-filtered video")
    r.add_argument("--states", required=True, choices=tuple(_STATE_FLAGS))
    r.add_argument("--data", required=True)
    r.add_argument("--ckpt")
    r.add_argument("--epochs", type=int, default=6)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_respond)

    i = sub.add_parser("inspect", help="print a dialogue, checkpoint sidecar or report")
    i.add_argument("--data")
    i.add_argument("--split", default="train")
    i.add_argument("--dialogue")
    i.add_argument("--ckpt")
    i.add_argument("--report")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mmdst: error: {exc}", file=sys.stderr)
        return EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"mmdst: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"mmdst: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
