"""Acceptance criteria 1-11, one test each, each recording a PASS/FAIL line.

Criteria 7-11 train desk-scale models; their results are cached by
``acceptance_runs`` (see that module to precompute them in the background).
"""

import random
import time

import numpy as np
import pytest
import torch

import acceptance_runs as runs
from mmdst.metrics import GRANULARITIES, evaluate_predictions, interval_iou
from mmdst.model import (
    PAD_ID, DecodeConfig, apply_mask, beam_decode, decode_state, denoise_obj_loss, denoise_seg_loss,
    greedy_decode, make_mask_plan, tracking_obj_loss,
)
from mmdst.scene import SLOT_VALUES, SLOTS
from mmdst.state import DialogueState, Vocabulary, flatten_state, parse_state
from oracles import (
    finite_difference_error, jitter_biases, kink_guard, memorize, random_case, raster_iou, recount, relu_margin,
    tiny_batch, tiny_bundle, tiny_model, tiny_vocab,
)

FRAMES, CLASSES = 300, 193


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    runs.RESULTS[n] = line
    print(line)
    assert ok, line


# 1. state grammar


def random_valid_state(rng: random.Random, include_time: bool = True) -> DialogueState:
    triples = set()
    for c in rng.sample(range(CLASSES), rng.randint(0, 6)):
        for slot in rng.sample(SLOTS, rng.randint(1, len(SLOTS))):
            triples.add((c, slot, rng.choice(SLOT_VALUES[slot])))
    if not include_time:
        return DialogueState(None, None, frozenset(triples))
    s = rng.randint(1, FRAMES - 1)
    return DialogueState(s, rng.randint(s + 1, FRAMES), frozenset(triples))


def fuzz_tokens(rng: random.Random, vocab: Vocabulary) -> list[str]:
    if rng.random() < 0.5:
        return [vocab.tokens[rng.randrange(len(vocab))] for _ in range(rng.randint(0, 40))]
    # mutate a valid flattening: drops, duplicates, swaps and random insertions
    toks = flatten_state(random_valid_state(rng))
    for _ in range(rng.randint(1, 6)):
        op = rng.randrange(4)
        i = rng.randrange(len(toks) + 1)
        if op == 0 and toks:
            del toks[min(i, len(toks) - 1)]
        elif op == 1 and toks:
            toks.insert(i, toks[min(i, len(toks) - 1)])
        elif op == 2 and len(toks) > 1:
            j = rng.randrange(len(toks))
            k = min(i, len(toks) - 1)
            toks[j], toks[k] = toks[k], toks[j]
        else:
            toks.insert(i, vocab.tokens[rng.randrange(len(vocab))])
    return toks


def test_criterion_01_state_round_trip_and_parser_totality():
    vocab = Vocabulary.build(CLASSES, FRAMES, ["what", "is", "?"])
    rng = random.Random(0)
    started = time.perf_counter()
    bad_trip = 0
    for i in range(10_000):
        with_time = i % 4 != 0
        s = random_valid_state(rng, with_time)
        back, notes = parse_state(flatten_state(s, with_time), with_time, FRAMES, CLASSES)
        bad_trip += back != s or bool(notes)
    crashes = invalid = 0
    for _ in range(10_000):
        toks = fuzz_tokens(rng, vocab)
        try:
            s, _ = parse_state(toks, num_frames=FRAMES, num_classes=CLASSES)
            flatten_state(s, s.window is not None)
            invalid += s.window is not None and not 1 <= s.start < s.end <= FRAMES
        except Exception:  # noqa: BLE001
            crashes += 1
    secs = time.perf_counter() - started
    record(1, bad_trip == 0 and crashes == 0 and invalid == 0 and secs < 30,
           f"round-trip failures {bad_trip}/10000, parser crashes {crashes}/10000, "
           f"invalid outputs {invalid}, {secs:.1f}s (< 30s)")


# 2. IoU oracle


def test_criterion_02_iou_matches_raster_oracle():
    rng = random.Random(0)
    worst = 0.0
    def window():
        s = rng.randint(1, 299)
        return (s, rng.randint(s + 1, 300))

    for i in range(1000):
        a, b = window(), window()
        if i % 25 == 0:
            a = None  # missing window
        elif i % 25 == 1:
            a = (a[0], a[0])  # degenerate window
        worst = max(worst, abs(interval_iou(a, b) - raster_iou(a, b)))
    worked = interval_iou((102, 138), (97, 145))
    record(2, worst <= 1e-9 and worked == 0.75,
           f"max |iou - raster| = {worst:.1e} over 1000 pairs; ([102,138],[97,145]) -> {worked}")


# 3. metric oracle


def test_criterion_03_metrics_match_recount():
    rng = random.Random(0)
    worst, broken = 0.0, 0
    for _ in range(1000):
        preds, golds = random_case(rng, n=rng.randint(1, 40))
        r = evaluate_predictions(preds, golds)
        joint, iou, f1 = recount(preds, golds)
        diffs = [abs(r.joint_acc - joint)] + [abs(r.iou_acc(p) - iou[p]) for p in (0.5, 0.7)]
        diffs += [abs(r.f1(g) - f1[g]) for g in GRANULARITIES]
        worst = max(worst, *diffs)
        broken += not (r.iou_acc(0.7) <= r.iou_acc(0.5) <= r.joint_acc)
        broken += not r.f1("complete_state") <= r.f1("identity") + 1e-12
    record(3, worst <= 1e-12 and broken == 0,
           f"max deviation from recount {worst:.1e} over 1000 sets; invariant violations {broken}")


# 4. gradients


def _gradcheck_setup(seed: int):
    vocab = tiny_vocab()
    model = tiny_model(vocab, seed=seed, d=8, n_heads=2, n_layers=1)
    jitter_biases(model, seed)
    rng = np.random.default_rng(seed)
    batch = tiny_batch(rng, vocab, n=2, with_oracle=True, n_seg=3, n_obj=2, min_det=1)
    obj_plans = [make_mask_plan(b, 1.0, 0.0, rng) for b in batch.bundles]
    seg_plans = [make_mask_plan(b, 0.0, 1.0, rng) for b in batch.bundles]
    return model, batch, obj_plans, seg_plans


def _l1_margin(model, batch, plans, head) -> float:
    """Smallest |prediction - target| entering an L1 loss."""
    bb, cnn = apply_mask(batch.bb, batch.cnn, plans, 2) if plans else (batch.bb, batch.cnn)
    with torch.no_grad():
        _, trace = model(batch, bb, cnn)
    if head == "obj":
        idx = [(b, m * 3 + j) for b, p in enumerate(plans) for m, j in p.masked_object_rows]
        pred, tgt = model.f_bb, batch.bb
    elif head == "seg":
        idx = [(b, m * 3 + j) for b, p in enumerate(plans) for m, j in p.segment_rows]
        pred, tgt = model.f_cnn, batch.cnn
    else:
        idx = [(b, r) for b, bd in enumerate(batch.bundles) for r in bd.object_rows()]
        pred, tgt = model.f_bb, batch.oracle_bb
    bi, ri = map(torch.tensor, zip(*idx))
    with torch.no_grad():
        return (pred(trace.z_v[bi, ri]) - tgt[bi, ri]).abs().min().item()


def gradient_errors(seed: int) -> tuple[dict[str, float], dict[str, float]]:
    model, batch, obj_plans, seg_plans = _gradcheck_setup(seed)
    assert all(p.masked_object_rows for p in obj_plans) and all(p.segment_rows for p in seg_plans)
    params = list(model.parameters())

    def masked(plans):
        return apply_mask(batch.bb, batch.cnn, plans, 2)

    def l_dst():
        logits, _ = model(batch)
        return model.dst_loss(logits, batch)

    def l_obj(kind):
        def f():
            _, trace = model(batch, *masked(obj_plans))
            return denoise_obj_loss(model, trace, obj_plans, batch.bb, 2, kind)[0]
        return f

    def l_seg(kind):
        def f():
            _, trace = model(batch, *masked(seg_plans))
            return denoise_seg_loss(model, trace, seg_plans, batch.cnn, 2, kind)[0]
        return f

    def l_track():
        _, trace = model(batch)
        return tracking_obj_loss(model, trace, batch, "L1")[0]

    margins = {
        "relu": min(relu_margin(model, batch), relu_margin(model, batch, *masked(obj_plans)),
                    relu_margin(model, batch, *masked(seg_plans))),
        "l1": min(_l1_margin(model, batch, obj_plans, "obj"), _l1_margin(model, batch, seg_plans, "seg"),
                  _l1_margin(model, batch, [], "track")),
    }
    errors, rechecked, skipped = {}, 0, 0
    for name, fn in [("L_dst", l_dst), ("L_obj/L1", l_obj("L1")), ("L_obj/L2", l_obj("L2")),
                     ("L_seg/L1", l_seg("L1")), ("L_seg/L2", l_seg("L2")), ("tracking/L1", l_track)]:
        with kink_guard(model) as guard:
            errors[name], r, n = finite_difference_error(guard.wrap(fn), params, h=1e-3, return_skipped=True)
        rechecked += r
        skipped += n
    total = 6 * sum(p.numel() for p in params)
    return errors, margins, rechecked, skipped, total


def test_criterion_04_gradients_match_finite_differences():
    started = time.perf_counter()
    errors, margins, rechecked, skipped, total = gradient_errors(seed=3)
    secs = time.perf_counter() - started
    worst = max(errors.values())
    # coordinates whose +-1e-3 stencil crosses a ReLU kink are rechecked at 1e-6;
    # any still crossing are excluded and must stay rare
    record(4, worst < 1e-4 and secs < 120 and skipped <= 0.01 * total,
           "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f"; {secs:.0f}s (< 120s); "
           f"{rechecked}/{total} coordinates crossing a ReLU kink rechecked at h=1e-6, {skipped} excluded (<= 1%); "
           f"min |ReLU input| {margins['relu']:.1e}, min |L1 residual| {margins['l1']:.1e}")


# 5. masking


def plan_violations(bundle, plan) -> int:
    eligible = {(m, j) for m, j, c in bundle.frame_slots if c >= 0}
    bad = len(plan.masked_object_rows - eligible)
    bad += sum((m - 1, j) in plan.masked_object_rows or (m + 1, j) in plan.masked_object_rows
               for m, j in plan.masked_object_rows)
    bad += sum(m - 1 in plan.masked_segments or m + 1 in plan.masked_segments for m in plan.masked_segments)
    bad += sorted(m for m, _ in plan.segment_rows) != sorted(plan.masked_segments)
    return bad


def test_criterion_05_mask_plans_respect_adjacency():
    rng = np.random.default_rng(0)
    bad = masked_rows = masked_segs = 0
    for i in range(10_000):
        bundle = tiny_bundle(rng, n_seg=int(rng.integers(1, 26)), n_obj=int(rng.integers(1, 11)), d_cnn=2,
                             n_classes=20)
        p_obj, p_seg = (1.0, 1.0) if i % 50 == 0 else (float(rng.uniform()), float(rng.uniform()))
        plan = make_mask_plan(bundle, p_obj, p_seg, rng)
        bad += plan_violations(bundle, plan)
        masked_rows += len(plan.masked_object_rows)
        masked_segs += len(plan.masked_segments)
    record(5, bad == 0, f"{bad} violations in 10000 plans "
                        f"({masked_rows} masked object rows, {masked_segs} masked segments)")


# 6. decoding


def test_criterion_06_beam_one_is_greedy_and_memorization_decodes():
    vocab = tiny_vocab()
    mismatches = 0
    for seed in range(100):
        model = tiny_model(vocab, seed=seed, d=8, n_heads=2)
        rng = np.random.default_rng(seed)
        batch = tiny_batch(rng, vocab, n=int(rng.integers(1, 4)), with_target=False, n_seg=int(rng.integers(1, 4)))
        g = [h.ids for h in greedy_decode(model, batch, 15)]
        b = [h.ids for h in beam_decode(model, batch, 1, 15)]
        mismatches += g != b
    v, model, batch, losses = memorize()
    gold = batch.state_tgt[0][batch.state_tgt[0] != PAD_ID].tolist()
    exact = (greedy_decode(model, batch)[0].ids == gold
             and decode_state(model, batch, DecodeConfig("beam", 5))[0].ids == gold)
    record(6, mismatches == 0 and exact,
           f"beam=1 vs greedy mismatches {mismatches}/100; memorized sequence decoded exactly: {exact}")


# 7-11. training runs


@pytest.mark.slow
def test_criterion_07_overfit_twenty_dialogues():
    r = runs.overfit()
    joint = r["predicted"]["joint_acc"]
    record(7, joint >= 0.95 and r["total_seconds"] < 600,
           f"training joint_acc {joint:.3f} (>= 0.95, predicted prior; oracle prior "
           f"{r['oracle']['joint_acc']:.3f}), {r['total_seconds']:.0f}s (< 600s)")


@pytest.mark.slow
def test_criterion_08_desk_scale_learning():
    r = runs.desk_main()
    vdtn = r["predicted_greedy"]
    sp, oa = r["state-prior"]["joint_acc"], r["object-all"]["joint_acc"]
    ok = vdtn["joint_acc"] > sp and vdtn["joint_acc"] > oa and vdtn["identity_f1"] >= 0.5
    record(8, ok, f"test joint_acc {vdtn['joint_acc']:.3f} vs state-prior {sp:.3f}, object-all {oa:.3f}; "
                  f"identity F1 {vdtn['identity_f1']:.3f} (>= 0.5); training {r['train_seconds'] / 60:.0f} min "
                  f"(target < 120, not gated)")


@pytest.mark.slow
def test_criterion_09_directional_ablations():
    r, bb = runs.desk_main(), runs.desk_bb()
    j = lambda d: d["joint_acc"]
    base = j(r["predicted_greedy"])
    checks = {
        "a oracle>=predicted": (j(r["oracle_greedy"]), base, j(r["oracle_greedy"]) >= base),
        "b perfect>=noisy": (j(r["perfect_greedy"]), base, j(r["perfect_greedy"]) >= base),
        "c bb+cnn>=bb": (base, j(bb["predicted_greedy"]), base >= j(bb["predicted_greedy"])),
        "d beam>=greedy-0.02": (j(r["predicted_beam"]), base, j(r["predicted_beam"]) >= base - 0.02),
    }
    record(9, all(c[2] for c in checks.values()),
           "; ".join(f"{k}: {x:.3f} vs {y:.3f} {'ok' if ok else 'NO'}" for k, (x, y, ok) in checks.items()))


@pytest.mark.slow
def test_criterion_10_segment_reconstruction_learns():
    r, base = runs.desk_seg(), runs.desk_main()
    curve = r["heldout_seg_curve"]
    drop = 1 - curve[-1] / curve[0]
    seg_joint, none_joint = r["predicted_greedy"]["joint_acc"], base["predicted_greedy"]["joint_acc"]
    record(10, drop >= 0.5,
           f"held-out masked-segment L1 {curve[0]:.4f} -> {curve[-1]:.4f} ({drop:.0%} drop, >= 50%); "
           f"reported only: joint_acc seg/L1 {seg_joint:.3f} vs no self-supervision {none_joint:.3f}")


@pytest.mark.slow
def test_criterion_11_response_task():
    r = runs.desk_response()
    none, oracle = r["none"], r["oracle"]
    chance = none["chance"]
    untrained = [none["untrained"]["expected_accuracy"], oracle["untrained"]["expected_accuracy"]]
    near = all(abs(u - chance) <= 0.03 for u in untrained)
    record(11, oracle["accuracy"] >= none["accuracy"] and near,
           f"accuracy oracle states {oracle['accuracy']:.3f} vs no state {none['accuracy']:.3f}; "
           f"untrained expected accuracy {untrained[0]:.3f}/{untrained[1]:.3f} vs chance {chance:.3f} (+-0.03)")
