import numpy as np
import pytest
import torch

from mmdst.features import (
    FRAME_ROW, PAD_ROW, FeatureError, build_visual_inputs, embed_inputs, expected_rows, load_bundle,
    oracle_boxes, save_bundle, sinusoidal_encoding,
)
from mmdst.model import VDTN
from mmdst.neural import ModelConfig
from mmdst.scene import PERFECT_PERCEPTION, PerceptionConfig, perceive, segment_features
from mmdst.state import PAD, Vocabulary


@pytest.fixture
def bundle(scene):
    seg = segment_features(scene, 12, 64, seed=0)
    return build_visual_inputs(perceive(scene, PERFECT_PERCEPTION, 10, 12), seg, 10, 12)


def test_row_count(bundle):
    assert bundle.l_obj == 275 == expected_rows(300, 10, 12)
    assert bundle.x_bb.shape == (275, 4) and bundle.x_cnn.shape == (275, 64)


def test_block_layout(bundle):
    for m in range(bundle.num_segments):
        block = slice(11 * m, 11 * (m + 1))
        assert bundle.x_obj[11 * m] == f"FRAME{m + 1}"
        assert bundle.frame_slots[11 * m] == (m, 0, FRAME_ROW)
        assert np.all(bundle.x_bb[11 * m] == 0)
        assert np.all(bundle.x_cnn[block] == bundle.x_cnn[11 * m])
        classes = [c for (_, _, c) in bundle.frame_slots[block] if c >= 0]
        assert classes == sorted(classes)
    for i, (_, _, c) in enumerate(bundle.frame_slots):
        if c == PAD_ROW:
            assert bundle.x_obj[i] == PAD and np.all(bundle.x_bb[i] == 0)


def test_empty_frame_is_frame_plus_pads(scene):
    seg = segment_features(scene, 12, 64, seed=0)
    blind = perceive(scene, PerceptionConfig(detection_recall=0.0), 10, 12)
    b = build_visual_inputs(blind, seg, 10, 12)
    assert b.x_obj[:11] == ["FRAME1"] + [PAD] * 10
    assert np.all(b.x_bb == 0)


def test_grid_mismatch(scene):
    seg = segment_features(scene, 10, 64, seed=0)
    with pytest.raises(FeatureError):
        build_visual_inputs(perceive(scene, PERFECT_PERCEPTION, 10, 12), seg, 10, 12)


def test_oracle_boxes_match_under_perfect_perception(scene, bundle):
    assert np.allclose(oracle_boxes(bundle, scene), bundle.x_bb)


def test_sinusoid_closed_form():
    pe = sinusoidal_encoding(50, 16)
    assert np.allclose(pe[0, 0::2], 0) and np.allclose(pe[0, 1::2], 1)
    p, i = 7, 3
    assert pe[p, 2 * i] == pytest.approx(np.sin(p / 10000 ** (2 * i / 16)))
    assert pe[p, 2 * i + 1] == pytest.approx(np.cos(p / 10000 ** (2 * i / 16)))


def _model(vocab, d=128):
    torch.manual_seed(0)
    return VDTN(ModelConfig(len(vocab), d=d, n_heads=8, d_cnn=64)).double()


def test_embed_shapes_and_additivity(universe, bundle):
    vocab = Vocabulary.build(193, 300, ["what", "?"])
    b = bundle.with_context(["USR", "what", "?"])
    model = _model(vocab)
    z_v, z_ctx = embed_inputs(b, model, vocab)
    assert z_v.shape == (275, 128) and z_ctx.shape == (3, 128)
    # zero features with zero biases leave only the token embedding
    zero = b.with_context(b.x_ctx)
    zero.x_bb = np.zeros_like(b.x_bb)
    zero.x_cnn = np.zeros_like(b.x_cnn)
    z0, _ = embed_inputs(zero, model, vocab)
    ids = torch.tensor(vocab.encode(b.x_obj))
    assert torch.allclose(z0, model.token_embedding(ids))
    # the three summands add up
    with torch.no_grad():
        bb = torch.relu(model.bb_proj(torch.tensor(b.x_bb)))
        cnn = torch.relu(model.cnn_proj(torch.tensor(b.x_cnn)))
    assert torch.allclose(z_v, z0 + bb + cnn)


def test_permuting_detections_stays_in_block(universe, bundle):
    vocab = Vocabulary.build(193, 300)
    model = _model(vocab)
    z, _ = embed_inputs(bundle, model, vocab)
    perm = list(range(bundle.l_obj))
    perm[1], perm[2] = perm[2], perm[1]  # swap two rows inside frame 1
    swapped = bundle.with_context([])
    swapped.x_obj = [bundle.x_obj[i] for i in perm]
    swapped.x_bb = bundle.x_bb[perm]
    z2, _ = embed_inputs(swapped, model, vocab)
    assert torch.allclose(z2, z[perm])


def test_bundle_round_trip(tmp_path, bundle):
    save_bundle(tmp_path / "b", bundle, seed=3)
    back = load_bundle(tmp_path / "b")
    assert back.x_obj == bundle.x_obj and back.frame_slots == bundle.frame_slots
    assert np.array_equal(back.x_bb, bundle.x_bb) and np.array_equal(back.x_cnn, bundle.x_cnn)
