"""Model inputs: object-token rows, box rows, stacked segment rows and X_ctx."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import PerceivedVideo
from .state import PAD, frame_token, obj_token


class FeatureError(ValueError):
    pass


FRAME_ROW = -1
PAD_ROW = -2


@dataclass
class FeatureBundle:
    x_obj: list[str]
    x_bb: np.ndarray  # (L_obj, 4)
    x_cnn: np.ndarray  # (L_obj, d_cnn)
    n_obj: int
    frames: list[int]
    # per row: (segment index m, row j within the frame block, class index | FRAME_ROW | PAD_ROW)
    frame_slots: list[tuple[int, int, int]]
    # true-object class behind each detection row, None elsewhere
    sources: list[int | None] = field(default_factory=list)
    x_ctx: list[str] = field(default_factory=list)

    @property
    def l_obj(self) -> int:
        return len(self.x_obj)

    @property
    def num_segments(self) -> int:
        return len(self.frames)

    def object_rows(self) -> list[int]:
        return [i for i, (_, _, c) in enumerate(self.frame_slots) if c >= 0]

    def with_context(self, x_ctx: list[str]) -> "FeatureBundle":
        return FeatureBundle(self.x_obj, self.x_bb, self.x_cnn, self.n_obj, self.frames,
                             self.frame_slots, self.sources, list(x_ctx))


def expected_rows(num_frames: int, n_obj: int, n_stride: int) -> int:
    return (n_obj + 1) * math.ceil(num_frames / n_stride)


def build_visual_inputs(
    perceived: PerceivedVideo, seg_feats: np.ndarray, n_obj: int, n_stride: int
) -> FeatureBundle:
    """FRAME<m> row, then up to ``n_obj`` detection rows, then PAD rows, per sampled frame."""
    if perceived.n_stride != n_stride or len(perceived.frames) != len(seg_feats):
        raise FeatureError(
            f"grid mismatch: {len(perceived.frames)} frames at stride {perceived.n_stride} "
            f"vs {len(seg_feats)} segments at stride {n_stride}"
        )
    d_cnn = seg_feats.shape[1]
    rows = (n_obj + 1) * len(perceived.frames)
    x_obj: list[str] = []
    x_bb = np.zeros((rows, 4))
    x_cnn = np.zeros((rows, d_cnn))
    slots: list[tuple[int, int, int]] = []
    sources: list[int | None] = []
    r = 0
    for m, dets in enumerate(perceived.detections):
        block = slice(r, r + n_obj + 1)
        x_cnn[block] = seg_feats[m]
        x_obj.append(frame_token(m + 1))
        slots.append((m, 0, FRAME_ROW))
        sources.append(None)
        r += 1
        for j in range(n_obj):
            if j < len(dets):
                d = dets[j]
                x_obj.append(obj_token(d.class_index))
                x_bb[r] = d.box
                slots.append((m, j + 1, d.class_index))
                sources.append(d.source)
            else:
                x_obj.append(PAD)
                slots.append((m, j + 1, PAD_ROW))
                sources.append(None)
            r += 1
    return FeatureBundle(x_obj, x_bb, x_cnn, n_obj, list(perceived.frames), slots, sources)


def oracle_boxes(bundle: FeatureBundle, scene) -> np.ndarray:
    """Ground-truth box of the true object behind every detection row (zeros elsewhere)."""
    out = np.zeros_like(bundle.x_bb)
    for i, src in enumerate(bundle.sources):
        if src is not None:
            m = bundle.frame_slots[i][0]
            out[i] = scene.object_by_class(src).box_at(bundle.frames[m])
    return out


def sinusoidal_encoding(length: int, d: int) -> np.ndarray:
    """PE[p, 2i] = sin(p / 10000^(2i/d)), PE[p, 2i+1] = cos(same)."""
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def embed_inputs(bundle: FeatureBundle, model, vocab):
    """(z_v, z_ctx) for a single bundle using ``model``'s embedding layers."""
    import torch

    dtype = next(model.parameters()).dtype
    obj_ids = torch.tensor([vocab.encode(bundle.x_obj)], dtype=torch.long)
    bb = torch.tensor(bundle.x_bb[None], dtype=dtype)
    cnn = torch.tensor(bundle.x_cnn[None], dtype=dtype)
    ctx_ids = torch.tensor([vocab.encode(bundle.x_ctx)], dtype=torch.long)
    z_v = model.embed_video(obj_ids, bb, cnn)
    z_ctx = model.embed_tokens(ctx_ids, torch.arange(len(bundle.x_ctx))[None])
    return z_v[0], z_ctx[0]


def save_bundle(path: str | Path, bundle: FeatureBundle, seed: int) -> None:
    """Binary array container plus a JSON manifest."""
    path = Path(path)
    np.savez(path.with_suffix(".npz"), x_bb=bundle.x_bb, x_cnn=bundle.x_cnn)
    manifest = {
        "shape": {"x_bb": list(bundle.x_bb.shape), "x_cnn": list(bundle.x_cnn.shape)},
        "dtype": str(bundle.x_bb.dtype),
        "seed": seed,
        "x_obj": bundle.x_obj,
        "n_obj": bundle.n_obj,
        "frames": bundle.frames,
        "frame_slots": bundle.frame_slots,
        "sources": bundle.sources,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest))


def load_bundle(path: str | Path) -> FeatureBundle:
    path = Path(path)
    arrays = np.load(path.with_suffix(".npz"))
    doc = json.loads(path.with_suffix(".json").read_text())
    return FeatureBundle(doc["x_obj"], arrays["x_bb"], arrays["x_cnn"], doc["n_obj"], doc["frames"],
                         [tuple(s) for s in doc["frame_slots"]], doc["sources"])
