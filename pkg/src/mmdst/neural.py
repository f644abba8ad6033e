"""Transformer building blocks, label-smoothed NLL, Adam with warmup/decay, checkpoints.

Tensors and autograd come from torch; the layers, loss and optimizer are
written out here so their behaviour is pinned by our own tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

CHECKPOINT_VERSION = "mmdst-ckpt-v1"
LN_EPS = 1e-6


class NumericError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 128
    n_layers: int = 1
    n_heads: int = 8
    d_cnn: int = 64
    ffn_mult: int = 4
    max_decode_len: int = 60
    label_smoothing_epsilon: float = 0.1
    dropout_rate: float = 0.1
    max_positions: int = 1024
    # which visual summands feed Z_V: "bb" (object tokens + boxes), "bb+cnn", "cnn"
    features: str = "bb+cnn"
    include_time: bool = True
    # state logits reuse the token embedding matrix (plus a free bias)
    tie_output: bool = True

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.label_smoothing_epsilon < 1.0:
            raise ValueError("label_smoothing_epsilon must be in [0, 1)")
        if self.features not in ("bb", "bb+cnn", "cnn"):
            raise ValueError(f"unknown feature set {self.features!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


def glorot_(w: Tensor) -> Tensor:
    fan_out, fan_in = w.shape[0], w.shape[1] if w.dim() > 1 else 1
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        return w.uniform_(-bound, bound)


class Dense(nn.Module):
    """y = x W^T + b with Glorot-uniform W and zero b."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(glorot_(torch.empty(d_out, d_in)))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = LN_EPS):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def normalize(self, x: Tensor) -> Tensor:
        mu = x.mean(-1, keepdim=True)
        var = ((x - mu) ** 2).mean(-1, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps)

    def forward(self, x: Tensor) -> Tensor:
        return self.normalize(x) * self.gain + self.bias


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.d, self.h, self.dh = d, n_heads, d // n_heads
        self.q = Dense(d, d)
        self.k = Dense(d, d)
        self.v = Dense(d, d)
        self.o = Dense(d, d)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.h, self.dh).transpose(1, 2)

    def project_kv(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return self._split(self.k(x)), self._split(self.v(x))

    def attend(self, q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None,
               return_weights: bool = False) -> tuple[Tensor, Tensor | None]:
        """q: (B,H,Lq,dh), k/v: (B,H,Lk,dh), mask: bool (B,Lq,Lk), True = may attend.

        Dropout is applied on the residual branches, not on attention weights.
        """
        if return_weights or q.dtype == torch.float64:
            scores = q @ k.transpose(-1, -2) / math.sqrt(self.dh)
            if mask is not None:
                scores = scores.masked_fill(~mask[:, None], float("-inf"))
            w = torch.softmax(scores, dim=-1)
            return w @ v, (w if return_weights else None)
        out = F.scaled_dot_product_attention(
            q, k, v, attn_mask=None if mask is None else mask[:, None])
        return out, None

    def merge(self, out: Tensor) -> Tensor:
        b, _, n, _ = out.shape
        return self.o(out.transpose(1, 2).reshape(b, n, self.d))

    def forward(self, x: Tensor, mask: Tensor | None = None, return_weights: bool = False):
        q = self._split(self.q(x))
        k, v = self.project_kv(x)
        out, w = self.attend(q, k, v, mask, return_weights)
        return self.merge(out), w, (k, v)


class TransformerBlock(nn.Module):
    """Post-norm block: x = LN(x + MHA(x)); x = LN(x + FFN(x))."""

    def __init__(self, d: int, n_heads: int, ffn_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(d, n_heads)
        self.ln1 = LayerNorm(d)
        self.ff1 = Dense(d, ffn_mult * d)
        self.ff2 = Dense(ffn_mult * d, d)
        self.ln2 = LayerNorm(d)
        self.dropout = dropout

    def _drop(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.dropout, self.training)

    def _tail(self, x: Tensor, a: Tensor) -> Tensor:
        x = self.ln1(x + self._drop(a))
        return self.ln2(x + self._drop(self.ff2(F.relu(self.ff1(x)))))

    def forward(self, x: Tensor, mask: Tensor | None = None):
        a, _, kv = self.attn(x, mask)
        return self._tail(x, a), kv

    def step(self, x: Tensor, cache: dict, key_mask: Tensor) -> Tensor:
        """Incremental decode of new rows ``x`` (B,n,d) attending to cached keys
        plus themselves causally. ``key_mask`` (B, Lcache) marks valid cached keys."""
        att = self.attn
        q = att._split(att.q(x))
        k, v = att.project_kv(x)
        cache["k"] = torch.cat([cache["k"], k], dim=2)
        cache["v"] = torch.cat([cache["v"], v], dim=2)
        n = x.shape[1]
        lk = cache["k"].shape[2]
        causal = torch.ones(n, n, dtype=torch.bool).tril()
        mask = torch.cat([key_mask[:, None, :].expand(-1, n, -1),
                          causal[None].expand(x.shape[0], -1, -1)], dim=2)
        assert mask.shape[-1] == lk
        out, _ = att.attend(q, cache["k"], cache["v"], mask)
        return self._tail(x, att.merge(out))


class TransformerStack(nn.Module):
    def __init__(self, d: int, n_layers: int, n_heads: int, ffn_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(d, n_heads, ffn_mult, dropout) for _ in range(n_layers))

    def forward(self, z: Tensor, mask: Tensor | None = None, keep_kv: bool = False):
        """Returns (output, per-layer (k, v) when ``keep_kv``)."""
        kvs = []
        for i, block in enumerate(self.blocks):
            z, kv = block(z, mask)
            if not torch.isfinite(z).all():
                raise NumericError(f"non-finite activation after layer {i}")
            if keep_kv:
                kvs.append(kv)
        return z, kvs


def label_smoothed_nll(logits: Tensor, targets: Tensor, epsilon: float,
                       ignore_index: int | None = None) -> Tensor:
    """Mean cross-entropy against (1-eps) on the target and eps/(V-1) elsewhere.

    Positions whose target equals ``ignore_index`` do not count.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must be in [0, 1)")
    v = logits.shape[-1]
    logits = logits.reshape(-1, v)
    targets = targets.reshape(-1)
    if targets.numel() and (targets.min() < 0 or targets.max() >= v):
        raise ValueError("target id outside vocabulary")
    keep = torch.ones_like(targets, dtype=torch.bool) if ignore_index is None else targets != ignore_index
    logp = torch.log_softmax(logits[keep], dim=-1)
    t = targets[keep]
    nll = -logp.gather(1, t[:, None]).squeeze(1)
    if epsilon > 0:
        # summed NLL over the V-1 non-target classes
        other = -(logp.sum(-1) + nll)
        loss = (1 - epsilon) * nll + epsilon * other / (v - 1)
    else:
        loss = nll
    return loss.mean()


@dataclass
class Schedule:
    """Linear warmup from 0 to ``peak_lr`` over ``warmup_steps``, then linear decay
    to 0 at ``total_steps``."""

    peak_lr: float = 1e-3
    warmup_steps: int = 1
    total_steps: int = 1

    def lr(self, step: int) -> float:
        if step <= 0:
            return 0.0
        if step <= self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        span = max(self.total_steps - self.warmup_steps, 1)
        return self.peak_lr * max(0.0, (self.total_steps - step) / span)


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


@dataclass(frozen=True)
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float | None = None


def adam_step(named_params: dict[str, Tensor], state: OptimizerState, lr: float,
              hyper: AdamHyper = AdamHyper()) -> None:
    """One bias-corrected Adam update in place; params without a gradient are skipped."""
    grads = {n: p.grad for n, p in named_params.items() if p.grad is not None}
    for n, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {n}")
    scale = 1.0
    if hyper.clip_norm is not None and grads:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > hyper.clip_norm:
            scale = hyper.clip_norm / total
    state.step += 1
    t = state.step
    c1 = 1 - hyper.beta1 ** t
    c2 = 1 - hyper.beta2 ** t
    with torch.no_grad():
        for n, g in grads.items():
            p = named_params[n]
            g = g * scale
            m = state.m.setdefault(n, torch.zeros_like(p))
            v = state.v.setdefault(n, torch.zeros_like(p))
            m.mul_(hyper.beta1).add_(g, alpha=1 - hyper.beta1)
            v.mul_(hyper.beta2).addcmul_(g, g, value=1 - hyper.beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + hyper.eps))


def save_checkpoint(path: str | Path, model: nn.Module, config: ModelConfig, vocab_hash: str,
                    step: int, metrics: dict | None = None, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(path.with_suffix(".npz"), **arrays)
    side = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(config),
        "vocab_hash": vocab_hash,
        "step": step,
        "metrics": metrics or {},
        **(extra or {}),
    }
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    if side.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {side.get('version')!r}")
    with np.load(path.with_suffix(".npz")) as z:
        arrays = {k: z[k] for k in z.files}
    return side, arrays
