"""Parallel-fusion masked-attention decoder and prediction head.

K learnable queries are refined layer by layer: a masked cross-attention
branch over superpoint features runs in parallel with an unmasked branch over
local keypoint features; the two are fused through a fully connected layer,
followed by self-attention and an FFN, each with residual + post-norm.

Each layer's predicted superpoint mask, thresholded at tau, becomes the
attention mask of the next layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError


@dataclass
class DecoderConfig:
    k: int = 20
    d: int = 64
    layers: int = 6
    heads: int = 8
    tau: float = 0.5
    n_class: int = 3

    def __post_init__(self):
        if self.d % self.heads:
            raise ContractError("d must be divisible by heads")
        if not 0 < self.tau < 1:
            raise ContractError("tau must be in (0, 1)")


@dataclass
class LayerPrediction:
    class_probs: ad.Tensor  # K x (n_class + 1), rows sum to 1
    iou_score: ad.Tensor  # K x 1 in [0, 1]
    sp_mask: ad.Tensor  # K x M in [0, 1]


def build_attention_mask(prev_mask, tau):
    """{0, -inf} additive mask: 0 where prev_mask >= tau (boundary inclusive).

    A row with no entry above threshold would starve its query, so such rows
    fall back to fully unmasked (all zeros) instead of all -inf.
    """
    prev_mask = np.asarray(prev_mask, dtype=np.float64)
    a = np.where(prev_mask >= tau, 0.0, -np.inf)
    dead = ~np.isfinite(a).any(axis=1)
    a[dead] = 0.0
    return a


class MultiHeadAttention:
    def __init__(self, store, prefix, d, heads, rng):
        self.d, self.heads = d, heads
        self.q = ad.Linear(store, prefix + ".q", d, d, rng)
        self.k = ad.Linear(store, prefix + ".k", d, d, rng)
        self.v = ad.Linear(store, prefix + ".v", d, d, rng)
        self.out = ad.Linear(store, prefix + ".out", d, d, rng)

    def __call__(self, z, f, mask=None, capture=None):
        """Attention of z's rows over f's rows; `mask` is a constant additive
        {0,-inf} matrix. With zero context rows the output is the projection
        bias alone. `capture` collects per-head weight matrices."""
        if f.shape[0] == 0:
            return self.out(ad.constant(np.zeros((z.shape[0], self.d))))
        q, k, v = self.q(z), self.k(f), self.v(f)
        dh = self.d // self.heads
        outs = []
        for h in range(self.heads):
            a, b = h * dh, (h + 1) * dh
            qh, kh, vh = ad.slice_cols(q, a, b), ad.slice_cols(k, a, b), ad.slice_cols(v, a, b)
            logits = ad.affine(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
            w = ad.softmax_rows(logits, extra=mask)
            if capture is not None:
                capture.append(w.value.copy())
            outs.append(ad.matmul(w, vh))
        return self.out(ad.concat_cols(outs))


class DecoderLayer:
    def __init__(self, store, prefix, cfg: DecoderConfig, local_width, rng):
        d = cfg.d
        self.cross_g = MultiHeadAttention(store, prefix + ".cross_g", d, cfg.heads, rng)
        self.cross_l = MultiHeadAttention(store, prefix + ".cross_l", d, cfg.heads, rng)
        self.local_proj = ad.Linear(store, prefix + ".local_proj", local_width, d, rng)
        self.fuse = ad.Linear(store, prefix + ".fuse", 2 * d, d, rng)
        self.self_attn = MultiHeadAttention(store, prefix + ".self", d, cfg.heads, rng)
        self.ffn = ad.MLP(store, prefix + ".ffn", [d, 4 * d, d], ["relu", "none"], rng)
        # norm affines start at the identity so early layers pass signal through
        self.norms = [
            (
                store.create(f"{prefix}.norm{i}.gain", 1, d, rng, fill=1.0),
                store.create(f"{prefix}.norm{i}.bias", 1, d, rng, fill=0.0),
            )
            for i in range(3)
        ]

    def __call__(self, z, f_g, f_l, mask, use_local, use_global, capture=None):
        k = z.shape[0]
        d = self.fuse.w.shape[1]
        if use_global and f_g is not None:
            branch_g = self.cross_g(z, f_g, mask=mask, capture=capture)
        else:
            branch_g = ad.constant(np.zeros((k, d)))
        if use_local:
            branch_l = self.cross_l(z, self.local_proj(f_l) if f_l.shape[0] else f_l)
        else:
            branch_l = ad.constant(np.zeros((k, d)))
        x = ad.add(z, self.fuse(ad.concat_cols([branch_g, branch_l])))
        x = ad.layer_norm(x, *self.norms[0])
        x = ad.layer_norm(ad.add(x, self.self_attn(x, x)), *self.norms[1])
        x = ad.layer_norm(ad.add(x, self.ffn(x)), *self.norms[2])
        return x


class PredictionHead:
    """Class distribution (with an extra "no instance" slot), IoU score, and
    superpoint mask sigmoid(Z S_mask^T) per query."""

    def __init__(self, store, cfg: DecoderConfig, rng):
        d = cfg.d
        self.cls = ad.MLP(store, "head.cls", [d, d, cfg.n_class + 1], ["relu", "none"], rng)
        self.score = ad.MLP(store, "head.score", [d, d, 1], ["relu", "none"], rng)

    def __call__(self, z, s_mask):
        return LayerPrediction(
            class_probs=ad.softmax_rows(self.cls(z)),
            iou_score=ad.sigmoid(self.score(z)),
            sp_mask=ad.sigmoid(ad.matmul(z, ad.transpose(s_mask))),
        )


class Decoder:
    def __init__(self, store, cfg: DecoderConfig, local_width, rng):
        self.cfg = cfg
        self.query = store.create("decoder.query", cfg.k, cfg.d, rng, fan_in=cfg.d)
        self.layers = [
            DecoderLayer(store, f"decoder.layer{i}", cfg, local_width, rng)
            for i in range(cfg.layers)
        ]
        self.head = PredictionHead(store, cfg, rng)

    def run(self, f_g, f_l, s_mask, use_local=True, use_global=True, capture=None):
        """All per-layer predictions (layers + 1 of them, first from the raw
        queries). `capture`, if a list, receives per-layer lists of per-head
        masked cross-attention weights over superpoints."""
        z = self.query
        preds = [self.head(z, s_mask)]
        masks = [build_attention_mask(preds[0].sp_mask.value, self.cfg.tau)]
        for layer in self.layers:
            layer_capture = [] if capture is not None else None
            z = layer(z, f_g, f_l, masks[-1], use_local, use_global, capture=layer_capture)
            if capture is not None:
                capture.append(layer_capture)
            preds.append(self.head(z, s_mask))
            masks.append(build_attention_mask(preds[-1].sp_mask.value, self.cfg.tau))
        self.attention_masks = masks
        return preds
