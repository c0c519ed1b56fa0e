"""Full pipeline assembly: backbone, both feature branches, decoder."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import aggregation, autodiff as ad, backbone as bb, decoder as dec, scenegen


def seed_for(global_seed, name):
    """Deterministic per-module seed derived from the one global seed."""
    digest = hashlib.sha256(f"{global_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class ModelConfig:
    backbone: bb.BackboneConfig = field(default_factory=bb.BackboneConfig)
    agg: aggregation.AggregationConfig = field(default_factory=aggregation.AggregationConfig)
    dec: dec.DecoderConfig = field(default_factory=dec.DecoderConfig)
    coarse_size: float = 0.25
    use_local: bool = True
    use_global: bool = True
    seed: int = 0


@dataclass
class PreparedScene:
    scene: scenegen.Scene
    partition: scenegen.SuperpointPartition
    gt: scenegen.GroundTruth


@dataclass
class ForwardResult:
    preds: list  # LayerPrediction per decoder stage (layers + 1)
    foreground: ad.Tensor  # N x 1
    keypoints: np.ndarray  # selected keypoint point-indices
    structure: bytes  # hash of every discrete (non-differentiable) choice
    attention: list | None = None


class SegModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.store = ad.ParamStore()
        c = cfg.backbone.channels
        rng = lambda name: np.random.default_rng(seed_for(cfg.seed, name))
        self.backbone = bb.Backbone(self.store, cfg.backbone, rng("backbone"))
        self.fg_head = aggregation.ForegroundHead(self.store, c, rng("foreground"))
        self.local = aggregation.LocalAggregator(self.store, c, cfg.agg, rng("local"))
        self.proj = aggregation.GlobalProjector(self.store, c, cfg.dec.d, rng("global"))
        self.decoder = dec.Decoder(self.store, cfg.dec, cfg.agg.width, rng("decoder"))

    def prepare(self, scene: scenegen.Scene) -> PreparedScene:
        partition = scenegen.build_superpoints(scene, self.cfg.coarse_size)
        return PreparedScene(
            scene=scene, partition=partition, gt=scenegen.ground_truth(scene, partition)
        )

    def forward(self, prep: PreparedScene, capture_attention=False) -> ForwardResult:
        cfg = self.cfg
        scene = prep.scene
        f_p = self.backbone(scene)
        fg = self.fg_head(f_p)

        if cfg.use_local:
            cands = aggregation.iterative_candidate_sample(
                scene.positions, fg.value, cfg.agg.beta, cfg.agg.k_cand, cfg.agg.rq
            )
            keypoints = cands.indices
        else:
            keypoints = np.empty(0, dtype=np.int64)
        f_l = self.local(f_p, scene.positions, keypoints)

        pooled = aggregation.superpoint_avg_pool(f_p, prep.partition)
        f_g, s_mask = self.proj(pooled)

        capture = [] if capture_attention else None
        preds = self.decoder.run(
            f_g, f_l, s_mask,
            use_local=cfg.use_local, use_global=cfg.use_global, capture=capture,
        )

        h = hashlib.sha256()
        h.update(keypoints.tobytes())
        for mask in self.decoder.attention_masks:
            h.update(np.isfinite(mask).tobytes())
        return ForwardResult(
            preds=preds,
            foreground=fg,
            keypoints=keypoints,
            structure=h.digest(),
            attention=capture,
        )
