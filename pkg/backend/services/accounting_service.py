"""
Closed-form parameter and FLOP counts.

FLOPs are reported as 2 × multiply-accumulates for one forward pass of one
image. Costs per head: Q·Kᵀ and A·V are L²d MACs each; a covariance is L²d;
a thin QR is Ld²; a projector G·Gᵀ is L²d; an entrywise map is L².
"""

import itertools
import logging

from models.schemas import MANIFOLD_ORDER, AblationRow, FlopBreakdown, ModelConfig, ParamBreakdown

logger = logging.getLogger(__name__)


def _streams(cfg: ModelConfig) -> list[tuple[str, ...]]:
    """Manifold set seen by each encoder stream."""
    if cfg.towers:
        return [(m,) for m in cfg.towers]
    return [cfg.attention.manifolds]


def _block_params(cfg: ModelConfig) -> int:
    dim, hidden = cfg.model_dim, cfg.hidden_dim
    norms = 4 * dim
    attention = 4 * dim * dim + dim
    mlp = dim * hidden + hidden + hidden * dim + dim
    return norms + attention + mlp


def _fusion_params(cfg: ModelConfig) -> int:
    if not cfg.attention.has_fusion_mix:
        return 0
    h, k = cfg.heads, len(cfg.attention.manifolds)
    return cfg.depth * (k * h * h + h)


def count_params(cfg: ModelConfig) -> ParamBreakdown:
    streams = len(_streams(cfg))
    dim, feat = cfg.model_dim, cfg.feature_dim
    parts = {
        "embedder": cfg.patch_dim * dim + dim,
        "positional": cfg.seq_len * dim,
        "blocks": streams * cfg.depth * _block_params(cfg),
        "fusion": _fusion_params(cfg),
        "final_norm": streams * 2 * dim if cfg.final_norm else 0,
        "pooling": feat if cfg.pool == "sequence_pool" else 0,
        "classifier": feat * cfg.num_classes + cfg.num_classes,
    }
    return ParamBreakdown(**parts, total=sum(parts.values()))


def _distance_macs(manifold: str, heads: int, length: int, head_dim: int) -> int:
    per_head = {
        "euclidean": length * length * head_dim,
        "spd": 2 * length * length * head_dim + length * length,
        "grassmann": 2 * length * head_dim * head_dim + 2 * length * length * head_dim + length * length,
    }[manifold]
    return heads * per_head


def count_flops(cfg: ModelConfig) -> FlopBreakdown:
    L, D, h, d = cfg.seq_len, cfg.model_dim, cfg.heads, cfg.attention.head_dim
    streams = _streams(cfg)
    depth = cfg.depth
    mix_macs = 0
    if cfg.attention.has_fusion_mix:
        mix_macs = h * len(cfg.attention.manifolds) * h * L * L

    macs = {
        "embedder": L * cfg.patch_dim * D,
        "projections": depth * len(streams) * 4 * L * D * D,
        "distance_maps": depth * sum(_distance_macs(m, h, L, d) for s in streams for m in s),
        "fusion": depth * mix_macs,
        "attention_apply": depth * len(streams) * h * L * L * d,
        "mlp": depth * len(streams) * 2 * L * D * cfg.hidden_dim,
        "head": (2 * L * cfg.feature_dim if cfg.pool == "sequence_pool" else 0)
                + cfg.feature_dim * cfg.num_classes,
    }
    flops = {name: 2 * value for name, value in macs.items()}
    return FlopBreakdown(**flops, total=sum(flops.values()))


def with_attention(cfg: ModelConfig, manifolds: tuple[str, ...], fusion: str) -> ModelConfig:
    attention = {**cfg.attention.model_dump(), "manifolds": manifolds, "fusion": fusion}
    return ModelConfig.model_validate({**cfg.model_dump(), "attention": attention})


def ablation_table(cfg: ModelConfig) -> list[AblationRow]:
    """Every manifold subset under early fusion, every subset of two or more under late fusion."""
    rows = []
    for fusion, min_size in (("early", 1), ("late", 2)):
        for size in range(min_size, len(MANIFOLD_ORDER) + 1):
            for subset in itertools.combinations(MANIFOLD_ORDER, size):
                variant = with_attention(cfg, subset, fusion)
                rows.append(AblationRow(fusion=fusion, manifolds=subset,
                                        params=count_params(variant).total,
                                        flops=count_flops(variant).total))
    return rows
