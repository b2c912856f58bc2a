"""
Vision transformer assembly: patch embedding, learned positions, pre-norm
blocks with pluggable attention, final norm, pooling and a linear head.

Early fusion (and the Euclidean baseline) is one stream of blocks. Late
fusion is one full stream per manifold ("towers"), sharing the patch
embedder and positional table; the towers' token sequences are concatenated
on the feature axis before pooling.
"""

import logging
from dataclasses import dataclass

import numpy as np

from models.schemas import AttentionConfig, ModelConfig, NormStats
from services.attention_service import (
    AttentionTrace,
    AttentionWeights,
    fuse_late,
    init_attention_weights,
    mma_attention_forward,
)
from services.errors import ConfigError
from services.tensor_service import (
    ParameterStore,
    Tensor,
    add,
    constant,
    expand_leading,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean_lastaxis,
    permute,
    reshape,
    softmax_rows,
    transpose,
    truncated_normal,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockWeights:
    norm1_scale: Tensor
    norm1_shift: Tensor
    attn: AttentionWeights
    norm2_scale: Tensor
    norm2_shift: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str, cfg: AttentionConfig) -> "BlockWeights":
        return cls(
            norm1_scale=store[f"{prefix}norm1.scale"],
            norm1_shift=store[f"{prefix}norm1.shift"],
            attn=AttentionWeights.from_store(store, f"{prefix}attn.", cfg),
            norm2_scale=store[f"{prefix}norm2.scale"],
            norm2_shift=store[f"{prefix}norm2.shift"],
            fc1_weight=store[f"{prefix}mlp.fc1.weight"],
            fc1_bias=store[f"{prefix}mlp.fc1.bias"],
            fc2_weight=store[f"{prefix}mlp.fc2.weight"],
            fc2_bias=store[f"{prefix}mlp.fc2.bias"],
        )


@dataclass
class VisionModel:
    cfg: ModelConfig
    params: ParameterStore
    stats: NormStats | None = None

    def streams(self) -> list[tuple[str, str, AttentionConfig]]:
        """(tower name, parameter prefix, attention config) per encoder stream."""
        attn = self.cfg.attention
        if not self.cfg.towers:
            return [("main", "", attn)]
        return [(m, f"towers.{m}.", attn.for_tower(m)) for m in self.cfg.towers]

    def block(self, prefix: str, index: int, cfg: AttentionConfig) -> BlockWeights:
        return BlockWeights.from_store(self.params, f"{prefix}blocks.{index}.", cfg)


# ── Initialisation ───────────────────────────────────────────────────────────

def _register_norm(store: ParameterStore, prefix: str, dim: int) -> None:
    store.register(f"{prefix}scale", np.ones(dim))
    store.register(f"{prefix}shift", np.zeros(dim))


def _register_block(store: ParameterStore, prefix: str, cfg: ModelConfig,
                    attn_cfg: AttentionConfig, rng: np.random.Generator) -> None:
    dim, hidden = cfg.model_dim, cfg.hidden_dim
    _register_norm(store, f"{prefix}norm1.", dim)
    init_attention_weights(store, f"{prefix}attn.", attn_cfg, rng)
    _register_norm(store, f"{prefix}norm2.", dim)
    store.register(f"{prefix}mlp.fc1.weight", truncated_normal(rng, (dim, hidden)))
    store.register(f"{prefix}mlp.fc1.bias", np.zeros(hidden))
    store.register(f"{prefix}mlp.fc2.weight", truncated_normal(rng, (hidden, dim)))
    store.register(f"{prefix}mlp.fc2.bias", np.zeros(dim))


def init_model_weights(cfg: ModelConfig, seed: int = 0) -> VisionModel:
    """
    Register every parameter in a fixed order, drawing from one seeded
    generator, so the same (cfg, seed) always yields the same weights.
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.register("embed.weight", truncated_normal(rng, (cfg.patch_dim, cfg.model_dim)))
    store.register("embed.bias", np.zeros(cfg.model_dim))
    store.register("pos_embed", rng.normal(0.0, 0.02, size=(cfg.seq_len, cfg.model_dim)))

    model = VisionModel(cfg, store)
    for _, prefix, attn_cfg in model.streams():
        for i in range(cfg.depth):
            _register_block(store, f"{prefix}blocks.{i}.", cfg, attn_cfg, rng)
        if cfg.final_norm:
            _register_norm(store, f"{prefix}norm.", cfg.model_dim)

    if cfg.pool == "sequence_pool":
        store.register("pool.weight", truncated_normal(rng, (cfg.feature_dim, 1)))
    store.register("head.weight", truncated_normal(rng, (cfg.feature_dim, cfg.num_classes)))
    store.register("head.bias", np.zeros(cfg.num_classes))
    logger.debug("initialised %d tensors (%d scalars) with seed %d",
                 len(store), store.scalar_count(), seed)
    return model


# ── Forward ──────────────────────────────────────────────────────────────────

def patch_embed(images: Tensor, weight: Tensor, bias: Tensor, patch_size: int) -> Tensor:
    """
    (…×H×W×C) → (…×L×D). Patches are taken in row-major order and each is
    flattened as (row, column, channel) before the linear map, which is the
    stride-P convolution written as a matmul.
    """
    *lead, height, width, channels = images.shape
    if height != width or height % patch_size:
        raise ConfigError(f"image {height}×{width} cannot be cut into {patch_size}×{patch_size} patches")
    if weight.shape[0] != patch_size * patch_size * channels:
        raise ConfigError(f"embedder expects {weight.shape[0]} values per patch, "
                          f"image gives {patch_size * patch_size * channels}")
    n, grid = len(lead), height // patch_size
    x = reshape(images, (*lead, grid, patch_size, grid, patch_size, channels))
    x = permute(x, list(range(n)) + [n, n + 2, n + 1, n + 3, n + 4])
    x = reshape(x, (*lead, grid * grid, patch_size * patch_size * channels))
    return linear(x, weight, bias)


def transformer_block_forward(x: Tensor, block: BlockWeights, cfg: AttentionConfig,
                              trace: AttentionTrace | None = None) -> Tensor:
    h = layer_norm(x, block.norm1_scale, block.norm1_shift)
    x = add(x, mma_attention_forward(h, block.attn, cfg, trace))
    h = layer_norm(x, block.norm2_scale, block.norm2_shift)
    h = linear(gelu(linear(h, block.fc1_weight, block.fc1_bias)), block.fc2_weight, block.fc2_bias)
    return add(x, h)


def _check_images(images: np.ndarray, cfg: ModelConfig) -> None:
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if images.ndim < 3 or tuple(images.shape[-3:]) != expected:
        raise ConfigError(f"image shape {images.shape[-3:]} does not match model input {expected}")


def encode(images, model: VisionModel, trace: AttentionTrace | None = None) -> Tensor:
    """Token sequence after the last block and final norm: (…×L×D'), D' = D·towers."""
    cfg = model.cfg
    pixels = images if isinstance(images, Tensor) else constant(images)
    _check_images(pixels.values, cfg)
    params = model.params
    x = patch_embed(pixels, params["embed.weight"], params["embed.bias"], cfg.patch_size)
    x = add(x, expand_leading(params["pos_embed"], x.shape[:-2]))

    outputs = []
    for tower, prefix, attn_cfg in model.streams():
        h = x
        for i in range(cfg.depth):
            if trace is not None:
                trace.tower, trace.block = tower, i
            h = transformer_block_forward(h, model.block(prefix, i, attn_cfg), attn_cfg, trace)
        if cfg.final_norm:
            h = layer_norm(h, params[f"{prefix}norm.scale"], params[f"{prefix}norm.shift"])
        outputs.append(h)
    return fuse_late(outputs) if len(outputs) > 1 else outputs[0]


def pool_tokens(x: Tensor, model: VisionModel) -> Tensor:
    *lead, length, dim = x.shape
    if model.cfg.pool == "mean_pool":
        return mean_lastaxis(transpose(x))
    scores = reshape(linear(x, model.params["pool.weight"]), (*lead, 1, length))
    weights = softmax_rows(scores)
    return reshape(matmul(weights, x), (*lead, dim))


def pooled_features(images, model: VisionModel, trace: AttentionTrace | None = None) -> Tensor:
    return pool_tokens(encode(images, model, trace), model)


def model_forward(images, model: VisionModel, trace: AttentionTrace | None = None) -> Tensor:
    """Logits (…×num_classes) for images (…×H×W×C), already normalised."""
    features = pooled_features(images, model, trace)
    return linear(features, model.params["head.weight"], model.params["head.bias"])
