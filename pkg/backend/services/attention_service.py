"""
Manifold attention.

Each enabled manifold turns the per-head queries and keys into an L×L map:

  euclidean  D_E  = Q·Kᵀ / √d                          (similarity)
  spd        D_S  = |cov(Q) − cov(K)| / √d             (entrywise)
  grassmann  D_G  = |G_Q·G_Qᵀ − G_K·G_Kᵀ| / √d         (G from a thin QR)

Early fusion stacks the maps on a channel axis, mixes them with a learned
1×1 convolution and softmaxes the result. Late fusion runs one attention
tower per manifold and concatenates the tower outputs on the feature axis.

Every function works on arbitrary leading (batch) dims: a "per head" tensor
is (…×h×L×d) and a token sequence is (…×L×D).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from models.schemas import MANIFOLD_ORDER, AttentionConfig
from services.errors import ConfigError, ContractError, DimensionError, NumericDomainError
from services.tensor_service import (
    ParameterStore,
    Tensor,
    abs_,
    channel_mix_1x1,
    concat,
    concat_channels,
    constant,
    div,
    expand_last,
    l2norm_lastaxis,
    linear,
    matmul,
    mean_lastaxis,
    permute,
    reshape,
    scale,
    slice_axis,
    softmax_rows,
    sub,
    transpose,
    truncated_normal,
    where,
)

logger = logging.getLogger(__name__)

MIX_NOISE = 1e-3


# ── Weights ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class FusionMix:
    weight: Tensor  # h × k·h
    bias: Tensor    # h


@dataclass(frozen=True)
class AttentionWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_o: Tensor
    mix: FusionMix | None = None

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str, cfg: AttentionConfig) -> "AttentionWeights":
        mix = None
        if cfg.has_fusion_mix:
            mix = FusionMix(store[f"{prefix}mix.weight"], store[f"{prefix}mix.bias"])
        return cls(
            w_q=store[f"{prefix}w_q"],
            w_k=store[f"{prefix}w_k"],
            w_v=store[f"{prefix}w_v"],
            w_o=store[f"{prefix}w_o"],
            b_o=store[f"{prefix}b_o"],
            mix=mix,
        )


def selector_mix_values(heads: int, k: int, channel_block: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Mix weights that copy channel block `channel_block` through unchanged."""
    weight = np.zeros((heads, k * heads))
    weight[:, channel_block * heads:(channel_block + 1) * heads] = np.eye(heads)
    return weight, np.zeros(heads)


def euclidean_selector(heads: int, k: int) -> FusionMix:
    weight, bias = selector_mix_values(heads, k, 0)
    return FusionMix(constant(weight), constant(bias))


def init_attention_weights(store: ParameterStore, prefix: str, cfg: AttentionConfig,
                           rng: np.random.Generator) -> AttentionWeights:
    """Register one attention layer's parameters under `prefix` and return them."""
    dim = cfg.model_dim
    for role in ("w_q", "w_k", "w_v", "w_o"):
        store.register(f"{prefix}{role}", truncated_normal(rng, (dim, dim)))
    store.register(f"{prefix}b_o", np.zeros(dim))
    if cfg.has_fusion_mix:
        k = len(cfg.manifolds)
        weight, bias = selector_mix_values(cfg.heads, k, 0)
        weight = weight + rng.uniform(-MIX_NOISE, MIX_NOISE, size=weight.shape)
        store.register(f"{prefix}mix.weight", weight)
        store.register(f"{prefix}mix.bias", bias)
    return AttentionWeights.from_store(store, prefix, cfg)


# ── Tracing ──────────────────────────────────────────────────────────────────

@dataclass
class TraceEntry:
    tower: str
    block: int
    kind: str  # manifold name for raw maps, "attention" for softmaxed maps
    values: np.ndarray


@dataclass
class AttentionTrace:
    """Collects distance and attention maps while a forward pass runs."""
    tower: str = "main"
    block: int = 0
    entries: list[TraceEntry] = field(default_factory=list)
    deficient_pivots: int = 0

    def record(self, kind: str, values: Tensor) -> None:
        self.entries.append(TraceEntry(self.tower, self.block, kind, np.array(values.values)))

    def select(self, kind: str) -> list[TraceEntry]:
        return [e for e in self.entries if e.kind == kind]


# ── Heads ────────────────────────────────────────────────────────────────────

def split_heads(x: Tensor, heads: int) -> Tensor:
    """(…×L×D) → (…×h×L×d)."""
    *lead, length, dim = x.shape
    if dim % heads:
        raise DimensionError(f"split_heads: model dim {dim} not divisible by {heads} heads")
    n = len(lead)
    x = reshape(x, (*lead, length, heads, dim // heads))
    return permute(x, list(range(n)) + [n + 1, n, n + 2])


def merge_heads(x: Tensor) -> Tensor:
    """(…×h×L×d) → (…×L×D); exact inverse of split_heads."""
    *lead, heads, length, head_dim = x.shape
    n = len(lead)
    x = permute(x, list(range(n)) + [n + 1, n, n + 2])
    return reshape(x, (*lead, length, heads * head_dim))


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ── Distance maps ────────────────────────────────────────────────────────────

def euclidean_distance_map(q: Tensor, k: Tensor) -> Tensor:
    _check_pair("euclidean_distance_map", q, k)
    return scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[-1]))


def token_covariance(x: Tensor) -> Tensor:
    """Per-token centring over the d features, then X_c·X_cᵀ/(d−1): (…×L×d) → (…×L×L)."""
    d = x.shape[-1]
    if d < 2:
        raise ConfigError(f"token_covariance needs head_dim >= 2, got {d}")
    centered = sub(x, expand_last(mean_lastaxis(x), d))
    return scale(matmul(centered, transpose(centered)), 1.0 / (d - 1))


def spd_distance_map(c_q: Tensor, c_k: Tensor, head_dim: int) -> Tensor:
    _check_pair("spd_distance_map", c_q, c_k)
    return scale(abs_(sub(c_q, c_k)), 1.0 / math.sqrt(head_dim))


def _pivot_threshold(x: np.ndarray, tol: float) -> np.ndarray:
    # per original column: max(tol, 100·eps·max(1, ‖column‖))
    eps = np.finfo(x.dtype).eps
    col_norms = np.sqrt((x * x).sum(axis=-2))
    return np.maximum(tol, 100.0 * eps * np.maximum(1.0, col_norms))


def gram_schmidt_thin_qr(x: Tensor, tol: float = 1e-10) -> tuple[Tensor, Tensor]:
    """
    Modified Gram–Schmidt on the columns of x (…×L×d) → G (…×L×d), R (…×d×d).

    Built only from differentiable primitives, so gradients flow through the
    factorisation without a dedicated backward rule. A pivot whose norm falls
    below the tolerance yields a zero column of G and a zero diagonal entry
    of R; the remaining columns are unaffected.
    """
    if not np.all(np.isfinite(x.values)):
        raise NumericDomainError("gram_schmidt_thin_qr received NaN or infinite input")
    if x.ndim < 2:
        raise DimensionError(f"gram_schmidt_thin_qr needs (…×L×d), got {x.shape}")
    *lead, length, d = x.shape
    lead = tuple(lead)
    threshold = _pivot_threshold(x.values, tol)

    # rows of `rest` are the not-yet-orthogonalised columns of x
    rest = transpose(x)
    basis_rows: list[Tensor] = []
    r_rows: list[Tensor] = []
    for j in range(d):
        v = slice_axis(rest, -2, 0, 1)                        # …×1×L
        norm = l2norm_lastaxis(v)                             # …×1
        deficient = norm.values < threshold[..., j:j + 1]
        safe = where(deficient, constant(np.ones(norm.shape)), norm)
        unit = div(v, expand_last(safe, length))
        mask = np.broadcast_to(deficient[..., None], unit.shape)
        q_row = where(mask, constant(np.zeros(unit.shape)), unit)
        r_diag = where(deficient, constant(np.zeros(norm.shape)), norm)
        basis_rows.append(q_row)

        pieces = []
        if j > 0:
            pieces.append(constant(np.zeros(lead + (1, j))))
        pieces.append(reshape(r_diag, lead + (1, 1)))
        if j < d - 1:
            rest = slice_axis(rest, -2, 1, d - j)             # …×(d−j−1)×L
            coeffs = matmul(rest, transpose(q_row))           # …×(d−j−1)×1
            rest = sub(rest, matmul(coeffs, q_row))
            pieces.append(transpose(coeffs))
        r_rows.append(concat(pieces, axis=-1))

    return transpose(concat(basis_rows, axis=-2)), concat(r_rows, axis=-2)


def grassmann_projector(g: Tensor) -> Tensor:
    return matmul(g, transpose(g))


def grassmann_distance_map(g_q: Tensor, g_k: Tensor) -> Tensor:
    _check_pair("grassmann_distance_map", g_q, g_k)
    diff = sub(grassmann_projector(g_q), grassmann_projector(g_k))
    return scale(abs_(diff), 1.0 / math.sqrt(g_q.shape[-1]))


def deficient_count(r: Tensor) -> int:
    return int((np.diagonal(r.values, axis1=-2, axis2=-1) == 0).sum())


def distance_maps(q: Tensor, k: Tensor, cfg: AttentionConfig,
                  trace: AttentionTrace | None = None) -> dict[str, Tensor]:
    """All enabled maps for per-head q, k (…×h×L×d), keyed by manifold, canonical order."""
    maps: dict[str, Tensor] = {}
    d = q.shape[-1]
    for manifold in cfg.manifolds:
        if manifold == "euclidean":
            maps[manifold] = euclidean_distance_map(q, k)
        elif manifold == "spd":
            maps[manifold] = spd_distance_map(token_covariance(q), token_covariance(k), d)
        else:
            g_q, r_q = gram_schmidt_thin_qr(q, cfg.qr_tolerance)
            g_k, r_k = gram_schmidt_thin_qr(k, cfg.qr_tolerance)
            maps[manifold] = grassmann_distance_map(g_q, g_k)
            if trace is not None:
                trace.deficient_pivots += deficient_count(r_q) + deficient_count(r_k)
        if trace is not None:
            trace.record(manifold, maps[manifold])
    return maps


# ── Fusion ───────────────────────────────────────────────────────────────────

def fuse_early(maps: Mapping[str, Tensor], mix: FusionMix, v: Tensor,
               manifolds: Sequence[str], trace: AttentionTrace | None = None) -> Tensor:
    """
    concat maps (channel axis) → 1×1 mix → softmax rows → ·V → merge heads.
    Returns (…×L×D); the output projection is the caller's.
    """
    missing = [m for m in manifolds if m not in maps]
    if missing:
        raise ContractError(f"fuse_early: no distance map for enabled manifold(s) {missing}")
    heads = v.shape[-3]
    k = len(manifolds)
    if mix.weight.shape != (heads, k * heads):
        raise DimensionError(f"fuse_early: mix weight {mix.weight.shape}, expected {(heads, k * heads)}")
    ordered = [maps[m] for m in MANIFOLD_ORDER if m in manifolds]
    stacked = concat_channels(ordered)
    attn = softmax_rows(channel_mix_1x1(stacked, mix.weight, mix.bias))
    if trace is not None:
        trace.record("attention", attn)
    return merge_heads(matmul(attn, v))


def fuse_late(tower_outputs: Sequence[Tensor]) -> Tensor:
    """Feature-axis concatenation of 2 or 3 tower outputs in canonical manifold order."""
    if len(tower_outputs) not in (2, 3):
        raise ContractError(f"fuse_late needs 2 or 3 tower outputs, got {len(tower_outputs)}")
    ref = tower_outputs[0]
    for out in tower_outputs[1:]:
        _check_pair("fuse_late", ref, out)
    return concat(tower_outputs, axis=-1)


# ── Forward passes ───────────────────────────────────────────────────────────

def _project(x: Tensor, weights: AttentionWeights, heads: int) -> tuple[Tensor, Tensor, Tensor]:
    if not np.all(np.isfinite(x.values)):
        raise NumericDomainError("attention input contains NaN or infinite values")
    return (
        split_heads(linear(x, weights.w_q), heads),
        split_heads(linear(x, weights.w_k), heads),
        split_heads(linear(x, weights.w_v), heads),
    )


def vanilla_mhsa_forward(x: Tensor, weights: AttentionWeights, heads: int,
                         trace: AttentionTrace | None = None) -> Tensor:
    """softmax(Q·Kᵀ/√d)·V per head, heads concatenated, then W_o."""
    q, k, v = _project(x, weights, heads)
    d_e = euclidean_distance_map(q, k)
    attn = softmax_rows(d_e)
    if trace is not None:
        trace.record("euclidean", d_e)
        trace.record("attention", attn)
    return linear(merge_heads(matmul(attn, v)), weights.w_o, weights.b_o)


def tower_attention_forward(x: Tensor, weights: AttentionWeights, cfg: AttentionConfig,
                            manifold: str, trace: AttentionTrace | None = None) -> Tensor:
    """One late-fusion tower: softmax(±D_m)·V with the tower's own projections."""
    tower_cfg = cfg.for_tower(manifold)
    q, k, v = _project(x, weights, cfg.heads)
    dist = distance_maps(q, k, tower_cfg, trace)[manifold]
    if cfg.negate_distances and manifold != "euclidean":
        dist = scale(dist, -1.0)
    attn = softmax_rows(dist)
    if trace is not None:
        trace.record("attention", attn)
    return linear(merge_heads(matmul(attn, v)), weights.w_o, weights.b_o)


def mma_attention_forward(x: Tensor, weights: AttentionWeights | Mapping[str, AttentionWeights],
                          cfg: AttentionConfig, trace: AttentionTrace | None = None) -> Tensor:
    """
    Multi-manifold attention over x (…×L×D).

    Early fusion returns (…×L×D). Late fusion with one manifold is a single
    tower (…×L×D); with k ≥ 2 manifolds `weights` maps each manifold to its
    tower's weights and the result is (…×L×k·D).
    """
    if cfg.fusion == "late":
        if len(cfg.manifolds) == 1:
            tower = weights[cfg.manifolds[0]] if isinstance(weights, Mapping) else weights
            return tower_attention_forward(x, tower, cfg, cfg.manifolds[0], trace)
        if not isinstance(weights, Mapping):
            raise ContractError("late fusion needs one AttentionWeights per manifold")
        outputs = []
        for manifold in cfg.manifolds:
            if manifold not in weights:
                raise ContractError(f"late fusion: no tower weights for '{manifold}'")
            if trace is not None:
                trace.tower = manifold
            outputs.append(tower_attention_forward(x, weights[manifold], cfg, manifold, trace))
        return fuse_late(outputs)

    if isinstance(weights, Mapping):
        raise ContractError("early fusion takes a single AttentionWeights")
    if cfg.is_vanilla:
        return vanilla_mhsa_forward(x, weights, cfg.heads, trace)
    if weights.mix is None:
        raise ContractError("early fusion over non-Euclidean manifolds needs fusion mix weights")
    q, k, v = _project(x, weights, cfg.heads)
    maps = distance_maps(q, k, cfg, trace)
    fused = fuse_early(maps, weights.mix, v, cfg.manifolds, trace)
    return linear(fused, weights.w_o, weights.b_o)
