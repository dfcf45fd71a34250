"""Two-level soft expert routing over grouped token slots.

Pipeline: partition the token sequence into contiguous groups, softly assign
each group's tokens to per-expert slots (dispatch weights from a per-token
softmax over all expert-slot pairs), run a dense mixture of experts over the
slots (group-pooled gate), refine the flattened slot sequence with a second
dense mixture (per-position gate), then map slots back to tokens with the
same dispatch weights and drop the padding.

Token ordering contract: callers flatten 3D feature maps in raster order
(depth-major, then height, then width), so groups are spatially contiguous
slabs. Group boundaries change results, which makes the ordering part of the
interface.
"""

from __future__ import annotations

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nn, tensor as T
from .config import StageConfig
from .tensor import ShapeError, Tensor


def group_and_pad(x: Tensor, mask: Optional[np.ndarray], group_size: int
                  ) -> Tuple[Tensor, np.ndarray]:
    """Partition [B,N,d] into ceil(N/K) groups of K tokens, zero-padding the
    tail; returns the grouped tensor [B,G,K,d] and the validity mask [B,N'].

    Padded positions carry zeros and validity 0. An absent input mask means
    all tokens are valid.
    """
    if x.ndim != 3:
        raise ShapeError(f"group_and_pad expects [B,N,d], got {x.shape}")
    B, N, d = x.shape
    if N == 0:
        raise ShapeError("group_and_pad: empty token sequence")
    if group_size < 1:
        raise ShapeError(f"group size must be >= 1, got {group_size}")
    G = math.ceil(N / group_size)
    Np = G * group_size
    padded = T.pad_zeros(x, [(0, 0), (0, Np - N), (0, 0)]) if Np > N else x
    grouped = T.reshape(padded, (B, G, group_size, d))
    valid = np.zeros((B, Np), dtype=np.float64)
    valid[:, :N] = 1.0 if mask is None else np.asarray(mask, dtype=np.float64)
    return grouped, valid


def ungroup(grouped: Tensor, n_tokens: int) -> Tensor:
    """Inverse of group_and_pad restricted to the valid prefix."""
    B, G, K, d = grouped.shape
    flat = T.reshape(grouped, (B, G * K, d))
    if n_tokens > G * K:
        raise ShapeError(f"cannot recover {n_tokens} tokens from {G * K} grouped positions")
    return flat[:, :n_tokens] if n_tokens < G * K else flat


def slot_assign(grouped: Tensor, valid: np.ndarray, slot_emb: Tensor
                ) -> Tuple[Tensor, Tensor]:
    """Soft-assign each group's tokens to expert slots.

    Logits are token/slot-embedding dot products; each token's dispatch row is
    a softmax over the combined expert-slot dimension (m = e*S + s). Masking
    is row-granular: an invalid token has its whole row suppressed, realized
    as an exact-zero dispatch row so padded content can never reach a slot
    (and gets zero gradient). Returns slots [B,G,E,S,d] and dispatch weights
    A [B,G,K,M].
    """
    B, G, K, d = grouped.shape
    E, S, d2 = slot_emb.shape
    if d2 != d:
        raise ShapeError(f"slot embeddings width {d2} != token width {d}")
    M = E * S
    emb_t = T.permute(T.reshape(slot_emb, (M, d)), (1, 0))
    logits = T.matmul(grouped, emb_t)  # [B,G,K,M]
    if valid.all():
        weights = T.softmax(logits, axis=-1)
    else:
        keep = valid.reshape(B, G, K, 1).astype(bool)
        safe = T.masked_fill(logits, keep, 0.0)  # dead rows -> uniform-safe logits
        weights = T.mul(T.softmax(safe, axis=-1), Tensor(keep.astype(np.float64)))
    slots_flat = T.matmul(T.transpose(weights), grouped)  # [B,G,M,K] @ [B,G,K,d]
    return T.reshape(slots_flat, (B, G, E, S, d)), weights


def level1_route(slots: Tensor, router: nn.Linear, experts: Sequence[nn.FeedForward]) -> Tensor:
    """Dense first-level mixture: one gate per group (softmax over experts of
    an MLP on the slot mean), every expert runs on every group's slots.

    slots: [B,G,M,d] -> [B,G,M,d], slot structure preserved one-to-one.
    """
    B, G, M, d = slots.shape
    pooled = T.reduce_mean(slots, axis=2)  # [B,G,d]
    gate = T.softmax(router(pooled), axis=-1)  # [B,G,E]
    out = None
    for e, expert in enumerate(experts):
        w = T.reshape(gate[..., e], (B, G, 1, 1))
        term = T.mul(w, expert(slots))
        out = term if out is None else T.add(out, term)
    return out


def level2_route(seq: Tensor, router: nn.Linear, experts: Sequence[nn.FeedForward]) -> Tensor:
    """Dense second-level mixture with a per-position gate over the flattened
    slot sequence [B, G*M, d]; enables cross-group refinement."""
    B, L, d = seq.shape
    gate = T.softmax(router(seq), axis=-1)  # [B,L,E2]
    out = None
    for e, expert in enumerate(experts):
        w = T.reshape(gate[..., e], (B, L, 1))
        term = T.mul(w, expert(seq))
        out = term if out is None else T.add(out, term)
    return out


def combine(slot_out: Tensor, weights: Tensor, n_tokens: int) -> Tensor:
    """Map slot outputs back to tokens: each token gets the convex combination
    of its group's slots under its own dispatch row, then padding is dropped.

    slot_out: [B,G,M,d]; weights: [B,G,K,M] (the slot_assign output, reused).
    """
    B, G, M, d = slot_out.shape
    if weights.shape[:2] != (B, G) or weights.shape[3] != M:
        raise ShapeError(f"combine: weights {weights.shape} inconsistent with slots {slot_out.shape}")
    K = weights.shape[2]
    if n_tokens > G * K:
        raise ShapeError(f"combine: cannot produce {n_tokens} tokens from {G * K} positions")
    mixed = T.matmul(weights, slot_out)  # [B,G,K,d]
    return ungroup(mixed, n_tokens)


class HierarchicalMoE(nn.Module):
    """The full grouped two-level soft-MoE layer (shape-preserving on [B,N,d])."""

    def __init__(self, cfg: StageConfig, rng: np.random.Generator):
        d = cfg.dim
        bound = 1.0 / math.sqrt(d)
        self.slot_emb = Tensor(rng.uniform(-bound, bound, (cfg.num_experts, cfg.slots_per_expert, d)),
                               requires_grad=True)
        self.router1 = nn.Linear(d, cfg.num_experts, rng)
        self.experts1 = [nn.FeedForward(d, rng, cfg.ffn_ratio, cfg.activation)
                         for _ in range(cfg.num_experts)]
        self.router2 = nn.Linear(d, cfg.num_experts_l2, rng)
        self.experts2 = [nn.FeedForward(d, rng, cfg.ffn_ratio, cfg.activation)
                         for _ in range(cfg.num_experts_l2)]
        self.cfg = cfg

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        B, N, d = x.shape
        cfg = self.cfg
        grouped, valid = group_and_pad(x, mask, cfg.group_size)
        G = grouped.shape[1]
        M = cfg.slots_per_group
        slots, weights = slot_assign(grouped, valid, self.slot_emb)
        y1 = level1_route(T.reshape(slots, (B, G, M, d)), self.router1, self.experts1)
        y2 = level2_route(T.reshape(y1, (B, G * M, d)), self.router2, self.experts2)
        return combine(T.reshape(y2, (B, G, M, d)), weights, N)
