"""Scaling benchmarks: routing and full-network wall time versus token count,
grouped-vs-global assignment cost accounting, and the DyT-vs-LN norm timing.

All timings use min-over-repeats of perf_counter around forwards with the
tape disabled (parameters detached), so measured cost is pure forward work.
"""

from __future__ import annotations

import math
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .config import NetworkConfig, StageConfig, make_network_config
from .network import SegNet
from .routing import HierarchicalMoE
from .tensor import Tensor


def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def _detach_params(module) -> None:
    for p in module.parameters():
        p.requires_grad = False


def time_forward(fn, repeats: int = 3) -> float:
    """Min wall seconds over ``repeats`` calls (one warmup)."""
    fn()
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


# ---------------------------------------------------------------------------
# analytic cost accounting (multiply-accumulates, x2 for FLOPs)


def assignment_flops_grouped(n_tokens: int, group_size: int, slots_per_group: int, dim: int) -> int:
    """Grouped dispatch cost: every token is scored against its own group's
    slots only."""
    groups = math.ceil(n_tokens / group_size)
    return 2 * groups * group_size * slots_per_group * dim


def assignment_flops_global(n_tokens: int, group_size: int, slots_per_group: int, dim: int) -> int:
    """Ungrouped baseline at equal total slot capacity: every token scored
    against all groups' slots. Equals the grouped cost exactly when G=1."""
    groups = math.ceil(n_tokens / group_size)
    return 2 * n_tokens * groups * slots_per_group * dim


def routing_layer_flops(n_tokens: int, stage: StageConfig) -> int:
    """Assignment + slot aggregation + expert FFNs (both levels) + combine."""
    d = stage.dim
    M = stage.slots_per_group
    groups = math.ceil(n_tokens / stage.group_size)
    padded = groups * stage.group_size
    dispatch = 3 * 2 * padded * M * d  # logits, slot aggregation, combine
    ffn_macs = 2 * stage.ffn_ratio * d * d  # two linears per FFN
    positions = groups * M
    experts = 2 * positions * (stage.num_experts + stage.num_experts_l2) * ffn_macs
    routers = 2 * (groups * d * stage.num_experts + positions * d * stage.num_experts_l2)
    return dispatch + experts + routers


# ---------------------------------------------------------------------------
# sweeps


def routing_sweep(n_values: Sequence[int], group_size: int = 256, num_experts: int = 4,
                  slots_per_expert: int = 2, dim: int = 64, seed: int = 0,
                  repeats: int = 5) -> List[Dict]:
    """Forward wall time of the routing layer at fixed group size over N.

    The default width keeps arithmetic dominant over per-call overhead at the
    smallest N, so the fitted slope reflects the O(N) cost rather than fixed
    interpreter costs; min-over-repeats suppresses machine-load spikes.
    """
    stage = StageConfig(dim=dim, num_experts=num_experts, group_size=group_size,
                        slots_per_expert=slots_per_expert)
    layer = HierarchicalMoE(stage, T.rng(seed))
    _detach_params(layer)
    rows = []
    gen = T.rng(seed + 1)
    for n in n_values:
        x = Tensor(gen.uniform(-1, 1, (1, int(n), dim)))
        wall = time_forward(lambda: layer(x), repeats)
        rows.append({
            "N": int(n),
            "K": group_size,
            "E": num_experts,
            "S": slots_per_expert,
            "G": math.ceil(n / group_size),
            "wall_ms": wall * 1e3,
            "est_flops": routing_layer_flops(int(n), stage),
            "assign_flops_grouped": assignment_flops_grouped(int(n), group_size,
                                                             stage.slots_per_group, dim),
            "assign_flops_global": assignment_flops_global(int(n), group_size,
                                                           stage.slots_per_group, dim),
        })
    return rows


def scan_sweep(n_values: Sequence[int], dim: int = 8, state_dim: int = 2,
               seed: int = 0, repeats: int = 5, block_size: int = 64) -> List[Dict]:
    """Wall time of the blocked selective-scan recurrence over sequence length.

    Default widths keep the largest sweep point inside the same cache regime
    as the smallest, so the fit sees the O(N) arithmetic rather than a
    memory-hierarchy transition bending the curve.
    """
    from .ssm import linear_recurrence

    gen = T.rng(seed)
    rows = []
    for n in n_values:
        a = Tensor(gen.uniform(0.1, 0.9, (1, int(n), dim, state_dim)))
        u = Tensor(gen.uniform(-1, 1, (1, int(n), dim, state_dim)))
        wall = time_forward(lambda: linear_recurrence(a, u, block_size), repeats)
        rows.append({"N": int(n), "wall_ms": wall * 1e3})
    return rows


def _bench_network_config(norm: str = "dyt") -> NetworkConfig:
    # wide enough that array work dominates interpreter overhead at small N
    return make_network_config(num_classes=2, stem_channels=8, experts=(2, 3),
                               base_group_size=64, slots_per_expert=2,
                               ssm_state_dim=4, scan_block_size=64, norm=norm)


def volume_shapes_for(n_values: Sequence[int]) -> List[Tuple[int, int, int]]:
    """Near-cubic (D,H,W) with D*H*W = N, every extent divisible by 4."""
    shapes = []
    for n in n_values:
        exp = int(round(math.log2(n)))
        if 2 ** exp != n:
            raise ValueError(f"token count {n} must be a power of two")
        a = exp // 3
        rem = exp - 3 * a
        dims = [2 ** (a + (1 if i < rem else 0)) for i in range(3)]
        if min(dims) < 4:
            raise ValueError(f"token count {n} too small for a 2-stage network")
        shapes.append(tuple(sorted(dims, reverse=True)))
    return shapes


def network_sweep(n_values: Sequence[int], seed: int = 0, repeats: int = 3,
                  norm: str = "dyt") -> List[Dict]:
    """End-to-end forward wall time over input token counts (powers of two)."""
    net = SegNet(_bench_network_config(norm), seed=seed)
    _detach_params(net)
    gen = T.rng(seed + 1)
    rows = []
    for n, shape in zip(n_values, volume_shapes_for(n_values)):
        x = Tensor(gen.uniform(0, 1, (1, 1) + shape))
        wall = time_forward(lambda: net(x), repeats)
        rows.append({"N": int(n), "shape": "x".join(map(str, shape)), "wall_ms": wall * 1e3})
    return rows


def norm_comparison(n_values: Sequence[int] = (2 ** 12, 2 ** 13, 2 ** 14), dim: int = 8,
                    seed: int = 0, rounds: int = 15) -> Dict[str, float]:
    """Per-step forward wall time of the swapped normalization (DyT vs LN)
    on activations at the sweep's token counts, summed over sizes.

    The norm layers are what the DyT/LN selector exchanges inside the block;
    timing them directly resolves the direction decisively, where a whole-net
    forward buries the swapped component under conv/scan/routing cost.
    Interleaved rounds with min-statistics cancel machine-load drift.
    """
    from . import nn

    gen = T.rng(seed + 1)
    layers = {"dyt": nn.DynamicTanh(dim), "ln": nn.LayerNorm(dim)}
    for layer in layers.values():
        for p in layer.parameters():
            p.requires_grad = False
    totals = {"dyt": 0.0, "ln": 0.0}
    for n in n_values:
        x = Tensor(gen.uniform(-1, 1, (1, int(n), dim)))
        best = {"dyt": math.inf, "ln": math.inf}
        for name, layer in layers.items():
            layer(x)  # warmup
        for _ in range(rounds):
            for name, layer in layers.items():
                t0 = time.perf_counter()
                layer(x)
                best[name] = min(best[name], time.perf_counter() - t0)
        for name in totals:
            totals[name] += best[name]
    return {k: v * 1e3 for k, v in totals.items()}


def norm_net_comparison(n_tokens: int = 2 ** 13, seed: int = 0, rounds: int = 9) -> Dict[str, float]:
    """Whole-network forward wall time with each block normalization
    (informational: the norm share of a full forward is small)."""
    shape = volume_shapes_for([n_tokens])[0]
    gen = T.rng(seed + 1)
    x = Tensor(gen.uniform(0, 1, (1, 1) + shape))
    nets = {}
    for norm in ("dyt", "ln"):
        nets[norm] = SegNet(_bench_network_config(norm), seed=seed)
        _detach_params(nets[norm])
        nets[norm](x)  # warmup
    best = {"dyt": math.inf, "ln": math.inf}
    for _ in range(rounds):
        for norm in ("dyt", "ln"):
            t0 = time.perf_counter()
            nets[norm](x)
            best[norm] = min(best[norm], time.perf_counter() - t0)
    return {k: v * 1e3 for k, v in best.items()}
