"""Analytic compute-cost model for the encoder stack.

Counts multiply-accumulate operations (MACs) per block from the sequence
lengths alone.  Attention in a block always runs at the length the block
received; pruning happens mid-block, so the feed-forward half runs at the
reduced length.  The schedule here is computed by plain arithmetic, on
purpose independent of the backbone's recorded trace, so the two can be
compared exactly in tests.

Per block of width D over n tokens:
    attention: 4 n D^2 (q, k, v, o projections) + 2 n^2 D (scores, mixing)
    feed-forward: 2 m n D^2 for hidden multiplier m

Multiply by 2 to report FLOPs conventions that count a MAC as two ops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .autodiff import ContractViolation
from .model import ModelConfig


@dataclass(frozen=True)
class BlockCost:
    index: int  # 1-based block number
    attn_tokens: int  # sequence length seen by the attention half
    ffn_tokens: int  # sequence length seen by the feed-forward half
    visual_after: int  # visual tokens surviving the block
    attn_macs: int
    ffn_macs: int

    @property
    def total_macs(self) -> int:
        return self.attn_macs + self.ffn_macs


@dataclass(frozen=True)
class CostBreakdown:
    rho: float
    blocks: tuple[BlockCost, ...]
    constant_macs: int  # patch projection + box head, when included

    @property
    def total_macs(self) -> int:
        return self.constant_macs + sum(b.total_macs for b in self.blocks)


def pruned_count(rho: float, n_visual: int) -> int:
    """Visual tokens surviving one pruning stage: round-half-up(rho*n), >= 1."""
    if not (0.0 < rho <= 1.0):
        raise ContractViolation(f"rho must be in (0, 1], got {rho}")
    if n_visual < 1:
        raise ContractViolation("need at least one visual token")
    return max(1, int(math.floor(rho * n_visual + 0.5)))


def sequence_schedule(config: ModelConfig, rho: float) -> list[tuple[int, int, int]]:
    """Per block: (attention length, feed-forward length, visual count after).

    Lengths include the register row and the full padded text segment;
    pruning compounds across the configured selection blocks.
    """
    fixed = 1 + config.max_text_len
    visual = config.n_patches
    fs = set(config.fs_layers)
    rows = []
    for i in range(1, config.depth + 1):
        attn_len = fixed + visual
        if i in fs:
            visual = pruned_count(rho, visual)
        rows.append((attn_len, fixed + visual, visual))
    return rows


def attention_macs(n: int, d: int) -> int:
    return 4 * n * d * d + 2 * n * n * d


def ffn_macs(n: int, d: int, mult: int) -> int:
    return 2 * mult * n * d * d


def constant_macs(config: ModelConfig) -> int:
    """Input projection and box head, independent of rho."""
    embed = config.n_patches * config.patch_features * config.embed_dim
    head = (
        config.embed_dim * config.head_hidden
        + config.head_hidden * config.head_hidden
        + config.head_hidden * 4
    )
    return embed + head


def cost_breakdown(config: ModelConfig, rho: float,
                   include_constant: bool = False) -> CostBreakdown:
    d = config.embed_dim
    blocks = []
    for i, (n_attn, n_ffn, visual) in enumerate(sequence_schedule(config, rho), 1):
        blocks.append(
            BlockCost(
                index=i,
                attn_tokens=n_attn,
                ffn_tokens=n_ffn,
                visual_after=visual,
                attn_macs=attention_macs(n_attn, d),
                ffn_macs=ffn_macs(n_ffn, d, config.ffn_mult),
            )
        )
    return CostBreakdown(
        rho=rho,
        blocks=tuple(blocks),
        constant_macs=constant_macs(config) if include_constant else 0,
    )


def ratio_table(config: ModelConfig, rho_list: list[float],
                include_constant: bool = False,
                flops_factor: int = 1) -> list[dict]:
    """Cost rows for each rho, with ratios against the dense (rho=1) stack.

    flops_factor 1 reports MACs; 2 reports the two-ops-per-MAC convention.
    Ratios are identical under either factor.
    """
    if flops_factor not in (1, 2):
        raise ContractViolation("flops_factor must be 1 or 2")
    if not rho_list:
        raise ContractViolation("rho_list must not be empty")
    dense = cost_breakdown(config, 1.0, include_constant).total_macs
    rows = []
    for rho in rho_list:
        bd = cost_breakdown(config, rho, include_constant)
        rows.append(
            {
                "rho": rho,
                "ops": bd.total_macs * flops_factor,
                "ratio": bd.total_macs / dense,
                "visual_tokens": [b.visual_after for b in bd.blocks],
            }
        )
    return rows
