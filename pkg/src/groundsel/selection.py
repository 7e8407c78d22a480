"""Language-guided ranking and pruning of visual tokens.

The sequence layout is [register | visual tokens | text tokens].  At a
selection layer the attention logits of the preceding block are averaged over
heads and over valid (non-padding) text key columns to give one relevance
score per visual token; the top share rho of visual tokens is kept and the
rest are dropped from the sequence before the block's feed-forward half.
Scores are a read-only ranking signal: no gradient flows through them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor


@dataclass(frozen=True)
class Segments:
    """Row layout of the token sequence: one register, visuals, text."""

    visual_count: int
    language_count: int
    register_count: int = 1

    def __post_init__(self):
        if self.register_count != 1:
            raise ContractViolation("exactly one register token is supported")
        if self.visual_count < 1 or self.language_count < 1:
            raise ContractViolation("need at least one visual and one text token")

    @property
    def total(self) -> int:
        return self.register_count + self.visual_count + self.language_count

    @property
    def visual_slice(self) -> slice:
        return slice(1, 1 + self.visual_count)

    @property
    def language_slice(self) -> slice:
        return slice(1 + self.visual_count, self.total)


@dataclass
class TokenSequence:
    """A tensor of token rows plus bookkeeping about what each row is.

    patch_map[i] is the index of the i-th surviving visual row in the
    original patch grid, so visualisation can point back at pixels after
    any number of pruning stages.
    """

    data: Tensor
    segments: Segments
    text_valid: np.ndarray  # bool over language rows; False marks padding
    patch_map: np.ndarray  # int64, len == segments.visual_count

    def __post_init__(self):
        if self.data.data.shape[0] != self.segments.total:
            raise ContractViolation(
                f"sequence rows {self.data.data.shape[0]} vs layout "
                f"{self.segments.total}"
            )
        self.text_valid = np.asarray(self.text_valid, dtype=bool)
        if self.text_valid.shape != (self.segments.language_count,):
            raise ContractViolation("text_valid length must match text rows")
        if not self.text_valid.any():
            raise ContractViolation("all text rows are padding")
        self.patch_map = np.asarray(self.patch_map, dtype=np.int64)
        if self.patch_map.shape != (self.segments.visual_count,):
            raise ContractViolation("patch_map length must match visual rows")

    @property
    def key_valid(self) -> np.ndarray:
        """Attention key mask over all rows: padding text rows are invalid."""
        seg = self.segments
        mask = np.ones(seg.total, dtype=bool)
        mask[seg.language_slice] = self.text_valid
        return mask


@dataclass
class SelectionStage:
    """What one pruning stage saw and decided."""

    layer_index: int  # 1-based block number
    scores: np.ndarray  # float64, one per visual row entering the stage
    kept_local: np.ndarray  # ascending indices into the entering visual rows
    kept_patches: np.ndarray  # original patch-grid indices of kept rows
    entering_visual: int


@dataclass
class SelectionTrace:
    """Per-stage pruning record plus per-block sequence lengths."""

    stages: list[SelectionStage] = field(default_factory=list)
    block_lengths: list[tuple[int, int]] = field(default_factory=list)


def keep_count(rho: float, n_visual: int) -> int:
    """Number of visual tokens to keep: round-half-up(rho * n), at least 1."""
    if not (0.0 < rho <= 1.0):
        raise ContractViolation(f"rho must be in (0, 1], got {rho}")
    if n_visual < 1:
        raise ContractViolation("no visual tokens to select from")
    return max(1, int(math.floor(rho * n_visual + 0.5)))


def visual_language_scores(logit_data: np.ndarray, seg: Segments,
                           text_valid: np.ndarray) -> np.ndarray:
    """Relevance of each visual token to the text, from attention logits.

    logit_data has shape (heads, tokens, tokens): rows are queries, columns
    keys.  The score of visual row i is the mean logit over all heads and
    all valid text key columns.  Returned as float64 so ranking does not
    depend on accumulation order at low precision.
    """
    if logit_data.ndim != 3 or logit_data.shape[1] != logit_data.shape[2]:
        raise ContractViolation(f"logits shape {logit_data.shape}")
    if logit_data.shape[1] != seg.total:
        raise ContractViolation(
            f"logits for {logit_data.shape[1]} tokens vs layout {seg.total}"
        )
    text_valid = np.asarray(text_valid, dtype=bool)
    if text_valid.shape != (seg.language_count,):
        raise ContractViolation("text_valid length must match text rows")
    if not text_valid.any():
        raise ContractViolation("scores need at least one valid text column")
    cols = np.nonzero(text_valid)[0] + 1 + seg.visual_count
    block = logit_data[:, seg.visual_slice, :][:, :, cols]
    return block.mean(axis=(0, 2), dtype=np.float64)


def top_rho_indices(scores: np.ndarray, rho: float) -> np.ndarray:
    """Ascending indices of the top round-half-up(rho*n) scores, at least one.

    Ties are broken toward the lower index.  The output preserves original
    order, so gathering with it keeps tokens in sequence order.
    """
    scores = np.asarray(scores)
    if scores.ndim != 1 or scores.size == 0:
        raise ContractViolation("scores must be a non-empty vector")
    k = keep_count(rho, scores.size)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


def apply_selection(seq: TokenSequence, kept: np.ndarray, scores: np.ndarray,
                    layer_index: int, trace: SelectionTrace) -> TokenSequence:
    """Drop visual rows not in kept; register and text rows pass through.

    kept must be ascending local indices into the current visual rows.
    Surviving rows are bit-identical copies; the stage is appended to trace.
    """
    seg = seq.segments
    kept = np.asarray(kept, dtype=np.int64)
    if kept.size < 1:
        raise ContractViolation("selection must keep at least one visual token")
    if (np.diff(kept) <= 0).any():
        raise ContractViolation("kept indices must be strictly ascending")
    if kept[0] < 0 or kept[-1] >= seg.visual_count:
        raise ContractViolation(
            f"kept index out of range for {seg.visual_count} visual rows"
        )
    rows = np.concatenate([
        np.array([0], dtype=np.int64),
        kept + 1,
        np.arange(seg.language_slice.start, seg.total, dtype=np.int64),
    ])
    new_data = ad.gather_rows(seq.data, rows)
    new_seg = Segments(
        visual_count=int(kept.size), language_count=seg.language_count
    )
    new_map = seq.patch_map[kept]
    trace.stages.append(
        SelectionStage(
            layer_index=layer_index,
            scores=np.asarray(scores, dtype=np.float64).copy(),
            kept_local=kept.copy(),
            kept_patches=new_map.copy(),
            entering_visual=seg.visual_count,
        )
    )
    return TokenSequence(
        data=new_data,
        segments=new_seg,
        text_valid=seq.text_valid,
        patch_map=new_map,
    )
