"""The grounding model: parallel image/text encoder with token pruning.

Input layout is [register | visual patches | text tokens].  Both modalities
are linearly embedded with learned positions, concatenated once, and run
through a stack of pre-norm transformer blocks.  At configured blocks the
visual rows are ranked against the text (see selection.py) between the
attention and feed-forward halves, and only the top share rho survives.
The register row, normalised at the end, feeds a small MLP that outputs a
center-format box through a sigmoid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor
from .nn import BlockParams, LinearParams, init_block, init_linear, init_norm_pair, linear, mhsa_forward, ffn_forward, block_forward_dense
from .rng import derive_seed, normal_field
from .selection import (
    Segments,
    SelectionTrace,
    TokenSequence,
    apply_selection,
    top_rho_indices,
    visual_language_scores,
)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    ffn_mult: int = 4
    fs_layers: tuple[int, ...] = (2, 3)  # 1-based block indices
    rho: float = 0.7
    vocab_size: int = 8
    max_text_len: int = 4
    head_hidden: int = 256
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    seed: int = 0
    precision: str = "single"
    layernorm_eps: float = 1e-5

    def __post_init__(self):
        if self.image_size < 1 or self.patch_size < 1:
            raise ContractViolation("image and patch sizes must be positive")
        if self.image_size % self.patch_size != 0:
            raise ContractViolation(
                f"image size {self.image_size} not divisible by patch "
                f"{self.patch_size}"
            )
        if self.depth < 1:
            raise ContractViolation("depth must be at least 1")
        if self.heads < 1 or self.embed_dim % self.heads != 0:
            raise ContractViolation(
                f"embed dim {self.embed_dim} not divisible by {self.heads} heads"
            )
        if self.ffn_mult < 1:
            raise ContractViolation("ffn_mult must be at least 1")
        fs = tuple(self.fs_layers)
        if list(fs) != sorted(set(fs)):
            raise ContractViolation("fs_layers must be strictly ascending")
        if fs and (fs[0] < 1 or fs[-1] > self.depth):
            raise ContractViolation(
                f"fs_layers {fs} outside 1..{self.depth}"
            )
        if not (0.0 < self.rho <= 1.0):
            raise ContractViolation(f"rho must be in (0, 1], got {self.rho}")
        if self.vocab_size < 2:
            raise ContractViolation("vocab needs padding plus at least one word")
        if self.max_text_len < 1:
            raise ContractViolation("max_text_len must be positive")
        if self.head_hidden < 1:
            raise ContractViolation("head_hidden must be positive")
        if self.lambda_l1 < 0 or self.lambda_giou < 0:
            raise ContractViolation("loss weights must be non-negative")
        if self.precision not in ("single", "double"):
            raise ContractViolation(f"unknown precision {self.precision!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_features(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def dtype(self):
        return ad.SINGLE if self.precision == "single" else ad.DOUBLE


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale default used by the CLI and the training benchmark."""
    return replace(ModelConfig(), **overrides) if overrides else ModelConfig()


def tiny_config(**overrides) -> ModelConfig:
    """Smallest end-to-end configuration, used for full gradient checking.

    Double precision and a deliberately small head keep a whole-model
    central-difference sweep under a couple of minutes.
    """
    cfg = ModelConfig(
        image_size=12,
        patch_size=4,
        embed_dim=16,
        depth=2,
        heads=2,
        ffn_mult=4,
        fs_layers=(2,),
        rho=0.7,
        vocab_size=8,
        max_text_len=4,
        head_hidden=16,
        seed=0,
        precision="double",
    )
    return replace(cfg, **overrides) if overrides else cfg


def vitb_config(**overrides) -> ModelConfig:
    """Dimensions of the reference large backbone, used by the cost model."""
    cfg = ModelConfig(
        image_size=384,
        patch_size=16,
        embed_dim=768,
        depth=12,
        heads=12,
        ffn_mult=4,
        fs_layers=(4, 7, 10),
        rho=0.7,
        vocab_size=1000,
        max_text_len=77,
        head_hidden=256,
    )
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class ModelParams:
    patch_proj: LinearParams
    patch_pos: Tensor  # (n_patches, embed_dim)
    text_table: Tensor  # (vocab_size, embed_dim)
    text_pos: Tensor  # (max_text_len, embed_dim)
    register: Tensor  # (1, embed_dim)
    blocks: list[BlockParams]
    final_gamma: Tensor
    final_beta: Tensor
    head1: LinearParams
    head2: LinearParams
    head3: LinearParams

    def named(self) -> Iterator[tuple[str, Tensor]]:
        """Stable (name, tensor) iteration; order defines checkpoint layout."""
        yield "patch_proj.weight", self.patch_proj.weight
        yield "patch_proj.bias", self.patch_proj.bias
        yield "patch_pos", self.patch_pos
        yield "text_table", self.text_table
        yield "text_pos", self.text_pos
        yield "register", self.register
        for i, blk in enumerate(self.blocks, start=1):
            prefix = f"block{i}."
            yield prefix + "norm1_gamma", blk.norm1_gamma
            yield prefix + "norm1_beta", blk.norm1_beta
            yield prefix + "q.weight", blk.q.weight
            yield prefix + "q.bias", blk.q.bias
            yield prefix + "k.weight", blk.k.weight
            yield prefix + "k.bias", blk.k.bias
            yield prefix + "v.weight", blk.v.weight
            yield prefix + "v.bias", blk.v.bias
            yield prefix + "o.weight", blk.o.weight
            yield prefix + "o.bias", blk.o.bias
            yield prefix + "norm2_gamma", blk.norm2_gamma
            yield prefix + "norm2_beta", blk.norm2_beta
            yield prefix + "ffn1.weight", blk.ffn1.weight
            yield prefix + "ffn1.bias", blk.ffn1.bias
            yield prefix + "ffn2.weight", blk.ffn2.weight
            yield prefix + "ffn2.bias", blk.ffn2.bias
        yield "final_gamma", self.final_gamma
        yield "final_beta", self.final_beta
        yield "head1.weight", self.head1.weight
        yield "head1.bias", self.head1.bias
        yield "head2.weight", self.head2.weight
        yield "head2.bias", self.head2.bias
        yield "head3.weight", self.head3.weight
        yield "head3.bias", self.head3.bias

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self.named())

    def parameter_count(self) -> int:
        return sum(t.data.size for _, t in self.named())


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def init_params(config: ModelConfig, seed: int | None = None) -> ModelParams:
    """Fresh parameters; every tensor gets its own derived substream."""
    master = config.seed if seed is None else seed
    dt = config.dtype
    d = config.embed_dim

    def table(index: int, rows: int, cols: int) -> Tensor:
        # rows at ~unit norm, the scale layernorm hands to the blocks
        std = 1.0 / math.sqrt(cols)
        flat = normal_field(derive_seed(master, index), rows * cols) * std
        return Tensor(flat.reshape(rows, cols).astype(dt))

    def grid_pos_table() -> Tensor:
        # learnable, but started as Fourier features of the patch centre so
        # locations are linearly decodable before any training happens;
        # random rows here leave box regression with nothing to read out
        g = config.grid
        centers = (np.arange(g, dtype=np.float64) + 0.5) / g
        v, u = np.meshgrid(centers, centers, indexing="ij")
        uv = np.stack([u.reshape(-1), v.reshape(-1)], axis=1)
        quarter = config.embed_dim // 4
        n_freq = min(quarter, 1 + int(math.log2(max(2, g))))
        # half a cycle up to the grid Nyquist rate; cos of the lowest one is
        # monotone across the frame, giving absolute position directly
        freqs = 0.5 * 2.0 ** np.arange(n_freq, dtype=np.float64)
        ang = 2.0 * np.pi * uv[:, :, None] * freqs[None, None, :]
        feats = np.concatenate(
            [np.sin(ang).reshape(g * g, -1), np.cos(ang).reshape(g * g, -1)],
            axis=1,
        )
        if feats.shape[1] < config.embed_dim:
            pad = normal_field(
                derive_seed(master, 1), g * g * (config.embed_dim - feats.shape[1])
            ).reshape(g * g, -1) / math.sqrt(config.embed_dim)
            feats = np.concatenate([feats, pad], axis=1)
        return Tensor((feats / math.sqrt(config.embed_dim)).astype(dt))

    blocks = [
        init_block(d, config.ffn_mult, derive_seed(master, 100 + i), dtype=dt)
        for i in range(config.depth)
    ]
    final_gamma, final_beta = init_norm_pair(d, dt)
    head3 = init_linear(config.head_hidden, 4, derive_seed(master, 7), dtype=dt)
    # Zero readout weights plus a generic prior box (centered, smallish) in
    # the bias: every input starts at exactly the prior, so there is no
    # incoherent output variance for early updates to suppress, and the
    # readout grows only along directions correlated with the box error.
    # With a random readout the cheapest first move is the opposite one:
    # erase input sensitivity, which also starves the backbone of gradient.
    head3.weight.data[:] = 0.0
    head3.bias.data[:] = np.array(
        [0.0, 0.0, _logit(0.3), _logit(0.3)], dtype=dt
    )
    return ModelParams(
        patch_proj=init_linear(config.patch_features, d, derive_seed(master, 0), dtype=dt),
        patch_pos=grid_pos_table(),
        text_table=table(2, config.vocab_size, d),
        text_pos=table(3, config.max_text_len, d),
        register=table(4, 1, d),
        blocks=blocks,
        final_gamma=final_gamma,
        final_beta=final_beta,
        head1=init_linear(d, config.head_hidden, derive_seed(master, 5), dtype=dt),
        head2=init_linear(config.head_hidden, config.head_hidden, derive_seed(master, 6), dtype=dt),
        head3=head3,
    )


def extract_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W, 3) image to (n_patches, P*P*3) rows.

    Patches are ordered row-major over the grid (top-left first, scanning
    across then down); within a patch, pixels flatten row-major over
    (y, x, channel).
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractViolation(f"image must be (H, W, 3), got {image.shape}")
    h, w, _ = image.shape
    if h != w or h % patch_size != 0:
        raise ContractViolation(
            f"image {h}x{w} not square or not divisible by patch {patch_size}"
        )
    g = h // patch_size
    tiled = image.reshape(g, patch_size, g, patch_size, 3)
    return np.ascontiguousarray(tiled.transpose(0, 2, 1, 3, 4)).reshape(
        g * g, patch_size * patch_size * 3
    )


def patch_embed(patch_rows: np.ndarray, params: ModelParams,
                config: ModelConfig) -> Tensor:
    if patch_rows.shape != (config.n_patches, config.patch_features):
        raise ContractViolation(
            f"patch rows {patch_rows.shape}, expected "
            f"({config.n_patches}, {config.patch_features})"
        )
    x = ad.constant(patch_rows, dtype=config.dtype)
    return ad.add(linear(x, params.patch_proj), params.patch_pos)


def text_embed(token_ids: list[int], params: ModelParams,
               config: ModelConfig) -> tuple[Tensor, np.ndarray]:
    """Embed a token id list, padding with id 0 up to max_text_len.

    Ids beyond max_text_len are truncated.  Returns the embedded rows and a
    boolean mask that is False on the padded tail.
    """
    ids = list(token_ids)[: config.max_text_len]
    if not ids:
        raise ContractViolation("text must contain at least one token")
    for t in ids:
        if not (0 <= t < config.vocab_size):
            raise ContractViolation(
                f"token id {t} outside vocabulary of {config.vocab_size}"
            )
    n_pad = config.max_text_len - len(ids)
    valid = np.array([True] * len(ids) + [False] * n_pad)
    padded = np.array(ids + [0] * n_pad, dtype=np.int64)
    rows = ad.gather_rows(params.text_table, padded)
    return ad.add(rows, params.text_pos), valid


def assemble_sequence(visual: Tensor, text: Tensor, text_valid: np.ndarray,
                      params: ModelParams, config: ModelConfig) -> TokenSequence:
    seg = Segments(
        visual_count=visual.data.shape[0], language_count=text.data.shape[0]
    )
    data = ad.concat_rows([params.register, visual, text])
    return TokenSequence(
        data=data,
        segments=seg,
        text_valid=text_valid,
        patch_map=np.arange(seg.visual_count, dtype=np.int64),
    )


def backbone_forward(seq: TokenSequence, params: ModelParams,
                     config: ModelConfig) -> tuple[TokenSequence, SelectionTrace]:
    """Run all blocks, pruning visual rows mid-block at fs_layers.

    The trace records every pruning stage and, for each block, the sequence
    length seen by its attention half and by its feed-forward half.
    """
    trace = SelectionTrace()
    fs = set(config.fs_layers)
    eps = config.layernorm_eps
    for i, blk in enumerate(params.blocks, start=1):
        n_attn = seq.segments.total
        if i in fs:
            normed = ad.layernorm_rows(seq.data, blk.norm1_gamma, blk.norm1_beta, eps)
            attended, logit_data = mhsa_forward(normed, blk, config.heads, seq.key_valid)
            h = TokenSequence(
                data=ad.add(seq.data, attended),
                segments=seq.segments,
                text_valid=seq.text_valid,
                patch_map=seq.patch_map,
            )
            scores = visual_language_scores(logit_data, h.segments, h.text_valid)
            kept = top_rho_indices(scores, config.rho)
            h = apply_selection(h, kept, scores, i, trace)
            normed2 = ad.layernorm_rows(h.data, blk.norm2_gamma, blk.norm2_beta, eps)
            seq = TokenSequence(
                data=ad.add(h.data, ffn_forward(normed2, blk)),
                segments=h.segments,
                text_valid=h.text_valid,
                patch_map=h.patch_map,
            )
        else:
            y, _ = block_forward_dense(seq.data, blk, config.heads, seq.key_valid, eps)
            seq = TokenSequence(
                data=y,
                segments=seq.segments,
                text_valid=seq.text_valid,
                patch_map=seq.patch_map,
            )
        trace.block_lengths.append((n_attn, seq.segments.total))
    final = ad.layernorm_rows(seq.data, params.final_gamma, params.final_beta, eps)
    out = TokenSequence(
        data=final,
        segments=seq.segments,
        text_valid=seq.text_valid,
        patch_map=seq.patch_map,
    )
    return out, trace


def head_forward(register_row: Tensor, params: ModelParams) -> Tensor:
    """Register embedding to a (1, 4) center-format box via a 3-layer MLP."""
    if register_row.data.ndim != 2 or register_row.data.shape[0] != 1:
        raise ContractViolation(
            f"head expects a single row, got {register_row.data.shape}"
        )
    h = ad.relu(linear(register_row, params.head1))
    h = ad.relu(linear(h, params.head2))
    return ad.sigmoid(linear(h, params.head3))


def model_forward(patch_rows: np.ndarray, token_ids: list[int],
                  params: ModelParams,
                  config: ModelConfig) -> tuple[Tensor, SelectionTrace]:
    """Full forward pass from precomputed patch rows to a (1, 4) box tensor."""
    visual = patch_embed(patch_rows, params, config)
    text, valid = text_embed(token_ids, params, config)
    seq = assemble_sequence(visual, text, valid, params, config)
    encoded, trace = backbone_forward(seq, params, config)
    register_row = ad.slice_rows(encoded.data, 0, 1)
    return head_forward(register_row, params), trace


def predict(image: np.ndarray, token_ids: list[int], params: ModelParams,
            config: ModelConfig):
    """Forward pass from a raw image; returns (BBox, SelectionTrace)."""
    from .objectives import box_from_tensor

    rows = extract_patches(image, config.patch_size)
    box_t, trace = model_forward(rows, token_ids, params, config)
    return box_from_tensor(box_t), trace
