"""Transformer building blocks and the AdamW optimiser.

Everything operates on rank-2 tensors of shape (tokens, features) built from
the autodiff primitives.  Multi-head attention also hands back its scaled,
masked pre-softmax logits as a plain numpy array: that is the read-only
signal later used to rank visual tokens, and gradients never flow through it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_VALUE, ContractViolation, Tensor
from .rng import derive_seed, normal_field


@dataclass
class LinearParams:
    weight: Tensor  # (d_in, d_out)
    bias: Tensor  # (1, d_out)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    return ad.affine(x, p.weight, p.bias)


def init_linear(d_in: int, d_out: int, seed: int, std: float | None = None,
                dtype=ad.SINGLE) -> LinearParams:
    """Normal init with zero bias.

    The default std scales with the layer sizes (Glorot).  A fixed small std
    at narrow widths starves the residual stream: every attention update is
    attenuated by two successive weight scales, and at that point fitting the
    training targets by suppressing input variance is cheaper than decoding
    the inputs, so the model settles on a constant predictor.
    """
    if std is None:
        std = math.sqrt(2.0 / (d_in + d_out))
    w = normal_field(seed, d_in * d_out).reshape(d_in, d_out) * std
    return LinearParams(
        weight=Tensor(w.astype(dtype)),
        bias=Tensor(np.zeros((1, d_out), dtype=dtype)),
    )


def init_norm_pair(d: int, dtype=ad.SINGLE) -> tuple[Tensor, Tensor]:
    return (
        Tensor(np.ones((1, d), dtype=dtype)),
        Tensor(np.zeros((1, d), dtype=dtype)),
    )


@dataclass
class BlockParams:
    """One pre-norm transformer block: norm, attention, norm, feed-forward."""

    norm1_gamma: Tensor
    norm1_beta: Tensor
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams
    norm2_gamma: Tensor
    norm2_beta: Tensor
    ffn1: LinearParams
    ffn2: LinearParams


def init_block(d: int, ffn_mult: int, seed: int, dtype=ad.SINGLE) -> BlockParams:
    n1g, n1b = init_norm_pair(d, dtype)
    n2g, n2b = init_norm_pair(d, dtype)
    return BlockParams(
        norm1_gamma=n1g,
        norm1_beta=n1b,
        q=init_linear(d, d, derive_seed(seed, 0), dtype=dtype),
        k=init_linear(d, d, derive_seed(seed, 1), dtype=dtype),
        v=init_linear(d, d, derive_seed(seed, 2), dtype=dtype),
        o=init_linear(d, d, derive_seed(seed, 3), dtype=dtype),
        norm2_gamma=n2g,
        norm2_beta=n2b,
        ffn1=init_linear(d, ffn_mult * d, derive_seed(seed, 4), dtype=dtype),
        ffn2=init_linear(ffn_mult * d, d, derive_seed(seed, 5), dtype=dtype),
    )


def mhsa_forward(x: Tensor, p: BlockParams, heads: int,
                 key_valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Multi-head self-attention over all tokens.

    key_valid is a boolean vector over tokens; invalid keys (text padding)
    receive an additive MASK_VALUE before the softmax, which drives their
    attention weight to exactly zero.  Returns the attended output and the
    scaled, masked logits with shape (heads, tokens, tokens), detached.
    """
    n, d = x.data.shape
    if d % heads != 0:
        raise ContractViolation(f"feature dim {d} not divisible by {heads} heads")
    key_valid = np.asarray(key_valid, dtype=bool)
    if key_valid.shape != (n,):
        raise ContractViolation(f"key_valid shape {key_valid.shape} for {n} tokens")
    if not key_valid.any():
        raise ContractViolation("attention with every key masked")
    head_dim = d // heads
    inv_sqrt = 1.0 / math.sqrt(head_dim)

    mask_row = np.zeros((1, n), dtype=x.data.dtype)
    mask_row[0, ~key_valid] = MASK_VALUE
    mask = ad.constant(mask_row, dtype=x.data.dtype)

    q = linear(x, p.q)
    k = linear(x, p.k)
    v = linear(x, p.v)

    contexts = []
    logit_data = np.empty((heads, n, n), dtype=x.data.dtype)
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = ad.slice_cols(q, lo, hi)
        kh = ad.slice_cols(k, lo, hi)
        vh = ad.slice_cols(v, lo, hi)
        logits = ad.add_row(ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt), mask)
        logit_data[h] = logits.data
        attn = ad.softmax_rows(logits)
        contexts.append(ad.matmul(attn, vh))
    merged = contexts[0] if heads == 1 else ad.concat_cols(contexts)
    return linear(merged, p.o), logit_data


def ffn_forward(x: Tensor, p: BlockParams) -> Tensor:
    return linear(ad.gelu(linear(x, p.ffn1)), p.ffn2)


def block_forward_dense(x: Tensor, p: BlockParams, heads: int,
                        key_valid: np.ndarray,
                        eps: float = 1e-5) -> tuple[Tensor, np.ndarray]:
    """Pre-norm block: x + MHSA(LN(x)), then h + FFN(LN(h))."""
    attended, logit_data = mhsa_forward(
        ad.layernorm_rows(x, p.norm1_gamma, p.norm1_beta, eps), p, heads, key_valid
    )
    h = ad.add(x, attended)
    y = ad.add(h, ffn_forward(ad.layernorm_rows(h, p.norm2_gamma, p.norm2_beta, eps), p))
    return y, logit_data


@dataclass
class AdamW:
    """AdamW with decoupled weight decay and bias correction.

    One step() call is one optimiser step across the full parameter dict;
    the step counter is shared by all parameters.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        missing = set(params) - set(grads)
        if missing:
            raise ContractViolation(f"gradients missing for {sorted(missing)[:3]}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, tensor in params.items():
            g = grads[name]
            if g.shape != tensor.data.shape:
                raise ContractViolation(
                    f"gradient shape {g.shape} vs parameter {tensor.data.shape} "
                    f"for {name}"
                )
            if not np.isfinite(g).all():
                raise ad.NonFiniteValue(f"non-finite gradient for {name}")
            if name not in self.m:
                self.m[name] = np.zeros_like(tensor.data)
                self.v[name] = np.zeros_like(tensor.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p = tensor.data
            p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if not np.isfinite(p).all():
                raise ad.NonFiniteValue(f"non-finite parameter after step: {name}")
