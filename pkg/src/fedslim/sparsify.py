"""Channel pruning driven by batch-norm scale magnitudes.

Channels are ranked globally by |gamma| across all prunable BN layers; the
lowest ceil(s * n) of n prunable channels are pruned. Pruning is logical:
the dense parameter block keeps its shape and masked positions are set to
exact zeros. A pruned channel's expansion covers its gamma and beta, the
producing conv filter (output slice), and the consuming layer's input slices.

The first conv block and the detection head are never prunable: the input
and output dimensionality of the model must survive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, absolute, add, mul, tensor_sum
from .model import ModelParams

SPARSITY_MIN = 0.01
SPARSITY_MAX = 0.99

# ceil with a one-ulp guard so decimal rates like 0.2 * 160 stay at 32
_CEIL_GUARD = 1e-9


def validate_sparsity(s: float) -> float:
    if not SPARSITY_MIN <= s <= SPARSITY_MAX:
        raise ValueError(f"sparsity rate must lie in [{SPARSITY_MIN}, {SPARSITY_MAX}], got {s}")
    return float(s)


def pruned_channel_count(s: float, n: int) -> int:
    return math.ceil(s * n - _CEIL_GUARD)


def prunable_blocks(params: ModelParams) -> list[int]:
    """Indices of blocks whose BN channels may be pruned (all but the first)."""
    return list(range(1, len(params.blocks)))


def prunable_channel_total(params: ModelParams) -> int:
    return sum(params.blocks[i][1].channels for i in prunable_blocks(params))


def _ranked_channels(params: ModelParams) -> list[tuple[float, int, int]]:
    """All prunable channels as (|gamma|, block, channel), ascending, stable."""
    ranked = []
    for i in prunable_blocks(params):
        gammas = np.abs(params.blocks[i][1].gamma.data)
        for c, g in enumerate(gammas):
            ranked.append((float(g), i, c))
    ranked.sort(key=lambda item: (item[0], item[1], item[2]))
    return ranked


@dataclass
class SparseMask:
    """Per-block channel keep bits (1 = keep, 0 = pruned)."""

    channel_bits: dict[int, np.ndarray]

    def zero_channel_count(self) -> int:
        return int(sum((bits == 0).sum() for bits in self.channel_bits.values()))

    def total_channel_count(self) -> int:
        return int(sum(bits.size for bits in self.channel_bits.values()))

    @staticmethod
    def all_ones(params: ModelParams) -> "SparseMask":
        return SparseMask(
            channel_bits={
                i: np.ones(params.blocks[i][1].channels) for i in prunable_blocks(params)
            }
        )


def l1_penalty(params: ModelParams, lam: float) -> Tensor:
    """lam * sum(|gamma|) over prunable BN layers, as a differentiable node."""
    if lam < 0:
        raise ValueError(f"l1 penalty weight must be nonnegative, got {lam}")
    total = Tensor(0.0)
    for i in prunable_blocks(params):
        total = add(total, tensor_sum(absolute(params.blocks[i][1].gamma)))
    return mul(total, lam)


def global_threshold(params: ModelParams, s: float) -> float:
    """The k-th smallest |gamma| where k = ceil(s * n) over n prunable channels."""
    s = validate_sparsity(s)
    ranked = _ranked_channels(params)
    n = len(ranked)
    if n < 1:
        raise ValueError("model has no prunable channels")
    k = pruned_channel_count(s, n)
    if k >= n:
        raise ValueError(f"sparsity {s} would prune all {n} prunable channels")
    return ranked[k - 1][0]


def build_mask(params: ModelParams, threshold: float, s: float) -> SparseMask:
    """Keep bits with exactly ceil(s * n) zeros, lowest |gamma| first."""
    s = validate_sparsity(s)
    ranked = _ranked_channels(params)
    n = len(ranked)
    k = pruned_channel_count(s, n)
    if k >= n:
        raise ValueError(f"sparsity {s} would prune all {n} prunable channels")
    if ranked[k - 1][0] != threshold:
        raise ValueError(
            f"threshold {threshold} is inconsistent with these parameters "
            f"(expected {ranked[k - 1][0]} at rank {k})"
        )
    mask = SparseMask.all_ones(params)
    for _, block, channel in ranked[:k]:
        mask.channel_bits[block][channel] = 0.0
    return mask


def _check_mask_fits(params: ModelParams, mask: SparseMask) -> None:
    expected = set(prunable_blocks(params))
    if set(mask.channel_bits) != expected:
        raise ValueError(
            f"mask covers blocks {sorted(mask.channel_bits)}, model prunes {sorted(expected)}"
        )
    for i, bits in mask.channel_bits.items():
        width = params.blocks[i][1].channels
        if bits.shape != (width,):
            raise ValueError(f"mask for block {i} has {bits.shape[0]} bits, layer has {width}")


def weight_masks(params: ModelParams, mask: SparseMask) -> dict[str, np.ndarray]:
    """Expand channel bits into per-array keep masks over trainable tensors."""
    _check_mask_fits(params, mask)
    keep = {name: np.ones_like(t.data) for name, t in params.trainable_tensors()}
    last = len(params.blocks) - 1
    for i, bits in mask.channel_bits.items():
        keep[f"block{i}.bn.gamma"] *= bits
        keep[f"block{i}.bn.beta"] *= bits
        keep[f"block{i}.conv.kernel"] *= bits[:, None, None, None]
        downstream = "head.kernel" if i == last else f"block{i + 1}.conv.kernel"
        keep[downstream] *= bits[None, :, None, None]
    return keep


def apply_mask(params: ModelParams, mask: SparseMask) -> ModelParams:
    """Return a copy with masked positions set to exactly 0.0; shapes unchanged."""
    keep = weight_masks(params, mask)
    out = params.clone()
    for name, t in out.trainable_tensors():
        t.data[keep[name] == 0] = 0.0
    return out


def prune_report(mask: SparseMask, params: ModelParams) -> tuple[int, int]:
    """(pruned_weight_count, total_weight_count) over the trainable tensors."""
    keep = weight_masks(params, mask)
    pruned = int(sum((m == 0).sum() for m in keep.values()))
    total = params.parameter_count()
    return pruned, total
