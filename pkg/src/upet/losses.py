"""Multi-task training objective: cross-entropy plus masked, voxel-averaged
L1 with deep supervision on the coarser PET outputs.

Batches may mix paired and unpaired studies; the L1 terms average over the
voxels of the paired subset only and vanish when nothing is paired.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .model import ModelOutputs, UPetConfig
from .tensor import Tensor


@dataclass
class LossBreakdown:
    """Scalar values of each loss component plus the differentiable total."""

    ce: float
    l1_main: float
    l1_aux: list[float]
    total: float
    paired_count: int
    total_tensor: Tensor = None


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch, stable form."""
    return ops.cross_entropy_logits(logits, labels)


def masked_l1(pred: Tensor, target: Tensor, mask) -> tuple[Tensor | None, int]:
    """Mean absolute difference over all voxels of masked-in samples.

    Returns ``(scalar_tensor, paired_count)``; the tensor is None when the
    mask selects nothing, in which case the component is 0 and contributes
    no gradient.
    """
    if pred.shape != target.shape:
        raise ValueError(f"masked_l1: shapes differ: {pred.shape} vs {target.shape}")
    flags = np.asarray(mask, dtype=bool)
    if flags.shape != (pred.shape[0],):
        raise ValueError(f"masked_l1: mask shape {flags.shape} != ({pred.shape[0]},)")
    idx = np.flatnonzero(flags)
    if idx.size == 0:
        return None, 0
    if idx.size == pred.shape[0]:
        diff = ops.sub(pred, target)
    else:
        diff = ops.sub(ops.select_batch(pred, idx), ops.select_batch(target, idx))
    return ops.mean(ops.absolute(diff)), int(idx.size)


def _pool_target(target: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool an N,1,D,H,W target down by an integer factor."""
    n, c, d, h, w = target.shape
    v = target.reshape(n, c, d // factor, factor, h // factor, factor, w // factor, factor)
    return v.mean(axis=(3, 5, 7), dtype=target.dtype)


def combined_loss(outputs: ModelOutputs, labels, pet_targets: Tensor | None,
                  pet_mask, config: UPetConfig) -> LossBreakdown:
    """Compose total = ce + lambda_l1 * (l1_main + sum_l w_l * l1_aux[l]).

    Auxiliary targets are the full-resolution targets average-pooled to each
    auxiliary output's resolution.  Without a PET head (or without any paired
    sample) the total is the cross-entropy term itself.
    """
    if config.aggregate_probabilities:
        ce = ops.nll_of_probabilities(outputs.class_logits, labels)
    else:
        ce = cross_entropy(outputs.class_logits, labels)

    flags = np.asarray(pet_mask, dtype=bool)
    if flags.any() and pet_targets is None:
        raise ValueError("pet_mask selects samples but pet_targets is missing")

    if not config.use_pet_head or outputs.pet_pred is None or not flags.any():
        return LossBreakdown(ce=ce.item(), l1_main=0.0,
                             l1_aux=[0.0] * (config.levels - 1),
                             total=ce.item(), paired_count=0, total_tensor=ce)

    l1_main, paired = masked_l1(outputs.pet_pred, pet_targets, flags)
    weighted = l1_main
    aux_values: list[float] = []
    for i, aux_pred in enumerate(outputs.aux_pet_preds):
        scale_l = i + 1
        pooled = Tensor(_pool_target(pet_targets.data, 2 ** scale_l),
                        dtype=pet_targets.dtype)
        l1_aux, _ = masked_l1(aux_pred, pooled, flags)
        aux_values.append(l1_aux.item())
        weighted = ops.add(weighted, ops.scale(l1_aux, config.deep_supervision_weights[i]))
    total = ops.add(ce, ops.scale(weighted, config.lambda_l1))
    return LossBreakdown(ce=ce.item(), l1_main=l1_main.item(), l1_aux=aux_values,
                         total=total.item(), paired_count=paired, total_tensor=total)
