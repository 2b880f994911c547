"""Supervised Dice loss, bidirectional KL cross-distillation, ramp-up, and the total objective.

Total objective: ``total = sup + g(t) * (cross_distill + lambda * feature_consistency)``
with the ramp ``g`` growing from ~0 to 1 so the unsupervised terms only kick
in once the students produce non-random predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from segcohort.models import StudentOutput


@dataclass
class LossBundle:
    """All components of one objective evaluation, kept for logging."""

    sup: float
    cross_distill: float
    feature_consistency: float
    ramp: float
    lambda_feature: float
    total: float


def kl_divergence(target_logits: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """Pixel-mean KL(softmax(target) || softmax(student)) in nats.

    The target distribution is detached: gradients reach only the student
    logits, which is what makes each direction a distillation term rather
    than half of a symmetric divergence.
    """
    if target_logits.shape != student_logits.shape:
        raise ValueError(
            f"logit shapes differ: {tuple(target_logits.shape)} vs {tuple(student_logits.shape)}"
        )
    target_log_probs = F.log_softmax(target_logits.detach(), dim=1)
    student_log_probs = F.log_softmax(student_logits, dim=1)
    per_pixel = (target_log_probs.exp() * (target_log_probs - student_log_probs)).sum(dim=1)
    return per_pixel.mean()


def cross_distillation_loss(
    out_a: StudentOutput,
    out_b: StudentOutput,
    normalizer: str = "batch",
    labeled_set_size: int | None = None,
) -> torch.Tensor:
    """Bidirectional KL between the two students' pixel-wise predictions.

    Each student serves as the detached teacher for the other direction, so
    the value is symmetric under swapping the arguments while the gradients
    are not.  ``normalizer="batch"`` is the pixel mean; ``"labeled_set"``
    rescales the batch sum by the labeled-set size instead.
    """
    loss = kl_divergence(out_a.logits, out_b.logits) + kl_divergence(out_b.logits, out_a.logits)
    if normalizer == "batch":
        return loss
    if normalizer == "labeled_set":
        if not labeled_set_size or labeled_set_size < 1:
            raise ValueError("labeled_set normalization requires a positive labeled_set_size")
        batch = out_a.logits.shape[0]
        return loss * (batch / labeled_set_size)
    raise ValueError(f"unknown distillation normalizer {normalizer!r}")


def dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice loss against integer ground truth, averaged over the batch.

    Per image, dice is computed per class present in the target and averaged;
    absent classes are excluded.  The smoothing term keeps the value in
    [0, 1] and the gradients finite on tiny images.
    """
    b, k, h, w = logits.shape
    if target.shape != (b, h, w):
        raise ValueError(f"target {tuple(target.shape)} does not match logits {tuple(logits.shape)}")
    if target.min() < 0 or target.max() >= k:
        raise ValueError(f"target values must lie in [0, {k}), got [{target.min()}, {target.max()}]")
    probs = F.softmax(logits, dim=1)
    onehot = F.one_hot(target, k).permute(0, 3, 1, 2).to(logits.dtype)
    intersect = (probs * onehot).sum(dim=(2, 3))
    prob_sum = probs.sum(dim=(2, 3))
    target_sum = onehot.sum(dim=(2, 3))
    dice = (2.0 * intersect + smooth) / (prob_sum + target_sum + smooth)
    present = target_sum > 0
    per_image = (dice * present).sum(dim=1) / present.sum(dim=1)
    return (1.0 - per_image).mean()


def supervised_loss(out_a: StudentOutput, out_b: StudentOutput, target: torch.Tensor) -> torch.Tensor:
    """Sum of both students' Dice losses on the labeled batch."""
    return dice_loss(out_a.logits, target) + dice_loss(out_b.logits, target)


def rampup(t: int, ramp_iterations: int) -> float:
    """Sigmoid-shaped ramp exp(-5 * (1 - t/T)^2), clamped to 1 after T iterations."""
    if t < 0:
        raise ValueError(f"iteration must be non-negative, got {t}")
    if ramp_iterations <= 0:
        return 1.0
    phase = 1.0 - min(t, ramp_iterations) / ramp_iterations
    return math.exp(-5.0 * phase * phase)


def total_loss(
    sup: torch.Tensor,
    cross_distill: torch.Tensor,
    feature_consistency: torch.Tensor,
    ramp: float,
    lambda_feature: float = 1.0,
) -> tuple[torch.Tensor, LossBundle]:
    """Combine the components into the training objective.

    Returns the differentiable total plus a float bundle whose ``total`` is
    recomputed from the logged components, so logs decompose bit-exactly.
    """
    parts = {}
    for name, value in (
        ("sup", sup),
        ("cross_distill", cross_distill),
        ("feature_consistency", feature_consistency),
    ):
        if not torch.isfinite(value):
            raise FloatingPointError(f"loss component {name!r} is not finite: {value}")
        parts[name] = value.detach().item()
    total = sup + ramp * (cross_distill + lambda_feature * feature_consistency)
    bundle = LossBundle(
        sup=parts["sup"],
        cross_distill=parts["cross_distill"],
        feature_consistency=parts["feature_consistency"],
        ramp=float(ramp),
        lambda_feature=float(lambda_feature),
        total=parts["sup"] + ramp * (parts["cross_distill"] + lambda_feature * parts["feature_consistency"]),
    )
    return total, bundle
