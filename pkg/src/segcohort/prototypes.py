"""Prototype pooling and the cross feature-consistency loss.

Each student's last-stage features are masked by the *other* student's
pseudo labels (downsampled to the feature grid), pooled into per-class mean
prototypes, and broadcast back per pixel.  The per-pixel cosine similarity
between a feature and its class prototype forms a similarity map; the loss
is the MSE between the two students' maps.  Cosine makes the maps invariant
to each student's feature magnitude, which is what lets heterogeneous
backbones be compared at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from segcohort.models import StudentOutput

COSINE_EPS = 1e-8


@dataclass
class ClassPrototypes:
    """Per-image class mean features.

    vectors: [B, K, D], zero rows for classes absent from the label map.
    counts:  [B, K] pixel counts per class; a prototype is defined iff > 0.
    With ``scope="batch"`` the means are pooled over the whole batch and
    replicated along B so lookups stay uniform.
    """

    vectors: torch.Tensor
    counts: torch.Tensor


def downsample_labels(labels: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Nearest-neighbour label downsampling: out[i, j] = in[floor(i*H/h), floor(j*W/w)]."""
    b, in_h, in_w = labels.shape
    if height < 1 or width < 1:
        raise ValueError(f"target size {height}x{width} must be positive")
    if height > in_h or width > in_w:
        raise ValueError(f"target {height}x{width} exceeds source {in_h}x{in_w}")
    rows = (torch.arange(height, device=labels.device) * in_h) // height
    cols = (torch.arange(width, device=labels.device) * in_w) // width
    return labels[:, rows][:, :, cols]


def _downsample_map(values: torch.Tensor, height: int, width: int) -> torch.Tensor:
    # same index formula as downsample_labels, for float-valued maps
    b, in_h, in_w = values.shape
    rows = (torch.arange(height, device=values.device) * in_h) // height
    cols = (torch.arange(width, device=values.device) * in_w) // width
    return values[:, rows][:, :, cols]


def class_prototypes(
    features: torch.Tensor,
    labels: torch.Tensor,
    num_classes: int | None = None,
    scope: str = "image",
) -> ClassPrototypes:
    """Mean feature vector per class from a label map aligned with the feature grid.

    Differentiable w.r.t. ``features`` (prototypes are plain means); labels
    are integers and act as a fixed mask.
    """
    b, d, h, w = features.shape
    if labels.shape != (b, h, w):
        raise ValueError(f"labels {tuple(labels.shape)} do not match feature grid {(b, h, w)}")
    if scope not in ("image", "batch"):
        raise ValueError(f"unknown prototype scope {scope!r}")
    k = int(num_classes) if num_classes is not None else int(labels.max().item()) + 1
    flat = features.reshape(b, d, h * w)
    onehot = F.one_hot(labels.reshape(b, h * w), k).to(features.dtype)  # [B, N, K]
    sums = torch.bmm(flat, onehot)  # [B, D, K]
    counts = onehot.sum(dim=1)  # [B, K]
    if scope == "batch":
        sums = sums.sum(dim=0, keepdim=True).expand(b, -1, -1)
        counts = counts.sum(dim=0, keepdim=True).expand(b, -1)
    vectors = sums / counts.clamp(min=1).unsqueeze(1)  # absent classes stay zero
    return ClassPrototypes(vectors=vectors.permute(0, 2, 1), counts=counts)


def prototype_similarity_map(
    features: torch.Tensor,
    labels: torch.Tensor,
    protos: ClassPrototypes,
    eps: float = COSINE_EPS,
) -> torch.Tensor:
    """Cosine similarity between each pixel's feature and its class prototype.

    Returns [B, h, w] values in [-1, 1].  The denominator carries ``eps`` so
    zero-norm features yield 0 instead of NaN.
    """
    b, d, h, w = features.shape
    flat_labels = labels.reshape(b, h * w)
    present = protos.counts.gather(1, flat_labels)
    if (present < 1).any():
        missing = int(flat_labels[present < 1][0].item())
        raise RuntimeError(f"no prototype for class {missing} referenced by the label map")
    pixel_protos = protos.vectors.gather(
        1, flat_labels.unsqueeze(-1).expand(b, h * w, protos.vectors.shape[-1])
    )  # [B, N, D]
    pixel_feats = features.reshape(b, d, h * w).transpose(1, 2)
    dots = (pixel_feats * pixel_protos).sum(dim=-1)
    norms = pixel_feats.norm(dim=-1) * pixel_protos.norm(dim=-1)
    return (dots / (norms + eps)).reshape(b, h, w)


def similarity_mse(map_a: torch.Tensor, map_b: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between two similarity maps of equal shape."""
    if map_a.shape != map_b.shape:
        raise ValueError(f"similarity maps differ in shape: {tuple(map_a.shape)} vs {tuple(map_b.shape)}")
    return (map_a - map_b).square().mean()


def cross_feature_consistency(
    out_a: StudentOutput,
    out_b: StudentOutput,
    num_classes: int,
    scope: str = "image",
    labels_for_a: torch.Tensor | None = None,
    labels_for_b: torch.Tensor | None = None,
) -> torch.Tensor:
    """Full feature-consistency loss between two students on the same batch.

    Student a's features are masked by student b's pseudo labels and vice
    versa (the cross in the name).  ``labels_for_*`` overrides the pseudo
    labels, e.g. with box-mixed maps under CutMix.  If the feature grids
    disagree, the finer similarity map is nearest-neighbour reduced to the
    coarser one.
    """
    if labels_for_a is None:
        labels_for_a = out_b.pseudo_labels
    if labels_for_b is None:
        labels_for_b = out_a.pseudo_labels

    maps = []
    for out, labels in ((out_a, labels_for_a), (out_b, labels_for_b)):
        h, w = out.features.shape[-2:]
        grid_labels = downsample_labels(labels.detach(), h, w)
        protos = class_prototypes(out.features, grid_labels, num_classes, scope)
        maps.append(prototype_similarity_map(out.features, grid_labels, protos))
    map_a, map_b = maps
    target_h = min(map_a.shape[-2], map_b.shape[-2])
    target_w = min(map_a.shape[-1], map_b.shape[-1])
    if map_a.shape[-2:] != (target_h, target_w):
        map_a = _downsample_map(map_a, target_h, target_w)
    if map_b.shape[-2:] != (target_h, target_w):
        map_b = _downsample_map(map_b, target_h, target_w)
    return similarity_mse(map_a, map_b)
