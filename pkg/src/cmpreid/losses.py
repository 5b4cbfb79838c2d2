"""The four training loss terms and their weighted combination.

All losses are pure functions of tensors and differentiable w.r.t. their
trainable inputs; each has a brute-force oracle or closed-form case in the
test suite plus float64 finite-difference gradient checks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .network import BatchError, FeatureBundle
from .substrate import ShapeError

if TYPE_CHECKING:  # pragma: no cover
    from .config import TrainConfig
    from .data import MiniBatch

PROB_EPS = 1e-12


class LabelError(ValueError):
    """A class label outside [0, num_identities)."""


@dataclass
class LossBreakdown:
    """Scalar loss terms of one batch (torch scalars; graph attached in train mode)."""

    l_id: torch.Tensor
    l_hctri: torch.Tensor
    l_pose: torch.Tensor
    l_kd: torch.Tensor
    total: torch.Tensor
    hctri_weight: float
    pose_weight: float
    kd_weight: float


def pose_loss(heatmaps_true: torch.Tensor, heatmaps_pred: torch.Tensor) -> torch.Tensor:
    """Sum of squared heatmap residuals over channels and pixels, averaged
    over the batch only."""
    if heatmaps_true.shape != heatmaps_pred.shape:
        raise ShapeError(f"heatmap shapes differ: {tuple(heatmaps_true.shape)} vs {tuple(heatmaps_pred.shape)}")
    return (heatmaps_true - heatmaps_pred).pow(2).sum() / heatmaps_true.shape[0]


def _gather_log_probs(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    # logits: M x P x N -> per-image sum over heads of true-class log prob
    logp = F.log_softmax(logits, dim=-1)
    idx = labels.view(-1, 1, 1).expand(-1, logits.shape[1], 1)
    return logp.gather(-1, idx).squeeze(-1).sum(dim=1)


def identity_loss(
    logits_reid: torch.Tensor,
    logits_pose: torch.Tensor | None,
    labels: torch.Tensor,
) -> torch.Tensor:
    """Cross entropy summed over every stripe head of both banks, averaged
    over the batch. ``logits_pose`` may be None (pose branch disabled)."""
    num_classes = logits_reid.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    per_image = _gather_log_probs(logits_reid, labels)
    if logits_pose is not None:
        per_image = per_image + _gather_log_probs(logits_pose, labels)
    return -per_image.mean()


def modality_centers(
    features: torch.Tensor,
    labels: torch.Tensor,
    modality_tags: Sequence[str],
    ids_per_batch: int,
    imgs_per_id: int,
) -> torch.Tensor:
    """Per-identity, per-modality feature means of a sampler batch.

    Returns (D, 2, dim) with modality index 0 = RGB, 1 = IR; identities
    ordered by first occurrence in the batch.
    """
    labels_np = labels.detach().cpu().numpy()
    tags = np.asarray(modality_tags)
    order = list(dict.fromkeys(labels_np.tolist()))
    if len(order) != ids_per_batch:
        raise BatchError(f"expected {ids_per_batch} distinct identities, found {len(order)}")
    rows = []
    for ident in order:
        per_modality = []
        for tag in ("RGB", "IR"):
            idx = np.nonzero((labels_np == ident) & (tags == tag))[0]
            if len(idx) != imgs_per_id:
                raise BatchError(
                    f"identity {ident} has {len(idx)} {tag} images, expected {imgs_per_id}"
                )
            per_modality.append(features[torch.from_numpy(idx)].mean(dim=0))
        rows.append(torch.stack(per_modality))
    return torch.stack(rows)


def hctri_loss(centers: torch.Tensor, margin: float) -> torch.Tensor:
    """Center-based triplet loss with the hardest inter-center negative.

    For every anchor center (identity i, modality m): hinge on
    margin + ||c_i^m - c_i^other|| - min over j != i and both modalities of
    ||c_i^m - c_j||. Ties in the min resolve to the lowest (identity,
    modality) index. D = 1 has no negatives and yields 0 (with a warning).
    """
    if centers.ndim != 3 or centers.shape[1] != 2:
        raise ShapeError(f"expected centers shaped (D, 2, dim), got {tuple(centers.shape)}")
    d_ids = centers.shape[0]
    if d_ids < 2:
        warnings.warn("hetero-center triplet needs >= 2 identities; returning 0", RuntimeWarning)
        return centers.sum() * 0.0
    flat = centers.reshape(2 * d_ids, -1)  # ordered (id0 RGB, id0 IR, id1 RGB, ...)
    sq = (flat.unsqueeze(1) - flat.unsqueeze(0)).pow(2).sum(-1)
    ids = torch.arange(d_ids, device=centers.device).repeat_interleave(2)
    same_id = ids.unsqueeze(0) == ids.unsqueeze(1)
    neg_sq = sq.masked_fill(same_id, float("inf"))
    # clamp before sqrt: exactly coincident centers get distance 1e-12 and a
    # zero subgradient instead of NaN
    hardest_neg = neg_sq.min(dim=1).values.clamp_min(1e-24).sqrt()   # (2D,)
    pos = (centers[:, 0] - centers[:, 1]).pow(2).sum(-1).clamp_min(1e-24).sqrt()
    pos_per_anchor = pos.repeat_interleave(2)
    return F.relu(margin + pos_per_anchor - hardest_neg).sum()


def _kl_to_students(teacher_probs: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    # teacher_probs: M x N (constant); student_logits: M x P x N
    log_p = teacher_probs.clamp(min=PROB_EPS).log()
    log_q = F.softmax(student_logits, dim=-1).clamp(min=PROB_EPS).log()
    kl = (teacher_probs.unsqueeze(1) * (log_p.unsqueeze(1) - log_q)).sum(-1)  # M x P
    return kl.sum(dim=1)


def kd_loss(
    teacher_logits: torch.Tensor,
    logits_reid: torch.Tensor,
    logits_pose: torch.Tensor | None,
) -> torch.Tensor:
    """KL from the (detached) teacher distribution to every stripe head,
    summed over heads and averaged over the batch."""
    if teacher_logits.shape[0] != logits_reid.shape[0] or teacher_logits.shape[-1] != logits_reid.shape[-1]:
        raise ShapeError(
            f"teacher {tuple(teacher_logits.shape)} vs students {tuple(logits_reid.shape)}"
        )
    teacher_probs = F.softmax(teacher_logits.detach(), dim=-1)
    per_image = _kl_to_students(teacher_probs, logits_reid)
    if logits_pose is not None:
        per_image = per_image + _kl_to_students(teacher_probs, logits_pose)
    return per_image.mean()


def _teacher_identity_term(teacher_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(teacher_logits, dim=-1)
    return -logp.gather(-1, labels.view(-1, 1)).mean()


def total_objective(bundle: FeatureBundle, batch: "MiniBatch", cfg: "TrainConfig") -> LossBreakdown:
    """Assemble the weighted objective from one forward pass.

    The teacher head, when present, contributes its own cross-entropy term
    to l_id; disabled components contribute exact zeros.
    """
    zero = bundle.logits_reid.new_zeros(())
    l_id = identity_loss(bundle.logits_reid, bundle.logits_pose, batch.labels)
    if bundle.teacher_logits is not None:
        l_id = l_id + _teacher_identity_term(bundle.teacher_logits, batch.labels)

    l_hctri = zero
    banks = [bundle.stripe_feats_reid]
    if bundle.stripe_feats_pose is not None:
        banks.append(bundle.stripe_feats_pose)
    for feats in banks:
        for j in range(feats.shape[1]):
            centers = modality_centers(
                feats[:, j], batch.labels, batch.modality_tags,
                batch.ids_per_batch, batch.imgs_per_id,
            )
            l_hctri = l_hctri + hctri_loss(centers, cfg.margin)

    l_pose = zero
    if cfg.enable_pose_loss and bundle.heatmaps is not None:
        l_pose = pose_loss(batch.heatmaps, bundle.heatmaps)

    l_kd = zero
    if cfg.enable_hfc and bundle.teacher_logits is not None:
        l_kd = kd_loss(bundle.teacher_logits, bundle.logits_reid, bundle.logits_pose)

    total = l_id + cfg.hctri_weight * l_hctri + cfg.pose_weight * l_pose + cfg.kd_weight * l_kd
    return LossBreakdown(
        l_id=l_id, l_hctri=l_hctri, l_pose=l_pose, l_kd=l_kd, total=total,
        hctri_weight=cfg.hctri_weight, pose_weight=cfg.pose_weight, kd_weight=cfg.kd_weight,
    )
