"""DAML objective terms.

Both distillation terms are written as positive KL divergences with the
reference distribution held constant, so minimizing them pulls the other
network toward the reference.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import ClassCountMismatch, DegenerateBatch, LabelOutOfRange

TERMS = ("L_tri_T", "L_tri_S", "L_tri_sT", "L_Ttid", "L_Stid", "L_Tsid", "L_id", "L_dom")


def pairwise_euclidean(x):
    sq = (x * x).sum(1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    # sqrt has an infinite slope at 0; the clamp keeps the diagonal's gradient finite
    # and puts coincident points 1e-6 apart
    return d2.clamp_min(1e-12).sqrt()


def triplet_loss(features, labels, rho=1.2):
    """Batch-hard triplet loss: mean_i max(rho + d(i, hardest pos) - d(i, hardest neg), 0)."""
    labels = torch.as_tensor(labels, device=features.device)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(n, dtype=torch.bool, device=features.device)
    pos_mask, neg_mask = same & ~eye, ~same
    if not (pos_mask.any(1).all() and neg_mask.any(1).all()):
        raise DegenerateBatch("every anchor needs at least one positive and one negative")
    dist = pairwise_euclidean(features)
    d_p = dist.masked_fill(~pos_mask, float("-inf")).max(1).values
    d_n = dist.masked_fill(~neg_mask, float("inf")).min(1).values
    return F.relu(rho + d_p - d_n).mean()


def ce_loss(logits, labels):
    labels = torch.as_tensor(labels, device=logits.device, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LabelOutOfRange(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def _kl(reference_logits, logits, temperature):
    if reference_logits.shape != logits.shape:
        raise ClassCountMismatch(
            f"distillation logits disagree: {tuple(reference_logits.shape)} vs {tuple(logits.shape)}")
    ref = reference_logits.detach() / temperature
    p_ref = torch.softmax(ref, dim=1)
    log_ratio = torch.log_softmax(ref, dim=1) - torch.log_softmax(logits / temperature, dim=1)
    return (p_ref * log_ratio).sum(1).mean()


def kl_distill_id(teacher_logits, student_logits, temperature=1.0):
    """KL(teacher || student) on target samples; only the student receives gradient."""
    return _kl(teacher_logits, student_logits, temperature)


def kl_distill_dom(student_logits, teacher_logits, temperature=1.0):
    """KL(student || teacher) on source samples; only the teacher receives gradient."""
    return _kl(student_logits, teacher_logits, temperature)


@dataclass
class LossReport:
    L_tri_T: float = 0.0
    L_tri_S: float = 0.0
    L_tri_sT: float = 0.0
    L_Ttid: float = 0.0
    L_Stid: float = 0.0
    L_Tsid: float = 0.0
    L_id: float = 0.0
    L_dom: float = 0.0
    L_total: float = 0.0

    def as_dict(self):
        return asdict(self)


def total_loss(terms, hp):
    """Weighted sum; ``terms`` maps TERMS names to scalars (tensors or floats)."""
    return ((terms["L_Ttid"] + terms["L_tri_T"])
            + (terms["L_Stid"] + terms["L_tri_S"])
            + hp.lambda1 * (terms["L_Tsid"] + terms["L_tri_sT"])
            + hp.lambda2 * terms["L_id"]
            + hp.lambda3 * terms["L_dom"])
