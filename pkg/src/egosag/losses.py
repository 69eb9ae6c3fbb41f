"""Hungarian assignment and the training objective.

Mask terms are evaluated at superpoint resolution; ``pred`` tensors are
``(M, Q)`` probabilities and ground truth is ``(M, J)`` binary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .errors import DomainError, ParameterError
from .pointcloud import SuperpointPartition

PROB_CLAMP = 1e-6


# --- elementary terms ---------------------------------------------------------------

def dice_loss(pred, gt, variant="literal"):
    """Smoothed Dice between a soft mask and a binary mask.

    ``literal``: 1 - 2 (p.g + 1) / (sum p + sum g + 1); a perfect match gives a
    slightly negative value. ``standard``: 1 - (2 p.g + 1) / (sum p + sum g + 1).
    """
    pred = torch.as_tensor(pred, dtype=torch.float64) if not torch.is_tensor(pred) else pred
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ParameterError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    inter = (pred * gt).sum()
    denom = pred.sum() + gt.sum() + 1.0
    if variant == "literal":
        return 1.0 - 2.0 * (inter + 1.0) / denom
    if variant == "standard":
        return 1.0 - (2.0 * inter + 1.0) / denom
    raise ParameterError(f"unknown dice variant {variant!r}")


def pairwise_dice(pred, gt, variant="literal"):
    """Dice for every (prediction column, gt column) pair: ``(Q, J)``."""
    inter = pred.T @ gt
    denom = pred.sum(0)[:, None] + gt.sum(0)[None, :] + 1.0
    if variant == "literal":
        return 1.0 - 2.0 * (inter + 1.0) / denom
    if variant == "standard":
        return 1.0 - (2.0 * inter + 1.0) / denom
    raise ParameterError(f"unknown dice variant {variant!r}")


def bce(pred, gt):
    """Mean binary cross-entropy with probabilities clamped to [1e-6, 1 - 1e-6]."""
    p = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log1p(-p)).mean()


def pairwise_bce(pred, gt):
    p = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    m = pred.shape[0]
    return -(torch.log(p).T @ gt + torch.log1p(-p).T @ (1.0 - gt)) / m


def matching_cost(sp_masks, gt_sp_masks, zeta_bce=2.0, zeta_dice=5.0, dice_variant="literal"):
    """Cost ``(Q, J)`` = zeta_bce * BCE + zeta_dice * Dice for every pair."""
    with torch.no_grad():
        pred = torch.as_tensor(sp_masks, dtype=torch.float64)
        gt = torch.as_tensor(gt_sp_masks, dtype=torch.float64)
        if gt.shape[1] == 0:
            return np.zeros((pred.shape[1], 0))
        cost = zeta_bce * pairwise_bce(pred, gt) + zeta_dice * pairwise_dice(pred, gt, dice_variant)
    return cost.cpu().numpy()


# --- assignment --------------------------------------------------------------------

@dataclass
class MatchResult:
    pairs: list  # (pred_index, gt_index), sorted by prediction index
    cost_matrix: np.ndarray
    unmatched_preds: list = field(default_factory=list)

    @property
    def total_cost(self):
        return math.fsum(self.cost_matrix[i, j] for i, j in self.pairs)


def _optimum(cost, rows, cols):
    if not rows or not cols:
        return 0.0, []
    sub = cost[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub)
    return math.fsum(sub[r, c]), [(rows[a], cols[b]) for a, b in zip(r, c)]


def hungarian_assign(cost) -> MatchResult:
    """Minimum-cost matching of size min(Q, J).

    Among optimal matchings the lexicographically smallest sorted pair list
    is returned: rows are fixed in order, each to the lowest column that
    still admits an optimal completion.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ParameterError("cost must be a matrix")
    if not np.all(np.isfinite(cost)):
        raise DomainError("cost matrix has non-finite entries")
    n_rows, n_cols = cost.shape
    if n_rows == 0 or n_cols == 0:
        return MatchResult([], cost, list(range(n_rows)))
    best, _ = _optimum(cost, list(range(n_rows)), list(range(n_cols)))
    tol = 1e-12 * max(1.0, abs(best))
    size = min(n_rows, n_cols)

    pairs, free_cols = [], list(range(n_cols))
    for i in range(n_rows):
        need = size - len(pairs)
        if need == 0:
            break
        rest_rows = list(range(i + 1, n_rows))
        placed = False
        for j in free_cols:
            rest_cols = [c for c in free_cols if c != j]
            if min(len(rest_rows), len(rest_cols)) != need - 1:
                continue
            sub, _ = _optimum(cost, rest_rows, rest_cols) if need > 1 else (0.0, [])
            total = math.fsum([cost[a, b] for a, b in pairs] + [cost[i, j], sub])
            if total <= best + tol:
                pairs.append((i, j))
                free_cols.remove(j)
                placed = True
                break
        if not placed and min(len(rest_rows), len(free_cols)) < need:
            # numerical corner: fall back to the solver's own optimum for the remainder
            _, rest = _optimum(cost, list(range(i, n_rows)), free_cols)
            pairs.extend(sorted(rest))
            break
    matched = {i for i, _ in pairs}
    return MatchResult(sorted(pairs), cost, [i for i in range(n_rows) if i not in matched])


# --- training losses --------------------------------------------------------------

def sp_iou(sp_masks, gt_point_masks, sp: SuperpointPartition, threshold=0.5):
    """IoU ``(Q, J)`` of binarized, point-expanded predictions against point gt masks."""
    with torch.no_grad():
        b = (sp_masks.detach() >= threshold).to(torch.float64)
        gt = torch.as_tensor(np.asarray(gt_point_masks, dtype=np.float64).reshape(sp.n_points, -1))
        gt_per_sp = torch.zeros(sp.M, gt.shape[1], dtype=torch.float64).index_add(
            0, torch.as_tensor(sp.assignment), gt)
        counts = torch.as_tensor(sp.counts(), dtype=torch.float64)
        inter = b.T @ gt_per_sp
        union = (b.T @ counts)[:, None] + gt.sum(0)[None, :] - inter
        iou = torch.where(union > 0, inter / union.clamp_min(1e-12), torch.zeros_like(inter))
    return iou.to(sp_masks.dtype)


def loss_mask(pred, match: MatchResult, gt_sp_masks, gt_point_masks, sp: SuperpointPartition,
              dice_variant="literal", threshold=0.5):
    """bce + dice over matched pairs plus MSE between scores and their IoU targets.

    Every query contributes to the score term; its target is its best IoU
    against any gt mask (0 without overlap).
    """
    sp_masks = pred.sp_masks
    zero = sp_masks.new_zeros(())
    gt_sp = torch.as_tensor(gt_sp_masks, dtype=sp_masks.dtype)
    if match.pairs:
        qi = torch.tensor([i for i, _ in match.pairs])
        gj = torch.tensor([j for _, j in match.pairs])
        p, g = sp_masks[:, qi], gt_sp[:, gj]
        l_bce = torch.stack([bce(p[:, t], g[:, t]) for t in range(len(match.pairs))]).mean()
        l_dice = torch.stack([dice_loss(p[:, t], g[:, t], dice_variant)
                              for t in range(len(match.pairs))]).mean()
    else:
        l_bce = l_dice = zero
    n_gt = gt_sp.shape[1]
    if n_gt:
        omega_gt = sp_iou(sp_masks, gt_point_masks, sp, threshold).max(dim=1).values
    else:
        omega_gt = torch.zeros_like(pred.scores)
    l_score = F.mse_loss(pred.scores, omega_gt.detach())
    return {"bce": l_bce, "dice": l_dice, "score": l_score,
            "mask": l_bce + l_dice + l_score, "omega_gt": omega_gt}


def loss_kl(q_v, q_s):
    """Mean over queries of KL(softmax(q_v) || softmax(q_s)) over channels; q_v is the target."""
    if q_v is None:
        return q_s.new_zeros(())
    if q_v.shape != q_s.shape:
        raise ParameterError("q_v and q_s must share a shape")
    log_pv = F.log_softmax(q_v.detach(), dim=1)
    log_ps = F.log_softmax(q_s, dim=1)
    return (log_pv.exp() * (log_pv - log_ps)).sum(dim=1).mean()


def loss_con(scores, gt_iou, iou_threshold=0.5):
    """Multi-positive contrastive loss on quality scores.

    Returns ``(loss, active)``; without both positives and negatives the loss
    is 0 and ``active`` is False.
    """
    gt_iou = torch.as_tensor(gt_iou)
    pos = gt_iou > iou_threshold
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return scores.new_zeros(()), False
    log_pos = torch.logsumexp(scores[pos], 0) - math.log(n_pos)
    log_neg = torch.logsumexp(scores[~pos], 0) - math.log(n_neg)
    return torch.logaddexp(log_pos, log_neg) - log_pos, True


# --- aggregation --------------------------------------------------------------------

DEFAULT_WEIGHTS = (1.0, 0.5, 0.5, 0.5)


@dataclass
class LossBreakdown:
    ce: float
    mask: float
    bce: float
    dice: float
    score: float
    kl: float
    con: float
    weights: tuple = DEFAULT_WEIGHTS
    total: float = field(init=False)
    total_tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        l1, l2, l3, l4 = self.weights
        self.total = l1 * self.ce + l2 * self.mask + l3 * self.kl + l4 * self.con

    def as_dict(self):
        return {k: getattr(self, k) for k in ("total", "ce", "mask", "bce", "dice", "score", "kl", "con")}


def layer_losses(pred, target_class, gt_sp_masks, gt_point_masks, sp, zeta=(2.0, 5.0),
                 dice_variant="literal", iou_threshold=0.5):
    """All loss terms for one decoder layer's prediction."""
    cost = matching_cost(pred.sp_masks, gt_sp_masks, zeta[0], zeta[1], dice_variant)
    match = hungarian_assign(cost)
    m = loss_mask(pred, match, gt_sp_masks, gt_point_masks, sp, dice_variant)
    con, _ = loss_con(pred.scores, m["omega_gt"], iou_threshold)
    ce = F.cross_entropy(pred.class_logits[None], torch.tensor([int(target_class)]))
    return {"ce": ce, "bce": m["bce"], "dice": m["dice"], "score": m["score"], "mask": m["mask"],
            "kl": loss_kl(pred.q_v, pred.q_s), "con": con}


def total_loss(per_layer, weights=DEFAULT_WEIGHTS) -> LossBreakdown:
    """Average every term uniformly over layers, then weight and sum."""
    if any(w < 0 for w in weights):
        raise ParameterError("loss weights must be non-negative")
    if not per_layer:
        raise ParameterError("no layer losses to combine")
    keys = ("ce", "mask", "bce", "dice", "score", "kl", "con")
    avg = {}
    for k in keys:
        vals = [torch.as_tensor(d[k], dtype=torch.float64) if not torch.is_tensor(d[k]) else d[k]
                for d in per_layer]
        avg[k] = torch.stack([v.reshape(()) for v in vals]).mean()
    l1, l2, l3, l4 = weights
    tensor = l1 * avg["ce"] + l2 * avg["mask"] + l3 * avg["kl"] + l4 * avg["con"]
    return LossBreakdown(**{k: float(avg[k].detach()) for k in keys}, weights=tuple(float(w) for w in weights),
                         total_tensor=tensor)
