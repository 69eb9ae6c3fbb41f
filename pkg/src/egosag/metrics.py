"""Inference filtering and instance-mask AP / recall evaluation.

Protocol: class-aware matching (a prediction can only match gt regions of
its own class), predictions pooled per class across samples and ranked by
score, greedy assignment of each prediction to the best still-unmatched gt
with IoU >= t, all-point interpolated AP, and recall at the end of the
ranked list. Score ties keep sample order, then prediction order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .pointcloud import SuperpointPartition, expand_mask

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class FinalPrediction:
    point_masks: list = field(default_factory=list)  # list of (N,) bool
    scores: list = field(default_factory=list)
    affordance_id: int = -1
    query_indices: list = field(default_factory=list)

    def to_json(self, sample_id=""):
        return {
            "sample_id": sample_id,
            "affordance_id": int(self.affordance_id),
            "predictions": [
                {"score": float(s), "affordance_id": int(self.affordance_id),
                 "point_indices": np.flatnonzero(m).tolist()}
                for m, s in zip(self.point_masks, self.scores)
            ],
        }

    @classmethod
    def from_json(cls, obj, n_points):
        masks, scores = [], []
        for p in obj["predictions"]:
            m = np.zeros(n_points, dtype=bool)
            m[np.asarray(p["point_indices"], dtype=np.int64)] = True
            masks.append(m)
            scores.append(float(p["score"]))
        return cls(masks, scores, int(obj["affordance_id"]))


def filter_predictions(pred, sp: SuperpointPartition, tau=0.5, top_k=None, mask_threshold=0.5):
    """Rank queries by score, keep the top ``top_k``, drop scores below ``tau`` and empty masks."""
    scores = np.asarray(pred.scores.detach().cpu(), dtype=np.float64)
    sp_masks = np.asarray(pred.sp_masks.detach().cpu(), dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if top_k is not None:
        order = order[:top_k]
    out = FinalPrediction(affordance_id=int(pred.class_logits.argmax()))
    for q in order:
        if scores[q] < tau:
            continue
        mask = expand_mask(sp_masks[:, q] >= mask_threshold, sp)
        if not mask.any():
            continue
        out.point_masks.append(mask)
        out.scores.append(float(scores[q]))
        out.query_indices.append(int(q))
    return out


def mask_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ParameterError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class GroundTruth:
    masks: list  # (N,) bool each
    affordance_ids: list


@dataclass
class MetricsReport:
    mAP: float
    AP50: float
    AP25: float
    mRC: float
    RC50: float
    RC25: float
    per_class: dict = field(default_factory=dict)

    def to_dict(self):
        return {"mAP": self.mAP, "AP50": self.AP50, "AP25": self.AP25, "mRC": self.mRC,
                "RC50": self.RC50, "RC25": self.RC25, "per_class": self.per_class}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def table(self, class_names=None):
        head = f"{'class':<16}{'mAP':>8}{'AP50':>8}{'AP25':>8}{'mRC':>8}{'RC50':>8}{'RC25':>8}"
        lines = [head, "-" * len(head)]
        for cid, row in self.per_class.items():
            name = class_names.get(int(cid), str(cid)) if class_names else str(cid)
            lines.append(f"{name:<16}" + "".join(f"{row[k]:>8.2f}" for k in
                                                  ("mAP", "AP50", "AP25", "mRC", "RC50", "RC25")))
        lines.append("-" * len(head))
        lines.append(f"{'all':<16}" + "".join(f"{getattr(self, k):>8.2f}" for k in
                                              ("mAP", "AP50", "AP25", "mRC", "RC50", "RC25")))
        return "\n".join(lines)


def average_precision(is_tp, n_gt):
    """All-point interpolated area under the precision/recall curve."""
    if n_gt == 0 or len(is_tp) == 0:
        return 0.0
    tp = np.cumsum(is_tp, dtype=np.float64)
    precision = tp / np.arange(1, len(is_tp) + 1)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def _class_ap_rc(entries, gts, cls, iou_table, threshold):
    """entries: ranked (sample, pred_idx) pairs of this class."""
    gt_refs = [(s, j) for s, g in enumerate(gts) for j, a in enumerate(g.affordance_ids) if a == cls]
    matched = set()
    is_tp = []
    for s, p in entries:
        best, best_j = -1.0, None
        for j, a in enumerate(gts[s].affordance_ids):
            if a != cls or (s, j) in matched:
                continue
            iou = iou_table[s][p, j]
            if iou >= threshold and iou > best:
                best, best_j = iou, j
        if best_j is None:
            is_tp.append(False)
        else:
            matched.add((s, best_j))
            is_tp.append(True)
    n_gt = len(gt_refs)
    return average_precision(np.array(is_tp, dtype=bool), n_gt), (len(matched) / n_gt if n_gt else 0.0)


def evaluate_dataset(preds, gts, class_agnostic=False) -> MetricsReport:
    """Pool predictions across samples and compute mAP/AP50/AP25/mRC/RC50/RC25 in percent."""
    if len(preds) != len(gts):
        raise ParameterError("predictions and ground truths must align per sample")
    if class_agnostic:
        preds = [FinalPrediction(p.point_masks, p.scores, 0) for p in preds]
        gts = [GroundTruth(g.masks, [0] * len(g.masks)) for g in gts]

    iou_table = []
    for p, g in zip(preds, gts):
        tab = np.zeros((len(p.point_masks), len(g.masks)))
        for i, pm in enumerate(p.point_masks):
            for j, gm in enumerate(g.masks):
                tab[i, j] = mask_iou(pm, gm)
        iou_table.append(tab)

    classes = sorted({a for g in gts for a in g.affordance_ids})
    per_class = {}
    for cls in classes:
        entries = [(s, i, sc) for s, p in enumerate(preds) if p.affordance_id == cls
                   for i, sc in enumerate(p.scores)]
        order = sorted(range(len(entries)), key=lambda e: (-entries[e][2], e))
        ranked = [(entries[e][0], entries[e][1]) for e in order]
        ap, rc = {}, {}
        for t in IOU_THRESHOLDS + (0.25,):
            ap[t], rc[t] = _class_ap_rc(ranked, gts, cls, iou_table, t)
        per_class[cls] = {
            "mAP": 100.0 * float(np.mean([ap[t] for t in IOU_THRESHOLDS])),
            "AP50": 100.0 * ap[0.5],
            "AP25": 100.0 * ap[0.25],
            "mRC": 100.0 * float(np.mean([rc[t] for t in IOU_THRESHOLDS])),
            "RC50": 100.0 * rc[0.5],
            "RC25": 100.0 * rc[0.25],
        }
    if not per_class:
        return MetricsReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, {})
    mean = {k: float(np.mean([row[k] for row in per_class.values()]))
            for k in ("mAP", "AP50", "AP25", "mRC", "RC50", "RC25")}
    return MetricsReport(**mean, per_class={int(c): row for c, row in per_class.items()})
