"""Routing-consistency loss, per-expert multi-positive InfoNCE and the total."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from midol import tensorcore as tc

LOG_FLOOR = 1e-9
DEFAULT_TAU = 0.04


@dataclass(frozen=True)
class LossBreakdown:
    l_route: float
    l_cst: float
    total: float

    def as_record(self, step: int) -> dict:
        return {"step": step, "l_route": self.l_route, "l_cst": self.l_cst, "total": self.total}


def routing_consistency_loss(student_probs, teacher_probs, n_views: int) -> tc.Node:
    """Cross-view cross-entropy between student and teacher routing.

    Rows are image-major (``b * n_views + j``). For every image the loss is
    ``-1/(M(M-1)) sum_j sum_{g != j} sum_i aS[j,i] log aT[g,i]``; images are
    averaged. Teacher rows are constants and floored at ``1e-9`` before the log.
    """
    if n_views < 2:
        raise ValueError("routing consistency needs at least two views per image")
    s = tc.as_node(student_probs)
    t = np.asarray(teacher_probs.value if isinstance(teacher_probs, tc.Node) else teacher_probs, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"student {s.shape} and teacher {t.shape} routing shapes differ")
    rows, n = t.shape
    if rows % n_views:
        raise ValueError(f"{rows} routing rows is not a multiple of {n_views} views")
    n_images = rows // n_views
    log_t = np.log(np.maximum(t, LOG_FLOOR)).reshape(n_images, n_views, n)
    # sum over the other views of the same image: total minus own view
    others = (log_t.sum(axis=1, keepdims=True) - log_t).reshape(rows, n)
    weight = -1.0 / (n_images * n_views * (n_views - 1))
    return tc.scale(tc.sum(tc.mul(s, others)), weight)


def _view_masks(n_images: int, n_views: int) -> tuple[np.ndarray, np.ndarray]:
    image = np.repeat(np.arange(n_images), n_views)
    view = np.tile(np.arange(n_views), n_images)
    other_view = view[:, None] != view[None, :]
    same_image = image[:, None] == image[None, :]
    positives = (same_image & other_view).astype(np.float64)
    candidates = other_view.astype(np.float64)
    return positives, candidates


def intra_contrastive_loss_expert(x, y, n_views: int, tau: float = DEFAULT_TAU) -> tc.Node:
    """Multi-positive InfoNCE over the images routed to one expert.

    ``x`` (student, differentiable) and ``y`` (teacher, constant) hold
    ``|B_i| * M`` image-major rows. Positives of view ``j`` are the other
    views ``k != j`` of the same image; the denominator runs over every
    image ``beta`` with the same ``k != j`` restriction.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if n_views < 2:
        raise ValueError("contrastive loss needs at least two views per image")
    x = tc.as_node(x)
    y = tc.detach(y)
    rows = x.shape[0]
    if rows == 0 or rows % n_views or y.shape != x.shape:
        raise ValueError(f"bad embedding shapes {x.shape} / {y.shape} for {n_views} views")
    positives, candidates = _view_masks(rows // n_views, n_views)

    logits = tc.scale(tc.cosine_similarity_matrix(x, y), 1.0 / tau)
    # per-row shift cancels between numerator and denominator
    shift = logits.value.max(axis=1, keepdims=True)
    e = tc.exp(tc.add(logits, -shift))
    num = tc.sum(tc.mul(e, positives), axis=1)
    den = tc.sum(tc.mul(e, candidates), axis=1)
    return tc.mean(tc.sub(tc.log(den), tc.log(num)))


def aggregate_contrastive_loss(per_expert: Sequence, n_experts: int) -> tc.Node:
    """Mean over all ``n_experts`` subspaces; ``None`` marks an empty expert (counts as 0)."""
    if n_experts <= 0:
        raise ValueError("need at least one expert")
    if len(per_expert) != n_experts:
        raise ValueError(f"expected {n_experts} per-expert losses, got {len(per_expert)}")
    terms = [tc.as_node(v) for v in per_expert if v is not None]
    if not terms:
        return tc.Node(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = tc.add(acc, t)
    return tc.scale(acc, 1.0 / n_experts)


def total_loss(l_route: float, l_cst: float) -> LossBreakdown:
    if not (math.isfinite(l_route) and math.isfinite(l_cst)):
        raise FloatingPointError(f"non-finite loss terms l_route={l_route}, l_cst={l_cst}")
    return LossBreakdown(float(l_route), float(l_cst), float(l_route) + float(l_cst))
