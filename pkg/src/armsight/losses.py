"""Loss terms for the four objectives and their weighted combination.

Every function returns ``(value, grad)`` where ``grad`` is the derivative of
``value`` with respect to the prediction. Batch helpers return per-sample
values; the batch loss is their mean.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass(frozen=True)
class ClassWeights:
    w_fg: float
    w_bg: float
    p_fg: float


@dataclass(frozen=True)
class LossWeights:
    mask: float = 1.0
    jcoords: float = 1.5
    bcoords: float = 1.5
    type: float = 0.3

    def __post_init__(self):
        vals = (self.mask, self.jcoords, self.bcoords, self.type)
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ValueError("loss weights must be nonnegative with at least one positive")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.mask * factor, self.jcoords * factor,
                           self.bcoords * factor, self.type * factor)


@dataclass
class LossBreakdown:
    l_mask: float
    l_jcoords: float
    l_bcoords: float
    l_type: float
    l_final: float

    def as_dict(self) -> dict:
        return asdict(self)


def class_weights(mask_gt, eps: float = EPS) -> ClassWeights:
    """Inverse class probabilities of a binary mask, P(fg) clamped to [eps, 1 - eps]."""
    mask = np.asarray(mask_gt) > 0.5
    p_fg = float(np.clip(mask.mean(), eps, 1.0 - eps))
    if p_fg in (eps, 1.0 - eps):
        log.debug("degenerate mask: P(fg) clamped to %g", p_fg)
    return ClassWeights(1.0 / p_fg, 1.0 / (1.0 - p_fg), p_fg)


def _check_probabilities(est, what):
    est = np.asarray(est, dtype=np.float64)
    if not np.all(np.isfinite(est)) or est.min(initial=0.5) < 0.0 or est.max(initial=0.5) > 1.0:
        raise ValueError(f"{what} must be probabilities in (0, 1)")
    return est


def mask_loss(est, gt, weights: ClassWeights | None = None, literal: bool = False,
              eps: float = EPS):
    """Class-rebalanced per-pixel cross-entropy averaged over the N pixels.

    Default: l = -w_fg*gt*log(est) - w_bg*(1-gt)*log(1-est).
    literal=True evaluates the form with estimate and ground truth swapped:
    l = -w_fg*est*log(gt) - w_bg*(1-est)*log(1-gt), which is linear in est.
    Estimates that saturated to exactly 0 or 1 are clipped to [eps, 1 - eps].
    """
    est = _check_probabilities(est, "mask estimate")
    gt = np.clip(np.asarray(gt, dtype=np.float64), eps, 1.0 - eps)
    if est.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {est.shape} vs {gt.shape}")
    if weights is None:
        weights = class_weights(gt, eps)
    e = np.clip(est, eps, 1.0 - eps)
    n = est.size
    wf, wb = weights.w_fg, weights.w_bg
    if literal:
        per_pixel = -wf * e * np.log(gt) - wb * (1.0 - e) * np.log(1.0 - gt)
        grad = (-wf * np.log(gt) + wb * np.log(1.0 - gt)) / n
    else:
        per_pixel = -wf * gt * np.log(e) - wb * (1.0 - gt) * np.log(1.0 - e)
        grad = (-wf * gt / e + wb * (1.0 - gt) / (1.0 - e)) / n
    return float(per_pixel.sum() / n), grad


def mask_loss_batch(est, gt, weights: ClassWeights | None = None, literal: bool = False):
    values = np.empty(len(est))
    grads = np.empty(np.shape(est))
    for i in range(len(est)):
        values[i], grads[i] = mask_loss(est[i], gt[i], weights, literal)
    return values, grads


def _euclidean(est, gt):
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"coordinate shapes differ: {est.shape} vs {gt.shape}")
    diff = est - gt
    dist = np.sqrt((diff * diff).sum(axis=-1))
    safe = np.where(dist > 0, dist, 1.0)
    unit = np.where((dist > 0)[..., None], diff / safe[..., None], 0.0)
    return dist, unit


def joint_coord_loss(est, gt):
    """Mean Euclidean distance over the joints; est and gt are (N_j, 3)."""
    est = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    dist, unit = _euclidean(est, gt)
    n_j = len(dist)
    return float(dist.sum() / n_j), unit / n_j


def joint_coord_loss_batch(est, gt):
    """est, gt: (B, 18) -> per-sample losses (B,), grads (B, 18)."""
    B = len(est)
    dist, unit = _euclidean(np.reshape(est, (B, -1, 3)), np.reshape(gt, (B, -1, 3)))
    n_j = dist.shape[1]
    return dist.sum(axis=1) / n_j, (unit / n_j).reshape(B, -1)


def base_coord_loss(est, gt):
    dist, unit = _euclidean(est, gt)
    return float(dist), unit


def base_coord_loss_batch(est, gt):
    return _euclidean(est, gt)


def type_loss(pred, gt, eps: float = EPS):
    """Categorical cross-entropy -sum p(c) log q(c) with q clipped to [eps, 1 - eps]."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"type shapes differ: {pred.shape} vs {gt.shape}")
    if pred.min() < 0 or np.any(np.abs(pred.sum(axis=-1) - 1.0) > 1e-5):
        raise ValueError("type prediction must be a probability distribution")
    q = np.clip(pred, eps, 1.0 - eps)
    value = -(gt * np.log(q)).sum(axis=-1)
    grad = -gt / q
    if value.ndim == 0:
        return float(value), grad
    return value, grad


def combined_loss(outputs: dict, labels: dict, weights: LossWeights = LossWeights(),
                  literal: bool = False, mask_weights: ClassWeights | None = None):
    """Weighted sum of the four terms over a batch.

    `outputs` holds mask_prob (B,H,W), joints (B,18), base (B,3), type_prob (B,3);
    `labels` holds masks, joints, bases, types under the same shapes. Components
    are batch means and l_final = sum of weight * component. Returned grads are
    d l_final / d output for each output array.
    """
    B = len(outputs["joints"])
    lm, gm = mask_loss_batch(outputs["mask_prob"], labels["masks"], mask_weights, literal)
    lj, gj = joint_coord_loss_batch(outputs["joints"], labels["joints"])
    lb, gb = base_coord_loss_batch(outputs["base"], labels["bases"])
    lt, gt = type_loss(outputs["type_prob"], labels["types"])
    comp = [float(v.mean()) for v in (lm, lj, lb, lt)]
    final = (weights.mask * comp[0] + weights.jcoords * comp[1]
             + weights.bcoords * comp[2] + weights.type * comp[3])
    grads = {
        "mask_prob": gm * (weights.mask / B),
        "joints": gj * (weights.jcoords / B),
        "base": gb * (weights.bcoords / B),
        "type_prob": gt * (weights.type / B),
    }
    return LossBreakdown(*comp, final), grads


def weighted_final(components, weights: LossWeights) -> float:
    lm, lj, lb, lt = components
    return weights.mask * lm + weights.jcoords * lj + weights.bcoords * lb + weights.type * lt
