"""Training objective: classification loss plus the two steering penalties.

All three components work on numpy arrays or autodiff tensors; the trainer
differentiates the total, evaluation code reads plain floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eg


@dataclass
class LossBreakdown:
    """One step's loss components; ``total`` is their exact weighted sum."""

    l_ce: object
    l_steer_v: object
    l_steer_t: object
    total: object
    lambda1: float
    lambda2: float

    def as_floats(self) -> "LossBreakdown":
        l_ce = float(eg.val(self.l_ce))
        l_v = float(eg.val(self.l_steer_v))
        l_t = float(eg.val(self.l_steer_t))
        return LossBreakdown(
            l_ce=l_ce,
            l_steer_v=l_v,
            l_steer_t=l_t,
            total=l_ce + self.lambda1 * l_v + self.lambda2 * l_t,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
        )


def classification_loss(score_matrix, labels, tau: float):
    """Mean negative log-likelihood of ``labels`` under softmax(scores/tau).

    Stabilized by row-max subtraction; raises on non-finite scores (the
    trainer aborts rather than training on garbage).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    values = eg.val(score_matrix)
    if not np.isfinite(values).all():
        raise ValueError("non-finite entries in score matrix")
    batch, n_classes = values.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (batch,) or labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("labels must be valid class indices, one per row")
    z = score_matrix / tau
    shifted = z - eg.max(z, axis=1, keepdims=True)
    lse = eg.log(eg.sum(eg.exp(shifted), axis=1))
    one_hot = np.zeros((batch, n_classes))
    one_hot[np.arange(batch), labels] = 1.0
    picked = eg.sum(shifted * one_hot, axis=1)
    return eg.mean(lse - picked)


def visual_steering_loss(prompted_globals, unprompted_globals):
    """Mean L1 distance between prompted and frozen global image features."""
    if eg.val(prompted_globals).shape != eg.val(unprompted_globals).shape:
        raise ValueError("prompted/unprompted feature shapes differ")
    return eg.mean(eg.sum(eg.absolute(prompted_globals - unprompted_globals), axis=1))


def text_steering_loss(prompted_desc_text: dict, unprompted_desc_text: dict):
    """Mean over classes of the entrywise L1 between prompted and frozen
    description-guided text features (all entries of each class's matrix)."""
    if set(prompted_desc_text) != set(unprompted_desc_text):
        raise ValueError("prompted/unprompted class sets differ")
    if not prompted_desc_text:
        raise ValueError("text_steering_loss requires at least one class")
    total = None
    for name in prompted_desc_text:
        p, u = prompted_desc_text[name], unprompted_desc_text[name]
        if eg.val(p).shape != eg.val(u).shape:
            raise ValueError(f"feature shape mismatch for class {name!r}")
        term = eg.sum(eg.absolute(p - u))
        total = term if total is None else total + term
    return total / float(len(prompted_desc_text))


def total_loss(l_ce, l_steer_v, l_steer_t, lambda1: float, lambda2: float) -> LossBreakdown:
    """Weighted sum; the breakdown is retained for per-step logging."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("lambda weights must be non-negative")
    total = l_ce + lambda1 * l_steer_v + lambda2 * l_steer_t
    return LossBreakdown(
        l_ce=l_ce,
        l_steer_v=l_steer_v,
        l_steer_t=l_steer_t,
        total=total,
        lambda1=lambda1,
        lambda2=lambda2,
    )
