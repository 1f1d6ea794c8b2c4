"""Trainable objectives: feature-space fixed-point loss and mirror teachers.

The fixed-point loss matches the generated feature to a stop-gradient target
shifted by the drift, so its feature gradient is exactly -alpha * V and the
logit gradient is the VJP pullback of that vector.  The mirror variants
instead convert the drift into a detached teacher distribution via an
exponentiated-gradient step in logit space and match it with KL or MSE.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numcore
from .backbone import CorruptionRecord, base_loss
from .encoder import LiftedEncoding, LiftKind, pullback_to_logits
from .numcore import Array, InvalidInputError


class ObjectiveVariant(str, Enum):
    FEATURE_L2 = "feature-l2"
    MIRROR_KL = "mirror-kl"
    MIRROR_MSE = "mirror-mse"


@dataclass(frozen=True)
class ObjectiveKind:
    variant: ObjectiveVariant = ObjectiveVariant.FEATURE_L2
    with_base_loss: bool = False
    lift: LiftKind = LiftKind.SOFT
    eta: float = 1.0    # mirror step size, unused by the feature variant
    alpha: float = 1.0  # drift scale of the fixed-point target

    def __post_init__(self):
        if self.eta < 0.0:
            raise InvalidInputError("eta must be nonnegative")
        if self.alpha <= 0.0:
            raise InvalidInputError("alpha must be positive")


def feature_fixed_point_loss(h, drift: Array, alpha: float) -> tuple[float, Array]:
    """1/2 ||h - sg(h + alpha V)||^2 with its exact feature gradient -alpha V."""
    step = alpha * np.asarray(drift, dtype=np.float64)
    loss = 0.5 * float(step @ step)
    return loss, -step


def mirror_direction(state: LiftedEncoding, drift: Array) -> Array:
    """Logit-space ascent direction J_h(logits)^T V from the stored VJP chain."""
    return pullback_to_logits(state, np.asarray(drift, dtype=np.float64))


def mirror_teacher(logits: Array, g: Array, eta: float) -> Array:
    """Detached teacher softmax(logits + eta * g); rows stay on the simplex."""
    if eta < 0.0:
        raise InvalidInputError("eta must be nonnegative")
    return numcore.softmax_rows(np.asarray(logits, np.float64) + eta * np.asarray(g, np.float64))


def mirror_kl_loss(p_star: Array, logits: Array, positions: Array) -> tuple[float, Array]:
    """Mean KL(p* || p) over predicted positions; gradient (p - p*) / |positions|.

    Both distributions go through the same log so a bitwise-equal teacher
    (the drift-equilibrium case) yields exactly zero loss and gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    pos = np.asarray(positions, dtype=np.int64)
    grad = np.zeros_like(logits)
    if pos.size == 0:
        return 0.0, grad
    p_star = np.asarray(p_star, dtype=np.float64)[pos]
    p = numcore.softmax_rows(logits[pos])
    log_ratio = np.log(np.where(p_star > 0.0, p_star, 1.0)) - np.log(p)
    loss = float(np.where(p_star > 0.0, p_star * log_ratio, 0.0).sum() / pos.size)
    grad[pos] = (p - p_star) / pos.size
    return loss, grad


def mirror_mse_loss(l_star: Array, logits: Array, positions: Array) -> tuple[float, Array]:
    """Mean squared logit-row distance over predicted positions."""
    logits = np.asarray(logits, dtype=np.float64)
    pos = np.asarray(positions, dtype=np.int64)
    grad = np.zeros_like(logits)
    if pos.size == 0:
        return 0.0, grad
    diff = logits[pos] - np.asarray(l_star, dtype=np.float64)[pos]
    loss = float((diff * diff).sum() / pos.size)
    grad[pos] = 2.0 * diff / pos.size
    return loss, grad


@dataclass
class TotalObjective:
    loss: float
    grad_logits: list[Array]        # per-sample gradient of the batch-mean loss
    per_sample_loss: list[float]


def total_objective(
    kind: ObjectiveKind,
    states: list[LiftedEncoding],
    drifts: Array,
    clean_batch,
    records: list[CorruptionRecord],
) -> TotalObjective:
    """Batch-mean objective with analytic per-sample logit gradients."""
    n = len(states)
    if n == 0 or len(records) != n or len(drifts) != n:
        raise InvalidInputError("batch pieces must have matching lengths")
    losses: list[float] = []
    grads: list[Array] = []
    for i, state in enumerate(states):
        drift_i = np.asarray(drifts[i], dtype=np.float64)
        if kind.variant == ObjectiveVariant.FEATURE_L2:
            loss_i, grad_h = feature_fixed_point_loss(state.feature, drift_i, kind.alpha)
            grad_l = pullback_to_logits(state, grad_h)
        else:
            g = mirror_direction(state, drift_i)
            if kind.variant == ObjectiveVariant.MIRROR_KL:
                p_star = mirror_teacher(state.logits, g, kind.eta)
                loss_i, grad_l = mirror_kl_loss(p_star, state.logits, records[i].predicted_positions)
            else:
                l_star = state.logits + kind.eta * g
                loss_i, grad_l = mirror_mse_loss(l_star, state.logits, records[i].predicted_positions)
        if kind.with_base_loss:
            bl, bg = base_loss(state.logits, clean_batch[i], records[i].predicted_positions)
            loss_i += bl
            grad_l = grad_l + bg
        losses.append(loss_i)
        grads.append(grad_l / n)
    return TotalObjective(
        loss=float(sum(losses) / n), grad_logits=grads, per_sample_loss=losses
    )
