"""Anti-symmetric attraction-repulsion drift with FIFO reference queues.

A drift vector points from the repulsive barycenter (nearby generated
features) toward the attractive barycenter (nearby real features).  Both
sides share one softmax over the concatenated temperature-scaled affinities;
per-side renormalization of the resulting weights keeps the construction
exactly anti-symmetric, which in turn forces a zero drift whenever the two
reference multisets coincide.  Multi-temperature estimates are RMS-balanced
per temperature before averaging so no scale dominates.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .encoder import FeatureVec
from .numcore import Array, InvalidInputError


@dataclass(frozen=True)
class DriftConfig:
    temperatures: tuple[float, ...] = (0.02, 0.05, 0.2)
    eps: float = 1e-8
    alpha: float = 1.0
    w_plus: float = 1.0
    w_minus: float = 1.0
    renormalize_sides: bool = True  # False keeps the raw joint-softmax masses per side

    def __post_init__(self):
        temps = tuple(float(t) for t in self.temperatures)
        object.__setattr__(self, "temperatures", temps)
        if not temps or any(t <= 0.0 for t in temps):
            raise InvalidInputError("temperatures must be a nonempty list of positive reals")
        if len(set(temps)) != len(temps):
            raise InvalidInputError("temperatures must be distinct")
        if self.eps <= 0.0 or self.alpha <= 0.0:
            raise InvalidInputError("eps and alpha must be positive")
        if self.w_plus < 0.0 or self.w_minus < 0.0:
            raise InvalidInputError("attraction/repulsion weights must be nonnegative")
        if self.w_plus == 0.0 and self.w_minus == 0.0:
            raise InvalidInputError("at least one of w_plus, w_minus must be positive")


class ReferenceQueue:
    """Bounded FIFO of detached feature vectors, oldest first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise InvalidInputError("queue capacity must be positive")
        self.capacity = capacity
        self._entries: deque[FeatureVec] = deque(maxlen=capacity)

    @property
    def entries(self) -> list[FeatureVec]:
        return list(self._entries)

    def push(self, features) -> None:
        for f in features:
            self._entries.append(f)

    def __len__(self) -> int:
        return len(self._entries)


def queue_push(queue: ReferenceQueue, features) -> None:
    queue.push(features)


@dataclass(frozen=True)
class References:
    positives: list
    negatives_pool: list


def build_references(
    current_real, current_gen, q_real: ReferenceQueue, q_gen: ReferenceQueue
) -> References:
    """Current micro-batch features joined with the queue snapshots.

    Current generated features keep their object identity so per-anchor
    self-exclusion works even when feature values collide.
    """
    current_real = list(current_real)
    current_gen = list(current_gen)
    if not current_real or not current_gen:
        raise InvalidInputError("current feature lists must be nonempty")
    return References(
        positives=current_real + q_real.entries,
        negatives_pool=current_gen + q_gen.entries,
    )


# ---------------------------------------------------------------------------
# drift estimation


def _as_matrix(refs, dim: int) -> Array:
    if isinstance(refs, np.ndarray):
        mat = np.asarray(refs, dtype=np.float64)
        return mat.reshape(-1, mat.shape[-1]) if mat.ndim > 1 else mat[None, :]
    rows = [r.values if isinstance(r, FeatureVec) else np.asarray(r, np.float64) for r in refs]
    if not rows:
        return np.zeros((0, dim))
    return np.stack(rows)


def _values(h) -> Array:
    return h.values if isinstance(h, FeatureVec) else np.asarray(h, dtype=np.float64)


def joint_affinity_weights(
    h: Array, positives: Array, negatives: Array, tau: float
) -> tuple[Array, Array]:
    """One softmax over the concatenated (positive ; negative) affinities."""
    d_pos = np.sum((positives - h) ** 2, axis=1)
    d_neg = np.sum((negatives - h) ** 2, axis=1)
    s = np.concatenate([-d_pos / tau, -d_neg / tau])
    e = np.exp(s - s.max())
    w = e / e.sum()
    return w[: d_pos.size], w[d_pos.size :]


def _side_barycenter(affinities: Array, refs: Array, dim: int) -> Array:
    """Renormalized barycenter of one side, as a stable per-side softmax.

    Dividing the joint-softmax masses by their per-side total cancels the
    shared normalizer, so the renormalized barycenter depends on this side's
    affinities alone; computing it that way also survives one side
    underflowing in the joint view.
    """
    if refs.shape[0] == 0:
        return np.zeros(dim)
    e = np.exp(affinities - affinities.max())
    return (e / e.sum()) @ refs


def _drift_from_sq_dists(
    d_pos: Array,
    d_neg: Array,
    pos: Array,
    neg: Array,
    tau: float,
    w_plus: float,
    w_minus: float,
    renormalize: bool,
    dim: int,
) -> Array:
    if renormalize:
        b_plus = _side_barycenter(-d_pos / tau, pos, dim)
        b_minus = _side_barycenter(-d_neg / tau, neg, dim)
    else:
        s = np.concatenate([-d_pos / tau, -d_neg / tau])
        e = np.exp(s - s.max())
        w = e / e.sum()
        b_plus = w[: d_pos.size] @ pos if pos.shape[0] else np.zeros(dim)
        b_minus = w[d_pos.size :] @ neg if neg.shape[0] else np.zeros(dim)
    return w_plus * b_plus - w_minus * b_minus


def drift_single_temp(
    h,
    positives,
    negatives,
    tau: float,
    w_plus: float = 1.0,
    w_minus: float = 1.0,
    renormalize: bool = True,
) -> Array:
    """Temperature-``tau`` drift w_plus * b+ - w_minus * b- for one anchor.

    Affinities are exp(-||h - r||^2 / tau), normalized jointly across both
    sides.  A side whose ratio weight is zero may be empty and contributes a
    zero barycenter; otherwise an empty side is a contract violation.
    """
    if tau <= 0.0:
        raise InvalidInputError("tau must be positive")
    hv = _values(h)
    dim = hv.size
    pos = _as_matrix(positives, dim)
    neg = _as_matrix(negatives, dim)
    if w_plus > 0.0 and pos.shape[0] == 0:
        raise InvalidInputError("positives must be nonempty when w_plus > 0")
    if w_minus > 0.0 and neg.shape[0] == 0:
        raise InvalidInputError("negatives must be nonempty when w_minus > 0")
    d_pos = np.sum((pos - hv) ** 2, axis=1)
    d_neg = np.sum((neg - hv) ** 2, axis=1)
    return _drift_from_sq_dists(d_pos, d_neg, pos, neg, tau, w_plus, w_minus, renormalize, dim)


def drift_multi_temp(anchors, positives, negatives_pool, config: DriftConfig) -> Array:
    """RMS-balanced multi-temperature drift for a batch of anchors.

    Each anchor is excluded from its own negative set by object identity;
    all reference features are treated as constants.
    """
    anchors = list(anchors)
    if not anchors:
        raise InvalidInputError("anchor batch must be nonempty")
    m = _values(anchors[0]).size
    pool = list(negatives_pool)
    pos_mat = _as_matrix(positives, m)
    pool_mat = _as_matrix(pool, m)

    if config.w_plus > 0.0 and pos_mat.shape[0] == 0:
        raise InvalidInputError("positives must be nonempty when w_plus > 0")

    pool_occurrences: dict[int, list[int]] = {}
    for i, ref in enumerate(pool):
        pool_occurrences.setdefault(id(ref), []).append(i)

    # squared distances are temperature-independent; compute them once
    per_anchor: list[tuple[Array, Array, Array]] = []
    for h in anchors:
        keep = np.ones(len(pool), dtype=bool)
        for i in pool_occurrences.get(id(h), ()):
            keep[i] = False
        neg = pool_mat[keep]
        if config.w_minus > 0.0 and neg.shape[0] == 0:
            raise InvalidInputError("negatives must be nonempty when w_minus > 0")
        hv = _values(h)
        d_pos = np.sum((pos_mat - hv) ** 2, axis=1)
        d_neg = np.sum((pool_mat - hv) ** 2, axis=1)[keep]
        per_anchor.append((d_pos, d_neg, neg))

    out = np.zeros((len(anchors), m))
    for tau in config.temperatures:
        per_tau = np.stack(
            [
                _drift_from_sq_dists(
                    d_pos,
                    d_neg,
                    pos_mat,
                    neg,
                    tau,
                    config.w_plus,
                    config.w_minus,
                    config.renormalize_sides,
                    m,
                )
                for d_pos, d_neg, neg in per_anchor
            ]
        )
        scale = rms_scale(per_tau, config.eps)
        out += per_tau / scale
    return out / len(config.temperatures)


def rms_scale(drifts: Array, eps: float) -> float:
    """Batch-level RMS normalizer sqrt(mean ||V_i||^2 + eps)."""
    drifts = np.asarray(drifts, dtype=np.float64)
    return float(np.sqrt(np.mean(np.sum(drifts * drifts, axis=-1)) + eps))
