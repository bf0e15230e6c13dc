"""Conformal calibration over multi-step plans.

A sequence is scored by the smallest per-step confidence along it, so a
single threshold calibrated on whole sequences can be applied one step at a
time: the product of the per-step sets equals the set of full sequences whose
minimum confidence clears the threshold.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .core import (
    LABELS,
    CalibratedModel,
    ConfidenceVector,
    PredictionSet,
    check_label,
    fit_scores,
    in_set_mask,
    predict_set,
)

# 5**6 sequences is the largest exhaustive enumeration we allow
MAX_ENUMERATION_HORIZON = 6


@dataclass(frozen=True)
class SequenceRecord:
    """Per-step confidences along one executed branch, plus its ground truth.

    Give ``true_labels`` (one label per step) for single-label data, or
    ``tree`` mapping each prefix of labels to the acceptable labels at the
    next step for multi-label data.  ``steps[t]`` must be the confidence
    after the prefix the reduction picks, which is how the episode
    generator records them.
    """

    steps: tuple[ConfidenceVector, ...]
    true_labels: tuple[str, ...] | None = None
    tree: Mapping[tuple[str, ...], frozenset[str]] | None = None

    def __post_init__(self):
        if not self.steps:
            raise ValueError("a sequence needs at least one step")
        if (self.true_labels is None) == (self.tree is None):
            raise ValueError("give exactly one of true_labels or tree")
        if self.true_labels is not None:
            labels = tuple(check_label(y) for y in self.true_labels)
            if len(labels) != len(self.steps):
                raise ValueError(f"{len(labels)} true labels for {len(self.steps)} steps")
            object.__setattr__(self, "true_labels", labels)

    @property
    def horizon(self) -> int:
        return len(self.steps)

    @property
    def multi_label(self) -> bool:
        return self.tree is not None


def beta_bar_reduce(record: SequenceRecord) -> tuple[str, ...]:
    """Walk the acceptable tree taking the most confident acceptable label at each step."""
    if not record.multi_label:
        return record.true_labels
    prefix: tuple[str, ...] = ()
    for conf in record.steps:
        acceptable = record.tree.get(prefix)
        if not acceptable:
            raise ValueError(f"no acceptable label after prefix {prefix!r}")
        prefix += (conf.ranked(acceptable)[0],)
    return prefix


def sequence_score(record: SequenceRecord, labels: Sequence[str] | None = None) -> float:
    """Smallest step confidence along ``labels`` (the reduced truth by default)."""
    labels = beta_bar_reduce(record) if labels is None else tuple(labels)
    if len(labels) != record.horizon:
        raise ValueError(f"{len(labels)} labels for {record.horizon} steps")
    return min(conf[y] for conf, y in zip(record.steps, labels))


def fit_sequence(records: Sequence[SequenceRecord], epsilon: float, delta: float, *,
                 adjust: bool = True) -> CalibratedModel:
    """Calibrate one threshold on whole sequences; n counts sequences, not steps."""
    if not records:
        raise ValueError("need at least one calibration sequence")
    if len({r.multi_label for r in records}) > 1:
        raise ValueError("calibration sequences mix single-label and multi-label modes")
    scores = [1.0 - sequence_score(r) for r in records]
    return fit_scores(scores, epsilon, delta, adjust=adjust, mode="sequence")


def causal_step_set(model: CalibratedModel | float, confidence: ConfidenceVector) -> PredictionSet:
    """Per-step set using the sequence-level threshold."""
    return predict_set(model, confidence)


def noncausal_sequence_set(model: CalibratedModel | float,
                           steps: Sequence[ConfidenceVector] | SequenceRecord) -> set[tuple[str, ...]]:
    """All label sequences whose minimum step confidence clears the threshold.

    ``steps`` is a list of per-step confidences or a :class:`SequenceRecord`.
    Exhaustive over 5**T sequences, so only for T <= MAX_ENUMERATION_HORIZON.
    """
    if isinstance(steps, SequenceRecord):
        steps = steps.steps
    T = len(steps)
    if not 1 <= T <= MAX_ENUMERATION_HORIZON:
        raise ValueError(f"horizon must be between 1 and {MAX_ENUMERATION_HORIZON}, got {T}")
    q_hat = model.q_hat if isinstance(model, CalibratedModel) else float(model)
    k = len(LABELS)
    mins = np.ones((k,) * T)
    for t, conf in enumerate(steps):
        shape = [1] * T
        shape[t] = k
        mins = np.minimum(mins, conf.as_array().reshape(shape))
    keep = np.argwhere(in_set_mask(q_hat, mins))
    return {tuple(LABELS[i] for i in row) for row in keep}
