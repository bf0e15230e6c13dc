"""Split conformal prediction over the five-option MCQA label alphabet."""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .betafn import beta_inv_cdf

LABELS: tuple[str, ...] = ("A", "B", "C", "D", "E")
LABEL_INDEX: dict[str, int] = {label: i for i, label in enumerate(LABELS)}
OPTION_E_TEXT = "an option not listed here"

MODEL_FORMAT_VERSION = 1
# Products like (N+1) * (1 - v/(N+1)) land within a few ulps of an integer;
# snap before taking ceil/floor so the index is the intended one.
_INDEX_SNAP = 1e-9


class InfeasibleCalibrationError(ValueError):
    """The calibration set is too small to certify the requested coverage."""

    def __init__(self, epsilon: float, delta: float, n: int, min_n: int):
        super().__init__(
            f"cannot certify coverage 1-epsilon={1 - epsilon:g} at delta={delta:g} with n={n} "
            f"calibration samples; need at least n={min_n}"
        )
        self.epsilon = epsilon
        self.delta = delta
        self.n = n
        self.min_n = min_n


def check_label(label: str) -> str:
    if label not in LABEL_INDEX:
        raise ValueError(f"unknown label {label!r}; expected one of {LABELS}")
    return label


@dataclass(frozen=True)
class ConfidenceVector:
    """Per-label confidences in alphabet order."""

    scores: tuple[float, ...]

    def __post_init__(self):
        scores = tuple(float(s) for s in self.scores)
        if len(scores) != len(LABELS):
            raise ValueError(f"expected {len(LABELS)} scores, got {len(scores)}")
        if any(not (0.0 <= s <= 1.0) for s in scores):
            raise ValueError(f"scores must lie in [0, 1]: {scores}")
        if math.fsum(scores) > 1.0 + 1e-9:
            raise ValueError(f"scores sum to {math.fsum(scores)} > 1")
        object.__setattr__(self, "scores", scores)

    @classmethod
    def from_mapping(cls, scores: Mapping[str, float]) -> ConfidenceVector:
        for label in scores:
            check_label(label)
        return cls(tuple(float(scores.get(label, 0.0)) for label in LABELS))

    def __getitem__(self, label: str) -> float:
        return self.scores[LABEL_INDEX[check_label(label)]]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.scores, dtype=float)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(LABELS, self.scores))

    def ranked(self, labels: Iterable[str] = LABELS) -> tuple[str, ...]:
        """Labels ordered by descending score, alphabet order on ties."""
        return tuple(sorted(labels, key=lambda y: (-self[y], LABEL_INDEX[y])))

    def argmax(self) -> str:
        return self.ranked()[0]


@dataclass(frozen=True)
class CalibrationRecord:
    confidence: ConfidenceVector
    true_label: str | None = None
    true_labels: frozenset[str] | None = None

    def __post_init__(self):
        if (self.true_label is None) == (self.true_labels is None):
            raise ValueError("give exactly one of true_label (single-label) or true_labels (multi-label)")
        if self.true_label is not None:
            check_label(self.true_label)
        else:
            labels = frozenset(self.true_labels)
            for y in labels:
                check_label(y)
            object.__setattr__(self, "true_labels", labels)

    @property
    def multi_label(self) -> bool:
        return self.true_labels is not None


@dataclass(frozen=True)
class PredictionSet:
    """Members listed in rank order (descending confidence)."""

    ranking: tuple[str, ...]

    @property
    def members(self) -> frozenset[str]:
        return frozenset(self.ranking)

    def __len__(self) -> int:
        return len(self.ranking)

    def __contains__(self, label: object) -> bool:
        return label in self.ranking

    def __iter__(self):
        return iter(self.ranking)


@dataclass(frozen=True)
class CalibratedModel:
    epsilon: float
    delta: float
    epsilon_hat: float
    q_hat: float
    n: int
    mode: str = "single"  # "single" or "sequence"

    def to_dict(self) -> dict:
        return {
            "version": MODEL_FORMAT_VERSION,
            "mode": self.mode,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "epsilon_hat": self.epsilon_hat,
            "q_hat": self.q_hat,
            "n": self.n,
        }

    def to_json(self) -> str:
        # float repr is the shortest string that round-trips bit-exactly
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping) -> CalibratedModel:
        version = doc.get("version")
        if version != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version!r}")
        return cls(
            epsilon=float(doc["epsilon"]),
            delta=float(doc["delta"]),
            epsilon_hat=float(doc["epsilon_hat"]),
            q_hat=float(doc["q_hat"]),
            n=int(doc["n"]),
            mode=str(doc.get("mode", "single")),
        )

    @classmethod
    def from_json(cls, text: str) -> CalibratedModel:
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> CalibratedModel:
        return cls.from_json(Path(path).read_text())


def nonconformity_score(record: CalibrationRecord) -> float:
    if record.multi_label:
        raise ValueError("nonconformity_score needs a single-label record; apply beta_reduce first")
    return 1.0 - record.confidence[record.true_label]


def quantile_index(n: int, epsilon_hat: float) -> int:
    """1-based rank k = ceil((n + 1)(1 - epsilon_hat))."""
    return math.ceil((n + 1) * (1.0 - epsilon_hat) - _INDEX_SNAP)


def calibrate_quantile(scores: Sequence[float], epsilon_hat: float) -> float:
    """The ceil((N+1)(1-eps))-th smallest score, or 1.0 past the end."""
    s = np.sort(np.asarray(scores, dtype=float))
    if s.size == 0:
        raise ValueError("need at least one calibration score")
    if not 0.0 < epsilon_hat < 1.0:
        raise ValueError(f"epsilon_hat must lie in (0, 1), got {epsilon_hat}")
    k = quantile_index(s.size, epsilon_hat)
    if k > s.size:
        return 1.0
    return float(s[max(k, 1) - 1])


def coverage_bound(n: int, v: int, delta: float) -> float:
    """Dataset-conditional coverage level Beta^{-1}_{n+1-v, v}(delta)."""
    return beta_inv_cdf((n + 1 - v, v), delta)


def _feasible(n: int, v: int, epsilon: float, delta: float) -> bool:
    return coverage_bound(n, v, delta) >= 1.0 - epsilon


def minimum_calibration_size(epsilon: float, delta: float) -> int:
    """Smallest n for which some v >= 1 certifies 1 - epsilon at level delta."""
    # v = 1 is the most permissive choice; Beta(n, 1) has quantile delta^(1/n).
    n = max(2, math.ceil(1.0 / epsilon - 1.0 - _INDEX_SNAP))
    n = max(n, math.ceil(math.log(delta) / math.log1p(-epsilon) - _INDEX_SNAP))
    while not (math.floor((n + 1) * epsilon + _INDEX_SNAP) >= 1 and _feasible(n, 1, epsilon, delta)):
        n += 1
    return n


def adjust_epsilon(epsilon: float, delta: float, n: int) -> float:
    """Largest epsilon_hat = v/(n+1) <= epsilon whose coverage bound reaches 1 - epsilon.

    Scans v downward from floor((n+1) epsilon); the bound grows as v
    shrinks, so the first feasible v is the largest one.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    v_max = math.floor((n + 1) * epsilon + _INDEX_SNAP)
    if v_max >= 1 and not _feasible(n, 1, epsilon, delta):
        v_max = 0
    for v in range(v_max, 0, -1):
        if _feasible(n, v, epsilon, delta):
            return v / (n + 1)
    raise InfeasibleCalibrationError(epsilon, delta, n, minimum_calibration_size(epsilon, delta))


def beta_reduce(record: CalibrationRecord) -> CalibrationRecord:
    """Replace the acceptable-label set by its highest-confidence member."""
    if not record.multi_label:
        return record
    if not record.true_labels:
        raise ValueError("multi-label record has an empty set of true labels")
    best = record.confidence.ranked(record.true_labels)[0]
    return CalibrationRecord(record.confidence, true_label=best)


def fit_scores(scores: Sequence[float], epsilon: float, delta: float, *, adjust: bool = True,
               mode: str = "single") -> CalibratedModel:
    """Calibrate from precomputed nonconformity scores.

    ``adjust=False`` skips the dataset-conditional correction and calibrates
    at epsilon itself; it exists to measure what the correction buys.
    """
    n = len(scores)
    if n == 0:
        raise ValueError("need at least one calibration record")
    epsilon_hat = adjust_epsilon(epsilon, delta, n) if adjust else epsilon
    return CalibratedModel(
        epsilon=epsilon,
        delta=delta,
        epsilon_hat=epsilon_hat,
        q_hat=calibrate_quantile(scores, epsilon_hat),
        n=n,
        mode=mode,
    )


def fit(records: Sequence[CalibrationRecord], epsilon: float, delta: float, *, adjust: bool = True) -> CalibratedModel:
    if not records:
        raise ValueError("need at least one calibration record")
    modes = {r.multi_label for r in records}
    if len(modes) > 1:
        raise ValueError("calibration records mix single-label and multi-label modes")
    scores = [nonconformity_score(beta_reduce(r)) for r in records]
    return fit_scores(scores, epsilon, delta, adjust=adjust)


def in_set_mask(q_hat: float, scores: np.ndarray) -> np.ndarray:
    """Elementwise membership f >= 1 - q_hat, for any array of scores.

    Written as 1 - f <= q_hat: the same expression that produced the
    calibration scores, so a score equal to the threshold is always kept.
    """
    return (1.0 - np.asarray(scores, dtype=float)) <= q_hat


def predict_set(model: CalibratedModel | float, confidence: ConfidenceVector) -> PredictionSet:
    q_hat = model.q_hat if isinstance(model, CalibratedModel) else float(model)
    mask = in_set_mask(q_hat, confidence.as_array())
    members = [y for y, keep in zip(LABELS, mask) if keep]
    return PredictionSet(confidence.ranked(members))


def needs_help(prediction_set: PredictionSet) -> bool:
    return len(prediction_set) != 1
