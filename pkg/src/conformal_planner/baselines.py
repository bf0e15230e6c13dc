"""Comparison methods: cumulative-confidence sets, ensembles, a binary
uncertainty threshold, no help, and prompt templates for the prompt-based
baselines that only make sense against a live model.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .core import LABELS, ConfidenceVector, PredictionSet

METHODS = ("conformal", "simple", "ensemble", "binary", "nohelp")
LLM_ONLY_METHODS = ("prompt_set", "prompt_binary")
# running sums land within rounding of 1 - epsilon; treat those as crossing
CUMULATIVE_TOL = 1e-12


@dataclass(frozen=True)
class Method:
    """How a step's prediction set is formed.

    ``epsilon`` for the set-based methods is taken from the experiment
    config; ``draws`` applies to ``ensemble`` and ``theta`` to ``binary``.
    """

    kind: str = "conformal"
    draws: int = 20
    theta: float = 0.5

    def __post_init__(self):
        if self.kind not in METHODS + LLM_ONLY_METHODS:
            raise ValueError(f"unknown method {self.kind!r}; expected one of {METHODS + LLM_ONLY_METHODS}")
        if self.draws < 2:
            raise ValueError(f"ensemble needs at least 2 draws, got {self.draws}")
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")

    @property
    def uses_epsilon(self) -> bool:
        return self.kind in ("conformal", "simple", "ensemble")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "draws": self.draws, "theta": self.theta}


def simple_set(confidence: ConfidenceVector, epsilon: float) -> PredictionSet:
    """Top options until their running sum first reaches 1 - epsilon (crossing option included)."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    ranking = confidence.ranked()
    size = int(simple_set_sizes(confidence.as_array()[None, :], epsilon)[0])
    return PredictionSet(ranking[:size])


def ranking_order(scores: np.ndarray) -> np.ndarray:
    """Label indices by descending score, alphabet order on ties, row-wise."""
    return np.argsort(-np.asarray(scores, dtype=float), axis=-1, kind="stable")


def simple_set_sizes(scores: np.ndarray, epsilon: float) -> np.ndarray:
    """Vectorized set size of :func:`simple_set` for an (n, 5) score array."""
    s = np.take_along_axis(scores, ranking_order(scores), axis=-1)
    reached = np.cumsum(s, axis=-1) >= 1.0 - epsilon - CUMULATIVE_TOL
    # vectors summing short of 1 - epsilon keep every option
    return np.where(reached.any(axis=-1), reached.argmax(axis=-1) + 1, scores.shape[-1])


def ensemble_frequencies(argmaxes: np.ndarray, n_labels: int = len(LABELS)) -> np.ndarray:
    """Rows of argmax counts over draws, divided by the draw count.

    ``argmaxes`` has shape (draws, n).
    """
    draws = argmaxes.shape[0]
    counts = np.zeros((argmaxes.shape[1], n_labels), dtype=np.int64)
    for row in argmaxes:
        np.add.at(counts, (np.arange(len(row)), row), 1)
    return counts / draws


def ensemble_scores(scorer, scenario, step: int, draws: int, rng_seed: int, prefix=()) -> ConfidenceVector:
    """Frequency of each label as the argmax over ``draws`` independent scorer draws."""
    spec = getattr(scorer, "spec", None)
    if spec is None or spec.kind != "synthetic":
        from .scorer import ScorerUsageError

        raise ScorerUsageError("ensemble scores are only defined for the synthetic scorer")
    if draws < 2:
        raise ValueError(f"need at least 2 draws, got {draws}")
    winners = np.array([[LABELS.index(scorer.score(scenario, step, prefix, rng_seed, draw=d + 1).argmax())]
                        for d in range(draws)])
    return ConfidenceVector(tuple(ensemble_frequencies(winners)[0]))


def binary_threshold(confidence: ConfidenceVector, theta: float) -> bool:
    """True (certain) iff the top score reaches ``theta``."""
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    return max(confidence.scores) >= theta


def binary_set(confidence: ConfidenceVector, theta: float) -> PredictionSet:
    """Certain: the argmax alone.  Uncertain: every option, for the human to choose from."""
    ranking = confidence.ranked()
    return PredictionSet(ranking[:1] if binary_threshold(confidence, theta) else ranking)


# ---------------------------------------------------------------------------
# prompt-based baselines (completion endpoint only)

PROMPT_SET_TEMPLATE = """{context}
Options:
{options}
Question: Which options are possibly correct? List their letters.
Answer:"""

BINARY_TEMPLATE = """{context}
Planned step: {plan}
Question: Is the planned step certainly what was asked? Reply Certain or Uncertain.
Answer:"""

_LETTERS = re.compile(r"\b([A-E])\b")


def render_prompt_set(context: str, options) -> str:
    body = "\n".join(f"{y}) {text}" for y, text in zip(LABELS, options))
    return PROMPT_SET_TEMPLATE.format(context=context, options=body)


def parse_prompt_set(text: str) -> frozenset[str]:
    """Letters A-E mentioned in the model's reply, e.g. "A, C" -> {A, C}."""
    return frozenset(_LETTERS.findall(text.upper()))


def render_binary(context: str, plan: str) -> str:
    return BINARY_TEMPLATE.format(context=context, plan=plan)


def parse_binary(text: str) -> bool:
    """True when the reply says Certain (and not Uncertain)."""
    t = text.strip().lower()
    if t.startswith("uncertain"):
        return False
    if t.startswith("certain"):
        return True
    raise ValueError(f"cannot parse certainty from reply {text!r}")
