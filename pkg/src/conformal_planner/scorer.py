"""Confidence sources: a synthetic scorer and a completion-API client.

The synthetic scorer draws, for every (scenario, step, prefix, seed, draw),
an evidence vector G with G_anchor ~ Gamma(1 + k) and G_other ~ Gamma(1), and
emits the posterior q ∝ prior * G**k.  Because the anchor label is itself
distributed according to the prior, q is exactly the conditional probability
of the anchor given what the scorer saw: with temperature 1 and no
corruption the scorer is calibrated by construction.  Here k is the
concentration scaled down by the scenario's ambiguity.

Randomness is keyed: each draw hashes its coordinates into uniforms, so a
scenario's scores do not depend on which other scenarios are scored
alongside it or in what order.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import struct
import time
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import requests
from scipy.special import gammaincinv

from .core import LABEL_INDEX, LABELS, OPTION_E_TEXT, ConfidenceVector
from .scenario import Prefix, Scenario

log = logging.getLogger(__name__)

# kappa_effective = kappa * (1 - AMBIGUITY_DAMPING * ambiguity)
AMBIGUITY_DAMPING = 0.8
_N_UNIFORMS = 8  # one blake2b-512 digest


class ScorerError(Exception):
    """Base class for scorer failures."""


class ScorerUsageError(ScorerError, ValueError):
    """Operation called on the wrong kind of scorer."""


class TransportError(ScorerError):
    """Endpoint unreachable after the configured retries."""


class ProtocolError(ScorerError):
    """Response does not have the expected completion-API shape."""


class DegenerateResponseError(ScorerError):
    """Response carries no probability for any of the five label tokens."""


@dataclass(frozen=True)
class ScorerSpec:
    """Scorer configuration.

    Parameters
    ----------
    kind : {"synthetic", "llm"}
    kappa : float
        Evidence concentration on the anchor label; ``inf`` gives one-hot scores.
    rho : float
        Probability that the mode is swapped onto a wrong label.
    tau : float
        Temperature applied after corruption: ``q ** (1 / tau)``, renormalized.
    endpoint, model, timeout, retries, api_key_env, max_concurrency
        Completion-API settings, used only when ``kind == "llm"``.
    """

    kind: str = "synthetic"
    kappa: float = 4.0
    rho: float = 0.05
    tau: float = 1.0
    endpoint: str | None = None
    model: str | None = None
    timeout: float = 30.0
    retries: int = 3
    api_key_env: str = "LLM_API_KEY"
    max_concurrency: int = 4

    def __post_init__(self):
        if self.kind not in ("synthetic", "llm"):
            raise ValueError(f"scorer kind must be 'synthetic' or 'llm', got {self.kind!r}")
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"tau must be positive and finite, got {self.tau}")
        if self.retries < 0 or self.max_concurrency < 1:
            raise ValueError("retries must be >= 0 and max_concurrency >= 1")
        if self.kind == "llm" and not (self.endpoint and self.model):
            raise ValueError("llm scorer needs endpoint and model")

    def to_dict(self) -> dict:
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__}
        # JSON has no infinity; the one-hot limit is written as a string
        if math.isinf(self.kappa):
            doc["kappa"] = "inf"
        return doc

    @classmethod
    def from_dict(cls, doc) -> ScorerSpec:
        known = {k: v for k, v in doc.items() if k in cls.__dataclass_fields__}
        if isinstance(known.get("kappa"), str):
            known["kappa"] = float(known["kappa"])
        return cls(**known)


def effective_kappa(kappa: float | np.ndarray, ambiguity: float | np.ndarray):
    return kappa * (1.0 - AMBIGUITY_DAMPING * np.asarray(ambiguity, dtype=float))


# ---------------------------------------------------------------------------
# keyed uniforms

def keyed_uniforms(keys: Sequence[int], rng_seed: int, step: int, prefixes: Sequence[Prefix] | None = None,
                   draw: int = 0) -> np.ndarray:
    """Uniforms in (0, 1), shape (len(keys), 8), a pure function of the coordinates."""
    head = struct.pack("<QII", int(rng_seed) & (2**64 - 1), step & 0xFFFFFFFF, draw & 0xFFFFFFFF)
    buf = bytearray()
    for i, key in enumerate(keys):
        tail = "".join(prefixes[i]).encode() if prefixes is not None else b""
        buf += hashlib.blake2b(struct.pack("<Q", int(key) & (2**64 - 1)) + head + tail).digest()
    words = np.frombuffer(bytes(buf), dtype="<u8").reshape(len(keys), _N_UNIFORMS)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


# ---------------------------------------------------------------------------
# synthetic scorer

def apply_temperature(probs: np.ndarray, tau: float) -> np.ndarray:
    """Rows of ``probs ** (1 / tau)``, renormalized."""
    p = np.asarray(probs, dtype=float)
    if tau == 1.0:
        return p / p.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        logp = np.log(p) / tau
    return _softmax(logp)


def _softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def score_arrays(spec: ScorerSpec, prior: np.ndarray, acceptable: np.ndarray, anchor: np.ndarray,
                 ambiguity: np.ndarray, keys: Sequence[int], rng_seed: int, step: int = 0,
                 prefixes: Sequence[Prefix] | None = None, draw: int = 0) -> np.ndarray:
    """Vectorized synthetic scores, one row per scenario step.

    Parameters
    ----------
    prior : (n, 5) array
        Instruction-implied weights over labels.
    acceptable : (n, 5) bool array
        Labels that count as correct; corruption moves the mode off these.
    anchor : (n,) int array
        Label index the evidence points at.
    ambiguity : (n,) array
    keys : n scenario keys
    """
    if spec.kind != "synthetic":
        raise ScorerUsageError("synthetic scoring needs a synthetic ScorerSpec")
    prior = np.asarray(prior, dtype=float)
    n, k = prior.shape
    rows = np.arange(n)
    u = keyed_uniforms(keys, rng_seed, step, prefixes, draw)
    if math.isinf(spec.kappa):
        q = np.zeros((n, k))
        q[rows, anchor] = 1.0
    else:
        kap = effective_kappa(spec.kappa, ambiguity)
        g = -np.log1p(-u[:, :k])  # Exp(1) = Gamma(1)
        g[rows, anchor] = gammaincinv(1.0 + kap, u[rows, anchor])
        with np.errstate(divide="ignore"):
            logits = np.log(prior) + kap[:, None] * np.log(g)
        q = _softmax(logits)
    if spec.rho > 0.0:
        hit = u[:, 5] < spec.rho
        wrong = ~np.asarray(acceptable, dtype=bool)
        n_wrong = wrong.sum(axis=1)
        hit &= n_wrong > 0
        if hit.any():
            pick = np.minimum((u[:, 6] * n_wrong).astype(int), np.maximum(n_wrong - 1, 0))
            # index of the pick-th wrong label in each row
            target = (np.cumsum(wrong, axis=1) > pick[:, None]).argmax(axis=1)
            mode = q.argmax(axis=1)
            r = rows[hit]
            a, b = mode[hit], target[hit]
            qa, qb = q[r, a].copy(), q[r, b].copy()
            q[r, a], q[r, b] = qb, qa
    if spec.tau != 1.0:
        q = apply_temperature(q, spec.tau)
    # guard the sum <= 1 invariant against rounding
    return q / np.maximum(q.sum(axis=1, keepdims=True), 1.0)


def synthetic_score(spec: ScorerSpec, scenario: Scenario, step: int, rng_seed: int,
                    prefix: Prefix = (), draw: int = 0) -> ConfidenceVector:
    """Synthetic confidence for one step; pure in (spec, scenario, step, prefix, seed, draw)."""
    if len(prefix) != step:
        raise ValueError(f"prefix length {len(prefix)} does not match step {step}")
    node = scenario.node(prefix)
    acceptable = np.array([[y in node.acceptable for y in LABELS]])
    q = score_arrays(
        spec, np.array([node.prior]), acceptable, np.array([LABEL_INDEX[node.anchor]]),
        np.array([scenario.ambiguity]), [scenario.key], rng_seed, step, [tuple(prefix)], draw,
    )
    return ConfidenceVector(tuple(q[0]))


# ---------------------------------------------------------------------------
# completion-API scorer

PROMPT_HEADER = "You are a robot operating at a tabletop. Choose the next step."


@dataclass(frozen=True)
class McqaPrompt:
    """Rendered multiple-choice prompt.

    ``options`` holds the five options in generation order (E last);
    ``permutation[j]`` is the generation index shown at position j.
    """

    context_text: str
    options: tuple[str, ...]
    permutation: tuple[int, ...]

    @property
    def shown(self) -> tuple[str, ...]:
        return tuple(self.options[i] for i in self.permutation)

    def render(self) -> str:
        lines = [self.context_text, "Options:"]
        lines += [f"{LABELS[j]}) {text}" for j, text in enumerate(self.shown)]
        lines.append("Answer:")
        return "\n".join(lines)

    def unpermute(self, shown_scores: Sequence[float]) -> tuple[float, ...]:
        """Map scores indexed by shown position back to generation order."""
        out = [0.0] * len(LABELS)
        for j, i in enumerate(self.permutation):
            out[i] = float(shown_scores[j])
        return tuple(out)


def build_mcqa_prompt(scenario: Scenario, generated_options: Sequence[str], rng_seed: int | None) -> McqaPrompt:
    """Append option E and shuffle; ``rng_seed=None`` keeps generation order."""
    if len(generated_options) != 4:
        raise ValueError(f"need exactly 4 generated options, got {len(generated_options)}")
    options = tuple(generated_options) + (OPTION_E_TEXT,)
    if rng_seed is None:
        perm = tuple(range(len(options)))
    else:
        perm = tuple(int(i) for i in np.random.default_rng(rng_seed).permutation(len(options)))
    context = f"{PROMPT_HEADER}\nInstruction: {scenario.instruction}"
    return McqaPrompt(context, options, perm)


def _label_token(token: str) -> str | None:
    t = token.strip()
    if t.endswith(")"):
        t = t[:-1].strip()
    return t if t in LABEL_INDEX else None


def parse_label_logprobs(doc) -> tuple[float, ...]:
    """Probabilities of the label tokens A..E (by shown position) from a response."""
    try:
        top = doc["choices"][0]["logprobs"]["top_logprobs"][0]
    except (KeyError, IndexError, TypeError):
        raise ProtocolError("response lacks choices[0].logprobs.top_logprobs[0]") from None
    if not isinstance(top, dict):
        raise ProtocolError("top_logprobs[0] is not a token -> logprob map")
    probs = [0.0] * len(LABELS)
    seen = False
    for token, lp in top.items():
        label = _label_token(token)
        if label is None:
            continue
        probs[LABEL_INDEX[label]] += math.exp(float(lp))
        seen = True
    if not seen:
        raise DegenerateResponseError(f"no label token among {sorted(top)}")
    total = math.fsum(probs)
    # renormalize over the label tokens; absent labels stay exactly 0
    return tuple(p / total for p in probs)


def _request(spec: ScorerSpec, prompt_text: str, session=None, max_tokens: int = 1, logprobs: int | None = 5):
    body = {"model": spec.model, "prompt": prompt_text, "max_tokens": max_tokens, "temperature": 0}
    if logprobs is not None:
        body["logprobs"] = logprobs
    headers = {}
    key = os.environ.get(spec.api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    url = spec.endpoint.rstrip("/") + "/completions"
    http = session or requests
    last = None
    for attempt in range(spec.retries + 1):
        try:
            resp = http.post(url, json=body, headers=headers, timeout=spec.timeout)
            if resp.status_code >= 500 or resp.status_code == 429:
                last = f"HTTP {resp.status_code}"
            else:
                resp.raise_for_status()
                try:
                    return resp.json()
                except ValueError:
                    raise ProtocolError("response is not JSON") from None
        except requests.HTTPError as exc:
            raise ProtocolError(f"endpoint rejected the request: {exc.response.status_code}") from None
        except (requests.ConnectionError, requests.Timeout) as exc:
            last = type(exc).__name__
        log.debug("completion request attempt %d failed: %s", attempt + 1, last)
        if attempt < spec.retries:
            time.sleep(min(0.1 * 2**attempt, 2.0))
    raise TransportError(f"{url} unreachable after {spec.retries + 1} attempts ({last})")


def llm_score(spec: ScorerSpec, prompt: McqaPrompt, session=None) -> ConfidenceVector:
    """Next-token label probabilities, mapped back to canonical labels."""
    if spec.kind != "llm":
        raise ScorerUsageError("llm_score needs an llm ScorerSpec")
    shown = parse_label_logprobs(_request(spec, prompt.render(), session))
    return ConfidenceVector(prompt.unpermute(shown))


def llm_complete(spec: ScorerSpec, prompt_text: str, max_tokens: int = 16, session=None) -> str:
    """Greedy free-text completion (used by the prompt-based baselines)."""
    doc = _request(spec, prompt_text, session, max_tokens=max_tokens, logprobs=None)
    try:
        return str(doc["choices"][0]["text"])
    except (KeyError, IndexError, TypeError):
        raise ProtocolError("response lacks choices[0].text") from None


# ---------------------------------------------------------------------------
# scorer objects used by episodes

@dataclass(frozen=True)
class SyntheticScorer:
    spec: ScorerSpec = field(default_factory=ScorerSpec)

    def __post_init__(self):
        if self.spec.kind != "synthetic":
            raise ScorerUsageError("SyntheticScorer needs a synthetic ScorerSpec")

    def score(self, scenario: Scenario, step: int, prefix: Prefix, rng_seed: int, draw: int = 0) -> ConfidenceVector:
        return synthetic_score(self.spec, scenario, step, rng_seed, prefix, draw)


@dataclass
class LlmScorer:
    """Scores scenario options with a completion endpoint.

    The scenario's four listed options stand in for the generated ones.
    """

    spec: ScorerSpec
    session: object = None

    def __post_init__(self):
        if self.spec.kind != "llm":
            raise ScorerUsageError("LlmScorer needs an llm ScorerSpec")
        if self.session is None:
            self.session = requests.Session()

    def score(self, scenario: Scenario, step: int, prefix: Prefix, rng_seed: int, draw: int = 0) -> ConfidenceVector:
        node = scenario.node(prefix)
        prompt = build_mcqa_prompt(scenario, node.options[:4], rng_seed + 7919 * step + draw)
        return llm_score(self.spec, prompt, self.session)


def make_scorer(spec: ScorerSpec):
    return SyntheticScorer(spec) if spec.kind == "synthetic" else LlmScorer(spec)
