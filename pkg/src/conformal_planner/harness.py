"""Experiment orchestration: calibrate, evaluate, sweep, match, persist.

Single-step settings are evaluated on whole arrays at once; the sorting
setting runs episodes one by one.  Both paths follow the same rules as
:func:`conformal_planner.episodes.run_episode` and are cross-checked in
the test suite.

Every repeat draws fresh calibration and test scenarios from seeds derived
from the root seed.  An :class:`Experiment` caches the drawn scenarios and
their scores, so sweeping epsilon or matching operating points compares
methods on identical data (a paired design).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import Method, ensemble_frequencies, ranking_order, simple_set_sizes
from .core import LABELS, CalibratedModel, fit_scores, in_set_mask
from .episodes import SUCCESS, run_episode
from .scenario import SINGLE_STEP_SETTINGS, SETTINGS, sample_batch, sample_scenarios
from .scorer import ScorerSpec, make_scorer, score_arrays
from .sequence import SequenceRecord, fit_sequence

CSV_HEADER = ("epsilon", "success", "help_step", "help_trial", "set_size", "coverage")


@dataclass(frozen=True)
class ExperimentConfig:
    setting: str = "numeric"
    scorer: ScorerSpec = field(default_factory=ScorerSpec)
    method: Method = field(default_factory=Method)
    epsilon: float = 0.15
    delta: float = 0.01
    n_cal: int = 400
    n_test: int = 2000
    repeats: int = 10
    seed: int = 0
    adjust: bool = True  # False calibrates at epsilon itself (diagnostic only)
    output: str | None = None

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.n_cal < 2 or self.n_test < 1 or self.repeats < 1:
            raise ValueError("need n_cal >= 2, n_test >= 1 and repeats >= 1")
        if not (0.0 < self.epsilon < 1.0 and 0.0 < self.delta < 1.0):
            raise ValueError("epsilon and delta must lie in (0, 1)")

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "setting": self.setting,
            "scorer": self.scorer.to_dict(),
            "method": self.method.to_dict(),
            "epsilon": self.epsilon,
            "delta": self.delta,
            "n_cal": self.n_cal,
            "n_test": self.n_test,
            "repeats": self.repeats,
            "seed": self.seed,
            "adjust": self.adjust,
            "output": self.output,
        }

    @classmethod
    def from_dict(cls, doc) -> ExperimentConfig:
        doc = dict(doc)
        if "scorer" in doc:
            doc["scorer"] = ScorerSpec.from_dict(doc["scorer"])
        if "method" in doc:
            m = doc["method"]
            doc["method"] = Method(m) if isinstance(m, str) else Method(**m)
        known = {k: v for k, v in doc.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class RepeatMetrics:
    success: float
    help_step: float
    help_trial: float
    set_size: float
    coverage: float
    q_hat: float | None = None
    epsilon_hat: float | None = None


@dataclass(frozen=True)
class MetricsSummary:
    plan_success_rate: float
    help_rate_step: float
    help_rate_trial: float
    avg_set_size: float
    coverage: float
    per_repeat: tuple[RepeatMetrics, ...]
    ci95: dict

    @classmethod
    def aggregate(cls, per_repeat: Sequence[RepeatMetrics]) -> MetricsSummary:
        names = ("success", "help_step", "help_trial", "set_size", "coverage")
        means, ci = {}, {}
        for name in names:
            x = np.array([getattr(r, name) for r in per_repeat])
            means[name] = float(x.mean())
            half = 1.96 * float(x.std(ddof=1)) / math.sqrt(len(x)) if len(x) > 1 else float("nan")
            ci[name] = half
        return cls(means["success"], means["help_step"], means["help_trial"], means["set_size"],
                   means["coverage"], tuple(per_repeat), ci)

    def to_dict(self) -> dict:
        return {
            "plan_success_rate": self.plan_success_rate,
            "help_rate_step": self.help_rate_step,
            "help_rate_trial": self.help_rate_trial,
            "avg_set_size": self.avg_set_size,
            "coverage": self.coverage,
            "ci95_halfwidth": self.ci95,
            "per_repeat": [dataclasses.asdict(r) for r in self.per_repeat],
        }


def repeat_seeds(root: int, repeat: int) -> tuple[int, int, int]:
    """(calibration, test, scorer) seeds for one repeat."""
    state = np.random.SeedSequence([int(root) & (2**63 - 1), repeat]).generate_state(3, dtype=np.uint32)
    return int(state[0]), int(state[1]), int(state[2])


# ---------------------------------------------------------------------------
# per-repeat data

class _MemoScorer:
    """Caches scores by (scenario, step, prefix, draw) so sweeps rescore nothing."""

    def __init__(self, scorer):
        self.inner = scorer
        self.spec = scorer.spec
        self._cache = {}

    def score(self, scenario, step, prefix, rng_seed, draw=0):
        key = (scenario.id, tuple(prefix), rng_seed, draw)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._cache[key] = self.inner.score(scenario, step, prefix, rng_seed, draw)
        return hit


def sequence_record(scorer, scenario, rng_seed: int) -> SequenceRecord:
    """Scores along the branch that picks the most confident acceptable label at each step."""
    steps = []
    prefix = ()
    for t in range(scenario.horizon):
        conf = scorer.score(scenario, t, prefix, rng_seed)
        steps.append(conf)
        prefix += (conf.ranked(scenario.acceptable(prefix))[0],)
    tree = {p: n.acceptable for p, n in scenario.nodes.items()}
    return SequenceRecord(tuple(steps), tree=tree)


def calibrate_on(scenarios, scorer, rng_seed: int, epsilon: float, delta: float, adjust: bool = True) -> CalibratedModel:
    """Fit on explicit scenarios: single-step if every horizon is 1, sequence-level otherwise."""
    records = [sequence_record(scorer, s, rng_seed) for s in scenarios]
    if all(s.horizon == 1 for s in scenarios):
        from .sequence import sequence_score

        return fit_scores([1.0 - sequence_score(r) for r in records], epsilon, delta, adjust=adjust)
    return fit_sequence(records, epsilon, delta, adjust=adjust)


class _SingleStepRepeat:
    def __init__(self, config: ExperimentConfig, repeat: int):
        cal_seed, test_seed, self.score_seed = repeat_seeds(config.seed, repeat)
        self.spec = config.scorer
        cal = sample_batch(config.setting, config.n_cal, cal_seed)
        self.test = sample_batch(config.setting, config.n_test, test_seed)
        q_cal = self._score(cal)
        # single-label data: the reduction picks the only acceptable label
        self.cal_scores = 1.0 - np.where(cal.acceptable, q_cal, -np.inf).max(axis=1)
        self.q = self._score(self.test)
        self.acceptable = self.test.acceptable
        self._freq = {}

    def _score(self, batch, draw=0):
        return score_arrays(self.spec, batch.prior, batch.acceptable, batch.truth, batch.ambiguity,
                            batch.keys, self.score_seed, draw=draw)

    def frequencies(self, draws: int) -> np.ndarray:
        if draws not in self._freq:
            winners = np.stack([ranking_order(self._score(self.test, d + 1))[:, 0] for d in range(draws)])
            self._freq[draws] = ensemble_frequencies(winners)
        return self._freq[draws]

    def evaluate(self, method: Method, epsilon: float, model: CalibratedModel | None) -> RepeatMetrics:
        q, acc = self.q, self.acceptable
        rows = np.arange(len(q))
        kind = method.kind
        if kind == "conformal":
            mask = in_set_mask(model.q_hat, q)
            size = mask.sum(axis=1)
            covered = (mask & acc).any(axis=1)
        elif kind in ("simple", "ensemble"):
            s = q if kind == "simple" else self.frequencies(method.draws)
            size = simple_set_sizes(s, epsilon)
            rank = np.argsort(ranking_order(s), axis=1)
            covered = (np.where(acc, rank, len(LABELS)) < size[:, None]).any(axis=1)
        elif kind == "binary":
            certain = q.max(axis=1) >= method.theta
            size = np.where(certain, 1, len(LABELS))
            covered = np.where(certain, acc[rows, ranking_order(q)[:, 0]], True)
        elif kind == "nohelp":
            size = np.ones(len(q), dtype=int)
            covered = acc[rows, ranking_order(q)[:, 0]]
        else:
            raise ValueError(f"method {kind!r} is not available in simulation")
        # singletons execute their member; otherwise the oracle succeeds iff
        # an acceptable label is in the set, so success coincides with coverage
        helped = size != 1
        return RepeatMetrics(
            success=float(covered.mean()),
            help_step=float(helped.mean()),
            help_trial=float(helped.mean()),
            set_size=float(size.mean()),
            coverage=float(covered.mean()),
            q_hat=model.q_hat if model else None,
            epsilon_hat=model.epsilon_hat if model else None,
        )


class _EpisodeRepeat:
    def __init__(self, config: ExperimentConfig, repeat: int):
        cal_seed, test_seed, self.score_seed = repeat_seeds(config.seed, repeat)
        self.scorer = _MemoScorer(make_scorer(config.scorer))
        cal = sample_scenarios(config.setting, config.n_cal, cal_seed)
        self.test = sample_scenarios(config.setting, config.n_test, test_seed)
        self.records = [self._record(s) for s in cal]
        self.cal_scores = None

    def _record(self, scenario) -> SequenceRecord:
        return sequence_record(self.scorer, scenario, self.score_seed)

    def fit(self, epsilon, delta, adjust):
        return fit_sequence(self.records, epsilon, delta, adjust=adjust)

    def evaluate(self, method: Method, epsilon: float, model: CalibratedModel | None) -> RepeatMetrics:
        episodes = [run_episode(s, model, self.scorer, method, self.score_seed, epsilon=epsilon) for s in self.test]
        steps = sum(e.steps for e in episodes)
        return RepeatMetrics(
            success=float(np.mean([e.outcome == SUCCESS for e in episodes])),
            help_step=sum(sum(e.help) for e in episodes) / steps,
            help_trial=float(np.mean([any(e.help) for e in episodes])),
            set_size=sum(len(p) for e in episodes for p in e.sets) / steps,
            coverage=float(np.mean([e.covered for e in episodes])),
            q_hat=model.q_hat if model else None,
            epsilon_hat=model.epsilon_hat if model else None,
        )


class Experiment:
    """Scenarios and scores for every repeat of ``config``, drawn once."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self._repeats = {}

    def repeat(self, r: int):
        if r not in self._repeats:
            cls = _SingleStepRepeat if self.config.setting in SINGLE_STEP_SETTINGS else _EpisodeRepeat
            self._repeats[r] = cls(self.config, r)
        return self._repeats[r]

    def model(self, r: int, epsilon: float, adjust: bool | None = None) -> CalibratedModel:
        c = self.config
        adjust = c.adjust if adjust is None else adjust
        rep = self.repeat(r)
        if isinstance(rep, _EpisodeRepeat):
            return rep.fit(epsilon, c.delta, adjust)
        return fit_scores(rep.cal_scores, epsilon, c.delta, adjust=adjust)

    def evaluate_repeat(self, r: int, method: Method, epsilon: float) -> RepeatMetrics:
        model = self.model(r, epsilon) if method.kind == "conformal" else None
        return self.repeat(r).evaluate(method, epsilon, model)

    def evaluate(self, method: Method | None = None, epsilon: float | None = None) -> MetricsSummary:
        method = method or self.config.method
        epsilon = self.config.epsilon if epsilon is None else epsilon
        return MetricsSummary.aggregate(
            [self.evaluate_repeat(r, method, epsilon) for r in range(self.config.repeats)]
        )


def _experiment(config_or_experiment) -> Experiment:
    if isinstance(config_or_experiment, Experiment):
        return config_or_experiment
    return Experiment(config_or_experiment)


def run_experiment(config: ExperimentConfig, experiment: Experiment | None = None) -> MetricsSummary:
    """Evaluate ``config.method`` at ``config.epsilon``; writes the summary if ``config.output`` is set."""
    summary = (experiment or Experiment(config)).evaluate()
    if config.output:
        write_summary(config.output, config, summary)
    return summary


# ---------------------------------------------------------------------------
# sweeps and matching

@dataclass(frozen=True)
class CurveRow:
    epsilon: float
    success: float
    help_step: float
    help_trial: float
    set_size: float
    coverage: float


def sweep_epsilon(config_or_experiment, epsilon_grid: Sequence[float], method: Method | None = None) -> list[CurveRow]:
    """One row per epsilon, all on the same scenarios."""
    grid = [float(e) for e in epsilon_grid]
    if not grid or any(not 0.0 < e < 1.0 for e in grid):
        raise ValueError("epsilon grid values must lie in (0, 1)")
    if any(b >= a for a, b in zip(grid, grid[1:])):
        raise ValueError("epsilon grid must be strictly decreasing")
    exp = _experiment(config_or_experiment)
    rows = []
    for eps in grid:
        s = exp.evaluate(method, eps)
        rows.append(CurveRow(eps, s.plan_success_rate, s.help_rate_step, s.help_rate_trial,
                             s.avg_set_size, s.coverage))
    return rows


class NoMatchError(ValueError):
    """The candidate method cannot reach the reference success level."""


@dataclass(frozen=True)
class MatchResult:
    epsilon: float
    success: float
    degenerate: bool = False


def match_operating_point(reference: float | MetricsSummary, candidate: Method, config_or_experiment, *,
                          tol: float = 0.01, eps_min: float = 0.001, eps_max: float = 0.999,
                          max_iter: int = 60) -> MatchResult:
    """Epsilon at which ``candidate`` reaches the reference plan success within ``tol``.

    Success is nonincreasing in epsilon on a fixed experiment, so bisection
    applies.  When even ``eps_max`` already matches (a saturated scorer) the
    grid maximum is returned with ``degenerate=True``.
    """
    if not candidate.uses_epsilon:
        raise ValueError(f"method {candidate.kind!r} has no epsilon to match")
    target = reference.plan_success_rate if isinstance(reference, MetricsSummary) else float(reference)
    exp = _experiment(config_or_experiment)

    def success(eps):
        return exp.evaluate(candidate, eps).plan_success_rate

    s_hi = success(eps_max)
    if abs(s_hi - target) <= tol:
        return MatchResult(eps_max, s_hi, degenerate=True)
    s_lo = success(eps_min)
    if abs(s_lo - target) <= tol:
        return MatchResult(eps_min, s_lo)
    if not s_hi < target < s_lo:
        raise NoMatchError(f"success {target:.4f} is outside [{s_hi:.4f}, {s_lo:.4f}] reachable by {candidate.kind}")
    lo, hi = eps_min, eps_max
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        s = success(mid)
        if best is None or abs(s - target) < abs(best[1] - target):
            best = (mid, s)
        if abs(s - target) <= tol:
            return MatchResult(mid, s)
        if s > target:
            lo = mid
        else:
            hi = mid
    raise NoMatchError(f"closest success {best[1]:.4f} at epsilon {best[0]:.4f} misses {target:.4f} by more than {tol}")


# ---------------------------------------------------------------------------
# coverage distribution

@dataclass(frozen=True)
class CoverageDistribution:
    coverages: tuple[float, ...]
    counts: tuple[int, ...]
    edges: tuple[float, ...]
    fraction_meeting: float  # repeats with coverage >= 1 - epsilon


def coverage_distribution(config_or_experiment, bins: int = 20, adjust: bool | None = None) -> CoverageDistribution:
    """Per-repeat test coverage of the conformal method, as a histogram."""
    exp = _experiment(config_or_experiment)
    c = exp.config
    conformal = Method("conformal")
    cov = []
    for r in range(c.repeats):
        model = exp.model(r, c.epsilon, adjust)
        cov.append(exp.repeat(r).evaluate(conformal, c.epsilon, model).coverage)
    cov = np.array(cov)
    lo, hi = float(cov.min()), float(cov.max())
    if lo == hi:
        counts, edges = np.array([len(cov)]), np.array([lo, hi])
    else:
        counts, edges = np.histogram(cov, bins=bins)
    return CoverageDistribution(
        tuple(float(x) for x in cov), tuple(int(x) for x in counts), tuple(float(x) for x in edges),
        float(np.mean(cov >= 1.0 - c.epsilon - 1e-12)),
    )


# ---------------------------------------------------------------------------
# persistence

def version_string() -> str:
    return f"v{__version__}"


def curve_csv(rows: Sequence[CurveRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in rows:
        w.writerow([f"{getattr(row, name):.6f}" for name in CSV_HEADER])
    return buf.getvalue()


def write_curve(path: str | Path, rows: Sequence[CurveRow]) -> None:
    Path(path).write_text(curve_csv(rows))


def read_curve(path: str | Path) -> list[CurveRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [CurveRow(*(float(x) for x in row)) for row in reader]


def summary_document(config: ExperimentConfig, summary: MetricsSummary | None = None, **extra) -> dict:
    # the output path is left out so reruns into other files stay byte-identical
    settings = {k: v for k, v in config.to_dict().items() if k != "output"}
    doc = {"kind": "experiment-summary", "version": version_string(), "seed": config.seed, "config": settings}
    if summary is not None:
        doc["metrics"] = summary.to_dict()
    doc.update(extra)
    return doc


def dumps(doc: dict) -> str:
    # float repr is shortest round-trip and identical on IEEE-754 platforms
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not serializable: {type(x).__name__}")


def write_summary(path: str | Path, config: ExperimentConfig, summary: MetricsSummary | None = None, **extra) -> None:
    doc = summary_document(config, summary, **extra)
    # NaN half-widths (single repeat) are written as null
    if summary is not None:
        doc["metrics"]["ci95_halfwidth"] = {
            k: (None if isinstance(v, float) and math.isnan(v) else v)
            for k, v in doc["metrics"]["ci95_halfwidth"].items()
        }
    Path(path).write_text(dumps(doc))

