"""Episode execution: score, form a set, execute or ask the simulated human."""

from __future__ import annotations

from dataclasses import dataclass

from .baselines import Method, binary_set, ensemble_scores, simple_set
from .core import CalibratedModel, PredictionSet, needs_help, predict_set
from .scenario import Prefix, Scenario, oracle_help

SUCCESS, FAILURE, HALTED = "success", "failure", "halted"


@dataclass(frozen=True)
class Episode:
    scenario_id: str
    policy: str
    sets: tuple[PredictionSet, ...]
    help: tuple[bool, ...]
    chosen: tuple[str | None, ...]
    covered: bool  # the reduced acceptable branch stayed inside every set
    outcome: str

    @property
    def steps(self) -> int:
        return len(self.sets)

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "policy": self.policy,
            "sets": [list(s.ranking) for s in self.sets],
            "help": list(self.help),
            "chosen": list(self.chosen),
            "covered": self.covered,
            "outcome": self.outcome,
        }

    @classmethod
    def from_dict(cls, doc) -> Episode:
        return cls(
            scenario_id=doc["scenario_id"],
            policy=doc["policy"],
            sets=tuple(PredictionSet(tuple(s)) for s in doc["sets"]),
            help=tuple(bool(h) for h in doc["help"]),
            chosen=tuple(doc["chosen"]),
            covered=bool(doc["covered"]),
            outcome=doc["outcome"],
        )


def step_set(method: Method, scorer, scenario: Scenario, step: int, prefix: Prefix, rng_seed: int,
             model: CalibratedModel | None = None, epsilon: float | None = None):
    """(confidence, prediction set) for one step under ``method``."""
    conf = scorer.score(scenario, step, prefix, rng_seed)
    kind = method.kind
    if kind == "conformal":
        if model is None:
            raise ValueError("the conformal method needs a calibrated model")
        return conf, predict_set(model, conf)
    if kind == "simple":
        return conf, simple_set(conf, _eps(epsilon, model))
    if kind == "ensemble":
        freq = ensemble_scores(scorer, scenario, step, method.draws, rng_seed, prefix)
        return conf, simple_set(freq, _eps(epsilon, model))
    if kind == "binary":
        return conf, binary_set(conf, method.theta)
    if kind == "nohelp":
        return conf, PredictionSet(conf.ranked()[:1])
    raise ValueError(f"method {kind!r} is not available in simulated episodes")


def _eps(epsilon, model):
    if epsilon is not None:
        return epsilon
    if model is not None:
        return model.epsilon
    raise ValueError("cumulative methods need epsilon")


def run_episode(scenario: Scenario, model: CalibratedModel | None, scorer, policy: Method | str,
                rng_seed: int, epsilon: float | None = None, human=None, on_step=None) -> Episode:
    """Run one scenario to success, failure, or halt.

    A singleton set is executed directly; any other set (empty included) goes
    to ``human`` (the ranked-choice oracle by default), which returns a label
    or None to halt.  The episode ends at the first unacceptable action.
    ``on_step(step, prefix, prediction_set, label, helped)`` is called after
    every step.
    """
    method = Method(policy) if isinstance(policy, str) else policy
    if model is not None and method.kind == "conformal":
        expected = "sequence" if scenario.horizon > 1 else None
        if expected and model.mode != expected:
            raise ValueError(f"multi-step scenario {scenario.id} needs a sequence-mode model")
    ask = human or oracle_help
    prefix: Prefix = ()
    sets, helps, chosen = [], [], []
    covered = True
    outcome = SUCCESS
    for t in range(scenario.horizon):
        conf, pset = step_set(method, scorer, scenario, t, prefix, rng_seed, model, epsilon)
        acceptable = scenario.acceptable(prefix)
        covered = covered and conf.ranked(acceptable)[0] in pset
        sets.append(pset)
        help_ = needs_help(pset)
        helps.append(help_)
        label = ask(scenario, t, prefix, pset) if help_ else pset.ranking[0]
        chosen.append(label)
        if on_step is not None:
            on_step(t, prefix, pset, label, help_)
        if label is None:
            outcome = HALTED
            break
        if label not in acceptable:
            outcome = FAILURE
            break
        prefix += (label,)
    return Episode(scenario.id, method.kind, tuple(sets), tuple(helps), tuple(chosen), covered, outcome)
