"""Synthetic scenario distributions for the tabletop planning settings.

Three single-step settings (attribute, numeric, spatial) draw an instruction
template whose wording implies a distribution over candidate plans; the
human's actual intent is then drawn from that distribution.  The sorting
setting is multi-step with several acceptable actions per step, encoded as a
tree keyed by the prefix of labels chosen so far.

Every step of a scenario is a :class:`StepNode` holding the five option texts
(E is always the catch-all), the acceptable labels, the instruction-implied
prior over labels, and the anchor label the synthetic scorer's evidence
points at.
"""

from __future__ import annotations

import functools
import itertools
import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import LABEL_INDEX, LABELS, OPTION_E_TEXT, PredictionSet

SINGLE_STEP_SETTINGS = ("attribute", "numeric", "spatial")
SETTINGS = SINGLE_STEP_SETTINGS + ("sorting",)
_SETTING_CODE = {name: i + 1 for i, name in enumerate(SETTINGS)}

# Probability that the human's intent is not what the wording suggests; that
# mass is spread uniformly over all five labels, E included.
OFF_TEMPLATE_RATE = 0.15

SCENARIO_FILE_FORMAT = "conformal-planner-scenarios"
SCENARIO_FILE_VERSION = 1

Prefix = tuple[str, ...]


@dataclass(frozen=True)
class StepNode:
    options: tuple[str, ...]
    acceptable: frozenset[str]
    prior: tuple[float, ...]
    anchor: str

    def __post_init__(self):
        if len(self.options) != len(LABELS) or self.options[-1] != OPTION_E_TEXT:
            raise ValueError("a step needs five options with the catch-all last")
        if not self.acceptable:
            raise ValueError("a step needs at least one acceptable label")
        if self.anchor not in self.acceptable:
            raise ValueError("anchor label must be acceptable")


@dataclass(frozen=True)
class Scenario:
    id: str
    setting: str
    instruction: str
    horizon: int
    ambiguity: float
    nodes: Mapping[Prefix, StepNode]
    key: int
    meta: Mapping = field(default_factory=dict)

    def node(self, prefix: Prefix = ()) -> StepNode:
        try:
            return self.nodes[tuple(prefix)]
        except KeyError:
            raise KeyError(f"scenario {self.id}: prefix {prefix!r} is not reachable by acceptable actions") from None

    def acceptable(self, prefix: Prefix = ()) -> frozenset[str]:
        return self.node(prefix).acceptable

    @property
    def option_texts(self) -> tuple[str, ...]:
        return self.node(()).options

    @property
    def multi_label(self) -> bool:
        return any(len(n.acceptable) > 1 for n in self.nodes.values())

    @property
    def truth(self):
        """Single label, label set, or the prefix -> acceptable-set tree."""
        if self.horizon == 1:
            acc = self.acceptable(())
            return next(iter(acc)) if len(acc) == 1 else acc
        return {prefix: node.acceptable for prefix, node in self.nodes.items()}

    def acceptable_sequences(self) -> list[tuple[str, ...]]:
        out = []

        def walk(prefix):
            if len(prefix) == self.horizon:
                out.append(prefix)
                return
            for y in sorted(self.acceptable(prefix)):
                walk(prefix + (y,))

        walk(())
        return out

    def check_tree(self) -> None:
        """Every acceptable prefix shorter than the horizon has a nonempty step."""
        for seq in self.acceptable_sequences():
            if len(seq) != self.horizon:
                raise ValueError(f"scenario {self.id}: branch {seq} stops before the horizon")
            for t in range(self.horizon):
                if not self.acceptable(seq[:t]):
                    raise ValueError(f"scenario {self.id}: empty acceptable set after {seq[:t]}")

    # serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "setting": self.setting,
            "instruction": self.instruction,
            "horizon": self.horizon,
            "ambiguity": self.ambiguity,
            "key": self.key,
            "option_texts": list(self.option_texts),
            "truth": self.truth if isinstance(self.truth, str) else None,
            "nodes": [
                {
                    "prefix": "".join(prefix),
                    "options": list(node.options),
                    "acceptable": sorted(node.acceptable),
                    "prior": list(node.prior),
                    "anchor": node.anchor,
                }
                for prefix, node in sorted(self.nodes.items(), key=lambda kv: (len(kv[0]), kv[0]))
            ],
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> Scenario:
        nodes = {
            tuple(n["prefix"]): StepNode(
                options=tuple(n["options"]),
                acceptable=frozenset(n["acceptable"]),
                prior=tuple(float(p) for p in n["prior"]),
                anchor=n["anchor"],
            )
            for n in doc["nodes"]
        }
        return cls(
            id=doc["id"],
            setting=doc["setting"],
            instruction=doc["instruction"],
            horizon=int(doc["horizon"]),
            ambiguity=float(doc["ambiguity"]),
            nodes=nodes,
            key=int(doc["key"]),
            meta=dict(doc.get("meta", {})),
        )


def save_scenarios(scenarios: Iterable[Scenario], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": SCENARIO_FILE_FORMAT, "version": SCENARIO_FILE_VERSION}) + "\n")
        for s in scenarios:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def load_scenarios(path: str | Path) -> list[Scenario]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != SCENARIO_FILE_FORMAT or header.get("version") != SCENARIO_FILE_VERSION:
            raise ValueError(f"{path}: not a version-{SCENARIO_FILE_VERSION} scenario file (header {header})")
        return [Scenario.from_dict(json.loads(line)) for line in fh if line.strip()]


def intent_ambiguity(weights: Sequence[float]) -> float:
    """Chance that acting on the wording alone picks the wrong plan, scaled to [0, 1].

    0 for a single plausible plan, 1 for five equally plausible ones.
    """
    w = np.asarray(weights, dtype=float)
    k = len(LABELS)
    return float(min(1.0, max(0.0, (1.0 - w.max() / w.sum()) / (1.0 - 1.0 / k))))


# ---------------------------------------------------------------------------
# single-step template families

@dataclass(frozen=True)
class Template:
    instruction: str
    options: tuple[str, ...]  # four listed plans, canonical order
    intent: tuple[float, ...]  # over the four plans plus E
    weight: float  # probability of drawing this wording

    @property
    def ambiguity(self) -> float:
        return intent_ambiguity(self.intent)


COLORS = ("green", "yellow", "blue")

# word -> (probability of the word being used, referent distribution)
_COLOR_WORDS = {
    "green": (0.2, {"green": 1.0}),
    "yellow": (0.2, {"yellow": 1.0}),
    "blue": (0.2, {"blue": 1.0}),
    "cyan": (0.08, {"blue": 0.6, "green": 0.4}),
    "navy": (0.06, {"blue": 0.95, "green": 0.05}),
    "greenish": (0.07, {"green": 0.7, "yellow": 0.2, "blue": 0.1}),
    "grass-colored": (0.06, {"green": 0.9, "yellow": 0.1}),
    "orange": (0.06, {"yellow": 0.8, "green": 0.2}),
    "gold": (0.07, {"yellow": 0.9, "green": 0.1}),
}
_BLOCK_WORDS = {
    "block": (0.55, {"block": 1.0}),
    "cube": (0.08, {"block": 0.9, "bowl": 0.1}),
    "cuboid": (0.06, {"block": 0.9, "bowl": 0.1}),
    "box": (0.07, {"block": 0.8, "bowl": 0.2}),
    "square object": (0.06, {"block": 0.9, "bowl": 0.1}),
    "object": (0.06, {"block": 0.5, "bowl": 0.5}),
    "item": (0.06, {"block": 0.5, "bowl": 0.5}),
    "thing": (0.06, {"block": 0.5, "bowl": 0.5}),
}
_BOWL_WORDS = {
    "bowl": (0.55, {"bowl": 1.0}),
    "container": (0.09, {"bowl": 0.85, "block": 0.15}),
    "round object": (0.08, {"bowl": 0.9, "block": 0.1}),
    "receptacle": (0.08, {"bowl": 0.85, "block": 0.15}),
    "object": (0.06, {"bowl": 0.5, "block": 0.5}),
    "item": (0.07, {"bowl": 0.5, "block": 0.5}),
    "thing": (0.07, {"bowl": 0.5, "block": 0.5}),
}

_QUANTITY_WORDS = {
    "a": (0.05, {1: 1.0}),
    "one": (0.05, {1: 1.0}),
    "a single": (0.04, {1: 1.0}),
    "two": (0.05, {2: 1.0}),
    "a pair of": (0.04, {2: 1.0}),
    "three": (0.04, {3: 1.0}),
    "all": (0.03, {3: 1.0}),
    "a few": (0.18, {2: 0.5, 3: 0.5}),
    "a couple of": (0.18, {2: 0.5, 3: 0.5}),
    "some": (0.17, {2: 0.5, 3: 0.5}),
    "a handful of": (0.17, {2: 0.5, 3: 0.5}),
}
_NUMBER_NAMES = {1: "one block", 2: "two blocks", 3: "three blocks"}

_DIRECTIONS = ("in front of", "behind", "to the left of", "to the right of")
_SPATIAL_WORDS = {
    "in front of": (0.03, {"in front of": 1.0}),
    "behind": (0.03, {"behind": 1.0}),
    "to the left of": (0.03, {"to the left of": 1.0}),
    "to the right of": (0.03, {"to the right of": 1.0}),
    # the human has a standing preference among the four sides
    "near": (0.15, {"in front of": 0.4, "behind": 0.1, "to the left of": 0.25, "to the right of": 0.25}),
    "close to": (0.15, {"in front of": 0.4, "behind": 0.1, "to the left of": 0.25, "to the right of": 0.25}),
    "beside": (0.15, {"in front of": 0.25, "behind": 0.25, "to the left of": 0.25, "to the right of": 0.25}),
    "next to": (0.15, {"in front of": 0.25, "behind": 0.25, "to the left of": 0.25, "to the right of": 0.25}),
    "lateral to": (0.12, {"to the left of": 0.5, "to the right of": 0.5}),
    "along the line of sight of": (0.12, {"in front of": 0.5, "behind": 0.5}),
}


def _listed(plans: Mapping[str, float], order: Sequence[str]) -> tuple[tuple[str, ...], tuple[float, ...]]:
    """Keep the four most likely plans (canonical order on ties); E takes the rest."""
    total = math.fsum(plans.values())
    ranked = sorted(plans, key=lambda p: (-plans[p], order.index(p)))[:4]
    listed = tuple(sorted(ranked, key=order.index))
    w = [plans[p] / total for p in listed]
    return listed, tuple(w) + (max(0.0, 1.0 - math.fsum(w)),)


def _object_text(kind: str, color: str) -> str:
    return f"the {color} {kind}"


def _attribute_templates() -> list[Template]:
    objects = [(kind, c) for kind in ("block", "bowl") for c in COLORS]
    canonical = [
        f"put {_object_text(*src)} {'in' if dst[0] == 'bowl' else 'on'} {_object_text(*dst)}"
        for src in objects for dst in objects if src != dst
    ]
    out = []
    for (pcw, (pcp, pcref)), (pnw, (pnp, pnref)), (qcw, (qcp, qcref)), (qnw, (qnp, qnref)) in itertools.product(
        _COLOR_WORDS.items(), _BLOCK_WORDS.items(), _COLOR_WORDS.items(), _BOWL_WORDS.items()
    ):
        plans: dict[str, float] = {}
        for (pk, pkw), (pc, pcw_) in itertools.product(pnref.items(), pcref.items()):
            for (qk, qkw), (qc, qcw_) in itertools.product(qnref.items(), qcref.items()):
                if (pk, pc) == (qk, qc):
                    continue
                text = f"put {_object_text(pk, pc)} {'in' if qk == 'bowl' else 'on'} {_object_text(qk, qc)}"
                plans[text] = plans.get(text, 0.0) + pkw * pcw_ * qkw * qcw_
        if not plans:
            continue
        listed, intent = _listed(plans, canonical)
        if len(listed) < 4:
            # pad with the closest unrelated plans so four options are always shown
            extra = [c for c in canonical if c not in listed][: 4 - len(listed)]
            listed = tuple(sorted(listed + tuple(extra), key=canonical.index))
            intent = tuple(plans.get(p, 0.0) / math.fsum(plans.values()) for p in listed) + (intent[-1],)
        out.append(Template(
            instruction=f"put the {pcw} {pnw} in the {qcw} {qnw}",
            options=listed,
            intent=intent,
            weight=pcp * pnp * qcp * qnp,
        ))
    return out


def _numeric_templates() -> list[Template]:
    out = []
    for (word, (p, ref)), color in itertools.product(_QUANTITY_WORDS.items(), COLORS):
        other = COLORS[(COLORS.index(color) + 1) % 3]
        noun = "block" if ref == {1: 1.0} else "blocks"
        options = tuple(f"put {_NUMBER_NAMES[k]} in the {color} bowl" for k in (1, 2, 3)) + (
            f"put two blocks in the {other} bowl",
        )
        intent = tuple(ref.get(k, 0.0) for k in (1, 2, 3)) + (0.0, 0.0)
        out.append(Template(f"put {word} {noun} in the {color} bowl", options, intent, p / 3))
    return out


def _spatial_templates() -> list[Template]:
    out = []
    for (word, (p, ref)), c1, c2 in itertools.product(_SPATIAL_WORDS.items(), COLORS, COLORS):
        options = tuple(f"put the {c1} block {d} the {c2} bowl" for d in _DIRECTIONS)
        intent = tuple(ref.get(d, 0.0) for d in _DIRECTIONS) + (0.0,)
        out.append(Template(f"put the {c1} block {word} the {c2} bowl", options, intent, p / 9))
    return out


@functools.cache
def templates(setting: str) -> tuple[Template, ...]:
    builders = {"attribute": _attribute_templates, "numeric": _numeric_templates, "spatial": _spatial_templates}
    if setting not in builders:
        raise ValueError(f"unknown single-step setting {setting!r}; expected one of {SINGLE_STEP_SETTINGS}")
    return tuple(builders[setting]())


@functools.cache
def _template_arrays(setting: str):
    ts = templates(setting)
    w = np.array([t.weight for t in ts])
    return (
        w / w.sum(),
        np.array([t.intent for t in ts]),
        np.array([t.ambiguity for t in ts]),
    )


@dataclass(frozen=True)
class ScenarioBatch:
    """Array form of ``count`` single-step scenarios.

    ``perm[i, j]`` is the canonical index of the plan shown at label j.
    """

    setting: str
    seed: int
    template: np.ndarray
    perm: np.ndarray
    prior: np.ndarray
    truth: np.ndarray
    ambiguity: np.ndarray
    keys: np.ndarray

    def __len__(self) -> int:
        return len(self.truth)

    @property
    def acceptable(self) -> np.ndarray:
        mask = np.zeros(self.prior.shape, dtype=bool)
        mask[np.arange(len(self)), self.truth] = True
        return mask

    def scenario(self, i: int) -> Scenario:
        t = templates(self.setting)[int(self.template[i])]
        options = tuple(t.options[j] for j in self.perm[i]) + (OPTION_E_TEXT,)
        truth = LABELS[int(self.truth[i])]
        node = StepNode(options, frozenset({truth}), tuple(float(p) for p in self.prior[i]), truth)
        return Scenario(
            id=f"{self.setting}-{self.seed}-{i}",
            setting=self.setting,
            instruction=t.instruction,
            horizon=1,
            ambiguity=float(self.ambiguity[i]),
            nodes={(): node},
            key=int(self.keys[i]),
        )

    def scenarios(self) -> list[Scenario]:
        return [self.scenario(i) for i in range(len(self))]


def _rng(setting: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([_SETTING_CODE[setting], int(seed) & (2**63 - 1)])


def sample_batch(setting: str, count: int, rng_seed: int) -> ScenarioBatch:
    """Draw ``count`` i.i.d. single-step scenarios as arrays."""
    if setting not in SINGLE_STEP_SETTINGS:
        raise ValueError(f"unknown single-step setting {setting!r}; expected one of {SINGLE_STEP_SETTINGS}")
    if count < 1:
        raise ValueError("count must be at least 1")
    probs, intents, ambiguity = _template_arrays(setting)
    rng = _rng(setting, rng_seed)
    idx = rng.choice(len(probs), size=count, p=probs)
    perm = np.argsort(rng.random((count, 4)), axis=1)
    intent = intents[idx]
    shown = np.concatenate([np.take_along_axis(intent[:, :4], perm, axis=1), intent[:, 4:]], axis=1)
    prior = (1.0 - OFF_TEMPLATE_RATE) * shown + OFF_TEMPLATE_RATE / len(LABELS)
    u = rng.random(count)
    truth = np.minimum((u[:, None] >= np.cumsum(prior, axis=1)).sum(axis=1), len(LABELS) - 1)
    keys = rng.integers(0, 2**63 - 1, size=count, dtype=np.int64)
    return ScenarioBatch(setting, int(rng_seed), idx, perm, prior, truth, ambiguity[idx], keys)


# ---------------------------------------------------------------------------
# multi-step food sorting

LIKED_FOODS = (
    "corn", "avocado", "celery", "carrot", "tomato", "lettuce", "apple",
    "orange", "pear", "lemon", "peanut butter", "sunny-side-up egg", "egg", "pea",
)
DISLIKED_FOODS = (
    "pretzel", "cracker", "waffle", "mustard", "ketchup", "pizza", "meat patty",
    "cheese", "chicken drumstick", "peach", "mango", "M&M", "Skittles", "donut",
)
SORTING_HORIZON = 3
_SERVE, _ASIDE, _BOX = "blue plate", "green plate", "box"
_DONE = "done, all items are sorted"
# planner's prior that an item of unknown preference is liked
_UNKNOWN_LIKED = 0.5


def _sorting_action_text(action) -> str:
    if action == _DONE:
        return _DONE
    item, dest = action
    return f"put the {item} {'in' if dest == _BOX else 'on'} the {dest}"


def _sorting_acceptable(remaining: Sequence[str], liked: frozenset[str]):
    serve = [(i, _SERVE) for i in remaining if i in liked]
    return serve if serve else [(i, _ASIDE) for i in remaining]


def _sorting_prior(remaining: Sequence[str], liked: frozenset[str], revealed: frozenset[str]) -> dict:
    def p_liked(item):
        if item in revealed:
            return 1.0 if item in liked else 0.0
        return _UNKNOWN_LIKED

    # setting aside is only right once nothing likeable is left
    maybe_liked_left = any(p_liked(i) > 0 for i in remaining)
    w = {}
    for item in remaining:
        w[(item, _SERVE)] = p_liked(item)
        w[(item, _ASIDE)] = (1.0 - p_liked(item)) * (0.5 if maybe_liked_left else 1.0)
        w[(item, _BOX)] = 0.0
    w[_DONE] = 0.0
    return w


def _sorting_instruction(items, liked, revealed) -> str:
    said = []
    for item in items:
        if item in revealed:
            said.append(f"I {'like' if item in liked else 'do not like'} the {item}.")
    return (
        f"On the table: the {items[0]}, the {items[1]} and the {items[2]}. "
        + " ".join(said)
        + f" Put what I like on the {_SERVE} first, then put the rest on the {_ASIDE}."
    )


def make_sorting_scenario(items: Sequence[str], liked: Iterable[str], revealed: Iterable[str],
                          rng: np.random.Generator, scenario_id: str) -> Scenario:
    """Build the acceptable-action tree for one sorting episode."""
    items = tuple(items)
    liked = frozenset(liked) & frozenset(items)
    revealed = frozenset(revealed)
    nodes: dict[Prefix, StepNode] = {}

    def build(prefix: Prefix, remaining: tuple[str, ...]):
        acceptable = _sorting_acceptable(remaining, liked)
        weights = _sorting_prior(remaining, liked, revealed)
        candidates = [(i, d) for i in remaining for d in (_SERVE, _ASIDE, _BOX)] + [_DONE]
        distractors = sorted(
            (c for c in candidates if c not in acceptable),
            key=lambda c: (-weights[c], candidates.index(c)),
        )
        listed = list(acceptable) + distractors[: 4 - len(acceptable)]
        order = rng.permutation(4)
        shown = [listed[j] for j in order]
        total = math.fsum(weights.values())
        w = [weights[c] / total for c in shown]
        intent = np.array(w + [max(0.0, 1.0 - math.fsum(w))])
        prior = (1.0 - OFF_TEMPLATE_RATE) * intent + OFF_TEMPLATE_RATE / len(LABELS)
        acc_labels = sorted(LABELS[shown.index(a)] for a in acceptable)
        anchor = acc_labels[int(rng.integers(len(acc_labels)))]
        nodes[prefix] = StepNode(
            options=tuple(_sorting_action_text(c) for c in shown) + (OPTION_E_TEXT,),
            acceptable=frozenset(acc_labels),
            prior=tuple(float(p) for p in prior),
            anchor=anchor,
        )
        if len(prefix) + 1 < SORTING_HORIZON:
            for label in acc_labels:
                item = shown[LABEL_INDEX[label]][0]
                build(prefix + (label,), tuple(i for i in remaining if i != item))

    build((), items)
    scenario = Scenario(
        id=scenario_id,
        setting="sorting",
        instruction=_sorting_instruction(items, liked, revealed),
        horizon=SORTING_HORIZON,
        ambiguity=(len(items) - len(revealed & frozenset(items))) / len(items),
        nodes=nodes,
        key=int(rng.integers(0, 2**63 - 1)),
        meta={"items": list(items), "liked": sorted(liked), "revealed": sorted(revealed)},
    )
    scenario.check_tree()
    return scenario


def _sample_sorting(count: int, rng_seed: int, n_liked: int | None = None, reveal: str = "subset") -> list[Scenario]:
    rng = _rng("sorting", rng_seed)
    out = []
    for i in range(count):
        k = int(rng.integers(1, 3)) if n_liked is None else n_liked
        chosen = [LIKED_FOODS[j] for j in rng.choice(len(LIKED_FOODS), size=k, replace=False)]
        chosen += [DISLIKED_FOODS[j] for j in rng.choice(len(DISLIKED_FOODS), size=3 - k, replace=False)]
        items = [chosen[j] for j in rng.permutation(3)]
        if reveal == "all":
            revealed = items
        elif reveal == "subset":
            # uniform over nonempty proper subsets
            mask = int(rng.integers(1, 2 ** len(items) - 1))
            revealed = [it for b, it in enumerate(items) if mask >> b & 1]
        else:
            raise ValueError(f"reveal must be 'subset' or 'all', got {reveal!r}")
        out.append(make_sorting_scenario(items, chosen[:k], revealed, rng, f"sorting-{rng_seed}-{i}"))
    return out


def sample_scenarios(setting: str, count: int, rng_seed: int, **kwargs) -> list[Scenario]:
    """Draw ``count`` i.i.d. scenarios; identical output for identical arguments."""
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}; expected one of {SETTINGS}")
    if count < 1:
        raise ValueError("count must be at least 1")
    if setting == "sorting":
        return _sample_sorting(count, rng_seed, **kwargs)
    if kwargs:
        raise TypeError(f"unexpected options for {setting}: {sorted(kwargs)}")
    return sample_batch(setting, count, rng_seed).scenarios()


# ---------------------------------------------------------------------------
# simulated human

HALT = None


def oracle_help(scenario: Scenario, step: int, prefix: Prefix, prediction_set: PredictionSet) -> str | None:
    """Pick the highest-ranked acceptable option in the set, or halt (None)."""
    if len(prefix) != step:
        raise ValueError(f"prefix length {len(prefix)} does not match step {step}")
    acceptable = scenario.acceptable(prefix)
    for label in prediction_set.ranking:
        if label in acceptable:
            return label
    return HALT
