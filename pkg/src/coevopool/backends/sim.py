"""Seeded simulated agents with known per-niche ability.

The simulator reads ``request.meta`` (task id, protocol step, structured
fields) instead of parsing prompt prose. Every random draw goes through the
pool RNG, so a run is a pure function of the seed and the request history.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..exceptions import BackendError
from ..state import Level, PoolRNG, StructureKind
from .base import BackboneRequest, Tag, parse_experience

logger = logging.getLogger(__name__)

_WORDS = (
    "anchor bound carry check chunk cycle digit domain edge factor frame guard hinge index "
    "invert layer limit loop map merge modulo offset order pair parity pivot prefix probe "
    "range ratio reduce scale scan seed shift sign slice solve sort split stack step sum "
    "swap table tally trace unit unwind verify weight window witness bracket cache chain "
    "clamp count delta dual exact fold graph halve heap join lemma match median mirror "
    "norm prune queue recur rotate round search sieve span stride tree union vector zero"
).split()

_LESSONS = (
    "restate the question in your own words before computing anything",
    "enumerate the small cases by hand and look for the pattern",
    "write the final answer once and check its units against the prompt",
    "prefer the direct construction over a clever shortcut when unsure",
)
_META = (
    "double check arithmetic at the very end",
    "a wrong early assumption propagates; list assumptions explicitly",
    "when teammates disagree, re-derive from first principles",
)
_FOCUS = " Focus area: "


def domain_of(niche: str) -> str:
    """Domain tag of a niche label: the prefix before the first ``/``."""
    return niche.split("/", 1)[0]


@dataclass
class SimAgentModel:
    """Ground-truth ability of one simulated agent.

    Each relevant injected entry adds ``insight_uplift`` to the base ability,
    capped at ``ceiling``. A base already at or above the ceiling is left alone.
    """

    true_ability: dict = field(default_factory=dict)
    default_ability: float = 0.5
    insight_uplift: float = 0.05
    ceiling: float = 0.95
    uplift_origins: tuple = ("codream",)

    def __post_init__(self):
        for z, p in self.true_ability.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"ability for {z!r} must lie in [0, 1], got {p}")
        if not 0.0 <= self.ceiling <= 1.0 or self.insight_uplift < 0:
            raise ValueError("ceiling must lie in [0, 1] and uplift must be non-negative")
        self.uplift_origins = tuple(self.uplift_origins)

    def base(self, niche: str) -> float:
        return self.true_ability.get(niche, self.default_ability)

    def is_relevant(self, experience_text: str, niche: str) -> bool:
        parsed = parse_experience(experience_text)
        if parsed is None:
            return False
        origin, level, scope, body = parsed
        if origin not in self.uplift_origins:
            return False
        if level == Level.CROSS_DOMAIN.value:
            return f"domain={domain_of(niche)}" in body
        return scope == niche

    def effective_ability(self, niche: str, injected: list = ()) -> float:
        base = self.base(niche)
        if base >= self.ceiling:
            return base
        relevant = sum(1 for e in injected if self.is_relevant(e, niche))
        return min(self.ceiling, base + self.insight_uplift * relevant)


class SimBackbone:
    """Backbone whose answers are Bernoulli draws on effective ability.

    ``models`` maps agent ids to :class:`SimAgentModel`; agents without an
    entry inherit the model of their nearest forked ancestor, else
    ``default_model``.
    """

    def __init__(self, answer_key: dict, default_model: Optional[SimAgentModel] = None,
                 models: Optional[dict] = None, explore: float = 0.1, keep_prob: float = 0.75,
                 cross_domain_rate: float = 0.3, lesson_variants: int = len(_LESSONS),
                 fail: Optional[Callable[[BackboneRequest], bool]] = None,
                 rng: Optional[PoolRNG] = None):
        self.answer_key = dict(answer_key)
        self.default_model = default_model or SimAgentModel()
        self.models = dict(models or {})
        self.explore = explore
        self.keep_prob = keep_prob
        self.cross_domain_rate = cross_domain_rate
        self.lesson_variants = max(1, min(lesson_variants, len(_LESSONS)))
        self.fail = fail
        self.rng = rng
        self.calls = 0
        self._lock = threading.Lock()

    def attach(self, rng: PoolRNG) -> "SimBackbone":
        self.rng = rng
        return self

    def model_for(self, agent_id: Optional[str], ancestry=()) -> SimAgentModel:
        if agent_id in self.models:
            return self.models[agent_id]
        for ancestor in reversed(list(ancestry)):
            if ancestor in self.models:
                return self.models[ancestor]
        return self.default_model

    # --- helpers ---

    def _wrong(self) -> str:
        return f"W{self.rng.integers(1_000_000):06d}"

    def _words(self, n: int) -> str:
        return " ".join(_WORDS[self.rng.integers(len(_WORDS))] for _ in range(n))

    def _correct(self, p: float) -> bool:
        return self.rng.random() < p

    def invoke(self, request: BackboneRequest) -> str:
        if self.rng is None:
            raise BackendError("simulated backbone has no RNG attached")
        with self._lock:
            self.calls += 1
            if self.fail is not None and self.fail(request):
                raise BackendError("simulated backend failure", status=503)
            return self._respond(request)

    def _respond(self, request: BackboneRequest) -> str:
        meta = request.meta
        step = meta.get("step", "answer")
        niche = meta.get("niche", "")
        model = self.model_for(request.agent_id, meta.get("ancestry", ()))
        ability = model.effective_ability(niche, request.injected_experience)
        gold = self.answer_key.get(meta.get("task_id"))

        if request.tag is Tag.SOLVE:
            return self._solve(step, meta, ability, gold)
        if request.tag is Tag.REFLECT:
            variant = self.rng.integers(self.lesson_variants)
            meta_variant = self.rng.integers(len(_META))
            return (f"LESSON: On {niche} tasks, {_LESSONS[variant]}.\n"
                    f"META: domain={domain_of(niche)} {_META[meta_variant]}.")
        if request.tag is Tag.LEADLEARN:
            if step == "note":
                return f"NOTE: {meta.get('structure')} on {niche} scored {meta.get('reward', 0.0):.2f}"
            return "STRUCTURE: " + self._choose(meta.get("exemplars", [])).value
        if request.tag is Tag.PERSONA_MUTATION:
            base = meta.get("persona") or "You are a helpful assistant."
            return base.split(_FOCUS)[0].rstrip(". ") + "." + _FOCUS + f"{niche}."
        return self._codream(step, meta, niche)

    def _solve(self, step: str, meta: dict, ability: float, gold: Optional[str]) -> str:
        if step == "answer":
            return f"ANSWER: {gold if gold is not None and self._correct(ability) else self._wrong()}"
        if step == "debate_revise":
            own = meta.get("own")
            seen = [own] + list(meta.get("peers", []))
            if gold in seen and self._correct(ability):
                return f"ANSWER: {gold}"
            return f"ANSWER: {own if own is not None else self._wrong()}"
        if step == "critique":
            draft = meta.get("draft_answer")
            if draft == gold:
                return "NO ISSUES"
            if self._correct(ability):
                return f"ISSUE: the draft answer is wrong\nANSWER: {gold}"
            return "NO ISSUES"
        if step == "revise":
            draft, critic = meta.get("draft_answer"), meta.get("critic_answer")
            if meta.get("flagged"):
                if gold in (draft, critic) and self._correct(ability):
                    return f"ANSWER: {gold}"
                return f"ANSWER: {critic if critic is not None else draft}"
            return f"ANSWER: {draft if draft is not None else self._wrong()}"
        if step == "verify":
            final = meta.get("final_answer")
            if final == gold or not self._correct(ability):
                return "OK"
            return f"FLAG\nANSWER: {gold}"
        if step == "split":
            n = 2 + self.rng.integers(2)
            return "\n".join(f"SUBTASK: part {i + 1} of task {meta.get('task_id')}" for i in range(n))
        if step == "subtask":
            return "ANSWER: part-ok" if self._correct(math.sqrt(ability)) else "ANSWER: part-bad"
        if step == "compose":
            parts = meta.get("part_answers", [])
            ok = bool(parts) and all(p == "part-ok" for p in parts)
            return f"ANSWER: {gold if ok and gold is not None else self._wrong()}"
        raise BackendError(f"simulator has no behaviour for solve step {step!r}")

    def _choose(self, exemplars: list) -> StructureKind:
        kinds = list(StructureKind)
        if not exemplars or self.rng.random() < self.explore:
            return kinds[self.rng.integers(len(kinds))]
        totals: dict = {}
        for structure, outcome, _ in exemplars:
            totals.setdefault(structure, []).append(outcome)
        best = max(sorted(totals), key=lambda s: sum(totals[s]) / len(totals[s]))
        return StructureKind(best)

    def _codream(self, step: str, meta: dict, niche: str) -> str:
        if step == "reflect":
            verdict = "my answer held up" if meta.get("success") else "my answer was wrong"
            return f"DIAGNOSIS: on this {niche} task {verdict}."
        if step == "contrast":
            return f"DELTA: the reference {self._words(4)} where I did not."
        if step == "imagine":
            if self.rng.random() < self.cross_domain_rate:
                return f"PROPOSAL: * | domain={domain_of(niche)} {self._words(8)}"
            return f"PROPOSAL: {niche} | {self._words(8)}"
        if step == "debate":
            n = int(meta.get("n_proposals", 0))
            keep = [str(i + 1) for i in range(n) if self.rng.random() < self.keep_prob]
            return "KEEP: " + (",".join(keep) if keep else "none")
        if step == "crystallize":
            lines = []
            for scope, text in meta.get("items", []):
                if scope is None:
                    lines.append(f"INSIGHT: cross_domain | * | {text}")
                else:
                    lines.append(f"INSIGHT: subdomain | {scope} | {text}")
            return "\n".join(lines)
        raise BackendError(f"simulator has no behaviour for phase {step!r}")


def simulate_majority_vote(k_agents: int, p: float, trials: int, seed: int = 0) -> float:
    """Fraction of trials where a strict majority of independent sim voters is correct."""
    rng = PoolRNG(seed)
    key = {f"t{i}": "K" for i in range(trials)}
    backbone = SimBackbone(key, SimAgentModel(default_ability=p), rng=rng)
    wins = 0
    for i in range(trials):
        correct = 0
        for j in range(k_agents):
            req = BackboneRequest(persona="", prompt="", tag=Tag.SOLVE, agent_id=f"v{j}",
                                  meta={"task_id": f"t{i}", "niche": "vote", "step": "answer"})
            if backbone.invoke(req).endswith(" K"):
                correct += 1
        wins += correct * 2 > k_agents
    return wins / trials
