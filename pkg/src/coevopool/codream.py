"""Post-task knowledge exchange: trigger, five phases, verification, deficit routing.

Also holds per-agent self-reflection and experience retrieval, which share
the dedup injection path.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backends.base import Backbone, BackboneRequest, Embedder, Tag, format_experience
from .backends.embed import cosine_to_many
from .backends.grading import grade
from .collaboration import Member, TeamOutcome, extract_answer
from .exceptions import BackendError, ConfigError, GradingError
from .prompts import DEFAULT_TEMPLATES, Templates
from .state import DEFAULT_COMPETENCE, Agent, ExperienceEntry, Insight, Level, Origin, Pool

logger = logging.getLogger(__name__)

PHASES = ("reflect", "contrast", "imagine", "debate", "crystallize")

_PROPOSAL = re.compile(r"^\s*PROPOSAL:\s*([^|]+?)\s*\|\s*(.+?)\s*$", re.M)
_KEEP = re.compile(r"KEEP:\s*(.*)")
_INSIGHT = re.compile(r"^\s*INSIGHT:\s*([a-z_]+)\s*\|\s*([^|]+?)\s*\|\s*(.+?)\s*$", re.M)
_LESSON = re.compile(r"^\s*LESSON:\s*(.+?)\s*$", re.M)
_META = re.compile(r"^\s*META:\s*(.+?)\s*$", re.M)


@dataclass
class CoDreamParams:
    theta: float = 0.6
    dedup_cos: float = 0.85
    retrieval_k: int = 5
    symmetric_broadcast: bool = False

    def __post_init__(self):
        for name in ("theta", "dedup_cos"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.retrieval_k < 1:
            raise ConfigError(f"retrieval_k must be at least 1, got {self.retrieval_k}")


@dataclass
class Proposal:
    proposer: str
    scope: Optional[str]  # None means any domain
    text: str
    votes: int = 0


@dataclass
class CoDreamSession:
    task_id: str
    trigger_reason: str
    phase_transcripts: dict = field(default_factory=lambda: {p: {} for p in PHASES})
    proposals: list = field(default_factory=list)
    candidate_insights: list = field(default_factory=list)
    accepted_insights: list = field(default_factory=list)
    routing: list = field(default_factory=list)
    aborted: Optional[str] = None
    calls: int = 0


def should_trigger(outcome: TeamOutcome, params: CoDreamParams = CoDreamParams()) -> Optional[str]:
    if outcome.reward < params.theta:
        return "low_reward"
    if outcome.disagreement:
        return "disagreement"
    return None


# --- retrieval and injection -----------------------------------------------------------------

def _top_k(store: Sequence[ExperienceEntry], query: np.ndarray, k: int) -> list:
    if not store:
        return []
    sims = cosine_to_many(query, [e.embedding for e in store])
    # stable sort keeps insertion order among exact ties
    order = np.argsort(-sims, kind="stable")[:k]
    return [store[i] for i in order]


def retrieve_experience(agent: Agent, task_embedding: np.ndarray, niche: str, k: int = 5) -> list:
    """Top-k from the niche bucket followed by top-k from the meta pool."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    return (_top_k(agent.niche_lessons.get(niche, []), task_embedding, k)
            + _top_k(agent.meta_insights, task_embedding, k))


def inject_insight(agent: Agent, entry: ExperienceEntry, params: CoDreamParams = CoDreamParams()) -> bool:
    """Append ``entry`` to the matching store unless a near-duplicate is already there."""
    store = agent.store_for(entry.level, entry.niche_scope)
    if store:
        sims = cosine_to_many(entry.embedding, [e.embedding for e in store])
        if float(sims.max()) >= params.dedup_cos:
            return False
    store.append(entry.as_entry() if isinstance(entry, Insight) else entry)
    return True


# --- routing ----------------------------------------------------------------------------------

def lower_median(values: Sequence[float]) -> float:
    """Median, taking the lower middle order statistic for even counts."""
    if not values:
        raise ValueError("median of an empty sequence")
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def gate_statistic(agent: Agent, scope: Optional[str]) -> float:
    """Competence on the scoped niche, or mean recent reward for cross-domain insights."""
    if scope is not None:
        return agent.q(scope)
    mean = agent.mean_recent_reward()
    return DEFAULT_COMPETENCE if mean is None else mean


def deficit_candidates(pool: Pool, scope: Optional[str], giver: Optional[str]) -> tuple:
    """Agents strictly below the pool median on the gate statistic; returns ``(ids, median, stats)``."""
    stats = {aid: gate_statistic(a, scope) for aid, a in pool.roster.items()}
    median = lower_median(list(stats.values()))
    ids = [aid for aid in sorted(stats) if stats[aid] < median and aid != giver]
    return ids, median, stats


def route_insight(pool: Pool, insight: Insight, symmetric_broadcast: bool = False) -> list:
    if symmetric_broadcast:
        return [aid for aid in sorted(pool.roster) if aid != insight.giver]
    return deficit_candidates(pool, insight.niche_scope, insight.giver)[0]


def verifier_for(pool: Pool, insight: Insight) -> Optional[str]:
    """Lowest gate statistic outside the giver; ties go to the smallest id.

    Independent of the routing mode so both modes spend the same calls.
    """
    others = [aid for aid in sorted(pool.roster) if aid != insight.giver]
    if not others:
        return None
    return min(others, key=lambda aid: (gate_statistic(pool.roster[aid], insight.niche_scope), aid))


def verify_insight(pool: Pool, insight: Insight, task, original_reward: float, verifier: str,
                   backbone: Backbone, grader=None, templates: Templates = DEFAULT_TEMPLATES,
                   embedding: Optional[np.ndarray] = None, k: int = 5) -> tuple:
    """Re-attempt ``task`` as ``verifier`` with the insight prepended; returns ``(verified, reward)``."""
    agent = pool.agent(verifier)
    own = retrieve_experience(agent, embedding, task.niche, k) if embedding is not None else []
    request = BackboneRequest(
        persona=agent.persona,
        prompt=templates.render("solve", niche=task.niche, prompt=task.prompt),
        tag=Tag.SOLVE,
        injected_experience=[format_experience(insight)] + [format_experience(e) for e in own],
        agent_id=verifier,
        meta={"task_id": task.id, "niche": task.niche, "step": "answer", "purpose": "verify",
              "ancestry": list(agent.ancestry)},
    )
    try:
        answer = extract_answer(backbone.invoke(request))
        reward = grade(task, answer, grader)
    except (BackendError, GradingError) as exc:
        logger.warning("verification of %s failed: %s", insight.insight_id, exc)
        return False, None
    return reward > original_reward, reward


# --- session ----------------------------------------------------------------------------------

class _SessionAbort(Exception):
    pass


def _phase_call(session: CoDreamSession, backbone: Backbone, member: Member, task, phase: str,
                template: str, templates: Templates, **fields) -> str:
    text_fields = {k: v for k, v in fields.items() if isinstance(v, (str, int, float))}
    prompt = templates.render(template, niche=task.niche, prompt=task.prompt, **text_fields)
    meta = {"task_id": task.id, "niche": task.niche, "step": phase, "ancestry": list(member.ancestry)}
    meta.update(fields)
    request = BackboneRequest(persona=member.persona, prompt=prompt, tag=Tag.CODREAM_PHASE,
                              agent_id=member.agent_id, meta=meta)
    session.calls += 1
    try:
        text = backbone.invoke(request)
    except BackendError as exc:
        raise _SessionAbort(f"{phase} call for {member.agent_id} failed: {exc}") from exc
    bucket = session.phase_transcripts[phase]
    bucket[member.agent_id] = (bucket[member.agent_id] + "\n" + text) if member.agent_id in bucket else text
    return text


def _parse_scope(raw: str) -> Optional[str]:
    raw = raw.strip()
    return None if raw in ("*", "", "any", "none") else raw


def _parse_level(raw: str) -> Optional[Level]:
    try:
        return Level(raw.strip().lower())
    except ValueError:
        return None


def run_session(pool: Pool, members: Sequence[Member], task, outcome: TeamOutcome, backbone: Backbone,
                embedder: Embedder, trigger_reason: str, params: CoDreamParams = CoDreamParams(),
                templates: Templates = DEFAULT_TEMPLATES) -> CoDreamSession:
    """Run the five phases and return crystallized (not yet verified) candidates."""
    session = CoDreamSession(task_id=task.id, trigger_reason=trigger_reason)
    rewards = {m.agent_id: outcome.member_rewards.get(m.agent_id, 0.0) for m in members}
    answers = outcome.per_member_answers
    final = outcome.final_answer if outcome.final_answer is not None else "(none)"
    try:
        diagnoses = {}
        for m in members:
            diagnoses[m.agent_id] = _phase_call(
                session, backbone, m, task, "reflect", "codream_reflect", templates,
                own_answer=answers.get(m.agent_id) or "(none)", own_reward=f"{rewards[m.agent_id]:.2f}",
                final_answer=final, reward=f"{outcome.reward:.2f}", success=rewards[m.agent_id] >= params.theta,
            )

        failing = [m for m in members if rewards[m.agent_id] < params.theta]
        succeeding = [m for m in members if rewards[m.agent_id] >= params.theta]
        deltas = {m.agent_id: [] for m in members}
        if succeeding:
            for f in failing:
                for s in succeeding:
                    deltas[f.agent_id].append(_phase_call(
                        session, backbone, f, task, "contrast", "codream_contrast", templates,
                        own_trace=outcome.per_member_traces.get(f.agent_id, ""),
                        own_reward=f"{rewards[f.agent_id]:.2f}",
                        reference=outcome.per_member_traces.get(s.agent_id, ""),
                        source=f" (from {s.agent_id})", reference_agent=s.agent_id,
                    ))
        elif task.gold is not None:
            for f in failing:
                deltas[f.agent_id].append(_phase_call(
                    session, backbone, f, task, "contrast", "codream_contrast", templates,
                    own_trace=outcome.per_member_traces.get(f.agent_id, ""),
                    own_reward=f"{rewards[f.agent_id]:.2f}",
                    reference=f"ANSWER: {task.gold}", source=" (reference answer)", reference_agent=None,
                ))
        else:
            logger.info("task %s: no successful trajectory or gold, contrast skipped", task.id)

        for m in members:
            notes = "\n".join([diagnoses[m.agent_id]] + deltas[m.agent_id])
            text = _phase_call(session, backbone, m, task, "imagine", "codream_imagine", templates,
                               notes=notes, had_delta=bool(deltas[m.agent_id]),
                               success=rewards[m.agent_id] >= params.theta)
            for scope, strategy in _PROPOSAL.findall(text):
                session.proposals.append(Proposal(m.agent_id, _parse_scope(scope), strategy))

        if session.proposals:
            listing = "\n".join(f"{i + 1}. [{p.scope or '*'}] {p.text}" for i, p in enumerate(session.proposals))
            for m in members:
                text = _phase_call(session, backbone, m, task, "debate", "codream_debate", templates,
                                   proposals=listing, n_proposals=len(session.proposals),
                                   proposers=[p.proposer for p in session.proposals])
                keep = _KEEP.search(text)
                picked = set()
                if keep:
                    for tok in re.split(r"[,\s]+", keep.group(1)):
                        if tok.isdigit() and 1 <= int(tok) <= len(session.proposals):
                            picked.add(int(tok) - 1)
                for i in picked:
                    session.proposals[i].votes += 1
        survivors = [p for p in session.proposals if p.votes * 2 > len(members)]

        counter = 0
        for m in members:
            own = [p for p in survivors if p.proposer == m.agent_id]
            if not own:
                continue
            listing = "\n".join(f"- [{p.scope or '*'}] {p.text}" for p in own)
            text = _phase_call(session, backbone, m, task, "crystallize", "codream_crystallize", templates,
                               proposals=listing, items=[(p.scope, p.text) for p in own])
            for level_raw, scope_raw, body in _INSIGHT.findall(text):
                level = _parse_level(level_raw)
                if level is None:
                    logger.info("task %s: unknown insight level %r dropped", task.id, level_raw)
                    continue
                scope = None if level is Level.CROSS_DOMAIN else (_parse_scope(scope_raw) or task.niche)
                if level is Level.TASK_LOCAL:
                    scope = task.niche
                counter += 1
                session.candidate_insights.append(Insight(
                    text=body, embedding=embedder.embed(body), source_task=task.id, level=level,
                    niche_scope=scope, origin=Origin.CODREAM, giver=m.agent_id,
                    insight_id=f"{task.id}:{counter}",
                ))
    except _SessionAbort as exc:
        logger.warning("task %s: session aborted: %s", task.id, exc)
        session.aborted = str(exc)
        session.candidate_insights = []
    return session


def settle_session(pool: Pool, session: CoDreamSession, task, outcome: TeamOutcome, backbone: Backbone,
                   grader=None, params: CoDreamParams = CoDreamParams(),
                   templates: Templates = DEFAULT_TEMPLATES, task_embedding: Optional[np.ndarray] = None) -> None:
    """Verify every candidate, then route and inject the verified ones.

    Fills ``session.accepted_insights`` and one ``session.routing`` record per candidate.
    """
    if session.aborted:
        return
    for insight in session.candidate_insights:
        verifier = verifier_for(pool, insight)
        record = {"insight_id": insight.insight_id, "giver": insight.giver, "level": insight.level.value,
                  "scope": insight.niche_scope, "verifier": verifier, "reattempt_reward": None,
                  "verified": False, "recipients": [], "stored": [], "deduped": []}
        session.routing.append(record)
        if verifier is None:
            continue
        session.calls += 1
        ok, reward = verify_insight(pool, insight, task, outcome.reward, verifier, backbone, grader,
                                    templates, task_embedding, params.retrieval_k)
        record["reattempt_reward"] = reward
        if not ok:
            continue
        insight.verified = True
        _, median, stats = deficit_candidates(pool, insight.niche_scope, insight.giver)
        recipients = route_insight(pool, insight, params.symmetric_broadcast)
        insight.recipients = list(recipients)
        record.update(verified=True, recipients=list(recipients), median=median,
                      gate={aid: stats[aid] for aid in recipients}, mode=(
                          "symmetric_broadcast" if params.symmetric_broadcast else "below_median"))
        session.accepted_insights.append(insight)
        for aid in recipients:
            if inject_insight(pool.agent(aid), insight, params):
                record["stored"].append(aid)
            else:
                record["deduped"].append(aid)


# --- self-reflection --------------------------------------------------------------------------

def self_reflect(pool: Pool, member: Member, task, outcome: TeamOutcome, backbone: Backbone,
                 embedder: Embedder, params: CoDreamParams = CoDreamParams(),
                 templates: Templates = DEFAULT_TEMPLATES) -> dict:
    """One reflection call yielding a niche lesson and a cross-domain meta insight.

    Returns a dict with the parsed texts and whether each was stored.
    """
    agent = pool.agent(member.agent_id)
    own_answer = outcome.per_member_answers.get(member.agent_id)
    own_reward = outcome.member_rewards.get(member.agent_id, 0.0)
    prompt = templates.render("reflect", niche=task.niche, prompt=task.prompt,
                              own_answer=own_answer or "(none)",
                              final_answer=outcome.final_answer or "(none)", reward=f"{outcome.reward:.2f}")
    request = BackboneRequest(
        persona=agent.persona, prompt=prompt, tag=Tag.REFLECT, agent_id=agent.id,
        meta={"task_id": task.id, "niche": task.niche, "step": "reflect", "reward": outcome.reward,
              "own_reward": own_reward, "ancestry": list(agent.ancestry)},
    )
    result = {"agent": agent.id, "lesson": None, "meta": None, "lesson_stored": False, "meta_stored": False}
    try:
        text = backbone.invoke(request)
    except BackendError as exc:
        logger.warning("reflection for %s on %s skipped: %s", agent.id, task.id, exc)
        result["error"] = str(exc)
        return result
    lesson = _LESSON.findall(text)
    meta = _META.findall(text)
    if lesson:
        result["lesson"] = lesson[-1]
        entry = ExperienceEntry(text=lesson[-1], embedding=embedder.embed(lesson[-1]), source_task=task.id,
                                level=Level.SUBDOMAIN, niche_scope=task.niche, origin=Origin.SELF_REFLECTION)
        result["lesson_stored"] = inject_insight(agent, entry, params)
    if meta:
        result["meta"] = meta[-1]
        entry = ExperienceEntry(text=meta[-1], embedding=embedder.embed(meta[-1]), source_task=task.id,
                                level=Level.CROSS_DOMAIN, niche_scope=None, origin=Origin.SELF_REFLECTION)
        result["meta_stored"] = inject_insight(agent, entry, params)
    return result
