"""Collaboration structures over a three-member team, and leader structure choice.

Each structure has a fixed invocation budget: voting 3, debate 6,
generator-critic 4, decompose 2 + number of subtasks.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backends.base import Backbone, BackboneRequest, Tag
from .backends.embed import cosine
from .backends.grading import normalize_answer
from .exceptions import BackendError
from .prompts import DEFAULT_TEMPLATES, Templates
from .state import LeadershipRecord, Pool, StructureKind, TeamAssignment

logger = logging.getLogger(__name__)

LEADLEARN_K = 5

_ANSWER = re.compile(r"^\s*ANSWER:\s*(.+?)\s*$", re.M)
_STRUCTURE = re.compile(r"STRUCTURE:\s*([A-Za-z_\- ]+)")
_SUBTASK = re.compile(r"^\s*SUBTASK:\s*(.+?)\s*$", re.M)


@dataclass(frozen=True)
class Member:
    """What a team member brings to a task: identity, persona, retrieved experience."""

    agent_id: str
    persona: str
    experience: tuple = ()
    ancestry: tuple = ()


@dataclass
class TeamOutcome:
    final_answer: Optional[str]
    per_member_answers: dict
    per_member_traces: dict
    structure: StructureKind
    reward: float = 0.0
    disagreement: bool = False
    calls: int = 0
    degraded: bool = False
    errors: list = field(default_factory=list)
    member_rewards: dict = field(default_factory=dict)


def extract_answer(text: str) -> Optional[str]:
    """Last ``ANSWER:`` line, else the last non-empty line."""
    found = _ANSWER.findall(text or "")
    if found:
        return found[-1]
    lines = [ln.strip() for ln in (text or "").splitlines() if ln.strip()]
    return lines[-1] if lines else None


def has_disagreement(answers: dict) -> bool:
    """True when at least two members answered and no normalized answer is shared."""
    present = [normalize_answer(a) for a in answers.values() if a is not None]
    return len(present) >= 2 and len(set(present)) == len(present)


def majority_answer(answers: dict, anchor: str) -> Optional[str]:
    """Plurality of at least two after normalization; otherwise the anchor's answer."""
    groups: dict = {}
    for agent_id, ans in answers.items():
        if ans is not None:
            groups.setdefault(normalize_answer(ans), []).append(ans)
    best = max(groups.values(), key=len, default=[])
    if len(best) >= 2:
        return best[0]
    if answers.get(anchor) is not None:
        return answers[anchor]
    return next((a for a in answers.values() if a is not None), None)


class _Run:
    """Counts invocations for one structure execution and records failures."""

    def __init__(self, backbone: Backbone, task, templates: Templates, temperature: float = 0.0):
        self.backbone = backbone
        self.task = task
        self.templates = templates
        self.temperature = temperature
        self.calls = 0
        self.errors: list = []

    def ask(self, member: Member, template: str, step: str, tag: Tag = Tag.SOLVE,
            extra_experience: Sequence[str] = (), **fields) -> Optional[str]:
        prompt = self.templates.render(template, niche=self.task.niche, prompt=self.task.prompt,
                                       **{k: v for k, v in fields.items() if isinstance(v, str)})
        meta = {"task_id": self.task.id, "niche": self.task.niche, "step": step,
                "ancestry": list(member.ancestry)}
        meta.update({k: v for k, v in fields.items()})
        request = BackboneRequest(
            persona=member.persona, prompt=prompt, tag=tag,
            injected_experience=list(extra_experience) + list(member.experience),
            temperature=self.temperature, agent_id=member.agent_id, meta=meta,
        )
        self.calls += 1
        try:
            return self.backbone.invoke(request)
        except BackendError as exc:
            logger.warning("member %s failed on %s/%s: %s", member.agent_id, self.task.id, step, exc)
            self.errors.append({"agent": member.agent_id, "step": step, "error": str(exc)})
            return None


def _independent_answers(run: _Run, members: Sequence[Member]) -> tuple:
    answers, traces = {}, {}
    for m in members:
        text = run.ask(m, "solve", "answer")
        answers[m.agent_id] = extract_answer(text) if text is not None else None
        traces[m.agent_id] = text or ""
    return answers, traces


def execute_voting(members: Sequence[Member], task, backbone: Backbone,
                   templates: Templates = DEFAULT_TEMPLATES, temperature: float = 0.0) -> TeamOutcome:
    run = _Run(backbone, task, templates, temperature)
    answers, traces = _independent_answers(run, members)
    return TeamOutcome(
        final_answer=majority_answer(answers, members[0].agent_id),
        per_member_answers=answers, per_member_traces=traces, structure=StructureKind.VOTING,
        disagreement=has_disagreement(answers), calls=run.calls, errors=run.errors,
    )


def execute_debate(members: Sequence[Member], task, backbone: Backbone,
                   templates: Templates = DEFAULT_TEMPLATES, temperature: float = 0.0) -> TeamOutcome:
    """Two rounds; the leader's revised answer is final."""
    run = _Run(backbone, task, templates, temperature)
    first, traces = _independent_answers(run, members)
    peers_text = "\n".join(f"- {a}" for a in first.values() if a is not None) or "- (none)"
    second = {}
    for m in members:
        own = first[m.agent_id]
        text = run.ask(m, "debate_revise", "debate_revise", own_answer=own or "(none)",
                       peer_answers=peers_text, own=own,
                       peers=[a for i, a in first.items() if i != m.agent_id])
        second[m.agent_id] = extract_answer(text) if text is not None else None
        traces[m.agent_id] += "\n--- round 2 ---\n" + (text or "")
    leader = members[0].agent_id
    final = second[leader] if second[leader] is not None else first[leader]
    if final is None:
        final = majority_answer(second, leader) or majority_answer(first, leader)
    return TeamOutcome(
        final_answer=final, per_member_answers=first, per_member_traces=traces,
        structure=StructureKind.DEBATE, disagreement=has_disagreement(first),
        calls=run.calls, errors=run.errors,
    )


def execute_generator_critic(members: Sequence[Member], task, backbone: Backbone,
                             templates: Templates = DEFAULT_TEMPLATES, temperature: float = 0.0) -> TeamOutcome:
    """Anchor drafts, complement critiques, anchor revises once, scout verifies."""
    run = _Run(backbone, task, templates, temperature)
    anchor, critic, scout = members
    draft_text = run.ask(anchor, "solve", "answer")
    draft = extract_answer(draft_text) if draft_text is not None else None
    critique = run.ask(critic, "critique", "critique", draft=draft_text or "(no draft)", draft_answer=draft)
    flagged = critique is not None and critique.strip().upper().startswith("ISSUE")
    critic_answer = None
    if critique is not None:
        critic_answer = (_ANSWER.findall(critique) or [None])[-1] if flagged else draft
    revision_text = run.ask(anchor, "revise", "revise", draft=draft_text or "(no draft)",
                            critique=critique or "(no critique)", draft_answer=draft,
                            flagged=flagged, critic_answer=critic_answer)
    revised = extract_answer(revision_text) if revision_text is not None else None
    final = revised if revised is not None else (draft if draft is not None else critic_answer)
    verdict = run.ask(scout, "verify", "verify", answer=final or "(none)", final_answer=final)
    scout_answer = None
    if verdict is not None:
        scout_answer = final if verdict.strip().upper().startswith("OK") else (_ANSWER.findall(verdict) or [None])[-1]
    answers = {anchor.agent_id: draft, critic.agent_id: critic_answer, scout.agent_id: scout_answer}
    traces = {
        anchor.agent_id: (draft_text or "") + "\n--- revision ---\n" + (revision_text or ""),
        critic.agent_id: critique or "",
        scout.agent_id: verdict or "",
    }
    return TeamOutcome(
        final_answer=final, per_member_answers=answers, per_member_traces=traces,
        structure=StructureKind.GENERATOR_CRITIC, disagreement=has_disagreement(answers),
        calls=run.calls, errors=run.errors,
    )


def execute_decompose(members: Sequence[Member], task, backbone: Backbone,
                      templates: Templates = DEFAULT_TEMPLATES, temperature: float = 0.0) -> TeamOutcome:
    """Leader splits into 2-3 subtasks, members solve them round-robin, leader composes.

    Assignment starts from the complement so that with two subtasks every
    member contributes. An unparsable split degrades to voting.
    """
    run = _Run(backbone, task, templates, temperature)
    leader = members[0]
    split = run.ask(leader, "split", "split")
    subtasks = _SUBTASK.findall(split or "")[:3]
    if len(subtasks) < 2:
        logger.info("task %s: unparsable split, degrading to voting", task.id)
        answers, traces = _independent_answers(run, members)
        return TeamOutcome(
            final_answer=majority_answer(answers, leader.agent_id), per_member_answers=answers,
            per_member_traces=traces, structure=StructureKind.DECOMPOSE,
            disagreement=has_disagreement(answers), calls=run.calls, degraded=True,
            errors=run.errors + [{"agent": leader.agent_id, "step": "split", "error": "unparsable split"}],
        )
    order = list(members[1:]) + [leader]
    traces = {m.agent_id: "" for m in members}
    traces[leader.agent_id] = split
    parts = []
    for i, sub in enumerate(subtasks):
        m = order[i % len(order)]
        text = run.ask(m, "subtask", "subtask", subtask=sub, index=i)
        part = extract_answer(text) if text is not None else None
        parts.append(part)
        traces[m.agent_id] += f"\n--- subtask {i + 1} ---\n" + (text or "")
    parts_text = "\n".join(f"{i + 1}. {s} -> {p if p is not None else '(missing)'}"
                           for i, (s, p) in enumerate(zip(subtasks, parts)))
    composed = run.ask(leader, "compose", "compose", parts=parts_text, part_answers=parts)
    traces[leader.agent_id] += "\n--- compose ---\n" + (composed or "")
    final = extract_answer(composed) if composed is not None else None
    answers = {m.agent_id: None for m in members}
    answers[leader.agent_id] = final
    return TeamOutcome(
        final_answer=final, per_member_answers=answers, per_member_traces=traces,
        structure=StructureKind.DECOMPOSE, disagreement=False, calls=run.calls, errors=run.errors,
    )


EXECUTORS = {
    StructureKind.VOTING: execute_voting,
    StructureKind.DEBATE: execute_debate,
    StructureKind.GENERATOR_CRITIC: execute_generator_critic,
    StructureKind.DECOMPOSE: execute_decompose,
}


def execute(structure: StructureKind, members: Sequence[Member], task, backbone: Backbone,
            templates: Templates = DEFAULT_TEMPLATES, temperature: float = 0.0) -> TeamOutcome:
    return EXECUTORS[StructureKind(structure)](members, task, backbone, templates, temperature)


# --- LeadLearn -------------------------------------------------------------------------------

def query_vector(pool: Pool, team: TeamAssignment, niche: str) -> np.ndarray:
    """Niche one-hot over niches seen so far, then the role-ordered competence triple."""
    onehot = [1.0 if z == niche else 0.0 for z in pool.niches_seen]
    if niche not in pool.niches_seen:
        onehot.append(1.0)
    profile = [pool.agent(m).q(niche) for m in team.members]
    return np.array(onehot + profile, dtype=np.float64)


def _align(vec: np.ndarray, n_niches: int) -> np.ndarray:
    # records made before later niches appeared have a shorter one-hot block
    head, tail = vec[:-3], vec[-3:]
    return np.concatenate([np.pad(head, (0, max(0, n_niches - head.shape[0]))), tail])


def retrieve_leadership(pool: Pool, query: np.ndarray, k: int = LEADLEARN_K) -> list:
    n_niches = query.shape[0] - 3
    scored = [(cosine(_align(r.query_embedding, n_niches), query), i, r) for i, r in enumerate(pool.lead_bank)]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [(sim, r) for sim, r, in ((s, r) for s, _, r in scored[:k])]


def choose_structure(pool: Pool, team: TeamAssignment, task, leader: Member, backbone: Backbone,
                     k: int = LEADLEARN_K, templates: Templates = DEFAULT_TEMPLATES) -> tuple:
    """Leader picks a structure from retrieved rounds; returns ``(structure, info)``.

    Fallback chain: nearest retrieved record's structure, then voting.
    """
    query = query_vector(pool, team, task.niche)
    retrieved = retrieve_leadership(pool, query, k)
    exemplars = "\n".join(
        f"- niche={r.niche} profile={[round(q, 3) for _, q in r.team_profile]} "
        f"structure={r.structure.value} outcome={r.outcome:.2f} note={r.reflection}"
        for _, r in retrieved
    ) or "- (no past rounds yet)"
    profile = ", ".join(f"{q:.3f}" for q in query[-3:])
    prompt = templates.render("leadlearn_choose", niche=task.niche, profile=profile, exemplars=exemplars)
    request = BackboneRequest(
        persona=leader.persona, prompt=prompt, tag=Tag.LEADLEARN, agent_id=leader.agent_id,
        meta={"task_id": task.id, "niche": task.niche, "step": "choose", "ancestry": list(leader.ancestry),
              "exemplars": [[r.structure.value, r.outcome, sim] for sim, r in retrieved]},
    )
    info = {"retrieved": len(retrieved), "query_dim": int(query.shape[0]), "fallback": None}
    try:
        text = backbone.invoke(request)
    except BackendError as exc:
        logger.warning("leadlearn call failed for %s: %s", task.id, exc)
        info["fallback"] = "backend_error"
        return StructureKind.VOTING, info
    structure = parse_structure(text)
    if structure is None:
        if retrieved:
            info["fallback"] = "nearest_record"
            return retrieved[0][1].structure, info
        info["fallback"] = "voting"
        return StructureKind.VOTING, info
    return structure, info


def parse_structure(text: str) -> Optional[StructureKind]:
    m = _STRUCTURE.search(text or "")
    if m:
        kind = StructureKind.parse(m.group(1))
        if kind is not None:
            return kind
    lowered = (text or "").lower().replace("-", "_")
    hits = [(lowered.find(k.value), k) for k in StructureKind if k.value in lowered]
    hits += [(lowered.find("generator critic"), StructureKind.GENERATOR_CRITIC)] if "generator critic" in lowered else []
    return min(hits)[1] if hits else None


def leadership_note(task, leader: Member, structure: StructureKind, reward: float, backbone: Backbone,
                    templates: Templates = DEFAULT_TEMPLATES) -> str:
    prompt = templates.render("leadlearn_note", niche=task.niche, structure=structure.value, reward=f"{reward:.2f}")
    request = BackboneRequest(
        persona=leader.persona, prompt=prompt, tag=Tag.LEADLEARN, agent_id=leader.agent_id,
        meta={"task_id": task.id, "niche": task.niche, "step": "note", "structure": structure.value,
              "reward": reward, "ancestry": list(leader.ancestry)},
    )
    try:
        text = backbone.invoke(request).strip()
    except BackendError:
        text = ""
    if text.upper().startswith("NOTE:"):
        text = text[5:].strip()
    return text or f"{structure.value} scored {reward:.2f} on {task.niche}"


def record_leadership(pool: Pool, team: TeamAssignment, task, structure: StructureKind, outcome: float,
                      reflection: str, query: Optional[np.ndarray] = None) -> LeadershipRecord:
    if query is None:
        query = query_vector(pool, team, task.niche)
    record = LeadershipRecord(
        team_profile=[(m, pool.agent(m).q(task.niche)) for m in team.members],
        niche=task.niche, task_embedding=task.embedding if task.embedding is not None else np.zeros(0),
        structure=structure, outcome=float(outcome), reflection=reflection,
        query_embedding=query, task_id=task.id,
    )
    pool.lead_bank.append(record)
    return record
