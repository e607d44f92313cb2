"""Periodic roster editing: prune, merge, genesis, fork, specialize."""

from __future__ import annotations

import copy
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .backends.base import Backbone, BackboneRequest, Tag
from .codream import CoDreamParams, inject_insight
from .evolution import style_overlap
from .exceptions import BackendError, ConfigError
from .prompts import DEFAULT_TEMPLATES, Templates
from .state import DEFAULT_COMPETENCE, TEAM_SIZE, Agent, Pool

logger = logging.getLogger(__name__)

KINDS = ("prune", "merge", "genesis", "fork", "specialize")
MIN_WINDOW_FILL = 5
SPECIALIZE_MARGIN = 0.2


@dataclass
class LifecycleParams:
    tau: int = 10
    fork_top_frac: float = 0.10
    merge_cos: float = 0.95
    merge_min_tasks: int = 10
    prune_ratio: float = 0.8
    prune_streak: int = 10
    genesis_min_pool: int = 15
    genesis_affinity: float = 0.4
    min_window_fill: int = MIN_WINDOW_FILL
    specialize_margin: float = SPECIALIZE_MARGIN
    enabled: bool = True

    def __post_init__(self):
        if self.tau < 1:
            raise ConfigError(f"tau must be at least 1, got {self.tau}")
        for name in ("fork_top_frac", "merge_cos", "prune_ratio", "genesis_affinity", "specialize_margin"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        for name in ("merge_min_tasks", "prune_streak", "genesis_min_pool", "min_window_fill"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")


@dataclass
class LifecycleEvent:
    kind: str
    subjects: list
    reason: str
    task_index: int
    suppressed: bool = False
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _mean_window(agent: Agent) -> float:
    m = agent.mean_recent_reward()
    return -math.inf if m is None else m


def _pooled_mean(pool: Pool) -> Optional[float]:
    rewards = [r for a in pool.roster.values() for r in a.recent_rewards()]
    return sum(rewards) / len(rewards) if rewards else None


def _persona_call(backbone: Optional[Backbone], agent: Optional[Agent], template: str, niche: str,
                  templates: Templates, task_index: int, step: str) -> Optional[str]:
    if backbone is None:
        return None
    persona = agent.persona if agent is not None else ""
    request = BackboneRequest(
        persona=persona or "You write assistant personas.",
        prompt=templates.render(template, niche=niche, persona=persona),
        tag=Tag.PERSONA_MUTATION, agent_id=agent.id if agent is not None else None,
        meta={"step": step, "niche": niche, "persona": persona, "task_index": task_index},
    )
    try:
        text = backbone.invoke(request).strip()
    except BackendError as exc:
        logger.warning("%s persona call failed: %s", step, exc)
        return None
    return text or None


def dominant_niche(agent: Agent, niches: list) -> tuple:
    """``(best niche, best q, second-best q)`` over ``niches``; unseen niches read as the prior."""
    scored = sorted(((agent.q(z), z) for z in niches), key=lambda t: (-t[0], t[1]))
    if not scored:
        return None, DEFAULT_COMPETENCE, DEFAULT_COMPETENCE
    second = scored[1][0] if len(scored) > 1 else DEFAULT_COMPETENCE
    return scored[0][1], scored[0][0], second


def top_performers(pool: Pool, params: LifecycleParams) -> list:
    """Top ``ceil(frac * |roster|)`` agents by mean window reward among those with enough evidence."""
    k = math.ceil(params.fork_top_frac * len(pool.roster))
    eligible = [a for a in pool.roster.values() if len(a.reward_window) >= params.min_window_fill]
    eligible.sort(key=lambda a: (-_mean_window(a), a.id))
    return [a.id for a in eligible[:k]]


def op_prune(pool: Pool, params: LifecycleParams, task_index: int) -> list:
    pooled = _pooled_mean(pool)
    if pooled is None:
        return []
    bar = params.prune_ratio * pooled
    doomed = []
    for agent in pool.roster.values():
        recent = agent.recent_rewards()
        if len(recent) < params.prune_streak:
            continue
        tail = recent[-params.prune_streak:]
        if all(r < bar for r in tail):
            doomed.append(agent)
    doomed.sort(key=lambda a: (_mean_window(a), a.id))
    events = []
    for agent in doomed:
        reason = f"last {params.prune_streak} rewards below {params.prune_ratio} x pool mean {pooled:.4f}"
        details = {"pool_mean": pooled, "bar": bar, "tail": agent.recent_rewards()[-params.prune_streak:]}
        if len(pool.roster) - 1 < TEAM_SIZE:
            events.append(LifecycleEvent("prune", [agent.id], reason + "; blocked by pool floor",
                                         task_index, suppressed=True, details=details))
            continue
        pool.retire(agent.id, "prune")
        events.append(LifecycleEvent("prune", [agent.id], reason, task_index, details=details))
    return events


def merge_into(survivor: Agent, other: Agent, dedup: CoDreamParams = CoDreamParams()) -> dict:
    """Fold ``other`` into ``survivor``: elementwise-max q, summed n, deduped stores."""
    for z, q in other.competence.items():
        survivor.competence[z] = max(survivor.q(z), q) if z in survivor.competence else q
    for z, n in other.exposure.items():
        survivor.exposure[z] = survivor.n(z) + n
    kept = dropped = 0
    for entries in list(other.niche_lessons.values()) + [other.meta_insights]:
        for entry in entries:
            if inject_insight(survivor, entry, dedup):
                kept += 1
            else:
                dropped += 1
    return {"inherited": kept, "deduped": dropped}


def op_merge(pool: Pool, params: LifecycleParams, task_index: int,
             dedup: CoDreamParams = CoDreamParams()) -> list:
    agents = [a for a in pool.roster.values() if a.tasks_done >= params.merge_min_tasks]
    pairs = []
    for i in range(len(agents)):
        for j in range(i + 1, len(agents)):
            c = style_overlap(agents[i], agents[j])
            if c > params.merge_cos:
                pairs.append((c, agents[i].id, agents[j].id))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used: set = set()
    events = []
    for c, a_id, b_id in pairs:
        if a_id in used or b_id in used or len(pool.roster) - 1 < TEAM_SIZE:
            continue
        a, b = pool.roster[a_id], pool.roster[b_id]
        survivor, other = (a, b) if (_mean_window(a), b.id) >= (_mean_window(b), a.id) else (b, a)
        details = merge_into(survivor, other, dedup)
        details["cosine"] = c
        pool.retire(other.id, f"merged into {survivor.id}")
        used.update((a_id, b_id))
        events.append(LifecycleEvent("merge", [survivor.id, other.id],
                                     f"profile cosine {c:.4f} > {params.merge_cos}", task_index, details=details))
    return events


def op_genesis(pool: Pool, params: LifecycleParams, task_index: int, backbone: Optional[Backbone] = None,
               templates: Templates = DEFAULT_TEMPLATES) -> list:
    niche = pool.last_niche
    reason = None
    if len(pool.roster) < params.genesis_min_pool:
        reason = f"pool size {len(pool.roster)} < {params.genesis_min_pool}"
    elif niche is not None:
        best = max(a.q(niche) for a in pool.roster.values())
        if best < params.genesis_affinity:
            reason = f"max affinity {best:.4f} on {niche} < {params.genesis_affinity}"
    if reason is None:
        return []
    # lineage only: the most generalist agent has the flattest competence vector
    def spread(a: Agent) -> float:
        vals = [a.q(z) for z in pool.niches_seen] or [DEFAULT_COMPETENCE]
        return float(np.var(vals))
    parent = min(pool.roster.values(), key=lambda a: (spread(a), a.id))
    target = niche or "general"
    persona = _persona_call(backbone, None, "genesis_persona", target, templates, task_index, "genesis_persona")
    if persona is None:
        persona = f"You are a helpful assistant. Focus area: {target}."
    window = deque(maxlen=parent.reward_window.maxlen)
    child = Agent(id=pool.new_agent_id(), persona=persona, reward_window=window,
                  lineage=(parent.id, "genesis"), created_at=task_index)
    pool.add_agent(child)
    return [LifecycleEvent("genesis", [child.id, parent.id], reason, task_index,
                           details={"niche": niche, "persona": persona})]


def op_fork(pool: Pool, params: LifecycleParams, task_index: int, backbone: Optional[Backbone] = None,
            templates: Templates = DEFAULT_TEMPLATES) -> list:
    events = []
    for parent_id in top_performers(pool, params):
        parent = pool.roster[parent_id]
        niche, _, _ = dominant_niche(parent, pool.niches_seen)
        niche = niche or "general"
        persona = _persona_call(backbone, parent, "persona_mutation", niche, templates, task_index, "fork")
        if persona is None:
            persona = f"{parent.persona} Focus area: {niche}."
        clone = Agent(
            id=pool.new_agent_id(), persona=persona,
            competence=dict(parent.competence), exposure=dict(parent.exposure),
            niche_lessons=copy.deepcopy(parent.niche_lessons), meta_insights=copy.deepcopy(parent.meta_insights),
            reward_window=deque(maxlen=parent.reward_window.maxlen),
            lineage=(parent.id, "fork"), ancestry=parent.ancestry + (parent.id,), created_at=task_index,
        )
        pool.add_agent(clone)
        events.append(LifecycleEvent("fork", [clone.id, parent.id],
                                     f"top {params.fork_top_frac:.0%} by mean reward "
                                     f"{parent.mean_recent_reward():.4f}", task_index,
                                     details={"niche": niche, "persona": persona}))
    return events


def op_specialize(pool: Pool, params: LifecycleParams, task_index: int, backbone: Optional[Backbone] = None,
                  templates: Templates = DEFAULT_TEMPLATES) -> list:
    events = []
    for agent_id in top_performers(pool, params):
        agent = pool.roster[agent_id]
        niche, best, second = dominant_niche(agent, pool.niches_seen)
        if niche is None or best - second < params.specialize_margin - 1e-12:
            continue
        persona = _persona_call(backbone, agent, "persona_mutation", niche, templates, task_index, "specialize")
        if persona is None:
            continue
        agent.persona = persona
        events.append(LifecycleEvent("specialize", [agent.id],
                                     f"dominance {best:.4f} - {second:.4f} on {niche}", task_index,
                                     details={"niche": niche, "persona": persona}))
    return events


def is_scheduled(task_index: int, params: LifecycleParams) -> bool:
    return params.enabled and task_index > 0 and task_index % params.tau == 0


def maybe_run(pool: Pool, task_index: int, params: LifecycleParams = LifecycleParams(),
              backbone: Optional[Backbone] = None, templates: Templates = DEFAULT_TEMPLATES,
              dedup: CoDreamParams = CoDreamParams()) -> list:
    """Run the five operators in order when ``task_index`` is on schedule."""
    if not is_scheduled(task_index, params):
        return []
    events = op_prune(pool, params, task_index)
    events += op_merge(pool, params, task_index, dedup)
    events += op_genesis(pool, params, task_index, backbone, templates)
    events += op_fork(pool, params, task_index, backbone, templates)
    events += op_specialize(pool, params, task_index, backbone, templates)
    for e in events:
        logger.info("lifecycle %s %s at task %d: %s", e.kind, e.subjects, task_index, e.reason)
    return events
