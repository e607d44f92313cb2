"""Scalar update rules and derived statistics over pool state."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .exceptions import ConfigError, StateError
from .state import Agent, Pool, TeamAssignment


@dataclass(frozen=True)
class EvolutionParams:
    alpha: float = 0.3
    beta: float = 0.3
    window_W: int = 32

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")
        if self.window_W < 2:
            raise ConfigError(f"window_W must be at least 2, got {self.window_W}")


def _check_unit(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0 or math.isnan(value):
        raise ValueError(f"{name} must lie in [0, 1], got {value}")


def ewma_update(q: float, r: float, alpha: float) -> float:
    _check_unit("q", q)
    _check_unit("r", r)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    out = (1.0 - alpha) * q + alpha * r
    # keep the convex-combination bound exact under rounding
    return min(max(out, min(q, r)), max(q, r))


def update_after_task(pool: Pool, team: TeamAssignment, niche: str, r: float,
                      params: EvolutionParams = EvolutionParams(), task_index: int | None = None) -> None:
    """Propagate the shared team reward into competence, exposure, synergy and windows."""
    _check_unit("r", r)
    members = [pool.roster.get(m) for m in team.members]
    missing = [m for m, a in zip(team.members, members) if a is None]
    if missing:
        raise StateError(f"team members missing from roster: {missing}")
    t = pool.task_counter + 1 if task_index is None else task_index
    for agent in members:
        agent.competence[niche] = ewma_update(agent.q(niche), r, params.alpha)
        agent.exposure[niche] = agent.n(niche) + 1
        agent.reward_window.append((t, float(r)))
    ids = team.members
    for a in range(3):
        for b in range(a + 1, 3):
            sigma, count = pool.synergy.raw(ids[a], ids[b], niche)
            pool.synergy.set(ids[a], ids[b], niche, ewma_update(sigma, r, params.beta), count + 1)


def style_overlap(a: Agent, b: Agent) -> float:
    """Cosine of competence vectors aligned over the union of seen niches.

    A niche present on one side only counts as zero competence on the other.
    """
    keys = sorted(set(a.competence) | set(b.competence))
    dot = sum(a.competence.get(k, 0.0) * b.competence.get(k, 0.0) for k in keys)
    na = math.sqrt(sum(a.competence.get(k, 0.0) ** 2 for k in keys))
    nb = math.sqrt(sum(b.competence.get(k, 0.0) ** 2 for k in keys))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return min(max(dot / (na * nb), 0.0), 1.0)


def under_exposure(n: int) -> float:
    if n < 0:
        raise ValueError(f"exposure count must be non-negative, got {n}")
    return 1.0 / (1.0 + n)


def entropy(labels: Sequence) -> float:
    """Shannon entropy (nats) of the empirical distribution of ``labels``."""
    counts = Counter(labels)
    total = sum(counts.values())
    return -sum((c / total) * math.log(c / total) for c in counts.values())


def specialization_index(anchor_ids_in_window: Sequence, n_pool: int) -> float:
    if len(anchor_ids_in_window) == 0:
        raise ValueError("specialization index needs a non-empty anchor window")
    if n_pool < 2:
        raise ValueError(f"n_pool must be at least 2, got {n_pool}")
    value = 1.0 - entropy(anchor_ids_in_window) / math.log(n_pool)
    return min(max(value, 0.0), 1.0)


def majority_correct_prob(k_agents: int, p: float) -> float:
    """Probability that a strict majority of ``k_agents`` independent voters is correct."""
    if k_agents < 3 or k_agents % 2 == 0:
        raise ValueError(f"k_agents must be odd and at least 3, got {k_agents}")
    _check_unit("p", p)
    return sum(
        math.comb(k_agents, j) * p**j * (1.0 - p) ** (k_agents - j)
        for j in range(k_agents // 2 + 1, k_agents + 1)
    )
