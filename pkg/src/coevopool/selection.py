"""Niche-conditioned team composition: anchor, complement, scout."""

from __future__ import annotations

from dataclasses import dataclass

from .exceptions import ConfigError, StateError
from .evolution import style_overlap, under_exposure
from .state import Pool, TeamAssignment

TIE_TOL = 1e-9


@dataclass(frozen=True)
class SelectionWeights:
    lambda_q: float = 1.0
    lambda_sigma: float = 0.3
    lambda_omega: float = 0.5
    lambda_u: float = 0.3
    lambda_d: float = 0.5

    def __post_init__(self):
        values = (self.lambda_q, self.lambda_sigma, self.lambda_omega, self.lambda_u, self.lambda_d)
        if any(v < 0 for v in values):
            raise ConfigError(f"selection weights must be non-negative, got {values}")
        if max(values[:3]) <= 0 or max(values[3:]) <= 0:
            raise ConfigError("need a positive complement weight and a positive scout weight")


def argmax_random(scores: dict, rng) -> str:
    """Best-scoring key, ties (within ``TIE_TOL``) broken uniformly with ``rng``.

    Candidates keep their insertion order, so a fixed pool state and RNG
    position always give the same choice.
    """
    if not scores:
        raise StateError("no candidates to select from")
    best = max(scores.values())
    tied = [k for k, v in scores.items() if v >= best - TIE_TOL]
    if len(tied) == 1:
        return tied[0]
    return rng.choice(tied)


def complement_score(pool: Pool, candidate: str, anchor: str, niche: str,
                     weights: SelectionWeights) -> float:
    a, c = pool.agent(anchor), pool.agent(candidate)
    return (weights.lambda_q * c.q(niche)
            + weights.lambda_sigma * pool.synergy.get(candidate, anchor, niche)
            + weights.lambda_omega * (1.0 - style_overlap(c, a)))


def scout_score(pool: Pool, candidate: str, anchor: str, complement: str, niche: str,
                weights: SelectionWeights) -> float:
    k = pool.agent(candidate)
    mean_overlap = 0.5 * (style_overlap(k, pool.agent(anchor)) + style_overlap(k, pool.agent(complement)))
    return weights.lambda_u * under_exposure(k.n(niche)) + weights.lambda_d * (1.0 - mean_overlap)


def select_anchor(pool: Pool, niche: str) -> str:
    if not pool.roster:
        raise StateError("cannot select an anchor from an empty roster")
    return argmax_random({i: a.q(niche) for i, a in pool.roster.items()}, pool.rng)


def select_complement(pool: Pool, anchor: str, niche: str,
                      weights: SelectionWeights = SelectionWeights()) -> str:
    if len(pool.roster) < 2:
        raise StateError("complement selection needs at least 2 agents")
    scores = {i: complement_score(pool, i, anchor, niche, weights) for i in pool.roster if i != anchor}
    return argmax_random(scores, pool.rng)


def select_scout(pool: Pool, anchor: str, complement: str, niche: str,
                 weights: SelectionWeights = SelectionWeights()) -> str:
    if len(pool.roster) < 3:
        raise StateError("scout selection needs at least 3 agents")
    scores = {i: scout_score(pool, i, anchor, complement, niche, weights)
              for i in pool.roster if i not in (anchor, complement)}
    return argmax_random(scores, pool.rng)


def select_team(pool: Pool, niche: str, weights: SelectionWeights = SelectionWeights()) -> TeamAssignment:
    """Greedy one-at-a-time selection; the anchor doubles as leader."""
    if len(pool.roster) < 3:
        raise StateError(f"team selection needs at least 3 agents, roster has {len(pool.roster)}")
    anchor = select_anchor(pool, niche)
    complement = select_complement(pool, anchor, niche, weights)
    scout = select_scout(pool, anchor, complement, niche, weights)
    return TeamAssignment(anchor, complement, scout, niche)


def random_team(pool: Pool, niche: str) -> TeamAssignment:
    """Uniform three-agent team, used when niche-conditioned selection is ablated."""
    if len(pool.roster) < 3:
        raise StateError(f"team selection needs at least 3 agents, roster has {len(pool.roster)}")
    ids = list(pool.roster)
    order = pool.rng.permutation(len(ids))
    return TeamAssignment(ids[order[0]], ids[order[1]], ids[order[2]], niche)
