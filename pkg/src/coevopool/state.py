"""Persistent evolutionary state: agents, pair synergy, leadership bank, RNG.

Everything that survives between tasks lives on a :class:`Pool`. The pool is
owned by a single sequential task loop; the other modules mutate it only
through that loop.
"""

from __future__ import annotations

import copy
import json
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .exceptions import ConfigError, SnapshotError, StateError

DEFAULT_COMPETENCE = 0.5
REWARD_WINDOW = 20
SYNERGY_MIN_CO = 5
TEAM_SIZE = 3

SNAPSHOT_MAGIC = b"COEVOPOOL"
SNAPSHOT_VERSION = 1


class Level(str, Enum):
    TASK_LOCAL = "task_local"
    SUBDOMAIN = "subdomain"
    CROSS_DOMAIN = "cross_domain"


class Origin(str, Enum):
    SELF_REFLECTION = "self_reflection"
    CODREAM = "codream"


class StructureKind(str, Enum):
    VOTING = "voting"
    DEBATE = "debate"
    GENERATOR_CRITIC = "generator_critic"
    DECOMPOSE = "decompose"

    @classmethod
    def parse(cls, text: str) -> Optional["StructureKind"]:
        key = text.strip().lower().replace("-", "_").replace(" ", "_")
        for kind in cls:
            if kind.value == key:
                return kind
        return None


def check_niche(niche: str) -> str:
    if not isinstance(niche, str) or not niche:
        raise ConfigError(f"niche label must be a non-empty string, got {niche!r}")
    return niche


@dataclass
class ExperienceEntry:
    """One stored lesson or insight with its retrieval embedding."""

    text: str
    embedding: np.ndarray
    source_task: str
    level: Level
    niche_scope: Optional[str] = None
    origin: Origin = Origin.SELF_REFLECTION
    giver: Optional[str] = None

    def __post_init__(self):
        self.level = Level(self.level)
        self.origin = Origin(self.origin)
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if (self.level is Level.CROSS_DOMAIN) != (self.niche_scope is None):
            raise ConfigError(
                "niche_scope must be set exactly when level is not cross_domain "
                f"(level={self.level.value}, scope={self.niche_scope!r})"
            )

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "embedding": [float(x) for x in self.embedding],
            "source_task": self.source_task,
            "level": self.level.value,
            "niche_scope": self.niche_scope,
            "origin": self.origin.value,
            "giver": self.giver,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperienceEntry":
        return cls(
            text=d["text"],
            embedding=np.array(d["embedding"], dtype=np.float64),
            source_task=d["source_task"],
            level=Level(d["level"]),
            niche_scope=d["niche_scope"],
            origin=Origin(d["origin"]),
            giver=d["giver"],
        )


@dataclass
class Insight(ExperienceEntry):
    """A crystallized entry on its way to other agents' stores."""

    insight_id: str = ""
    recipients: list = field(default_factory=list)
    verified: bool = False

    def as_entry(self) -> ExperienceEntry:
        return ExperienceEntry(
            text=self.text,
            embedding=self.embedding.copy(),
            source_task=self.source_task,
            level=self.level,
            niche_scope=self.niche_scope,
            origin=self.origin,
            giver=self.giver,
        )

    def to_dict(self) -> dict:
        d = super().to_dict()
        d.update(insight_id=self.insight_id, recipients=list(self.recipients), verified=self.verified)
        return d


@dataclass
class Agent:
    id: str
    persona: str
    competence: dict = field(default_factory=dict)
    exposure: dict = field(default_factory=dict)
    niche_lessons: dict = field(default_factory=dict)
    meta_insights: list = field(default_factory=list)
    reward_window: deque = field(default_factory=lambda: deque(maxlen=REWARD_WINDOW))
    lineage: Optional[tuple] = None  # (parent_id, operator)
    ancestry: tuple = ()  # fork ancestors, oldest first
    created_at: int = 0

    def q(self, niche: str) -> float:
        """Competence on ``niche``; unseen niches read as the prior without being stored."""
        return self.competence.get(niche, DEFAULT_COMPETENCE)

    def n(self, niche: str) -> int:
        return self.exposure.get(niche, 0)

    @property
    def tasks_done(self) -> int:
        return sum(self.exposure.values())

    def recent_rewards(self) -> list:
        return [r for _, r in self.reward_window]

    def mean_recent_reward(self) -> Optional[float]:
        rewards = self.recent_rewards()
        return sum(rewards) / len(rewards) if rewards else None

    def store_for(self, level: Level, niche: Optional[str]) -> list:
        if Level(level) is Level.CROSS_DOMAIN:
            return self.meta_insights
        return self.niche_lessons.setdefault(niche, [])

    def store_size(self) -> int:
        return len(self.meta_insights) + sum(len(v) for v in self.niche_lessons.values())

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "persona": self.persona,
            "competence": dict(self.competence),
            "exposure": dict(self.exposure),
            "niche_lessons": {z: [e.to_dict() for e in es] for z, es in self.niche_lessons.items()},
            "meta_insights": [e.to_dict() for e in self.meta_insights],
            "reward_window": [[t, r] for t, r in self.reward_window],
            "reward_window_size": self.reward_window.maxlen,
            "lineage": list(self.lineage) if self.lineage else None,
            "ancestry": list(self.ancestry),
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Agent":
        window = deque(((int(t), float(r)) for t, r in d["reward_window"]), maxlen=d["reward_window_size"])
        return cls(
            id=d["id"],
            persona=d["persona"],
            competence={k: float(v) for k, v in d["competence"].items()},
            exposure={k: int(v) for k, v in d["exposure"].items()},
            niche_lessons={
                z: [ExperienceEntry.from_dict(e) for e in es] for z, es in d["niche_lessons"].items()
            },
            meta_insights=[ExperienceEntry.from_dict(e) for e in d["meta_insights"]],
            reward_window=window,
            lineage=tuple(d["lineage"]) if d["lineage"] else None,
            ancestry=tuple(d["ancestry"]),
            created_at=d["created_at"],
        )


def _pair_key(i: str, j: str, niche: str) -> tuple:
    if i == j:
        raise StateError(f"synergy is defined for distinct agents, got {i!r} twice")
    a, b = (i, j) if i < j else (j, i)
    return a, b, niche


class SynergyTable:
    """Unordered pair synergy per niche, readable only after enough co-participation."""

    def __init__(self, min_co: int = SYNERGY_MIN_CO):
        self.min_co = min_co
        self.entries: dict = {}

    def get(self, i: str, j: str, niche: str) -> float:
        sigma, count = self.entries.get(_pair_key(i, j, niche), (0.0, 0))
        return sigma if count >= self.min_co else 0.0

    def raw(self, i: str, j: str, niche: str) -> tuple:
        return tuple(self.entries.get(_pair_key(i, j, niche), (0.0, 0)))

    def co_count(self, i: str, j: str, niche: str) -> int:
        return self.raw(i, j, niche)[1]

    def set(self, i: str, j: str, niche: str, sigma: float, count: int) -> None:
        self.entries[_pair_key(i, j, niche)] = (float(sigma), int(count))

    def drop_agent(self, agent_id: str) -> None:
        self.entries = {k: v for k, v in self.entries.items() if agent_id not in k[:2]}

    def to_list(self) -> list:
        return [[a, b, z, s, c] for (a, b, z), (s, c) in sorted(self.entries.items())]

    @classmethod
    def from_list(cls, rows: Iterable, min_co: int = SYNERGY_MIN_CO) -> "SynergyTable":
        table = cls(min_co)
        for a, b, z, s, c in rows:
            table.entries[(a, b, z)] = (float(s), int(c))
        return table


@dataclass
class LeadershipRecord:
    team_profile: list  # [(agent_id, q on the task niche)] in role order
    niche: str
    task_embedding: np.ndarray
    structure: StructureKind
    outcome: float
    reflection: str
    query_embedding: np.ndarray
    task_id: str = ""

    def __post_init__(self):
        self.structure = StructureKind(self.structure)
        self.task_embedding = np.asarray(self.task_embedding, dtype=np.float64)
        self.query_embedding = np.asarray(self.query_embedding, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "team_profile": [[a, float(q)] for a, q in self.team_profile],
            "niche": self.niche,
            "task_embedding": [float(x) for x in self.task_embedding],
            "structure": self.structure.value,
            "outcome": float(self.outcome),
            "reflection": self.reflection,
            "query_embedding": [float(x) for x in self.query_embedding],
            "task_id": self.task_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LeadershipRecord":
        return cls(
            team_profile=[(a, float(q)) for a, q in d["team_profile"]],
            niche=d["niche"],
            task_embedding=np.array(d["task_embedding"], dtype=np.float64),
            structure=StructureKind(d["structure"]),
            outcome=d["outcome"],
            reflection=d["reflection"],
            query_embedding=np.array(d["query_embedding"], dtype=np.float64),
            task_id=d.get("task_id", ""),
        )


@dataclass(frozen=True)
class TeamAssignment:
    anchor: str
    complement: str
    scout: str
    niche: str

    def __post_init__(self):
        if len({self.anchor, self.complement, self.scout}) != 3:
            raise StateError(f"team members must be distinct: {self.members}")

    @property
    def members(self) -> tuple:
        return (self.anchor, self.complement, self.scout)

    @property
    def leader(self) -> str:
        return self.anchor


class PoolRNG:
    """Seeded generator that counts draws, so events can carry an RNG cursor."""

    def __init__(self, seed: int = 0):
        self._gen = np.random.Generator(np.random.PCG64(seed))
        self.cursor = 0
        self._lock = threading.Lock()

    def random(self) -> float:
        with self._lock:
            self.cursor += 1
            return float(self._gen.random())

    def integers(self, n: int) -> int:
        with self._lock:
            self.cursor += 1
            return int(self._gen.integers(n))

    def choice(self, items: Sequence):
        if not items:
            raise StateError("cannot choose from an empty sequence")
        return items[self.integers(len(items))]

    def permutation(self, n: int) -> list:
        with self._lock:
            self.cursor += 1
            return [int(i) for i in self._gen.permutation(n)]

    def get_state(self) -> dict:
        return {"bit_generator": self._gen.bit_generator.state, "cursor": self.cursor}

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state["bit_generator"]
        self.cursor = int(state["cursor"])


@dataclass
class Pool:
    roster: dict
    synergy: SynergyTable
    lead_bank: list
    rng: PoolRNG
    task_counter: int = 0
    next_id: int = 0
    retired: dict = field(default_factory=dict)  # agent_id -> reason
    niches_seen: list = field(default_factory=list)
    last_niche: Optional[str] = None
    seed: int = 0

    def agent(self, agent_id: str) -> Agent:
        try:
            return self.roster[agent_id]
        except KeyError:
            raise StateError(f"agent {agent_id!r} is not in the roster") from None

    def new_agent_id(self) -> str:
        agent_id = f"a{self.next_id:03d}"
        self.next_id += 1
        return agent_id

    def add_agent(self, agent: Agent) -> Agent:
        if agent.id in self.roster or agent.id in self.retired:
            raise StateError(f"agent id {agent.id!r} was already used in this run")
        self.roster[agent.id] = agent
        return agent

    def retire(self, agent_id: str, reason: str) -> Agent:
        agent = self.roster.pop(agent_id)
        self.retired[agent_id] = reason
        self.synergy.drop_agent(agent_id)
        return agent

    def observe_niche(self, niche: str) -> None:
        check_niche(niche)
        if niche not in self.niches_seen:
            self.niches_seen.append(niche)
        self.last_niche = niche

    def to_dict(self) -> dict:
        return {
            "roster": [a.to_dict() for a in self.roster.values()],
            "synergy": self.synergy.to_list(),
            "synergy_min_co": self.synergy.min_co,
            "lead_bank": [r.to_dict() for r in self.lead_bank],
            "rng": self.rng.get_state(),
            "task_counter": self.task_counter,
            "next_id": self.next_id,
            "retired": dict(self.retired),
            "niches_seen": list(self.niches_seen),
            "last_niche": self.last_niche,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pool":
        rng = PoolRNG(d["seed"])
        rng.set_state(d["rng"])
        roster = {}
        for a in d["roster"]:
            agent = Agent.from_dict(a)
            roster[agent.id] = agent
        return cls(
            roster=roster,
            synergy=SynergyTable.from_list(d["synergy"], d["synergy_min_co"]),
            lead_bank=[LeadershipRecord.from_dict(r) for r in d["lead_bank"]],
            rng=rng,
            task_counter=d["task_counter"],
            next_id=d["next_id"],
            retired=dict(d["retired"]),
            niches_seen=list(d["niches_seen"]),
            last_niche=d["last_niche"],
            seed=d["seed"],
        )

    def clone(self) -> "Pool":
        return Pool.from_dict(copy.deepcopy(self.to_dict()))


def new_pool(n: int, persona: str = "You are a helpful assistant.", seed: int = 0,
             reward_window: int = REWARD_WINDOW) -> Pool:
    """Build ``n`` identically initialized agents with empty archives."""
    if n < TEAM_SIZE:
        raise ConfigError(f"pool size must be at least {TEAM_SIZE}, got {n}")
    pool = Pool(roster={}, synergy=SynergyTable(), lead_bank=[], rng=PoolRNG(seed), seed=seed)
    for _ in range(n):
        pool.add_agent(Agent(id=pool.new_agent_id(), persona=persona,
                             reward_window=deque(maxlen=reward_window)))
    return pool


def snapshot(pool: Pool) -> bytes:
    header = SNAPSHOT_MAGIC + b" v%d\n" % SNAPSHOT_VERSION
    body = json.dumps(pool.to_dict(), sort_keys=True, separators=(",", ":"))
    return header + body.encode("utf-8")


def restore(data: bytes) -> Pool:
    head, sep, body = data.partition(b"\n")
    if not sep or not head.startswith(SNAPSHOT_MAGIC + b" v"):
        raise SnapshotError("not a pool snapshot (missing header line)")
    try:
        version = int(head[len(SNAPSHOT_MAGIC) + 2:])
    except ValueError:
        raise SnapshotError(f"unreadable snapshot version field {head!r}") from None
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(
            f"snapshot version {version} is not supported (this build reads version {SNAPSHOT_VERSION})"
        )
    try:
        return Pool.from_dict(json.loads(body.decode("utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise SnapshotError(f"corrupt version {version} snapshot: {exc}") from exc


def pool_state(pool: Pool) -> dict:
    """Plain-data view of the full pool state, for equality checks."""
    return json.loads(json.dumps(pool.to_dict(), sort_keys=True))
