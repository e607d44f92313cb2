"""The online solve-evolve loop and its append-only event log."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

import yaml

from .backends.base import format_experience
from .backends.embed import HashingEmbedder, RemoteEmbedder
from .backends.grading import Grader, GraderKind, grade
from .backends.http import ChatCompletionBackbone
from .backends.sim import SimAgentModel, SimBackbone
from .codream import CoDreamParams, retrieve_experience, run_session, self_reflect, settle_session, should_trigger
from .collaboration import (Member, TeamOutcome, choose_structure, execute, leadership_note, query_vector,
                            record_leadership)
from .evolution import EvolutionParams, update_after_task
from .exceptions import BackendError, ConfigError, GradingError, StreamError
from .lifecycle import LifecycleParams, maybe_run
from .prompts import Templates
from .selection import SelectionWeights, random_team, select_team
from .state import Pool, StructureKind, new_pool
from .tasks import TaskRecord, embed_tasks

logger = logging.getLogger(__name__)

EVENT_SCHEMA = "coevopool-events"
EVENT_VERSION = 1
EVENT_KINDS = (
    "team_selected", "structure_chosen", "member_answer", "outcome_graded", "reflection_stored",
    "codream_session", "insight_routed", "insight_injected", "lifecycle", "error",
)


# --- configuration ----------------------------------------------------------------------------

@dataclass
class Ablations:
    no_codream: bool = False
    symmetric_broadcast: bool = False
    force_voting: bool = False
    random_team: bool = False


@dataclass
class SimConfig:
    default_ability: float = 0.5
    niche_ability: dict = field(default_factory=dict)
    agent_ability: dict = field(default_factory=dict)  # agent id -> {niche: p}
    insight_uplift: float = 0.05
    ceiling: float = 0.95
    uplift_origins: tuple = ("codream",)
    explore: float = 0.1
    keep_prob: float = 0.75
    cross_domain_rate: float = 0.3
    lesson_variants: int = 4


@dataclass
class HttpConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "default"
    timeout: float = 120.0
    attempts: int = 3
    backoff: float = 1.0
    temperature: float = 0.0
    max_tokens: dict = field(default_factory=dict)
    embedding_model: Optional[str] = None


@dataclass
class RunConfig:
    pool_size: int = 5
    seed: int = 0
    persona: str = "You are a helpful assistant."
    backbone: str = "sim"
    retrieval_k: int = 5
    reward_window: int = 20
    evolution: EvolutionParams = field(default_factory=EvolutionParams)
    selection: SelectionWeights = field(default_factory=SelectionWeights)
    codream: CoDreamParams = field(default_factory=CoDreamParams)
    lifecycle: LifecycleParams = field(default_factory=LifecycleParams)
    ablations: Ablations = field(default_factory=Ablations)
    sim: SimConfig = field(default_factory=SimConfig)
    http: HttpConfig = field(default_factory=HttpConfig)
    graders: dict = field(default_factory=dict)  # niche -> {"kind": ..., "command": ...}
    templates_dir: Optional[str] = None

    def __post_init__(self):
        if self.backbone not in ("sim", "http"):
            raise ConfigError(f"backbone must be 'sim' or 'http', got {self.backbone!r}")
        if self.retrieval_k < 1:
            raise ConfigError(f"retrieval_k must be at least 1, got {self.retrieval_k}")
        # the broadcast ablation lives with the other flags but is applied by the routing step
        self.codream = replace(self.codream, retrieval_k=self.retrieval_k,
                               symmetric_broadcast=self.ablations.symmetric_broadcast)

    _NESTED = {"evolution": EvolutionParams, "selection": SelectionWeights, "codream": CoDreamParams,
               "lifecycle": LifecycleParams, "ablations": Ablations, "sim": SimConfig, "http": HttpConfig}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for key, value in d.items():
            sub = cls._NESTED.get(key)
            if sub is not None and isinstance(value, dict):
                sub_known = {f.name for f in fields(sub)}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigError(f"unknown key(s) in {key}: {', '.join(sorted(bad))}")
                if sub is SimConfig and "uplift_origins" in value:
                    value = dict(value, uplift_origins=tuple(value["uplift_origins"]))
                value = sub(**value)
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(data or {})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sim"]["uplift_origins"] = list(self.sim.uplift_origins)
        return d


# --- event log --------------------------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if isinstance(o, (set, frozenset, tuple)):
        return list(o)
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def header_line() -> str:
    return _dumps({"schema": EVENT_SCHEMA, "version": EVENT_VERSION})


class EventLog:
    """Ordered events kept in memory and optionally mirrored to a JSONL file."""

    def __init__(self, path: Optional[str | Path] = None, append: bool = False):
        self.events: list = []
        self._fh = None
        if path is not None:
            exists = Path(path).exists() and Path(path).stat().st_size > 0
            self._fh = open(path, "a" if append else "w", encoding="utf-8")
            if not (append and exists):
                self._fh.write(header_line() + "\n")
                self._fh.flush()

    def append(self, event: dict) -> None:
        self.events.append(event)
        if self._fh is not None:
            self._fh.write(_dumps(event) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def dumps(self) -> str:
        """The log as file text, header included."""
        return "".join([header_line() + "\n"] + [_dumps(e) + "\n" for e in self.events])


def read_events(path_or_lines, strict_version: bool = True) -> Iterator[dict]:
    """Yield events in order; a truncated final line is skipped with a warning."""
    if isinstance(path_or_lines, (str, Path)):
        with open(path_or_lines, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    else:
        lines = list(path_or_lines)
    if lines and lines[-1] == "":
        lines = lines[:-1]
    if not lines:
        return
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError:
        raise StreamError("event log has no readable header line") from None
    if head.get("schema") != EVENT_SCHEMA:
        raise StreamError(f"not an event log (schema {head.get('schema')!r})")
    if strict_version and head.get("version") != EVENT_VERSION:
        raise StreamError(f"event log version {head.get('version')} is not supported "
                          f"(this build reads version {EVENT_VERSION})")
    body = lines[1:]
    for i, line in enumerate(body):
        try:
            yield json.loads(line)
        except json.JSONDecodeError:
            if i == len(body) - 1:
                logger.warning("event log ends in a partial line; stopped before it")
                return
            raise StreamError(f"event log line {i + 2} is corrupt") from None


# --- backbone construction --------------------------------------------------------------------

def build_sim_backbone(config: RunConfig, tasks: Iterable[TaskRecord], pool: Pool) -> SimBackbone:
    sc = config.sim
    def model(ability: dict) -> SimAgentModel:
        return SimAgentModel(true_ability=ability, default_ability=sc.default_ability,
                             insight_uplift=sc.insight_uplift, ceiling=sc.ceiling,
                             uplift_origins=sc.uplift_origins)
    models = {aid: model({**sc.niche_ability, **ab}) for aid, ab in sc.agent_ability.items()}
    return SimBackbone(
        answer_key={t.id: t.gold for t in tasks}, default_model=model(dict(sc.niche_ability)),
        models=models, explore=sc.explore, keep_prob=sc.keep_prob,
        cross_domain_rate=sc.cross_domain_rate, lesson_variants=sc.lesson_variants, rng=pool.rng,
    )


def build_http_backbone(config: RunConfig) -> ChatCompletionBackbone:
    hc = config.http
    return ChatCompletionBackbone(hc.base_url, hc.model, timeout=hc.timeout, attempts=hc.attempts,
                                  backoff=hc.backoff, max_tokens=hc.max_tokens)


def build_embedder(config: RunConfig):
    if config.backbone == "http" and config.http.embedding_model:
        hc = config.http
        return RemoteEmbedder(hc.base_url, hc.embedding_model, timeout=hc.timeout,
                              attempts=hc.attempts, backoff=hc.backoff)
    return HashingEmbedder()


# --- the loop ---------------------------------------------------------------------------------

@dataclass
class RunResult:
    pool: Pool
    log: EventLog
    rewards: list

    @property
    def events(self) -> list:
        return self.log.events

    @property
    def cumulative_reward(self) -> float:
        return float(sum(self.rewards))


class StreamRunner:
    """Processes tasks one at a time against a pool, emitting events.

    The runner keeps no per-run state beyond the pool, so a pool restored
    from a snapshot continues exactly where the original would have.
    """

    def __init__(self, config: RunConfig, pool: Pool, backbone, embedder=None,
                 log: Optional[EventLog] = None, templates: Optional[Templates] = None):
        self.config = config
        self.pool = pool
        self.backbone = backbone
        if isinstance(backbone, SimBackbone):
            backbone.attach(pool.rng)
        self.embedder = embedder or HashingEmbedder()
        self.log = log if log is not None else EventLog()
        self.templates = templates or Templates(config.templates_dir)
        self.rewards: list = []
        self._seq = 0
        self._task_index = 0
        self._task_id = None

    def grader_for(self, task: TaskRecord) -> Grader:
        binding = self.config.graders.get(task.niche)
        if binding is None:
            return Grader(task.grader)
        if isinstance(binding, str):
            return Grader(binding)
        return Grader(GraderKind(binding.get("kind", task.grader)), binding.get("command", []),
                      float(binding.get("timeout", 60.0)))

    def emit(self, kind: str, payload: dict) -> None:
        self.log.append({
            "task_index": self._task_index, "task_id": self._task_id, "seq": self._seq,
            "kind": kind, "payload": payload, "rng_cursor": self.pool.rng.cursor,
        })
        self._seq += 1

    def _members(self, team, task) -> list:
        members = []
        for aid in team.members:
            agent = self.pool.agent(aid)
            entries = retrieve_experience(agent, task.embedding, task.niche, self.config.retrieval_k)
            members.append(Member(aid, agent.persona, tuple(format_experience(e) for e in entries),
                                  tuple(agent.ancestry)))
        return members

    def _grade(self, task, answer, grader, who: str) -> float:
        try:
            return grade(task, answer, grader)
        except GradingError as exc:
            logger.warning("grading %s for %s failed: %s", who, task.id, exc)
            self.emit("error", {"stage": "grade", "agent": who, "error": str(exc)})
            return 0.0

    def process(self, task: TaskRecord) -> float:
        pool, cfg = self.pool, self.config
        if task.embedding is None:
            task.embedding = self.embedder.embed(task.prompt)
        self._task_index = pool.task_counter + 1
        self._task_id = task.id
        self._seq = 0
        pool.observe_niche(task.niche)

        team = random_team(pool, task.niche) if cfg.ablations.random_team else select_team(
            pool, task.niche, cfg.selection)
        self.emit("team_selected", {
            "anchor": team.anchor, "complement": team.complement, "scout": team.scout,
            "niche": task.niche, "roster_size": len(pool.roster),
            "q": [pool.agent(m).q(task.niche) for m in team.members],
            "mode": "random" if cfg.ablations.random_team else "selector",
        })
        members = self._members(team, task)
        query = query_vector(pool, team, task.niche)

        if cfg.ablations.force_voting:
            structure, info = StructureKind.VOTING, {"fallback": "forced"}
        else:
            structure, info = choose_structure(pool, team, task, members[0], self.backbone,
                                               cfg.retrieval_k, self.templates)
        self.emit("structure_chosen", {"structure": structure.value, **info})

        outcome = execute(structure, members, task, self.backbone, self.templates,
                          cfg.http.temperature if cfg.backbone == "http" else 0.0)
        for err in outcome.errors:
            self.emit("error", {"stage": "execute", **err})
        if outcome.degraded:
            self.emit("error", {"stage": "execute", "agent": team.anchor, "error": "degraded to voting"})
        grader = self.grader_for(task)
        for m in members:
            ans = outcome.per_member_answers.get(m.agent_id)
            outcome.member_rewards[m.agent_id] = self._grade(task, ans, grader, m.agent_id) if ans is not None else 0.0
            self.emit("member_answer", {"agent": m.agent_id, "answer": ans,
                                        "reward": outcome.member_rewards[m.agent_id],
                                        "trace": outcome.per_member_traces.get(m.agent_id, "")})
        if outcome.final_answer is None:
            self.emit("error", {"stage": "execute", "agent": None, "error": "no final answer"})
            outcome.reward = 0.0
        else:
            outcome.reward = self._grade(task, outcome.final_answer, grader, "team")

        note = leadership_note(task, members[0], structure, outcome.reward, self.backbone, self.templates)
        record_leadership(pool, team, task, structure, outcome.reward, note, query)
        self.emit("outcome_graded", {
            "final_answer": outcome.final_answer, "reward": outcome.reward, "structure": structure.value,
            "disagreement": outcome.disagreement, "calls": outcome.calls, "leader_note": note,
        })

        update_after_task(pool, team, task.niche, outcome.reward, cfg.evolution, task_index=self._task_index)

        for m in members:
            self.emit("reflection_stored", self_reflect(pool, m, task, outcome, self.backbone, self.embedder,
                                                        cfg.codream, self.templates))

        if not cfg.ablations.no_codream:
            reason = should_trigger(outcome, cfg.codream)
            if reason is not None:
                self._codream(members, task, outcome, reason, grader)

        events = maybe_run(pool, self._task_index, cfg.lifecycle, self.backbone, self.templates, cfg.codream)
        for e in events:
            self.emit("lifecycle", e.to_dict())
        pool.task_counter = self._task_index
        self.rewards.append(outcome.reward)
        return outcome.reward

    def _codream(self, members, task, outcome: TeamOutcome, reason: str, grader) -> None:
        pool, cfg = self.pool, self.config
        session = run_session(pool, members, task, outcome, self.backbone, self.embedder, reason,
                              cfg.codream, self.templates)
        settle_session(pool, session, task, outcome, self.backbone, grader, cfg.codream,
                       self.templates, task.embedding)
        self.emit("codream_session", {
            "trigger": reason, "aborted": session.aborted, "calls": session.calls,
            "transcripts": session.phase_transcripts,
            "proposals": [{"proposer": p.proposer, "scope": p.scope, "text": p.text, "votes": p.votes}
                          for p in session.proposals],
            "candidates": [i.insight_id for i in session.candidate_insights],
            "accepted": [i.insight_id for i in session.accepted_insights],
        })
        by_id = {i.insight_id: i for i in session.candidate_insights}
        for record in session.routing:
            self.emit("insight_routed", dict(record, roster=sorted(pool.roster)))
            insight = by_id[record["insight_id"]]
            for aid in record["stored"]:
                self.emit("insight_injected", {
                    "insight_id": insight.insight_id, "giver": insight.giver, "recipient": aid,
                    "level": insight.level.value, "scope": insight.niche_scope, "text": insight.text,
                    "gate": record.get("gate", {}).get(aid), "median": record.get("median"),
                    "mode": record.get("mode"),
                })

    def run(self, tasks: Iterable[TaskRecord], on_task: Optional[Callable] = None) -> RunResult:
        for task in tasks:
            try:
                self.process(task)
            except BackendError as exc:
                # failures outside the per-member paths still cost only this task
                logger.error("task %s failed: %s", task.id, exc)
                self.emit("error", {"stage": "task", "error": str(exc)})
                self.pool.task_counter = self._task_index
                self.rewards.append(0.0)
            if on_task is not None:
                on_task(self)
        return RunResult(self.pool, self.log, list(self.rewards))


def make_pool(config: RunConfig) -> Pool:
    return new_pool(config.pool_size, config.persona, config.seed, config.reward_window)


def make_backbone(config: RunConfig, tasks: list, pool: Pool):
    if config.backbone == "sim":
        return build_sim_backbone(config, tasks, pool)
    return build_http_backbone(config)


def run_stream(config: RunConfig, tasks: list, pool: Optional[Pool] = None, backbone=None,
               log: Optional[EventLog] = None, embedder=None, on_task: Optional[Callable] = None) -> RunResult:
    """Run ``tasks`` in order; builds the pool and backbone from ``config`` when not given."""
    pool = pool if pool is not None else make_pool(config)
    embedder = embedder or build_embedder(config)
    embed_tasks(tasks, embedder)
    backbone = backbone if backbone is not None else make_backbone(config, tasks, pool)
    runner = StreamRunner(config, pool, backbone, embedder, log)
    return runner.run(tasks, on_task)
