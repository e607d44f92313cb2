"""Estimator-style wrapper around the online loop.

``fit`` starts a fresh pool; ``partial_fit`` keeps consuming tasks with the
current one. There is no ``predict``: every task both uses and updates the pool.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from typing import Optional

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, StreamError
from .runner import Ablations, EventLog, RunConfig, StreamRunner, build_embedder, make_backbone, make_pool
from .tasks import TaskRecord, embed_tasks

logger = logging.getLogger(__name__)


def check_tasks(tasks) -> list:
    tasks = list(tasks)
    bad = [type(t).__name__ for t in tasks if not isinstance(t, TaskRecord)]
    if bad:
        raise StreamError(f"expected TaskRecord items, got {sorted(set(bad))}")
    ids = [t.id for t in tasks]
    if len(set(ids)) != len(ids):
        raise StreamError("task ids must be unique")
    return tasks


class CoEvolvingPool(BaseEstimator):
    def __init__(self, pool_size: int = 5, seed: int = 0, backbone: str = "sim", retrieval_k: int = 5,
                 no_codream: bool = False, symmetric_broadcast: bool = False, force_voting: bool = False,
                 random_team: bool = False, config: Optional[dict] = None):
        self.pool_size = pool_size
        self.seed = seed
        self.backbone = backbone
        self.retrieval_k = retrieval_k
        self.no_codream = no_codream
        self.symmetric_broadcast = symmetric_broadcast
        self.force_voting = force_voting
        self.random_team = random_team
        self.config = config

    def _run_config(self) -> RunConfig:
        base = RunConfig.from_dict(self.config or {})
        ablations = Ablations(no_codream=self.no_codream, symmetric_broadcast=self.symmetric_broadcast,
                              force_voting=self.force_voting, random_team=self.random_team)
        try:
            return replace(base, pool_size=self.pool_size, seed=self.seed, backbone=self.backbone,
                           retrieval_k=self.retrieval_k, ablations=ablations)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def fit(self, tasks, y=None):
        """Run ``tasks`` from a freshly initialised pool."""
        for attr in ("pool_", "runner_", "config_"):
            self.__dict__.pop(attr, None)
        return self.partial_fit(tasks)

    def partial_fit(self, tasks, y=None):
        """Continue the online loop over ``tasks`` with the current pool."""
        tasks = check_tasks(tasks)
        if not hasattr(self, "runner_"):
            self.config_ = self._run_config()
            self.pool_ = make_pool(self.config_)
            self.embedder_ = build_embedder(self.config_)
            backbone = make_backbone(self.config_, tasks, self.pool_)
            self.runner_ = StreamRunner(self.config_, self.pool_, backbone, self.embedder_, EventLog())
        elif hasattr(self.runner_.backbone, "answer_key"):
            self.runner_.backbone.answer_key.update({t.id: t.gold for t in tasks})
        embed_tasks(tasks, self.embedder_)
        self.runner_.run(tasks)
        self.n_tasks_seen_ = len(self.runner_.rewards)
        return self

    @property
    def events_(self) -> list:
        check_is_fitted(self, "runner_")
        return self.runner_.log.events

    @property
    def rewards_(self) -> list:
        check_is_fitted(self, "runner_")
        return list(self.runner_.rewards)

    def score(self, tasks=None, y=None) -> float:
        """Mean reward over every task seen so far; ``tasks`` is accepted for API symmetry and ignored."""
        rewards = self.rewards_
        return sum(rewards) / len(rewards) if rewards else 0.0
