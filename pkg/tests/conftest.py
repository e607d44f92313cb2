import numpy as np
import pytest

from coevopool.backends.base import BackboneRequest
from coevopool.backends.embed import HashingEmbedder
from coevopool.state import Agent, new_pool
from coevopool.tasks import TaskRecord


class ScriptedBackbone:
    """Counting mock: ``script(request)`` returns the reply text; every request is kept."""

    def __init__(self, script=None):
        self.script = script or (lambda req: "ANSWER: 42")
        self.requests: list = []

    def invoke(self, request: BackboneRequest) -> str:
        self.requests.append(request)
        return self.script(request)

    @property
    def calls(self) -> int:
        return len(self.requests)

    def steps(self) -> list:
        return [r.meta.get("step") for r in self.requests]


@pytest.fixture
def embedder():
    return HashingEmbedder()


@pytest.fixture
def task(embedder):
    t = TaskRecord(id="t1", niche="math/algebra", prompt="What is 6 times 7?", gold="42")
    t.embedding = embedder.embed(t.prompt)
    return t


@pytest.fixture
def pool5():
    return new_pool(5, seed=0)


def make_agent(agent_id: str, competence=None, exposure=None, rewards=(), window=20) -> Agent:
    from collections import deque

    a = Agent(id=agent_id, persona=f"persona {agent_id}", competence=dict(competence or {}),
              exposure=dict(exposure or {}), reward_window=deque(maxlen=window))
    for i, r in enumerate(rewards):
        a.reward_window.append((i + 1, float(r)))
    return a


def unit_vector(dim: int, idx: int) -> np.ndarray:
    v = np.zeros(dim)
    v[idx] = 1.0
    return v
