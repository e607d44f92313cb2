"""The agent-invocation boundary shared by the HTTP and simulated backbones."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol, runtime_checkable

import numpy as np

from ..state import ExperienceEntry, Level, Origin


class Tag(str, Enum):
    SOLVE = "solve"
    REFLECT = "reflect"
    CODREAM_PHASE = "codream_phase"
    LEADLEARN = "leadlearn"
    PERSONA_MUTATION = "persona_mutation"


DEFAULT_MAX_TOKENS = {
    Tag.SOLVE: 4096,
    Tag.REFLECT: 2048,
    Tag.CODREAM_PHASE: 2048,
    Tag.LEADLEARN: 512,
    Tag.PERSONA_MUTATION: 512,
}


@dataclass
class BackboneRequest:
    """One call into an agent backbone.

    ``meta`` carries structured context (task id, agent id, protocol step).
    The HTTP backbone ignores it; the simulator reads it instead of parsing
    prompt prose.
    """

    persona: str
    prompt: str
    tag: Tag
    injected_experience: list = field(default_factory=list)
    max_tokens: int = 0
    temperature: float = 0.0
    agent_id: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tag = Tag(self.tag)
        if self.max_tokens <= 0:
            self.max_tokens = DEFAULT_MAX_TOKENS[self.tag]
        if self.temperature < 0:
            raise ValueError(f"temperature must be non-negative, got {self.temperature}")


@runtime_checkable
class Backbone(Protocol):
    def invoke(self, request: BackboneRequest) -> str: ...


@runtime_checkable
class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


_HEADER = re.compile(r"^\[(?P<origin>[a-z_]+)\|(?P<level>[a-z_]+)\|(?P<scope>[^\]]*)\]\s?(?P<body>.*)$", re.S)


def format_experience(entry: ExperienceEntry) -> str:
    """Render a stored entry for prompt injection, tagged with its scope."""
    scope = entry.niche_scope if entry.niche_scope is not None else "*"
    return f"[{entry.origin.value}|{entry.level.value}|{scope}] {entry.text}"


def parse_experience(text: str) -> Optional[tuple]:
    """Inverse of :func:`format_experience`: ``(origin, level, scope, body)`` or None."""
    m = _HEADER.match(text)
    if not m:
        return None
    try:
        origin, level = Origin(m["origin"]), Level(m["level"])
    except ValueError:
        return None
    scope = None if m["scope"] == "*" else m["scope"]
    return origin, level, scope, m["body"]
