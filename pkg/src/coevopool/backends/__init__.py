"""Agent backbones, embedders and graders."""

from .base import Backbone, BackboneRequest, Embedder, Tag, format_experience, parse_experience
from .embed import HashingEmbedder, RemoteEmbedder, cosine
from .grading import Grader, GraderKind, grade, normalize_answer
from .http import ChatCompletionBackbone
from .sim import SimAgentModel, SimBackbone, simulate_majority_vote

__all__ = [
    "Backbone", "BackboneRequest", "Embedder", "Tag", "format_experience", "parse_experience",
    "HashingEmbedder", "RemoteEmbedder", "cosine", "Grader", "GraderKind", "grade", "normalize_answer",
    "ChatCompletionBackbone", "SimAgentModel", "SimBackbone", "simulate_majority_vote",
]
