"""Self-organizing pool of LLM agents that co-evolve over an online task stream."""

from .state import Agent, Pool, new_pool, restore, snapshot
from .runner import EventLog, RunConfig, StreamRunner, read_events, run_stream
from .tasks import TaskRecord, generate, load_stream, shuffle_stream

__version__ = "0.1.0"

__all__ = [
    "Agent", "Pool", "new_pool", "restore", "snapshot", "EventLog", "RunConfig", "StreamRunner",
    "read_events", "run_stream", "TaskRecord", "generate", "load_stream", "shuffle_stream",
]
