"""Task records, JSONL stream I/O, shuffling, and synthetic stream generators."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .backends.grading import GraderKind
from .exceptions import StreamError
from .state import check_niche

logger = logging.getLogger(__name__)


@dataclass
class TaskRecord:
    id: str
    niche: str
    prompt: str
    gold: Optional[str] = None
    grader: str = GraderKind.EXACT_MATCH.value
    embedding: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        check_niche(self.niche)
        self.grader = GraderKind(self.grader).value
        if self.grader != GraderKind.EXTERNAL_COMMAND.value and self.gold is None:
            raise StreamError(f"task {self.id}: grader {self.grader} needs a gold answer")

    def to_dict(self) -> dict:
        d = {"id": self.id, "niche": self.niche, "prompt": self.prompt, "grader": self.grader}
        if self.gold is not None:
            d["gold"] = self.gold
        return d


def _parse_line(line: str, lineno: int) -> TaskRecord:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise StreamError(f"line {lineno}: malformed JSON ({exc.msg})") from None
    if not isinstance(d, dict):
        raise StreamError(f"line {lineno}: expected an object")
    missing = [k for k in ("id", "niche", "prompt") if k not in d]
    if missing:
        raise StreamError(f"line {lineno}: missing field(s) {', '.join(missing)}")
    try:
        return TaskRecord(id=str(d["id"]), niche=d["niche"], prompt=d["prompt"],
                          gold=None if d.get("gold") is None else str(d["gold"]),
                          grader=d.get("grader", GraderKind.EXACT_MATCH.value))
    except (ValueError, StreamError) as exc:
        raise StreamError(f"line {lineno}: {exc}") from None


def parse_stream(lines: Iterable[str], embedder=None) -> list:
    tasks, seen = [], set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        task = _parse_line(line, lineno)
        if task.id in seen:
            raise StreamError(f"line {lineno}: duplicate task id {task.id!r}")
        seen.add(task.id)
        tasks.append(task)
    if embedder is not None:
        embed_tasks(tasks, embedder)
    return tasks


def load_stream(path: str | Path, embedder=None) -> list:
    """Read a JSONL stream in file order; embeddings are filled when ``embedder`` is given."""
    with open(path, encoding="utf-8") as fh:
        return parse_stream(fh, embedder)


def write_stream(tasks: Iterable[TaskRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")


def embed_tasks(tasks: Iterable[TaskRecord], embedder) -> None:
    for t in tasks:
        if t.embedding is None:
            t.embedding = embedder.embed(t.prompt)


def shuffle_stream(tasks: list, seed: int) -> list:
    order = np.random.default_rng(seed).permutation(len(tasks))
    return [tasks[i] for i in order]


# --- synthetic streams ------------------------------------------------------------------------

@dataclass
class SyntheticStream:
    """Generated tasks plus the simulator's base ability per niche."""

    name: str
    tasks: list
    niche_ability: dict


def _make(prefix: str, niches: list, rng: np.random.Generator) -> list:
    tasks = []
    for i, niche in enumerate(niches):
        token = f"K{rng.integers(10**8):08d}"
        tasks.append(TaskRecord(id=f"{prefix}-{i:04d}", niche=niche,
                                prompt=f"[{niche}] synthetic task {i} of the {prefix} stream",
                                gold=token, grader=GraderKind.SIM_ORACLE.value))
    return tasks


def hard_math(n_tasks: int = 382, seed: int = 0) -> SyntheticStream:
    """One large niche and four small ones, interleaved."""
    rng = np.random.default_rng(seed)
    small = ["math/geometry", "math/number_theory", "math/combinatorics", "math/probability"]
    n_small = n_tasks // 9
    niches = ["math/algebra"] * (n_tasks - 4 * n_small) + [z for z in small for _ in range(n_small)]
    niches = [niches[i] for i in rng.permutation(len(niches))]
    ability = {"math/algebra": 0.6, "math/geometry": 0.45, "math/number_theory": 0.4,
               "math/combinatorics": 0.4, "math/probability": 0.5}
    return SyntheticStream("hard_math", _make("hm", niches, rng), ability)


def hard_code(n_tasks: int = 200, seed: int = 0) -> SyntheticStream:
    """Two niches, one markedly harder, interleaved."""
    rng = np.random.default_rng(seed)
    niches = ["code/standard", "code/hard"] * (n_tasks // 2) + ["code/standard"] * (n_tasks % 2)
    niches = [niches[i] for i in rng.permutation(len(niches))]
    return SyntheticStream("hard_code", _make("hc", niches, rng), {"code/standard": 0.65, "code/hard": 0.3})


def aflow(n_tasks: int = 600, seed: int = 0) -> SyntheticStream:
    """Six sequential blocks of equal length."""
    rng = np.random.default_rng(seed)
    blocks = ["qa/hotpot", "qa/drop", "math/gsm", "math/competition", "code/humaneval", "code/mbpp"]
    per = n_tasks // len(blocks)
    niches = [z for z in blocks for _ in range(per)]
    ability = {"qa/hotpot": 0.6, "qa/drop": 0.55, "math/gsm": 0.7, "math/competition": 0.4,
               "code/humaneval": 0.65, "code/mbpp": 0.6}
    return SyntheticStream("aflow", _make("af", niches, rng), ability)


def mixed(n_tasks: int = 400, seed: int = 0, n_niches: int = 5, ability: float = 0.5) -> SyntheticStream:
    """``n_niches`` niches drawn uniformly at random at every step."""
    rng = np.random.default_rng(seed)
    names = [f"mix/n{i}" for i in range(n_niches)]
    niches = [names[i] for i in rng.integers(n_niches, size=n_tasks)]
    return SyntheticStream("mixed", _make("mx", niches, rng), {z: ability for z in names})


def transfer(n_tasks: int = 400, seed: int = 0, n_domains: int = 2, niches_per_domain: int = 2,
             ability: float = 0.35) -> SyntheticStream:
    """Sequential niche blocks grouped by domain so cross-domain insights can carry forward."""
    rng = np.random.default_rng(seed)
    names = [f"d{d}/s{s}" for d in range(n_domains) for s in range(niches_per_domain)]
    per = n_tasks // len(names)
    niches = [z for z in names for _ in range(per)]
    niches += [names[-1]] * (n_tasks - len(niches))
    return SyntheticStream("transfer", _make("tr", niches, rng), {z: ability for z in names})


GENERATORS = {
    "hard_math": hard_math,
    "hard_code": hard_code,
    "aflow": aflow,
    "mixed": mixed,
    "transfer": transfer,
}


def generate(name: str, n_tasks: Optional[int] = None, seed: int = 0, **kwargs) -> SyntheticStream:
    try:
        fn = GENERATORS[name]
    except KeyError:
        raise StreamError(f"unknown generator {name!r}; choose from {', '.join(sorted(GENERATORS))}") from None
    if n_tasks is not None:
        kwargs["n_tasks"] = n_tasks
    return fn(seed=seed, **kwargs)
