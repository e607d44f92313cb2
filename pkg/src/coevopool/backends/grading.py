"""Answer normalization and graders (exact match, token F1, external command, sim oracle)."""

from __future__ import annotations

import json
import re
import shlex
import subprocess
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from typing import Optional

from ..exceptions import GradingError

_TRAILING = ".,;:!?。"
_NUMBER = re.compile(r"[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|[+-]?\.\d+")


class GraderKind(str, Enum):
    EXACT_MATCH = "exact_match"
    F1 = "f1"
    EXTERNAL_COMMAND = "external_command"
    SIM_ORACLE = "sim_oracle"


def normalize_answer(text: Optional[str]) -> str:
    """Trim, case-fold, strip trailing punctuation, canonicalize decimals."""
    if text is None:
        return ""
    s = unicodedata.normalize("NFKC", str(text)).strip().casefold()
    s = s.rstrip(_TRAILING).strip()
    if _NUMBER.fullmatch(s):
        num = Decimal(s.replace(",", "")).normalize()
        return "0" if num == 0 else format(num, "f")
    return s


def exact_match(gold: str, answer: str) -> float:
    return 1.0 if normalize_answer(gold) == normalize_answer(answer) else 0.0


def token_f1(gold: str, answer: str) -> float:
    gold_toks = normalize_answer(gold).split()
    ans_toks = normalize_answer(answer).split()
    if not gold_toks and not ans_toks:
        return 1.0
    common = Counter(gold_toks) & Counter(ans_toks)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(ans_toks)
    recall = overlap / len(gold_toks)
    return 2 * precision * recall / (precision + recall)


@dataclass
class Grader:
    kind: GraderKind = GraderKind.EXACT_MATCH
    command: list = field(default_factory=list)
    timeout: float = 60.0

    def __post_init__(self):
        self.kind = GraderKind(self.kind)
        if isinstance(self.command, str):
            self.command = shlex.split(self.command)
        if self.kind is GraderKind.EXTERNAL_COMMAND and not self.command:
            raise GradingError("external_command grader needs a command")


def run_external(command: list, task, answer: str, timeout: float = 60.0) -> float:
    """Spawn ``command``, send one JSON line with the task and answer, read the reward."""
    record = {
        "task": {"id": task.id, "niche": task.niche, "prompt": task.prompt, "gold": task.gold},
        "answer": answer,
    }
    try:
        proc = subprocess.run(command, input=json.dumps(record) + "\n", capture_output=True,
                              text=True, timeout=timeout, check=False)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise GradingError(f"external grader failed to run: {exc}") from exc
    if proc.returncode != 0:
        raise GradingError(f"external grader exited with status {proc.returncode}: {proc.stderr.strip()[:200]}")
    lines = proc.stdout.splitlines()
    try:
        reward = float(lines[0].strip())
    except (IndexError, ValueError):
        raise GradingError(f"external grader output is not a decimal reward: {proc.stdout[:80]!r}") from None
    if not 0.0 <= reward <= 1.0:
        raise GradingError(f"external grader reward {reward} outside [0, 1]")
    return reward


def grade(task, answer: Optional[str], grader: Grader | str | None = None) -> float:
    """Reward in [0, 1] for ``answer`` on ``task``; a missing answer scores 0."""
    if grader is None:
        grader = Grader(task.grader)
    elif not isinstance(grader, Grader):
        grader = Grader(grader)
    if answer is None:
        return 0.0
    kind = grader.kind
    if kind is GraderKind.EXTERNAL_COMMAND:
        return run_external(grader.command, task, answer, grader.timeout)
    if task.gold is None:
        raise GradingError(f"task {task.id} has no gold answer for grader {kind.value}")
    if kind is GraderKind.EXACT_MATCH:
        return exact_match(task.gold, answer)
    if kind is GraderKind.F1:
        return token_f1(task.gold, answer)
    return 1.0 if answer.strip() == task.gold.strip() else 0.0
