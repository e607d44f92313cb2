"""Prompt template loading; package defaults can be overridden from a directory."""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from string import Template
from typing import Optional

NAMES = (
    "solve", "debate_revise", "critique", "revise", "verify", "split", "subtask", "compose",
    "leadlearn_choose", "leadlearn_note", "reflect",
    "codream_reflect", "codream_contrast", "codream_imagine", "codream_debate", "codream_crystallize",
    "persona_mutation", "genesis_persona",
)


class Templates:
    def __init__(self, override_dir: Optional[str | Path] = None):
        self.override_dir = Path(override_dir) if override_dir else None
        self._cache: dict = {}

    def source(self, name: str) -> str:
        if name not in self._cache:
            text = None
            if self.override_dir is not None:
                path = self.override_dir / f"{name}.txt"
                if path.exists():
                    text = path.read_text(encoding="utf-8")
            if text is None:
                text = resources.files("coevopool").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")
            self._cache[name] = text
        return self._cache[name]

    def render(self, name: str, **fields) -> str:
        return Template(self.source(name)).safe_substitute({k: str(v) for k, v in fields.items()})


DEFAULT_TEMPLATES = Templates()
