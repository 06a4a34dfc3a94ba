"""Prompt templates stored as editable text files.

A template file has a ``[system]`` section and a ``[user]`` section, each
introduced by that header on its own line. Placeholders are written
``{{name}}``; the values substituted into them are never re-scanned, so page
content that happens to contain braces is safe.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

PLACEHOLDERS = frozenset(("html", "instruction", "schema", "task", "output", "draft"))

REQUIRED = {
    "draft": frozenset(("html", "instruction")),
    "refine": frozenset(("output",)),
    "critique": frozenset(("html", "output")),
}

HTML_BEGIN, HTML_END = "-----BEGIN HTML-----", "-----END HTML-----"
OUTPUT_BEGIN, OUTPUT_END = "-----BEGIN OUTPUT-----", "-----END OUTPUT-----"
INSTRUCTION_BEGIN, INSTRUCTION_END = "-----BEGIN INSTRUCTION-----", "-----END INSTRUCTION-----"

_PLACEHOLDER_RE = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")
_SECTION_RE = re.compile(r"^\[(system|user)\][ \t]*$", re.M)


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    stage: str
    system: str
    user: str
    source: str = ""

    def __post_init__(self) -> None:
        if self.stage not in REQUIRED:
            raise TemplateError(f"unknown stage {self.stage!r}")
        used = self.placeholders
        unknown = used - PLACEHOLDERS
        if unknown:
            raise TemplateError(f"unknown placeholder(s): {', '.join(sorted(unknown))}")
        missing = REQUIRED[self.stage] - used
        if missing:
            raise TemplateError(f"{self.stage} template lacks placeholder(s): {', '.join(sorted(missing))}")
        for part in (self.system, self.user):
            stray = _PLACEHOLDER_RE.sub("", part)
            if "{{" in stray or "}}" in stray:
                raise TemplateError("malformed placeholder")

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER_RE.findall(self.system) + _PLACEHOLDER_RE.findall(self.user))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.source.encode("utf-8")).hexdigest()

    @classmethod
    def parse(cls, stage: str, text: str) -> PromptTemplate:
        parts = _SECTION_RE.split(text)
        # parts: [preamble, name, body, name, body, ...]
        sections: dict[str, str] = {}
        for name, body in zip(parts[1::2], parts[2::2]):
            if name in sections:
                raise TemplateError(f"duplicate [{name}] section")
            sections[name] = body.strip("\n")
        if "user" not in sections:
            raise TemplateError("template needs a [user] section")
        return cls(stage, sections.get("system", ""), sections["user"], text)

    @classmethod
    def load(cls, stage: str, path: str | Path) -> PromptTemplate:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise TemplateError(f"cannot read template {path}: {exc}") from exc
        return cls.parse(stage, text)

    def render(self, **values: str) -> tuple[str, str]:
        missing = self.placeholders - values.keys()
        if missing:
            raise TemplateError(f"no value for placeholder(s): {', '.join(sorted(missing))}")

        def sub(m: re.Match) -> str:
            return values[m.group(1)]

        return _PLACEHOLDER_RE.sub(sub, self.system), _PLACEHOLDER_RE.sub(sub, self.user)


DEFAULT_FILES = {
    ("draft", "markdown"): "draft_markdown.txt",
    ("draft", "json"): "draft_json.txt",
    ("refine", "markdown"): "refine.txt",
    ("refine", "json"): "refine.txt",
    ("critique", "markdown"): "critique.txt",
    ("critique", "json"): "critique.txt",
}


def default_template(stage: str, task: str) -> PromptTemplate:
    name = DEFAULT_FILES[(stage, task)]
    text = resources.files("readerkit.synth").joinpath("prompts", name).read_text(encoding="utf-8")
    return PromptTemplate.parse(stage, text)


def between(text: str, begin: str, end: str) -> str | None:
    """Text between two marker lines, or None when the markers are absent."""
    i = text.find(begin)
    if i < 0:
        return None
    i += len(begin)
    j = text.rfind(end)
    if j < i:
        return None
    return text[i:j].strip("\n")
