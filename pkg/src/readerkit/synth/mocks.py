"""Deterministic offline backends.

The draft mock runs the rule-based converter and then injects the kind of
noise a real model produces (repeated paragraphs, doubled lines, truncation,
stray prose around JSON). Which noise a page gets depends only on a hash of
its HTML, so runs are reproducible. The refine mock echoes its input and the
critique mock compares against the reference conversion.
"""

from __future__ import annotations

import hashlib
import json

from ..html_tree import parse_html
from ..jsonx import ExtractionTemplate, JsonSchemaSpec, extract_json, loads_strict, to_node_set
from ..markdown import convert
from ..metrics import rouge_l
from .backends import BackendError, GenerationParams, MockBackend
from .templates import HTML_BEGIN, HTML_END, OUTPUT_BEGIN, OUTPUT_END, between

PASS_THRESHOLD = 0.9

DEFAULT_JSON_SCHEMA = {
    "type": "object",
    "properties": {
        "title": {"type": "string"},
        "headings": {"type": "array", "items": {"type": "string"}},
        "links": {"type": "array", "items": {"type": "string"}},
    },
}

_MOCK_TEMPLATE = ExtractionTemplate.from_list([
    {"path": "title", "selector": "h1"},
    {"path": "headings", "selector": "h2", "capture": "list"},
    {"path": "links", "selector": "a", "capture": "list"},
])


def _noise_kind(html: str, salt: str) -> int:
    return hashlib.sha256((salt + html).encode("utf-8", "surrogatepass")).digest()[0] % 4


def reference_markdown(html: str) -> str:
    return convert(parse_html(html)).body


def reference_json(html: str) -> dict:
    return extract_json(parse_html(html), JsonSchemaSpec.from_dict(DEFAULT_JSON_SCHEMA), _MOCK_TEMPLATE)


def _noisy_markdown(md: str, kind: int) -> str:
    blocks = [b for b in md.split("\n\n") if b.strip()]
    if not blocks or kind == 0:
        return md
    if kind == 1:
        # the first ordinary paragraph comes out three times
        i = next((k for k, b in enumerate(blocks) if not b.startswith(("#", "```", "|"))), 0)
        blocks[i:i + 1] = [blocks[i]] * 3
        return "\n\n".join(blocks) + "\n"
    if kind == 2:
        if len(blocks) > 1:
            return "\n\n".join(blocks[: len(blocks) // 2]) + "\n"
        words = md.split()
        return " ".join(words[: max(1, len(words) // 2)]) + "\n"
    # every line twice, with ragged blank runs
    out = []
    for b in blocks:
        out.append("\n".join(line + "\n" + line for line in b.split("\n")))
    return "\n\n\n".join(out) + "\n\n"


def _noisy_json(value: dict, kind: int) -> str:
    if kind == 0:
        return json.dumps(value, ensure_ascii=False, indent=2) + "\n"
    if kind == 1:
        return json.dumps(value, ensure_ascii=False)
    if kind == 2:
        return "```json\n" + json.dumps(value, ensure_ascii=False, indent=4) + "\n```"
    return "Here is the extracted data:\n" + json.dumps(value, ensure_ascii=False)


def _html_of(user_prompt: str) -> str:
    html = between(user_prompt, HTML_BEGIN, HTML_END)
    if html is None:
        raise BackendError("prompt has no HTML section")
    return html


def draft_handler(task: str, salt: str = ""):
    def handle(system: str, user: str, params: GenerationParams) -> str:
        html = _html_of(user)
        kind = _noise_kind(html, salt)
        if task == "json":
            return _noisy_json(reference_json(html), kind)
        md = reference_markdown(html)
        if not md.strip():
            return "(empty page)\n"
        return _noisy_markdown(md, kind)

    return handle


def echo_handler(system: str, user: str, params: GenerationParams) -> str:
    out = between(user, OUTPUT_BEGIN, OUTPUT_END)
    if out is None:
        raise BackendError("prompt has no OUTPUT section")
    return out + "\n"


def critique_handler(system: str, user: str, params: GenerationParams) -> str:
    html = _html_of(user)
    output = between(user, OUTPUT_BEGIN, OUTPUT_END)
    if output is None:
        raise BackendError("prompt has no OUTPUT section")
    stripped = output.lstrip()
    if stripped.startswith(("{", "[")):
        try:
            pred = to_node_set(loads_strict(output))
        except ValueError:
            return "FAIL\noutput is not valid JSON"
        ref = to_node_set(reference_json(html))
        common = pred.intersection_size(ref)
        p, r = common / len(pred), common / len(ref)
        score = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        label = "node F1"
    else:
        score = rouge_l(output, reference_markdown(html))
        label = "ROUGE-L"
    verdict = "PASS" if score >= PASS_THRESHOLD else "FAIL"
    relation = "meets" if verdict == "PASS" else "is below"
    return f"{verdict}\n{label} {score:.3f} against the reference conversion {relation} {PASS_THRESHOLD:.2f}."


def mock_draft(task: str, name: str = "mock-draft", salt: str = "") -> MockBackend:
    return MockBackend(draft_handler(task, salt), name=name)


def mock_refine() -> MockBackend:
    return MockBackend(echo_handler, name="mock-refine")


def mock_critique() -> MockBackend:
    return MockBackend(critique_handler, name="mock-critique")


# Named draft backends available without network access. "mock-alt" picks a
# different noise pattern per page and stands in for a swapped-in checkpoint.
MOCK_DRAFTS = {"mock": "", "mock-alt": "alt"}
