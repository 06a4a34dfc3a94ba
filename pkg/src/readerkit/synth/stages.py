"""Draft, refine and critique stages.

Every stage runs per-document work on a bounded thread pool, commits results
in input order, and appends one JSON line per document to its stage log. A
log line is one of

    {"status": "ok", "doc_id": ..., <record fields>}
    {"status": "skipped", "doc_id": ..., "error": ..., "retries": n}
    {"status": "error", "doc_id": ..., "error": "RefinementUnparseable", "detail": ...}

Resuming reads the complete lines back, drops a torn final line, and
continues with the first document not yet logged.
"""

from __future__ import annotations

import json
import logging
import os
import re
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping

from ..jsonx import loads_strict
from ..markdown import finalize
from .backends import (
    BackendError,
    BackendUnavailable,
    GenerationBackend,
    GenerationParams,
    RetryPolicy,
    call_with_retry,
)
from .records import TASKS, CritiqueRecord, DraftRecord, RefineRecord
from .templates import PromptTemplate, TemplateError

log = logging.getLogger(__name__)

DEFAULT_MAX_FAILURES = 5

MARKDOWN_INSTRUCTION = (
    "Extract the main content of the HTML page below and convert it to clean GitHub-flavored Markdown."
)
JSON_INSTRUCTION = (
    "Extract the information requested by the JSON schema from the HTML page below. "
    "Answer with one JSON object that conforms to the schema."
)

UNPARSEABLE_CRITIQUE = "unparseable critique"
REASK_SUFFIX = (
    "\n\nYour previous answer could not be read. "
    "Reply again; the first line must be exactly PASS or FAIL, followed by your explanation."
)


class RefinementUnparseable(ValueError):
    """A Json-task output that does not parse as JSON."""


def default_instruction(task: str) -> str:
    return MARKDOWN_INSTRUCTION if task == "markdown" else JSON_INSTRUCTION


# ---------------------------------------------------------------------------
# stage logs

class StageLog:
    """Append-only JSONL log for one stage."""

    def __init__(self, path: str | Path, resume: bool = False):
        self.path = Path(path)
        self.entries: list[dict] = []
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if resume and self.path.exists():
            self._recover()
        else:
            self.path.write_bytes(b"")
        self._fh = open(self.path, "a", encoding="utf-8", newline="\n")

    def _recover(self) -> None:
        data = self.path.read_bytes()
        keep = data.rfind(b"\n") + 1
        if keep < len(data):
            log.warning("%s: dropping torn final line (%d bytes)", self.path, len(data) - keep)
            with open(self.path, "r+b") as fh:
                fh.truncate(keep)
        for line in data[:keep].decode("utf-8").splitlines():
            if line.strip():
                self.entries.append(json.loads(line))

    def append(self, entry: dict) -> None:
        self._fh.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")
        self._fh.flush()

    def sync(self) -> None:
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> StageLog:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_log(path: str | Path) -> list[dict]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.endswith("\n") and line.strip():
                entries.append(json.loads(line))
    return entries


# ---------------------------------------------------------------------------
# ordered, bounded execution

def run_ordered(items: Iterable[Any], key: Callable[[Any], str], work: Callable[[Any], dict], *,
                log_: StageLog | None = None, jobs: int = 1, max_failures: int = DEFAULT_MAX_FAILURES,
                retries_on_failure: int = 0, stage: str = "") -> Iterator[dict]:
    """Run ``work`` per item and yield log entries in input order.

    ``work`` returns an entry dict or raises BackendError (retries already
    spent). A failed item becomes a "skipped" entry; ``max_failures``
    consecutive failures abort with BackendUnavailable. The failing streak is
    not logged at abort time, so a resumed run tries those documents again.
    """
    done = list(log_.entries) if log_ is not None else []
    items = iter(items)
    # replay what the log already holds
    for entry in done:
        item = next(items, None)
        if item is None or key(item) != entry["doc_id"]:
            raise RuntimeError(f"{log_.path if log_ else stage}: log does not match the input order; "
                               "start a fresh run instead of resuming")
        yield entry

    pending_skips: list[dict] = []
    streak = 0

    def commit(entry: dict) -> Iterator[dict]:
        nonlocal streak
        if entry["status"] == "skipped":
            streak += 1
            pending_skips.append(entry)
            if streak >= max_failures:
                raise BackendUnavailable(f"{stage}: {streak} consecutive documents failed; last error: {entry['error']}")
            return
        streak = 0
        for e in pending_skips + [entry]:
            if log_ is not None:
                log_.append(e)
            yield e
        pending_skips.clear()

    def guarded(item: Any) -> dict:
        try:
            return work(item)
        except BackendError as exc:
            log.warning("%s: skipping %s after %d retries: %s", stage, key(item), retries_on_failure, exc)
            return {"status": "skipped", "doc_id": key(item), "error": str(exc), "retries": retries_on_failure}

    if jobs <= 1:
        for item in items:
            yield from commit(guarded(item))
    else:
        pool = ThreadPoolExecutor(max_workers=jobs, thread_name_prefix=f"readerkit-{stage}")
        window: deque = deque()
        try:
            for item in items:
                window.append(pool.submit(guarded, item))
                if len(window) >= 2 * jobs:
                    yield from commit(window.popleft().result())
            while window:
                yield from commit(window.popleft().result())
        finally:
            pool.shutdown(wait=True, cancel_futures=True)

    # a trailing streak shorter than the limit is committed as ordinary skips
    for e in pending_skips:
        if log_ is not None:
            log_.append(e)
        yield e
    pending_skips.clear()


# ---------------------------------------------------------------------------
# mechanical normalization

_FENCE_RE = re.compile(r"^ *(`{3,}|~{3,})")
_WRAPPED_JSON_RE = re.compile(r"\A\s*(`{3,}|~{3,})[A-Za-z0-9_-]*[ \t]*\n(.*)\n[ \t]*\1[ \t]*\s*\Z", re.S)


def _split_blocks(text: str) -> list[tuple[bool, str]]:
    """Split Markdown on blank lines; fenced code stays one block. Returns (is_code, block)."""
    blocks: list[tuple[bool, str]] = []
    current: list[str] = []
    fence = None
    for line in text.split("\n"):
        m = _FENCE_RE.match(line)
        if fence is not None:
            current.append(line)
            if m and m.group(1)[0] == fence[0] and len(m.group(1)) >= len(fence) and not line.strip(" `~"):
                blocks.append((True, "\n".join(current)))
                current, fence = [], None
            continue
        if m:
            if current:
                blocks.append((False, "\n".join(current)))
            current, fence = [line], m.group(1)
            continue
        if not line.strip():
            if current:
                blocks.append((False, "\n".join(current)))
                current = []
            continue
        current.append(line)
    if current:
        blocks.append((fence is not None, "\n".join(current)))
    return blocks


def normalize_markdown(text: str) -> str:
    """Drop repeated consecutive lines and paragraphs, collapse blank runs,
    and apply the Markdown whitespace contract. Fenced code and table rows
    are left as they are."""
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    out: list[str] = []
    prev_block = None
    for is_code, block in _split_blocks(text):
        if not is_code:
            lines = []
            for line in block.split("\n"):
                if lines and line == lines[-1] and not line.lstrip().startswith("|"):
                    continue
                lines.append(line)
            block = "\n".join(lines)
        key = block.strip()
        if key == prev_block:
            continue
        prev_block = key
        out.append(block)
    return finalize("\n\n".join(out))


def parse_json_output(text: str) -> Any:
    """Parse a Json-task output, tolerating one surrounding code fence."""
    m = _WRAPPED_JSON_RE.match(text)
    if m:
        text = m.group(2)
    try:
        return loads_strict(text)
    except (ValueError, RecursionError) as exc:
        raise RefinementUnparseable(str(exc)) from exc


def dump_json_output(value: Any) -> str:
    return json.dumps(value, ensure_ascii=False, indent=2) + "\n"


def normalize_output(text: str, task: str) -> str:
    if task == "json":
        return dump_json_output(parse_json_output(text))
    return normalize_markdown(text)


# ---------------------------------------------------------------------------
# stages

_STAGE_VALUES = {
    "draft": frozenset(("html", "instruction", "schema", "task")),
    "refine": frozenset(("output", "draft", "instruction", "task")),
    "critique": frozenset(("html", "output", "instruction", "task", "schema")),
}


def _check_template(template: PromptTemplate, stage: str) -> None:
    if template.stage != stage:
        raise TemplateError(f"expected a {stage} template, got {template.stage}")
    extra = template.placeholders - _STAGE_VALUES[stage]
    if extra:
        raise TemplateError(f"{stage} template uses unavailable placeholder(s): {', '.join(sorted(extra))}")


def _check_task(task: str) -> None:
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")


def run_draft(corpus: Iterable, task: str, backend: GenerationBackend, template: PromptTemplate, *,
              instruction: str | None = None, schema_text: str = "", params: GenerationParams = GenerationParams(),
              retry: RetryPolicy = RetryPolicy(), stage_log: StageLog | None = None, jobs: int = 1,
              max_failures: int = DEFAULT_MAX_FAILURES, timestamp: str = "") -> Iterator[DraftRecord]:
    """One DraftRecord per document that the backend handled, in input order."""
    _check_task(task)
    _check_template(template, "draft")
    instruction = instruction or default_instruction(task)
    if task == "json" and schema_text:
        instruction = f"{instruction}\n\nJSON schema:\n{schema_text}"

    def work(doc) -> dict:
        system, user = template.render(html=doc.html, instruction=instruction, schema=schema_text, task=task)
        out, retries = call_with_retry(backend, system, user, params, retry)
        rec = DraftRecord(doc.doc_id, instruction, task, out, backend.name, timestamp, retries)
        return {"status": "ok", **rec.to_dict()}

    for entry in run_ordered(corpus, lambda d: d.doc_id, work, log_=stage_log, jobs=jobs,
                             max_failures=max_failures, retries_on_failure=retry.max_calls - 1, stage="draft"):
        if entry["status"] == "ok":
            yield DraftRecord.from_dict(entry)


def run_refine(drafts: Iterable[DraftRecord], backend: GenerationBackend, template: PromptTemplate, *,
               params: GenerationParams = GenerationParams(), retry: RetryPolicy = RetryPolicy(),
               stage_log: StageLog | None = None, jobs: int = 1,
               max_failures: int = DEFAULT_MAX_FAILURES) -> Iterator[RefineRecord]:
    """Mechanical normalization, then one backend pass, per draft."""
    _check_template(template, "refine")

    def work(draft: DraftRecord) -> dict:
        try:
            cleaned = normalize_output(draft.draft_output, draft.task)
            system, user = template.render(output=cleaned, draft=draft.draft_output,
                                           instruction=draft.instruction, task=draft.task)
            out, retries = call_with_retry(backend, system, user, params, retry)
            refined = normalize_output(out, draft.task)
        except RefinementUnparseable as exc:
            return {"status": "error", "doc_id": draft.doc_id, "error": "RefinementUnparseable", "detail": str(exc)}
        rec = RefineRecord(draft.doc_id, refined, refined != draft.draft_output, retries)
        return {"status": "ok", **rec.to_dict()}

    for entry in run_ordered(drafts, lambda d: d.doc_id, work, log_=stage_log, jobs=jobs,
                             max_failures=max_failures, retries_on_failure=retry.max_calls - 1, stage="refine"):
        if entry["status"] == "ok":
            yield RefineRecord.from_dict(entry)


def parse_verdict(text: str) -> tuple[bool, str] | None:
    """Strict protocol: first line exactly PASS or FAIL, the rest is the explanation."""
    first, _, rest = text.partition("\n")
    first = first.rstrip("\r \t")
    if first not in ("PASS", "FAIL"):
        return None
    explanation = rest.strip() or f"{first} without explanation"
    return first == "PASS", explanation


def run_critique(refined: Iterable[RefineRecord], backend: GenerationBackend, template: PromptTemplate, *,
                 context: Mapping[str, tuple[str, str, str]], schema_text: str = "",
                 params: GenerationParams = GenerationParams(), retry: RetryPolicy = RetryPolicy(),
                 stage_log: StageLog | None = None, jobs: int = 1,
                 max_failures: int = DEFAULT_MAX_FAILURES) -> Iterator[CritiqueRecord]:
    """Binary judgement per refined output.

    ``context`` maps doc_id to (instruction, html, task). An unreadable verdict
    is asked for once more; a second miss records verdict=false.
    """
    _check_template(template, "critique")

    def work(rec: RefineRecord) -> dict:
        instruction, html, task = context[rec.doc_id]
        system, user = template.render(html=html, output=rec.refined_output, instruction=instruction,
                                       task=task, schema=schema_text)
        out, retries = call_with_retry(backend, system, user, params, retry)
        parsed = parse_verdict(out)
        if parsed is None:
            out, more = call_with_retry(backend, system, user + REASK_SUFFIX, params, retry)
            retries += more
            parsed = parse_verdict(out) or (False, UNPARSEABLE_CRITIQUE)
        crit = CritiqueRecord(rec.doc_id, parsed[0], parsed[1], retries)
        return {"status": "ok", **crit.to_dict()}

    for entry in run_ordered(refined, lambda r: r.doc_id, work, log_=stage_log, jobs=jobs,
                             max_failures=max_failures, retries_on_failure=retry.max_calls - 1, stage="critique"):
        if entry["status"] == "ok":
            yield CritiqueRecord.from_dict(entry)
