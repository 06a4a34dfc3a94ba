"""Markdown and JSON extraction metrics and Table-style reports.

Edit distances and the LCS behind ROUGE-L are computed with bit-parallel
recurrences over Python integers: one big-int word per pattern, one loop
iteration per character of the other string. That keeps whole-document
comparisons (tens of thousands of characters) practical.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

from .jsonx import JsonSchemaSpec, loads_strict, to_node_set, validate

__all__ = [
    "MetricReport",
    "JsonMetricReport",
    "EmptyInput",
    "rouge_l",
    "lcs_length",
    "levenshtein",
    "levenshtein_norm",
    "damerau_abs",
    "jaro",
    "jaro_winkler",
    "markdown_metrics",
    "json_metrics",
    "report",
    "EvalReport",
    "MARKDOWN_COLUMNS",
    "JSON_COLUMNS",
]


# ---------------------------------------------------------------------------
# bit-parallel kernels

def _match_masks(seq: Sequence) -> dict:
    """Bitmask of positions per symbol (bit i set where seq[i] == symbol)."""
    positions: dict = defaultdict(list)
    for i, sym in enumerate(seq):
        positions[sym].append(i)
    nbytes = (len(seq) + 7) >> 3
    masks = {}
    for sym, where in positions.items():
        buf = bytearray(nbytes)
        for i in where:
            buf[i >> 3] |= 1 << (i & 7)
        masks[sym] = int.from_bytes(buf, "little")
    return masks


def _trim_affix(a: str, b: str) -> tuple[str, str]:
    """Drop the common prefix and suffix; neither changes an edit distance."""
    n = min(len(a), len(b))
    i = 0
    while i < n and a[i] == b[i]:
        i += 1
    j = 0
    while j < n - i and a[-1 - j] == b[-1 - j]:
        j += 1
    return a[i:len(a) - j], b[i:len(b) - j]


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Length of the longest common subsequence of two sequences."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return 0
    masks = _match_masks(a)
    full = (1 << len(a)) - 1
    v = full
    get = masks.get
    for sym in b:
        u = v & get(sym, 0)
        v = ((v + u) | (v - u)) & full
    return len(a) - v.bit_count()


def levenshtein(a: str, b: str) -> int:
    """Unit-cost insert/delete/substitute distance over code points."""
    if a == b:
        return 0
    a, b = _trim_affix(a, b)
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    masks = _match_masks(a)
    full = (1 << len(a)) - 1
    top = 1 << (len(a) - 1)
    vp, vn = full, 0
    dist = len(a)
    get = masks.get
    for ch in b:
        pm = get(ch, 0)
        d0 = ((((pm & vp) + vp) ^ vp) | pm | vn) & full
        hp = vn | (~(d0 | vp) & full)
        hn = d0 & vp
        if hp & top:
            dist += 1
        elif hn & top:
            dist -= 1
        hp = ((hp << 1) | 1) & full
        hn = (hn << 1) & full
        vp = hn | (~(d0 | hp) & full)
        vn = hp & d0
    return dist


def damerau_abs(a: str, b: str) -> int:
    """Optimal-string-alignment distance: Levenshtein plus adjacent swaps,
    with no substring edited more than once."""
    if a == b:
        return 0
    a, b = _trim_affix(a, b)
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    masks = _match_masks(a)
    full = (1 << len(a)) - 1
    top = 1 << (len(a) - 1)
    vp, vn, d0, pm_prev = full, 0, 0, 0
    dist = len(a)
    get = masks.get
    for ch in b:
        pm = get(ch, 0)
        tr = ((((~d0) & pm) << 1) & pm_prev) & full
        d0 = (((((pm & vp) + vp) ^ vp) | pm | vn) | tr) & full
        hp = vn | (~(d0 | vp) & full)
        hn = d0 & vp
        if hp & top:
            dist += 1
        elif hn & top:
            dist -= 1
        hp = ((hp << 1) | 1) & full
        hn = (hn << 1) & full
        vp = hn | (~(d0 | hp) & full)
        vn = hp & d0
        pm_prev = pm
    return dist


def levenshtein_norm(candidate: str, reference: str) -> float:
    longest = max(len(candidate), len(reference))
    if longest == 0:
        return 0.0
    return levenshtein(candidate, reference) / longest


def rouge_l(candidate: str, reference: str) -> float:
    """ROUGE-L F1 (beta = 1) over whitespace-delimited tokens.

    Markdown punctuation stays attached to its token, so structural markup
    counts toward the match.
    """
    cand = candidate.split()
    ref = reference.split()
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return 2 * p * r / (p + r)


def jaro(a: str, b: str) -> float:
    if a == b:
        return 1.0
    n1, n2 = len(a), len(b)
    if not n1 or not n2:
        return 0.0
    window = max(max(n1, n2) // 2 - 1, 0)
    positions: dict[str, list[int]] = defaultdict(list)
    for j, ch in enumerate(b):
        positions[ch].append(j)
    # per character, every position before the cursor is either matched or
    # already left of the window for all later i
    cursor: dict[str, int] = {}
    matched_b = bytearray(n2)
    a_matches: list[str] = []
    for i, ch in enumerate(a):
        where = positions.get(ch)
        if where is None:
            continue
        k = cursor.get(ch, 0)
        lo = i - window
        while k < len(where) and where[k] < lo:
            k += 1
        if k < len(where) and where[k] <= i + window:
            matched_b[where[k]] = 1
            a_matches.append(ch)
            k += 1
        cursor[ch] = k
    m = len(a_matches)
    if m == 0:
        return 0.0
    b_matches = [b[j] for j in range(n2) if matched_b[j]]
    half_transpositions = sum(1 for x, y in zip(a_matches, b_matches) if x != y)
    t = half_transpositions // 2
    return (m / n1 + m / n2 + (m - t) / m) / 3.0


PREFIX_SCALE = 0.1
MAX_PREFIX = 4


def jaro_winkler(candidate: str, reference: str) -> float:
    """Jaro similarity with the Winkler common-prefix boost (scale 0.1, prefix <= 4)."""
    j = jaro(candidate, reference)
    prefix = 0
    for x, y in zip(candidate[:MAX_PREFIX], reference[:MAX_PREFIX]):
        if x != y:
            break
        prefix += 1
    return j + prefix * PREFIX_SCALE * (1.0 - j)


# ---------------------------------------------------------------------------
# per-document reports

@dataclass(frozen=True)
class MetricReport:
    rouge_l: float
    levenshtein_norm: float
    damerau_abs: int
    jaro_winkler: float


@dataclass(frozen=True)
class JsonMetricReport:
    precision: float
    recall: float
    f1: float
    passed: bool


def markdown_metrics(candidate: str, reference: str) -> MetricReport:
    return MetricReport(
        rouge_l(candidate, reference),
        levenshtein_norm(candidate, reference),
        damerau_abs(candidate, reference),
        jaro_winkler(candidate, reference),
    )


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def json_metrics(prediction_text: str, truth: Any, schema: JsonSchemaSpec) -> JsonMetricReport:
    """Node-set precision/recall/F1 plus the pass flag (parseable and schema-valid)."""
    try:
        prediction = loads_strict(prediction_text)
    except (ValueError, TypeError, RecursionError):
        return JsonMetricReport(0.0, 0.0, 0.0, False)
    pred_nodes = to_node_set(prediction)
    truth_nodes = to_node_set(truth)
    common = pred_nodes.intersection_size(truth_nodes)
    precision = common / len(pred_nodes)
    recall = common / len(truth_nodes)
    return JsonMetricReport(precision, recall, _f1(precision, recall), validate(prediction, schema).ok)


# ---------------------------------------------------------------------------
# aggregate tables

MARKDOWN_COLUMNS = ("Rouge-L", "Levenshtein", "Damerau", "Jaro-Winkler")
JSON_COLUMNS = ("F1", "Precision", "Recall", "Pass-Rate")


class EmptyInput(ValueError):
    pass


@dataclass
class AggregateRow:
    model: str
    task: str
    kind: str  # "markdown" | "json"
    count: int
    values: dict[str, float] = field(default_factory=dict)


@dataclass
class EvalReport:
    rows: list[AggregateRow]

    def markdown_rows(self) -> list[AggregateRow]:
        return [r for r in self.rows if r.kind == "markdown"]

    def json_rows(self) -> list[AggregateRow]:
        return [r for r in self.rows if r.kind == "json"]

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        if self.markdown_rows():
            out["markdown"] = {"columns": list(MARKDOWN_COLUMNS), "rows": [asdict(r) for r in self.markdown_rows()]}
        if self.json_rows():
            out["json"] = {"columns": list(JSON_COLUMNS), "rows": [asdict(r) for r in self.json_rows()]}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        parts = []
        if self.markdown_rows():
            header = ("Task", "Model") + MARKDOWN_COLUMNS
            body = [
                (r.task, r.model)
                + tuple(_fmt(r.values[c], damerau=c == "Damerau") for c in MARKDOWN_COLUMNS)
                for r in self.markdown_rows()
            ]
            parts.append(_table(header, body))
        if self.json_rows():
            many_tasks = len({r.task for r in self.json_rows()}) > 1
            header = (("Task",) if many_tasks else ()) + ("Model",) + JSON_COLUMNS
            body = [
                ((r.task,) if many_tasks else ()) + (r.model,) + tuple(_fmt(r.values[c]) for c in JSON_COLUMNS)
                for r in self.json_rows()
            ]
            parts.append(_table(header, body))
        return "\n".join(parts)


def _fmt(value: float, damerau: bool = False) -> str:
    return f"{value:.2f}" if damerau else f"{value:.4f}"


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]

    def line(cells: Sequence[str]) -> str:
        # text columns left aligned, numbers right aligned
        out = []
        for i, (cell, w) in enumerate(zip(cells, widths)):
            numeric = i >= len(cells) - 4
            out.append(str(cell).rjust(w) if numeric else str(cell).ljust(w))
        return "  ".join(out).rstrip()

    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), rule] + [line(r) for r in rows]) + "\n"


def report(rows: Iterable[tuple[str, str, MetricReport | JsonMetricReport]]) -> EvalReport:
    """Mean of every metric per (model, task); Pass-Rate is the share of passes."""
    groups: dict[tuple[str, str, str], list] = {}
    for model, task, item in rows:
        kind = "json" if isinstance(item, JsonMetricReport) else "markdown"
        groups.setdefault((model, task, kind), []).append(item)
    if not groups:
        raise EmptyInput("report needs at least one row")
    out = []
    for (model, task, kind), items in groups.items():
        n = len(items)
        if kind == "markdown":
            values = {
                "Rouge-L": math.fsum(i.rouge_l for i in items) / n,
                "Levenshtein": math.fsum(i.levenshtein_norm for i in items) / n,
                "Damerau": math.fsum(i.damerau_abs for i in items) / n,
                "Jaro-Winkler": math.fsum(i.jaro_winkler for i in items) / n,
            }
        else:
            values = {
                "F1": math.fsum(i.f1 for i in items) / n,
                "Precision": math.fsum(i.precision for i in items) / n,
                "Recall": math.fsum(i.recall for i in items) / n,
                "Pass-Rate": sum(1 for i in items if i.passed) / n,
            }
        out.append(AggregateRow(model, task, kind, n, values))
    return EvalReport(out)
