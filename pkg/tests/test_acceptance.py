"""Acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured figures
(visible in ``pytest -v`` output) and then asserts. Run on its own with

    pytest tests/test_acceptance.py -v
"""

import json
import random
import sys
import time
from functools import lru_cache
from pathlib import Path

import pytest

from readerkit.cli import main as cli_main
from readerkit.corpus import CorpusDoc, plan_curriculum
from readerkit.html_tree import inner_text, parse_html
from readerkit.jsonx import JsonSchemaSpec
from readerkit.markdown import ExtractionInstruction, apply_scope, convert, convert_html
from readerkit.metrics import (
    JSON_COLUMNS,
    MARKDOWN_COLUMNS,
    damerau_abs,
    jaro_winkler,
    json_metrics,
    levenshtein,
    levenshtein_norm,
    markdown_metrics,
)
from readerkit.synth import NO_WAIT, Backends, PipelineConfig, mock_critique, mock_draft, mock_refine, run_round

from treegen import random_tree, squash, strip_markdown

PAGES = sorted((Path(__file__).parent / "fixtures" / "pages").glob("*.html"))
STAMP = "2024-05-01T00:00:00Z"


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        assert ok, detail

    return emit


# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _lev(a, b):
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(_lev(a[1:], b) + 1, _lev(a, b[1:]) + 1, _lev(a[1:], b[1:]) + (a[0] != b[0]))


@lru_cache(maxsize=None)
def _osa(a, b):
    if not a:
        return len(b)
    if not b:
        return len(a)
    best = min(_osa(a[1:], b) + 1, _osa(a, b[1:]) + 1, _osa(a[1:], b[1:]) + (a[0] != b[0]))
    if len(a) > 1 and len(b) > 1 and a[0] == b[1] and a[1] == b[0]:
        best = min(best, _osa(a[2:], b[2:]) + 1)
    return best


def test_1_metric_oracles(verdict):
    rng = random.Random(1)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        a = "".join(rng.choice("abcd") for _ in range(rng.randint(0, 8)))
        b = "".join(rng.choice("abcd") for _ in range(rng.randint(0, 8)))
        mismatches += levenshtein(a, b) != _lev(a, b)
        mismatches += damerau_abs(a, b) != _osa(a, b)
    elapsed = time.perf_counter() - start
    verdict(1, mismatches == 0 and elapsed < 10,
            f"{mismatches} oracle mismatches on 1000 pairs in {elapsed:.2f}s (limit 10s)")


def test_2_canonical_values(verdict):
    jw = jaro_winkler("MARTHA", "MARHTA")
    checks = {
        "jaro_winkler": abs(jw - 0.9611) <= 1e-4,
        "levenshtein": levenshtein("kitten", "sitting") == 3,
        "levenshtein_norm": abs(levenshtein_norm("kitten", "sitting") - 3 / 7) < 1e-12,
        "damerau_osa": damerau_abs("ca", "abc") == 3,
    }
    verdict(2, all(checks.values()), f"JW(MARTHA,MARHTA)={jw:.4f}; " + ", ".join(f"{k}={'ok' if v else 'bad'}"
                                                                             for k, v in checks.items()))


def test_3_self_evaluation_fixed_point(verdict):
    bad = []
    for path in PAGES:
        body = convert_html(path.read_bytes()).body
        m = markdown_metrics(body, body)
        if (m.rouge_l, m.levenshtein_norm, m.damerau_abs, m.jaro_winkler) != (1.0, 0.0, 0, 1.0):
            bad.append(path.name)
    verdict(3, len(PAGES) == 100 and not bad, f"{100 - len(bad)}/{len(PAGES)} fixture documents at the fixed point")


def _heading_cases():
    cases = []
    for n in range(1, 7):
        cases += [
            (n, f"<h{n}>Plain heading</h{n}>"),
            (n, f"<H{n} class='title' id='x{n}'>Upper case tag</H{n}>"),
            (n, f"<h{n}>  Ragged \n whitespace\t</h{n}>"),
            (n, f"<div><section><h{n}>Nested <em>inline</em> <b>markup</b></h{n}></section></div>"),
            (n, f"<h{n}><a href='/a'>Linked</a> title with <code>code</code></h{n}>"),
        ]
    return cases


def test_4_heading_mapping(verdict):
    cases = _heading_cases()
    passed = 0
    for n, html in cases:
        body = convert_html(f"<main>{html}<p>after</p></main>").body
        first = body.split("\n", 1)[0]
        hashes = len(first) - len(first.lstrip("#"))
        passed += hashes == n and first[n:n + 1] == " "
    verdict(4, len(cases) == 30 and passed == 30, f"{passed}/{len(cases)} heading cases map to exactly n '#'")


def test_5_text_preservation(verdict):
    rng = random.Random(5)
    passed = total = 0
    for i in range(1000):
        tree = random_tree(rng)
        instr = ExtractionInstruction()
        if i % 4 == 3:
            instr = ExtractionInstruction.scoped([rng.choice(["p", "li", "div", "section", "h2"])])
        try:
            body = convert(tree, instr).body
        except ValueError:
            # scope matched nothing; draw a main-content conversion instead
            instr = ExtractionInstruction()
            body = convert(tree, instr).body
        expected = "".join(squash(inner_text(s)) for s in apply_scope(tree, instr))
        total += 1
        passed += strip_markdown(body) == expected
    verdict(5, passed == total == 1000, f"{passed}/{total} random trees preserve their scoped text")


def test_6_json_metrics(verdict):
    schema = JsonSchemaSpec.from_dict({"type": "object", "properties": {
        "a": {"type": "integer"}, "b": {"type": "integer"}, "c": {"type": "integer"}}})
    same = json_metrics('{"c": 3, "a": 1}', {"a": 1, "c": 3}, schema)
    broken = json_metrics("not json{", {"a": 1}, schema)
    overlap = json_metrics('{"a": 1, "b": 2}', {"a": 1, "c": 3}, schema)
    ok = ((same.precision, same.recall, same.f1, same.passed) == (1.0, 1.0, 1.0, True)
          and broken.passed is False and (broken.precision, broken.recall, broken.f1) == (0.0, 0.0, 0.0)
          and (overlap.precision, overlap.recall, overlap.f1) == (0.5, 0.5, 0.5))
    verdict(6, ok, f"identical={same.f1:.2f}/{same.passed}, unparseable pass={broken.passed}, "
                   f"overlap P/R/F1={overlap.precision}/{overlap.recall}/{overlap.f1}")


class _Crash(BaseException):
    pass


def _crash_after(backend, n):
    from readerkit.synth import MockBackend

    calls = [0]

    def handler(s, u, p):
        calls[0] += 1
        if calls[0] > n:
            raise _Crash()
        return backend.generate(s, u, p)

    return MockBackend(handler, name=backend.name)


def _read_rows(path):
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


def test_7_pipeline_contracts(verdict, tmp_path):
    start = time.perf_counter()
    docs = [CorpusDoc.from_html(p.read_text(encoding="utf-8")) for p in PAGES]
    backends = lambda: Backends(mock_draft("markdown", name="mock"), mock_refine(), mock_critique())
    conf = lambda d: PipelineConfig(tmp_path / d, seed=7, jobs=4, retry=NO_WAIT, created_at=STAMP)

    a = run_round(docs, conf("a"), backends())
    b = run_round(docs, conf("b"), backends())
    files = ("sft_filtered.jsonl", "sft_critique.jsonl", "dpo_preference.jsonl")
    rerun_identical = all((a.directory / f).read_bytes() == (b.directory / f).read_bytes() for f in files)

    crashed = backends()
    crashed.critique = _crash_after(crashed.critique, 60)
    try:
        run_round(docs, conf("c"), crashed)
        killed = False
    except _Crash:
        killed = True
    with open(tmp_path / "c" / "round-001" / "critique.jsonl", "a", encoding="utf-8") as fh:
        fh.write('{"doc_id": "half')
    c = run_round(docs, conf("c"), backends(), resume=True)
    resume_identical = killed and all((a.directory / f).read_bytes() == (c.directory / f).read_bytes() for f in files)

    verdicts = {r["doc_id"]: r["verdict"] for r in _read_rows(a.directory / "critique.jsonl")}
    sft = _read_rows(a.directory / "sft_filtered.jsonl")
    crit = _read_rows(a.directory / "sft_critique.jsonl")
    dpo = _read_rows(a.directory / "dpo_preference.jsonl")
    sft_ok = bool(sft) and all(verdicts[r["doc_id"]] for r in sft)
    neg = sum(not r["output"]["verdict"] for r in crit)
    pos = sum(r["output"]["verdict"] for r in crit)
    ratio_ok = neg > 0 and abs(pos - 2 * neg) <= 1
    dpo_ok = bool(dpo) and all(r["chosen"] != r["rejected"] and verdicts[r["doc_id"]] for r in dpo)
    elapsed = time.perf_counter() - start
    ok = sft_ok and ratio_ok and dpo_ok and rerun_identical and resume_identical and elapsed < 60
    verdict(7, ok, f"sft={len(sft)} all-pass={sft_ok}; critique neg/pos={neg}/{pos}; dpo={len(dpo)} valid={dpo_ok}; "
                   f"rerun identical={rerun_identical}; kill+resume identical={resume_identical}; {elapsed:.1f}s")


def test_8_curriculum(verdict):
    rng = random.Random(8)
    max_len = 8192
    docs = []
    for i in range(1000):
        tokens = rng.randint(int(0.9 * max_len) + 1, max_len) if i % 5 < 3 else rng.randint(50, 6000)
        docs.append(CorpusDoc(f"{i:016x}", "", token_count=tokens))
    plan = plan_curriculum(docs, max_len, 0.4, seed=42)
    again = plan_curriculum(list(reversed(docs)), max_len, 0.4, seed=42)
    frac = plan.achieved_fraction
    ok = abs(frac - 0.40) <= 0.02 and plan.to_dict() == again.to_dict()
    verdict(8, ok, f"achieved long fraction {frac:.3f} (target 0.40 +/- 0.02), seeded plan reproducible="
                   f"{plan.to_dict() == again.to_dict()}")


def test_9_throughput(verdict):
    data = [p.read_bytes() for p in PAGES]
    total = sum(len(d) for d in data)
    best = float("inf")
    for _ in range(3):
        start = time.perf_counter()
        for d in data:
            convert(parse_html(d))
        best = min(best, time.perf_counter() - start)
    rate = total / best / 1e6
    verdict(9, rate >= 20.0, f"parse+convert {rate:.2f} MB/s on one core over {total / 1e6:.2f} MB (floor 20 MB/s)")


def test_10_report_shape(verdict, tmp_path, capsys):
    from readerkit.synth.mocks import reference_json

    schema = {"type": "object", "properties": {"title": {"type": "string"},
                                               "headings": {"type": "array", "items": {"type": "string"}},
                                               "links": {"type": "array", "items": {"type": "string"}}}}
    (tmp_path / "schema.json").write_text(json.dumps(schema))
    md_refs, md_preds, js_refs, js_preds = [], [], [], []
    for i, path in enumerate(PAGES[:10]):
        html = path.read_text(encoding="utf-8")
        body = convert_html(html).body
        md_refs.append({"doc_id": path.stem, "reference": body})
        md_preds.append({"doc_id": path.stem, "model": "readerkit", "task": "main-content", "prediction": body})
        md_preds.append({"doc_id": path.stem, "model": "truncated", "task": "main-content",
                         "prediction": body[: len(body) // 2]})
        truth = reference_json(html)
        js_refs.append({"doc_id": path.stem, "truth_json": truth, "schema_path": "schema.json"})
        js_preds.append({"doc_id": path.stem, "model": "readerkit", "task": "extraction",
                         "prediction": json.dumps(truth) if i % 3 else "oops"})
    for name, rows in (("md_refs", md_refs), ("md_preds", md_preds), ("js_refs", js_refs), ("js_preds", js_preds)):
        (tmp_path / f"{name}.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))

    rc_md = cli_main(["eval", str(tmp_path / "md_preds.jsonl"), "--references", str(tmp_path / "md_refs.jsonl"),
                      "-o", str(tmp_path / "md_report")])
    md_header = capsys.readouterr().out.splitlines()[0].split()
    rc_js = cli_main(["eval", str(tmp_path / "js_preds.jsonl"), "--references", str(tmp_path / "js_refs.jsonl"),
                      "--task", "json", "-o", str(tmp_path / "js_report")])
    js_header = capsys.readouterr().out.splitlines()[0].split()
    md_json = json.loads((tmp_path / "md_report" / "report.json").read_text())
    js_json = json.loads((tmp_path / "js_report" / "report.json").read_text())
    md_cols = [c for c in md_header if c not in ("Task", "Model")]
    js_cols = [c for c in js_header if c not in ("Task", "Model")]
    ok = (rc_md == rc_js == 0
          and md_cols == list(MARKDOWN_COLUMNS) == ["Rouge-L", "Levenshtein", "Damerau", "Jaro-Winkler"]
          and js_cols == list(JSON_COLUMNS) == ["F1", "Precision", "Recall", "Pass-Rate"]
          and md_json["markdown"]["columns"] == md_cols and js_json["json"]["columns"] == js_cols)
    verdict(10, ok, f"markdown columns {md_cols}; json columns {js_cols}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
