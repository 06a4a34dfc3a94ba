import json
import logging
import threading
from pathlib import Path

import pytest

from readerkit.corpus import CorpusDoc
from readerkit.synth import (
    NO_WAIT,
    UNPARSEABLE_CRITIQUE,
    BackendConfigError,
    BackendError,
    Backends,
    BackendUnavailable,
    GenerationParams,
    HttpBackend,
    MockBackend,
    PipelineConfig,
    PromptTemplate,
    RetryPolicy,
    StageLog,
    TemplateError,
    assemble_critique_dataset,
    assemble_dpo,
    assemble_sft_filtered,
    balance_counts,
    call_with_retry,
    default_template,
    load_manifest,
    mock_critique,
    mock_draft,
    mock_refine,
    normalize_markdown,
    parse_verdict,
    run_critique,
    run_draft,
    run_refine,
    run_round,
    self_play_round,
)
from readerkit.synth.records import CritiqueRecord, DraftRecord, RefineRecord
from readerkit.synth.stages import read_log
from readerkit.synth.templates import OUTPUT_BEGIN, OUTPUT_END, between

PAGES = Path(__file__).parent / "fixtures" / "pages"
STAMP = "2024-05-01T00:00:00Z"


def small_corpus(n=9):
    docs = []
    for i in range(n):
        html = f"<html><body><main><h1>Doc {i}</h1><p>Paragraph number {i} with some words.</p></main></body></html>"
        docs.append(CorpusDoc.from_html(html))
    return docs


def page_corpus(n=100):
    return [CorpusDoc.from_html(p.read_text(encoding="utf-8")) for p in sorted(PAGES.glob("*.html"))[:n]]


def const(text, name="const"):
    return MockBackend(lambda s, u, p: text, name=name)


def echo():
    return MockBackend(lambda s, u, p: between(u, OUTPUT_BEGIN, OUTPUT_END) + "\n", name="echo")


def drafts_for(docs, outputs, task="markdown"):
    return [DraftRecord(d.doc_id, "convert", task, out, "t", STAMP) for d, out in zip(docs, outputs)]


# ---------------------------------------------------------------------------
# templates

def test_template_parse_and_render():
    t = PromptTemplate.parse("draft", "[system]\nYou convert pages.\n[user]\n{{instruction}}\n{{html}}\n")
    assert t.placeholders == {"instruction", "html"}
    system, user = t.render(instruction="Do it", html="<p>{{output}}</p>")
    assert system == "You convert pages."
    # substitution is single pass: placeholder syntax inside values survives
    assert "<p>{{output}}</p>" in user


@pytest.mark.parametrize("text", [
    "[user]\n{{html}}\n",  # no instruction placeholder
    "[system]\nx\n[user]\n{{instruction}} {{html}} {{bogus}}\n",  # unknown placeholder
    "no sections at all {{html}} {{instruction}}",
])
def test_template_errors(text):
    with pytest.raises(TemplateError):
        PromptTemplate.parse("draft", text)


def test_template_missing_file(tmp_path):
    with pytest.raises(TemplateError):
        PromptTemplate.load("draft", tmp_path / "nope.txt")


def test_default_templates_load():
    for stage in ("draft", "refine", "critique"):
        for task in ("markdown", "json"):
            t = default_template(stage, task)
            assert t.stage == stage and len(t.digest) == 64


def test_wrong_stage_template_rejected():
    docs = small_corpus(1)
    with pytest.raises(TemplateError):
        list(run_draft(docs, "markdown", const("x"), default_template("refine", "markdown"), retry=NO_WAIT))


# ---------------------------------------------------------------------------
# backends and retries

def test_retry_then_success():
    calls, sleeps = [], []

    def handler(s, u, p):
        calls.append(1)
        if len(calls) <= 2:
            raise BackendError("transient")
        return "# ok\n"

    out, retries = call_with_retry(MockBackend(handler), "s", "u", GenerationParams(),
                                   RetryPolicy(sleep=sleeps.append))
    assert (out, retries) == ("# ok\n", 2)
    assert sleeps == [1.0, 4.0]


def test_retry_exhausted_and_empty_output_counts_as_failure():
    sleeps = []
    with pytest.raises(BackendError):
        call_with_retry(const("   \n"), "s", "u", GenerationParams(), RetryPolicy(sleep=sleeps.append))
    assert sleeps == [1.0, 4.0, 16.0]


def test_draft_retries_recorded():
    docs = small_corpus(1)
    n = []

    def handler(s, u, p):
        n.append(1)
        if len(n) <= 2:
            raise BackendError("flaky")
        return "# Doc\n"

    [rec] = run_draft(docs, "markdown", MockBackend(handler), default_template("draft", "markdown"), retry=NO_WAIT)
    assert rec.retries == 2
    assert rec.draft_output == "# Doc\n"


def test_backend_unavailable_after_five_consecutive_failures(tmp_path):
    def down(s, u, p):
        raise BackendError("connection refused")

    docs = small_corpus(8)
    log_path = tmp_path / "draft.jsonl"
    with StageLog(log_path) as lg:
        with pytest.raises(BackendUnavailable):
            list(run_draft(docs, "markdown", MockBackend(down), default_template("draft", "markdown"),
                           retry=NO_WAIT, stage_log=lg))
    # the failing streak is not written, so a resume retries those documents
    assert read_log(log_path) == []


def test_isolated_failures_are_skipped():
    bad = {2, 5}
    docs = small_corpus(8)
    bad_html = {docs[i].html for i in bad}

    def handler(s, u, p):
        if any(h in u for h in bad_html):
            raise BackendError("500")
        return "# fine\n"

    recs = list(run_draft(docs, "markdown", MockBackend(handler), default_template("draft", "markdown"),
                          retry=NO_WAIT))
    assert [r.doc_id for r in recs] == [d.doc_id for i, d in enumerate(docs) if i not in bad]


def test_order_preserved_with_parallel_jobs():
    import random
    import time

    rng = random.Random(3)
    delays = {}

    def handler(s, u, p):
        time.sleep(delays.setdefault(threading.get_ident() ^ hash(u), rng.random() * 0.01))
        return u[-40:] + "\n"

    docs = small_corpus(30)
    t = default_template("draft", "markdown")
    serial = list(run_draft(docs, "markdown", MockBackend(handler), t, retry=NO_WAIT, jobs=1))
    parallel = list(run_draft(docs, "markdown", MockBackend(handler), t, retry=NO_WAIT, jobs=8))
    assert [r.doc_id for r in parallel] == [d.doc_id for d in docs]
    assert serial == parallel


def test_http_backend_requires_token(monkeypatch):
    monkeypatch.delenv("READERKIT_TEST_TOKEN", raising=False)

    def no_network(*a, **k):
        raise AssertionError("network used")

    monkeypatch.setattr("readerkit.synth.backends.urlopen", no_network)
    with pytest.raises(BackendConfigError):
        HttpBackend("http://127.0.0.1:9/v1/chat", "m", token_env="READERKIT_TEST_TOKEN")
    with pytest.raises(BackendConfigError):
        HttpBackend("", "m")


def test_http_backend_request(monkeypatch):
    monkeypatch.setenv("READERKIT_TEST_TOKEN", "sekret")
    seen = {}

    class Resp:
        def __enter__(self):
            return self

        def __exit__(self, *a):
            pass

        def read(self):
            return json.dumps({"choices": [{"message": {"content": "# hi"}}]}).encode()

    def fake_urlopen(req, timeout):
        seen["auth"] = req.get_header("Authorization")
        seen["body"] = json.loads(req.data)
        return Resp()

    monkeypatch.setattr("readerkit.synth.backends.urlopen", fake_urlopen)
    b = HttpBackend("http://example.invalid/v1/chat", "reader-1", token_env="READERKIT_TEST_TOKEN")
    out = b.generate("sys", "usr", GenerationParams(512, 0.0, 7))
    assert out == "# hi"
    assert seen["auth"] == "Bearer sekret"
    assert seen["body"] == {
        "model": "reader-1",
        "messages": [{"role": "system", "content": "sys"}, {"role": "user", "content": "usr"}],
        "max_tokens": 512, "temperature": 0.0, "seed": 7,
    }


# ---------------------------------------------------------------------------
# refine

def test_normalize_markdown():
    assert normalize_markdown("# T\n\nSame para.\n\nSame para.\n\nSame para.\n\nEnd.\n") == "# T\n\nSame para.\n\nEnd.\n"
    assert normalize_markdown("a\na\nb\n\n\n\nc\n") == "a\nb\n\nc\n"
    # code fences and table rows keep their repetition
    fenced = "```\nx\nx\n```\n"
    assert normalize_markdown(fenced) == fenced
    table = "| a |\n| --- |\n| 1 |\n| 1 |\n"
    assert normalize_markdown(table) == table


def test_refine_changed_flags():
    docs = small_corpus(2)
    noisy = "# Doc 0\n\nHello there.\n\nHello there.\n\nHello there.\n"
    clean = "# Doc 1\n\nHello there.\n"
    recs = list(run_refine(drafts_for(docs, [noisy, clean]), echo(), default_template("refine", "markdown"),
                           retry=NO_WAIT))
    assert recs[0].changed and recs[0].refined_output == "# Doc 0\n\nHello there.\n"
    assert not recs[1].changed and recs[1].refined_output == clean


def test_refine_json_unparseable_is_dropped(tmp_path):
    docs = small_corpus(3)
    outs = ['{"title": "a"}', "Sure! here it is: {", '```json\n{"title": "c"}\n```']
    path = tmp_path / "refine.jsonl"
    with StageLog(path) as lg:
        recs = list(run_refine(drafts_for(docs, outs, "json"), echo(), default_template("refine", "json"),
                               retry=NO_WAIT, stage_log=lg))
    assert [r.doc_id for r in recs] == [docs[0].doc_id, docs[2].doc_id]
    assert recs[1].refined_output == '{\n  "title": "c"\n}\n'
    entries = read_log(path)
    assert entries[1]["status"] == "error" and entries[1]["error"] == "RefinementUnparseable"


# ---------------------------------------------------------------------------
# critique

def test_parse_verdict():
    assert parse_verdict("PASS\nfaithful conversion") == (True, "faithful conversion")
    assert parse_verdict("FAIL\r\nmissing table\n") == (False, "missing table")
    assert parse_verdict("PASS") == (True, "PASS without explanation")
    assert parse_verdict("maybe ok") is None
    assert parse_verdict("pass\nlower case is not accepted") is None
    assert parse_verdict("PASS: fine") is None


def _refined(docs):
    return [RefineRecord(d.doc_id, f"# Doc {i}\n", False) for i, d in enumerate(docs)]


def _ctx(docs):
    return {d.doc_id: ("convert", d.html, "markdown") for d in docs}


def test_critique_pass():
    docs = small_corpus(1)
    [c] = run_critique(_refined(docs), const("PASS\nfaithful conversion"), default_template("critique", "markdown"),
                       context=_ctx(docs), retry=NO_WAIT)
    assert c.verdict is True and c.explanation == "faithful conversion"


def test_critique_unparseable_twice():
    docs = small_corpus(1)
    prompts = []

    def handler(s, u, p):
        prompts.append(u)
        return "maybe ok"

    [c] = run_critique(_refined(docs), MockBackend(handler), default_template("critique", "markdown"),
                       context=_ctx(docs), retry=NO_WAIT)
    assert (c.verdict, c.explanation) == (False, UNPARSEABLE_CRITIQUE)
    assert len(prompts) == 2 and prompts[1] != prompts[0]


def test_critique_reask_recovers():
    docs = small_corpus(1)
    answers = iter(["looks fine to me", "PASS\nall content present"])
    [c] = run_critique(_refined(docs), MockBackend(lambda s, u, p: next(answers)),
                       default_template("critique", "markdown"), context=_ctx(docs), retry=NO_WAIT)
    assert c.verdict is True


def test_scripted_critiques():
    docs = small_corpus(9)
    fail_ids = {docs[i].doc_id for i in (1, 4, 7)}
    fail_html = {d.html for d in docs if d.doc_id in fail_ids}

    def handler(s, u, p):
        return "FAIL\ndropped a paragraph" if any(h in u for h in fail_html) else "PASS\nfaithful"

    crits = list(run_critique(_refined(docs), MockBackend(handler), default_template("critique", "markdown"),
                              context=_ctx(docs), retry=NO_WAIT, jobs=3))
    assert [c.doc_id for c in crits] == [d.doc_id for d in docs]
    assert sum(not c.verdict for c in crits) == 3
    assert {c.doc_id for c in crits if not c.verdict} == fail_ids


def test_critique_record_requires_explanation():
    with pytest.raises(ValueError):
        CritiqueRecord("x", True, "")


# ---------------------------------------------------------------------------
# assembly

def _records(n_pass, n_fail, n_changed=0):
    docs = small_corpus(n_pass + n_fail)
    drafts, refined, crits = [], [], []
    for i, d in enumerate(docs):
        draft = f"# Doc {i}\n\nx\n\nx\n" if i < n_changed else f"# Doc {i}\n\nx\n"
        drafts.append(DraftRecord(d.doc_id, "convert", "markdown", draft, "t", STAMP))
        refined.append(RefineRecord(d.doc_id, f"# Doc {i}\n\nx\n", draft != f"# Doc {i}\n\nx\n"))
        ok = i < n_pass
        crits.append(CritiqueRecord(d.doc_id, ok, "fine" if ok else "wrong"))
    return docs, drafts, refined, crits


def test_sft_filtered_keeps_passes():
    docs, drafts, refined, crits = _records(6, 3)
    sft = assemble_sft_filtered(refined, crits, _ctx(docs))
    assert len(sft) == 6
    assert [e.doc_id for e in sft] == [d.doc_id for d in docs[:6]]


def test_sft_filtered_empty_warns(caplog):
    docs, drafts, refined, crits = _records(0, 3)
    with caplog.at_level(logging.WARNING):
        assert assemble_sft_filtered(refined, crits, _ctx(docs)) == []
    assert "empty" in caplog.text


@pytest.mark.parametrize("neg,pos,expected", [
    (50, 200, (50, 100)),
    (100, 100, (50, 100)),
    (0, 10, (0, 10)),
    (10, 0, (10, 0)),
    (3, 6, (3, 6)),
    (7, 15, (7, 14)),
    (1, 1, (0, 1)),
])
def test_balance_counts(neg, pos, expected):
    assert balance_counts(neg, pos) == expected


def test_balance_ratio_invariant():
    for neg in range(0, 60):
        for pos in range(0, 60):
            kn, kp = balance_counts(neg, pos)
            assert kn <= neg and kp <= pos
            if neg and pos:
                assert 2 * kn <= kp <= 2 * kn + 1
                assert kn == neg or kp == pos


def test_critique_dataset_balanced_and_seeded():
    docs, drafts, refined, crits = _records(30, 20)
    a = assemble_critique_dataset(refined, crits, _ctx(docs), seed=5)
    b = assemble_critique_dataset(refined, crits, _ctx(docs), seed=5)
    assert a == b
    assert sum(not e.verdict for e in a) == 15 and sum(e.verdict for e in a) == 30


def test_critique_dataset_single_class_warns(caplog):
    docs, drafts, refined, crits = _records(10, 0)
    with caplog.at_level(logging.WARNING):
        rows = assemble_critique_dataset(refined, crits, _ctx(docs))
    assert len(rows) == 10
    assert "single class" in caplog.text


def test_dpo_only_changed_passes():
    docs, drafts, refined, crits = _records(6, 2, n_changed=4)
    dpo = assemble_dpo(drafts, refined, crits, _ctx(docs))
    assert len(dpo) == 4
    assert all(t.chosen != t.rejected for t in dpo)


def test_dpo_duplicate_ids_rejected():
    docs, drafts, refined, crits = _records(2, 0)
    with pytest.raises(ValueError):
        assemble_dpo(drafts + drafts[:1], refined, crits, _ctx(docs))


# ---------------------------------------------------------------------------
# full rounds

def _backends(task="markdown", name="mock"):
    return Backends(mock_draft(task, name=name, salt="" if name == "mock" else name), mock_refine(), mock_critique())


def _dataset_bytes(rdir):
    return {p.name: p.read_bytes() for p in sorted(Path(rdir).glob("*.jsonl"))}


@pytest.mark.parametrize("task", ["markdown", "json"])
def test_round_byte_identical(tmp_path, task):
    docs = page_corpus(40)
    r1 = run_round(docs, PipelineConfig(tmp_path / "a", task=task, seed=3, jobs=1, retry=NO_WAIT, created_at=STAMP),
                   _backends(task))
    r2 = run_round(docs, PipelineConfig(tmp_path / "b", task=task, seed=3, jobs=4, retry=NO_WAIT, created_at=STAMP),
                   _backends(task))
    a, b = _dataset_bytes(r1.directory), _dataset_bytes(r2.directory)
    assert set(a) >= {"sft_filtered.jsonl", "sft_critique.jsonl", "dpo_preference.jsonl"}
    assert a == b
    assert r1.counts["sft_filtered"] > 0


def test_rerun_keeps_timestamp(tmp_path, monkeypatch):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    docs = page_corpus(10)
    conf = PipelineConfig(tmp_path, retry=NO_WAIT)
    r1 = run_round(docs, conf, _backends())
    before = _dataset_bytes(r1.directory)
    r2 = run_round(docs, conf, _backends())
    assert _dataset_bytes(r2.directory) == before


def test_dataset_rows_shape(tmp_path):
    docs = page_corpus(20)
    r = run_round(docs, PipelineConfig(tmp_path, retry=NO_WAIT, created_at=STAMP), _backends())
    sft = [json.loads(l) for l in (r.directory / "sft_filtered.jsonl").read_text().splitlines()]
    crit = [json.loads(l) for l in (r.directory / "sft_critique.jsonl").read_text().splitlines()]
    dpo = [json.loads(l) for l in (r.directory / "dpo_preference.jsonl").read_text().splitlines()]
    prov = {"pipeline_round", "backend_name", "created_at"}
    assert sft and set(sft[0]) >= {"doc_id", "instruction", "html", "target_output", "task"} | prov
    assert crit and set(crit[0]["input"]) == {"instruction", "html", "output"}
    assert set(crit[0]["output"]) == {"verdict", "explanation"}
    assert dpo and set(dpo[0]) >= {"doc_id", "instruction", "html", "chosen", "rejected"} | prov
    assert all(row["created_at"] == STAMP and row["pipeline_round"] == 1 for row in sft + crit + dpo)


class Crash(BaseException):
    pass


def crashing(backend, after):
    count = [0]
    lock = threading.Lock()

    def handler(s, u, p):
        with lock:
            count[0] += 1
            if count[0] > after:
                raise Crash()
        return backend.generate(s, u, p)

    return MockBackend(handler, name=backend.name)


@pytest.mark.parametrize("stage,jobs", [("draft", 1), ("refine", 4), ("critique", 2)])
def test_kill_and_resume(tmp_path, stage, jobs):
    docs = page_corpus(30)
    conf = lambda d: PipelineConfig(tmp_path / d, seed=1, jobs=jobs, retry=NO_WAIT, created_at=STAMP)
    ref = run_round(docs, conf("ref"), _backends())

    b = _backends()
    setattr(b, stage, crashing(getattr(b, stage), 17))
    with pytest.raises(Crash):
        run_round(docs, conf("run"), b)
    log_path = tmp_path / "run" / "round-001" / f"{stage}.jsonl"
    # simulate a kill in the middle of a write
    with open(log_path, "a", encoding="utf-8") as fh:
        fh.write('{"doc_id": "trunc')
    assert load_manifest(tmp_path / "run")["rounds"]["1"]["status"] == "running"

    resumed = run_round(docs, conf("run"), _backends(), resume=True)
    assert _dataset_bytes(resumed.directory) == _dataset_bytes(ref.directory)
    assert load_manifest(tmp_path / "run")["rounds"]["1"]["status"] == "complete"


def test_resume_rejects_other_corpus(tmp_path):
    docs = page_corpus(6)
    conf = PipelineConfig(tmp_path, retry=NO_WAIT, created_at=STAMP)
    run_round(docs, conf, _backends())
    with pytest.raises(ValueError):
        run_round(docs[:3], conf, _backends(), resume=True)


def test_self_play_rounds(tmp_path):
    docs = page_corpus(30)
    conf = PipelineConfig(tmp_path, seed=2, retry=NO_WAIT, created_at=STAMP)
    r1 = run_round(docs, conf, _backends())
    r2 = self_play_round(docs, conf, mock_draft("markdown", name="mock-alt", salt="alt"), mock_refine(),
                         mock_critique())
    assert (r1.round, r2.round) == (1, 2)
    manifest = load_manifest(tmp_path)
    assert manifest["current_round"] == 2
    assert manifest["rounds"]["2"]["backends"]["draft"] == "mock-alt"
    rows = [json.loads(l) for l in (r2.directory / "sft_filtered.jsonl").read_text().splitlines()]
    assert rows and all(r["pipeline_round"] == 2 and r["backend_name"] == "mock-alt" for r in rows)
    # a different draft backend produces different drafts
    assert _dataset_bytes(r1.directory)["dpo_preference.jsonl"] != _dataset_bytes(r2.directory)["dpo_preference.jsonl"]
    # round 1 is left untouched
    assert (r1.directory / "sft_filtered.jsonl").exists()


def test_manifest_records_configuration(tmp_path):
    docs = page_corpus(5)
    run_round(docs, PipelineConfig(tmp_path, task="json", seed=9, retry=NO_WAIT, created_at=STAMP), _backends("json"))
    entry = load_manifest(tmp_path)["rounds"]["1"]
    assert entry["seed"] == 9 and entry["task"] == "json" and entry["corpus_count"] == 5
    assert entry["params"]["seed"] == 9
    assert set(entry["templates"]) == {"draft", "refine", "critique"}
    assert json.loads(entry["schema"])["type"] == "object"
