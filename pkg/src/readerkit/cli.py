"""Command line entry point: ``readerkit <command> ...``.

Settings are layered: built-in defaults, then a JSON config file
(``--config``), then ``READERKIT_*`` environment variables, then flags.
``--print-config`` prints the merged settings as a config file and exits.

Exit codes: 0 success, 1 fatal error, 2 partial failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from . import __version__
from .corpus import (
    SUPPORTED_LANGUAGES,
    CorpusDoc,
    EmptyCorpus,
    IngestStats,
    SourceUnreadable,
    ingest,
    length_stats,
    plan_curriculum,
    read_store,
    write_store,
)
from .html_tree import parse_html
from .jsonx import ExtractionError, ExtractionTemplate, JsonSchemaSpec, SchemaError, loads_strict
from .markdown import ExtractionInstruction, ScopeEmpty, convert
from .metrics import EmptyInput, json_metrics, markdown_metrics, report

log = logging.getLogger("readerkit")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2
ENV_PREFIX = "READERKIT_"

DEFAULTS: dict[str, Any] = {
    "jobs": os.cpu_count() or 1,
    "seed": 0,
    "task": "markdown",
    "backend": "mock",
    "refine_backend": None,
    "critique_backend": None,
    "backend_url": "",
    "backend_model": "",
    "backend_token_env": "READERKIT_API_KEY",
    "max_output_tokens": 4096,
    "temperature": 0.0,
    "max_failures": 5,
    "created_at": None,
    "languages": list(SUPPORTED_LANGUAGES),
    "max_len": 32768,
    "long_fraction": 0.4,
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 means "partial" here
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_FATAL, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration

def _coerce_env(key: str, raw: str) -> Any:
    default = DEFAULTS.get(key)
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, list):
        return [p.strip() for p in raw.split(",") if p.strip()]
    return raw


def load_config(path: str | None, flags: dict[str, Any], environ: dict[str, str] | None = None) -> dict[str, Any]:
    """Merge defaults <- config file <- environment <- flags (None flags are unset)."""
    environ = os.environ if environ is None else environ
    cfg = dict(DEFAULTS)
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        cfg.update(data)
    for key in list(cfg) + [k for k in flags if k not in cfg]:
        env_key = ENV_PREFIX + key.upper()
        if env_key in environ:
            try:
                cfg[key] = _coerce_env(key, environ[env_key])
            except ValueError as exc:
                raise UsageError(f"bad value for {env_key}: {exc}") from exc
    for key, value in flags.items():
        if value is not None:
            cfg[key] = value
    return cfg


# ---------------------------------------------------------------------------
# shared helpers

def _ids_for(paths: Sequence[Path]) -> list[str]:
    """Output stems, disambiguated when two inputs share a file name."""
    seen: dict[str, int] = {}
    out = []
    for p in paths:
        stem = p.stem or "doc"
        n = seen.get(stem, 0)
        seen[stem] = n + 1
        out.append(stem if n == 0 else f"{stem}-{n}")
    return out


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def load_corpus(path: str | Path, allowed: Iterable[str] | None = None,
                stats: IngestStats | None = None) -> Iterator[CorpusDoc]:
    """A directory or {url, html} JSONL is ingested; a store JSONL is read as is."""
    path = Path(path)
    if path.is_dir():
        return ingest(path, allowed=allowed, stats=stats)
    if not path.exists():
        raise SourceUnreadable(f"{path}: no such file or directory")
    with open(path, encoding="utf-8") as fh:
        first = next((line for line in fh if line.strip()), "")
    try:
        is_store = "doc_id" in json.loads(first) if first else True
    except ValueError:
        is_store = False
    if is_store:
        return read_store(path)
    return ingest(path, allowed=allowed, stats=stats)


# ---------------------------------------------------------------------------
# commands

def cmd_convert(cfg: dict) -> int:
    inputs = [Path(p) for p in cfg["inputs"]]
    if not inputs:
        raise UsageError("no input files given")
    instr = None
    if cfg.get("instruction"):
        try:
            instr = ExtractionInstruction.from_dict(json.loads(Path(cfg["instruction"]).read_text(encoding="utf-8")))
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"bad instruction file: {exc}") from exc
    out_dir = Path(cfg["out"])
    failures = 0
    for path, stem in zip(inputs, _ids_for(inputs)):
        try:
            doc = convert(parse_html(path.read_bytes()), instr, source_id=str(path))
        except OSError as exc:
            log.error("%s: unreadable: %s", path, exc)
            failures += 1
            continue
        except ScopeEmpty as exc:
            log.error("%s: %s", path, exc)
            failures += 1
            continue
        _write_text(out_dir / f"{stem}.md", doc.body)
        log.info("%s -> %s (%d chars)", path, out_dir / f"{stem}.md", doc.char_count)
    if failures == len(inputs):
        return EXIT_FATAL
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_extract_json(cfg: dict) -> int:
    inputs = [Path(p) for p in cfg["inputs"]]
    if not inputs:
        raise UsageError("no input files given")
    try:
        schema = JsonSchemaSpec.load(cfg["schema"])
        template = ExtractionTemplate.load(cfg["template"])
        template.check(schema)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"bad schema or template: {exc}") from exc
    out_dir = Path(cfg["out"])
    failures = 0
    from .jsonx import extract_json

    for path, stem in zip(inputs, _ids_for(inputs)):
        try:
            value = extract_json(parse_html(path.read_bytes()), schema, template)
        except OSError as exc:
            log.error("%s: unreadable: %s", path, exc)
            failures += 1
            continue
        except (ExtractionError, SchemaError) as exc:
            log.error("%s: %s", path, exc)
            failures += 1
            continue
        _write_text(out_dir / f"{stem}.json", json.dumps(value, ensure_ascii=False, indent=2) + "\n")
    if failures == len(inputs):
        return EXIT_FATAL
    return EXIT_PARTIAL if failures else EXIT_OK


def _read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        rows.append(json.loads(line))
                    except ValueError as exc:
                        raise UsageError(f"{path}:{lineno}: {exc}") from exc
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    return rows


def cmd_eval(cfg: dict) -> int:
    preds = _read_jsonl(cfg["predictions"])
    refs_path = Path(cfg["references"])
    refs = {}
    for row in _read_jsonl(refs_path):
        refs[str(row["doc_id"])] = row
    kind = cfg["task"]
    pred_ids = {str(p.get("doc_id")) for p in preds}
    orphans = sorted(pred_ids - refs.keys()) + sorted(refs.keys() - pred_ids)
    if orphans:
        for doc_id in orphans:
            side = "reference" if doc_id in pred_ids else "prediction"
            print(f"orphan {doc_id}: no matching {side}", file=sys.stderr)
        return EXIT_FATAL

    schemas: dict[str, JsonSchemaSpec] = {}
    rows = []
    failed = 0
    for p in preds:
        doc_id = str(p["doc_id"])
        ref = refs[doc_id]
        model = str(p.get("model", "model"))
        task = str(p.get("task") or ref.get("task") or kind)
        try:
            prediction = p["prediction"]
            if not isinstance(prediction, str):
                raise ValueError("prediction must be a string")
            if kind == "json":
                truth = ref["truth_json"]
                if isinstance(truth, str):
                    truth = loads_strict(truth)
                schema_path = ref.get("schema_path") or cfg.get("schema")
                if not schema_path:
                    raise ValueError("no schema_path for JSON reference")
                schema_file = (refs_path.parent / schema_path) if not os.path.isabs(schema_path) else Path(schema_path)
                key = str(schema_file)
                if key not in schemas:
                    schemas[key] = JsonSchemaSpec.load(schema_file)
                rows.append((model, task, json_metrics(prediction, truth, schemas[key])))
            else:
                reference = ref["reference"]
                if not isinstance(reference, str):
                    raise ValueError("reference must be a string")
                rows.append((model, task, markdown_metrics(prediction, reference)))
        except (KeyError, ValueError, OSError) as exc:
            log.error("%s: not evaluated: %s", doc_id, exc)
            failed += 1
    try:
        rep = report(rows)
    except EmptyInput:
        log.error("nothing to report")
        return EXIT_FATAL
    text = rep.to_text()
    sys.stdout.write(text)
    if cfg.get("out"):
        out = Path(cfg["out"])
        _write_text(out / "report.json", rep.to_json())
        _write_text(out / "report.txt", text)
    return EXIT_PARTIAL if failed else EXIT_OK


def _make_backend(name: str, stage: str, cfg: dict):
    from .synth import HttpBackend, mock_critique, mock_draft, mock_refine
    from .synth.mocks import MOCK_DRAFTS

    if name in MOCK_DRAFTS:
        if stage == "draft":
            return mock_draft(cfg["task"], name=name, salt=MOCK_DRAFTS[name])
        return mock_refine() if stage == "refine" else mock_critique()
    if name == "http":
        return HttpBackend(cfg["backend_url"], cfg["backend_model"], cfg["backend_token_env"])
    raise UsageError(f"unknown backend {name!r} (choose mock, mock-alt or http)")


def cmd_synth(cfg: dict) -> int:
    from .synth import (
        Backends,
        BackendConfigError,
        BackendUnavailable,
        GenerationParams,
        PipelineConfig,
        PromptTemplate,
        TemplateError,
        load_manifest,
        run_round,
    )

    try:
        backends = Backends(
            _make_backend(cfg["backend"], "draft", cfg),
            _make_backend(cfg.get("refine_backend") or cfg["backend"], "refine", cfg),
            _make_backend(cfg.get("critique_backend") or cfg["backend"], "critique", cfg),
        )
    except BackendConfigError as exc:
        log.error("backend: %s", exc)
        return EXIT_FATAL
    templates = {}
    try:
        for stage in ("draft", "refine", "critique"):
            path = cfg.get(f"template_{stage}")
            if path:
                templates[stage] = PromptTemplate.load(stage, path)
        schema = JsonSchemaSpec.load(cfg["schema"]) if cfg.get("schema") else None
    except (TemplateError, OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc

    out_dir = Path(cfg["out"])
    round_no = cfg.get("round")
    if cfg.get("self_play"):
        round_no = int(load_manifest(out_dir).get("current_round", 0)) + 1
    round_no = int(round_no or 1)
    pconf = PipelineConfig(
        out_dir, task=cfg["task"], seed=cfg["seed"], jobs=cfg["jobs"], templates=templates, schema=schema,
        params=GenerationParams(cfg["max_output_tokens"], cfg["temperature"], cfg["seed"]),
        max_failures=cfg["max_failures"], created_at=cfg.get("created_at"),
    )
    try:
        docs = list(load_corpus(cfg["corpus"]))
        result = run_round(docs, pconf, backends, round_no=round_no, resume=bool(cfg.get("resume")))
    except (SourceUnreadable, OSError) as exc:
        log.error("%s", exc)
        return EXIT_FATAL
    except BackendUnavailable as exc:
        log.error("%s; rerun with --resume once the backend is back", exc)
        return EXIT_FATAL
    except KeyboardInterrupt:
        log.error("interrupted; stage logs are checkpointed, rerun with --resume")
        return EXIT_FATAL
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_FATAL
    c = result.counts
    print(json.dumps({"round": result.round, "directory": str(result.directory), "counts": c}, indent=2))
    return EXIT_PARTIAL if c["draft_skipped"] or c["refine_dropped"] else EXIT_OK


def cmd_corpus(cfg: dict) -> int:
    action = cfg["action"]
    if action == "ingest":
        stats = IngestStats()
        allowed = None if cfg.get("no_lang_filter") else cfg["languages"]
        try:
            n = write_store(ingest(cfg["source"], allowed=allowed, stats=stats, fetch=bool(cfg.get("fetch")),
                                   jobs=cfg["jobs"]), cfg["out"])
        except SourceUnreadable as exc:
            log.error("%s", exc)
            return EXIT_FATAL
        print(json.dumps({"documents": n, "seen": stats.seen, "duplicates": stats.duplicates,
                          "malformed": stats.malformed, "language_filtered": stats.filtered}, indent=2))
        return EXIT_PARTIAL if stats.malformed else EXIT_OK
    try:
        docs = load_corpus(cfg["source"])
        if action == "stats":
            result = length_stats(docs).to_dict()
        else:
            result = plan_curriculum(docs, cfg["max_len"], cfg["long_fraction"], cfg["seed"]).to_dict()
    except (SourceUnreadable, OSError) as exc:
        log.error("%s", exc)
        return EXIT_FATAL
    except (EmptyCorpus, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_FATAL
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if cfg.get("out"):
        _write_text(Path(cfg["out"]), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    g.add_argument("--jobs", type=int, help="worker pool width (default: logical cores)")
    g.add_argument("--seed", type=int, help="seed for every random choice in the run")
    g.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = Parser(prog="readerkit", description="HTML to Markdown/JSON conversion, evaluation and data synthesis.")
    parser.add_argument("--version", action="version", version=f"readerkit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("convert", parents=[common], help="convert HTML files to Markdown")
    p.add_argument("inputs", nargs="*", help="HTML files")
    p.add_argument("-o", "--out", default=None, help="output directory (default: current directory)")
    p.add_argument("--instruction", help="JSON extraction instruction file")

    p = sub.add_parser("extract-json", parents=[common], help="schema-guided JSON extraction")
    p.add_argument("inputs", nargs="*", help="HTML files")
    p.add_argument("--schema", required=True)
    p.add_argument("--template", required=True, help="JSON file of field rules")
    p.add_argument("-o", "--out", default=None)

    p = sub.add_parser("eval", parents=[common], help="score predictions against references")
    p.add_argument("predictions", help="JSONL of {doc_id, model, task, prediction}")
    p.add_argument("--references", required=True,
                   help="JSONL of {doc_id, reference} or {doc_id, truth_json, schema_path}")
    p.add_argument("--task", choices=("markdown", "json"))
    p.add_argument("--schema", help="schema for JSON rows without schema_path")
    p.add_argument("-o", "--out", help="directory for report.json and report.txt")

    p = sub.add_parser("synth", parents=[common], help="run a draft/refine/critique round")
    p.add_argument("corpus", help="corpus store JSONL, {url, html} JSONL or directory of HTML files")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--task", choices=("markdown", "json"))
    p.add_argument("--round", type=int)
    p.add_argument("--self-play", action="store_true", help="run as the next round after the last one")
    p.add_argument("--resume", action="store_true", help="continue an interrupted round")
    p.add_argument("--backend", help="draft backend: mock, mock-alt or http")
    p.add_argument("--refine-backend")
    p.add_argument("--critique-backend")
    p.add_argument("--backend-url")
    p.add_argument("--backend-model")
    p.add_argument("--backend-token-env", help="environment variable holding the bearer token")
    p.add_argument("--schema", help="JSON schema for the json task")
    p.add_argument("--template-draft")
    p.add_argument("--template-refine")
    p.add_argument("--template-critique")
    p.add_argument("--created-at", help="timestamp stamped on every row (default: SOURCE_DATE_EPOCH or now)")
    p.add_argument("--max-failures", type=int)

    p = sub.add_parser("corpus", help="corpus ingestion, statistics and curriculum")
    csub = p.add_subparsers(dest="action", metavar="action", parser_class=Parser)
    csub.required = True
    c = csub.add_parser("ingest", parents=[common], help="build a corpus store")
    c.add_argument("source", help="directory of .html files or JSONL of {url, html}")
    c.add_argument("-o", "--out", required=True, help="store JSONL to write")
    c.add_argument("--languages", type=lambda s: [x.strip() for x in s.split(",") if x.strip()],
                   help="comma separated language codes to keep")
    c.add_argument("--no-lang-filter", action="store_true", default=None)
    c.add_argument("--fetch", action="store_true", default=None, help="GET rows that carry only a url")
    c = csub.add_parser("stats", parents=[common], help="token length statistics")
    c.add_argument("source")
    c.add_argument("-o", "--out")
    c = csub.add_parser("curriculum", parents=[common], help="long/short curriculum buckets")
    c.add_argument("source")
    c.add_argument("--max-len", type=int)
    c.add_argument("--long-fraction", type=float)
    c.add_argument("-o", "--out")
    return parser


_HANDLERS = {"convert": cmd_convert, "extract-json": cmd_extract_json, "eval": cmd_eval,
             "synth": cmd_synth, "corpus": cmd_corpus}
_CONTROL = {"config", "print_config", "verbose", "command"}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    flags = {k: v for k, v in vars(args).items() if k not in _CONTROL}
    if args.command in ("convert", "extract-json") and flags.get("out") is None:
        flags["out"] = "."
    try:
        cfg = load_config(args.config, flags)
        if args.print_config:
            sys.stdout.write(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
            return EXIT_OK
        return _HANDLERS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"readerkit: error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
