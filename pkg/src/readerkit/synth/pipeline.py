"""Round orchestration: draft -> refine -> critique -> assemble, with a manifest."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from ..corpus import CorpusDoc
from ..jsonx import JsonSchemaSpec
from .assemble import assemble_critique_dataset, assemble_dpo, assemble_sft_filtered
from .backends import GenerationBackend, GenerationParams, RetryPolicy
from .records import TASKS, Provenance
from .stages import DEFAULT_MAX_FAILURES, StageLog, run_critique, run_draft, run_refine
from .templates import PromptTemplate, default_template

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
DATASET_FILES = {
    "sft_filtered": "sft_filtered.jsonl",
    "sft_critique": "sft_critique.jsonl",
    "dpo_preference": "dpo_preference.jsonl",
}
STAGES = ("draft", "refine", "critique")


@dataclass
class Backends:
    draft: GenerationBackend
    refine: GenerationBackend
    critique: GenerationBackend

    def names(self) -> dict[str, str]:
        return {"draft": self.draft.name, "refine": self.refine.name, "critique": self.critique.name}


@dataclass
class PipelineConfig:
    out_dir: Path
    task: str = "markdown"
    seed: int = 0
    jobs: int = 1
    templates: dict[str, PromptTemplate] = field(default_factory=dict)
    schema: JsonSchemaSpec | None = None
    instruction: str | None = None
    params: GenerationParams = GenerationParams()
    retry: RetryPolicy = RetryPolicy()
    max_failures: int = DEFAULT_MAX_FAILURES
    created_at: str | None = None

    def __post_init__(self) -> None:
        self.out_dir = Path(self.out_dir)
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.params.seed is None:
            self.params = GenerationParams(self.params.max_output_tokens, self.params.temperature, self.seed)

    def template(self, stage: str) -> PromptTemplate:
        return self.templates.get(stage) or default_template(stage, self.task)

    @property
    def schema_text(self) -> str:
        if self.task != "json":
            return ""
        from .mocks import DEFAULT_JSON_SCHEMA

        schema = self.schema.to_dict() if self.schema is not None else DEFAULT_JSON_SCHEMA
        return json.dumps(schema, indent=2, sort_keys=True)


@dataclass
class RoundResult:
    round: int
    directory: Path
    counts: dict[str, int]
    datasets: dict[str, list[dict]]


def round_dir(out_dir: Path, round_no: int) -> Path:
    return Path(out_dir) / f"round-{round_no:03d}"


def corpus_hash(docs: Iterable[CorpusDoc]) -> str:
    h = hashlib.sha256()
    for d in docs:
        h.update(d.doc_id.encode("ascii") + b"\n")
    return h.hexdigest()


def resolve_created_at(explicit: str | None) -> str | None:
    """Explicit value, else SOURCE_DATE_EPOCH, else None (caller decides)."""
    if explicit:
        return explicit
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        return _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return None


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def load_manifest(out_dir: Path) -> dict[str, Any]:
    path = Path(out_dir) / MANIFEST
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def _save_manifest(out_dir: Path, manifest: dict) -> None:
    _write_atomic(Path(out_dir) / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def _write_dataset(path: Path, rows: list[dict]) -> None:
    _write_atomic(path, "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows))


def run_round(corpus: Iterable[CorpusDoc], config: PipelineConfig, backends: Backends, round_no: int = 1,
              resume: bool = False) -> RoundResult:
    """Run one full round and write its logs, datasets and manifest entry.

    With ``resume`` the stage logs of an interrupted run are continued; with
    deterministic backends the final datasets are byte-identical to an
    uninterrupted run.
    """
    docs = list(corpus)
    ids = [d.doc_id for d in docs]
    if len(set(ids)) != len(ids):
        raise ValueError("corpus has duplicate doc_ids")
    out_dir = config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    rdir = round_dir(out_dir, round_no)
    templates = {s: config.template(s) for s in STAGES}
    chash = corpus_hash(docs)

    manifest = load_manifest(out_dir)
    prior = manifest.get("rounds", {}).get(str(round_no), {})
    same_inputs = prior.get("corpus_hash") == chash and prior.get("task") == config.task
    if resume and prior and not same_inputs:
        raise ValueError(f"round {round_no} in {out_dir} was started with a different corpus or task")
    # a rerun of the same round keeps its timestamp so the bytes do not move
    created_at = resolve_created_at(config.created_at) or (prior.get("created_at") if same_inputs else None) or _now()

    entry = {
        "round": round_no,
        "status": "running",
        "created_at": created_at,
        "corpus_hash": chash,
        "corpus_count": len(docs),
        "task": config.task,
        "seed": config.seed,
        "backends": backends.names(),
        "templates": {s: t.digest for s in STAGES for t in [templates[s]]},
        "schema": config.schema_text or None,
        "params": asdict(config.params),
        "jobs": config.jobs,
    }
    manifest.setdefault("rounds", {})[str(round_no)] = entry
    manifest["current_round"] = max(int(k) for k in manifest["rounds"])
    _save_manifest(out_dir, manifest)

    common = dict(retry=config.retry, jobs=config.jobs, max_failures=config.max_failures, params=config.params)
    rdir.mkdir(parents=True, exist_ok=True)
    logs = {s: StageLog(rdir / f"{s}.jsonl", resume=resume) for s in STAGES}
    try:
        drafts = list(run_draft(docs, config.task, backends.draft, templates["draft"],
                                instruction=config.instruction, schema_text=config.schema_text,
                                stage_log=logs["draft"], timestamp=created_at, **common))
        refined = list(run_refine(drafts, backends.refine, templates["refine"], stage_log=logs["refine"], **common))
        html = {d.doc_id: d.html for d in docs}
        context = {d.doc_id: (d.instruction, html[d.doc_id], d.task) for d in drafts}
        critiques = list(run_critique(refined, backends.critique, templates["critique"], context=context,
                                      schema_text=config.schema_text, stage_log=logs["critique"], **common))
    finally:
        for lg in logs.values():
            lg.close()

    prov = Provenance(round_no, backends.draft.name, created_at)
    sft = assemble_sft_filtered(refined, critiques, context)
    crit_ds = assemble_critique_dataset(refined, critiques, context, seed=config.seed)
    dpo = assemble_dpo(drafts, refined, critiques, context)
    datasets = {
        "sft_filtered": [e.row(prov) for e in sft],
        "sft_critique": [e.row(prov) for e in crit_ds],
        "dpo_preference": [e.row(prov) for e in dpo],
    }
    for name, rows in datasets.items():
        _write_dataset(rdir / DATASET_FILES[name], rows)

    counts = {
        "corpus": len(docs),
        "draft": len(drafts),
        "draft_skipped": len(docs) - len(drafts),
        "refine": len(refined),
        "refine_dropped": len(drafts) - len(refined),
        "critique": len(critiques),
        "critique_pass": sum(c.verdict for c in critiques),
        "critique_fail": sum(not c.verdict for c in critiques),
        **{name: len(rows) for name, rows in datasets.items()},
    }
    entry["counts"] = counts
    entry["status"] = "complete"
    _save_manifest(out_dir, manifest)
    log.info("round %d complete: %s", round_no, counts)
    return RoundResult(round_no, rdir, counts, datasets)


def self_play_round(corpus: Iterable[CorpusDoc], config: PipelineConfig, backend_new: GenerationBackend,
                    refine: GenerationBackend, critique: GenerationBackend) -> RoundResult:
    """Regenerate all three datasets with ``backend_new`` drafting, as the next round."""
    manifest = load_manifest(config.out_dir)
    next_round = int(manifest.get("current_round", 0)) + 1
    return run_round(corpus, config, Backends(backend_new, refine, critique), round_no=next_round)
