"""Turn stage records into the SFT, critique and preference datasets."""

from __future__ import annotations

import logging
import random
from typing import Iterable, Mapping

from .records import CritiqueExample, CritiqueRecord, DpoTriplet, DraftRecord, RefineRecord, SftExample

log = logging.getLogger(__name__)

# doc_id -> (instruction, html, task)
Context = Mapping[str, tuple[str, str, str]]


def _index(records: Iterable, what: str) -> dict:
    out = {}
    for r in records:
        if r.doc_id in out:
            raise ValueError(f"duplicate doc_id {r.doc_id} among {what} records")
        out[r.doc_id] = r
    return out


def assemble_sft_filtered(refined: Iterable[RefineRecord], critiques: Iterable[CritiqueRecord],
                          context: Context) -> list[SftExample]:
    """Refined outputs whose critique passed, in pipeline order."""
    verdicts = _index(critiques, "critique")
    out = []
    for rec in refined:
        crit = verdicts.get(rec.doc_id)
        if crit is None or not crit.verdict:
            continue
        instruction, html, task = context[rec.doc_id]
        out.append(SftExample(rec.doc_id, instruction, html, rec.refined_output, task))
    if not out:
        log.warning("no record passed critique; the SFT dataset is empty")
    return out


def balance_counts(n_neg: int, n_pos: int) -> tuple[int, int]:
    """How many negatives and positives to keep for a 1:2 ratio.

    The limiting class is kept whole. With both classes present the result
    satisfies 2*neg <= pos <= 2*neg + 1.
    """
    if n_neg == 0 or n_pos == 0:
        return n_neg, n_pos
    if 2 * n_neg <= n_pos:
        return n_neg, 2 * n_neg
    return n_pos // 2, n_pos


def assemble_critique_dataset(refined: Iterable[RefineRecord], critiques: Iterable[CritiqueRecord],
                              context: Context, seed: int = 0) -> list[CritiqueExample]:
    """Critique examples at 1 negative : 2 positives, seeded downsampling and shuffle."""
    outputs = _index(refined, "refine")
    examples = []
    for crit in critiques:
        instruction, html, _task = context[crit.doc_id]
        examples.append(CritiqueExample(crit.doc_id, instruction, html, outputs[crit.doc_id].refined_output,
                                        crit.verdict, crit.explanation))
    neg = [e for e in examples if not e.verdict]
    pos = [e for e in examples if e.verdict]
    if not neg or not pos:
        if examples:
            log.warning("critique dataset has a single class (%d negative, %d positive)", len(neg), len(pos))
        else:
            log.warning("no critique records; the critique dataset is empty")
    keep_neg, keep_pos = balance_counts(len(neg), len(pos))
    rng = random.Random(seed)
    chosen = rng.sample(neg, keep_neg) + rng.sample(pos, keep_pos)
    rng.shuffle(chosen)
    return chosen


def assemble_dpo(drafts: Iterable[DraftRecord], refined: Iterable[RefineRecord],
                 critiques: Iterable[CritiqueRecord], context: Context) -> list[DpoTriplet]:
    """(chosen = passed refined output, rejected = draft) where the two differ."""
    outputs = _index(refined, "refine")
    verdicts = _index(critiques, "critique")
    out = []
    seen = set()
    for d in drafts:
        if d.doc_id in seen:
            raise ValueError(f"duplicate doc_id {d.doc_id} among draft records")
        seen.add(d.doc_id)
        rec = outputs.get(d.doc_id)
        crit = verdicts.get(d.doc_id)
        if rec is None or crit is None or not crit.verdict:
            continue
        if rec.refined_output == d.draft_output:
            continue
        instruction, html, _task = context[d.doc_id]
        out.append(DpoTriplet(d.doc_id, instruction, html, rec.refined_output, d.draft_output))
    return out
