"""Corpus ingestion, language filtering, length statistics and curriculum buckets."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import unicodedata
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .html_tree import decode_html, inner_text, parse_html

log = logging.getLogger(__name__)

__all__ = [
    "CorpusDoc",
    "CurriculumPlan",
    "LengthStats",
    "IngestStats",
    "SourceUnreadable",
    "EmptyCorpus",
    "SUPPORTED_LANGUAGES",
    "doc_id_for",
    "estimate_tokens",
    "detect_language",
    "LanguageDetector",
    "default_detector",
    "ingest",
    "read_store",
    "write_store",
    "length_stats",
    "plan_curriculum",
    "HISTOGRAM_EDGES",
]

# Languages of the base model family; editable via config.
SUPPORTED_LANGUAGES = (
    "zh", "en", "fr", "es", "pt", "de", "it", "ru", "ja", "ko", "vi", "th", "ar", "id", "tr",
    "nl", "pl", "sv", "cs", "he", "hi", "bn", "fa", "uk", "el", "ro", "hu", "da", "fi",
)

MIN_DETECT_CHARS = 40
UNDETERMINED = "und"


class SourceUnreadable(OSError):
    pass


class EmptyCorpus(ValueError):
    pass


def doc_id_for(html: str) -> str:
    return hashlib.sha256(html.encode("utf-8", "surrogatepass")).hexdigest()[:16]


def estimate_tokens(text: str) -> int:
    """Default token estimator: ceil(utf8 bytes / 4)."""
    return (len(text.encode("utf-8", "surrogatepass")) + 3) // 4


@dataclass(frozen=True)
class CorpusDoc:
    doc_id: str
    html: str
    url: str | None = None
    lang: str = UNDETERMINED
    token_count: int = 0

    @classmethod
    def from_html(cls, html: str, url: str | None = None, *, lang: str | None = None,
                  estimator: Callable[[str], int] = estimate_tokens) -> "CorpusDoc":
        if lang is None:
            lang = detect_language(html)[0]
        return cls(doc_id_for(html), html, url, lang, estimator(html))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusDoc":
        html = d["html"]
        return cls(
            d.get("doc_id") or doc_id_for(html),
            html,
            d.get("url"),
            d.get("lang", UNDETERMINED),
            int(d["token_count"]) if "token_count" in d else estimate_tokens(html),
        )


# ---------------------------------------------------------------------------
# language detection

_PROFILE_SIZE = 4000
_MAX_SCORED = 2000


def _normalize_for_ngrams(text: str) -> str:
    text = unicodedata.normalize("NFC", text).lower()
    # letters and marks only; digits and punctuation carry no language signal
    cleaned = "".join(ch if ch.isalpha() or unicodedata.category(ch).startswith("M") else " " for ch in text)
    return " ".join(cleaned.split())


def _trigrams(text: str) -> Iterator[str]:
    padded = f" {text} "
    for i in range(len(padded) - 2):
        yield padded[i:i + 3]


class LanguageDetector:
    """Naive-Bayes scorer over character trigram profiles, add-one smoothed."""

    def __init__(self, seeds: dict[str, str]):
        if not seeds:
            raise ValueError("no language profiles")
        self.profiles: dict[str, dict[str, float]] = {}
        self.floor: dict[str, float] = {}
        vocab: set[str] = set()
        counts = {}
        for lang, text in seeds.items():
            c = Counter(_trigrams(_normalize_for_ngrams(text)))
            counts[lang] = dict(c.most_common(_PROFILE_SIZE))
            vocab.update(counts[lang])
        v = len(vocab) + 1
        for lang, c in counts.items():
            total = sum(c.values()) + v
            self.profiles[lang] = {g: math.log((n + 1) / total) for g, n in c.items()}
            self.floor[lang] = math.log(1 / total)

    @property
    def languages(self) -> list[str]:
        return sorted(self.profiles)

    def scores(self, text: str) -> dict[str, float]:
        grams = Counter()
        for i, g in enumerate(_trigrams(_normalize_for_ngrams(text))):
            if i >= _MAX_SCORED:
                break
            grams[g] += 1
        return {
            lang: sum(n * prof.get(g, self.floor[lang]) for g, n in grams.items())
            for lang, prof in self.profiles.items()
        }

    def classify_text(self, text: str) -> str:
        if len(text) < MIN_DETECT_CHARS:
            return UNDETERMINED
        scores = self.scores(text)
        # ties broken by code so the answer never depends on dict order
        return max(sorted(scores), key=lambda k: scores[k])


def _load_seeds() -> dict[str, str]:
    seeds = {}
    for entry in resources.files("readerkit").joinpath("langdata").iterdir():
        if entry.name.endswith(".txt"):
            seeds[entry.name[:-4]] = entry.read_text(encoding="utf-8")
    return seeds


@lru_cache(maxsize=1)
def default_detector() -> LanguageDetector:
    return LanguageDetector(_load_seeds())


def detect_language(html: str, allowed: Iterable[str] | None = None,
                    detector: LanguageDetector | None = None) -> tuple[str, bool]:
    """Language of the document's visible text and whether it is in ``allowed``.

    Texts under 40 characters are reported as "und" and never kept.
    """
    detector = detector or default_detector()
    allowed_set = set(SUPPORTED_LANGUAGES if allowed is None else allowed)
    text = inner_text(parse_html(html))
    lang = detector.classify_text(text)
    if lang == UNDETERMINED:
        return lang, False
    return lang, lang in allowed_set


# ---------------------------------------------------------------------------
# ingestion

@dataclass
class IngestStats:
    seen: int = 0
    emitted: int = 0
    duplicates: int = 0
    malformed: int = 0
    filtered: int = 0
    warnings: list[str] = field(default_factory=list)

    def warn(self, msg: str) -> None:
        self.warnings.append(msg)
        log.warning(msg)


def fetch_url(url: str, timeout: float = 30.0) -> str:
    """Single GET, no script rendering. Only used when fetching is enabled."""
    from urllib.request import Request, urlopen

    req = Request(url, headers={"User-Agent": "readerkit/0.1"})
    with urlopen(req, timeout=timeout) as resp:
        charset = resp.headers.get_content_charset()
        return decode_html(resp.read(), charset)


def _iter_raw(source: Path, stats: IngestStats, fetch: bool) -> Iterator[tuple[str, str | None]]:
    if source.is_dir():
        files = sorted(p for p in source.rglob("*") if p.is_file() and p.suffix.lower() in (".html", ".htm"))
        for path in files:
            stats.seen += 1
            try:
                data = path.read_bytes()
            except OSError as exc:
                stats.malformed += 1
                stats.warn(f"{path}: unreadable ({exc})")
                continue
            yield decode_html(data), None
        return
    try:
        fh = source.open("r", encoding="utf-8", errors="replace")
    except OSError as exc:
        raise SourceUnreadable(f"{source}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            stats.seen += 1
            try:
                row = json.loads(line)
                url = row.get("url")
                html = row.get("html")
                if html is None and url and fetch:
                    html = fetch_url(url)
                if not isinstance(html, str) or (url is not None and not isinstance(url, str)):
                    raise ValueError("row needs a string 'html' field")
            except Exception as exc:  # any bad row is skipped and counted
                stats.malformed += 1
                stats.warn(f"{source}:{lineno}: skipped ({exc})")
                continue
            yield html, url


def _annotate(item: tuple[str, str | None]) -> CorpusDoc:
    html, url = item
    return CorpusDoc.from_html(html, url)


def ingest(source: str | Path, *, allowed: Iterable[str] | None = None, stats: IngestStats | None = None,
           fetch: bool = False, jobs: int = 1) -> Iterator[CorpusDoc]:
    """Stream CorpusDocs from a directory of .html files or a JSONL file of {url, html}.

    Documents are deduplicated by doc_id. When ``allowed`` is given, documents
    whose detected language is not in it are dropped.
    """
    source = Path(source)
    if not source.exists():
        raise SourceUnreadable(f"{source}: no such file or directory")
    stats = stats if stats is not None else IngestStats()
    allowed_set = None if allowed is None else set(allowed)
    seen_ids: set[str] = set()

    raw = _iter_raw(source, stats, fetch)
    if jobs > 1:
        pool = ProcessPoolExecutor(max_workers=jobs)
        docs: Iterable[CorpusDoc] = pool.map(_annotate, raw, chunksize=8)
    else:
        pool = None
        docs = map(_annotate, raw)
    try:
        for doc in docs:
            if doc.doc_id in seen_ids:
                stats.duplicates += 1
                continue
            seen_ids.add(doc.doc_id)
            if allowed_set is not None and doc.lang not in allowed_set:
                stats.filtered += 1
                continue
            stats.emitted += 1
            yield doc
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)


def write_store(docs: Iterable[CorpusDoc], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
            n += 1
    return n


def read_store(path: str | Path) -> Iterator[CorpusDoc]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise SourceUnreadable(f"{path}: {exc}") from exc
    with fh:
        for line in fh:
            if line.strip():
                yield CorpusDoc.from_dict(json.loads(line))


# ---------------------------------------------------------------------------
# statistics

HISTOGRAM_EDGES = tuple(2 ** k for k in range(8, 21))  # 256 .. 1,048,576


@dataclass
class LengthStats:
    count: int
    mean: float
    median: float
    p95: int
    max: int
    histogram: list[dict]
    estimator: str = "utf8_bytes/4"

    def to_dict(self) -> dict:
        return asdict(self)


def _histogram(values: list[int]) -> list[dict]:
    edges = (0,) + HISTOGRAM_EDGES + (None,)
    buckets = []
    for lo, hi in zip(edges, edges[1:]):
        n = sum(1 for v in values if v >= lo and (hi is None or v < hi))
        buckets.append({"lo": lo, "hi": hi, "count": n})
    return buckets


def length_stats(corpus: Iterable[CorpusDoc | int]) -> LengthStats:
    """Token-length summary over the estimator (mean, median, nearest-rank p95, max)."""
    values = sorted(d if isinstance(d, int) else d.token_count for d in corpus)
    if not values:
        raise EmptyCorpus("no documents to summarize")
    n = len(values)
    mid = n // 2
    median = float(values[mid]) if n % 2 else (values[mid - 1] + values[mid]) / 2
    p95 = values[max(math.ceil(0.95 * n), 1) - 1]
    # int / int is correctly rounded, so the mean is within half an ulp
    return LengthStats(n, sum(values) / n, median, p95, values[-1], _histogram(values))


# ---------------------------------------------------------------------------
# curriculum

LONG_BAND = 0.9


@dataclass
class CurriculumPlan:
    max_len: int
    long_fraction: float
    long_bucket: list[str]
    short_bucket: list[str]
    seed: int = 0

    @property
    def achieved_fraction(self) -> float:
        total = len(self.long_bucket) + len(self.short_bucket)
        return len(self.long_bucket) / total if total else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["achieved_fraction"] = self.achieved_fraction
        return d


def plan_curriculum(corpus: Iterable[CorpusDoc], max_len: int, long_fraction: float = 0.4,
                    seed: int = 0) -> CurriculumPlan:
    """Split documents that fit in ``max_len`` into a long bucket (top-decile band
    (0.9*max_len, max_len]) and a short bucket, aiming at ``long_fraction`` long.

    Documents longer than ``max_len`` are left out. With too few long-eligible
    documents all of them are taken and a warning reports the achieved share.
    """
    if max_len <= 0:
        raise ValueError("max_len must be positive")
    if not 0.0 <= long_fraction <= 1.0:
        raise ValueError("long_fraction must be within [0, 1]")
    eligible, rest = [], []
    total = 0
    for doc in corpus:
        total += 1
        if doc.token_count > max_len:
            continue
        (eligible if doc.token_count > LONG_BAND * max_len else rest).append(doc.doc_id)
    if total == 0:
        raise EmptyCorpus("curriculum needs at least one document")
    # order-insensitive: the plan depends on the doc_id set, not on input order
    eligible = sorted(set(eligible))
    rest = sorted(set(rest))
    usable = len(eligible) + len(rest)
    rng = random.Random(seed)
    want = round(long_fraction * usable)
    if want > len(eligible):
        log.warning("only %d long-eligible documents for a target of %d; achieved fraction %.3f",
                    len(eligible), want, len(eligible) / usable if usable else 0.0)
        want = len(eligible)
    long_bucket = rng.sample(eligible, want)
    chosen = set(long_bucket)
    short_bucket = [d for d in eligible if d not in chosen] + rest
    rng.shuffle(short_bucket)
    return CurriculumPlan(max_len, long_fraction, long_bucket, short_bucket, seed)
