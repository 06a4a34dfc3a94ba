"""Per-stage records and dataset rows of the synthesis pipeline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

TASKS = ("markdown", "json")


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class DraftRecord:
    doc_id: str
    instruction: str
    task: str
    draft_output: str
    backend_name: str
    timestamp: str
    retries: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DraftRecord:
        return _from_dict(cls, d)


@dataclass(frozen=True)
class RefineRecord:
    doc_id: str
    refined_output: str
    changed: bool
    retries: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RefineRecord:
        return _from_dict(cls, d)


@dataclass(frozen=True)
class CritiqueRecord:
    doc_id: str
    verdict: bool
    explanation: str
    retries: int = 0

    def __post_init__(self) -> None:
        if not self.explanation:
            raise ValueError("critique explanation must not be empty")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CritiqueRecord:
        return _from_dict(cls, d)


@dataclass(frozen=True)
class Provenance:
    pipeline_round: int
    backend_name: str
    created_at: str


@dataclass(frozen=True)
class SftExample:
    doc_id: str
    instruction: str
    html: str
    target_output: str
    task: str

    def row(self, prov: Provenance) -> dict:
        return {**asdict(self), **asdict(prov)}


@dataclass(frozen=True)
class CritiqueExample:
    doc_id: str
    instruction: str
    html: str
    refined_output: str
    verdict: bool
    explanation: str

    def row(self, prov: Provenance) -> dict:
        return {
            "doc_id": self.doc_id,
            "input": {"instruction": self.instruction, "html": self.html, "output": self.refined_output},
            "output": {"verdict": self.verdict, "explanation": self.explanation},
            **asdict(prov),
        }


@dataclass(frozen=True)
class DpoTriplet:
    doc_id: str
    instruction: str
    html: str
    chosen: str
    rejected: str

    def __post_init__(self) -> None:
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected outputs must differ")

    def row(self, prov: Provenance) -> dict:
        return {**asdict(self), **asdict(prov)}
