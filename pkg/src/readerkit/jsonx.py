"""Schema-guided JSON extraction, validation and node-set comparison."""

from __future__ import annotations

import json
import math
import re
import unicodedata
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Mapping

from .html_tree import HtmlNode, Selector, inner_text, parse_selector, select

__all__ = [
    "JsonSchemaSpec",
    "SchemaError",
    "FieldRule",
    "ExtractionTemplate",
    "ExtractionError",
    "RequiredFieldMissing",
    "CoercionFailure",
    "Violation",
    "ValidationReport",
    "JsonNodeSet",
    "EMPTY_OBJECT",
    "EMPTY_ARRAY",
    "extract_json",
    "validate",
    "to_node_set",
    "canonicalize",
    "canonical_equal",
    "loads_strict",
    "format_path",
]

SCALAR_TYPES = ("string", "number", "integer", "boolean")
ALL_TYPES = ("object", "array") + SCALAR_TYPES


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class JsonSchemaSpec:
    """Restricted schema node: a type plus properties/required/items/enum."""

    type: str
    properties: Mapping[str, JsonSchemaSpec] = field(default_factory=dict)
    required: frozenset[str] = frozenset()
    items: JsonSchemaSpec | None = None
    enum: tuple | None = None

    def __post_init__(self) -> None:
        if self.type not in ALL_TYPES:
            raise SchemaError(f"unsupported type {self.type!r}")
        object.__setattr__(self, "required", frozenset(self.required))
        missing = self.required - set(self.properties)
        if missing:
            raise SchemaError(f"required names without properties: {sorted(missing)}")
        if (self.items is not None) != (self.type == "array"):
            raise SchemaError("items must be present exactly when type is array")
        if self.type != "object" and (self.properties or self.required):
            raise SchemaError("properties/required only apply to objects")
        if self.enum is not None:
            object.__setattr__(self, "enum", tuple(self.enum))
            for value in self.enum:
                if not _type_ok(value, self.type):
                    raise SchemaError(f"enum value {value!r} is not of type {self.type}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> JsonSchemaSpec:
        if not data:
            # the empty schema is an object without constraints
            return cls("object")
        kind = data.get("type", "object" if "properties" in data else None)
        if kind is None:
            raise SchemaError("schema node without a type")
        props = {name: cls.from_dict(sub) for name, sub in (data.get("properties") or {}).items()}
        items = cls.from_dict(data["items"]) if "items" in data else None
        return cls(kind, props, frozenset(data.get("required", ())), items, data.get("enum"))

    @classmethod
    def load(cls, path) -> JsonSchemaSpec:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"type": self.type}
        if self.properties:
            out["properties"] = {k: v.to_dict() for k, v in self.properties.items()}
        if self.required:
            out["required"] = sorted(self.required)
        if self.items is not None:
            out["items"] = self.items.to_dict()
        if self.enum is not None:
            out["enum"] = list(self.enum)
        return out

    def at(self, path: Iterable[str]) -> JsonSchemaSpec | None:
        node: JsonSchemaSpec | None = self
        for key in path:
            if node is None or node.type != "object":
                return None
            node = node.properties.get(key)
        return node


def _type_ok(value: Any, kind: str) -> bool:
    if kind == "string":
        return isinstance(value, str)
    if kind == "boolean":
        return isinstance(value, bool)
    if kind == "integer":
        if isinstance(value, bool):
            return False
        return isinstance(value, int) or (isinstance(value, float) and value.is_integer())
    if kind == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    if kind == "object":
        return isinstance(value, dict)
    if kind == "array":
        return isinstance(value, list)
    return False


# ---------------------------------------------------------------------------
# paths

def escape_key(key: str) -> str:
    return key.replace("~", "~0").replace("/", "~1")


def format_path(parts: Iterable[str | int]) -> str:
    return "/".join(str(p) if isinstance(p, int) else escape_key(p) for p in parts)


# ---------------------------------------------------------------------------
# validation

@dataclass(frozen=True)
class Violation:
    path: str
    kind: str
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[Violation, ...] = ()


def validate(value: Any, schema: JsonSchemaSpec) -> ValidationReport:
    """Check ``value`` against ``schema``, collecting every violation."""
    found: list[Violation] = []
    _validate(value, schema, [], found)
    return ValidationReport(not found, tuple(found))


def _validate(value: Any, schema: JsonSchemaSpec, path: list, out: list[Violation]) -> None:
    if not _type_ok(value, schema.type):
        out.append(Violation(format_path(path), "type-mismatch", f"expected {schema.type}"))
        return
    if schema.enum is not None and not any(canonical_equal(value, e) for e in schema.enum):
        out.append(Violation(format_path(path), "enum-mismatch", repr(value)))
    if schema.type == "object":
        for name in sorted(schema.required):
            if name not in value:
                out.append(Violation(format_path(path + [name]), "missing-required"))
        for name, sub in schema.properties.items():
            if name in value:
                _validate(value[name], sub, path + [name], out)
    elif schema.type == "array":
        for i, item in enumerate(value):
            _validate(item, schema.items, path + [i], out)


# ---------------------------------------------------------------------------
# canonical scalars and node sets

class _Sentinel:
    __slots__ = ("label",)

    def __init__(self, label: str) -> None:
        self.label = label

    def __repr__(self) -> str:
        return self.label

    def __reduce__(self):
        return (_sentinel, (self.label,))


def _sentinel(label: str) -> _Sentinel:
    return EMPTY_OBJECT if label == "{}" else EMPTY_ARRAY


EMPTY_OBJECT = _Sentinel("{}")
EMPTY_ARRAY = _Sentinel("[]")

REL_TOL = 1e-9


def canonicalize(scalar: Any) -> Any:
    """Strings NFC-normalized and trimmed; other scalars pass through."""
    if isinstance(scalar, str):
        return unicodedata.normalize("NFC", scalar).strip()
    return scalar


def canonical_equal(a: Any, b: Any) -> bool:
    """Equality of canonical scalars; numbers compare as reals."""
    if isinstance(a, bool) or isinstance(b, bool):
        return type(a) is type(b) and a == b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        if isinstance(a, int) and isinstance(b, int):
            return a == b
        try:
            return math.isclose(a, b, rel_tol=REL_TOL, abs_tol=0.0)
        except OverflowError:
            fa, fb = Fraction(a), Fraction(b)
            return abs(fa - fb) <= Fraction(REL_TOL) * max(abs(fa), abs(fb))
    if isinstance(a, str) and isinstance(b, str):
        return canonicalize(a) == canonicalize(b)
    if a is None or b is None:
        return a is None and b is None
    return a is b


class JsonNodeSet:
    """Leaf ``path -> canonical value`` pairs of a JSON value.

    Paths are unique, so set intersection reduces to comparing the values
    stored under shared paths.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes: Mapping[str, Any]) -> None:
        self.nodes = dict(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes.items())

    def __contains__(self, item) -> bool:
        path, value = item
        return path in self.nodes and canonical_equal(self.nodes[path], canonicalize(value))

    def intersection_size(self, other: JsonNodeSet) -> int:
        small, big = (self, other) if len(self) <= len(other) else (other, self)
        count = 0
        for path, value in small.nodes.items():
            if path in big.nodes and canonical_equal(value, big.nodes[path]):
                count += 1
        return count

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, JsonNodeSet):
            return NotImplemented
        return len(self) == len(other) and self.intersection_size(other) == len(self)

    def __repr__(self) -> str:
        return f"JsonNodeSet({self.nodes!r})"


def to_node_set(value: Any) -> JsonNodeSet:
    """One entry per leaf; empty containers get sentinel leaves."""
    nodes: dict[str, Any] = {}
    stack: list[tuple[tuple, Any]] = [((), value)]
    while stack:
        parts, cur = stack.pop()
        if isinstance(cur, dict):
            if not cur:
                nodes[format_path(parts)] = EMPTY_OBJECT
            for key, sub in cur.items():
                stack.append((parts + (key,), sub))
        elif isinstance(cur, list):
            if not cur:
                nodes[format_path(parts)] = EMPTY_ARRAY
            for i, sub in enumerate(cur):
                stack.append((parts + (i,), sub))
        else:
            nodes[format_path(parts)] = canonicalize(cur)
    return JsonNodeSet(nodes)


def _reject_constant(name: str):
    raise ValueError(f"non-standard JSON constant {name}")


def _last_key_wins(pairs):
    return dict(pairs)


def loads_strict(text: str) -> Any:
    """Parse standard JSON only (no NaN/Infinity); duplicate keys: last wins."""
    return json.loads(text, parse_constant=_reject_constant, object_pairs_hook=_last_key_wins)


# ---------------------------------------------------------------------------
# extraction

class ExtractionError(ValueError):
    pass


class RequiredFieldMissing(ExtractionError):
    def __init__(self, path: str) -> None:
        super().__init__(f"required field missing: {path or '<root>'}")
        self.path = path


class CoercionFailure(ExtractionError):
    def __init__(self, path: str, raw: str) -> None:
        super().__init__(f"cannot coerce {raw!r} at {path}")
        self.path = path
        self.raw = raw


_NUMBER_RE = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")
_INTEGER_RE = re.compile(r"[+-]?\d+")
_TRUE = frozenset(("true", "yes", "1", "on"))
_FALSE = frozenset(("false", "no", "0", "off"))


def coerce(raw: str, kind: str, path: str) -> Any:
    text = raw.strip()
    if kind == "string":
        return canonicalize(raw)
    if kind == "number":
        if not _NUMBER_RE.fullmatch(text):
            raise CoercionFailure(path, raw)
        value = float(text)
        if not math.isfinite(value):
            raise CoercionFailure(path, raw)
        return value
    if kind == "integer":
        if not _INTEGER_RE.fullmatch(text):
            raise CoercionFailure(path, raw)
        return int(text)
    if kind == "boolean":
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise CoercionFailure(path, raw)
    raise CoercionFailure(path, raw)


@dataclass(frozen=True)
class FieldRule:
    """Where one output field comes from.

    ``capture`` is ``"text"``, ``"list"`` or ``"attr:<name>"``; ``coerce``
    names the scalar type the captured text is converted to.
    """

    path: tuple[str, ...]
    selector: Selector
    capture: str = "text"
    coerce: str = "string"

    def __post_init__(self) -> None:
        if isinstance(self.selector, str):
            object.__setattr__(self, "selector", parse_selector(self.selector))
        if isinstance(self.path, str):
            object.__setattr__(self, "path", tuple(p.replace("~1", "/").replace("~0", "~") for p in self.path.split("/")))
        else:
            object.__setattr__(self, "path", tuple(self.path))
        if not self.path:
            raise ValueError("field path must not be empty")
        if self.capture not in ("text", "list") and not self.capture.startswith("attr:"):
            raise ValueError(f"unknown capture {self.capture!r}")
        if self.coerce not in SCALAR_TYPES:
            raise ValueError(f"unknown coercion {self.coerce!r}")

    @property
    def attribute(self) -> str | None:
        return self.capture[5:] if self.capture.startswith("attr:") else None


@dataclass(frozen=True)
class ExtractionTemplate:
    rules: tuple[FieldRule, ...]

    @classmethod
    def from_list(cls, rows: Iterable[Mapping[str, Any]]) -> ExtractionTemplate:
        rules = []
        for row in rows:
            capture = row.get("capture", "text")
            if isinstance(capture, Mapping):
                capture = "attr:" + capture["attribute"]
            rules.append(FieldRule(row["path"], row["selector"], capture, row.get("coerce", "string")))
        return cls(tuple(rules))

    @classmethod
    def load(cls, path) -> ExtractionTemplate:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls.from_list(data["fields"] if isinstance(data, dict) else data)

    def check(self, schema: JsonSchemaSpec) -> None:
        """Raise SchemaError unless every rule fits the schema."""
        for rule in self.rules:
            target = schema.at(rule.path)
            where = format_path(rule.path)
            if target is None:
                raise SchemaError(f"template path {where} is not in the schema")
            if rule.capture == "list":
                if target.type != "array" or target.items.type not in SCALAR_TYPES:
                    raise SchemaError(f"list capture at {where} needs an array of scalars")
                kind = target.items.type
            else:
                kind = target.type
            if kind != rule.coerce and not (kind == "number" and rule.coerce == "integer"):
                raise SchemaError(f"coercion {rule.coerce} does not fit {kind} at {where}")


def extract_json(root: HtmlNode, schema: JsonSchemaSpec, template: ExtractionTemplate) -> dict:
    """Fill ``schema`` from the page using ``template``'s selector rules."""
    template.check(schema)
    if schema.type != "object":
        raise SchemaError("extraction targets an object schema")
    out: dict = {}
    for rule in template.rules:
        where = format_path(rule.path)
        nodes = select(root, rule.selector)
        if rule.capture == "list":
            if not nodes:
                continue
            value: Any = [coerce(inner_text(n), rule.coerce, f"{where}/{i}") for i, n in enumerate(nodes)]
        else:
            raw = None
            attr = rule.attribute
            for node in nodes:
                raw = node.get(attr) if attr else inner_text(node)
                if raw is not None:
                    break
            if raw is None:
                continue
            value = coerce(raw, rule.coerce, where)
        target = schema.at(rule.path)
        enum = target.items.enum if rule.capture == "list" else target.enum
        if enum is not None:
            for v in value if rule.capture == "list" else [value]:
                if not any(canonical_equal(v, e) for e in enum):
                    raise CoercionFailure(where, str(v))
        cursor = out
        for key in rule.path[:-1]:
            cursor = cursor.setdefault(key, {})
        cursor[rule.path[-1]] = value
    _check_required(out, schema, [])
    report = validate(out, schema)
    if not report.ok:
        first = report.violations[0]
        raise CoercionFailure(first.path, first.detail)
    return out


def _check_required(value: dict, schema: JsonSchemaSpec, path: list) -> None:
    for name in sorted(schema.required):
        if name not in value:
            raise RequiredFieldMissing(format_path(path + [name]))
    for name, sub in schema.properties.items():
        if sub.type == "object" and name in value:
            _check_required(value[name], sub, path + [name])
