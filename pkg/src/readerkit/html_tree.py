"""Lenient tag-soup HTML parsing into a small immutable DOM.

The parser never fails: unknown tags become generic elements, unclosed
elements are closed implicitly, stray end tags are dropped and the bodies
of ``script``/``style`` are kept verbatim as raw text.
"""

from __future__ import annotations

import codecs
import enum
import re
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

__all__ = [
    "NodeKind",
    "HtmlNode",
    "Selector",
    "SelectorStep",
    "parse_html",
    "parse_selector",
    "select",
    "inner_text",
    "to_html",
    "iter_preorder",
    "VOID_ELEMENTS",
]


class NodeKind(str, enum.Enum):
    ELEMENT = "element"
    TEXT = "text"
    COMMENT = "comment"
    RAW_TEXT = "raw_text"


ROOT_TAG = "#root"

VOID_ELEMENTS = frozenset(
    "area base br col embed hr img input link meta param source track wbr".split()
)
RAW_TEXT_ELEMENTS = frozenset(("script", "style"))
# parsed like raw text, but entities are decoded and the body becomes Text
RCDATA_ELEMENTS = frozenset(("title", "textarea"))
# content is swallowed entirely
DROPPED_CONTENT_ELEMENTS = frozenset(("iframe",))

# Known HTML elements; a trailing "/>" is only honoured on tags outside this
# set (inline SVG/MathML and other XML-ish islands).
HTML_ELEMENTS = frozenset(
    """a abbr address area article aside audio b base bdi bdo blockquote body br
    button canvas caption center cite code col colgroup data datalist dd del
    details dfn dialog div dl dt em embed fieldset figcaption figure font footer
    form h1 h2 h3 h4 h5 h6 head header hgroup hr html i iframe img input ins kbd
    label legend li link main map mark menu meta meter nav noscript object ol
    optgroup option output p param picture pre progress q rp rt ruby s samp
    script section select small source span strike strong style sub summary sup
    table tbody td template textarea tfoot th thead time title tr track tt u ul
    var video wbr""".split()
)

_BLOCK_OPENERS = frozenset(
    """address article aside blockquote center details dialog div dl fieldset
    figcaption figure footer form h1 h2 h3 h4 h5 h6 header hgroup hr main menu
    nav ol p pre section table ul""".split()
)

# Opening the key tag implicitly closes any of the listed open elements, as
# long as no boundary element sits between them and the top of the stack.
_IMPLICIT_CLOSE: dict[str, frozenset[str]] = {tag: frozenset(("p",)) for tag in _BLOCK_OPENERS}
_IMPLICIT_CLOSE.update(
    {
        "li": frozenset(("li", "p")),
        "dt": frozenset(("dt", "dd", "p")),
        "dd": frozenset(("dt", "dd", "p")),
        "td": frozenset(("td", "th", "p")),
        "th": frozenset(("td", "th", "p")),
        "tr": frozenset(("tr", "td", "th", "p")),
        "thead": frozenset(("thead", "tbody", "tfoot", "tr", "td", "th", "p")),
        "tbody": frozenset(("thead", "tbody", "tfoot", "tr", "td", "th", "p")),
        "tfoot": frozenset(("thead", "tbody", "tfoot", "tr", "td", "th", "p")),
        "option": frozenset(("option",)),
        "optgroup": frozenset(("option", "optgroup")),
    }
)

_SCOPE_BOUNDARIES = frozenset(
    """#root html body div section article main aside nav header footer
    blockquote ul ol dl li dd dt table thead tbody tfoot tr td th caption select
    optgroup button object template form fieldset figure details""".split()
)

# Elements nested deeper than this are flattened into their parent so the
# recursive consumers downstream stay far from the interpreter stack limit.
MAX_DEPTH = 256


class HtmlNode(NamedTuple):
    """One node of the simplified DOM.

    Element nodes carry ``tag``, ``attrs`` and ``children``; text, comment
    and raw-text nodes carry only ``text``. Nodes are tuples, so trees are
    immutable and compare structurally.
    """

    kind: NodeKind
    tag: str = ""
    attrs: tuple[tuple[str, str], ...] = ()
    children: tuple[HtmlNode, ...] = ()
    text: str = ""

    @property
    def is_element(self) -> bool:
        return self.kind is NodeKind.ELEMENT

    def get(self, name: str, default: str | None = None) -> str | None:
        for key, value in self.attrs:
            if key == name:
                return value
        return default

    @property
    def classes(self) -> list[str]:
        value = self.get("class")
        return value.split() if value else []

    def with_children(self, children) -> HtmlNode:
        return HtmlNode(self.kind, self.tag, self.attrs, tuple(children), self.text)

    def __repr__(self) -> str:
        if self.kind is NodeKind.ELEMENT:
            return f"<HtmlNode {self.tag} attrs={len(self.attrs)} children={len(self.children)}>"
        return f"<HtmlNode {self.kind.value} {self.text[:30]!r}>"


def element(tag: str, attrs=(), children=()) -> HtmlNode:
    return HtmlNode(NodeKind.ELEMENT, tag, tuple(attrs), tuple(children))


def text_node(text: str) -> HtmlNode:
    return HtmlNode(NodeKind.TEXT, text=text)


# ---------------------------------------------------------------------------
# decoding

_META_CHARSET_RE = re.compile(rb"""<meta[^>]*?charset\s*=\s*["']?\s*([A-Za-z0-9_.:\-]+)""", re.I)


def _lookup_codec(name: str | None) -> str | None:
    if not name:
        return None
    try:
        return codecs.lookup(name).name
    except LookupError:
        return None


def sniff_encoding(data: bytes, encoding_hint: str | None = None) -> str:
    """BOM, then caller hint, then ``<meta charset>`` in the first 1024 bytes, then UTF-8."""
    if data.startswith(codecs.BOM_UTF8):
        return "utf-8-sig"
    if data.startswith(codecs.BOM_UTF16_LE) or data.startswith(codecs.BOM_UTF16_BE):
        return "utf-16"
    hinted = _lookup_codec(encoding_hint)
    if hinted:
        return hinted
    m = _META_CHARSET_RE.search(data[:1024])
    if m:
        declared = _lookup_codec(m.group(1).decode("ascii", "replace"))
        # a UTF-16 declaration in an ASCII-compatible byte stream is a lie
        if declared and not declared.startswith("utf-16"):
            return declared
    return "utf-8"


def decode_html(data: bytes | str, encoding_hint: str | None = None) -> str:
    if isinstance(data, str):
        return data
    return bytes(data).decode(sniff_encoding(data, encoding_hint), errors="replace")


# ---------------------------------------------------------------------------
# entities

_NAMED_ENTITIES = {"amp": "&", "lt": "<", "gt": ">", "quot": '"', "apos": "'", "nbsp": "\xa0"}
_ENTITY_RE = re.compile(r"&(?:#([0-9]{1,8});?|#[xX]([0-9a-fA-F]{1,7});?|(amp|lt|gt|quot|apos|nbsp);)")


def _entity_sub(m: re.Match) -> str:
    dec, hexa, name = m.groups()
    if name:
        return _NAMED_ENTITIES[name]
    code = int(dec) if dec else int(hexa, 16)
    if code == 0 or code > 0x10FFFF or 0xD800 <= code <= 0xDFFF:
        return "�"
    return chr(code)


def decode_entities(text: str) -> str:
    if "&" not in text:
        return text
    return _ENTITY_RE.sub(_entity_sub, text)


# ---------------------------------------------------------------------------
# tokenizer + tree builder

_START_TAG_LOOSE_RE = re.compile(r"<([A-Za-z][A-Za-z0-9_:.\-]*)([^>]*?)(/?)>")
_BOGUS_RE = re.compile(r"<(?:![^>]*|\?[^>]*|/[^A-Za-z>][^>]*|/)>")
_ATTR_RE = re.compile(
    r"""([A-Za-z_:@][A-Za-z0-9_:.@\-]*)(?:\s*=\s*(?:"([^"]*)"|'([^']*)'|([^\s>]+)))?"""
)
_ASCII_LOWER = str.maketrans("ABCDEFGHIJKLMNOPQRSTUVWXYZ", "abcdefghijklmnopqrstuvwxyz")


def _parse_attrs(raw: str) -> tuple[tuple[str, str], ...]:
    if not raw or raw.isspace():
        return ()
    seen = set()
    attrs = []
    for m in _ATTR_RE.finditer(raw):
        name = m.group(1).translate(_ASCII_LOWER)
        if name in seen:
            continue
        seen.add(name)
        value = m.group(2)
        if value is None:
            value = m.group(3)
            if value is None:
                value = m.group(4) or ""
        attrs.append((name, decode_entities(value)))
    return tuple(attrs)


_TOKEN_RE = re.compile(
    r"""<(?:([A-Za-z][A-Za-z0-9_:.\-]*)((?:[^>"']|"[^"]*"|'[^']*')*?)(/?)>"""
    r"""|/([A-Za-z][A-Za-z0-9_:.\-]*)[^>]*>)"""
)
_RAW_END_CACHE: dict[str, re.Pattern] = {}


def _raw_end(s: str, tag: str, pos: int) -> tuple[int, int]:
    """Locate ``</tag`` closing a raw-text body; returns (body_end, resume_pos)."""
    pattern = _RAW_END_CACHE.get(tag)
    if pattern is None:
        pattern = _RAW_END_CACHE[tag] = re.compile(r"</" + re.escape(tag) + r"(?=[\s/>]|\Z)[^>]*>?", re.I)
    m = pattern.search(s, pos)
    if m is None:
        return len(s), len(s)
    return m.start(), m.end()


_new = tuple.__new__  # skips the NamedTuple constructor frame on hot paths


def _close_to(stack: list, depth: int) -> list:
    """Pop frames until ``len(stack) == depth``; returns the new top's children."""
    while len(stack) > depth:
        tag, attrs, children = stack.pop()
        stack[-1][2].append(_new(HtmlNode, (ELEMENT, tag, attrs, tuple(children), "")))
    return stack[-1][2]


ELEMENT = NodeKind.ELEMENT
TEXT = NodeKind.TEXT
COMMENT = NodeKind.COMMENT
RAW_TEXT = NodeKind.RAW_TEXT


def parse_html(data: bytes | str, encoding_hint: str | None = None) -> HtmlNode:
    """Parse arbitrary bytes (or text) into a tree under a synthetic root."""
    s = decode_html(data, encoding_hint)
    stack: list[list] = [[ROOT_TAG, (), []]]
    children = stack[0][2]
    text = ""  # pending character data, already entity-decoded
    find = s.find
    token_match = _TOKEN_RE.match
    implicit = _IMPLICIT_CLOSE
    boundaries = _SCOPE_BOUNDARIES
    n = len(s)
    pos = 0
    while pos < n:
        lt = find("<", pos)
        if lt < 0:
            chunk = s[pos:]
            text += decode_entities(chunk) if "&" in chunk else chunk
            break
        if lt > pos:
            chunk = s[pos:lt]
            text += decode_entities(chunk) if "&" in chunk else chunk
        m = token_match(s, lt)
        if m is None:
            m = _START_TAG_LOOSE_RE.match(s, lt)
        if m is not None:
            tag = m.group(1)
            if tag is None:
                # end tag
                tag = m.group(4).translate(_ASCII_LOWER)
                pos = m.end()
                for i in range(len(stack) - 1, 0, -1):
                    if stack[i][0] == tag:
                        if text:
                            children.append(_new(HtmlNode, (TEXT, "", (), (), text)))
                            text = ""
                        children = _close_to(stack, i)
                        break
                continue
            # start tag
            tag = tag.translate(_ASCII_LOWER)
            raw_attrs = m.group(2)
            self_closing = bool(m.group(3))
            if self_closing and tag in HTML_ELEMENTS:
                # "/>" is meaningless here; the slash may end an unquoted value
                raw_attrs += "/"
                self_closing = False
            attrs = _parse_attrs(raw_attrs) if raw_attrs else ()
            pos = m.end()
            if text:
                children.append(_new(HtmlNode, (TEXT, "", (), (), text)))
                text = ""
            closers = implicit.get(tag)
            if closers is not None:
                target = 0
                for i in range(len(stack) - 1, 0, -1):
                    name = stack[i][0]
                    if name in closers:
                        target = i
                    elif name in boundaries:
                        break
                if target:
                    children = _close_to(stack, target)
            if tag in VOID_ELEMENTS or (self_closing and tag not in HTML_ELEMENTS):
                children.append(_new(HtmlNode, (ELEMENT, tag, attrs, (), "")))
                continue
            if tag in RAW_TEXT_ELEMENTS:
                body_end, pos = _raw_end(s, tag, pos)
                body = s[m.end() : body_end]
                children.append(HtmlNode(ELEMENT, tag, attrs, (_new(HtmlNode, (RAW_TEXT, "", (), (), body)),) if body else ()))
            elif tag in RCDATA_ELEMENTS:
                body_end, pos = _raw_end(s, tag, pos)
                body = decode_entities(s[m.end() : body_end])
                children.append(HtmlNode(ELEMENT, tag, attrs, (_new(HtmlNode, (TEXT, "", (), (), body)),) if body else ()))
            elif tag in DROPPED_CONTENT_ELEMENTS:
                _, pos = _raw_end(s, tag, pos)
                children.append(_new(HtmlNode, (ELEMENT, tag, attrs, (), "")))
            elif len(stack) <= MAX_DEPTH:
                children = []
                stack.append([tag, attrs, children])
            continue
        # not a regular tag
        nxt = s[lt + 1 : lt + 2]
        if nxt == "!" and s.startswith("<!--", lt):
            close = find("-->", lt + 4)
            if close < 0:
                body = s[lt + 4 :].rstrip("-")
                pos = n
            else:
                body = s[lt + 4 : close]
                pos = close + 3
            if text:
                children.append(_new(HtmlNode, (TEXT, "", (), (), text)))
                text = ""
            children.append(_new(HtmlNode, (COMMENT, "", (), (), body)))
        elif nxt == "!" or nxt == "?" or nxt == "/":
            m = _BOGUS_RE.match(s, lt)
            if m is not None:
                pos = m.end()
            elif nxt != "/" or find(">", lt) < 0:
                # unterminated declaration or end tag at EOF: dropped
                break
            else:
                text += "<"
                pos = lt + 1
        elif nxt.isalpha() and nxt.isascii():
            # EOF inside a start tag: the fragment is dropped
            break
        else:
            text += "<"
            pos = lt + 1
    if text:
        children.append(_new(HtmlNode, (TEXT, "", (), (), text)))
    _close_to(stack, 1)
    return HtmlNode(ELEMENT, ROOT_TAG, (), tuple(stack[0][2]))


# ---------------------------------------------------------------------------
# traversal helpers

def iter_preorder(node: HtmlNode) -> Iterator[HtmlNode]:
    stack = [node]
    pop, extend = stack.pop, stack.extend
    while stack:
        cur = pop()
        yield cur
        if cur.children:
            extend(reversed(cur.children))


_WS_RE = re.compile(r"[ \t\n\r\f\v]+")


def collapse_ws(text: str) -> str:
    return _WS_RE.sub(" ", text).strip(" ")


def raw_text_content(node: HtmlNode) -> str:
    """Concatenated descendant Text without any whitespace processing."""
    if node.kind is NodeKind.TEXT:
        return node.text
    return "".join(n.text for n in iter_preorder(node) if n.kind is NodeKind.TEXT)


def inner_text(node: HtmlNode) -> str:
    """Visible text of ``node``: Text descendants joined, whitespace collapsed."""
    return collapse_ws(raw_text_content(node))


# ---------------------------------------------------------------------------
# serialization

def _escape_text(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _escape_attr(value: str) -> str:
    return value.replace("&", "&amp;").replace('"', "&quot;")


def to_html(node: HtmlNode) -> str:
    """Normalized HTML; re-parsing the output reproduces the same tree."""
    out: list[str] = []
    _write(node, out)
    return "".join(out)


def _write(node: HtmlNode, out: list[str]) -> None:
    kind = node.kind
    if kind is NodeKind.TEXT:
        out.append(_escape_text(node.text))
        return
    if kind is NodeKind.COMMENT:
        out.append(f"<!--{node.text}-->")
        return
    if kind is NodeKind.RAW_TEXT:
        out.append(node.text)
        return
    if node.tag == ROOT_TAG:
        for child in node.children:
            _write(child, out)
        return
    out.append("<" + node.tag)
    for name, value in node.attrs:
        out.append(f' {name}="{_escape_attr(value)}"')
    if node.tag in VOID_ELEMENTS:
        out.append(">")
        return
    if not node.children and node.tag not in HTML_ELEMENTS:
        out.append("/>")
        return
    out.append(">")
    for child in node.children:
        _write(child, out)
    out.append(f"</{node.tag}>")


# ---------------------------------------------------------------------------
# selectors

@dataclass(frozen=True)
class SelectorStep:
    tag: str | None = None
    id: str | None = None
    classes: frozenset[str] = frozenset()
    attrs: tuple[tuple[str, str | None], ...] = ()

    def __post_init__(self) -> None:
        if not (self.tag or self.id or self.classes or self.attrs):
            raise ValueError("selector step needs at least one filter")

    def matches(self, node: HtmlNode) -> bool:
        if node.kind is not NodeKind.ELEMENT or node.tag == ROOT_TAG:
            return False
        if self.tag is not None and self.tag != "*" and node.tag != self.tag:
            return False
        if self.id is not None and node.get("id") != self.id:
            return False
        if self.classes and not self.classes.issubset(node.classes):
            return False
        for name, expected in self.attrs:
            value = node.get(name)
            if value is None or (expected is not None and value != expected):
                return False
        return True

    def __str__(self) -> str:
        parts = [self.tag or ""]
        if self.id:
            parts.append("#" + self.id)
        parts.extend("." + c for c in sorted(self.classes))
        for name, value in self.attrs:
            parts.append(f"[{name}]" if value is None else f'[{name}="{value}"]')
        return "".join(parts)


@dataclass(frozen=True)
class Selector:
    """Descendant-only selector, e.g. ``div.post p`` or ``a[rel="next"]``."""

    steps: tuple[SelectorStep, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError("selector needs at least one step")

    @classmethod
    def parse(cls, text: str) -> Selector:
        return parse_selector(text)

    def __str__(self) -> str:
        return " ".join(str(s) for s in self.steps)


_STEP_TOKEN_RE = re.compile(
    r"""\#(?P<id>[^\s.#\[]+)|\.(?P<cls>[^\s.#\[]+)|\[\s*(?P<attr>[^\s=\]]+)\s*(?:=\s*(?:"(?P<dq>[^"]*)"|'(?P<sq>[^']*)'|(?P<uq>[^\]\s]*)))?\s*\]"""
)
_STEP_TAG_RE = re.compile(r"\*|[A-Za-z][A-Za-z0-9_:\-]*")


def _split_steps(text: str) -> list[str]:
    steps, buf, quote, depth = [], [], None, 0
    for ch in text:
        if quote:
            buf.append(ch)
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
            buf.append(ch)
        elif ch == "[":
            depth += 1
            buf.append(ch)
        elif ch == "]":
            depth -= 1
            buf.append(ch)
        elif ch.isspace() and depth == 0:
            if buf:
                steps.append("".join(buf))
                buf = []
        else:
            buf.append(ch)
    if buf:
        steps.append("".join(buf))
    return steps


def parse_selector(text: str) -> Selector:
    steps = []
    for raw in _split_steps(text.strip()):
        if raw == ">" or raw.startswith((">", "+", "~")):
            raise ValueError(f"only the descendant combinator is supported: {text!r}")
        tag = None
        pos = 0
        m = _STEP_TAG_RE.match(raw)
        if m:
            tag = m.group(0).translate(_ASCII_LOWER)
            pos = m.end()
        ident, classes, attrs = None, set(), []
        while pos < len(raw):
            m = _STEP_TOKEN_RE.match(raw, pos)
            if m is None:
                raise ValueError(f"cannot parse selector step {raw!r}")
            if m.group("id"):
                ident = m.group("id")
            elif m.group("cls"):
                classes.add(m.group("cls"))
            else:
                value = next((v for v in (m.group("dq"), m.group("sq"), m.group("uq")) if v is not None), None)
                attrs.append((m.group("attr").translate(_ASCII_LOWER), value))
            pos = m.end()
        steps.append(SelectorStep(tag, ident, frozenset(classes), tuple(attrs)))
    return Selector(tuple(steps))


def _as_selector(sel: Selector | str) -> Selector:
    return parse_selector(sel) if isinstance(sel, str) else sel


def _ancestors_match(steps: tuple[SelectorStep, ...], ancestors: list[HtmlNode]) -> bool:
    # greedy nearest-ancestor matching is exact for descendant-only chains
    i = len(steps) - 1
    for anc in reversed(ancestors):
        if i < 0:
            break
        if steps[i].matches(anc):
            i -= 1
    return i < 0


def select(root: HtmlNode, sel: Selector | str) -> list[HtmlNode]:
    """All elements under ``root`` matching ``sel``, in document order."""
    sel = _as_selector(sel)
    last, prefix = sel.steps[-1], sel.steps[:-1]
    found: list[HtmlNode] = []
    ancestors: list[HtmlNode] = []

    def visit(node: HtmlNode) -> None:
        if last.matches(node) and _ancestors_match(prefix, ancestors):
            found.append(node)
        if node.children:
            ancestors.append(node)
            for child in node.children:
                if child.kind is NodeKind.ELEMENT:
                    visit(child)
            ancestors.pop()

    visit(root)
    return found
