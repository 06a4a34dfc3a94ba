"""HTML tree to GitHub-flavored Markdown.

``convert`` strips boilerplate, narrows the tree to the requested scope and
renders what is left. Rendering is a pure function of the tree.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

from .html_tree import (
    ROOT_TAG,
    HtmlNode,
    NodeKind,
    Selector,
    collapse_ws,
    iter_preorder,
    parse_selector,
    select,
)

__all__ = [
    "ExtractionMode",
    "ExtractionInstruction",
    "MarkdownDoc",
    "ScopeEmpty",
    "convert",
    "convert_html",
    "score_main_content",
    "strip_boilerplate",
    "render_markdown",
]

ELEMENT = NodeKind.ELEMENT
TEXT = NodeKind.TEXT


class ScopeEmpty(ValueError):
    """A scoped instruction matched nothing on the page."""


class ExtractionMode(str, enum.Enum):
    MAIN_CONTENT = "main"
    SCOPED = "scoped"


@dataclass(frozen=True)
class ExtractionInstruction:
    mode: ExtractionMode = ExtractionMode.MAIN_CONTENT
    include: tuple[Selector, ...] = ()
    exclude: tuple[Selector, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", ExtractionMode(self.mode))
        object.__setattr__(self, "include", tuple(_sel(s) for s in self.include))
        object.__setattr__(self, "exclude", tuple(_sel(s) for s in self.exclude))
        if self.mode is ExtractionMode.SCOPED and not self.include:
            raise ValueError("scoped extraction needs at least one include selector")

    @classmethod
    def main_content(cls, exclude=()) -> ExtractionInstruction:
        return cls(ExtractionMode.MAIN_CONTENT, (), tuple(exclude))

    @classmethod
    def scoped(cls, include, exclude=()) -> ExtractionInstruction:
        return cls(ExtractionMode.SCOPED, tuple(include), tuple(exclude))

    @classmethod
    def from_dict(cls, data: dict) -> ExtractionInstruction:
        return cls(
            ExtractionMode(data.get("mode", "main")),
            tuple(data.get("include", ())),
            tuple(data.get("exclude", ())),
        )

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "include": [str(s) for s in self.include],
            "exclude": [str(s) for s in self.exclude],
        }


def _sel(s: Selector | str) -> Selector:
    return parse_selector(s) if isinstance(s, str) else s


@dataclass(frozen=True)
class MarkdownDoc:
    body: str
    source_id: str = ""
    element_count: int = 0
    char_count: int = 0

    @property
    def stats(self) -> dict:
        return {"element_count": self.element_count, "char_count": self.char_count}


# ---------------------------------------------------------------------------
# boilerplate removal

# head/title/template never carry rendered page content
BOILERPLATE_TAGS = frozenset("nav footer aside form iframe noscript script style head title template".split())
BOILERPLATE_PATTERNS = ("nav", "menu", "footer", "sidebar", "banner", "ad-", "-ad", "advert", "promo", "cookie", "popup")
# page skeleton elements are never dropped on a class/id match: WordPress and
# friends put "has-sidebar" style flags on <body>
_PATTERN_EXEMPT = frozenset(("html", "body", "main", "article", ROOT_TAG))
_BOILERPLATE_RE = re.compile("|".join(re.escape(p) for p in BOILERPLATE_PATTERNS), re.I)


def is_boilerplate(node: HtmlNode) -> bool:
    if node.kind is not ELEMENT:
        return node.kind is not TEXT
    if node.tag in BOILERPLATE_TAGS:
        return True
    if node.tag in _PATTERN_EXEMPT:
        return False
    for name, value in node.attrs:
        if (name == "class" or name == "id") and _BOILERPLATE_RE.search(value):
            return True
    return False


def strip_boilerplate(root: HtmlNode) -> HtmlNode:
    """Copy of ``root`` without navigation, ads, forms, scripts and comments."""
    return _strip(root, is_boilerplate)


def _strip(node: HtmlNode, drop) -> HtmlNode:
    if not node.children:
        return node
    kept = []
    changed = False
    for child in node.children:
        if drop(child):
            changed = True
            continue
        if child.children:
            new = _strip(child, drop)
            if new is not child:
                changed = True
            kept.append(new)
        else:
            kept.append(child)
    if not changed:
        return node
    return HtmlNode(node.kind, node.tag, node.attrs, tuple(kept), node.text)


# ---------------------------------------------------------------------------
# main content scoring

# containers only: leaf blocks (p, pre, lists) would let one long paragraph
# beat the page it belongs to
CANDIDATE_BLOCKS = frozenset("div section td center".split())
# the winner must carry at least this share of the page's own score
MIN_DOMINANCE = 0.5


def score_main_content(root: HtmlNode) -> HtmlNode:
    """Pick the sub-tree carrying the page's main content.

    The first ``main`` wins, then the first ``article``; otherwise the
    container block with the highest
    ``text_len * (1 - link_text_len / max(text_len, 1))``, earliest in
    document order on ties. Degenerate pages (no scoring container, or a
    winner holding under half of the page score) return ``root`` itself.
    """
    first_article = None
    for node in iter_preorder(root):
        if node.kind is ELEMENT:
            if node.tag == "main":
                return node
            if node.tag == "article" and first_article is None:
                first_article = node
    if first_article is not None:
        return first_article

    best_node = None
    best_score = 0.0
    best_order = -1
    counter = 0

    def visit(node: HtmlNode, in_link: bool) -> tuple[int, int]:
        # returns (text_len, link_text_len); text length counts collapsed text
        nonlocal best_node, best_score, best_order, counter
        if node.kind is TEXT:
            n = len(collapse_ws(node.text))
            return n, n if in_link else 0
        if node.kind is not ELEMENT:
            return 0, 0
        order = counter
        counter += 1
        in_link = in_link or node.tag == "a"
        text_len = link_len = 0
        for child in node.children:
            t, l = visit(child, in_link)
            text_len += t
            link_len += l
        if text_len and node.tag in CANDIDATE_BLOCKS:
            score = text_len * (1.0 - link_len / max(text_len, 1))
            if score > best_score or (score == best_score and order < best_order):
                best_node, best_score, best_order = node, score, order
        return text_len, link_len

    total, links = visit(root, False)
    page_score = total * (1.0 - links / max(total, 1))
    if best_node is None or best_score < MIN_DOMINANCE * page_score:
        return root
    return best_node


# ---------------------------------------------------------------------------
# scoping

def _contains(node: HtmlNode, other: HtmlNode) -> bool:
    return any(n is other for n in iter_preorder(node))


def apply_scope(root: HtmlNode, instr: ExtractionInstruction) -> list[HtmlNode]:
    """Boilerplate-free sub-trees selected by ``instr``, in document order."""
    clean = strip_boilerplate(root)
    if instr.mode is ExtractionMode.SCOPED:
        matched: list[HtmlNode] = []
        ids = set()
        for sel in instr.include:
            for node in select(clean, sel):
                if id(node) not in ids:
                    ids.add(id(node))
                    matched.append(node)
        if not matched:
            raise ScopeEmpty(", ".join(str(s) for s in instr.include))
        order = {id(n): i for i, n in enumerate(iter_preorder(clean))}
        matched.sort(key=lambda n: order[id(n)])
        # nested matches are already covered by their matched ancestor
        scopes = [n for n in matched if not any(o is not n and _contains(o, n) for o in matched)]
    else:
        scopes = [score_main_content(clean)]
    if instr.exclude:
        excluded = {id(n) for sel in instr.exclude for scope in scopes for n in select(scope, sel)}
        if excluded:
            scopes = [_strip(s, lambda c: id(c) in excluded) for s in scopes if id(s) not in excluded]
    return scopes


def convert(root: HtmlNode, instr: ExtractionInstruction | None = None, source_id: str = "") -> MarkdownDoc:
    instr = instr or ExtractionInstruction()
    scopes = apply_scope(root, instr)
    blocks: list[str] = []
    elements = 0
    for scope in scopes:
        blocks.extend(_Renderer().blocks_of(scope))
        elements += sum(1 for n in iter_preorder(scope) if n.kind is ELEMENT and n.tag != ROOT_TAG)
    body = finalize("\n\n".join(b for b in blocks if b))
    return MarkdownDoc(body, source_id, elements, len(body))


def convert_html(html: bytes | str, instr: ExtractionInstruction | None = None, source_id: str = "") -> MarkdownDoc:
    from .html_tree import parse_html

    return convert(parse_html(html), instr, source_id)


def render_markdown(node: HtmlNode) -> str:
    """Render a tree as-is, without boilerplate removal or scoping."""
    return finalize("\n\n".join(_Renderer().blocks_of(node)))


# ---------------------------------------------------------------------------
# rendering

BLOCK_TAGS = frozenset(
    """#root html body head address article aside blockquote center details dialog
    div dl dd dt fieldset figcaption figure footer form h1 h2 h3 h4 h5 h6 header
    hgroup hr li main menu nav ol p pre section summary table tbody thead tfoot tr
    td th caption ul noscript""".split()
)
HEADINGS = {"h1": 1, "h2": 2, "h3": 3, "h4": 4, "h5": 5, "h6": 6}
# head/title metadata is not page content
SKIP_TAGS = frozenset("head script style template".split())
_FENCE_LINE_RE = re.compile(r"^ *(`{3,}|~{3,})")
_TRAIL_WS_RE = re.compile(r"[ \t]+$", re.M)
_BLANK_RUN_RE = re.compile(r"\n{3,}")
_SPACES_RE = re.compile(r"[ \t\n\r\f\v]+")
_LIST_START_RE = re.compile(r"(?:- |1\. )")
_BR = "\x00BR\x00"


def finalize(text: str) -> str:
    """Enforce the output whitespace contract.

    No trailing whitespace on any line, at most one blank line between blocks
    (fenced code is left alone apart from trailing spaces), single final newline.
    """
    text = _TRAIL_WS_RE.sub("", text)
    if "```" in text or "~~~" in text:
        out = []
        in_fence = None
        blank = 0
        for line in text.split("\n"):
            m = _FENCE_LINE_RE.match(line)
            if in_fence is None:
                if not line:
                    blank += 1
                    if blank > 1:
                        continue
                else:
                    blank = 0
                if m:
                    in_fence = m.group(1)
            elif m and m.group(1).startswith(in_fence) and not line.strip(" `~"):
                in_fence = None
                blank = 0
            out.append(line)
        text = "\n".join(out)
    else:
        text = _BLANK_RUN_RE.sub("\n\n", text)
    text = text.strip("\n")
    return text + "\n" if text else ""


def _longest_run(text: str, ch: str = "`") -> int:
    runs = re.findall(re.escape(ch) + "+", text)
    return max((len(r) for r in runs), default=0)


def _wrap(marker: str, inner: str) -> str:
    """Wrap inline text, keeping surrounding spaces outside the markers."""
    core = inner.strip(" ")
    if not core:
        return inner
    lead = " " if inner.startswith(" ") else ""
    trail = " " if inner.endswith(" ") else ""
    return f"{lead}{marker}{core}{marker}{trail}"


class _Renderer:
    """Walks a tree producing Markdown blocks. One instance per conversion."""

    def __init__(self) -> None:
        self.list_depth = 0

    # -- block level -------------------------------------------------------

    def blocks_of(self, node: HtmlNode) -> list[str]:
        if node.kind is TEXT:
            para = self.paragraph([node])
            return [para] if para else []
        if node.kind is not ELEMENT or node.tag in SKIP_TAGS:
            return []
        if node.tag in BLOCK_TAGS and node.tag not in ("#root", "html", "body"):
            return [b for b in self.block(node) if b]
        return self.flow(node.children) if node.tag in BLOCK_TAGS else [b for b in self.flow([node]) if b]

    def flow(self, children) -> list[str]:
        """Render mixed content: inline runs become paragraphs between blocks."""
        blocks: list[str] = []
        run: list[HtmlNode] = []
        for child in children:
            kind = child.kind
            if kind is ELEMENT and child.tag in BLOCK_TAGS:
                if run:
                    para = self.paragraph(run)
                    if para:
                        blocks.append(para)
                    run = []
                if child.tag not in SKIP_TAGS:
                    blocks.extend(self.block(child))
            elif kind is TEXT or (kind is ELEMENT and child.tag not in SKIP_TAGS):
                run.append(child)
        if run:
            para = self.paragraph(run)
            if para:
                blocks.append(para)
        return [b for b in blocks if b]

    def block(self, el: HtmlNode) -> list[str]:
        tag = el.tag
        level = HEADINGS.get(tag)
        if level:
            text = self.inline_text(el.children, single_line=True)
            return ["#" * level + " " + text] if text else []
        if tag == "hr":
            return ["---"]
        if tag == "pre":
            return [self.code_block(el)]
        if tag in ("ul", "ol", "menu"):
            return [self.list_block(el, ordered=tag == "ol")]
        if tag == "blockquote":
            inner = "\n\n".join(self.flow(el.children))
            if not inner:
                return []
            return ["\n".join("> " + line if line else ">" for line in inner.split("\n"))]
        if tag == "table":
            return self.table(el)
        if tag == "figcaption":
            text = self.inline_text(el.children)
            return [f"*{text}*"] if text else []
        if tag == "li":
            # stray list item outside a list
            return [self.list_block(HtmlNode(ELEMENT, "ul", (), (el,)), ordered=False)]
        if tag in ("tr", "td", "th", "thead", "tbody", "tfoot", "caption"):
            # table parts outside a table
            return self.flow(el.children)
        return self.flow(el.children)

    def code_block(self, el: HtmlNode) -> str:
        lang = ""
        for node in iter_preorder(el):
            if node.kind is ELEMENT and node.tag in ("pre", "code"):
                for cls in node.classes:
                    if cls.startswith("language-") and len(cls) > 9:
                        lang = cls[9:]
                        break
            if lang:
                break
        code = self.preformatted(el)
        if code.startswith("\n"):
            code = code[1:]
        code = code.rstrip("\n")
        fence = "`" * max(3, _longest_run(code) + 1)
        return f"{fence}{lang}\n{code}\n{fence}" if code else f"{fence}{lang}\n{fence}"

    def preformatted(self, node: HtmlNode) -> str:
        parts = []
        for child in node.children:
            if child.kind is TEXT:
                parts.append(child.text)
            elif child.kind is ELEMENT:
                if child.tag == "br":
                    parts.append("\n")
                elif child.tag not in SKIP_TAGS:
                    parts.append(self.preformatted(child))
        return "".join(parts)

    def list_block(self, el: HtmlNode, ordered: bool) -> str:
        marker = "1. " if ordered else "- "
        self.list_depth += 1
        try:
            items = []
            run: list[HtmlNode] = []

            def add(blocks: list[str]) -> None:
                blocks = [b for b in blocks if b]
                if not blocks:
                    return
                content = blocks[0]
                for b in blocks[1:]:
                    # nested lists stay tight under their item
                    content += ("\n" if _LIST_START_RE.match(b) else "\n\n") + b
                lines = content.split("\n")
                out = [marker + lines[0]]
                out.extend("  " + line if line else "" for line in lines[1:])
                items.append("\n".join(out))

            for child in el.children:
                if child.kind is ELEMENT and child.tag == "li":
                    if run:
                        add(self.flow(run))
                        run = []
                    add(self.flow(child.children))
                elif child.kind is ELEMENT and child.tag in ("ul", "ol", "menu"):
                    # a list directly inside a list nests under the previous item
                    if run:
                        add(self.flow(run))
                        run = []
                    nested = self.list_block(child, ordered=child.tag == "ol")
                    if nested:
                        indented = "\n".join("  " + line if line else "" for line in nested.split("\n"))
                        if items:
                            items[-1] += "\n" + indented
                        else:
                            items.append(indented)
                else:
                    run.append(child)
            if run:
                add(self.flow(run))
            return "\n".join(items)
        finally:
            self.list_depth -= 1

    def table(self, el: HtmlNode) -> list[str]:
        """GFM pipe table; captions and stray content are emitted before it."""
        header: list[str] | None = None
        before: list[HtmlNode] = []
        rows: list[list[str]] = []
        pending_spans: dict[int, list] = {}  # column -> [remaining rows, text]

        def row_cells(tr: HtmlNode) -> list[str]:
            cells: list[str] = []
            col = 0

            def fill_spans() -> None:
                nonlocal col
                while col in pending_spans:
                    span = pending_spans[col]
                    cells.append(span[1])
                    span[0] -= 1
                    if span[0] <= 0:
                        del pending_spans[col]
                    col += 1

            stray: list[HtmlNode] = []
            for cell in tr.children:
                if cell.kind is not ELEMENT or cell.tag not in ("td", "th"):
                    stray.append(cell)
                    continue
                if stray:
                    before.extend(stray)
                    stray = []
                fill_spans()
                text = self.inline_text(cell.children, single_line=True, pipes=True)
                colspan = _span(cell.get("colspan"))
                rowspan = _span(cell.get("rowspan"))
                for _ in range(colspan):
                    if rowspan > 1:
                        pending_spans[col] = [rowspan - 1, text]
                    cells.append(text)
                    col += 1
            before.extend(stray)
            fill_spans()
            return cells

        head_rows: list[list[str]] = []
        for part in el.children:
            if part.kind is ELEMENT and part.tag == "tr":
                rows.append(row_cells(part))
            elif part.kind is ELEMENT and part.tag in ("thead", "tbody", "tfoot"):
                for tr in part.children:
                    if tr.kind is ELEMENT and tr.tag == "tr":
                        (head_rows if part.tag == "thead" else rows).append(row_cells(tr))
                    else:
                        before.append(tr)
            else:
                before.append(part)
        blocks = self.flow(before) if before else []
        if head_rows:
            header = head_rows[0]
            rows = head_rows[1:] + rows
        elif rows:
            header = rows.pop(0)
        if header is None:
            return blocks
        width = max([len(header)] + [len(r) for r in rows]) or 1

        def line(cells: list[str]) -> str:
            cells = cells + [""] * (width - len(cells))
            return "| " + " | ".join(cells) + " |"

        out = [line(header), "| " + " | ".join(["---"] * width) + " |"]
        out.extend(line(r) for r in rows)
        blocks.append("\n".join(out))
        return blocks

    # -- inline level ------------------------------------------------------

    def paragraph(self, nodes) -> str:
        return self.inline_text(nodes)

    def inline_text(self, nodes, single_line: bool = False, pipes: bool = False) -> str:
        raw = "".join([self.inline(n) for n in nodes])
        text = _SPACES_RE.sub(" ", raw)
        if _BR in text:
            if single_line:
                text = _SPACES_RE.sub(" ", text.replace(_BR, " "))
            else:
                while _BR + _BR in text:
                    text = text.replace(_BR + _BR, _BR)
                text = text.replace(" " + _BR, _BR).replace(_BR + " ", _BR)
                text = text.strip(" ")
                while text.startswith(_BR):
                    text = text[len(_BR):]
                while text.endswith(_BR):
                    text = text[: -len(_BR)]
                text = text.replace(_BR, "\\\n")
        text = text.strip(" ")
        if pipes:
            text = text.replace("|", "\\|")
        return text

    def inline(self, node: HtmlNode) -> str:
        kind = node.kind
        if kind is TEXT:
            return node.text
        if kind is not ELEMENT:
            return ""
        tag = node.tag
        if tag in SKIP_TAGS:
            return ""
        if tag == "br":
            return _BR
        if tag == "img":
            src = node.get("src")
            if not src:
                return ""
            alt = collapse_ws(node.get("alt") or "")
            return f"![{alt}]({_link_target(src)})"
        children = node.children
        inner = "".join(self.inline(c) for c in children) if children else ""
        if tag in BLOCK_TAGS:
            # block content inside inline context: keep words apart
            return f" {inner} "
        if tag in ("strong", "b"):
            return _wrap("**", _collapse_keep_edges(inner))
        if tag in ("em", "i"):
            return _wrap("*", _collapse_keep_edges(inner))
        if tag in ("del", "s", "strike"):
            return _wrap("~~", _collapse_keep_edges(inner))
        if tag == "code":
            return _code_span(inner)
        if tag == "a":
            href = node.get("href")
            if href is None:
                return inner
            label = _collapse_keep_edges(inner)
            core = label.strip(" ")
            if not core:
                return label
            lead = " " if label.startswith(" ") else ""
            trail = " " if label.endswith(" ") else ""
            return f"{lead}[{core}]({_link_target(href)}){trail}"
        return inner


def _collapse_keep_edges(text: str) -> str:
    return _SPACES_RE.sub(" ", text)


def _code_span(inner: str) -> str:
    text = _SPACES_RE.sub(" ", inner.replace(_BR, " "))
    core = text.strip(" ")
    if not core:
        return text
    lead = " " if text.startswith(" ") else ""
    trail = " " if text.endswith(" ") else ""
    fence = "`" * (_longest_run(core) + 1)
    pad = " " if core.startswith("`") or core.endswith("`") else ""
    return f"{lead}{fence}{pad}{core}{pad}{fence}{trail}"


def _link_target(url: str) -> str:
    url = url.strip()
    if any(c in url for c in " \t\n()<>"):
        return "<" + url.replace("<", "%3C").replace(">", "%3E").replace("\n", "") + ">"
    return url


def _span(value: str | None) -> int:
    try:
        n = int((value or "1").strip())
    except ValueError:
        return 1
    return min(max(n, 1), 1000)
