"""Turn raw web pages into clean Markdown or schema-valid JSON, score the
results, and synthesize training data with a draft/refine/critique loop."""

__version__ = "0.1.0"

from .html_tree import HtmlNode, NodeKind, inner_text, parse_html, parse_selector, select, to_html
from .jsonx import ExtractionTemplate, JsonSchemaSpec, extract_json, to_node_set, validate
from .markdown import ExtractionInstruction, MarkdownDoc, convert, convert_html
from .metrics import json_metrics, markdown_metrics, report
from .corpus import CorpusDoc, ingest, length_stats, plan_curriculum

__all__ = [
    "HtmlNode", "NodeKind", "parse_html", "parse_selector", "select", "inner_text", "to_html",
    "ExtractionInstruction", "MarkdownDoc", "convert", "convert_html",
    "JsonSchemaSpec", "ExtractionTemplate", "extract_json", "validate", "to_node_set",
    "markdown_metrics", "json_metrics", "report",
    "CorpusDoc", "ingest", "length_stats", "plan_curriculum",
]
