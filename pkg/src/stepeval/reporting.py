"""Report renderers: one table, three formats, byte-deterministic output.

Rows are the eight categories in their fixed order plus an Overall row;
a report with no results at all renders as a header-only table. Every real
is printed with exactly two decimals in all three formats, so rendering the
same report twice (or after a JSON round-trip) is byte-identical.
"""

from __future__ import annotations

import enum
import json
from typing import Any, Optional

from .core import Category, MetricName
from .runner import AggregateReport, CategoryAggregate


class ReportFormat(enum.Enum):
    MARKDOWN = "markdown"
    CSV = "csv"
    JSON = "json"


_HEADER = ["Category", "Final Answer %", "Step Score %", "Scored", "Failed"] + [
    m.value for m in MetricName.ordered()
]


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.2f}"


def _row_cells(label: str, agg: CategoryAggregate) -> list[str]:
    cells = [
        label,
        _fmt(agg.final_answer_pct),
        _fmt(agg.step_score_pct),
        str(agg.scored),
        str(agg.failed),
    ]
    for metric in MetricName.ordered():
        cells.append(
            _fmt(agg.metric_means.get(metric)) if agg.metric_means else ""
        )
    return cells


def _iter_rows(report: AggregateReport) -> list[list[str]]:
    if report.empty:
        return []
    rows = [
        _row_cells(category.value, report.categories[category])
        for category in Category
    ]
    rows.append(_row_cells("Overall", report.overall))
    return rows


def _render_markdown(report: AggregateReport) -> str:
    lines = [
        "| " + " | ".join(_HEADER) + " |",
        "| " + " | ".join("---" for _ in _HEADER) + " |",
    ]
    for row in _iter_rows(report):
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    lines.append(report.footer)
    return "\n".join(lines) + "\n"


def _render_csv(report: AggregateReport) -> str:
    lines = [",".join(_HEADER)]
    for row in _iter_rows(report):
        lines.append(",".join(cell.replace(",", ";") for cell in row))
    return "\n".join(lines) + "\n"


def _json_value(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.2f}"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, dict):
        inner = ", ".join(
            f"{json.dumps(k, ensure_ascii=False)}: {_json_value(v)}"
            for k, v in value.items()
        )
        return "{" + inner + "}"
    raise TypeError(f"cannot render {type(value).__name__} in a report")


def _aggregate_payload(agg: CategoryAggregate) -> dict[str, Any]:
    means = None
    if agg.metric_means is not None:
        means = {m.value: agg.metric_means[m] for m in MetricName.ordered()}
    return {
        "final_answer_pct": agg.final_answer_pct,
        "step_score_pct": agg.step_score_pct,
        "scored": agg.scored,
        "failed": agg.failed,
        "metric_means": means,
    }


def _render_json(report: AggregateReport) -> str:
    payload = {
        "categories": {
            category.value: _aggregate_payload(report.categories[category])
            for category in Category
        },
        "overall": _aggregate_payload(report.overall),
        "footer": report.footer,
    }
    return _json_value(payload) + "\n"


def render_report(report: AggregateReport, format: ReportFormat) -> str:
    """Pure function of the report; same input, same bytes."""
    if format is ReportFormat.MARKDOWN:
        return _render_markdown(report)
    if format is ReportFormat.CSV:
        return _render_csv(report)
    return _render_json(report)


def _aggregate_from_payload(data: dict[str, Any]) -> CategoryAggregate:
    means = None
    if data.get("metric_means") is not None:
        means = {
            MetricName.from_wire(k): float(v)
            for k, v in data["metric_means"].items()
        }
    return CategoryAggregate(
        final_answer_pct=data.get("final_answer_pct"),
        step_score_pct=data.get("step_score_pct"),
        scored=int(data["scored"]),
        failed=int(data["failed"]),
        metric_means=means,
    )


def parse_report(text: str) -> AggregateReport:
    """Inverse of the JSON renderer (values at two-decimal precision)."""
    data = json.loads(text)
    categories = {
        Category.from_wire(name): _aggregate_from_payload(payload)
        for name, payload in data["categories"].items()
    }
    return AggregateReport(
        categories=categories,
        overall=_aggregate_from_payload(data["overall"]),
        footer=data.get("footer", ""),
    )
