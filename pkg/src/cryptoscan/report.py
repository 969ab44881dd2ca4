"""Report serialization: alert JSON, SARIF-like results, metrics tables, advisories."""

from __future__ import annotations

import json
from decimal import Decimal
from typing import Sequence

from . import __version__
from .bench import MetricsRow, VerdictCounts
from .detect import Anomaly, AnomalyKind, FinalReport
from .model import Alert, AlertStatus, DetectionSetting, MisuseCategory, SourceUnit, alert_signature

TOOL_NAME = "cryptoscan"

_ALERT_ITEM_SCHEMA = {
    "type": "object",
    "required": ["category", "api", "lineSpan", "rootCause", "recommendation", "supportCount", "status"],
    "additionalProperties": False,
    "properties": {
        "signature": {"type": "string"},
        "category": {"enum": [c.value for c in MisuseCategory]},
        "rawCategory": {"type": "string"},
        "api": {"type": "string"},
        "lineSpan": {
            "oneOf": [
                {"type": "null"},
                {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
            ]
        },
        "rootCause": {"type": "string"},
        "recommendation": {"type": "string"},
        "supportCount": {"type": "integer", "minimum": 1},
        "status": {"enum": [s.value for s in AlertStatus]},
        "justification": {"type": ["string", "null"]},
    },
}

ALERT_JSON_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "cryptoscan unit report",
    "type": "object",
    "required": ["unit", "setting", "analyzed", "alerts", "anomalies", "validationResponse"],
    "additionalProperties": False,
    "properties": {
        "unit": {"type": "string"},
        "setting": {
            "type": "object",
            "required": ["mode", "validation", "queryCount"],
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["Unconstrained", "TaskAware"]},
                "validation": {"type": "boolean"},
                "queryCount": {"type": "integer", "minimum": 1},
            },
        },
        "analyzed": {"type": "boolean"},
        "alerts": {"type": "array", "items": _ALERT_ITEM_SCHEMA},
        "anomalies": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["queryIndex", "kind", "detail"],
                "additionalProperties": False,
                "properties": {
                    "queryIndex": {"type": ["integer", "null"], "minimum": 0},
                    "kind": {"enum": [k.value for k in AnomalyKind]},
                    "detail": {"type": "string"},
                },
            },
        },
        "validationResponse": {"type": ["string", "null"]},
    },
}

SARIF_LIKE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "cryptoscan SARIF-like log",
    "type": "object",
    "required": ["version", "runs"],
    "properties": {
        "version": {"const": "2.1.0"},
        "runs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["tool", "results"],
                "properties": {
                    "tool": {
                        "type": "object",
                        "required": ["driver"],
                        "properties": {
                            "driver": {
                                "type": "object",
                                "required": ["name", "rules"],
                                "properties": {
                                    "name": {"type": "string"},
                                    "version": {"type": "string"},
                                    "rules": {
                                        "type": "array",
                                        "items": {
                                            "type": "object",
                                            "required": ["id", "name", "shortDescription"],
                                            "properties": {
                                                "id": {"type": "string"},
                                                "name": {"type": "string"},
                                                "shortDescription": {
                                                    "type": "object",
                                                    "required": ["text"],
                                                    "properties": {"text": {"type": "string"}},
                                                },
                                            },
                                        },
                                    },
                                },
                            }
                        },
                    },
                    "results": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["ruleId", "level", "message", "locations"],
                            "properties": {
                                "ruleId": {"enum": [c.value for c in MisuseCategory]},
                                "level": {"enum": ["error", "warning", "note"]},
                                "message": {
                                    "type": "object",
                                    "required": ["text"],
                                    "properties": {"text": {"type": "string"}},
                                },
                                "locations": {
                                    "type": "array",
                                    "minItems": 1,
                                    "items": {
                                        "type": "object",
                                        "required": ["physicalLocation"],
                                        "properties": {
                                            "physicalLocation": {
                                                "type": "object",
                                                "required": ["artifactLocation"],
                                                "properties": {
                                                    "artifactLocation": {
                                                        "type": "object",
                                                        "required": ["uri"],
                                                        "properties": {"uri": {"type": "string"}},
                                                    },
                                                    "region": {
                                                        "type": "object",
                                                        "required": ["startLine"],
                                                        "properties": {
                                                            "startLine": {"type": "integer", "minimum": 1},
                                                            "endLine": {"type": "integer", "minimum": 1},
                                                        },
                                                    },
                                                },
                                            }
                                        },
                                    },
                                },
                                "suppressions": {
                                    "type": "array",
                                    "items": {
                                        "type": "object",
                                        "required": ["kind"],
                                        "properties": {
                                            "kind": {"enum": ["external", "inSource"]},
                                            "justification": {"type": "string"},
                                        },
                                    },
                                },
                                "properties": {"type": "object"},
                            },
                        },
                    },
                },
            },
        },
    },
}


def _dump(doc: dict) -> bytes:
    return (json.dumps(doc, ensure_ascii=False, indent=2) + "\n").encode("utf-8")


def alert_to_json(alert: Alert) -> dict:
    return {
        "signature": str(alert_signature(alert)),
        "category": alert.category.value,
        "rawCategory": alert.raw_category,
        "api": alert.api,
        "lineSpan": list(alert.line_span) if alert.line_span else None,
        "rootCause": alert.root_cause,
        "recommendation": alert.recommendation,
        "supportCount": alert.support_count,
        "status": alert.status.value,
        "justification": alert.justification,
    }


def report_to_json(report: FinalReport) -> dict:
    return {
        "unit": report.unit_path,
        "setting": report.setting.to_dict(),
        "analyzed": report.analyzed,
        "alerts": [alert_to_json(a) for a in report.alerts],
        "anomalies": [{"queryIndex": a.query_index, "kind": a.kind.value, "detail": a.detail} for a in report.anomalies],
        "validationResponse": report.validation_response,
    }


def emit_alert_json(report: FinalReport) -> bytes:
    """Deterministic UTF-8 JSON with a fixed key order and a trailing newline."""
    return _dump(report_to_json(report))


def parse_alert_json(data: bytes | str) -> FinalReport:
    doc = json.loads(data)
    setting = DetectionSetting.from_dict(doc["setting"])
    alerts = tuple(
        Alert(
            category=MisuseCategory(a["category"]),
            unit_path=doc["unit"],
            api=a["api"],
            root_cause=a["rootCause"],
            recommendation=a["recommendation"],
            line_span=tuple(a["lineSpan"]) if a["lineSpan"] else None,
            support_count=a["supportCount"],
            origin_setting=setting,
            status=AlertStatus(a["status"]),
            raw_category=a.get("rawCategory", ""),
            justification=a.get("justification"),
        )
        for a in doc["alerts"]
    )
    anomalies = tuple(Anomaly(a["queryIndex"], AnomalyKind(a["kind"]), a["detail"]) for a in doc["anomalies"])
    return FinalReport(doc["unit"], setting, alerts, anomalies, doc["validationResponse"], doc["analyzed"])


def emit_sarif(reports: Sequence[FinalReport]) -> bytes:
    """SARIF 2.1.0-shaped log; dropped alerts appear with an external suppression."""
    rules = [
        {"id": c.value, "name": c.display_name, "shortDescription": {"text": c.description}}
        for c in MisuseCategory
    ]
    results = []
    for report in reports:
        for a in report.alerts:
            physical: dict = {"artifactLocation": {"uri": a.unit_path}}
            if a.line_span:
                physical["region"] = {"startLine": a.line_span[0], "endLine": a.line_span[1]}
            result = {
                "ruleId": a.category.value,
                "level": "warning",
                "message": {"text": f"{a.api}: {a.root_cause}"},
                "locations": [{"physicalLocation": physical}],
                "properties": {
                    "api": a.api,
                    "recommendation": a.recommendation,
                    "supportCount": a.support_count,
                    "status": a.status.value,
                    "setting": a.origin_setting.label,
                },
            }
            if a.status is AlertStatus.VALIDATED_DROPPED:
                result["suppressions"] = [{"kind": "external", "justification": a.justification or "dropped by validation"}]
            results.append(result)
    doc = {
        "version": "2.1.0",
        "runs": [{"tool": {"driver": {"name": TOOL_NAME, "version": __version__, "rules": rules}}, "results": results}],
    }
    return _dump(doc)


UNDEFINED = "—"


def _fmt(value: Decimal | None) -> str:
    return UNDEFINED if value is None else f"{value:.2f}"


def emit_metrics_table(rows: Sequence[tuple[str, MetricsRow, VerdictCounts]]) -> str:
    """Plain-text table: label, then P R ACC (2 decimals) and TP FP TN FN."""
    if not rows:
        raise ValueError("metrics table needs at least one row")
    width = max(len("Setting"), *(len(label) for label, _, _ in rows))
    lines = [f"{'Setting':<{width}} P R ACC TP FP TN FN"]
    for label, metrics, counts in rows:
        p, r, acc = metrics.rounded()
        cells = [_fmt(p), _fmt(r), _fmt(acc), str(counts.tp), str(counts.fp), str(counts.tn), str(counts.fn)]
        lines.append(f"{label:<{width}} " + " ".join(cells))
    return "\n".join(lines) + "\n"


EXCERPT_LINES = 10


def _excerpt(unit: SourceUnit, span: tuple[int, int]) -> tuple[int, list[str]]:
    # two lines of lead-in, then as much of the span as fits
    lines = unit.content.splitlines()
    first = max(1, min(span[0], len(lines)) - 2)
    return first, lines[first - 1 : first - 1 + EXCERPT_LINES]


def emit_advisory(alert: Alert, unit: SourceUnit) -> str:
    """Developer-facing Markdown for a kept alert."""
    if alert.status is AlertStatus.VALIDATED_DROPPED:
        raise ValueError("advisories are only written for kept alerts")
    if alert.unit_path != unit.path:
        raise ValueError(f"alert belongs to {alert.unit_path}, not {unit.path}")
    where = f"{unit.path}:{alert.line_span[0]}" if alert.line_span else unit.path
    out = [
        f"# {alert.category.display_name} in `{unit.path}`",
        "",
        "## Summary",
        "",
        f"`{alert.api}` was reported by {alert.support_count} of "
        f"{alert.origin_setting.query_count} detection queries ({alert.origin_setting.label}).",
        "",
        "## Location",
        "",
        f"`{where}`",
        "",
        "## Category",
        "",
        f"{alert.category.display_name} (`{alert.category.value}`)",
        "",
        "## Root Cause",
        "",
        alert.root_cause,
        "",
        "## Recommendation",
        "",
        alert.recommendation or "No recommendation was given.",
        "",
        "## Code Excerpt",
        "",
    ]
    if alert.line_span is None:
        out += ["whole-unit finding", ""]
    else:
        first, lines = _excerpt(unit, alert.line_span)
        lang = unit.language.value.lower() if unit.language.value != "Other" else ""
        numbered = [f"{first + i:>4} | {text}" for i, text in enumerate(lines)]
        out += [f"```{lang}", *numbered, "```", ""]
    if not alert.origin_setting.validation:
        out += [
            "## Caveats",
            "",
            "This finding did not go through a validation round and may be a false positive.",
            "",
        ]
    return "\n".join(out)
