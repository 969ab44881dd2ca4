from __future__ import annotations

import json

import jsonschema
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cryptoscan.bench import VerdictCounts, compute_metrics
from cryptoscan.detect import Anomaly, AnomalyKind, FinalReport
from cryptoscan.model import Alert, AlertStatus, DetectionSetting, MisuseCategory, Mode, SourceUnit
from cryptoscan.report import (
    ALERT_JSON_SCHEMA,
    SARIF_LIKE_SCHEMA,
    UNDEFINED,
    emit_advisory,
    emit_alert_json,
    emit_metrics_table,
    emit_sarif,
    parse_alert_json,
)

SETTING = DetectionSetting()
CODE = "".join(f"line {i}\n" for i in range(1, 31))
UNIT = SourceUnit.from_text("src/A.java", CODE)


def alert(status=AlertStatus.VALIDATED_KEPT, span=(12, 13), setting=SETTING, **kw) -> Alert:
    base = Alert(
        category=MisuseCategory.BROKEN_ALGORITHM,
        unit_path="src/A.java",
        api="Cipher.getInstance",
        root_cause="DES is broken.",
        recommendation="Use AES-GCM.",
        line_span=span,
        support_count=3,
        origin_setting=setting,
        raw_category="weak cipher",
        **kw,
    )
    return base if status is AlertStatus.CANDIDATE else base.with_status(status, "checked")


def sample_report() -> FinalReport:
    return FinalReport(
        "src/A.java",
        SETTING,
        (alert(), alert(AlertStatus.VALIDATED_DROPPED, span=None)),
        (Anomaly(2, AnomalyKind.EMPTY, ""), Anomaly(None, AnomalyKind.VERDICT_OMITTED, "x")),
        '[{"verdict": "keep"}]',
    )


class TestAlertJson:
    def test_schema_and_layout(self):
        data = emit_alert_json(sample_report())
        doc = json.loads(data)
        jsonschema.validate(doc, ALERT_JSON_SCHEMA)
        assert data.endswith(b"\n") and data.startswith(b"{\n  ")
        assert doc["setting"] == {"mode": "TaskAware", "validation": True, "queryCount": 5}
        assert doc["alerts"][1]["lineSpan"] is None and doc["alerts"][1]["status"] == "ValidatedDropped"

    def test_round_trip_is_a_fixpoint(self):
        data = emit_alert_json(sample_report())
        assert emit_alert_json(parse_alert_json(data)) == data

    def test_unicode_kept_readable(self):
        r = FinalReport("ü.py", SETTING, (), (), None)
        assert "ü.py" in emit_alert_json(r).decode("utf-8")

    @given(st.lists(st.tuples(st.sampled_from(list(MisuseCategory)), st.text(min_size=1, max_size=8).filter(str.strip), st.integers(1, 50)), max_size=4))
    def test_round_trip_property(self, items):
        alerts = tuple(
            Alert(c, "src/A.java", api, "why", line_span=(ln, ln), origin_setting=SETTING).with_status(AlertStatus.VALIDATED_KEPT)
            for c, api, ln in items
        )
        data = emit_alert_json(FinalReport("src/A.java", SETTING, alerts, (), None))
        assert emit_alert_json(parse_alert_json(data)) == data


def test_sarif():
    doc = json.loads(emit_sarif([sample_report()]))
    jsonschema.validate(doc, SARIF_LIKE_SCHEMA)
    run = doc["runs"][0]
    assert doc["version"] == "2.1.0" and run["tool"]["driver"]["name"] == "cryptoscan"
    assert {r["id"] for r in run["tool"]["driver"]["rules"]} == {c.value for c in MisuseCategory}
    kept, dropped = run["results"]
    assert kept["locations"][0]["physicalLocation"]["region"] == {"startLine": 12, "endLine": 13}
    assert "suppressions" not in kept and dropped["suppressions"][0]["kind"] == "external"


class TestMetricsTable:
    def test_row(self):
        counts = VerdictCounts(121, 37, 9, 17, 154)
        text = emit_metrics_table([("TA w/V", compute_metrics(counts), counts)])
        header, row = text.splitlines()
        assert header == "Setting P R ACC TP FP TN FN"
        assert row == "TA w/V  0.77 0.79 0.71 121 37 9 17"

    def test_undefined(self):
        counts = VerdictCounts(0, 0, 0, 0, 0)
        row = emit_metrics_table([("UC w/oV", compute_metrics(counts), counts)]).splitlines()[1]
        assert row == f"UC w/oV {UNDEFINED} {UNDEFINED} {UNDEFINED} 0 0 0 0"

    def test_empty(self):
        with pytest.raises(ValueError):
            emit_metrics_table([])


class TestAdvisory:
    def test_sections(self):
        text = emit_advisory(alert(), UNIT)
        headings = [ln for ln in text.splitlines() if ln.startswith("#")]
        assert headings == [
            "# Use of a Broken or Risky Cryptographic Algorithm in `src/A.java`",
            "## Summary",
            "## Location",
            "## Category",
            "## Root Cause",
            "## Recommendation",
            "## Code Excerpt",
        ]
        assert "`src/A.java:12`" in text and "3 of 5" in text
        assert "  10 | line 10" in text and "  19 | line 19" in text and "line 20" not in text

    def test_whole_unit_and_caveat(self):
        unvalidated = DetectionSetting(Mode.UNCONSTRAINED, False)
        text = emit_advisory(alert(AlertStatus.CANDIDATE, span=None, setting=unvalidated), UNIT)
        assert "whole-unit finding" in text and "## Caveats" in text

    def test_first_lines(self):
        text = emit_advisory(alert(span=(1, 1)), UNIT)
        assert "   1 | line 1" in text

    def test_rejects(self):
        with pytest.raises(ValueError):
            emit_advisory(alert(AlertStatus.VALIDATED_DROPPED), UNIT)
        with pytest.raises(ValueError):
            emit_advisory(alert(), SourceUnit.from_text("B.java", "x\n"))
