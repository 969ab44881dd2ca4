"""Per-unit detection pipeline: k queries, parsing, aggregation, validation."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

from .gateway import ContextExceeded, Gateway, RawResponse, ResponseStatus, guard_context
from .jsonextract import extract_json_array
from .model import (
    Alert,
    AlertStatus,
    DetectionSetting,
    MisuseCategory,
    SignatureKey,
    SourceUnit,
    alert_signature,
    canonical_category,
    normalize_api,
)
from .prompts import PromptTemplates, build_detection_prompt, build_validation_prompt

log = logging.getLogger(__name__)


class AnomalyKind(str, Enum):
    EMPTY = "Empty"
    REFUSAL = "Refusal"
    PARSE_FAILURE = "ParseFailure"
    TRANSPORT_ERROR = "TransportError"
    HALLUCINATION_SUSPECT = "HallucinationSuspect"
    VALIDATION_UNAVAILABLE = "ValidationUnavailable"
    VERDICT_OMITTED = "VerdictOmitted"


class ResponseClass(str, Enum):
    OK = "Ok"
    EMPTY = "Empty"
    REFUSAL = "Refusal"
    HALLUCINATION_SUSPECT = "HallucinationSuspect"
    TRANSPORT_ERROR = "TransportError"


@dataclass(frozen=True)
class Anomaly:
    query_index: int | None  # None: the validation query
    kind: AnomalyKind
    detail: str = ""

    def sort_key(self) -> tuple:
        return (self.query_index is None, self.query_index or 0, self.kind.value, self.detail)


@dataclass(frozen=True)
class ParseFailure:
    reason: str


@dataclass(frozen=True)
class FieldDiagnostic:
    query_index: int
    item_index: int
    message: str


@dataclass
class ResponseSet:
    unit_path: str
    setting: DetectionSetting
    responses: list[RawResponse] = field(default_factory=list)
    parsed: dict[int, list[Alert] | ParseFailure] = field(default_factory=dict)
    anomalies: list[Anomaly] = field(default_factory=list)
    diagnostics: list[FieldDiagnostic] = field(default_factory=list)

    @property
    def analyzed(self) -> bool:
        """At least one query produced a usable (possibly empty) alert list."""
        return any(isinstance(v, list) for v in self.parsed.values())

    def alert_lists(self) -> dict[int, list[Alert]]:
        return {i: v for i, v in sorted(self.parsed.items()) if isinstance(v, list)}


@dataclass(frozen=True)
class FinalReport:
    unit_path: str
    setting: DetectionSetting
    alerts: tuple[Alert, ...] = ()
    anomalies: tuple[Anomaly, ...] = ()
    validation_response: str | None = None
    analyzed: bool = True

    @property
    def kept(self) -> tuple[Alert, ...]:
        return tuple(a for a in self.alerts if a.status is not AlertStatus.VALIDATED_DROPPED)

    @property
    def dropped(self) -> tuple[Alert, ...]:
        return tuple(a for a in self.alerts if a.status is AlertStatus.VALIDATED_DROPPED)


# --- parsing --------------------------------------------------------------------

_ALIASES = {
    "category": ("category", "type", "misuse", "cwe"),
    "api": ("api", "API", "function", "method", "call"),
    "root_cause": ("rootCause", "root_cause", "rootcause", "description", "reason"),
    "recommendation": ("recommendation", "fix", "suggestion", "remediation"),
    "line": ("line", "lines", "lineSpan", "line_span", "startLine", "lineNumber"),
}


def _field(obj: dict, name: str):
    for key in _ALIASES[name]:
        if key in obj and obj[key] not in (None, ""):
            return obj[key]
    return None


_SPAN = re.compile(r"(\d+)(?:\s*[-–:,]\s*(\d+))?")


def parse_line_span(value) -> tuple[int, int] | None:
    """Accept ``12``, ``"12"``, ``"12-15"``, ``[12, 15]`` or ``{"start":12,"end":15}``."""
    if isinstance(value, bool) or value is None:
        return None
    if isinstance(value, int):
        return (value, value) if value > 0 else None
    if isinstance(value, float) and value.is_integer():
        return parse_line_span(int(value))
    if isinstance(value, str):
        m = _SPAN.search(value)
        if not m:
            return None
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) else lo
    elif isinstance(value, list) and value and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        lo, hi = min(value), max(value)
    elif isinstance(value, dict):
        lo = value.get("start", value.get("begin"))
        hi = value.get("end", lo)
        if not isinstance(lo, int) or not isinstance(hi, int):
            return None
    else:
        return None
    if lo < 1:
        return None
    return (min(lo, hi), max(lo, hi))


def _text(value) -> str | None:
    if isinstance(value, str):
        return value.strip() or None
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return str(value)
    if isinstance(value, list) and value and all(isinstance(v, str) for v in value):
        return ", ".join(v.strip() for v in value)
    return None


def parse_alerts(
    r: RawResponse,
    unit: SourceUnit,
    setting: DetectionSetting,
    diagnostics: list[FieldDiagnostic] | None = None,
) -> list[Alert] | ParseFailure:
    """Turn one Ok response into alerts for ``unit``.

    Objects lacking category, api or root cause are dropped one by one and a
    diagnostic is appended. No recoverable JSON array gives a ParseFailure.
    """
    if r.status is not ResponseStatus.OK:
        raise ValueError(f"parse_alerts needs an Ok response, got {r.status.value}")
    items = extract_json_array(r.text)
    if items is None:
        return ParseFailure("no JSON array of findings in response")
    alerts = []
    for i, obj in enumerate(items):
        problem = None
        if not isinstance(obj, dict):
            problem = f"item is {type(obj).__name__}, not an object"
        else:
            label, api, cause = _text(_field(obj, "category")), _text(_field(obj, "api")), _text(_field(obj, "root_cause"))
            missing = [n for n, v in (("category", label), ("api", api), ("rootCause", cause)) if v is None]
            if missing:
                problem = "missing " + ", ".join(missing)
        if problem:
            if diagnostics is not None:
                diagnostics.append(FieldDiagnostic(r.query_index, i, problem))
            log.debug("%s q%d item %d dropped: %s", unit.path, r.query_index, i, problem)
            continue
        alerts.append(
            Alert(
                category=canonical_category(label),
                unit_path=unit.path,
                api=api,
                root_cause=cause,
                recommendation=_text(_field(obj, "recommendation")) or "",
                line_span=parse_line_span(_field(obj, "line")),
                origin_setting=setting,
                raw_category=label,
            )
        )
    return alerts


_IDENT = re.compile(r"[A-Za-z_$][\w$]*")


def _grounded(alert: Alert, content_idents: set[str]) -> bool:
    tokens = [t.casefold() for t in _IDENT.findall(alert.api) if len(t) >= 3]
    return any(t in content_idents for t in tokens)


def classify_anomaly(r: RawResponse, unit: SourceUnit | None = None) -> ResponseClass:
    """Coarse response class.

    A parseable response is HallucinationSuspect when it reports alerts and
    none of them names an identifier that occurs in the unit.
    """
    if r.status is ResponseStatus.TRANSPORT_ERROR:
        return ResponseClass.TRANSPORT_ERROR
    if r.status is ResponseStatus.EMPTY or not r.text.strip():
        return ResponseClass.EMPTY
    if r.status is ResponseStatus.REFUSAL:
        return ResponseClass.REFUSAL
    if unit is not None:
        parsed = parse_alerts(r, unit, DetectionSetting(query_count=max(1, r.query_index + 1)))
        if isinstance(parsed, list) and parsed:
            idents = {t.casefold() for t in _IDENT.findall(unit.content)}
            if not any(_grounded(a, idents) for a in parsed):
                return ResponseClass.HALLUCINATION_SUSPECT
    return ResponseClass.OK


# --- the pipeline ---------------------------------------------------------------------


def detect_unit(
    unit: SourceUnit,
    setting: DetectionSetting,
    gateway: Gateway,
    templates: PromptTemplates | None = None,
) -> ResponseSet:
    """Issue ``setting.query_count`` concurrent detection queries and parse them.

    Raises ContextExceeded before sending anything if the prompt does not fit.
    """
    bundle = build_detection_prompt(unit, setting, templates)
    check = guard_context(bundle, gateway.profile)
    if not check.fits:
        raise ContextExceeded(f"{unit.path}: {check}")
    k = setting.query_count
    with ThreadPoolExecutor(max_workers=k, thread_name_prefix="query") as pool:
        futures = [pool.submit(gateway.complete, bundle, i) for i in range(k)]
        responses = [f.result() for f in futures]

    rs = ResponseSet(unit.path, setting, responses)
    idents = {t.casefold() for t in _IDENT.findall(unit.content)}
    for r in responses:
        i = r.query_index
        if r.status is not ResponseStatus.OK:
            detail = r.error or ""
            rs.anomalies.append(Anomaly(i, AnomalyKind(r.status.value), detail))
            continue
        parsed = parse_alerts(r, unit, setting, rs.diagnostics)
        rs.parsed[i] = parsed
        if isinstance(parsed, ParseFailure):
            rs.anomalies.append(Anomaly(i, AnomalyKind.PARSE_FAILURE, parsed.reason))
        elif parsed and not any(_grounded(a, idents) for a in parsed):
            rs.anomalies.append(Anomaly(i, AnomalyKind.HALLUCINATION_SUSPECT, "no reported api occurs in the unit"))
    if not rs.analyzed:
        log.warning("%s: no usable response among %d queries; unit unanalyzed", unit.path, k)
    return rs


def _order(alert: Alert) -> tuple:
    span = alert.line_span
    return (alert.unit_path, span is not None, span or (0, 0), alert.category.value, normalize_api(alert.api))


def aggregate(rs: ResponseSet, granularity: int = 1) -> list[Alert]:
    """Union the parsed alert lists, deduplicated by signature.

    supportCount is the number of distinct queries reporting a signature; the
    wording comes from the lowest-index query that reported it.
    """
    first: dict[SignatureKey, Alert] = {}
    support: dict[SignatureKey, set[int]] = {}
    for i, alerts in rs.alert_lists().items():
        for a in alerts:
            sig = alert_signature(a, granularity)
            first.setdefault(sig, a)
            support.setdefault(sig, set()).add(i)
    merged = [replace(first[s], support_count=len(support[s])) for s in first]
    return sorted(merged, key=_order)


@dataclass(frozen=True)
class Verdict:
    category: MisuseCategory
    api: str
    line_span: tuple[int, int] | None
    keep: bool
    justification: str = ""


_KEEP = {"keep", "kept", "tp", "true positive", "true", "valid", "confirmed"}
_DROP = {"drop", "dropped", "fp", "false positive", "false", "invalid", "reject", "rejected", "remove"}


def parse_verdicts(text: str) -> list[Verdict] | None:
    items = extract_json_array(text)
    if items is None:
        return None
    verdicts = []
    for obj in items:
        if not isinstance(obj, dict):
            continue
        label, api = _text(_field(obj, "category")), _text(_field(obj, "api"))
        raw = obj.get("verdict", obj.get("decision"))
        if isinstance(raw, bool):
            keep = raw
        elif isinstance(raw, str) and raw.strip().casefold() in _KEEP | _DROP:
            keep = raw.strip().casefold() in _KEEP
        else:
            keep = None
        if label is None or api is None or keep is None:
            log.debug("ignoring malformed verdict %r", obj)
            continue
        verdicts.append(
            Verdict(
                canonical_category(label),
                api,
                parse_line_span(_field(obj, "line")),
                keep,
                _text(obj.get("justification") or obj.get("reason")) or "",
            )
        )
    return verdicts


def _verdict_key(v: Verdict, unit_path: str, granularity: int) -> SignatureKey:
    bucket = -1 if v.line_span is None else (v.line_span[0] // granularity) * granularity
    return SignatureKey(v.category.value, unit_path, normalize_api(v.api), bucket)


def validate(
    unit: SourceUnit,
    candidates: Sequence[Alert],
    rs: ResponseSet,
    gateway: Gateway,
    templates: PromptTemplates | None = None,
    granularity: int = 1,
) -> FinalReport:
    """Run the validation round and settle every candidate as kept or dropped.

    Fails open: a failed or unparseable validation keeps all candidates and
    records a ValidationUnavailable anomaly. Candidates the verdict omits are
    kept and flagged as VerdictOmitted.
    """
    setting = rs.setting
    anomalies = list(rs.anomalies)
    if not setting.validation:
        return FinalReport(unit.path, setting, tuple(candidates), _sorted(anomalies), None, rs.analyzed)
    if not rs.analyzed:
        return FinalReport(unit.path, setting, (), _sorted(anomalies), None, False)

    prior = [r.text for r in sorted(rs.responses, key=lambda r: r.query_index) if r.status is ResponseStatus.OK]
    bundle = build_validation_prompt(unit, prior, templates)
    response: RawResponse | None
    try:
        response = gateway.complete(bundle, 0)
    except ContextExceeded as exc:
        response = None
        reason = str(exc)
    verdicts = None
    if response is not None:
        if response.status is ResponseStatus.OK:
            verdicts = parse_verdicts(response.text)
            reason = "validation response has no verdict array"
        else:
            reason = f"validation query {response.status.value}" + (f": {response.error}" if response.error else "")
    if verdicts is None:
        anomalies.append(Anomaly(None, AnomalyKind.VALIDATION_UNAVAILABLE, reason))
        kept = tuple(a.with_status(AlertStatus.VALIDATED_KEPT) for a in candidates)
        return FinalReport(
            unit.path, setting, kept, _sorted(anomalies), response.text if response else None, True
        )

    by_sig: dict[SignatureKey, list[Verdict]] = {}
    for v in verdicts:
        by_sig.setdefault(_verdict_key(v, unit.path, granularity), []).append(v)
    loose: dict[tuple[str, str], list[Verdict]] = {}
    for v in verdicts:
        loose.setdefault((v.category.value, normalize_api(v.api)), []).append(v)
    loose_count: dict[tuple[str, str], int] = {}
    for c in candidates:
        key = (c.category.value, normalize_api(c.api))
        loose_count[key] = loose_count.get(key, 0) + 1

    settled = []
    for c in candidates:
        sig = alert_signature(c, granularity)
        matched = by_sig.get(sig)
        if not matched:
            key = (c.category.value, normalize_api(c.api))
            if loose_count[key] == 1:
                matched = loose.get(key)
        if not matched:
            log.info("%s: verdict omits %s; keeping it", unit.path, sig)
            anomalies.append(Anomaly(None, AnomalyKind.VERDICT_OMITTED, str(sig)))
            settled.append(c.with_status(AlertStatus.VALIDATED_KEPT))
            continue
        if all(not v.keep for v in matched):
            settled.append(c.with_status(AlertStatus.VALIDATED_DROPPED, matched[0].justification or None))
        else:
            why = next(v.justification for v in matched if v.keep) or None
            settled.append(c.with_status(AlertStatus.VALIDATED_KEPT, why))
    return FinalReport(unit.path, setting, tuple(settled), _sorted(anomalies), response.text, True)


def _sorted(anomalies: list[Anomaly]) -> tuple[Anomaly, ...]:
    return tuple(sorted(anomalies, key=Anomaly.sort_key))


def run_unit(
    unit: SourceUnit,
    setting: DetectionSetting,
    gateway: Gateway,
    templates: PromptTemplates | None = None,
    granularity: int = 1,
) -> FinalReport:
    rs = detect_unit(unit, setting, gateway, templates)
    candidates = aggregate(rs, granularity) if rs.analyzed else []
    return validate(unit, candidates, rs, gateway, templates, granularity)
