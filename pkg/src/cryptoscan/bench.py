"""Benchmark manifests, human adjudication records and metric computation."""

from __future__ import annotations

import json
import os
import threading
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema

from .detect import FinalReport
from .model import Alert, FailurePattern, FailurePatternKind, MisuseCategory, SemanticsSubtype, SourceUnit, alert_signature


class ManifestError(ValueError):
    pass


class Complexity(str, Enum):
    BASIC = "Basic"
    ADVANCED = "Advanced"
    MUTATION = "Mutation"


class BenchmarkSource(str, Enum):
    CRYPTO_API_BENCH = "CryptoAPIBench"
    MASC = "MASC"
    APACHE_BENCH = "ApacheBench"
    CUSTOM = "Custom"


@dataclass(frozen=True)
class GroundTruthMisuse:
    gtm_id: str
    category: MisuseCategory
    unit_path: str
    line_span: tuple[int, int] | None = None
    note: str = ""


@dataclass(frozen=True)
class BenchmarkCase:
    case_id: str
    units: tuple[SourceUnit, ...]
    gtms: tuple[GroundTruthMisuse, ...] = ()
    complexity: Complexity = Complexity.BASIC
    source: BenchmarkSource = BenchmarkSource.CUSTOM
    benchmark: str = ""

    def gtm(self, gtm_id: str) -> GroundTruthMisuse | None:
        return next((g for g in self.gtms if g.gtm_id == gtm_id), None)

    @property
    def unit_paths(self) -> tuple[str, ...]:
        return tuple(u.path for u in self.units)


@dataclass(frozen=True)
class Benchmark:
    name: str
    source: BenchmarkSource
    cases: tuple[BenchmarkCase, ...]
    sanitized: bool = True

    @property
    def gtm_total(self) -> int:
        return sum(len(c.gtms) for c in self.cases)


@dataclass(frozen=True)
class Manifest:
    root: Path
    benchmarks: tuple[Benchmark, ...] = ()

    @property
    def cases(self) -> tuple[BenchmarkCase, ...]:
        return tuple(c for b in self.benchmarks for c in b.cases)

    def gtm_total(self, benchmark: str | None = None) -> int:
        return sum(b.gtm_total for b in self.benchmarks if benchmark is None or b.name == benchmark)

    def case(self, case_id: str) -> BenchmarkCase:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    def case_for_unit(self, unit_path: str) -> BenchmarkCase | None:
        for c in self.cases:
            if unit_path in c.unit_paths:
                return c
        return None


MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["benchmarks"],
    "properties": {
        "benchmarks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "cases"],
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "source": {"enum": [s.value for s in BenchmarkSource]},
                    "sanitized": {"type": "boolean"},
                    "cases": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["caseId", "units"],
                            "properties": {
                                "caseId": {"type": "string", "minLength": 1},
                                "complexity": {"enum": [c.value for c in Complexity]},
                                "units": {"type": "array", "items": {"type": "string", "minLength": 1}, "minItems": 1},
                                "gtms": {
                                    "type": "array",
                                    "items": {
                                        "type": "object",
                                        "required": ["gtmId", "category", "unitPath"],
                                        "properties": {
                                            "gtmId": {"type": "string", "minLength": 1},
                                            "category": {"type": "string"},
                                            "unitPath": {"type": "string"},
                                            "lineSpan": {
                                                "oneOf": [
                                                    {"type": "null"},
                                                    {
                                                        "type": "array",
                                                        "items": {"type": "integer", "minimum": 1},
                                                        "minItems": 2,
                                                        "maxItems": 2,
                                                    },
                                                ]
                                            },
                                            "note": {"type": "string"},
                                        },
                                    },
                                },
                            },
                        },
                    },
                },
            },
        }
    },
}


def _gtm_category(label: str, where: str) -> MisuseCategory:
    for c in MisuseCategory:
        if label in (c.value, c.display_name):
            return c
    raise ManifestError(f"{where}: unknown category {label!r}")


def load_manifest(path: str | Path, *, check_leaks: bool = True) -> Manifest:
    """Load and check a manifest; unit paths resolve against its directory.

    Unless a benchmark sets ``"sanitized": false`` (or ``check_leaks`` is
    off), case ids and unit file names that leak category keywords are
    rejected.
    """
    from .refinery import default_leak_lexicon  # refinery builds on these types

    path = Path(path)
    try:
        data = json.loads(path.read_text("utf-8"))
    except (OSError, ValueError) as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    try:
        jsonschema.validate(data, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ManifestError(f"{path}: schema violation at {where}: {exc.message}") from None

    root = path.parent
    lexicon = default_leak_lexicon()
    benchmarks = []
    for b in data["benchmarks"]:
        sanitized = b.get("sanitized", True)
        seen_gtms: set[str] = set()
        seen_cases: set[str] = set()
        cases = []
        for c in b["cases"]:
            cid = c["caseId"]
            where = f"{b['name']}/{cid}"
            if cid in seen_cases:
                raise ManifestError(f"{where}: duplicate caseId")
            seen_cases.add(cid)
            if sanitized and check_leaks:
                names = [cid] + [Path(u).stem for u in c["units"]]
                for name in names:
                    terms = lexicon.find(name)
                    if terms:
                        raise ManifestError(
                            f"{where}: name {name!r} leaks {terms[0]!r}; sanitize the case or set sanitized=false"
                        )
            units = []
            for rel in c["units"]:
                file = root / rel
                try:
                    text = file.read_text("utf-8")
                except FileNotFoundError:
                    raise ManifestError(f"{where}: missing unit file {rel}") from None
                except (OSError, UnicodeDecodeError) as exc:
                    raise ManifestError(f"{where}: unreadable unit file {rel}: {exc}") from None
                units.append(SourceUnit.from_text(Path(rel).as_posix(), text))
            gtms = []
            for g in c.get("gtms", []):
                gid = g["gtmId"]
                if gid in seen_gtms:
                    raise ManifestError(f"{where}: duplicate gtmId {gid!r}")
                seen_gtms.add(gid)
                if g["unitPath"] not in c["units"]:
                    raise ManifestError(f"{where}: gtm {gid} names unit {g['unitPath']!r} outside the case")
                span = g.get("lineSpan")
                if span is not None and span[0] > span[1]:
                    raise ManifestError(f"{where}: gtm {gid} has inverted lineSpan")
                gtms.append(
                    GroundTruthMisuse(
                        gid,
                        _gtm_category(g["category"], f"{where}/{gid}"),
                        Path(g["unitPath"]).as_posix(),
                        tuple(span) if span else None,
                        g.get("note", ""),
                    )
                )
            cases.append(
                BenchmarkCase(
                    cid,
                    tuple(units),
                    tuple(gtms),
                    Complexity(c.get("complexity", "Basic")),
                    BenchmarkSource(b.get("source", "Custom")),
                    b["name"],
                )
            )
        benchmarks.append(Benchmark(b["name"], BenchmarkSource(b.get("source", "Custom")), tuple(cases), sanitized))
    return Manifest(root, tuple(benchmarks))


def _overlaps(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def prematch(alert: Alert, gtms: Iterable[GroundTruthMisuse]) -> str | None:
    """Suggest the single GTM this alert most plausibly hits, or None.

    Advisory only; verdict records are what count.
    """
    hits = []
    for g in gtms:
        if g.category is not alert.category or g.unit_path != alert.unit_path:
            continue
        if alert.line_span is not None and g.line_span is not None and not _overlaps(alert.line_span, g.line_span):
            continue
        hits.append(g.gtm_id)
    return hits[0] if len(hits) == 1 else None


# --- verdicts ------------------------------------------------------------------------

CONSENSUS = "consensus"


class LabelKind(str, Enum):
    TP = "TP"
    FP = "FP"


@dataclass(frozen=True)
class Label:
    kind: LabelKind
    gtm_id: str | None = None

    def __post_init__(self) -> None:
        if (self.kind is LabelKind.TP) != (self.gtm_id is not None):
            raise ValueError("a TP label needs a gtmId and an FP label must not have one")

    @classmethod
    def tp(cls, gtm_id: str) -> Label:
        return cls(LabelKind.TP, gtm_id)

    @classmethod
    def fp(cls) -> Label:
        return cls(LabelKind.FP)

    @classmethod
    def parse(cls, text: str) -> Label:
        text = text.strip()
        if text.upper() == "FP":
            return cls.fp()
        if text.upper().startswith("TP(") and text.endswith(")") and len(text) > 4:
            return cls.tp(text[3:-1].strip())
        raise ValueError(f"label must be FP or TP(<gtmId>), got {text!r}")

    def __str__(self) -> str:
        return "FP" if self.kind is LabelKind.FP else f"TP({self.gtm_id})"


@dataclass(frozen=True)
class VerdictRecord:
    alert_signature: str
    case_id: str
    label: Label
    reviewer_id: str
    timestamp: str

    def to_json(self) -> dict:
        return {
            "kind": "verdict",
            "alertSignature": self.alert_signature,
            "caseId": self.case_id,
            "label": str(self.label),
            "reviewerId": self.reviewer_id,
            "timestamp": self.timestamp,
        }


@dataclass(frozen=True)
class PatternRecord:
    alert_signature: str
    case_id: str
    pattern: FailurePattern
    reviewer_id: str
    timestamp: str

    def to_json(self) -> dict:
        return {
            "kind": "pattern",
            "alertSignature": self.alert_signature,
            "caseId": self.case_id,
            "pattern": self.pattern.pattern.value,
            "sub": self.pattern.sub.value if self.pattern.sub else None,
            "reviewerId": self.reviewer_id,
            "timestamp": self.timestamp,
        }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


class VerdictStore:
    """Append-only JSON-lines store of verdicts and failure-pattern tags.

    For each (signature, case, reviewer) the latest record by timestamp wins;
    equal timestamps resolve to the record written last.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self.records: list[VerdictRecord | PatternRecord] = []
        if self.path is not None and self.path.exists():
            for n, line in enumerate(self.path.read_text("utf-8").splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    self.records.append(_record_from_json(json.loads(line)))
                except (ValueError, KeyError) as exc:
                    raise ValueError(f"{self.path}:{n}: bad record: {exc}") from None

    def append(self, record: VerdictRecord | PatternRecord) -> None:
        with self._lock:
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record.to_json(), sort_keys=True, ensure_ascii=False) + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            self.records.append(record)

    def latest(self) -> dict[tuple[str, str, str], VerdictRecord]:
        """Effective verdict per (caseId, signature, reviewer)."""
        best: dict[tuple[str, str, str], tuple[str, int, VerdictRecord]] = {}
        for seq, r in enumerate(self.records):
            if not isinstance(r, VerdictRecord):
                continue
            key = (r.case_id, r.alert_signature, r.reviewer_id)
            if key not in best or (r.timestamp, seq) >= best[key][:2]:
                best[key] = (r.timestamp, seq, r)
        return {k: v[2] for k, v in best.items()}

    def patterns(self) -> dict[tuple[str, str], PatternRecord]:
        latest: dict[tuple[str, str], PatternRecord] = {}
        for r in self.records:
            if isinstance(r, PatternRecord):
                key = (r.case_id, r.alert_signature)
                if key not in latest or r.timestamp >= latest[key].timestamp:
                    latest[key] = r
        return latest


def _record_from_json(d: dict) -> VerdictRecord | PatternRecord:
    if d.get("kind", "verdict") == "pattern":
        sub = d.get("sub")
        return PatternRecord(
            d["alertSignature"],
            d["caseId"],
            FailurePattern(FailurePatternKind(d["pattern"]), SemanticsSubtype(sub) if sub else None),
            d["reviewerId"],
            d["timestamp"],
        )
    return VerdictRecord(d["alertSignature"], d["caseId"], Label.parse(d["label"]), d["reviewerId"], d["timestamp"])


def signature_of(alert: Alert | str) -> str:
    return alert if isinstance(alert, str) else str(alert_signature(alert))


def record_verdict(
    alert: Alert | str,
    case: BenchmarkCase,
    label: Label,
    reviewer_id: str,
    store: VerdictStore,
    timestamp: str | None = None,
) -> VerdictRecord:
    if not reviewer_id:
        raise ValueError("reviewer id must be nonempty")
    if label.kind is LabelKind.TP and case.gtm(label.gtm_id) is None:
        raise ValueError(f"case {case.case_id} has no GTM {label.gtm_id!r}")
    record = VerdictRecord(signature_of(alert), case.case_id, label, reviewer_id, timestamp or _now())
    store.append(record)
    return record


@dataclass(frozen=True)
class Conflict:
    case_id: str
    alert_signature: str
    labels: tuple[tuple[str, str], ...]  # (reviewer, label)


def cross_check(store: VerdictStore, reviewers: tuple[str, str]) -> list[Conflict]:
    """Alerts the two reviewers labeled differently and no consensus record settles."""
    latest = store.latest()
    a, b = reviewers
    conflicts = []
    keys = sorted({(c, s) for c, s, _ in latest})
    for case_id, sig in keys:
        la, lb = latest.get((case_id, sig, a)), latest.get((case_id, sig, b))
        if la is None or lb is None or la.label == lb.label:
            continue
        if (case_id, sig, CONSENSUS) in latest:
            continue
        conflicts.append(Conflict(case_id, sig, ((a, str(la.label)), (b, str(lb.label)))))
    return conflicts


class UnresolvedConflicts(RuntimeError):
    def __init__(self, conflicts: Sequence[Conflict]):
        super().__init__(f"{len(conflicts)} unresolved verdict conflict(s); record a consensus verdict first")
        self.conflicts = list(conflicts)


class UnadjudicatedAlerts(RuntimeError):
    def __init__(self, missing: Sequence[tuple[str, str]]):
        super().__init__(f"{len(missing)} kept alert(s) have no verdict yet")
        self.missing = list(missing)


def final_labels(store: VerdictStore) -> dict[tuple[str, str], Label]:
    """One label per (caseId, signature); raises when reviewers disagree unresolved."""
    per_alert: dict[tuple[str, str], dict[str, Label]] = {}
    for (case_id, sig, reviewer), r in store.latest().items():
        per_alert.setdefault((case_id, sig), {})[reviewer] = r.label
    out, conflicts = {}, []
    for key in sorted(per_alert):
        labels = per_alert[key]
        if CONSENSUS in labels:
            out[key] = labels[CONSENSUS]
            continue
        distinct = set(labels.values())
        if len(distinct) > 1:
            conflicts.append(Conflict(key[0], key[1], tuple(sorted((r, str(l)) for r, l in labels.items()))))
            continue
        out[key] = distinct.pop()
    if conflicts:
        raise UnresolvedConflicts(conflicts)
    return out


# --- counting -----------------------------------------------------------------------------


@dataclass(frozen=True)
class VerdictCounts:
    tp: int
    fp: int
    tn: int
    fn: int
    gtm_total: int

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "tn", "fn", "gtm_total"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _ratio(num: int, den: int) -> Fraction | None:
    return Fraction(num, den) if den else None


def round_half_up(value: Fraction, places: int = 2) -> Decimal:
    """Exact half-up rounding of a non-negative fraction."""
    scale = 10**places
    q = (value.numerator * scale * 2 + value.denominator) // (2 * value.denominator)
    return Decimal(q).scaleb(-places)


@dataclass(frozen=True)
class MetricsRow:
    precision: Fraction | None
    recall: Fraction | None
    accuracy: Fraction | None

    def rounded(self, places: int = 2) -> tuple[Decimal | None, Decimal | None, Decimal | None]:
        return tuple(None if v is None else round_half_up(v, places) for v in (self.precision, self.recall, self.accuracy))


def compute_metrics(c: VerdictCounts) -> MetricsRow:
    return MetricsRow(
        precision=_ratio(c.tp, c.tp + c.fp),
        recall=_ratio(c.tp, c.gtm_total),
        accuracy=_ratio(c.tp + c.tn, c.total),
    )


@dataclass(frozen=True)
class TallyResult:
    counts: VerdictCounts
    unanalyzed: int = 0
    cases: int = 0


def _reports_by_unit(reports: Iterable[FinalReport], setting) -> dict[str, FinalReport]:
    out = {}
    for r in reports:
        if setting is not None and r.setting != setting:
            continue
        out[r.unit_path] = r
    return out


def tally(
    store: VerdictStore,
    manifest: Manifest,
    reports: Iterable[FinalReport],
    setting=None,
    *,
    cases: Sequence[BenchmarkCase] | None = None,
    labels: dict[tuple[str, str], Label] | None = None,
) -> TallyResult:
    """Count TP/FP/TN/FN over analyzed cases.

    A case counts as analyzed when every one of its units has an analyzed
    report. gtmTotal is the GTM sum over all selected cases, analyzed or not.
    """
    labels = final_labels(store) if labels is None else labels
    by_unit = _reports_by_unit(reports, setting)
    selected = manifest.cases if cases is None else cases
    tp = fp = tn = fn = unanalyzed = 0
    missing: list[tuple[str, str]] = []
    for case in selected:
        unit_reports = [by_unit.get(p) for p in case.unit_paths]
        if any(r is None or not r.analyzed for r in unit_reports):
            unanalyzed += 1
            continue
        kept = [a for r in unit_reports for a in r.kept]
        hit: set[str] = set()
        for a in kept:
            label = labels.get((case.case_id, str(alert_signature(a))))
            if label is None:
                missing.append((case.case_id, str(alert_signature(a))))
            elif label.kind is LabelKind.TP:
                hit.add(label.gtm_id)
            else:
                fp += 1
        known = {g.gtm_id for g in case.gtms}
        tp += len(hit & known)
        fn += len(known - hit)
        if not case.gtms and not kept:
            tn += 1
    if missing:
        raise UnadjudicatedAlerts(sorted(set(missing)))
    gtm_total = sum(len(c.gtms) for c in selected)
    return TallyResult(VerdictCounts(tp, fp, tn, fn, gtm_total), unanalyzed, len(selected))


class SizeBucket(str, Enum):
    UP_TO_5KB = "0-5KB"
    UP_TO_10KB = "5-10KB"
    UP_TO_20KB = "10-20KB"
    OVER_20KB = ">20KB"


KB = 1024


def bucket_size(unit: SourceUnit | int) -> SizeBucket:
    """Size bucket; each edge belongs to the bucket above it."""
    size = unit if isinstance(unit, int) else unit.byte_size
    if size < 5 * KB:
        return SizeBucket.UP_TO_5KB
    if size < 10 * KB:
        return SizeBucket.UP_TO_10KB
    if size < 20 * KB:
        return SizeBucket.UP_TO_20KB
    return SizeBucket.OVER_20KB


def case_size_bucket(case: BenchmarkCase) -> SizeBucket:
    return bucket_size(max((u.byte_size for u in case.units), default=0))


def tally_by(
    store: VerdictStore,
    manifest: Manifest,
    reports: Iterable[FinalReport],
    by: str,
    setting=None,
) -> dict[str, TallyResult]:
    """Per-bucket tallies, ``by`` being ``"complexity"`` or ``"size"``."""
    if by == "complexity":
        key = lambda c: c.complexity.value  # noqa: E731
        order = [c.value for c in Complexity]
    elif by == "size":
        key = lambda c: case_size_bucket(c).value  # noqa: E731
        order = [b.value for b in SizeBucket]
    else:
        raise ValueError(f"unknown breakdown {by!r}")
    reports = list(reports)
    labels = final_labels(store)
    groups: dict[str, list[BenchmarkCase]] = {}
    for case in manifest.cases:
        groups.setdefault(key(case), []).append(case)
    return {
        name: tally(store, manifest, reports, setting, cases=groups[name], labels=labels)
        for name in order
        if name in groups
    }


# --- failure patterns ---------------------------------------------------------------


def tag_failure_pattern(
    alert: Alert | str,
    case_id: str,
    pattern: FailurePattern,
    store: VerdictStore,
    reviewer_id: str = CONSENSUS,
    timestamp: str | None = None,
) -> PatternRecord:
    sig = signature_of(alert)
    label = final_labels(store).get((case_id, sig))
    if label is None or label.kind is not LabelKind.FP:
        raise ValueError(f"{case_id} {sig}: only alerts adjudicated FP can carry a failure pattern")
    record = PatternRecord(sig, case_id, pattern, reviewer_id, timestamp or _now())
    store.append(record)
    return record


@dataclass(frozen=True)
class PatternShare:
    label: str
    count: int
    share: Fraction

    def __str__(self) -> str:
        pct = round_half_up(self.share * 100, 1)
        return f"{self.label}: {self.count} ({pct}%)"


def failure_distribution(store: VerdictStore) -> list[PatternShare]:
    """Shares of each pattern, and of each subtype, over all tagged FPs."""
    tagged = list(store.patterns().values())
    total = len(tagged)
    if not total:
        return []
    kinds = Counter(r.pattern.pattern.value for r in tagged)
    subs = Counter(f"{r.pattern.pattern.value}/{r.pattern.sub.value}" for r in tagged if r.pattern.sub)
    out = [PatternShare(k, kinds[k], Fraction(kinds[k], total)) for k in (p.value for p in FailurePatternKind) if k in kinds]
    out += [PatternShare(k, n, Fraction(n, total)) for k, n in sorted(subs.items())]
    return out


def format_distribution(shares: Sequence[PatternShare]) -> str:
    return "".join(f"{s}\n" for s in shares)
