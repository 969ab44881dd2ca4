"""Command-line entry point: scan, evaluate, triage, refine, record."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence, TextIO

import jsonschema

from . import __version__
from .bench import (
    Label,
    ManifestError,
    UnadjudicatedAlerts,
    UnresolvedConflicts,
    VerdictStore,
    compute_metrics,
    load_manifest,
    prematch,
    record_verdict,
    tally,
    tally_by,
)
from .detect import FinalReport, run_unit
from .gateway import (
    KNOWN_CONTEXT_WINDOWS,
    Gateway,
    MissingRecording,
    ModelProfile,
    ProviderKind,
    RemoteChatProvider,
    ReplayProvider,
    TranscriptStore,
    guard_context,
)
from .ingest import RelevanceConfig, ScanDiagnostic, scan_tree
from .model import DetectionSetting, Mode, SourceUnit, alert_signature
from .prompts import PromptTemplates, build_detection_prompt
from .refinery import (
    InapplicabilityRules,
    LeakLexicon,
    NeutralNamer,
    find_redundant,
    flag_inapplicable,
    sanitize,
)
from .report import ALERT_JSON_SCHEMA, emit_advisory, emit_alert_json, emit_metrics_table, emit_sarif, parse_alert_json

log = logging.getLogger("cryptoscan")

EXIT_OK = 0
EXIT_ALERTS = 1
EXIT_FAILURE = 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str = "gpt-4-turbo"
    context_window: int | None = None
    endpoint_url: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float | None = None
    max_retries: int = 3
    request_timeout: float = 120.0
    reserved_output_tokens: int = 2048
    rate_limit: float | None = None  # requests per second
    setting: str = "ta"
    validate: bool = True
    queries: int = 5
    corpus: str | None = None
    manifest: str | None = None
    replay: str | None = None
    record_store: str | None = None
    verdicts: str | None = None
    reports: str | None = None
    out: str = "cryptoscan-out"
    relevance: str | None = None
    max_unit_bytes: int | None = None
    prompts_dir: str | None = None
    leak_lexicon: str | None = None
    rules: str | None = None
    pbe_min_iterations: int | None = None
    workers: int = 4
    reviewer: str | None = None
    dry_run: bool = False
    fail_on_alert: bool = False

    def detection_setting(self) -> DetectionSetting:
        modes = {"uc": Mode.UNCONSTRAINED, "ta": Mode.TASK_AWARE}
        try:
            mode = modes[self.setting.lower()]
        except KeyError:
            raise ConfigError(f"setting must be 'uc' or 'ta', got {self.setting!r}") from None
        try:
            return DetectionSetting(mode, bool(self.validate), int(self.queries))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def profile(self) -> ModelProfile:
        window = self.context_window or KNOWN_CONTEXT_WINDOWS.get(self.model)
        if window is None:
            raise ConfigError(f"no context window known for model {self.model!r}; set context_window")
        try:
            return ModelProfile(
                model_name=self.model,
                context_window=int(window),
                provider_kind=ProviderKind.REPLAY if self.replay else ProviderKind.REMOTE,
                endpoint_url=self.endpoint_url,
                temperature=self.temperature,
                max_retries=int(self.max_retries),
                request_timeout=float(self.request_timeout),
                api_key_env=self.api_key_env or None,
                reserved_output_tokens=int(self.reserved_output_tokens),
                requests_per_second=self.rate_limit,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _coerce(value: str):
    try:
        return json.loads(value)
    except ValueError:
        return value


def load_config(path: str | Path) -> dict:
    """Read a JSON object or ``key=value`` lines into a dict of config values."""
    text = Path(path).read_text("utf-8")
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    else:
        data = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{n}: expected key=value")
            data[key.strip()] = _coerce(value.strip())
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown config key(s): {', '.join(unknown)}")
    return data


def build_config(args: argparse.Namespace) -> RunConfig:
    values = load_config(args.config) if getattr(args, "config", None) else {}
    for f in fields(RunConfig):
        cli_value = getattr(args, f.name, None)
        if cli_value is not None:
            values[f.name] = cli_value
    return RunConfig(**values)


def write_atomic(path: Path, data: bytes | str) -> None:
    payload = data.encode("utf-8") if isinstance(data, str) else data
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def setting_slug(setting: DetectionSetting) -> str:
    return ("uc" if setting.mode is Mode.UNCONSTRAINED else "ta") + ("-v" if setting.validation else "-nov")


# --- scan / record ------------------------------------------------------------------------


@dataclass
class ScanSummary:
    setting: DetectionSetting
    scanned: list[str] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    kept: int = 0
    dropped: int = 0
    unanalyzed: list[str] = field(default_factory=list)
    anomalies: Counter = field(default_factory=Counter)
    dry_run: bool = False

    def render(self) -> str:
        lines = [f"setting: {self.setting.label} (k={self.setting.query_count})"]
        verb = "units to scan" if self.dry_run else "units scanned"
        lines.append(f"{verb}: {len(self.scanned)}")
        lines.append(f"units skipped: {len(self.skipped)}")
        lines += [f"  {path}: {reason}" for path, reason in self.skipped]
        if not self.dry_run:
            lines.append(f"alerts kept: {self.kept}")
            lines.append(f"alerts dropped: {self.dropped}")
            lines.append(f"units unanalyzed: {len(self.unanalyzed)}")
            lines += [f"  {path}" for path in self.unanalyzed]
            lines.append(f"anomalies: {sum(self.anomalies.values())}")
            lines += [f"  {kind}: {n}" for kind, n in sorted(self.anomalies.items())]
        return "\n".join(lines) + "\n"


def _collect_units(cfg: RunConfig, diagnostics: list[ScanDiagnostic]) -> list[SourceUnit]:
    if cfg.manifest:
        manifest = load_manifest(cfg.manifest)
        return sorted({u.path: u for c in manifest.cases for u in c.units}.values(), key=lambda u: u.path)
    if not cfg.corpus:
        raise ConfigError("scan needs a corpus directory or --manifest")
    relevance = (
        RelevanceConfig.load(cfg.relevance, max_unit_bytes=cfg.max_unit_bytes)
        if cfg.relevance
        else RelevanceConfig(RelevanceConfig.default().markers_by_language, cfg.max_unit_bytes or 256 * 1024)
    )
    return scan_tree(cfg.corpus, relevance, diagnostics=diagnostics, workers=cfg.workers)


def _make_gateway(cfg: RunConfig, profile: ModelProfile, recorder: TranscriptStore | None) -> Gateway:
    if cfg.replay:
        if not Path(cfg.replay).is_file():
            raise ConfigError(f"replay store not found: {cfg.replay}")
        return Gateway(profile, ReplayProvider(TranscriptStore(cfg.replay)))
    if not profile.endpoint_url:
        raise ConfigError("live runs need endpoint_url (or use --replay)")
    return Gateway(profile, RemoteChatProvider(), recorder=recorder)


def run_scan(
    cfg: RunConfig,
    out: TextIO,
    recorder: TranscriptStore | None = None,
    gateway: Gateway | None = None,
) -> int:
    """Scan and write the report tree; ``gateway`` overrides the configured provider."""
    setting = cfg.detection_setting()
    profile = cfg.profile()
    templates = PromptTemplates.load(cfg.prompts_dir) if cfg.prompts_dir else None
    diagnostics: list[ScanDiagnostic] = []
    units = _collect_units(cfg, diagnostics)

    summary = ScanSummary(setting, dry_run=cfg.dry_run)
    summary.skipped += [(d.path, d.reason) for d in diagnostics]
    runnable = []
    for unit in units:
        if not unit.content.strip():
            summary.skipped.append((unit.path, "empty unit"))
            continue
        check = guard_context(build_detection_prompt(unit, setting, templates), profile)
        if check.fits:
            runnable.append(unit)
        else:
            summary.skipped.append((unit.path, str(check)))
    summary.skipped.sort()
    summary.scanned = [u.path for u in runnable]
    if cfg.dry_run:
        out.write(summary.render())
        return EXIT_OK

    if gateway is None:
        gateway = _make_gateway(cfg, profile, recorder)
    with ThreadPoolExecutor(max_workers=max(1, cfg.workers), thread_name_prefix="unit") as pool:
        reports: list[FinalReport] = list(pool.map(lambda u: run_unit(u, setting, gateway, templates), runnable))

    root = Path(cfg.out) / setting_slug(setting)
    by_path = {u.path: u for u in runnable}
    for report in reports:
        write_atomic(root / "reports" / f"{report.unit_path}.json", emit_alert_json(report))
        kept = report.kept
        summary.kept += len(kept)
        summary.dropped += len(report.dropped)
        summary.anomalies.update(a.kind.value for a in report.anomalies)
        if not report.analyzed:
            summary.unanalyzed.append(report.unit_path)
        if kept:
            unit = by_path[report.unit_path]
            text = "\n---\n\n".join(emit_advisory(a, unit) for a in kept)
            write_atomic(root / "advisories" / f"{report.unit_path}.md", text)
    write_atomic(root / "results.sarif", emit_sarif(reports))
    rendered = summary.render()
    write_atomic(root / "summary.txt", rendered)
    out.write(rendered)
    if cfg.fail_on_alert and summary.kept:
        return EXIT_ALERTS
    return EXIT_OK


def cmd_scan(cfg: RunConfig, out: TextIO) -> int:
    return run_scan(cfg, out)


def cmd_record(cfg: RunConfig, out: TextIO) -> int:
    if cfg.replay:
        raise ConfigError("record talks to the live endpoint; drop --replay")
    store_path = cfg.record_store or str(Path(cfg.out) / "transcripts.bin")
    store = TranscriptStore(store_path)
    status = run_scan(cfg, out, recorder=store)
    out.write(f"transcripts: {store_path}\n")
    return status


# --- evaluate ----------------------------------------------------------------------


def load_reports(directory: str | Path) -> list[FinalReport]:
    """All unit reports found below ``directory``; other JSON files are ignored."""
    reports = []
    for path in sorted(Path(directory).rglob("*.json")):
        try:
            doc = json.loads(path.read_text("utf-8"))
            jsonschema.validate(doc, ALERT_JSON_SCHEMA)
        except (ValueError, jsonschema.ValidationError):
            continue
        reports.append(parse_alert_json(json.dumps(doc)))
    return reports


def cmd_evaluate(cfg: RunConfig, out: TextIO) -> int:
    if not (cfg.manifest and cfg.verdicts and cfg.reports):
        raise ConfigError("evaluate needs --manifest, --verdicts and --reports")
    manifest = load_manifest(cfg.manifest)
    store = VerdictStore(cfg.verdicts)
    reports = load_reports(cfg.reports)
    settings = sorted({r.setting for r in reports}, key=lambda s: (s.mode.value, not s.validation))
    if not settings:
        out.write("no reports found\n")
        return EXIT_FAILURE
    rows, sections = [], []
    for setting in settings:
        result = tally(store, manifest, reports, setting)
        rows.append((setting.label, compute_metrics(result.counts), result.counts))
        if result.unanalyzed:
            sections.append(f"{setting.label}: {result.unanalyzed} unanalyzed case(s) excluded\n")
        for by in ("complexity", "size"):
            parts = tally_by(store, manifest, reports, by, setting)
            table = emit_metrics_table([(name, compute_metrics(t.counts), t.counts) for name, t in parts.items()])
            sections.append(f"\n{setting.label} by {by}:\n{table}")
    text = f"gtmTotal: {manifest.gtm_total()}\n" + emit_metrics_table(rows) + "".join(sections)
    out.write(text)
    write_atomic(Path(cfg.out) / "metrics.txt", text)
    return EXIT_OK


# --- triage ------------------------------------------------------------------------


def cmd_triage(cfg: RunConfig, out: TextIO, inp: TextIO, ask: Callable[[str], str] | None = None) -> int:
    """Walk unadjudicated kept alerts and record this reviewer's labels."""
    if not (cfg.manifest and cfg.verdicts and cfg.reports and cfg.reviewer):
        raise ConfigError("triage needs --manifest, --verdicts, --reports and --reviewer")
    manifest = load_manifest(cfg.manifest)
    store = VerdictStore(cfg.verdicts)
    done = {(c, s) for c, s, r in store.latest() if r == cfg.reviewer}
    queue, seen = [], set()
    for report in sorted(load_reports(cfg.reports), key=lambda r: (r.unit_path, setting_slug(r.setting))):
        case = manifest.case_for_unit(report.unit_path)
        if case is None:
            log.warning("%s is not part of the manifest; skipping", report.unit_path)
            continue
        for alert in report.kept:
            key = (case.case_id, str(alert_signature(alert)))
            if key in done or key in seen:
                continue
            seen.add(key)
            queue.append((case, alert))

    def default_ask(prompt: str) -> str:
        out.write(prompt)
        out.flush()
        line = inp.readline()
        if not line:
            raise EOFError
        return line.strip()

    ask = ask or default_ask
    units = {u.path: u for c in manifest.cases for u in c.units}
    labeled = 0
    for n, (case, alert) in enumerate(queue, 1):
        suggestion = prematch(alert, case.gtms)
        out.write(f"\n[{n}/{len(queue)}] case {case.case_id}\n")
        out.write(emit_advisory(alert, units[alert.unit_path]))
        gtms = ", ".join(f"{g.gtm_id} ({g.category.value})" for g in case.gtms) or "none"
        out.write(f"\nGTMs in case: {gtms}\n")
        hint = f" [Enter = TP({suggestion})]" if suggestion else ""
        while True:
            try:
                answer = ask(f"label TP(<gtmId>) / FP / skip / quit{hint}: ")
            except EOFError:
                out.write(f"\nstopped; {labeled} label(s) recorded\n")
                return EXIT_OK
            low = answer.lower()
            if low in ("q", "quit"):
                out.write(f"{labeled} label(s) recorded\n")
                return EXIT_OK
            if low in ("s", "skip") or (not answer and not suggestion):
                break
            try:
                if not answer:
                    label = Label.tp(suggestion)
                elif low == "fp":
                    label = Label.fp()
                elif low.startswith("tp(") or low == "tp" or low.startswith("tp "):
                    rest = answer[2:].strip().strip("()").strip()
                    label = Label.tp(rest or suggestion or "")
                else:
                    label = Label.tp(answer)
                record_verdict(alert, case, label, cfg.reviewer, store)
            except ValueError as exc:
                out.write(f"  {exc}\n")
                continue
            labeled += 1
            break
    out.write(f"\ndone; {labeled} label(s) recorded\n")
    return EXIT_OK


# --- refine -------------------------------------------------------------------------


def cmd_refine(cfg: RunConfig, out: TextIO) -> int:
    if not cfg.manifest:
        raise ConfigError("refine needs --manifest")
    manifest = load_manifest(cfg.manifest, check_leaks=False)
    lexicon = LeakLexicon.load(cfg.leak_lexicon)
    overrides = {"pbe_min_iterations": cfg.pbe_min_iterations} if cfg.pbe_min_iterations else {}
    rules = InapplicabilityRules.load(cfg.rules, **overrides)
    relevance = RelevanceConfig.load(cfg.relevance) if cfg.relevance else RelevanceConfig.default()
    namer = NeutralNamer(lexicon.prefix)
    dest = Path(cfg.out)
    corpus = dest / "corpus"

    rename_maps, flags, new_benchmarks, sanitized_cases = {}, [], [], []
    for bench in manifest.benchmarks:
        cases_json = []
        for case in bench.cases:
            flags += flag_inapplicable(case, rules, relevance)
            clean, renames = sanitize(case, lexicon, namer)
            sanitized_cases.append(clean)
            if renames:
                rename_maps[case.case_id] = renames.to_json()
            for unit in clean.units:
                write_atomic(corpus / unit.path, unit.content)
            cases_json.append(
                {
                    "caseId": clean.case_id,
                    "complexity": clean.complexity.value,
                    "units": list(clean.unit_paths),
                    "gtms": [
                        {
                            "gtmId": g.gtm_id,
                            "category": g.category.value,
                            "unitPath": g.unit_path,
                            "lineSpan": list(g.line_span) if g.line_span else None,
                            "note": g.note,
                        }
                        for g in clean.gtms
                    ],
                }
            )
        new_benchmarks.append({"name": bench.name, "source": bench.source.value, "sanitized": True, "cases": cases_json})
    flags += find_redundant(sanitized_cases)

    write_atomic(corpus / "manifest.json", json.dumps({"benchmarks": new_benchmarks}, indent=2) + "\n")
    write_atomic(dest / "rename_maps.json", json.dumps(rename_maps, indent=2, sort_keys=True) + "\n")
    flag_docs = [
        {"kind": f.kind.value, "cases": list(f.case_ids), "unit": f.unit_path, "line": f.line, "detail": f.detail}
        for f in flags
    ]
    write_atomic(dest / "flags.json", json.dumps(flag_docs, indent=2) + "\n")
    out.write(f"cases: {len(manifest.cases)}\n")
    out.write(f"renamed: {len(rename_maps)}\n")
    out.write(f"flags: {len(flags)}\n")
    for f in flags:
        where = f"{f.unit_path}:{f.line}" if f.unit_path else ",".join(f.case_ids)
        out.write(f"  {f.kind.value} {where} {f.detail}\n")
    out.write(f"sanitized manifest: {corpus / 'manifest.json'}\n")
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------------


def _bool_flag(parser: argparse.ArgumentParser, name: str, dest: str, help: str, value: bool = True) -> None:
    parser.add_argument(name, dest=dest, action="store_const", const=value, default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cryptoscan", description="LLM-assisted crypto API misuse scanner.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or key=value config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--manifest", help="benchmark manifest (JSON)")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model")
    model.add_argument("--context-window", dest="context_window", type=int)
    model.add_argument("--endpoint-url", dest="endpoint_url")
    model.add_argument("--setting", choices=["uc", "ta"])
    _bool_flag(model, "--no-validate", "validate", "skip the validation round", value=False)
    model.add_argument("--queries", type=int, help="detection queries per unit")
    model.add_argument("--workers", type=int, help="units processed in parallel")
    model.add_argument("--rate-limit", dest="rate_limit", type=float, help="requests per second")
    model.add_argument("--relevance", help="extra import-prefix markers file")
    model.add_argument("--prompts-dir", dest="prompts_dir")

    sub = parser.add_subparsers(dest="command", required=True)
    scan = sub.add_parser("scan", parents=[common, model], help="scan a source tree or benchmark")
    scan.add_argument("corpus", nargs="?")
    scan.add_argument("--replay", help="serve completions from a transcript store")
    _bool_flag(scan, "--dry-run", "dry_run", "ingest and check context only")
    _bool_flag(scan, "--fail-on-alert", "fail_on_alert", "exit 1 when any alert is kept")

    record = sub.add_parser("record", parents=[common, model], help="scan live and record transcripts")
    record.add_argument("corpus", nargs="?")
    record.add_argument("--store", dest="record_store")

    evaluate = sub.add_parser("evaluate", parents=[common], help="compute metrics from verdicts")
    evaluate.add_argument("--verdicts")
    evaluate.add_argument("--reports")

    triage = sub.add_parser("triage", parents=[common], help="label kept alerts TP/FP")
    triage.add_argument("--verdicts")
    triage.add_argument("--reports")
    triage.add_argument("--reviewer")

    refine = sub.add_parser("refine", parents=[common], help="sanitize a benchmark and flag inapplicable cases")
    refine.add_argument("--leak-lexicon", dest="leak_lexicon")
    refine.add_argument("--rules")
    refine.add_argument("--pbe-min-iterations", dest="pbe_min_iterations", type=int)
    refine.add_argument("--relevance")
    return parser


def main(argv: Sequence[str] | None = None, stdout: TextIO | None = None, stdin: TextIO | None = None) -> int:
    out = stdout or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        if args.command == "scan":
            return cmd_scan(cfg, out)
        if args.command == "record":
            return cmd_record(cfg, out)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out)
        if args.command == "triage":
            return cmd_triage(cfg, out, stdin or sys.stdin)
        return cmd_refine(cfg, out)
    except UnresolvedConflicts as exc:
        print(f"error: {exc}", file=sys.stderr)
        for c in exc.conflicts:
            print(f"  {c.case_id} {c.alert_signature}: {c.labels}", file=sys.stderr)
        return EXIT_FAILURE
    except UnadjudicatedAlerts as exc:
        print(f"error: {exc}; run triage first", file=sys.stderr)
        return EXIT_FAILURE
    except MissingRecording as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (ConfigError, ManifestError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
