"""Corpus ingestion: crypto-relevant file selection and repository filtering."""

from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .lexing import mask_non_code
from .model import Language, SourceUnit, estimate_text_tokens, is_source_path, language_for_path

log = logging.getLogger(__name__)

DEFAULT_MAX_UNIT_BYTES = 256 * 1024


def _read_data(name: str) -> str:
    return resources.files("cryptoscan.data").joinpath(name).read_text("utf-8")


def _entries(text: str) -> Iterator[tuple[int, str]]:
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip() if not raw.lstrip().startswith("#") else ""
        if line:
            yield lineno, line


@dataclass(frozen=True)
class RelevanceConfig:
    markers_by_language: Mapping[Language, tuple[str, ...]]
    max_unit_bytes: int = DEFAULT_MAX_UNIT_BYTES

    def __post_init__(self) -> None:
        for lang, prefixes in self.markers_by_language.items():
            if any(not p for p in prefixes):
                raise ValueError(f"empty import prefix configured for {lang.value}")
        if self.max_unit_bytes <= 0:
            raise ValueError("max_unit_bytes must be positive")

    @classmethod
    def default(cls) -> RelevanceConfig:
        return cls(parse_relevance(_read_data("relevance_markers.txt")))

    @classmethod
    def load(cls, path: str | Path, *, replace_defaults: bool = False, max_unit_bytes: int | None = None) -> RelevanceConfig:
        """Extend (or, with ``replace_defaults``, replace) the shipped markers."""
        extra = parse_relevance(Path(path).read_text("utf-8"))
        merged: dict[Language, tuple[str, ...]] = {} if replace_defaults else dict(cls.default().markers_by_language)
        for lang, prefixes in extra.items():
            merged[lang] = tuple(dict.fromkeys(merged.get(lang, ()) + prefixes))
        return cls(merged, max_unit_bytes or DEFAULT_MAX_UNIT_BYTES)

    def prefixes(self, language: Language) -> tuple[str, ...]:
        return tuple(self.markers_by_language.get(language, ()))


def parse_relevance(text: str) -> dict[Language, tuple[str, ...]]:
    out: dict[Language, list[str]] = {}
    for lineno, line in _entries(text):
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise ValueError(f"relevance line {lineno}: expected '<Language>\\t<prefix>'")
        try:
            lang = Language(parts[0])
        except ValueError:
            raise ValueError(f"relevance line {lineno}: unknown language {parts[0]!r}") from None
        out.setdefault(lang, []).append(parts[1].strip())
    return {k: tuple(v) for k, v in out.items()}


# Import statements, matched line by line on comment/string-masked source.
_JAVA_IMPORT = re.compile(r"^[ \t]*import[ \t]+(?:static[ \t]+)?([\w$]+(?:[ \t]*\.[ \t]*[\w$]+)*)(?:[ \t]*\.[ \t]*\*)?[ \t]*;", re.M)
_JVM_IMPORT = re.compile(r"^[ \t]*import[ \t]+(?:static[ \t]+)?([\w$]+(?:\.[\w$`]+)*)(?:\.(?:\*|_|\{[^}\n]*\}))?", re.M)
_PY_IMPORT = re.compile(r"^[ \t]*import[ \t]+([^\n;]+)", re.M)
_PY_FROM = re.compile(r"^[ \t]*from[ \t]+([\w.]+)[ \t]+import\b", re.M)


def imported_modules(content: str, language: Language) -> list[str]:
    code = mask_non_code(content, language)
    if language is Language.JAVA:
        return [re.sub(r"\s+", "", m.group(1)) for m in _JAVA_IMPORT.finditer(code)]
    if language is Language.PYTHON:
        mods = [m.group(1) for m in _PY_FROM.finditer(code)]
        for m in _PY_IMPORT.finditer(code):
            for part in m.group(1).split(","):
                name = part.strip().split()[0] if part.strip() else ""
                if name and name not in ("(", "\\"):
                    mods.append(name.strip("()"))
        return mods
    return [m.group(1).replace("`", "") for m in _JVM_IMPORT.finditer(code)]


def _under(module: str, prefix: str) -> bool:
    return module == prefix or module.startswith(prefix + ".")


def is_crypto_relevant(unit: SourceUnit, cfg: RelevanceConfig) -> tuple[bool, list[str]]:
    """Return whether any import statement names a configured crypto prefix.

    Matched prefixes are returned in configuration order, without duplicates.
    Mentions outside import statements (comments, strings, qualified names in
    code) do not count.
    """
    modules = imported_modules(unit.content, unit.language)
    matched = [p for p in cfg.prefixes(unit.language) if any(_under(m, p) for m in modules)]
    return bool(matched), matched


def estimate_tokens(unit: SourceUnit | str) -> int:
    content = unit if isinstance(unit, str) else unit.content
    return estimate_text_tokens(content)


@dataclass(frozen=True)
class ScanDiagnostic:
    path: str
    reason: str


def _load_unit(root: Path, path: Path, cfg: RelevanceConfig) -> SourceUnit | ScanDiagnostic | None:
    rel = path.relative_to(root).as_posix()
    try:
        size = path.stat().st_size
        if size > cfg.max_unit_bytes:
            return ScanDiagnostic(rel, f"skipped: {size} bytes exceeds max_unit_bytes {cfg.max_unit_bytes}")
        content = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError:
        return ScanDiagnostic(rel, "skipped: not valid UTF-8")
    except OSError as exc:
        return ScanDiagnostic(rel, f"skipped: unreadable ({exc.strerror or exc})")
    unit = SourceUnit.from_text(rel, content, language_for_path(rel))
    relevant, markers = is_crypto_relevant(unit, cfg)
    if not relevant:
        return None
    return SourceUnit.from_text(rel, content, unit.language, markers)


def scan_tree(
    root: str | Path,
    cfg: RelevanceConfig | None = None,
    *,
    diagnostics: list[ScanDiagnostic] | None = None,
    workers: int = 4,
) -> list[SourceUnit]:
    """Collect crypto-relevant source units below ``root``, sorted by path.

    Raises OSError when ``root`` itself cannot be listed. Files that cannot be
    read are skipped and reported through ``diagnostics`` and the log.
    """
    cfg = cfg or RelevanceConfig.default()
    root = Path(root)
    if not root.is_dir():
        raise NotADirectoryError(f"scan root is not a directory: {root}")
    os.listdir(root)  # surfaces PermissionError for the root itself

    def onerror(exc: OSError) -> None:
        _note(diagnostics, ScanDiagnostic(str(exc.filename), f"skipped directory: {exc.strerror}"))

    candidates: list[Path] = []
    for dirpath, dirnames, filenames in os.walk(root, onerror=onerror):
        dirnames[:] = sorted(d for d in dirnames if not d.startswith("."))
        candidates.extend(Path(dirpath) / f for f in sorted(filenames) if is_source_path(f))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda p: _load_unit(root, p, cfg), candidates))

    units = []
    for res in results:
        if isinstance(res, ScanDiagnostic):
            _note(diagnostics, res)
        elif res is not None:
            units.append(res)
    return sorted(units, key=lambda u: u.path)


def _note(diagnostics: list[ScanDiagnostic] | None, diag: ScanDiagnostic) -> None:
    log.warning("%s: %s", diag.path, diag.reason)
    if diagnostics is not None:
        diagnostics.append(diag)


# --- repository selection ---------------------------------------------------


class ExclusionFlag(str, Enum):
    TUTORIAL = "Tutorial"
    LOCAL_ONLY = "LocalOnly"
    EXPLOIT_TOOLKIT = "ExploitToolkit"
    EXPERIMENTAL = "Experimental"


MANUAL_OVERRIDE = "ManualOverride"


@dataclass(frozen=True)
class RepoMeta:
    name: str
    star_count: int
    exclusion_flags: frozenset[ExclusionFlag] = frozenset()
    readme: str = ""
    description: str = ""

    def __post_init__(self) -> None:
        if self.star_count < 0:
            raise ValueError(f"{self.name}: negative star count")


def load_repo_meta(path: str | Path) -> list[RepoMeta]:
    """Read a JSON array of ``{name, stars, flags?, readme?, description?}``.

    ``readme`` may be inline text or a path relative to the metadata file.
    """
    path = Path(path)
    data = json.loads(path.read_text("utf-8"))
    repos = []
    for entry in data:
        readme = entry.get("readme", "")
        readme_path = path.parent / readme if readme and "\n" not in readme else None
        if readme_path is not None and readme_path.is_file():
            readme = readme_path.read_text("utf-8", errors="replace")
        repos.append(
            RepoMeta(
                name=entry["name"],
                star_count=int(entry["stars"]),
                exclusion_flags=frozenset(ExclusionFlag(f) for f in entry.get("flags", [])),
                readme=readme,
                description=entry.get("description", ""),
            )
        )
    return repos


@dataclass(frozen=True)
class ExclusionPolicy:
    keywords: Mapping[ExclusionFlag, tuple[str, ...]] = field(default_factory=dict)
    overrides: Mapping[str, bool] = field(default_factory=dict)  # repo name -> include?

    @classmethod
    def default(cls) -> ExclusionPolicy:
        return cls(parse_exclusion_keywords(_read_data("exclusion_keywords.tsv")))

    @classmethod
    def load(cls, keywords_path: str | Path | None = None, overrides_path: str | Path | None = None) -> ExclusionPolicy:
        keywords = (
            parse_exclusion_keywords(Path(keywords_path).read_text("utf-8"))
            if keywords_path
            else cls.default().keywords
        )
        overrides = parse_overrides(Path(overrides_path).read_text("utf-8")) if overrides_path else {}
        return cls(keywords, overrides)

    def heuristic_flags(self, meta: RepoMeta) -> list[ExclusionFlag]:
        haystack = " ".join((meta.name.replace("-", " ").replace("_", " "), meta.description, meta.readme)).casefold()
        found = []
        for flag in ExclusionFlag:
            for kw in self.keywords.get(flag, ()):
                if re.search(r"(?<![a-z0-9])" + re.escape(kw.casefold()) + r"(?![a-z0-9])", haystack):
                    found.append(flag)
                    break
        return found


def parse_exclusion_keywords(text: str) -> dict[ExclusionFlag, tuple[str, ...]]:
    out: dict[ExclusionFlag, list[str]] = {}
    for lineno, line in _entries(text):
        try:
            tag, kw = line.split("\t", 1)
            flag = ExclusionFlag(tag.strip())
        except ValueError:
            raise ValueError(f"exclusion line {lineno}: expected '<Flag>\\t<keyword>'") from None
        out.setdefault(flag, []).append(kw.strip())
    return {k: tuple(v) for k, v in out.items()}


def parse_overrides(text: str) -> dict[str, bool]:
    out = {}
    for lineno, line in _entries(text):
        try:
            name, verdict = line.split("\t", 1)
        except ValueError:
            raise ValueError(f"override line {lineno}: expected 'repoName\\tExclude|Include'") from None
        verdict = verdict.strip()
        if verdict not in ("Exclude", "Include"):
            raise ValueError(f"override line {lineno}: verdict must be Exclude or Include")
        out[name.strip()] = verdict == "Include"
    return out


@dataclass(frozen=True)
class RepoDecision:
    included: bool
    reason: str | None = None

    def __str__(self) -> str:
        return "Include" if self.included else f"Exclude({self.reason})"


def classify_repository(meta: RepoMeta, policy: ExclusionPolicy | None = None) -> RepoDecision:
    policy = policy or ExclusionPolicy.default()
    override = policy.overrides.get(meta.name)
    if override is True:
        return RepoDecision(True)
    flags = set(meta.exclusion_flags) | set(policy.heuristic_flags(meta))
    for flag in ExclusionFlag:
        if flag in flags:
            return RepoDecision(False, flag.value)
    if override is False:
        return RepoDecision(False, MANUAL_OVERRIDE)
    return RepoDecision(True)


def rank_and_select(
    repos: Iterable[RepoMeta], n: int, policy: ExclusionPolicy | None = None
) -> list[RepoMeta]:
    """Top ``n`` includable repositories by stars (desc), then name (asc)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    kept = [r for r in repos if classify_repository(r, policy).included]
    kept.sort(key=lambda r: (-r.star_count, r.name))
    return kept[:n]
