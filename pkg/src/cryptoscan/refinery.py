"""Benchmark refinement: leaking-name repair and inapplicable-case flags."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from itertools import count
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .bench import BenchmarkCase
from .ingest import RelevanceConfig, is_crypto_relevant
from .lexing import mask_non_code, tokenize
from .model import Language, SourceUnit

_WORD = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|\d+")


def split_words(identifier: str) -> list[str]:
    """camelCase / PascalCase / snake_case words, case-folded."""
    return [w.casefold() for w in _WORD.findall(identifier)]


def _contains(words: Sequence[str], sub: Sequence[str]) -> bool:
    n = len(sub)
    return n > 0 and any(list(words[i : i + n]) == list(sub) for i in range(len(words) - n + 1))


@dataclass(frozen=True)
class LeakLexicon:
    terms: tuple[str, ...]
    prefix: str = "CaseA"

    def __post_init__(self) -> None:
        for t in self.terms:
            if not split_words(t):
                raise ValueError(f"lexicon term {t!r} has no words")
        if self.find(self.prefix + "001"):
            raise ValueError(f"naming prefix {self.prefix!r} itself matches the lexicon")

    @classmethod
    def parse(cls, text: str, prefix: str = "CaseA") -> LeakLexicon:
        terms = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        return cls(tuple(dict.fromkeys(terms)), prefix)

    @classmethod
    def load(cls, path: str | Path | None = None, prefix: str = "CaseA") -> LeakLexicon:
        if path is None:
            text = resources.files("cryptoscan.data").joinpath("leak_lexicon.txt").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        return cls.parse(text, prefix)

    def find(self, identifier: str) -> list[str]:
        """Terms occurring in ``identifier`` as whole word runs."""
        words = split_words(identifier)
        return [t for t in self.terms if _contains(words, split_words(t))]


_DEFAULT_LEAKS: LeakLexicon | None = None


def default_leak_lexicon() -> LeakLexicon:
    global _DEFAULT_LEAKS
    if _DEFAULT_LEAKS is None:
        _DEFAULT_LEAKS = LeakLexicon.load()
    return _DEFAULT_LEAKS


@dataclass(frozen=True)
class Location:
    unit_path: str | None  # None: the case id
    line: int | None = None  # None with a unit_path: the file name itself
    column: int | None = None

    def __str__(self) -> str:
        if self.unit_path is None:
            return "(case id)"
        if self.line is None:
            return f"{self.unit_path} (file name)"
        return f"{self.unit_path}:{self.line}:{self.column}"


@dataclass(frozen=True)
class Leak:
    identifier: str
    term: str
    location: Location


_JVM_DECL = re.compile(r"\b(?:class|interface|enum|record|object|trait)\s+([A-Za-z_$][\w$]*)")
_PY_DECL = re.compile(r"^(?:async\s+def|def|class)\s+([A-Za-z_]\w*)", re.M)


def declared_names(unit: SourceUnit) -> Iterator[tuple[str, int, int]]:
    """Declared type names (and Python top-level defs) with 1-based line/column."""
    code = mask_non_code(unit.content, unit.language)
    pattern = _PY_DECL if unit.language is Language.PYTHON else _JVM_DECL
    for m in pattern.finditer(code):
        start = m.start(1)
        line = code.count("\n", 0, start) + 1
        column = start - (code.rfind("\n", 0, start) + 1) + 1
        yield m.group(1), line, column


def detect_leakage(case: BenchmarkCase, lexicon: LeakLexicon | None = None) -> list[Leak]:
    lexicon = lexicon or default_leak_lexicon()
    leaks = [Leak(case.case_id, term, Location(None)) for term in lexicon.find(case.case_id)]
    for unit in case.units:
        stem = Path(unit.path).stem
        for term in lexicon.find(stem):
            leaks.append(Leak(stem, term, Location(unit.path)))
        for name, line, col in declared_names(unit):
            for term in lexicon.find(name):
                leaks.append(Leak(name, term, Location(unit.path, line, col)))
    return leaks


class RenameCollision(ValueError):
    def __init__(self, name: str, detail: str):
        super().__init__(f"rename collision on {name!r}: {detail}")
        self.name = name


class NeutralNamer:
    """Hands out ``<prefix>001``, ``<prefix>002``, ... ; share one across cases."""

    def __init__(self, prefix: str = "CaseA", start: int = 1, width: int = 3):
        self.prefix = prefix
        self.width = width
        self._counter = count(start)

    def __call__(self) -> str:
        return f"{self.prefix}{next(self._counter):0{self.width}d}"


@dataclass(frozen=True)
class RenameMap:
    identifiers: Mapping[str, str] = field(default_factory=dict)
    files: Mapping[str, str] = field(default_factory=dict)
    case_id: tuple[str, str] | None = None  # (old, new)

    def __bool__(self) -> bool:
        return bool(self.identifiers or self.files or self.case_id)

    def to_json(self) -> dict:
        return {
            "caseId": list(self.case_id) if self.case_id else None,
            "identifiers": dict(self.identifiers),
            "files": dict(self.files),
        }


def _identifiers(unit: SourceUnit) -> set[str]:
    return {t.text for t in tokenize(unit.content, unit.language) if t.kind == "ident"}


def rename_identifiers(unit: SourceUnit, mapping: Mapping[str, str]) -> str:
    """Rewrite identifier tokens only; every other byte is copied through."""
    return "".join(
        mapping.get(t.text, t.text) if t.kind == "ident" else t.text for t in tokenize(unit.content, unit.language)
    )


def sanitize(
    case: BenchmarkCase,
    lexicon: LeakLexicon | None = None,
    namer: NeutralNamer | None = None,
    overrides: Mapping[str, str] | None = None,
) -> tuple[BenchmarkCase, RenameMap]:
    """Rename every leaking declared name and file consistently across the case.

    ``overrides`` pins specific new names. A case without leaks comes back
    unchanged with an empty map, so sanitizing twice equals sanitizing once.
    """
    lexicon = lexicon or default_leak_lexicon()
    namer = namer or NeutralNamer(lexicon.prefix)
    overrides = dict(overrides or {})
    leaks = detect_leakage(case, lexicon)
    if not leaks:
        return case, RenameMap()

    existing = set().union(*(_identifiers(u) for u in case.units))
    existing_stems = {Path(u.path).stem for u in case.units}
    mapping: dict[str, str] = {}
    for leak in leaks:
        old = leak.identifier
        if old in mapping:
            continue
        new = overrides.get(old) or namer()
        if new in existing or new in existing_stems:
            raise RenameCollision(new, f"already present in case {case.case_id}")
        if new in mapping.values():
            clash = next(k for k, v in mapping.items() if v == new)
            raise RenameCollision(new, f"both {clash!r} and {old!r} would take this name")
        if lexicon.find(new):
            raise RenameCollision(new, "replacement name itself leaks")
        mapping[old] = new

    files: dict[str, str] = {}
    units = []
    for unit in case.units:
        path = Path(unit.path)
        new_path = unit.path
        if path.stem in mapping:
            new_path = path.with_name(mapping[path.stem] + path.suffix).as_posix()
            files[unit.path] = new_path
        text = rename_identifiers(unit, mapping)
        units.append(SourceUnit.from_text(new_path, text, unit.language, unit.crypto_markers))
    ids = {k: v for k, v in mapping.items() if k in existing}

    for unit in units:
        dangling = _identifiers(unit) & ids.keys()
        if dangling:
            raise RuntimeError(f"{unit.path}: identifiers survived renaming: {sorted(dangling)}")
    gtms = tuple(replace(g, unit_path=files.get(g.unit_path, g.unit_path)) for g in case.gtms)
    new_id = mapping.get(case.case_id, case.case_id)
    renamed_case = (case.case_id, new_id) if new_id != case.case_id else None
    return (
        replace(case, case_id=new_id, units=tuple(units), gtms=gtms),
        RenameMap(ids, files, renamed_case),
    )


# --- inapplicability --------------------------------------------------------------------


class InapplicabilityKind(str, Enum):
    CONTEXT_INSENSITIVE = "ContextInsensitive"
    OBSOLETE = "Obsolete"
    REDUNDANT = "Redundant"


DEFAULT_PBE_MIN_ITERATIONS = 10_000


@dataclass(frozen=True)
class InapplicabilityRules:
    pbe_min_iterations: int = DEFAULT_PBE_MIN_ITERATIONS
    prng_patterns: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.pbe_min_iterations <= 0:
            raise ValueError("pbe_min_iterations must be positive")
        for p in self.prng_patterns:
            re.compile(p)

    @classmethod
    def parse(cls, text: str) -> InapplicabilityRules:
        threshold, patterns = DEFAULT_PBE_MIN_ITERATIONS, []
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"rules line {n}: expected key=value")
            key, value = key.strip(), value.strip()
            if key == "pbe_min_iterations":
                threshold = int(value)
            elif key == "prng_pattern":
                patterns.append(value)
            else:
                raise ValueError(f"rules line {n}: unknown key {key!r}")
        return cls(threshold, tuple(patterns))

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides) -> InapplicabilityRules:
        if path is None:
            text = resources.files("cryptoscan.data").joinpath("inapplicability_rules.txt").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        return replace(cls.parse(text), **overrides)


@dataclass(frozen=True)
class InapplicabilityFlag:
    kind: InapplicabilityKind
    case_ids: tuple[str, ...]
    unit_path: str | None = None
    line: int | None = None
    detail: str = ""


# Constructor / function -> (positional index of the iteration count, keyword names)
PBE_ITERATION_ARGS: dict[str, tuple[int, tuple[str, ...]]] = {
    "PBEParameterSpec": (1, ()),
    "PBEKeySpec": (2, ()),
    "pbkdf2_hmac": (3, ("iterations",)),
    "PBKDF2HMAC": (99, ("iterations",)),
    "PBKDF2": (3, ("count", "iterations")),
}

_CALL = re.compile(r"\b(" + "|".join(PBE_ITERATION_ARGS) + r")\s*\(")
_INT = re.compile(r"^\d[\d_]*[lL]?$")


def _call_args(code: str, open_paren: int) -> list[str]:
    depth, start, args = 0, open_paren + 1, []
    for i in range(open_paren, len(code)):
        ch = code[i]
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
            if depth == 0:
                args.append(code[start:i])
                break
        elif ch == "," and depth == 1:
            args.append(code[start:i])
            start = i + 1
    # Masked string literals leave blank arguments; keep them so positions hold.
    args = [a.strip() for a in args]
    return [] if args == [""] else args


def _int_literal(text: str) -> int | None:
    text = text.strip()
    return int(text.rstrip("lL").replace("_", "")) if _INT.match(text) else None


def _resolve(expr: str, code: str, before: int) -> int | None:
    value = _int_literal(expr)
    if value is not None or not re.fullmatch(r"[A-Za-z_$][\w$]*", expr):
        return value
    assigns = list(re.finditer(r"\b" + re.escape(expr) + r"\s*=(?!=)\s*([\w]+)\s*[;\n,)]", code))
    earlier = [m for m in assigns if m.start() < before]
    for m in reversed(earlier or assigns):
        value = _int_literal(m.group(1))
        if value is not None:
            return value
    return None


def pbe_iteration_counts(unit: SourceUnit) -> list[tuple[str, int, int]]:
    """(API, resolved iteration count, line) for each PBE call whose count is known."""
    code = mask_non_code(unit.content, unit.language)
    found = []
    for m in _CALL.finditer(code):
        api = m.group(1)
        position, keywords = PBE_ITERATION_ARGS[api]
        args = _call_args(code, m.end() - 1)
        expr = None
        for a in args:
            key, sep, val = a.partition("=")
            if sep and key.strip() in keywords and not val.startswith("="):
                expr = val
                break
        if expr is None and position < len(args) and "=" not in args[position]:
            expr = args[position]
        if expr is None:
            continue
        value = _resolve(expr, code, m.start())
        if value is not None:
            found.append((api, value, code.count("\n", 0, m.start()) + 1))
    return found


def flag_inapplicable(
    case: BenchmarkCase,
    rules: InapplicabilityRules | None = None,
    relevance: RelevanceConfig | None = None,
) -> list[InapplicabilityFlag]:
    """Advisory ContextInsensitive and Obsolete flags for one case (never mutates it)."""
    rules = rules or InapplicabilityRules.load()
    relevance = relevance or RelevanceConfig.default()
    prng = [re.compile(p) for p in rules.prng_patterns]
    flags = []
    for unit in case.units:
        code = mask_non_code(unit.content, unit.language)
        relevant, _ = is_crypto_relevant(unit, relevance)
        if not relevant:
            for p in prng:
                m = p.search(code)
                if m:
                    flags.append(
                        InapplicabilityFlag(
                            InapplicabilityKind.CONTEXT_INSENSITIVE,
                            (case.case_id,),
                            unit.path,
                            code.count("\n", 0, m.start()) + 1,
                            "pseudo-random use without any crypto import; confirm the value is not security-relevant",
                        )
                    )
                    break
        for api, value, line in pbe_iteration_counts(unit):
            if value < rules.pbe_min_iterations:
                flags.append(
                    InapplicabilityFlag(
                        InapplicabilityKind.OBSOLETE,
                        (case.case_id,),
                        unit.path,
                        line,
                        f"{api} iteration count {value} is below the current minimum {rules.pbe_min_iterations}",
                    )
                )
    return flags


CRYPTO_TYPES = frozenset(
    """Cipher MessageDigest Mac KeyGenerator KeyPairGenerator SecretKeySpec IvParameterSpec GCMParameterSpec
    PBEKeySpec PBEParameterSpec SecretKeyFactory KeyFactory SecureRandom Random Signature KeyStore SSLContext
    TrustManagerFactory KeyManagerFactory HttpsURLConnection SSLSocketFactory X509TrustManager HostnameVerifier
    hashlib hmac ssl random secrets AES DES DES3 ARC4 Blowfish PBKDF2 PBKDF2HMAC Fernet""".split()
)
CRYPTO_METHODS = frozenset(
    """getInstance init doFinal update digest generateKey generateKeyPair nextBytes nextInt setSeed
    sign verify load initialize wrap unwrap encrypt decrypt new pbkdf2_hmac derive create_default_context
    wrap_socket setHostnameVerifier setDefaultHostnameVerifier""".split()
)

_CALL_EXPR = re.compile(r"(?:\bnew\s+)?([A-Za-z_$][\w$]*(?:\s*\.\s*[A-Za-z_$][\w$]*)*)\s*\(")


def api_sequence(unit: SourceUnit) -> tuple[str, ...]:
    """Crypto-API calls in order, with receivers and literal arguments abstracted."""
    code = mask_non_code(unit.content, unit.language)
    seq = []
    for m in _CALL_EXPR.finditer(code):
        parts = [p.strip() for p in m.group(1).split(".")]
        is_new = m.group(0).lstrip().startswith("new")
        if is_new and parts[-1] in CRYPTO_TYPES:
            seq.append(f"new {parts[-1]}")
        elif len(parts) >= 2 and parts[-2] in CRYPTO_TYPES:
            seq.append(f"{parts[-2]}.{parts[-1]}")
        elif len(parts) >= 2 and parts[-1] in CRYPTO_METHODS:
            seq.append(f"_.{parts[-1]}")
    return tuple(seq)


def find_redundant(cases: Iterable[BenchmarkCase]) -> list[InapplicabilityFlag]:
    """Clusters of two or more cases with equal GTM categories and API sequence."""
    clusters: dict[tuple, list[str]] = {}
    for case in cases:
        cats = tuple(sorted(g.category.value for g in case.gtms))
        seq = tuple(s for u in sorted(case.units, key=lambda u: u.path) for s in api_sequence(u))
        clusters.setdefault((cats, seq), []).append(case.case_id)
    flags = []
    for (cats, seq), ids in clusters.items():
        if len(ids) > 1 and seq:
            flags.append(
                InapplicabilityFlag(
                    InapplicabilityKind.REDUNDANT,
                    tuple(sorted(ids)),
                    detail=f"{'/'.join(cats) or 'no GTM'}: {' -> '.join(seq)}",
                )
            )
    return sorted(flags, key=lambda f: f.case_ids)
