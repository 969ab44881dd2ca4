"""Domain types shared across the scanner, the harness and the refinery.

Everything here is an immutable value. Alerts move through the validation
lattice by producing new instances (``Alert.with_status``), never by mutation.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable


class MisuseCategory(str, Enum):
    BROKEN_ALGORITHM = "BrokenAlgorithm"
    IMPROPER_CERT_VALIDATION = "ImproperCertValidation"
    INSUFFICIENT_RANDOMNESS = "InsufficientRandomness"
    INADEQUATE_STRENGTH = "InadequateStrength"
    HARDCODED_CREDENTIALS = "HardcodedCredentials"
    LESS_SECURE_NEGOTIATION = "LessSecureNegotiation"
    OUT_OF_TAXONOMY = "OutOfTaxonomy"

    @property
    def display_name(self) -> str:
        return _DISPLAY_NAMES[self]

    @property
    def description(self) -> str:
        return _DESCRIPTIONS[self]

    @property
    def in_taxonomy(self) -> bool:
        return self is not MisuseCategory.OUT_OF_TAXONOMY

    @classmethod
    def taxonomy(cls) -> tuple[MisuseCategory, ...]:
        """The six in-taxonomy categories, in presentation order."""
        return tuple(c for c in cls if c.in_taxonomy)


_DISPLAY_NAMES = {
    MisuseCategory.BROKEN_ALGORITHM: "Use of a Broken or Risky Cryptographic Algorithm",
    MisuseCategory.IMPROPER_CERT_VALIDATION: "Improper Certificate Validation",
    MisuseCategory.INSUFFICIENT_RANDOMNESS: "Use of Insufficiently Random Values",
    MisuseCategory.INADEQUATE_STRENGTH: "Inadequate Encryption Strength",
    MisuseCategory.HARDCODED_CREDENTIALS: "Use of Hardcoded Credentials",
    MisuseCategory.LESS_SECURE_NEGOTIATION: "Selection of Less-Secure Algorithm During Negotiation",
    MisuseCategory.OUT_OF_TAXONOMY: "Out of Taxonomy",
}

_DESCRIPTIONS = {
    MisuseCategory.BROKEN_ALGORITHM: (
        "The code selects a cipher, hash or mode that is known to be broken or "
        "too weak for security use, such as DES, RC4, MD5, SHA-1 for signatures, "
        "or block ciphers in ECB mode."
    ),
    MisuseCategory.IMPROPER_CERT_VALIDATION: (
        "The code accepts TLS peers without properly checking their certificate "
        "chain or host name, for example trust managers that accept every "
        "certificate or host name verifiers that always return true."
    ),
    MisuseCategory.INSUFFICIENT_RANDOMNESS: (
        "Security-relevant values (keys, IVs, salts, nonces, tokens) come from a "
        "predictable source such as a non-cryptographic PRNG or a fixed or "
        "guessable seed."
    ),
    MisuseCategory.INADEQUATE_STRENGTH: (
        "A sound algorithm is configured with parameters that weaken it: short "
        "keys, constant IVs or salts, or key derivation with too few iterations."
    ),
    MisuseCategory.HARDCODED_CREDENTIALS: (
        "Keys, passwords or other secrets are embedded as constants in the "
        "source code instead of being supplied at runtime from a protected store."
    ),
    MisuseCategory.LESS_SECURE_NEGOTIATION: (
        "The code enables or prefers an outdated protocol or cipher suite during "
        "connection setup (for example SSLv3, TLS 1.0 or plain HTTP), allowing "
        "a downgrade to weaker security."
    ),
    MisuseCategory.OUT_OF_TAXONOMY: "A reported weakness outside the six categories above.",
}


class Mode(str, Enum):
    UNCONSTRAINED = "Unconstrained"
    TASK_AWARE = "TaskAware"


@dataclass(frozen=True)
class DetectionSetting:
    mode: Mode = Mode.TASK_AWARE
    validation: bool = True
    query_count: int = 5

    def __post_init__(self) -> None:
        if self.query_count < 1:
            raise ValueError(f"query_count must be >= 1, got {self.query_count}")

    @property
    def label(self) -> str:
        """Short label in the UC/TA x w/oV/w/V grid, e.g. ``TA w/V``."""
        mode = "UC" if self.mode is Mode.UNCONSTRAINED else "TA"
        return f"{mode} {'w/V' if self.validation else 'w/oV'}"

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "validation": self.validation, "queryCount": self.query_count}

    @classmethod
    def from_dict(cls, d: dict) -> DetectionSetting:
        return cls(Mode(d["mode"]), bool(d["validation"]), int(d["queryCount"]))


class Language(str, Enum):
    JAVA = "Java"
    PYTHON = "Python"
    OTHER = "Other"


def estimate_text_tokens(text: str) -> int:
    # ~4 characters per token, rounded up.
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class SourceUnit:
    path: str
    language: Language
    content: str
    byte_size: int
    token_estimate: int
    crypto_markers: tuple[str, ...] = ()

    @classmethod
    def from_text(
        cls,
        path: str,
        content: str,
        language: Language | None = None,
        crypto_markers: Iterable[str] = (),
    ) -> SourceUnit:
        return cls(
            path=path,
            language=language or language_for_path(path),
            content=content,
            byte_size=len(content.encode("utf-8")),
            token_estimate=estimate_text_tokens(content),
            crypto_markers=tuple(crypto_markers),
        )


_EXTENSIONS = {
    ".java": Language.JAVA,
    ".py": Language.PYTHON,
    ".kt": Language.OTHER,
    ".kts": Language.OTHER,
    ".scala": Language.OTHER,
    ".groovy": Language.OTHER,
}


def language_for_path(path: str | Path) -> Language:
    return _EXTENSIONS.get(Path(path).suffix.lower(), Language.OTHER)


def is_source_path(path: str | Path) -> bool:
    return Path(path).suffix.lower() in _EXTENSIONS


class AlertStatus(str, Enum):
    CANDIDATE = "Candidate"
    VALIDATED_KEPT = "ValidatedKept"
    VALIDATED_DROPPED = "ValidatedDropped"


LineSpan = tuple[int, int]


@dataclass(frozen=True)
class Alert:
    category: MisuseCategory
    unit_path: str
    api: str
    root_cause: str
    recommendation: str = ""
    line_span: LineSpan | None = None
    support_count: int = 1
    origin_setting: DetectionSetting = field(default_factory=DetectionSetting)
    status: AlertStatus = AlertStatus.CANDIDATE
    raw_category: str = ""
    justification: str | None = None

    def __post_init__(self) -> None:
        if not 1 <= self.support_count <= self.origin_setting.query_count:
            raise ValueError(
                f"support_count {self.support_count} outside 1..{self.origin_setting.query_count}"
            )
        if self.line_span is not None and self.line_span[0] > self.line_span[1]:
            raise ValueError(f"inverted line span {self.line_span}")

    def with_status(self, status: AlertStatus, justification: str | None = None) -> Alert:
        if self.status is not AlertStatus.CANDIDATE:
            raise ValueError(f"alert already finalized as {self.status.value}")
        if status is AlertStatus.CANDIDATE:
            raise ValueError("cannot move an alert back to Candidate")
        return replace(self, status=status, justification=justification)

    @property
    def start_line(self) -> int | None:
        return self.line_span[0] if self.line_span else None


@dataclass(frozen=True, order=True)
class SignatureKey:
    category: str
    unit_path: str
    api: str
    line_bucket: int  # -1 means unit-level (no line span)

    def __str__(self) -> str:
        line = "*" if self.line_bucket < 0 else str(self.line_bucket)
        return f"{self.category}|{self.unit_path}|{line}|{self.api}"

    @classmethod
    def parse(cls, text: str) -> SignatureKey:
        category, unit_path, line, api = text.split("|", 3)
        return cls(category, unit_path, api, -1 if line == "*" else int(line))


def normalize_api(api: str) -> str:
    return " ".join(api.split()).strip("`'\" ").casefold()


def alert_signature(alert: Alert, granularity: int = 1) -> SignatureKey:
    """Identity used to deduplicate alerts across queries.

    Only category, unit, case-folded api text and the bucketed start line take
    part; root cause and recommendation wording are ignored.
    """
    if granularity < 1:
        raise ValueError("granularity must be >= 1")
    if alert.line_span is None:
        bucket = -1
    else:
        bucket = (alert.line_span[0] // granularity) * granularity
    return SignatureKey(alert.category.value, alert.unit_path, normalize_api(alert.api), bucket)


class FailurePatternKind(str, Enum):
    ERRONEOUS_CRYPTO_KNOWLEDGE = "ErroneousCryptoKnowledge"
    CODE_SEMANTICS_MISUNDERSTANDING = "CodeSemanticsMisunderstanding"
    HALLUCINATION_OR_DOS = "HallucinationOrDoS"


class SemanticsSubtype(str, Enum):
    SECURE_IMPLEMENTATION_OVERSIGHT = "SecureImplementationOversight"
    VARIABLE_MISINTERPRETATION = "VariableMisinterpretation"
    CONTEXT_INAPPROPRIATE = "ContextInappropriate"
    CONTEXTUAL_BLIND_SPOT = "ContextualBlindSpot"
    PATH_INSENSITIVE = "PathInsensitive"


@dataclass(frozen=True)
class FailurePattern:
    pattern: FailurePatternKind
    sub: SemanticsSubtype | None = None

    def __post_init__(self) -> None:
        if self.sub is not None and self.pattern is not FailurePatternKind.CODE_SEMANTICS_MISUNDERSTANDING:
            raise ValueError("a subtype is only allowed for CodeSemanticsMisunderstanding")


# --- category lexicon -------------------------------------------------------


@dataclass(frozen=True)
class TaxonomyLexicon:
    entries: tuple[tuple[MisuseCategory, str], ...]

    @classmethod
    def parse(cls, text: str) -> TaxonomyLexicon:
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                tag, keyword = line.split("\t", 1)
                category = MisuseCategory(tag.strip())
            except ValueError:
                raise ValueError(f"lexicon line {lineno}: expected '<CategoryTag>\\t<keyword>'") from None
            if not keyword.strip():
                raise ValueError(f"lexicon line {lineno}: empty keyword")
            entries.append((category, keyword.strip().casefold()))
        return cls(tuple(entries))

    @classmethod
    def load(cls, path: str | Path | None = None) -> TaxonomyLexicon:
        if path is None:
            text = resources.files("cryptoscan.data").joinpath("taxonomy_lexicon.tsv").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        return cls.parse(text)

    def matches(self, label: str) -> dict[MisuseCategory, list[str]]:
        folded = label.casefold()
        hits: dict[MisuseCategory, list[str]] = {}
        for category, keyword in self.entries:
            if _keyword_pattern(keyword).search(folded):
                hits.setdefault(category, []).append(keyword)
        return hits


_PATTERN_CACHE: dict[str, re.Pattern[str]] = {}


def _keyword_pattern(keyword: str) -> re.Pattern[str]:
    pat = _PATTERN_CACHE.get(keyword)
    if pat is None:
        pat = re.compile(r"(?<![a-z0-9])" + re.escape(keyword) + r"(?![a-z0-9])")
        _PATTERN_CACHE[keyword] = pat
    return pat


_DEFAULT_LEXICON: TaxonomyLexicon | None = None


def default_lexicon() -> TaxonomyLexicon:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = TaxonomyLexicon.load()
    return _DEFAULT_LEXICON


def canonical_category(label: str, lexicon: TaxonomyLexicon | None = None) -> MisuseCategory:
    """Map a model-emitted category label onto the taxonomy.

    Exact tags and display names win, then a contained display name, then the
    keyword lexicon (most distinct keyword hits, ties to the longest keyword,
    then taxonomy order). Anything unmatched is OutOfTaxonomy.
    """
    if not label:
        raise ValueError("category label must be nonempty")
    folded = " ".join(label.split()).casefold()
    for category in MisuseCategory:
        if folded in (category.value.casefold(), category.display_name.casefold()):
            return category
    for category in MisuseCategory.taxonomy():
        if category.display_name.casefold() in folded:
            return category
    hits = (lexicon or default_lexicon()).matches(folded)
    if not hits:
        return MisuseCategory.OUT_OF_TAXONOMY
    order = list(MisuseCategory)
    return min(
        hits,
        key=lambda c: (-len(set(hits[c])), -max(len(k) for k in hits[c]), order.index(c)),
    )
