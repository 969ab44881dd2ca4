"""LLM-orchestrated cryptographic API misuse scanning and benchmark evaluation."""

from .model import (
    Alert,
    AlertStatus,
    DetectionSetting,
    FailurePattern,
    FailurePatternKind,
    Language,
    MisuseCategory,
    Mode,
    SemanticsSubtype,
    SignatureKey,
    SourceUnit,
    alert_signature,
    canonical_category,
)

__all__ = [
    "Alert",
    "AlertStatus",
    "DetectionSetting",
    "FailurePattern",
    "FailurePatternKind",
    "Language",
    "MisuseCategory",
    "Mode",
    "SemanticsSubtype",
    "SignatureKey",
    "SourceUnit",
    "alert_signature",
    "canonical_category",
]

__version__ = "0.1.0"
