"""Test doubles: a rule-based fake model and transcript-store builders."""

from __future__ import annotations

import json
import re
from pathlib import Path

from cryptoscan.gateway import ModelProfile, ResponseStatus, TranscriptStore, classify_text
from cryptoscan.jsonextract import extract_json_array
from cryptoscan.model import DetectionSetting, SourceUnit
from cryptoscan.prompts import PromptBundle, build_detection_prompt, build_validation_prompt

FIXTURES = Path(__file__).parent / "fixtures"
CORPUS = FIXTURES / "corpus"
BENCHCASES = FIXTURES / "benchcases"

BROKEN = "Use of a Broken or Risky Cryptographic Algorithm"
CERT = "Improper Certificate Validation"
RANDOM = "Use of Insufficiently Random Values"
HARDCODED = "Use of Hardcoded Credentials"

# (pattern, category, api, root cause, recommendation)
RULES = [
    (r'getInstance\("DES"\)', BROKEN, "Cipher.getInstance", "DES is a broken cipher.", "Use AES-GCM."),
    (r'getInstance\("MD5"\)', BROKEN, "MessageDigest.getInstance", "MD5 is collision-prone.", "Use SHA-256 or a KDF."),
    (r'getInstance\("SHA-1"\)', BROKEN, "MessageDigest.getInstance", "SHA-1 is deprecated.", "Use SHA-256."),
    (r"hashlib\.md5", BROKEN, "hashlib.md5", "MD5 is unsuitable for passwords.", "Use hashlib.scrypt."),
    (r"/ECB/", BROKEN, "Cipher.getInstance", "ECB mode leaks patterns.", "Use GCM."),
    (r"MODE_ECB", BROKEN, "AES.new", "ECB mode leaks patterns.", "Use AES.MODE_GCM."),
    (r"new Random\(\)", RANDOM, "java.util.Random", "Session ids come from a predictable PRNG.", "Use SecureRandom."),
    (r'"s3cr3t', HARDCODED, "SecretKeySpec", "The key is a string constant.", "Load the key from a keystore."),
    (r'KEY = b"', HARDCODED, "KEY", "The key is embedded in the source.", "Read it from a secret store."),
    (r"checkServerTrusted", CERT, "X509TrustManager.checkServerTrusted", "Accepts any certificate.", "Validate the chain."),
    (r"CERT_NONE", CERT, "ssl.CERT_NONE", "Certificate checks are disabled.", "Keep CERT_REQUIRED."),
    (r"DEFAULT_CRYPTO = ", HARDCODED, "DEFAULT_CRYPTO", "Hardcoded key material.", "Generate keys securely."),
    (r'DEFAULT_CRYPTO = "RC4"', BROKEN, "Cipher.getInstance", "RC4 is broken.", "Use AES-GCM."),
]


def findings(content: str) -> list[dict]:
    out = []
    for pattern, category, api, cause, fix in RULES:
        m = re.search(pattern, content)
        if m:
            line = content.count("\n", 0, m.start()) + 1
            out.append({"category": category, "api": api, "line": line, "rootCause": cause, "recommendation": fix})
    return out


def detection_text(unit_path: str, content: str, variant: int) -> str:
    """Deterministic fake model output, varied per variant."""
    items = findings(content)
    name = Path(unit_path).name
    if variant == 2 and name == "keys.py":
        return "   "
    if variant == 3 and name == "tls_client.py":
        return "I'm sorry, but I can't help with analyzing this code."
    if variant == 4 and name == "clean_hmac.py":
        return "The code looks fine to me; no issues found."
    if variant == 2 and items:
        items = items[1:]
    payload = json.dumps(items, indent=1)
    if variant == 1:
        return f"Here is my analysis.\n```json\n{payload}\n```\nLet me know if you need more detail."
    if variant == 3:
        return f"Findings [{len(items)} total]:\n{payload}\nNote: line numbers are 1-based."
    if variant == 4 and name == "LegacyCipher.java":
        items = items + [
            {"category": RANDOM, "api": "Math.random", "line": 3, "rootCause": "Weak PRNG.", "recommendation": "-"}
        ]
        payload = json.dumps(items)
    return payload


def validation_text(bundle: PromptBundle) -> str:
    """Drop DEFAULT_CRYPTO findings, keep the rest; silent about Signer.kt."""
    seen, verdicts = set(), []
    for text in bundle.prior_responses or ():
        for item in extract_json_array(text) or []:
            key = (item["category"], item["api"], item["line"])
            if key in seen:
                continue
            seen.add(key)
            drop = item["api"] == "DEFAULT_CRYPTO"
            verdicts.append(
                {
                    "category": item["category"],
                    "api": item["api"],
                    "line": item["line"],
                    "verdict": "drop" if drop else "keep",
                    "justification": "the constant names an algorithm, it is not a key"
                    if drop
                    else "confirmed in context",
                }
            )
    if bundle.unit_path.endswith("Signer.kt"):
        verdicts = []
    return json.dumps(verdicts, indent=1)


class ScriptedProvider:
    """Live-looking provider answering from the rule table; counts calls."""

    live = True

    def __init__(self, detection=detection_text, validation=validation_text):
        self.detection = detection
        self.validation = validation
        self.calls: list[tuple[str, str, int]] = []

    def send(self, bundle: PromptBundle, profile: ModelProfile, query_index: int) -> str:
        self.calls.append((bundle.unit_path, bundle.phase, query_index))
        if bundle.is_validation:
            return self.validation(bundle)
        return self.detection(bundle.unit_path, bundle.code_payload, query_index)


def build_transcripts(
    store_path: Path,
    units: list[SourceUnit],
    setting: DetectionSetting,
    model: str,
    variants: int = 5,
) -> TranscriptStore:
    """Record ``variants`` detection answers plus the matching validation answer per unit."""
    store = TranscriptStore(store_path)
    for unit in units:
        bundle = build_detection_prompt(unit, setting)
        texts = [detection_text(unit.path, unit.content, v) for v in range(variants)]
        for text in texts:
            store.append(bundle.prompt_hash, model, text, timestamp="2024-01-01T00:00:00+00:00")
        if setting.validation:
            picked = [texts[i % variants] for i in range(setting.query_count)]
            ok = [t for t in picked if classify_text(t) is ResponseStatus.OK]
            if ok:
                vbundle = build_validation_prompt(unit, ok)
                store.append(vbundle.prompt_hash, model, validation_text(vbundle), timestamp="2024-01-01T00:00:00+00:00")
    return store
