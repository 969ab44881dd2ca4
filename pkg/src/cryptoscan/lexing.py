"""Minimal lexer for Java-like and Python sources.

Only distinguishes what the scanner and the refinery care about: comments,
string literals, identifiers, numbers, whitespace and everything else. Token
texts concatenate back to the exact input.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator

from .model import Language

_JAVA = re.compile(
    r"""
    (?P<comment>//[^\n]*|/\*[\s\S]*?(?:\*/|\Z))
  | (?P<string>\"\"\"[\s\S]*?(?:\"\"\"|\Z)|"(?:\\.|[^"\\\n])*"?|'(?:\\.|[^'\\\n])*'?)
  | (?P<ident>[A-Za-z_$][\w$]*)
  | (?P<number>\d[\w.]*)
  | (?P<ws>\s+)
  | (?P<other>.)
    """,
    re.VERBOSE | re.DOTALL,
)

_PYTHON = re.compile(
    r"""
    (?P<comment>\#[^\n]*)
  | (?P<string>(?:[rRbBuUfF]{1,2})?(?:\"\"\"[\s\S]*?(?:\"\"\"|\Z)|'''[\s\S]*?(?:'''|\Z)|"(?:\\.|[^"\\\n])*"?|'(?:\\.|[^'\\\n])*'?))
  | (?P<ident>[A-Za-z_][\w]*)
  | (?P<number>\d[\w.]*)
  | (?P<ws>\s+)
  | (?P<other>.)
    """,
    re.VERBOSE | re.DOTALL,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    start: int


def tokenize(text: str, language: Language) -> Iterator[Token]:
    pattern = _PYTHON if language is Language.PYTHON else _JAVA
    for m in pattern.finditer(text):
        yield Token(m.lastgroup or "other", m.group(), m.start())


def mask_non_code(text: str, language: Language) -> str:
    """Blank out comments and string literals, keeping line structure intact."""
    out = []
    for tok in tokenize(text, language):
        if tok.kind in ("comment", "string"):
            out.append(re.sub(r"[^\n]", " ", tok.text))
        else:
            out.append(tok.text)
    return "".join(out)


def line_of(text: str, offset: int) -> int:
    return text.count("\n", 0, offset) + 1
