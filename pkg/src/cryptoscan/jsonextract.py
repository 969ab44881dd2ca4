"""Recover a JSON array from free-form model output."""

from __future__ import annotations

import json

_DECODER = json.JSONDecoder()


def extract_json_array(text: str) -> list | None:
    """Return the first JSON array in ``text`` that can hold alert objects.

    Surrounding prose and code fences are ignored. Arrays whose elements are
    all scalars (``[1]``, ``["a"]``) are skipped, so a bracketed aside in the
    prose does not shadow the payload. Returns None when nothing qualifies.
    """
    start = text.find("[")
    while start != -1:
        try:
            value, _ = _DECODER.raw_decode(text, start)
        except ValueError:
            value = None
        if isinstance(value, list) and (not value or any(isinstance(v, dict) for v in value)):
            return value
        start = text.find("[", start + 1)
    return None
