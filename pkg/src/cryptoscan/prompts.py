"""Detection and validation prompt assembly.

A prompt has three parts: a basic instruction block, a setting block that
varies with the detection mode (or the validation task), and a formatting
block that pins the JSON output shape. The code under analysis follows, and
validation prompts append the earlier raw responses.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .model import DetectionSetting, MisuseCategory, Mode, SourceUnit, estimate_text_tokens

_SLOT = re.compile(r"\{\{\s*([A-Za-z_]\w*)\s*\}\}")

TEMPLATE_NAMES = (
    "basic",
    "setting_uc",
    "setting_ta",
    "formatting_detect",
    "setting_validate",
    "formatting_validate",
    "layout_detect",
    "layout_validate",
)


class TemplateError(KeyError):
    """A template slot has no binding."""

    def __init__(self, slot: str):
        super().__init__(slot)
        self.slot = slot

    def __str__(self) -> str:
        return f"no binding for template slot {{{{{self.slot}}}}}"


def render(template: str, bindings: Mapping[str, str]) -> str:
    """Substitute ``{{slot}}`` placeholders in a single pass.

    Bound values are inserted literally; placeholders inside them are not
    expanded.
    """
    missing = [name for name in _SLOT.findall(template) if name not in bindings]
    if missing:
        raise TemplateError(missing[0])
    return _SLOT.sub(lambda m: bindings[m.group(1)], template)


def slots(template: str) -> list[str]:
    return list(dict.fromkeys(_SLOT.findall(template)))


@dataclass(frozen=True)
class PromptTemplates:
    texts: Mapping[str, str]

    @classmethod
    def load(cls, directory: str | Path | None = None) -> PromptTemplates:
        """Load templates from ``directory``; files it lacks fall back to the shipped ones."""
        shipped = resources.files("cryptoscan.data").joinpath("prompts")
        texts = {}
        for name in TEMPLATE_NAMES:
            override = Path(directory) / f"{name}.txt" if directory else None
            if override is not None and override.is_file():
                texts[name] = override.read_text("utf-8")
            else:
                texts[name] = shipped.joinpath(f"{name}.txt").read_text("utf-8")
        return cls(texts)

    def __getitem__(self, name: str) -> str:
        return self.texts[name].rstrip("\n")


_DEFAULT_TEMPLATES: PromptTemplates | None = None


def default_templates() -> PromptTemplates:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = PromptTemplates.load()
    return _DEFAULT_TEMPLATES


@dataclass(frozen=True)
class PromptBundle:
    unit_path: str
    phase: str  # "detect" or "validate"
    system_text: str
    setting_text: str
    formatting_text: str
    code_payload: str
    rendered_text: str
    token_estimate: int
    prior_responses: tuple[str, ...] | None = None
    prior_text: str = ""

    @property
    def prompt_hash(self) -> str:
        return hashlib.sha256(self.rendered_text.encode("utf-8")).hexdigest()

    @property
    def is_validation(self) -> bool:
        return self.prior_responses is not None

    def messages(self) -> list[dict[str, str]]:
        system = "\n\n".join((self.system_text, self.setting_text, self.formatting_text))
        user = self.code_payload if not self.prior_text else f"{self.code_payload}\n\n{self.prior_text}"
        return [{"role": "system", "content": system}, {"role": "user", "content": user}]


def _category_block() -> str:
    return "\n".join(
        f"({i}) {c.display_name}: {c.description}" for i, c in enumerate(MisuseCategory.taxonomy(), 1)
    )


def build_detection_prompt(
    unit: SourceUnit, setting: DetectionSetting, templates: PromptTemplates | None = None
) -> PromptBundle:
    if not unit.content.strip():
        raise ValueError(f"{unit.path}: cannot build a prompt for an empty unit")
    t = templates or default_templates()
    if setting.mode is Mode.TASK_AWARE:
        setting_text = render(t["setting_ta"], {"categories": _category_block()})
    else:
        setting_text = render(t["setting_uc"], {})
    basic, formatting = render(t["basic"], {}), render(t["formatting_detect"], {})
    rendered = render(
        t["layout_detect"],
        {"basic": basic, "setting": setting_text, "formatting": formatting, "code": unit.content, "path": unit.path},
    )
    return PromptBundle(
        unit_path=unit.path,
        phase="detect",
        system_text=basic,
        setting_text=setting_text,
        formatting_text=formatting,
        code_payload=unit.content,
        rendered_text=rendered,
        token_estimate=estimate_text_tokens(rendered),
    )


def format_prior_responses(responses: Sequence[str]) -> str:
    n = len(responses)
    blocks = [
        f"=== Previous analysis {i} of {n} ===\n{text}\n=== End of previous analysis {i} ==="
        for i, text in enumerate(responses, 1)
    ]
    return "\n\n".join(blocks)


_PRIOR_BLOCK = re.compile(
    r"^=== Previous analysis (\d+) of \d+ ===\n(.*?)\n=== End of previous analysis \1 ===$", re.S | re.M
)


def extract_prior_responses(rendered: str) -> list[str]:
    """Recover the embedded responses from a rendered validation prompt."""
    return [m.group(2) for m in _PRIOR_BLOCK.finditer(rendered)]


def build_validation_prompt(
    unit: SourceUnit, responses: Sequence[str], templates: PromptTemplates | None = None
) -> PromptBundle:
    if not responses:
        raise ValueError("validation needs at least one prior response")
    if not unit.content.strip():
        raise ValueError(f"{unit.path}: cannot build a prompt for an empty unit")
    t = templates or default_templates()
    basic = render(t["basic"], {})
    setting_text = render(t["setting_validate"], {})
    formatting = render(t["formatting_validate"], {})
    prior = format_prior_responses(responses)
    rendered = render(
        t["layout_validate"],
        {
            "basic": basic,
            "setting": setting_text,
            "formatting": formatting,
            "code": unit.content,
            "path": unit.path,
            "prior_responses": prior,
        },
    )
    return PromptBundle(
        unit_path=unit.path,
        phase="validate",
        system_text=basic,
        setting_text=setting_text,
        formatting_text=formatting,
        code_payload=unit.content,
        rendered_text=rendered,
        token_estimate=estimate_text_tokens(rendered),
        prior_responses=tuple(responses),
        prior_text=prior,
    )
