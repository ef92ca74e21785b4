"""Prompt templates and the per-category exemplar/workflow library.

Templates are plain text with literal ``{name}`` placeholders substituted via
string replacement (no brace escaping), so prompt text may freely contain
other braces. Files here are editable repo content.
"""

from __future__ import annotations

import json
from importlib import resources

SYSTEM_ANALYST = "system_analyst"
QUERY_SYNTHESIS = "query_synthesis"
TRAJECTORY_SAMPLING = "trajectory_sampling"
CONSISTENCY_JUDGE = "consistency_judge"
ANSWER_JUDGE = "answer_judge"
REFLECTION_CONTEXT = "reflection_context"


def load_template(name: str) -> str:
    return resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def render(template: str, **values) -> str:
    """Substitute literal {name} placeholders; missing keys are left intact."""
    out = template
    for key, value in values.items():
        out = out.replace("{" + key + "}", str(value))
    return out


def load_category_library() -> dict:
    raw = resources.files(__package__).joinpath("category_library.json").read_text(encoding="utf-8")
    library = json.loads(raw)
    library.pop("_note", None)
    return library
