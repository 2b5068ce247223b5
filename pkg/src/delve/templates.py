"""Access to packaged prompt templates and analysis word lists.

Templates use literal {name} placeholders. fill() does plain substring
replacement, not str.format, so braces inside substituted content (JSON,
code) can never break rendering.
"""

from __future__ import annotations

from importlib import resources


def load_template(name: str) -> str:
    return resources.files("delve").joinpath("prompts", name).read_text(encoding="utf-8")


def load_data_lines(name: str) -> tuple[str, ...]:
    raw = resources.files("delve").joinpath("data", name).read_text(encoding="utf-8")
    lines = []
    for line in raw.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            lines.append(line)
    return tuple(lines)


def fill(template: str, mapping: dict[str, str]) -> str:
    out = template
    for key, value in mapping.items():
        out = out.replace("{" + key + "}", value)
    return out
