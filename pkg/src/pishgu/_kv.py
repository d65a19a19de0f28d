"""Plain-text ``key = value`` files with ``#`` comments."""

from __future__ import annotations

from pathlib import Path

from .errors import ParseError


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ParseError(f"expected 'key = value', got {line!r}", lineno)
        out[key.strip()] = value.strip()
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def format_kv(items) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items)
