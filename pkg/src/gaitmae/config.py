"""Plain ``key = value`` config files with optional ``[section]`` prefixes."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Union


class ConfigError(ValueError):
    pass


def parse_config(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse lines of ``key = value``; ``[mask]`` followed by ``span = 16`` yields ``mask.span``.

    ``#`` starts a comment. Duplicate keys are rejected.
    """
    out: Dict[str, str] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"{source}:{lineno}: empty section name")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: missing key")
        full = f"{section}.{key}" if section else key
        if full in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {full!r}")
        out[full] = value.strip("\"'")
    return out


def load_config(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def format_config(values: Mapping[str, object]) -> str:
    """Sorted ``key = value`` text; tuples and lists are comma-joined."""
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
