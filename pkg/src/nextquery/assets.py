"""Loader for the versioned prompt-template assets.

Templates live as plain text under ``nextquery/prompts/`` and are looked up
by stem name. A directory override lets a run pin its own template set; the
packaged files are the default.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Optional

from .errors import ConfigError

_PACKAGED = resources.files("nextquery").joinpath("prompts")


def load_template(name: str, prompt_dir: Optional[Path] = None) -> str:
    filename = f"{name}.txt"
    if prompt_dir is not None:
        path = Path(prompt_dir) / filename
        if not path.is_file():
            raise ConfigError(f"prompt template not found: {path}")
        return path.read_text(encoding="utf-8")
    ref = _PACKAGED.joinpath(filename)
    if not ref.is_file():
        raise ConfigError(f"unknown prompt template: {name}")
    return ref.read_text(encoding="utf-8")


def template_version(prompt_dir: Optional[Path] = None) -> str:
    if prompt_dir is not None:
        path = Path(prompt_dir) / "VERSION"
        return path.read_text(encoding="utf-8").strip() if path.is_file() else "unversioned"
    return _PACKAGED.joinpath("VERSION").read_text(encoding="utf-8").strip()


def load_taxonomy(prompt_dir: Optional[Path] = None) -> dict:
    if prompt_dir is not None:
        path = Path(prompt_dir) / "intent_taxonomy.json"
        if not path.is_file():
            raise ConfigError(f"taxonomy not found: {path}")
        raw = path.read_text(encoding="utf-8")
    else:
        raw = _PACKAGED.joinpath("intent_taxonomy.json").read_text(encoding="utf-8")
    data = json.loads(raw)
    primary = data.get("primary")
    if not isinstance(primary, dict) or not primary:
        raise ConfigError("taxonomy must map primary intents to secondary lists")
    for key, leaves in primary.items():
        if not isinstance(leaves, list) or not leaves:
            raise ConfigError(f"primary intent {key!r} has no secondary intents")
    return data


def taxonomy_text(data: dict) -> str:
    """Render the taxonomy for inclusion in an annotation prompt."""
    lines = []
    for primary, leaves in data["primary"].items():
        lines.append(f"- {primary}: " + ", ".join(leaves))
    return "\n".join(lines)
