"""Config roots: bundled defaults, overridable through ``SIM_CONFIG_DIR``."""

from __future__ import annotations

import json
import os
from importlib import resources
from pathlib import Path
from typing import Any

CONFIG_ENV = "SIM_CONFIG_DIR"


def config_path(name: str) -> Path | None:
    """Path to ``name`` under ``$SIM_CONFIG_DIR`` if it exists there."""
    root = os.environ.get(CONFIG_ENV)
    if root:
        candidate = Path(root) / name
        if candidate.is_file():
            return candidate
    return None


def load_default(name: str) -> Any:
    override = config_path(name)
    if override is not None:
        return json.loads(override.read_text(encoding="utf-8"))
    return json.loads(resources.files("ambient_engine").joinpath("data", name).read_text(encoding="utf-8"))


def bundled_scenarios() -> list[Path]:
    root = resources.files("ambient_engine").joinpath("data", "scenarios")
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".json"))


def bundled_scenario(name: str) -> Path:
    for path in bundled_scenarios():
        if path.stem == name:
            return path
    raise FileNotFoundError(f"no bundled scenario named {name!r}")
