"""Bundled configuration assets: taxonomy, pricing table and prompt texts."""

from __future__ import annotations

import hashlib
from importlib import resources
from pathlib import Path

PROMPT_FILES = {
    "judge_prompt_following": "judge_prompt_following.txt",
    "judge_physical_logical": "judge_physical_logical.txt",
    "judge_perception": "judge_perception.txt",
    "match_agent": "match_agent.txt",
    "optimizer_meta": "optimizer_meta.txt",
    "rewrite": "rewrite.txt",
    "interaction_feedback": "interaction_feedback.txt",
    "interaction_script": "interaction_script.txt",
    "interaction_verdict": "interaction_verdict.txt",
}


def asset_dir() -> Path:
    return Path(str(resources.files(__name__)))


def asset_path(name: str, root: str | Path | None = None) -> Path:
    """Resolve an asset file name against ``root`` (defaults to the bundled directory)."""
    base = Path(root) if root is not None else asset_dir()
    if name in PROMPT_FILES:
        return base / "prompts" / PROMPT_FILES[name]
    return base / name


def load_prompt(name: str, root: str | Path | None = None) -> str:
    return asset_path(name, root).read_text(encoding="utf-8").strip()


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
