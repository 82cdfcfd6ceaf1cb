from __future__ import annotations

import os
from pathlib import Path
from typing import Optional


def find_repo_root(start: Optional[Path] = None) -> Path:
    """Walk upwards until a directory holding ``config/settings.yaml`` is found."""
    cur = (start or Path.cwd()).resolve()
    while True:
        if (cur / "config" / "settings.yaml").exists() or (cur / ".git").exists():
            return cur
        if cur.parent == cur:
            break
        cur = cur.parent
    return (start or Path.cwd()).resolve()


def ensure_repo_root(start: Optional[Path] = None) -> Path:
    root = find_repo_root(start)
    os.chdir(root)
    return root


def default_settings_path() -> Optional[Path]:
    path = find_repo_root() / "config" / "settings.yaml"
    return path if path.exists() else None
