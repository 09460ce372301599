"""Deterministic, atomic JSON file writes shared by the stores."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path


def dump_canonical(payload) -> str:
    """Stable serialization: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def atomic_write_json(path: Path, payload) -> None:
    """Write via a same-directory temp file and rename; a crash mid-write
    never leaves a partially valid file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(dump_canonical(payload))
        os.replace(tmp_name, path)  # atomic on POSIX
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
