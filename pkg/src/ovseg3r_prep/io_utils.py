"""File and directory I/O utilities.

This module provides helper functions for file and directory operations:
directory creation, atomic writes of bytes/text/JSON, and content hashing
for pipeline manifests.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Any


def _check_path(path: Path) -> None:
    if not path or str(path) in ("", "."):
        raise ValueError("path cannot be None or empty")


def ensure_dir(path: Path) -> None:
    """Ensure a directory exists, creating it if necessary.

    Args:
        path: Path to the directory.

    Raises:
        ValueError: If path is invalid.
        OSError: If directory cannot be created.
    """
    _check_path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"Failed to create directory {path}: {e}") from e


def write_bytes_atomic(path: Path, data: bytes) -> None:
    """Write bytes to a file through a sibling temp file and a rename.

    A reader never observes a half-written artifact.

    Args:
        path: Path to the output file.
        data: Content to write.

    Raises:
        ValueError: If path or data is invalid.
        OSError: If file cannot be written.
    """
    _check_path(path)
    if data is None:
        raise ValueError("data cannot be None")
    if str(path.parent) not in ("", "."):
        ensure_dir(path.parent)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except OSError as e:
        Path(tmp_name).unlink(missing_ok=True)
        raise OSError(f"Failed to write file {path}: {e}") from e


def write_text(path: Path, text: str) -> None:
    """Write text content to a file.

    Args:
        path: Path to the output file.
        text: Text content to write.

    Raises:
        ValueError: If path or text is invalid.
        OSError: If file cannot be written.
    """
    _check_path(path)
    if text is None:
        raise ValueError("text cannot be None")
    write_bytes_atomic(path, text.encode("utf-8"))


def write_json(path: Path, payload: Any) -> None:
    """Write ``payload`` as canonical JSON (sorted keys, two-space indent).

    Raises:
        TypeError: If payload cannot be serialized to JSON.
        OSError: If file cannot be written.
    """
    try:
        content = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False)
    except (TypeError, ValueError) as e:
        raise TypeError(f"Failed to serialize JSON for {path}: {e}") from e
    write_text(path, content + "\n")


def read_json(path: Path) -> Any:
    """Read a JSON document.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If the content is not valid JSON.
    """
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid JSON in {path}: {e}") from e


def sha256_file(path: Path, chunk_size: int = 1 << 20) -> str:
    """Hex SHA-256 of a file's contents."""
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def remove_quietly(paths: list[Path]) -> None:
    """Delete files or directory trees that exist, ignoring ones that do not."""
    for path in paths:
        if path.is_dir():
            shutil.rmtree(path, ignore_errors=True)
        else:
            path.unlink(missing_ok=True)


def read_indices(path: Path) -> list[int]:
    """Read a text file with one non-negative integer per line.

    Blank lines and ``#`` comments are ignored.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If a line is not a non-negative integer.
    """
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    values: list[int] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        token = line.split("#", 1)[0].strip()
        if not token:
            continue
        if not token.isdigit():
            raise ValueError(f"{path}:{lineno}: expected a non-negative integer")
        values.append(int(token))
    return values


def write_indices(path: Path, values: list[int]) -> None:
    """Write integers one per line."""
    write_text(path, "".join(f"{int(v)}\n" for v in values))
