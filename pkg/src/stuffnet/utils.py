"""Utility functions for stuffnet.

Provides shared helpers for:
- Sample id formatting
- Atomic file writes
- Fixed-width text tables
"""

from __future__ import annotations

import os
import tempfile
from collections.abc import Sequence
from pathlib import Path

ID_WIDTH = 6


def format_sample_id(index: int) -> str:
    """Format a sample index as a zero-padded id.

    Example:
        >>> format_sample_id(7)
        '000007'
    """
    if index < 0:
        raise ValueError(f"index must be >= 0, got {index}")
    return f"{index:0{ID_WIDTH}d}"


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write bytes to ``path`` through a temporary file and rename.

    Readers never observe a half-written file.

    Args:
        path: Destination file
        payload: Complete file contents
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    """UTF-8 variant of :func:`atomic_write_bytes`."""
    atomic_write_bytes(path, text.encode("utf-8"))


def format_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Render a left-aligned first column and right-aligned value columns.

    Example:
        >>> print(format_table(["split", "mAP"], [["all", "0.5000"]]))
        split     mAP
        all    0.5000
    """
    columns = [list(col) for col in zip(headers, *rows)] if rows else [[h] for h in headers]
    widths = [max(len(cell) for cell in col) for col in columns]
    lines = []
    for row in [list(headers), *[list(r) for r in rows]]:
        cells = [row[0].ljust(widths[0])]
        cells.extend(cell.rjust(width) for cell, width in zip(row[1:], widths[1:]))
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines)
