"""Atomic, byte-stable writers for run artifacts."""

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence

from mutadetect.utils.pylogger import get_python_logger

logger = get_python_logger()


def canonical_json(payload: Any) -> str:
    """Serialise with sorted keys so identical payloads give identical bytes."""
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_text_atomic(path: str | Path, text: str) -> Path:
    """Write text through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    logger.debug("Wrote artifact", path=str(path), bytes=len(text))
    return path


def write_json_atomic(path: str | Path, payload: Any) -> Path:
    return write_text_atomic(path, canonical_json(payload))


def write_jsonl_atomic(path: str | Path, rows: Iterable[Any]) -> Path:
    lines = [json.dumps(row, sort_keys=True, separators=(",", ":")) for row in rows]
    return write_text_atomic(path, "".join(line + "\n" for line in lines))


def write_csv_atomic(
    path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]
) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return write_text_atomic(path, buffer.getvalue())


def read_jsonl(path: str | Path) -> list[Any]:
    with Path(path).open(encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
