"""Versioned JSONL and CSV file helpers.

Every file starts with a version header line. Readers skip header lines
wherever they appear, so appending to an existing file (which repeats the
header) keeps it readable.
"""

from __future__ import annotations

import csv
import json
from typing import IO, Iterable, Iterator

from .core import SCHEMA_VERSION

CSV_HEADER = f"# binomark-csv v{SCHEMA_VERSION}"


def jsonl_header(kind: str) -> dict:
    return {"format": f"binomark/{kind}", "schema_version": SCHEMA_VERSION}


def write_jsonl(fp: IO[str], dicts: Iterable[dict], kind: str) -> int:
    """Write a header line then one JSON object per line; returns the count."""
    fp.write(json.dumps(jsonl_header(kind)) + "\n")
    count = 0
    for obj in dicts:
        fp.write(json.dumps(obj) + "\n")
        count += 1
    return count


def read_jsonl(fp: IO[str]) -> Iterator[tuple]:
    """Yield (line_number, parsed object or None) for each data line.

    Header lines are skipped; unparseable lines yield None so callers can
    record per-line errors and continue.
    """
    for lineno, line in enumerate(fp, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            yield lineno, None
            continue
        if isinstance(obj, dict) and str(obj.get("format", "")).startswith("binomark/"):
            continue
        yield lineno, obj


def write_csv(fp: IO[str], columns: list, rows: Iterable[list]) -> int:
    """Write the version header, the column row, then the data rows."""
    fp.write(CSV_HEADER + "\n")
    writer = csv.writer(fp)
    writer.writerow(columns)
    count = 0
    for row in rows:
        writer.writerow(row)
        count += 1
    return count


def read_csv(fp: IO[str]) -> tuple:
    """(columns, rows) from a versioned CSV; header lines are skipped."""
    rows = []
    columns = None
    for line in fp:
        if line.startswith("#"):
            continue
        parsed = next(csv.reader([line]))
        if columns is None:
            columns = parsed
        else:
            rows.append(parsed)
    return columns or [], rows
