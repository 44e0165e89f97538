"""Amino-acid records and the time cohorts they are grouped into."""

import re
from dataclasses import dataclass
from typing import Literal, Tuple

from mutadetect.errors import ParseError

CANONICAL_RESIDUES = "ACDEFGHIKLMNPQRSTVWY"

# Ambiguity codes and the canonical residues each may stand for
AMBIGUITY_CODES = {
    "B": "DN",
    "Z": "EQ",
    "J": "IL",
    "X": CANONICAL_RESIDUES,
}

TimeUnit = Literal["year", "month"]

_MONTH_PATTERN = re.compile(r"^(\d{4})-(\d{2})$")


@dataclass(frozen=True)
class SequenceRecord:
    """One amino-acid sequence and the time step it was sampled in."""

    id: str
    time_index: int
    residues: str

    @property
    def length(self) -> int:
        return len(self.residues)


@dataclass(frozen=True)
class TimeCohort:
    """All records of one time step, in corpus order."""

    time_index: int
    records: Tuple[SequenceRecord, ...]

    def __post_init__(self) -> None:
        if not self.records:
            raise ValueError(f"cohort {self.time_index} has no records")

    def __len__(self) -> int:
        return len(self.records)


def parse_time_index(raw: str, unit: TimeUnit, line: int | None = None) -> int:
    """Turn "2011" (year) or "2020-03" (month) into a consecutive integer index.

    Months count from year 0 so consecutive months differ by one across
    year boundaries.
    """
    raw = raw.strip()
    if unit == "year":
        if not raw.isdigit():
            raise ParseError(f"time index {raw!r} is not a year", line=line)
        return int(raw)
    match = _MONTH_PATTERN.match(raw)
    if not match:
        raise ParseError(f"time index {raw!r} is not YYYY-MM", line=line)
    year, month = int(match.group(1)), int(match.group(2))
    if not 1 <= month <= 12:
        raise ParseError(f"month {month} out of range in {raw!r}", line=line)
    return year * 12 + month - 1


def format_time_index(index: int, unit: TimeUnit) -> str:
    if unit == "year":
        return str(index)
    year, month = divmod(index, 12)
    return f"{year:04d}-{month + 1:02d}"
