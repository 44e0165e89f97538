"""Trigram vectors and the neighbourhood-averaged per-position representation.

The vector for position p is the mean of the vectors of the trigrams centred
at p-1, p and p+1 (one neighbour on each side). The trigram centred at j
spans residues j-1..j+1, so p needs residues p-2..p+2 and valid positions are
2 <= p <= length-3.
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Set

import numpy as np

from mutadetect.errors import BoundaryError, EmbeddingFormatError, InvalidSymbolError
from mutadetect.sequences import CANONICAL_RESIDUES, SequenceRecord
from mutadetect.utils.pylogger import get_python_logger

logger = get_python_logger()

DEFAULT_DIM = 100

# Neighbours on each side of a position (3-grams)
NEIGHBOURS = 1
CONTEXT = NEIGHBOURS + 1

_CANONICAL = frozenset(CANONICAL_RESIDUES)


def fallback_vector(trigram: str, seed: int, dim: int) -> np.ndarray:
    """Deterministic stand-in vector with entries uniform in [-0.5, 0.5).

    Raises:
        InvalidSymbolError: If the trigram is not three canonical residues.
    """
    if len(trigram) != 3 or not set(trigram) <= _CANONICAL:
        raise InvalidSymbolError(f"trigram {trigram!r} is not over the canonical alphabet")
    digest = hashlib.blake2b(f"{seed}:{trigram}".encode(), digest_size=16).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "big"))
    return rng.uniform(-0.5, 0.5, size=dim)


@dataclass(frozen=True)
class TrigramTable:
    """Trigram -> vector lookup with seeded fallbacks for missing entries."""

    dim: int
    entries: Mapping[str, np.ndarray]
    fallback_seed: int = 0
    allow_fallback: bool = True
    _fallbacks: Dict[str, np.ndarray] = field(
        default_factory=dict, repr=False, compare=False
    )
    _missing: Set[str] = field(default_factory=set, repr=False, compare=False)

    @classmethod
    def fallback_only(cls, dim: int = DEFAULT_DIM, seed: int = 0) -> "TrigramTable":
        return cls(dim=dim, entries={}, fallback_seed=seed)

    def vector(self, trigram: str) -> np.ndarray:
        hit = self.entries.get(trigram)
        if hit is not None:
            return hit
        cached = self._fallbacks.get(trigram)
        if cached is not None:
            return cached
        if not self.allow_fallback:
            raise EmbeddingFormatError(
                f"trigram {trigram!r} missing from the embedding table",
                hint="Enable paths.allow_fallback_embeddings or supply a complete table",
            )
        vector = fallback_vector(trigram, self.fallback_seed, self.dim)
        vector.flags.writeable = False
        self._fallbacks[trigram] = vector
        if self.entries:
            self._missing.add(trigram)
        return vector

    @property
    def missing_count(self) -> int:
        """Trigrams that were absent from a loaded table and fell back."""
        return len(self._missing)


def load_table(
    path: str | Path, fallback_seed: int = 0, allow_fallback: bool = True
) -> TrigramTable:
    """Load a TSV table: a trigram followed by `dim` tab-separated reals per row.

    Raises:
        EmbeddingFormatError: On ragged rows, unparsable or non-finite values.
    """
    entries: Dict[str, np.ndarray] = {}
    dim = None
    with Path(path).open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip().strip('"')
            if not line:
                continue
            fields = line.split("\t")
            trigram = fields[0].strip().upper()
            try:
                values = np.array([float(v) for v in fields[1:]], dtype=np.float64)
            except ValueError as e:
                raise EmbeddingFormatError(f"line {line_no}: {e}") from e
            if dim is None:
                dim = values.size
                if dim == 0:
                    raise EmbeddingFormatError(f"line {line_no}: row has no values")
            elif values.size != dim:
                raise EmbeddingFormatError(
                    f"line {line_no}: expected {dim} values, found {values.size}"
                )
            if not np.all(np.isfinite(values)):
                raise EmbeddingFormatError(f"line {line_no}: non-finite value")
            if trigram in entries:
                logger.warning("Duplicate trigram, last row wins", trigram=trigram, line=line_no)
            values.flags.writeable = False
            entries[trigram] = values
    if dim is None:
        raise EmbeddingFormatError(f"embedding table {path} has no rows")
    logger.info("Loaded embedding table", path=str(path), entries=len(entries), dim=dim)
    return TrigramTable(
        dim=dim, entries=entries, fallback_seed=fallback_seed, allow_fallback=allow_fallback
    )


@dataclass(frozen=True)
class PositionEmbedding:
    vector: np.ndarray
    position: int
    time_index: int


def check_position(position: int, length: int) -> None:
    if not CONTEXT <= position <= length - 1 - CONTEXT:
        raise BoundaryError(
            f"position {position} lacks trigram context in a sequence of length {length}",
            hint=f"Use positions between {CONTEXT} and {length - 1 - CONTEXT}",
        )


def valid_positions(length: int) -> list[int]:
    return list(range(CONTEXT, length - CONTEXT))


def trigram_matrix(residues: str, table: TrigramTable) -> np.ndarray:
    """Row j holds the vector of the trigram centred at residue j+1."""
    return np.stack(
        [table.vector(residues[j - 1 : j + 2]) for j in range(1, len(residues) - 1)]
    )


def embed_positions(
    residues: str, positions: Sequence[int], table: TrigramTable
) -> np.ndarray:
    """Embed several positions of one sequence; shape (len(positions), dim)."""
    for p in positions:
        check_position(p, len(residues))
    return embed_from_matrix(trigram_matrix(residues, table), positions)


def embed_from_matrix(matrix: np.ndarray, positions: Sequence[int]) -> np.ndarray:
    """Same as embed_positions for a precomputed trigram_matrix."""
    # trigram centred at c sits in row c-1
    idx = np.asarray(positions, dtype=np.int64)
    window = 2 * NEIGHBOURS + 1
    total = sum(matrix[idx - 1 + offset] for offset in range(-NEIGHBOURS, NEIGHBOURS + 1))
    return total / window


def embed_position(
    record: SequenceRecord, position: int, table: TrigramTable
) -> PositionEmbedding:
    """Mean of the trigram vectors centred at position-1, position, position+1."""
    check_position(position, record.length)
    vectors = [
        table.vector(record.residues[c - 1 : c + 2])
        for c in range(position - NEIGHBOURS, position + NEIGHBOURS + 1)
    ]
    return PositionEmbedding(
        vector=np.mean(vectors, axis=0), position=position, time_index=record.time_index
    )


def record_mean_vector(
    record: SequenceRecord, table: TrigramTable, matrix: Optional[np.ndarray] = None
) -> np.ndarray:
    """Mean of the embeddings of every valid position; used for clustering.

    `matrix` is the record's precomputed trigram_matrix, if the caller has one.
    """
    positions = valid_positions(record.length)
    if not positions:
        raise BoundaryError(
            f"record {record.id} (length {record.length}) has no embeddable position"
        )
    if matrix is None:
        matrix = trigram_matrix(record.residues, table)
    return embed_from_matrix(matrix, positions).mean(axis=0)


def table_summary(table: TrigramTable) -> Dict[str, int]:
    return {
        "dim": table.dim,
        "entries": len(table.entries),
        "fallbacks": table.missing_count,
        "expected_full": len(CANONICAL_RESIDUES) ** 3,
    }
