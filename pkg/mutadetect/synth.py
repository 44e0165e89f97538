"""Synthetic corpus generator with planted, learnable mutations.

Every cohort is one consensus sequence plus per-record noise. Between two
consecutive time steps a fixed share of the tracked positions mutates
population-wide: the cumulative number of planted mutations after transition
t is floor(rate * tracked * t), so every run of transitions carries the
configured rate up to rounding. In the time step before a planted mutation
both neighbours of the tracked position become a motif residue that never
occurs otherwise, so all three trigrams of the last input of a window contain
it. The generator also writes a trigram table in which every trigram holding
the motif residue is shifted along one shared direction; used as the run's
embedding table it makes that last input separable from stable sites.
Noise and ambiguity codes only touch background positions, which lie more
than two residues away from every tracked position.
"""

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from mutadetect.embedding import CONTEXT, DEFAULT_DIM, fallback_vector
from mutadetect.sequences import CANONICAL_RESIDUES, TimeUnit, format_time_index
from mutadetect.utils.artifacts import write_csv_atomic, write_json_atomic, write_text_atomic
from mutadetect.utils.pylogger import get_python_logger
from mutadetect.utils.seeding import derive_rng

logger = get_python_logger()

MOTIF_RESIDUE = "W"
BASE_ALPHABET = CANONICAL_RESIDUES.replace(MOTIF_RESIDUE, "")
TRACK_SPACING = 8
TABLE_NAME = "trigrams.tsv"


class SynthParams(BaseModel):
    """Generator parameters."""

    mutation_rate: float = Field(default=0.1, ge=0, le=1)
    cohorts: int = Field(default=10, ge=2)
    size: int = Field(default=20, ge=1, description="Records per cohort")
    length: int = Field(default=50, ge=2 * CONTEXT + 1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    start: int = Field(default=2000, ge=0, description="First year")
    time_unit: TimeUnit = "year"
    noise_rate: float = Field(default=0.02, ge=0, le=1)
    ambiguity_rate: float = Field(default=0.0, ge=0, le=1)
    tracked_positions: Optional[List[int]] = None
    format: Literal["csv", "fasta"] = "csv"
    motif_strength: float = Field(
        default=2.0, ge=0, description="Shift of motif trigrams along the shared direction"
    )
    embedding_dim: int = Field(default=DEFAULT_DIM, gt=0)

    @model_validator(mode="after")
    def _check_positions(self) -> "SynthParams":
        positions = self.positions()
        for p in positions:
            if not CONTEXT <= p <= self.length - 1 - CONTEXT:
                raise ValueError(f"tracked position {p} lacks trigram context")
        if len(set(positions)) != len(positions):
            raise ValueError("tracked positions must be unique")
        # a motif neighbour must not overwrite another tracked residue
        for a, b in zip(positions, positions[1:]):
            if b - a < 2:
                raise ValueError(f"tracked positions {a} and {b} are adjacent")
        return self

    def positions(self) -> List[int]:
        if self.tracked_positions is not None:
            return sorted(self.tracked_positions)
        return list(range(CONTEXT, self.length - CONTEXT, TRACK_SPACING))


@dataclass
class SyntheticCorpus:
    params: SynthParams
    time_indices: List[int]
    records: List[tuple[str, int, str]]
    mutations: List[Dict[str, Any]]
    background: List[int]

    def ground_truth(self) -> Dict[str, Any]:
        tracked = self.params.positions()
        sites = len(tracked) * (len(self.time_indices) - 1)
        return {
            "format_version": 1,
            "params": self.params.model_dump(mode="json"),
            "tracked_positions": tracked,
            "time_indices": self.time_indices,
            "mutations": self.mutations,
            "planted": len(self.mutations),
            "sites": sites,
            "planted_fraction": len(self.mutations) / sites if sites else 0.0,
            "records": len(self.records),
        }


def _substitute(current: str, rng: np.random.Generator) -> str:
    choices = BASE_ALPHABET.replace(current, "")
    return choices[int(rng.integers(len(choices)))]


def planted_counts(rate: float, tracked: int, transitions: int) -> List[int]:
    """Mutations per transition so the running total stays floor(rate * tracked * t)."""
    counts, done = [], 0
    for t in range(1, transitions + 1):
        total = math.floor(rate * tracked * t + 1e-9)
        counts.append(total - done)
        done = total
    return counts


def generate_corpus(params: SynthParams) -> SyntheticCorpus:
    """Build consensus sequences, plant mutations and sample noisy records."""
    tracked = params.positions()
    near = {q for p in tracked for q in range(p - CONTEXT, p + CONTEXT + 1)}
    background = [i for i in range(params.length) if i not in near]

    base_rng = derive_rng(params.seed, "synth-base")
    base = [BASE_ALPHABET[i] for i in base_rng.integers(len(BASE_ALPHABET), size=params.length)]

    mutation_rng = derive_rng(params.seed, "synth-mutations")
    first = params.start if params.time_unit == "year" else params.start * 12
    time_indices = [first + i for i in range(params.cohorts)]

    consensus = [list(base)]
    mutations: List[Dict[str, Any]] = []
    counts = planted_counts(params.mutation_rate, len(tracked), params.cohorts - 1)
    for t, count in enumerate(counts, start=1):
        current = list(consensus[-1])
        chosen = mutation_rng.choice(len(tracked), size=count, replace=False)
        for p in sorted(tracked[int(i)] for i in chosen):
            new = _substitute(current[p], mutation_rng)
            mutations.append(
                {
                    "time_index": time_indices[t],
                    "time": format_time_index(time_indices[t], params.time_unit),
                    "position": p,
                    "from": current[p],
                    "to": new,
                }
            )
            current[p] = new
            # motif on both neighbours in the preceding step
            consensus[-1][p - 1] = MOTIF_RESIDUE
            consensus[-1][p + 1] = MOTIF_RESIDUE
        consensus.append(current)

    records: List[tuple[str, int, str]] = []
    for t, time_index in enumerate(time_indices):
        noise_rng = derive_rng(params.seed, "synth-noise", t)
        for i in range(params.size):
            residues = list(consensus[t])
            for q in background:
                u = noise_rng.random()
                if u < params.ambiguity_rate:
                    residues[q] = "X"
                elif u < params.ambiguity_rate + params.noise_rate:
                    residues[q] = _substitute(residues[q], noise_rng)
            records.append((f"s{t:04d}_{i:04d}", time_index, "".join(residues)))

    logger.info(
        "Generated synthetic corpus",
        cohorts=params.cohorts,
        records=len(records),
        tracked=len(tracked),
        planted=len(mutations),
    )
    return SyntheticCorpus(
        params=params,
        time_indices=time_indices,
        records=records,
        mutations=mutations,
        background=background,
    )


def motif_table(params: SynthParams) -> Dict[str, np.ndarray]:
    """Vectors for every trigram containing the motif residue.

    Each is its seeded fallback vector plus `motif_strength` times a shared
    direction with entries of +-0.5.
    """
    direction = derive_rng(params.seed, "synth-motif").choice(
        (-0.5, 0.5), size=params.embedding_dim
    )
    table = {}
    for letters in itertools.product(CANONICAL_RESIDUES, repeat=3):
        trigram = "".join(letters)
        if MOTIF_RESIDUE in trigram:
            base = fallback_vector(trigram, params.seed, params.embedding_dim)
            table[trigram] = base + params.motif_strength * direction
    return table


def write_corpus(corpus: SyntheticCorpus, out_dir: str | Path) -> Dict[str, Path]:
    """Write the corpus (CSV or FASTA), ground_truth.json and the motif trigram table."""
    out = Path(out_dir)
    unit = corpus.params.time_unit
    if corpus.params.format == "fasta":
        lines = []
        for record_id, time_index, residues in corpus.records:
            lines.append(f">{record_id}|{unit}={format_time_index(time_index, unit)}|")
            lines.append(residues)
        corpus_path = write_text_atomic(out / "corpus.fasta", "\n".join(lines) + "\n")
    else:
        corpus_path = write_csv_atomic(
            out / "corpus.csv",
            ("id", "time_index", "sequence"),
            (
                (record_id, format_time_index(time_index, unit), residues)
                for record_id, time_index, residues in corpus.records
            ),
        )
    truth_path = write_json_atomic(out / "ground_truth.json", corpus.ground_truth())
    rows = (
        trigram + "\t" + "\t".join(f"{v:.6f}" for v in vector)
        for trigram, vector in motif_table(corpus.params).items()
    )
    table_path = write_text_atomic(out / TABLE_NAME, "\n".join(rows) + "\n")
    return {"corpus": corpus_path, "ground_truth": truth_path, "embedding_table": table_path}
