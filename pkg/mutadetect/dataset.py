"""Corpus ingestion and time-series sample construction.

Pipeline: parse -> sanitize ambiguous residues -> k-means per cohort ->
link each cluster to its nearest successor -> follow the links into chains
-> draw one record per link and emit one labelled sample per epitope site
-> split per window.

All randomness comes from named sub-streams of the run seed (see
`mutadetect.utils.seeding`), so any parallel schedule reproduces the
sequential output.
"""

import csv
import math
import re
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, TypeVar

import numpy as np

from mutadetect.config import DatasetConfig, SplitSpec
from mutadetect.embedding import (
    TrigramTable,
    check_position,
    embed_from_matrix,
    record_mean_vector,
    trigram_matrix,
    valid_positions,
)
from mutadetect.errors import (
    ContractError,
    DataError,
    DimensionError,
    GapError,
    InvalidSymbolError,
    LengthMismatchError,
    ParseError,
    SamplingError,
    SplitError,
)
from mutadetect.sequences import (
    AMBIGUITY_CODES,
    CANONICAL_RESIDUES,
    SequenceRecord,
    TimeCohort,
    TimeUnit,
    parse_time_index,
)
from mutadetect.utils.pylogger import get_python_logger
from mutadetect.utils.seeding import derive_rng

logger = get_python_logger()

SAMPLE_FORMAT_VERSION = 1

_CANONICAL = frozenset(CANONICAL_RESIDUES)
_TIME_TAG = re.compile(r"\|(year|month)=([^|\s]+)")

T_co = TypeVar("T_co")


# --- Parsing ---


@dataclass(frozen=True)
class CorpusSchema:
    format: Literal["csv", "fasta"] = "csv"
    time_unit: TimeUnit = "year"
    expected_length: Optional[int] = None


def _read_csv(path: Path, schema: CorpusSchema) -> List[SequenceRecord]:
    records: List[SequenceRecord] = []
    with path.open(encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        missing = {"id", "time_index", "sequence"} - set(reader.fieldnames or [])
        if reader.fieldnames and missing:
            raise ParseError(
                f"missing column(s) {sorted(missing)}; expected id,time_index,sequence",
                line=1,
            )
        for row in reader:
            line = reader.line_num
            record_id = (row.get("id") or "").strip()
            raw_time = (row.get("time_index") or "").strip()
            residues = (row.get("sequence") or "").strip().upper()
            if not record_id:
                raise ParseError("record has no id", line=line)
            if not raw_time:
                raise ParseError(f"record {record_id} has no time index", line=line)
            if not residues:
                raise ParseError(f"record {record_id} has an empty sequence", line=line)
            records.append(
                SequenceRecord(
                    id=record_id,
                    time_index=parse_time_index(raw_time, schema.time_unit, line),
                    residues=residues,
                )
            )
    return records


def _read_fasta(path: Path, schema: CorpusSchema) -> List[SequenceRecord]:
    records: List[SequenceRecord] = []
    header: Optional[Tuple[str, int, int]] = None
    chunks: List[str] = []

    def flush() -> None:
        if header is None:
            return
        record_id, time_index, line = header
        residues = "".join(chunks).upper()
        if not residues:
            raise ParseError(f"record {record_id} has an empty sequence", line=line)
        records.append(SequenceRecord(record_id, time_index, residues))

    with path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith(">"):
                flush()
                chunks = []
                text = line[1:]
                record_id = re.split(r"[|\s]", text, maxsplit=1)[0]
                if not record_id:
                    raise ParseError("record has no id", line=line_no)
                tags = dict(_TIME_TAG.findall(text))
                if schema.time_unit not in tags:
                    raise ParseError(
                        f"record {record_id} has no |{schema.time_unit}=...| tag",
                        line=line_no,
                    )
                time_index = parse_time_index(tags[schema.time_unit], schema.time_unit, line_no)
                header = (record_id, time_index, line_no)
            else:
                if header is None:
                    raise ParseError("sequence data before the first header", line=line_no)
                chunks.append(line)
    flush()
    return records


def parse_corpus(path: str | Path, schema: CorpusSchema) -> List[TimeCohort]:
    """Read a corpus into cohorts sorted by time index, file order kept within each.

    Raises:
        ParseError: On malformed records, duplicate ids or an empty file.
        LengthMismatchError: If records do not share one length.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    reader = _read_fasta if schema.format == "fasta" else _read_csv
    records = reader(path, schema)
    if not records:
        raise ParseError(f"no records in {path}")

    seen: set[str] = set()
    for record in records:
        if record.id in seen:
            raise ParseError(f"duplicate record id {record.id!r}")
        seen.add(record.id)

    expected = schema.expected_length
    if expected is None:
        expected = Counter(r.length for r in records).most_common(1)[0][0]
    offenders = {r.id: r.length for r in records if r.length != expected}
    if offenders:
        raise LengthMismatchError(expected, offenders)

    grouped: Dict[int, List[SequenceRecord]] = defaultdict(list)
    for record in records:
        grouped[record.time_index].append(record)
    cohorts = [TimeCohort(t, tuple(grouped[t])) for t in sorted(grouped)]
    logger.info(
        "Parsed corpus",
        path=str(path),
        records=len(records),
        cohorts=len(cohorts),
        length=expected,
    )
    return cohorts


# --- Sanitization ---


def sanitize_residue(symbol: str, rng: np.random.Generator) -> str:
    """Replace an ambiguity code by a random residue it may stand for.

    Canonical residues pass through without consuming randomness.

    Raises:
        InvalidSymbolError: For anything that is neither canonical nor B/Z/J/X.
    """
    if symbol in _CANONICAL:
        return symbol
    choices = AMBIGUITY_CODES.get(symbol)
    if choices is None:
        raise InvalidSymbolError(f"invalid residue symbol {symbol!r}")
    return choices[int(rng.integers(len(choices)))]


def sanitize_sequence(residues: str, rng: np.random.Generator) -> str:
    return "".join(sanitize_residue(symbol, rng) for symbol in residues)


def sanitize_cohorts(cohorts: Sequence[TimeCohort], seed: int) -> List[TimeCohort]:
    """Sanitize every record on its own sub-stream (cohort time, record ordinal)."""
    cleaned: List[TimeCohort] = []
    replaced = 0
    for cohort in cohorts:
        records = []
        for ordinal, record in enumerate(cohort.records):
            rng = derive_rng(seed, "sanitize", cohort.time_index, ordinal)
            try:
                residues = sanitize_sequence(record.residues, rng)
            except InvalidSymbolError as e:
                raise InvalidSymbolError(f"record {record.id}: {e.message}") from e
            replaced += sum(a != b for a, b in zip(record.residues, residues))
            records.append(SequenceRecord(record.id, record.time_index, residues))
        cleaned.append(TimeCohort(cohort.time_index, tuple(records)))
    logger.info("Sanitized corpus", replaced_residues=replaced)
    return cleaned


# --- Clustering ---


@dataclass(frozen=True)
class Cluster:
    cluster_id: int
    centroid: np.ndarray
    member_ids: Tuple[str, ...]


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    sse_history: Tuple[float, ...]

    @property
    def sse(self) -> float:
        return self.sse_history[-1]


def within_cluster_sse(
    points: np.ndarray, labels: np.ndarray, centroids: np.ndarray
) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def lloyd_kmeans(
    points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100
) -> KMeansResult:
    """Lloyd iterations from k distinct records chosen by `rng`.

    Stops when assignments no longer change or after `max_iter` rounds. An
    emptied cluster keeps its previous centroid. `sse_history` holds the
    objective after every update and never increases.
    """
    n = len(points)
    if not 1 <= k <= n:
        raise ContractError(f"k must be in [1, {n}], got {k}")
    centroids = points[rng.choice(n, size=k, replace=False)].astype(np.float64)
    labels: Optional[np.ndarray] = None
    history: List[float] = []
    for _ in range(max_iter):
        distances = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assigned = distances.argmin(axis=1)
        if labels is not None and np.array_equal(assigned, labels):
            break
        labels = assigned
        for j in range(k):
            members = points[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        history.append(within_cluster_sse(points, labels, centroids))
    assert labels is not None
    return KMeansResult(labels=labels, centroids=centroids, sse_history=tuple(history))


def cluster_cohort(
    cohort: TimeCohort,
    embeddings: np.ndarray,
    k: int,
    rng: np.random.Generator,
    restarts: int = 1,
    max_iter: int = 100,
) -> List[Cluster]:
    """k-means over per-record mean vectors; ids follow first-member order.

    A cohort smaller than k yields one singleton cluster per record. With
    several restarts the lowest final SSE wins.

    Raises:
        DimensionError: If the embeddings have no columns or do not align.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[1] == 0:
        raise DimensionError(f"embeddings must be (records, d>0), got {embeddings.shape}")
    if len(embeddings) != len(cohort):
        raise DimensionError(
            f"{len(embeddings)} embeddings for {len(cohort)} records in cohort {cohort.time_index}"
        )
    if k < 1:
        raise ContractError(f"k must be positive, got {k}")

    ids = [r.id for r in cohort.records]
    if len(cohort) < k:
        return [
            Cluster(i, embeddings[i].copy(), (record_id,))
            for i, record_id in enumerate(ids)
        ]

    best: Optional[KMeansResult] = None
    for _ in range(restarts):
        result = lloyd_kmeans(embeddings, k, rng, max_iter=max_iter)
        if best is None or result.sse < best.sse:
            best = result
    assert best is not None

    order = sorted(set(best.labels.tolist()), key=lambda j: int(np.argmax(best.labels == j)))
    clusters = []
    for new_id, j in enumerate(order):
        members = tuple(ids[i] for i in np.flatnonzero(best.labels == j))
        clusters.append(Cluster(new_id, best.centroids[j].copy(), members))
    return clusters


def link_clusters(
    clusters_t: Sequence[Cluster], clusters_next: Sequence[Cluster]
) -> Dict[int, int]:
    """Map each cluster to the nearest next-step centroid (lowest id on ties)."""
    if not clusters_t or not clusters_next:
        raise ContractError("link_clusters needs two non-empty cluster lists")
    successors = sorted(clusters_next, key=lambda c: c.cluster_id)
    targets = np.stack([c.centroid for c in successors])
    mapping: Dict[int, int] = {}
    for cluster in clusters_t:
        distances = ((targets - cluster.centroid) ** 2).sum(axis=1)
        mapping[cluster.cluster_id] = successors[int(np.argmin(distances))].cluster_id
    return mapping


# --- Chains ---


@dataclass(frozen=True)
class ClusteredCohort:
    time_index: int
    clusters: Tuple[Cluster, ...]


@dataclass(frozen=True)
class ChainLink:
    time_index: int
    cluster_id: int
    member_ids: Tuple[str, ...]


@dataclass(frozen=True)
class ClusterChain:
    chain_id: str
    links: Tuple[ChainLink, ...]

    @property
    def end_time(self) -> int:
        return self.links[-1].time_index


def build_chains(steps: Sequence[ClusteredCohort]) -> List[ClusterChain]:
    """Follow nearest-successor links from every cluster of the first step.

    Raises:
        GapError: If the steps are not consecutive time indices.
    """
    if len(steps) < 2:
        raise ContractError("a chain needs at least two time steps")
    start = steps[0].time_index
    for offset, step in enumerate(steps):
        if step.time_index != start + offset:
            raise GapError(start + offset)

    by_id = [{c.cluster_id: c for c in step.clusters} for step in steps]
    links = [
        link_clusters(steps[i].clusters, steps[i + 1].clusters)
        for i in range(len(steps) - 1)
    ]
    chains = []
    for first in sorted(steps[0].clusters, key=lambda c: c.cluster_id):
        current = first.cluster_id
        path = []
        for i, step in enumerate(steps):
            cluster = by_id[i][current]
            path.append(ChainLink(step.time_index, current, cluster.member_ids))
            if i < len(links):
                current = links[i][current]
        chains.append(ClusterChain(f"{steps[-1].time_index}:{first.cluster_id}", tuple(path)))
    return chains


# --- Samples ---


@dataclass(frozen=True, eq=False)
class SiteSample:
    """T embedded vectors for one site plus label (1 normal, 0 mutated)."""

    position: int
    inputs: np.ndarray
    label: int
    chain_id: str
    draw: int
    window_end: int

    @property
    def T(self) -> int:
        return int(self.inputs.shape[0])

    def to_json(self) -> Dict[str, Any]:
        return {
            "format_version": SAMPLE_FORMAT_VERSION,
            "position": self.position,
            "label": self.label,
            "chain": self.chain_id,
            "draw": self.draw,
            "window_end": self.window_end,
            "inputs": self.inputs.tolist(),
        }

    @classmethod
    def from_json(cls, row: Mapping[str, Any]) -> "SiteSample":
        if row.get("format_version") != SAMPLE_FORMAT_VERSION:
            raise DataError(
                f"unsupported sample format_version {row.get('format_version')!r}"
            )
        return cls(
            position=int(row["position"]),
            inputs=np.asarray(row["inputs"], dtype=np.float64),
            label=int(row["label"]),
            chain_id=str(row["chain"]),
            draw=int(row["draw"]),
            window_end=int(row["window_end"]),
        )


def sample_time_series(
    chain: ClusterChain,
    positions: Sequence[int],
    draws: int,
    rng: np.random.Generator,
    table: TrigramTable,
    records: Mapping[str, SequenceRecord],
    matrix_cache: Optional[Dict[str, np.ndarray]] = None,
) -> List[SiteSample]:
    """Draw one record per link and emit a sample per (draw, position).

    Inputs are the embeddings of the first T links; the label is 1 when the
    last link's residue equals the previous link's residue at that site.

    Raises:
        SamplingError: If a link has no members.
    """
    if draws < 1:
        raise ContractError(f"draws must be positive, got {draws}")
    for link in chain.links:
        if not link.member_ids:
            raise SamplingError(
                f"chain {chain.chain_id}: cluster {link.cluster_id} at {link.time_index} is empty"
            )
    cache = {} if matrix_cache is None else matrix_cache
    positions = list(positions)
    length = records[chain.links[0].member_ids[0]].length
    for p in positions:
        check_position(p, length)

    samples: List[SiteSample] = []
    for draw in range(draws):
        picked = [
            records[link.member_ids[int(rng.integers(len(link.member_ids)))]]
            for link in chain.links
        ]
        embedded = []
        for record in picked[:-1]:
            matrix = cache.get(record.id)
            if matrix is None:
                matrix = trigram_matrix(record.residues, table)
                cache[record.id] = matrix
            embedded.append(embed_from_matrix(matrix, positions))
        inputs = np.stack(embedded, axis=1)  # (positions, T, dim)
        last, previous = picked[-1].residues, picked[-2].residues
        for i, p in enumerate(positions):
            samples.append(
                SiteSample(
                    position=p,
                    inputs=inputs[i],
                    label=int(last[p] == previous[p]),
                    chain_id=chain.chain_id,
                    draw=draw,
                    window_end=chain.end_time,
                )
            )
    return samples


# --- Splits ---


@dataclass(frozen=True)
class SplitCounts:
    train: int
    validation: int
    test: int

    @property
    def total(self) -> int:
        return self.train + self.validation + self.test


def split_counts(n: int, spec: SplitSpec) -> SplitCounts:
    """Floor-based counts with at least one sample per split when possible."""
    capped = min(n, spec.per_cohort_cap)
    if capped <= 0:
        raise SplitError("cannot split an empty cohort")
    pool = math.floor(capped * spec.train_fraction + 1e-9)
    if pool == 0:
        pool = 1
    test = capped - pool
    if test == 0 and capped >= 2:
        pool, test = pool - 1, 1
    validation = math.floor(pool * spec.val_fraction_of_train + 1e-9)
    if validation == 0 and pool >= 2:
        validation = 1
    return SplitCounts(train=pool - validation, validation=validation, test=test)


@dataclass
class DatasetSplits:
    train: List[Any] = field(default_factory=list)
    validation: List[Any] = field(default_factory=list)
    test: List[Any] = field(default_factory=list)


def split_dataset(groups: Sequence[Sequence[T_co]], spec: SplitSpec) -> DatasetSplits:
    """Cap each group, then take the first fractions in corpus order.

    Raises:
        SplitError: If there are no groups or a group is empty.
    """
    if not groups:
        raise SplitError("no samples to split")
    splits = DatasetSplits()
    for index, group in enumerate(groups):
        if len(group) < 10:
            logger.warning(
                "Small cohort window, using floor-based split counts",
                group=index,
                samples=len(group),
            )
        counts = split_counts(len(group), spec)
        items = list(group[: counts.total])
        pool = counts.train + counts.validation
        splits.validation.extend(items[: counts.validation])
        splits.train.extend(items[counts.validation : pool])
        splits.test.extend(items[pool:])
    return splits


# --- End-to-end preprocessing ---


@dataclass
class PreparedDataset:
    samples: List[SiteSample]
    groups: Dict[int, List[int]]
    positions: List[int]
    cohort_sizes: Dict[int, int]
    chains: int


def _windows(
    steps: Sequence[ClusteredCohort], T: int
) -> List[List[ClusteredCohort]]:
    windows = []
    for start in range(len(steps) - T):
        window = list(steps[start : start + T + 1])
        if window[-1].time_index - window[0].time_index != T:
            logger.warning(
                "Skipping window with missing time steps",
                start=window[0].time_index,
                end=window[-1].time_index,
            )
            continue
        windows.append(window)
    return windows


def prepare_dataset(
    cohorts: Sequence[TimeCohort],
    table: TrigramTable,
    config: DatasetConfig,
    T: int,
    seed: int,
    threads: int = 1,
) -> PreparedDataset:
    """Run sanitization, clustering, chaining and sampling over a corpus."""
    cohorts = sanitize_cohorts(cohorts, seed)
    records = {r.id: r for cohort in cohorts for r in cohort.records}
    length = cohorts[0].records[0].length
    positions = list(config.positions) if config.positions else valid_positions(length)
    for p in positions:
        check_position(p, length)

    cache: Dict[str, np.ndarray] = {}
    steps = []
    for cohort in cohorts:
        vectors = []
        for record in cohort.records:
            matrix = trigram_matrix(record.residues, table)
            cache[record.id] = matrix
            vectors.append(record_mean_vector(record, table, matrix))
        clusters = cluster_cohort(
            cohort,
            np.stack(vectors),
            config.k,
            derive_rng(seed, "kmeans-init", cohort.time_index),
            restarts=config.kmeans_restarts,
            max_iter=config.kmeans_max_iter,
        )
        steps.append(ClusteredCohort(cohort.time_index, tuple(clusters)))
        logger.debug("Clustered cohort", time_index=cohort.time_index, clusters=len(clusters))

    windows = _windows(steps, T)
    if not windows:
        raise DataError(
            f"no window of {T + 1} consecutive cohorts in a corpus of {len(steps)}",
            hint="Lower T or supply more time steps",
        )

    jobs = []
    for window in windows:
        for ordinal, chain in enumerate(build_chains(window)):
            rng = derive_rng(seed, "chain-draws", chain.end_time, ordinal)
            jobs.append((chain, rng))

    def run(job: Tuple[ClusterChain, np.random.Generator]) -> List[SiteSample]:
        chain, rng = job
        return sample_time_series(
            chain, positions, config.draws, rng, table, records, matrix_cache=cache
        )

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        per_chain = list(pool.map(run, jobs))

    samples: List[SiteSample] = []
    groups: Dict[int, List[int]] = defaultdict(list)
    for (chain, _), chain_samples in zip(jobs, per_chain):
        for sample in chain_samples:
            groups[chain.end_time].append(len(samples))
            samples.append(sample)

    logger.info(
        "Built samples",
        windows=len(windows),
        chains=len(jobs),
        samples=len(samples),
        mutated=sum(1 for s in samples if s.label == 0),
    )
    return PreparedDataset(
        samples=samples,
        groups=dict(groups),
        positions=positions,
        cohort_sizes={c.time_index: len(c) for c in cohorts},
        chains=len(jobs),
    )
