"""Dataset ingestion, exact ground truth, recall, and update workloads.

File formats are the classic descriptor-corpus layouts: every record is
a little-endian int32 dimension header followed by the payload (float32
per component for fvecs, int32 for ivecs, one byte for bvecs). The
ground-truth routine here is the brute-force oracle every recall number
is measured against; it deliberately shares no code with the index's
distance path.
"""

from __future__ import annotations

import resource
import struct
import time
from dataclasses import dataclass, field

import numpy as np

_ELEM = {"fvecs": ("<f4", 4), "bvecs": ("u1", 1), "ivecs": ("<i4", 4)}

SCENARIOS = {
    "insert_only": (1.0, 0.0),
    "insert_heavy": (0.7, 0.3),
    "balanced": (0.5, 0.5),
    "delete_heavy": (0.3, 0.7),
}


class DatasetError(ValueError):
    """Malformed dataset file (bad header, truncation, size mismatch)."""


def detect_format(path: str) -> str:
    for fmt in _ELEM:
        if path.endswith("." + fmt):
            return fmt
    raise DatasetError(f"cannot infer format from {path!r}; pass format explicitly")


def read_vectors(path: str, fmt: str | None = None,
                 limit: int | None = None) -> np.ndarray:
    """Decode a vector file; bvecs bytes widen to float32.

    Every record's dimension header must match the first one; a mismatch
    or short record is reported with its record index.
    """
    fmt = fmt if fmt is not None else detect_format(path)
    if fmt not in _ELEM:
        raise DatasetError(f"unknown format {fmt!r}")
    dtype, elem_size = _ELEM[fmt]
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise DatasetError(f"{path}: too short for a dimension header")
    (dim,) = struct.unpack_from("<i", raw, 0)
    if dim <= 0:
        raise DatasetError(f"{path}: record 0 has nonpositive dimension {dim}")
    record = 4 + dim * elem_size
    if len(raw) % record != 0:
        raise DatasetError(
            f"{path}: {len(raw)} bytes is not a multiple of record size {record} "
            f"(truncated at record {len(raw) // record})")
    n = len(raw) // record
    count = n if limit is None else min(limit, n)
    if fmt == "bvecs":
        rows = np.frombuffer(raw, dtype=np.uint8).reshape(n, record)
        dims = rows[:, :4].copy().view("<i4").ravel()
        payload = rows[:count, 4:]
        bad = np.nonzero(dims != dim)[0]
        if len(bad):
            raise DatasetError(f"{path}: record {bad[0]} has dimension "
                               f"{dims[bad[0]]}, expected {dim}")
        return payload.astype(np.float32)
    rows = np.frombuffer(raw, dtype="<i4").reshape(n, record // 4)
    dims = rows[:, 0]
    bad = np.nonzero(dims != dim)[0]
    if len(bad):
        raise DatasetError(f"{path}: record {bad[0]} has dimension "
                           f"{dims[bad[0]]}, expected {dim}")
    payload = rows[:count, 1:]
    if fmt == "fvecs":
        return payload.copy().view("<f4").astype(np.float32)
    return payload.astype(np.int32)


def write_vectors(path: str, vectors: np.ndarray, fmt: str | None = None) -> None:
    """Write rows in the record-per-vector header format."""
    fmt = fmt if fmt is not None else detect_format(path)
    n, dim = vectors.shape
    with open(path, "wb") as f:
        header = struct.pack("<i", dim)
        if fmt == "fvecs":
            data = np.ascontiguousarray(vectors, dtype="<f4")
        elif fmt == "bvecs":
            data = np.ascontiguousarray(vectors, dtype=np.uint8)
        elif fmt == "ivecs":
            data = np.ascontiguousarray(vectors, dtype="<i4")
        else:
            raise DatasetError(f"unknown format {fmt!r}")
        for i in range(n):
            f.write(header)
            f.write(data[i].tobytes())


def ground_truth(queries: np.ndarray, corpus_ids: list[int],
                 corpus_vectors: np.ndarray, k: int) -> list[list[int]]:
    """Exact top-k ids per query by Euclidean distance, ties to smaller id.

    Brute force in float64, independent of the index code paths.
    """
    if len(corpus_ids) == 0:
        raise ValueError("empty corpus")
    if k > len(corpus_ids):
        raise ValueError(f"k={k} exceeds corpus size {len(corpus_ids)}")
    ids = np.asarray(corpus_ids, dtype=np.int64)
    corpus = np.asarray(corpus_vectors, dtype=np.float64)
    out = []
    for q in np.asarray(queries, dtype=np.float64):
        diff = corpus - q
        d2 = np.einsum("ij,ij->i", diff, diff)
        order = np.lexsort((ids, d2))
        out.append([int(ids[i]) for i in order[:k]])
    return out


def recall_at_k(retrieved: list[int], truth: list[int], k: int) -> float:
    """Fraction of the true top-k present in the retrieved set."""
    if len(truth) != k:
        raise ValueError(f"ground truth has {len(truth)} ids, expected {k}")
    return len(set(retrieved) & set(truth)) / k


@dataclass
class WorkloadSpec:
    """One dynamic-update scenario: ratios, batch sizing, reproducibility."""

    insert_ratio: float
    delete_ratio: float
    batches: int
    batch_size: int  # conventionally 1% of the initial live count
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.insert_ratio <= 1 and 0 <= self.delete_ratio <= 1):
            raise ValueError("ratios must be in [0, 1]")
        if abs(self.insert_ratio + self.delete_ratio - 1.0) > 1e-9:
            raise ValueError("insert and delete ratios must sum to 1")
        if self.batches < 1 or self.batch_size < 1:
            raise ValueError("batches and batch size must be positive")

    @classmethod
    def for_scenario(cls, name: str, batches: int, initial_live: int,
                     seed: int = 0, batch_size: int | None = None) -> "WorkloadSpec":
        if name not in SCENARIOS:
            raise ValueError(f"unknown scenario {name!r}; "
                             f"choose from {sorted(SCENARIOS)}")
        ins, dele = SCENARIOS[name]
        size = batch_size if batch_size is not None else max(1, initial_live // 100)
        return cls(ins, dele, batches, size, seed)


@dataclass
class BatchRow:
    """Per-batch measurements; wall-clock and memory columns are
    environment-dependent and excluded from determinism comparisons."""

    batch: int
    inserts: int
    deletes: int
    live_count: int
    recall: float
    vector_fetches: int
    neighbor_list_fetches: int
    nodes_visited: int
    bytes_read: int
    update_ms: float
    search_ms: float
    peak_rss_kb: int

    DETERMINISTIC = ("batch", "inserts", "deletes", "live_count", "recall",
                     "vector_fetches", "neighbor_list_fetches",
                     "nodes_visited", "bytes_read")
    TIMING = ("update_ms", "search_ms", "peak_rss_kb")


@dataclass
class BenchReport:
    """All batch rows of one workload run."""

    scenario: str
    rows: list[BatchRow] = field(default_factory=list)
    exhausted: bool = False  # reserve pool ran out; run ended early

    def deterministic_rows(self) -> list[tuple]:
        return [tuple(getattr(r, c) for c in BatchRow.DETERMINISTIC)
                for r in self.rows]

    def to_csv(self, path: str) -> None:
        import csv
        cols = BatchRow.DETERMINISTIC + BatchRow.TIMING
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(cols)
            for r in self.rows:
                writer.writerow([getattr(r, c) for c in cols])


def run_workload(index, spec: WorkloadSpec, live: dict[int, np.ndarray],
                 reserve: list[np.ndarray], queries: np.ndarray, k: int = 10,
                 ef_search: int | None = None, filter_params=None,
                 scenario: str = "custom",
                 per_batch_check=None) -> BenchReport:
    """Drive mixed insert/delete batches and measure after each one.

    ``live`` mirrors the index content (id -> vector) purely for
    ground-truth computation; ``reserve`` supplies insert payloads.
    Deletions pick uniformly among live ids. Ground truth is recomputed
    per batch against the mutated corpus.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    report = BenchReport(scenario=scenario)
    reserve_pos = 0
    for batch in range(1, spec.batches + 1):
        n_ins = round(spec.batch_size * spec.insert_ratio)
        n_del = spec.batch_size - n_ins
        ops = ["i"] * n_ins + ["d"] * n_del
        rng.shuffle(ops)

        inserts = deletes = 0
        update_start = time.perf_counter()
        for op in ops:
            if op == "i":
                if reserve_pos >= len(reserve):
                    report.exhausted = True
                    break
                vid = index.insert(reserve[reserve_pos])
                live[vid] = reserve[reserve_pos]
                reserve_pos += 1
                inserts += 1
            else:
                if not live:
                    break
                victims = sorted(live)
                vid = victims[int(rng.integers(len(victims)))]
                index.delete(vid)
                del live[vid]
                deletes += 1
        update_ms = (time.perf_counter() - update_start) * 1000.0
        mean_update_ms = update_ms / max(inserts + deletes, 1)

        if per_batch_check is not None:
            per_batch_check(index)

        ids = sorted(live)
        corpus = np.stack([live[v] for v in ids])
        truth = ground_truth(queries, ids, corpus, k)

        before = index.counters.snapshot()
        recalls = []
        search_start = time.perf_counter()
        for qi, q in enumerate(queries):
            result = index.search(q, k, ef_search=ef_search,
                                  filter_params=filter_params)
            recalls.append(recall_at_k(result.ids, truth[qi], k))
        search_ms = (time.perf_counter() - search_start) * 1000.0 / len(queries)
        delta = index.counters.snapshot() - before

        report.rows.append(BatchRow(
            batch=batch,
            inserts=inserts,
            deletes=deletes,
            live_count=len(live),
            recall=float(np.mean(recalls)),
            vector_fetches=delta.vector_fetches,
            neighbor_list_fetches=delta.neighbor_list_fetches,
            nodes_visited=delta.nodes_visited,
            bytes_read=delta.bytes_read,
            update_ms=mean_update_ms,
            search_ms=search_ms,
            peak_rss_kb=resource.getrusage(resource.RUSAGE_SELF).ru_maxrss,
        ))
        if report.exhausted:
            break
    return report
