"""Sign-random-projection codes and collision-based neighbor filtering.

Each vector gets an m-bit code: bit i is the sign of its dot product
with the i-th Gaussian projection (zero counts as positive). The number
of matching bits between two codes estimates their angle, so candidates
whose codes collide too little with the query can be skipped before
their vectors are fetched. The skip threshold comes from a one-sided
Hoeffding bound, which keeps the false-negative rate under a target
error; a sampling ratio additionally floors how many candidates are
always explored.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels

CODE_MAGIC = b"LVSH"
CODE_VERSION = 1
_CODE_HEADER = struct.Struct("<4sII")


@dataclass
class ProjectionSet:
    """m Gaussian projection directions, reproducible from the seed."""

    m: int
    dim: int
    seed: int
    vectors: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.m <= 0 or self.m % 8 != 0:
            raise ValueError("projection count must be a positive multiple of 8")
        if self.vectors is None:
            rng = np.random.Generator(np.random.PCG64(self.seed))
            self.vectors = rng.standard_normal((self.m, self.dim)).astype(np.float32)

    @property
    def words(self) -> int:
        return (self.m + 63) // 64


def hash_vector(x: np.ndarray, proj: ProjectionSet) -> np.ndarray:
    """Packed sign code of one vector (uint64 words, LSB-first bits)."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.shape != (proj.dim,):
        raise ValueError(f"expected dimension {proj.dim}, got shape {x.shape}")
    return kernels.simhash_codes(x[None, :], proj.vectors)[0]


def hash_vectors(x: np.ndarray, proj: ProjectionSet) -> np.ndarray:
    """Packed sign codes for each row of ``x``."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != proj.dim:
        raise ValueError(f"expected (n, {proj.dim}), got shape {x.shape}")
    return kernels.simhash_codes(x, proj.vectors)


def collisions(code_a: np.ndarray, code_b: np.ndarray, m: int) -> int:
    """Number of matching bits between two codes (m minus Hamming distance)."""
    return int(kernels.collision_counts(code_a, code_b[None, :], m)[0])


def collision_probability(delta: float, q: np.ndarray) -> float:
    """Per-bit collision probability for vectors within distance ``delta`` of ``q``.

    Uses the angular collision law with the maximal angle consistent with
    ``delta`` at the query's norm (vectors treated as if on the query's
    sphere); infinite ``delta`` degenerates to probability 0.
    """
    norm_sq = max(float(np.dot(q.astype(np.float64), q.astype(np.float64))), 1e-30)
    with np.errstate(over="ignore", invalid="ignore"):
        cos_theta = float(np.clip(1.0 - (delta * delta) / (2.0 * norm_sq), -1.0, 1.0))
    theta = math.acos(cos_theta)
    return 1.0 - theta / math.pi


def collision_threshold(m: int, epsilon: float, delta: float, q: np.ndarray) -> int:
    """Minimum collision count below which a candidate may be skipped.

    One-sided Hoeffding bound: among candidates within ``delta`` of the
    query, at most an ``epsilon`` fraction fall below the returned count.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must be in (0, 1)")
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    p = collision_probability(delta, q)
    slack = math.sqrt((m / 2.0) * math.log(1.0 / epsilon))
    t = math.ceil(m * p - slack)
    return min(max(t, 0), m)


@dataclass
class FilterParams:
    """Neighbor-selection knobs for bottom-layer traversal."""

    epsilon: float | None = 0.05  # None disables the collision threshold
    rho: float = 1.0
    delta: float = math.inf

    def __post_init__(self):
        if self.epsilon is not None and not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must be in (0, 1)")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must be in (0, 1]")


def filter_neighbors(q_code: np.ndarray,
                     cands: list[tuple[int, np.ndarray]],
                     fp: FilterParams, threshold: int,
                     m: int | None = None) -> list[int]:
    """Select which candidates to actually evaluate.

    Keeps every candidate with at least ``threshold`` collisions, plus
    enough of the best-colliding rest to always explore a
    ceil(rho * n) floor. Returned in descending collision count, ties
    broken by smaller id. ``m`` defaults to the packed code capacity.
    """
    n = len(cands)
    if n == 0:
        return []
    if m is None:
        m = q_code.shape[0] * 64
    codes = np.ascontiguousarray(np.stack([code for _, code in cands]))
    counts = kernels.collision_counts(np.ascontiguousarray(q_code), codes, m)
    order = sorted(range(n), key=lambda i: (-counts[i], cands[i][0]))
    floor = math.ceil(fp.rho * n)
    passing = int(np.count_nonzero(counts >= threshold))
    take = max(floor, passing)
    return [cands[i][0] for i in order[:take]]


class CodeTable:
    """In-memory codes for all live ids, persistable as a sidecar file."""

    def __init__(self, m: int):
        if m <= 0 or m % 8 != 0:
            raise ValueError("code length must be a positive multiple of 8")
        self.m = m
        self.words = (m + 63) // 64
        self.codes: dict[int, np.ndarray] = {}

    def register(self, vid: int, code: np.ndarray) -> None:
        if code.shape != (self.words,):
            raise ValueError("code has wrong length")
        self.codes[vid] = code

    def remove(self, vid: int) -> None:
        self.codes.pop(vid, None)

    def get(self, vid: int) -> np.ndarray:
        return self.codes[vid]

    def __contains__(self, vid: int) -> bool:
        return vid in self.codes

    def __len__(self) -> int:
        return len(self.codes)

    def save(self, path: str) -> None:
        nbytes = self.m // 8
        with open(path, "wb") as f:
            f.write(_CODE_HEADER.pack(CODE_MAGIC, CODE_VERSION, self.m))
            for vid in sorted(self.codes):
                f.write(struct.pack("<Q", vid))
                f.write(self.codes[vid].tobytes()[:nbytes])

    @classmethod
    def load(cls, path: str) -> "CodeTable":
        with open(path, "rb") as f:
            raw = f.read()
        magic, version, m = _CODE_HEADER.unpack_from(raw, 0)
        if magic != CODE_MAGIC:
            raise ValueError(f"bad code-table magic {magic!r}")
        if version != CODE_VERSION:
            raise ValueError(f"unsupported code-table version {version}")
        table = cls(m)
        nbytes = m // 8
        record = 8 + nbytes
        offset = _CODE_HEADER.size
        padded = table.words * 8
        while offset < len(raw):
            if offset + record > len(raw):
                raise ValueError(f"truncated code table at offset {offset}")
            (vid,) = struct.unpack_from("<Q", raw, offset)
            buf = raw[offset + 8: offset + record].ljust(padded, b"\0")
            table.codes[vid] = np.frombuffer(buf, dtype="<u8").copy()
            offset += record
        return table
