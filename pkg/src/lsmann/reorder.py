"""Traversal-heat tracking and locality-aware layout optimization.

Searches record which edges they walk; pairs of nodes are scored by
structural proximity (shared in-neighbors, direct edges) boosted by how
hot the edge ran, and a greedy pass builds a placement order that pulls
high-scoring pairs within one prefetch window of each other. Applying
the resulting permutation rewrites physical placement only: ids, search
results, and neighbor sets are unchanged.
"""

from __future__ import annotations

import csv
import heapq
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import kernels


class HeatMap:
    """Symmetric per-edge traversal counts with per-pass decay."""

    def __init__(self, decay_factor: float = 0.5):
        if not 0.0 < decay_factor <= 1.0:
            raise ValueError("decay factor must be in (0, 1]")
        self.decay_factor = decay_factor
        self.counts: dict[tuple[int, int], float] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _key(u: int, v: int) -> tuple[int, int]:
        return (u, v) if u < v else (v, u)

    def record(self, u: int, v: int) -> None:
        if u == v:
            raise ValueError("self-edge has no heat")
        key = self._key(u, v)
        with self._lock:
            self.counts[key] = self.counts.get(key, 0.0) + 1.0

    def get(self, u: int, v: int) -> float:
        return self.counts.get(self._key(u, v), 0.0)

    @property
    def max_count(self) -> float:
        return max(self.counts.values(), default=0.0)

    def decay(self) -> None:
        with self._lock:
            self.counts = {k: c * self.decay_factor for k, c in self.counts.items()}

    def partners(self) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {}
        for u, v in self.counts:
            out.setdefault(u, set()).add(v)
            out.setdefault(v, set()).add(u)
        return out

    def dump_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["u", "v", "count"])
            for (u, v), c in sorted(self.counts.items()):
                writer.writerow([u, v, c])


@dataclass
class ScoreParams:
    """Pair-scoring configuration for layout decisions."""

    lam: float = 1.0
    w: int = 8
    mode: str = "heat"  # "heat" or "literal"
    query_codes: list | None = None  # literal mode: retained query codes
    node_codes: dict | None = None   # literal mode: id -> code
    m_bits: int = 128

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("heat weight must be nonnegative")
        if self.w < 1:
            raise ValueError("window must be >= 1")
        if self.mode not in ("heat", "literal"):
            raise ValueError(f"unknown score mode {self.mode!r}")


def in_neighbor_sets(graph: dict[int, list[int]]) -> dict[int, set[int]]:
    """In-neighbor set per node of a directed adjacency map."""
    out: dict[int, set[int]] = {u: set() for u in graph}
    for u, nbrs in graph.items():
        for v in nbrs:
            out.setdefault(v, set()).add(u)
    return out


def static_score(u: int, v: int, graph: dict[int, list[int]],
                 in_nbrs: dict[int, set[int]] | None = None) -> float:
    """Shared-in-neighbor count plus the number of direct edges (0..2)."""
    if u == v:
        raise ValueError("pair score needs distinct nodes")
    if in_nbrs is None:
        in_nbrs = in_neighbor_sets(graph)
    shared = len(in_nbrs.get(u, set()) & in_nbrs.get(v, set()))
    direct = (v in graph.get(u, ())) + (u in graph.get(v, ()))
    return float(shared + direct)


def _mean_hamming(u: int, sp: ScoreParams) -> float:
    if not sp.query_codes or not sp.node_codes or u not in sp.node_codes:
        return 0.0
    code = sp.node_codes[u]
    qs = np.ascontiguousarray(np.stack(sp.query_codes))
    counts = kernels.collision_counts(np.ascontiguousarray(code), qs, sp.m_bits)
    return float(np.mean(sp.m_bits - counts))


def score(u: int, v: int, graph: dict[int, list[int]], heat: HeatMap,
          sp: ScoreParams, in_nbrs: dict[int, set[int]] | None = None) -> float:
    """Pair score driving the layout objective.

    Heat mode scales the direct-edge term by observed traversal
    frequency, normalized against the hottest edge. Literal mode keeps
    the query-dependent form, with the Hamming factor averaged over the
    retained query-code sample.
    """
    if u == v:
        raise ValueError("pair score needs distinct nodes")
    if in_nbrs is None:
        in_nbrs = in_neighbor_sets(graph)
    shared = len(in_nbrs.get(u, set()) & in_nbrs.get(v, set()))
    direct = (v in graph.get(u, ())) + (u in graph.get(v, ()))
    if sp.mode == "heat":
        peak = heat.max_count
        hot = heat.get(u, v) / peak if peak > 0 else 0.0
        return shared + direct * (1.0 + sp.lam * hot)
    return shared + direct * (1.0 + sp.lam) * _mean_hamming(u, sp)


def layout_objective(phi: dict[int, int], graph: dict[int, list[int]],
                     heat: HeatMap, sp: ScoreParams) -> float:
    """Total pair score falling inside a forward window of size w.

    Sums score(u, v) over ordered pairs with 0 < phi(v) - phi(u) <= w.
    """
    _check_bijection(phi, set(graph))
    n = len(phi)
    by_pos = [0] * n
    for vid, pos in phi.items():
        by_pos[pos] = vid
    in_nbrs = in_neighbor_sets(graph)
    total = 0.0
    for i in range(n):
        for j in range(i + 1, min(i + sp.w, n - 1) + 1):
            total += score(by_pos[i], by_pos[j], graph, heat, sp, in_nbrs)
    return total


def _check_bijection(phi: dict[int, int], ids: set[int]) -> None:
    if set(phi) != ids:
        raise ValueError("permutation does not cover exactly the live ids")
    if sorted(phi.values()) != list(range(len(ids))):
        raise ValueError("permutation is not a bijection onto 0..n-1")


def identity_permutation(graph: dict[int, list[int]]) -> dict[int, int]:
    """Ascending-id placement, the baseline the greedy pass must beat."""
    return {vid: i for i, vid in enumerate(sorted(graph))}


def _partner_sets(graph: dict[int, list[int]], heat: HeatMap,
                  in_nbrs: dict[int, set[int]]) -> dict[int, set[int]]:
    # Nodes with a potentially nonzero pair score: direct edges either
    # way, heat partners, and nodes sharing an in-neighbor.
    partners: dict[int, set[int]] = {u: set() for u in graph}
    for u, nbrs in graph.items():
        for v in nbrs:
            if v in partners:
                partners[u].add(v)
                partners[v].add(u)
    for u, hps in heat.partners().items():
        if u in partners:
            partners[u].update(p for p in hps if p in partners)
    for u in graph:
        for w in in_nbrs.get(u, ()):
            for sibling in graph.get(w, ()):
                if sibling != u and sibling in partners:
                    partners[u].add(sibling)
    for u in partners:
        partners[u].discard(u)
    return partners


def reorder(graph: dict[int, list[int]], heat: HeatMap,
            sp: ScoreParams) -> dict[int, int]:
    """Greedy window placement maximizing the layout objective.

    Starts from the node with the largest summed pair score, then
    repeatedly appends the unplaced node scoring highest against the
    trailing w placed nodes. Never returns a layout worse than the
    ascending-id baseline.
    """
    if not graph:
        return {}
    in_nbrs = in_neighbor_sets(graph)
    partners = _partner_sets(graph, heat, in_nbrs)

    def pair(u: int, v: int) -> float:
        return score(u, v, graph, heat, sp, in_nbrs)

    weighted = {u: sum(pair(u, v) for v in partners[u]) for u in graph}
    start = min(graph, key=lambda u: (-weighted[u], u))

    placed: dict[int, int] = {}
    window: deque[int] = deque()
    gains = {u: 0.0 for u in graph}
    heap: list[tuple[float, int]] = [(0.0, u) for u in sorted(graph) if u != start]
    heapq.heapify(heap)

    def place(z: int) -> None:
        placed[z] = len(placed)
        window.append(z)
        for y in partners[z]:
            if y not in placed:
                gains[y] += pair(z, y)
                heapq.heappush(heap, (-gains[y], y))
        if len(window) > sp.w:
            gone = window.popleft()
            for y in partners[gone]:
                if y not in placed:
                    gains[y] -= pair(gone, y)
                    heapq.heappush(heap, (-gains[y], y))

    place(start)
    while len(placed) < len(graph):
        while True:
            neg_gain, u = heapq.heappop(heap)
            if u not in placed and -neg_gain == gains[u]:
                break
        place(u)

    identity = identity_permutation(graph)
    if layout_objective(placed, graph, heat, sp) >= \
            layout_objective(identity, graph, heat, sp):
        return placed
    return identity


def window_span(path: list[int], slot_of, w: int) -> int:
    """Distinct w-sized physical windows a traversal path touches."""
    if w < 1:
        raise ValueError("window must be >= 1")
    return len({slot_of(v) // w for v in path})


def apply_permutation(index, phi: dict[int, int]) -> None:
    """Rewrite vector slots and LSM key order under ``phi``.

    Requires a quiescent index. Logical reads are unchanged afterward;
    the heat map is decayed so the next pass favors fresh traffic.
    """
    _check_bijection(phi, set(index.vectors.id_to_slot))
    index.vectors.apply_slot_assignment(dict(phi))
    index.graph.rewrite_keys(dict(phi))
    index.heat.decay()


def mean_window_span(paths: list[list[int]], slot_of, w: int) -> float:
    """Average distinct-window count across recorded traversal paths."""
    spans = [window_span(p, slot_of, w) for p in paths if p]
    return float(sum(spans) / len(spans)) if spans else 0.0
