"""Hierarchical proximity-graph index over disk-resident storage.

Upper layers (level 2 and above) are small in-memory adjacency maps used
for long-range routing; the bottom layer (level 1) contains every vector
and lives in the LSM edge store. Searches descend greedily through the
upper layers, then run a best-first scan over the bottom layer where
sign-code filtering decides which neighbors are worth a vector fetch.
Inserts link each new node to its nearest neighbors per layer; deletes
relink the hole left behind so local connectivity survives.
"""

from __future__ import annotations

import heapq
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels, simhash
from .lsm_store import LsmGraphStore
from .metrics import CounterSnapshot, IoCounters
from .reorder import HeatMap
from .vector_store import NotFound, VectorStore, distance

GRAPH_MAGIC = b"LVHG"
GRAPH_VERSION = 1
_NO_ENTRY = 0xFFFFFFFFFFFFFFFF


def sample_level(rng: np.random.Generator) -> int:
    """Draw an insertion level with Pr(L = l) proportional to e^-l, l >= 1."""
    u = rng.random()
    while u <= 0.0:
        u = rng.random()
    return 1 + int(-math.log(u))


@dataclass
class HnswParams:
    """Graph construction and search knobs."""

    m: int = 16
    m_max: int = 32
    ef_construction: int = 100
    ef_search: int = 50

    def __post_init__(self):
        if not 1 <= self.m <= self.m_max:
            raise ValueError("need 1 <= m <= m_max")
        if self.ef_construction < 1 or self.ef_search < 1:
            raise ValueError("pool sizes must be positive")


@dataclass
class SearchResult:
    """Nearest ids with distances plus the I/O the query cost."""

    ids: list[int]
    dists: list[float]
    io: CounterSnapshot
    partial: bool = False
    path: list[int] = field(default_factory=list)
    expanded_degree_sum: int = 0
    expanded_count: int = 0


class _Stats:
    __slots__ = ("degree_sum", "expanded", "path")

    def __init__(self):
        self.degree_sum = 0
        self.expanded = 0
        self.path: list[int] = []


class HnswIndex:
    """Memory/disk hybrid proximity graph with dynamic updates.

    One directory holds everything: the vector slot file and its table,
    the LSM run files for bottom-layer adjacency, the code sidecar, the
    upper-layer snapshot, and a meta file tying parameters together.
    """

    def __init__(self, directory: str, dim: int | None = None,
                 params: HnswParams | None = None,
                 filter_params: simhash.FilterParams | None = None,
                 m_bits: int = 128, seed: int = 0,
                 memtable_bytes: int = 4 * 1024 * 1024,
                 bloom_enabled: bool = False,
                 op_log: list | None = None):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)
        self.meta_path = os.path.join(directory, "meta.json")
        self.counters = IoCounters()
        self.heat = HeatMap()

        meta = None
        if os.path.exists(self.meta_path):
            with open(self.meta_path) as f:
                meta = json.load(f)
            dim = meta["dim"]
            params = HnswParams(**meta["params"])
            m_bits = meta["m_bits"]
            seed = meta["seed"]
        elif dim is None:
            raise ValueError("dimension required for a new index")

        self.params = params if params is not None else HnswParams()
        self.filter_params = (filter_params if filter_params is not None
                              else simhash.FilterParams())
        self.seed = seed
        self.m_bits = m_bits

        self.vectors = VectorStore(directory, dim=dim, counters=self.counters)
        self.graph = LsmGraphStore(
            os.path.join(directory, "graph"), counters=self.counters,
            memtable_bytes=memtable_bytes, bloom_enabled=bloom_enabled,
            op_log=op_log,
        )
        self.projections = simhash.ProjectionSet(m_bits, self.vectors.dim, seed)
        self.codes = simhash.CodeTable(m_bits)
        self.layers: dict[int, dict[int, list[int]]] = {}
        self.entry_point: int | None = None
        self.l_max = 0
        self.rng = np.random.Generator(np.random.PCG64(seed))

        if meta is not None:
            self.vectors.next_id = meta["next_id"]
            self.rng.bit_generator.state = meta["rng_state"]
            codes_path = os.path.join(directory, "codes.lvsh")
            if os.path.exists(codes_path):
                self.codes = simhash.CodeTable.load(codes_path)
            self._load_upper(os.path.join(directory, "upper.lvhg"))

    # -- persistence -------------------------------------------------------

    def close(self) -> None:
        self.codes.save(os.path.join(self.directory, "codes.lvsh"))
        self._save_upper(os.path.join(self.directory, "upper.lvhg"))
        meta = {
            "dim": self.vectors.dim,
            "params": {
                "m": self.params.m, "m_max": self.params.m_max,
                "ef_construction": self.params.ef_construction,
                "ef_search": self.params.ef_search,
            },
            "m_bits": self.m_bits,
            "seed": self.seed,
            "next_id": self.vectors.next_id,
            "rng_state": self.rng.bit_generator.state,
        }
        tmp = self.meta_path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(meta, f)
        os.replace(tmp, self.meta_path)
        self.graph.close()
        self.vectors.close()

    def _save_upper(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            entry = self.entry_point if self.entry_point is not None else _NO_ENTRY
            f.write(struct.pack("<4sIIQ", GRAPH_MAGIC, GRAPH_VERSION, self.l_max, entry))
            f.write(struct.pack("<I", len(self.layers)))
            for level in sorted(self.layers):
                adj = self.layers[level]
                f.write(struct.pack("<IQ", level, len(adj)))
                for vid in sorted(adj):
                    nbrs = adj[vid]
                    f.write(struct.pack(f"<QI{len(nbrs)}Q", vid, len(nbrs), *nbrs))
        os.replace(tmp, path)

    def _load_upper(self, path: str) -> None:
        if not os.path.exists(path):
            return
        with open(path, "rb") as f:
            raw = f.read()
        magic, version, l_max, entry = struct.unpack_from("<4sIIQ", raw, 0)
        if magic != GRAPH_MAGIC or version != GRAPH_VERSION:
            raise ValueError(f"bad upper-layer snapshot {path}")
        self.l_max = l_max
        self.entry_point = None if entry == _NO_ENTRY else entry
        offset = struct.calcsize("<4sIIQ")
        (n_layers,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        for _ in range(n_layers):
            level, count = struct.unpack_from("<IQ", raw, offset)
            offset += 12
            adj: dict[int, list[int]] = {}
            for _ in range(count):
                vid, deg = struct.unpack_from("<QI", raw, offset)
                offset += 12
                adj[vid] = list(struct.unpack_from(f"<{deg}Q", raw, offset))
                offset += 8 * deg
            self.layers[level] = adj

    # -- basic state -------------------------------------------------------

    @property
    def live_count(self) -> int:
        return self.vectors.live_count

    def bottom_adjacency(self) -> dict[int, list[int]]:
        """Materialize the disk-resident layer as an adjacency map."""
        return {vid: self.graph.neighbors(vid) for vid in self.vectors.live_ids()}

    def _vec(self, vid: int) -> np.ndarray:
        return self.vectors.get(vid)

    def _dist(self, q: np.ndarray, vid: int, cache: dict[int, float]) -> float:
        d = cache.get(vid)
        if d is None:
            d = distance(q, self._vec(vid))
            cache[vid] = d
        return d

    def _fill_dists(self, q32: np.ndarray, ids: list[int],
                    cache: dict[int, float], tolerate_missing: bool = False) -> None:
        """Batch-fetch vectors and cache their distances to the query.

        Ids that vanished under a concurrent delete get an infinite
        distance when tolerated, so traversal skips them.
        """
        todo = [v for v in ids if v not in cache]
        if not todo:
            return
        try:
            mat = self.vectors.get_batch(todo)
        except NotFound:
            if not tolerate_missing:
                raise
            for v in todo:
                try:
                    cache[v] = kernels.euclidean(q32, self._vec(v))
                except NotFound:
                    cache[v] = math.inf
            return
        for v, dv in zip(todo, kernels.euclidean_batch(q32, mat)):
            cache[v] = float(dv)

    def _scored_neighbors(self, node: int, nbrs: list[int]) -> list[tuple[float, int]]:
        """Ascending (distance, id) of ``nbrs`` relative to ``node``."""
        xv = self._vec(node)
        mat = self.vectors.get_batch(nbrs)
        dists = kernels.euclidean_batch(xv, mat)
        return sorted((float(d), v) for d, v in zip(dists, nbrs))

    # -- layer search ------------------------------------------------------

    def greedy_search_layer(self, q: np.ndarray, entry: int, level: int,
                            cache: dict[int, float] | None = None) -> int:
        """Walk layer ``level`` to a 1-hop local minimum of distance to ``q``."""
        adj = self.layers.get(level, {})
        if entry not in adj:
            raise KeyError(f"entry {entry} not present at layer {level}")
        cache = cache if cache is not None else {}
        q32 = np.ascontiguousarray(q, dtype=np.float32)
        cur = entry
        cur_d = self._dist(q32, cur, cache)
        while True:
            best, best_d = cur, cur_d
            self._fill_dists(q32, adj[cur], cache)
            for v in adj[cur]:
                dv = cache[v]
                if (dv, v) < (best_d, best):
                    best, best_d = v, dv
            if best == cur:
                return cur
            cur, cur_d = best, best_d

    def _search_layer_ef(self, q: np.ndarray, entry: int, level: int, ef: int,
                         cache: dict[int, float]) -> list[tuple[float, int]]:
        """Best-first search over one in-memory layer; ascending (dist, id)."""
        adj = self.layers.get(level, {})
        if entry not in adj:
            if not adj:
                return []
            entry = min(adj)
        q32 = np.ascontiguousarray(q, dtype=np.float32)
        d0 = self._dist(q32, entry, cache)
        visited = {entry}
        candidates = [(d0, entry)]
        results = [(-d0, entry)]
        while candidates:
            d, u = heapq.heappop(candidates)
            if len(results) >= ef and d > -results[0][0]:
                break
            fresh = [v for v in adj.get(u, ()) if v not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            self._fill_dists(q32, fresh, cache)
            for v in fresh:
                dv = cache[v]
                if len(results) < ef or dv < -results[0][0]:
                    heapq.heappush(candidates, (dv, v))
                    heapq.heappush(results, (-dv, v))
                    if len(results) > ef:
                        heapq.heappop(results)
        return sorted((-nd, v) for nd, v in results)

    def _bottom_search(self, q: np.ndarray, entry: int, ef: int,
                       fp: simhash.FilterParams | None, k: int,
                       cache: dict[int, float], stats: _Stats | None = None,
                       record_heat: bool = False) -> list[tuple[float, int]]:
        """Best-first search over the LSM-resident bottom layer.

        With ``fp`` set, each expansion hashes against the candidates'
        stored codes and only the selected subset gets a vector fetch;
        the collision threshold tightens as the running k-th best
        distance shrinks.
        """
        q32 = np.ascontiguousarray(q, dtype=np.float32)
        q_code = simhash.hash_vector(q32, self.projections) if fp is not None else None
        try:
            d0 = self._dist(q32, entry, cache)
        except NotFound:
            return []
        visited = {entry}
        candidates = [(d0, entry)]
        results = [(-d0, entry)]
        topk = [-d0]  # max-heap over the best k distances seen
        while candidates:
            d, u = heapq.heappop(candidates)
            if len(results) >= ef and d > -results[0][0]:
                break
            self.counters.count_node_visit()
            nbrs = self.graph.neighbors(u)
            if stats is not None:
                stats.degree_sum += len(nbrs)
                stats.expanded += 1
                stats.path.append(u)
            fresh = [v for v in nbrs if v not in visited]
            if not fresh:
                continue
            if fp is not None:
                pairs = [(v, self.codes.get(v)) for v in fresh if v in self.codes]
                delta = -topk[0] if len(topk) >= k else math.inf
                if fp.epsilon is None or delta <= 0.0:
                    threshold = 0
                else:
                    threshold = simhash.collision_threshold(
                        self.m_bits, fp.epsilon, delta, q)
                selected = simhash.filter_neighbors(
                    q_code, pairs, fp, threshold, self.m_bits)
            else:
                selected = fresh
            visited.update(selected)
            self._fill_dists(q32, selected, cache, tolerate_missing=True)
            for v in selected:
                dv = cache[v]
                if not math.isfinite(dv):
                    continue
                if record_heat:
                    self.heat.record(u, v)
                if len(topk) < k:
                    heapq.heappush(topk, -dv)
                elif dv < -topk[0]:
                    heapq.heapreplace(topk, -dv)
                if len(results) < ef or dv < -results[0][0]:
                    heapq.heappush(candidates, (dv, v))
                    heapq.heappush(results, (-dv, v))
                    if len(results) > ef:
                        heapq.heappop(results)
        return sorted((-nd, v) for nd, v in results)

    # -- public operations ---------------------------------------------------

    def search(self, q: np.ndarray, k: int,
               ef_search: int | None = None,
               filter_params: simhash.FilterParams | None = None,
               record_heat: bool = False) -> SearchResult:
        """Return the k nearest live vectors to ``q``."""
        if k < 1:
            raise ValueError("k must be positive")
        q = np.asarray(q, dtype=np.float32)
        before = self.counters.snapshot()
        if self.entry_point is None:
            return SearchResult([], [], self.counters.snapshot() - before,
                                partial=True)
        fp = filter_params if filter_params is not None else self.filter_params
        ef = max(ef_search if ef_search is not None else self.params.ef_search, k)
        cache: dict[int, float] = {}
        stats = _Stats()
        cur = self.entry_point
        for level in range(self.l_max, 1, -1):
            if level in self.layers and cur in self.layers[level]:
                cur = self.greedy_search_layer(q, cur, level, cache)
        found = self._bottom_search(q, cur, ef, fp, k, cache, stats,
                                    record_heat=record_heat)
        live = [(d, v) for d, v in found if self.vectors.contains(v)][:k]
        return SearchResult(
            ids=[v for _, v in live],
            dists=[d for d, _ in live],
            io=self.counters.snapshot() - before,
            partial=len(live) < k,
            path=stats.path,
            expanded_degree_sum=stats.degree_sum,
            expanded_count=stats.expanded,
        )

    def insert(self, x: np.ndarray, level: int | None = None) -> int:
        """Add a vector, wiring it into every layer up to its sampled level."""
        x = np.asarray(x, dtype=np.float32)
        vid = self.vectors.append(x)
        lvl = level if level is not None else sample_level(self.rng)
        if lvl < 1:
            raise ValueError("level must be >= 1")
        try:
            self._wire(vid, x, lvl)
        except BaseException:
            self._unwire_partial(vid)
            raise
        self.codes.register(vid, simhash.hash_vector(x, self.projections))
        return vid

    def _unwire_partial(self, vid: int) -> None:
        # Best-effort rollback after a failed insert: strip any edges and
        # memberships already written, then tombstone the vector.
        for layer in list(self.layers):
            adj = self.layers[layer]
            if vid in adj:
                for p in adj.pop(vid):
                    if p in adj and vid in adj[p]:
                        adj[p].remove(vid)
            if not adj:
                del self.layers[layer]
        for p in self.graph.neighbors(vid):
            self.graph.delete_edge(vid, p)
            self.graph.delete_edge(p, vid)
        if self.entry_point == vid:
            self.entry_point = None
            self.l_max = 0
        self.vectors.mark_deleted(vid)

    def _wire(self, vid: int, x: np.ndarray, lvl: int) -> None:
        if self.entry_point is None:
            for layer in range(2, lvl + 1):
                self.layers.setdefault(layer, {})[vid] = []
            self.entry_point = vid
            self.l_max = max(lvl, 1)
            return

        cache: dict[int, float] = {}
        cur = self.entry_point
        for layer in range(self.l_max, lvl, -1):
            if layer in self.layers and cur in self.layers[layer]:
                cur = self.greedy_search_layer(x, cur, layer, cache)

        for layer in range(min(lvl, self.l_max), 1, -1):
            adj = self.layers.setdefault(layer, {})
            found = self._search_layer_ef(x, cur, layer, self.params.ef_construction,
                                          cache)
            adj[vid] = []
            for _, v in found[: self.params.m]:
                self._link_upper(layer, vid, v, cache)
            if found:
                cur = found[0][1]
        for layer in range(self.l_max + 1, lvl + 1):
            self.layers.setdefault(layer, {})[vid] = []

        found = self._bottom_search(x, cur, self.params.ef_construction,
                                    None, self.params.m, cache)
        for _, v in found[: self.params.m]:
            self.graph.put_edge(vid, v)
            self.graph.put_edge(v, vid)
            self._prune_bottom(v)

        if lvl > self.l_max:
            self.l_max = lvl
            self.entry_point = vid

    def delete(self, vid: int) -> None:
        """Remove a vector, relinking each layer around the hole."""
        if not self.vectors.contains(vid):
            raise NotFound(vid)
        x = self._vec(vid)

        for layer in sorted((l for l, adj in self.layers.items() if vid in adj),
                            reverse=True):
            adj = self.layers[layer]
            former = list(adj[vid])
            for p in former:
                if vid in adj[p]:
                    adj[p].remove(vid)
            pool: set[int] = set(former)
            for p in former:
                pool.update(adj[p])
            pool.discard(vid)
            for p in former:
                self._relink_upper(layer, p, pool)
            del adj[vid]
            if not adj:
                del self.layers[layer]

        former = self.graph.neighbors(vid)
        for p in former:
            self.graph.delete_edge(p, vid)
            self.graph.delete_edge(vid, p)
        pool = set(former)
        for p in former:
            pool.update(self.graph.neighbors(p))
        pool.discard(vid)
        for p in former:
            self._relink_bottom(p, pool)

        self.vectors.mark_deleted(vid)
        self.codes.remove(vid)
        if self.entry_point == vid:
            self._promote_entry(x, former)

    # -- linking helpers -----------------------------------------------------

    def _link_upper(self, layer: int, a: int, b: int,
                    cache: dict[int, float]) -> None:
        if a == b:
            return
        adj = self.layers[layer]
        if b not in adj[a]:
            adj[a].append(b)
        if a not in adj[b]:
            adj[b].append(a)
        self._prune_upper(layer, b)
        self._prune_upper(layer, a)

    def _prune_upper(self, layer: int, node: int) -> None:
        adj = self.layers[layer]
        nbrs = adj[node]
        if len(nbrs) <= self.params.m_max:
            return
        scored = self._scored_neighbors(node, nbrs)
        for _, v in reversed(scored[self.params.m_max:]):
            # dropping an edge must not strand the other endpoint
            if len(adj[v]) > 1:
                adj[node].remove(v)
                adj[v].remove(node)

    def _relink_upper(self, layer: int, p: int, pool: set[int]) -> None:
        adj = self.layers[layer]
        candidates = [c for c in pool if c != p and c in adj]
        if not candidates:
            return
        scored = self._scored_neighbors(p, candidates)
        cache: dict[int, float] = {}
        for _, c in scored[: self.params.m]:
            self._link_upper(layer, p, c, cache)

    def _bottom_degree(self, node: int) -> int:
        return len(self.graph.neighbors(node))

    def _prune_bottom(self, node: int) -> None:
        nbrs = self.graph.neighbors(node)
        if len(nbrs) <= self.params.m_max:
            return
        scored = self._scored_neighbors(node, nbrs)
        for _, v in reversed(scored[self.params.m_max:]):
            if self._bottom_degree(v) > 1:
                self.graph.delete_edge(node, v)
                self.graph.delete_edge(v, node)

    def _relink_bottom(self, p: int, pool: set[int]) -> None:
        candidates = [c for c in pool
                      if c != p and self.vectors.contains(c)]
        if not candidates:
            return
        scored = self._scored_neighbors(p, candidates)
        existing = set(self.graph.neighbors(p))
        for _, c in scored[: self.params.m]:
            if c not in existing:
                self.graph.put_edge(p, c)
                self.graph.put_edge(c, p)
                self._prune_bottom(c)
        self._prune_bottom(p)

    def _promote_entry(self, x_old: np.ndarray, bottom_neighbors: list[int]) -> None:
        if self.vectors.live_count == 0:
            self.entry_point = None
            self.l_max = 0
            return
        self.l_max = max(self.layers, default=1)
        if self.l_max >= 2:
            members = list(self.layers[self.l_max])
            mat = self.vectors.get_batch(members)
            dists = kernels.euclidean_batch(
                np.ascontiguousarray(x_old, dtype=np.float32), mat)
            self.entry_point = min(zip(dists, members))[1]
            return
        candidates = [v for v in bottom_neighbors if self.vectors.contains(v)]
        if candidates:
            mat = self.vectors.get_batch(candidates)
            dists = kernels.euclidean_batch(
                np.ascontiguousarray(x_old, dtype=np.float32), mat)
            self.entry_point = min(zip(dists, candidates))[1]
        else:
            self.entry_point = self.vectors.live_ids()[0]
