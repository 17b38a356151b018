"""LSM-tree adjacency store for the disk-resident graph layer.

Each directed edge is one fixed-width record keyed by (src, dst) with a
global sequence number and a put/tombstone flag. Writes land in an
in-memory buffer that flushes to sorted immutable run files; leveled
compaction merges runs downward, collapsing duplicates and dropping
tombstones once nothing older can exist. Neighbor lists are
reconstructed by prefix scan over src across the memtable and all runs.

A run file is: magic "LVRN", u32 version, u32 entry count, `count`
25-byte little-endian entries (src u64, dst u64, seq u64, op u8) sorted
by (src, dst), then a footer with the min/max composite keys. A JSON
manifest lists live runs per level.
"""

from __future__ import annotations

import json
import mmap
import os
import struct
import threading
from bisect import bisect_right

import numpy as np

from .metrics import IoCounters

RUN_MAGIC = b"LVRN"
RUN_VERSION = 1
_RUN_HEADER = struct.Struct("<4sII")
_RUN_FOOTER = struct.Struct("<QQQQ")

OP_TOMBSTONE = 0
OP_PUT = 1

ENTRY_DT = np.dtype([("src", "<u8"), ("dst", "<u8"), ("seq", "<u8"), ("op", "u1")])
ENTRY_SIZE = ENTRY_DT.itemsize  # 25 bytes

BLOCK_ENTRIES = 256  # sparse-index granularity for point scans

MEMTABLE_BYTES_DEFAULT = 4 * 1024 * 1024
SIZE_RATIO_DEFAULT = 10
LEVEL0_RUN_LIMIT = 4


class _Bloom:
    """Small double-hashed Bloom filter over source ids."""

    def __init__(self, n_items: int, bits_per_item: int = 10):
        self._nbits = max(64, n_items * bits_per_item)
        self._bits = np.zeros((self._nbits + 7) // 8, dtype=np.uint8)

    @staticmethod
    def _mix(x: int) -> int:
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & 0xFFFFFFFFFFFFFFFF
        x = (x ^ (x >> 27)) * 0x94D049BB133111EB & 0xFFFFFFFFFFFFFFFF
        return x ^ (x >> 31)

    def _positions(self, key: int):
        h1 = self._mix(key)
        h2 = self._mix(key ^ 0x9E3779B97F4A7C15) | 1
        for i in range(4):
            yield ((h1 + i * h2) & 0xFFFFFFFFFFFFFFFF) % self._nbits

    def add(self, key: int) -> None:
        for p in self._positions(key):
            self._bits[p >> 3] |= 1 << (p & 7)

    def maybe_contains(self, key: int) -> bool:
        return all(self._bits[p >> 3] & (1 << (p & 7)) for p in self._positions(key))


class RunFile:
    """One sorted immutable run, memory-mapped for read access.

    The file descriptor is closed right after mapping; an unlinked run
    stays readable through the map until the object is dropped, so
    compaction never pulls a run out from under a concurrent reader.
    """

    def __init__(self, path: str, level: int, bloom_enabled: bool = False):
        self.path = path
        self.level = level
        with open(path, "rb") as f:
            self._map = mmap.mmap(f.fileno(), 0, prot=mmap.PROT_READ)
        magic, version, count = _RUN_HEADER.unpack_from(self._map, 0)
        if magic != RUN_MAGIC:
            raise ValueError(f"bad run magic in {path}: {magic!r}")
        if version != RUN_VERSION:
            raise ValueError(f"unsupported run version {version} in {path}")
        self.count = count
        footer_off = _RUN_HEADER.size + count * ENTRY_SIZE
        min_src, min_dst, max_src, max_dst = _RUN_FOOTER.unpack_from(
            self._map, footer_off)
        self.min_key = (min_src, min_dst)
        self.max_key = (max_src, max_dst)
        self.byte_size = footer_off + _RUN_FOOTER.size
        self.bloom: _Bloom | None = None
        self._sparse: list[tuple[int, int]] = []
        self._build_index(bloom_enabled)

    def _build_index(self, bloom_enabled: bool) -> None:
        # One sequential pass at open: first key of every block, plus the
        # optional source-membership summary.
        if bloom_enabled:
            self.bloom = _Bloom(self.count)
        entries = np.frombuffer(self._map, dtype=ENTRY_DT, count=self.count,
                                offset=_RUN_HEADER.size)
        srcs = entries["src"]
        dsts = entries["dst"]
        for start in range(0, self.count, BLOCK_ENTRIES):
            self._sparse.append((int(srcs[start]), int(dsts[start])))
        if self.bloom is not None:
            for s in np.unique(srcs):
                self.bloom.add(int(s))

    def close(self) -> None:
        self._map.close()

    def _read_block(self, block_idx: int) -> tuple[np.ndarray, int]:
        start = block_idx * BLOCK_ENTRIES
        n = min(BLOCK_ENTRIES, self.count - start)
        offset = _RUN_HEADER.size + start * ENTRY_SIZE
        raw = self._map[offset: offset + n * ENTRY_SIZE]
        return np.frombuffer(raw, dtype=ENTRY_DT), len(raw)

    def scan_src(self, src: int) -> tuple[list[tuple[int, int, int]], int]:
        """All (dst, seq, op) entries for ``src``; returns bytes read too."""
        if src < self.min_key[0] or src > self.max_key[0]:
            return [], 0
        if self.bloom is not None and not self.bloom.maybe_contains(src):
            return [], 0
        block_idx = max(0, bisect_right(self._sparse, (src,)) - 1)
        out: list[tuple[int, int, int]] = []
        nbytes = 0
        nblocks = len(self._sparse)
        while block_idx < nblocks:
            if self._sparse[block_idx][0] > src:
                break
            block, read = self._read_block(block_idx)
            nbytes += read
            srcs = block["src"]
            lo = int(np.searchsorted(srcs, src, side="left"))
            hi = int(np.searchsorted(srcs, src, side="right"))
            for i in range(lo, hi):
                out.append((int(block["dst"][i]), int(block["seq"][i]), int(block["op"][i])))
            if hi < len(srcs):
                break
            block_idx += 1
        return out, nbytes

    def read_all(self) -> np.ndarray:
        return np.frombuffer(self._map, dtype=ENTRY_DT, count=self.count,
                             offset=_RUN_HEADER.size).copy()


def write_run(path: str, entries: np.ndarray) -> None:
    """Write a sorted entry array as a run file (temp file + atomic rename)."""
    if len(entries) == 0:
        raise ValueError("refusing to write an empty run")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_RUN_HEADER.pack(RUN_MAGIC, RUN_VERSION, len(entries)))
        f.write(entries.tobytes())
        f.write(_RUN_FOOTER.pack(
            int(entries["src"][0]), int(entries["dst"][0]),
            int(entries["src"][-1]), int(entries["dst"][-1]),
        ))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_run_entries(path: str) -> np.ndarray:
    """Sequentially load and validate a run file (test/inspection helper)."""
    with open(path, "rb") as f:
        raw = f.read()
    magic, version, count = _RUN_HEADER.unpack_from(raw, 0)
    if magic != RUN_MAGIC or version != RUN_VERSION:
        raise ValueError(f"bad run header in {path}")
    expected = _RUN_HEADER.size + count * ENTRY_SIZE + _RUN_FOOTER.size
    if len(raw) != expected:
        raise ValueError(f"run {path} has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=ENTRY_DT, count=count, offset=_RUN_HEADER.size).copy()


class Memtable:
    """Write buffer: newest (op, seq) per (src, dst), grouped by src."""

    def __init__(self) -> None:
        self.by_src: dict[int, dict[int, tuple[int, int]]] = {}
        self.count = 0

    @property
    def byte_size(self) -> int:
        return self.count * ENTRY_SIZE

    def put(self, src: int, dst: int, op: int, seq: int) -> None:
        dsts = self.by_src.setdefault(src, {})
        if dst not in dsts:
            self.count += 1
        dsts[dst] = (op, seq)

    def to_entries(self) -> np.ndarray:
        rows = []
        for src in sorted(self.by_src):
            dsts = self.by_src[src]
            for dst in sorted(dsts):
                op, seq = dsts[dst]
                rows.append((src, dst, seq, op))
        return np.array(rows, dtype=ENTRY_DT)


class LsmGraphStore:
    """Leveled LSM tree over directed edge records.

    Single writer, many readers: readers grab the memtable reference
    before the run list, writers publish a new run list before swapping
    in a fresh memtable, so any interleaving sees every flushed edge.
    """

    def __init__(self, directory: str, counters: IoCounters | None = None,
                 memtable_bytes: int = MEMTABLE_BYTES_DEFAULT,
                 size_ratio: int = SIZE_RATIO_DEFAULT,
                 level0_limit: int = LEVEL0_RUN_LIMIT,
                 bloom_enabled: bool = False,
                 op_log: list | None = None):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)
        self.manifest_path = os.path.join(directory, "MANIFEST.json")
        self.counters = counters if counters is not None else IoCounters()
        self.memtable_bytes = memtable_bytes
        self.size_ratio = size_ratio
        self.level0_limit = level0_limit
        self.bloom_enabled = bloom_enabled
        self.op_log = op_log

        self._lock = threading.Lock()
        self._memtable = Memtable()
        self._runs: list[RunFile] = []
        self._next_seq = 0
        self._next_file = 0
        self.key_map: dict[int, int] | None = None
        self._inv_map: dict[int, int] = {}
        self._next_pos = 0

        if os.path.exists(self.manifest_path):
            self._load_manifest()

    # -- manifest -----------------------------------------------------------

    def _load_manifest(self) -> None:
        with open(self.manifest_path) as f:
            manifest = json.load(f)
        for item in manifest["runs"]:
            path = os.path.join(self.directory, item["file"])
            self._runs.append(RunFile(path, item["level"], self.bloom_enabled))
        self._next_seq = manifest["next_seq"]
        self._next_file = manifest["next_file"]
        if manifest.get("key_map") is not None:
            self.key_map = {int(k): int(v) for k, v in manifest["key_map"]}
            self._inv_map = {v: k for k, v in self.key_map.items()}
            self._next_pos = manifest["next_pos"]

    def _save_manifest(self) -> None:
        manifest = {
            "version": 1,
            "next_seq": self._next_seq,
            "next_file": self._next_file,
            "runs": [{"file": os.path.basename(r.path), "level": r.level}
                     for r in self._runs],
            "key_map": sorted(self.key_map.items()) if self.key_map is not None else None,
            "next_pos": self._next_pos if self.key_map is not None else None,
        }
        tmp = self.manifest_path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(manifest, f)
        os.replace(tmp, self.manifest_path)

    def close(self) -> None:
        with self._lock:
            self._flush_locked()
            self._save_manifest()
            for r in self._runs:
                r.close()

    # -- key mapping (physical placement of the composite key space) --------

    def _encode_write(self, vid: int) -> int:
        if self.key_map is None:
            return vid
        pos = self.key_map.get(vid)
        if pos is None:
            pos = self._next_pos
            self._next_pos += 1
            self.key_map[vid] = pos
            self._inv_map[pos] = vid
        return pos

    def _encode_read(self, vid: int) -> int | None:
        if self.key_map is None:
            return vid
        return self.key_map.get(vid)

    def _decode(self, pos: int) -> int:
        if self.key_map is None:
            return pos
        return self._inv_map[pos]

    # -- writes --------------------------------------------------------------

    def _append(self, src: int, dst: int, op: int) -> None:
        with self._lock:
            seq = self._next_seq
            self._next_seq += 1
            if self.op_log is not None:
                self.op_log.append((src, dst, op, seq))
            self._memtable.put(self._encode_write(src), self._encode_write(dst), op, seq)
            if self._memtable.byte_size >= self.memtable_bytes:
                self._flush_locked()
                self._maybe_compact_locked()

    def put_edge(self, src: int, dst: int) -> None:
        """Record a directed edge; visible to neighbors() immediately."""
        if src == dst:
            raise ValueError(f"self-loop rejected: {src}")
        self._append(src, dst, OP_PUT)

    def delete_edge(self, src: int, dst: int) -> None:
        """Record an edge tombstone; deleting an absent edge is a no-op write."""
        self._append(src, dst, OP_TOMBSTONE)

    # -- reads ----------------------------------------------------------------

    def neighbors(self, src: int) -> list[int]:
        """Live out-neighbors of ``src`` in ascending id order.

        Merged view across memtable and all runs: the newest sequence
        number wins per (src, dst) and tombstones mask older puts.
        Counts one neighbor-list fetch.
        """
        memtable = self._memtable
        runs = self._runs
        newest: dict[int, tuple[int, int]] = {}
        nbytes = 0
        enc = self._encode_read(src)
        if enc is not None:
            buffered = memtable.by_src.get(enc)
            if buffered:
                # list() snapshots the bucket atomically w.r.t. the writer
                for dst, (op, seq) in list(buffered.items()):
                    newest[dst] = (seq, op)
            for run in runs:
                entries, read = run.scan_src(enc)
                nbytes += read
                for dst, seq, op in entries:
                    cur = newest.get(dst)
                    if cur is None or seq > cur[0]:
                        newest[dst] = (seq, op)
        self.counters.count_neighbor_list_fetch(nbytes)
        result = [self._decode(dst) for dst, (_, op) in newest.items() if op == OP_PUT]
        result.sort()
        return result

    # -- flush & compaction ----------------------------------------------------

    def _new_run_path(self) -> str:
        path = os.path.join(self.directory, f"run_{self._next_file:08d}.lvrn")
        self._next_file += 1
        return path

    def _flush_locked(self):
        if self._memtable.count == 0:
            return None
        entries = self._memtable.to_entries()
        path = self._new_run_path()
        write_run(path, entries)
        run = RunFile(path, 0, self.bloom_enabled)
        self._runs = self._runs + [run]
        self._memtable = Memtable()
        self._save_manifest()
        return run

    def flush_memtable(self):
        """Flush the write buffer into a level-0 run; None if empty."""
        with self._lock:
            return self._flush_locked()

    def _level_bytes(self, level: int) -> int:
        return sum(r.byte_size for r in self._runs if r.level == level)

    def _level_target_bytes(self, level: int) -> int:
        return self.memtable_bytes * (self.size_ratio ** level)

    def _maybe_compact_locked(self) -> None:
        while True:
            level0 = [r for r in self._runs if r.level == 0]
            if len(level0) > self.level0_limit:
                self._compact_locked(0)
                continue
            levels = sorted({r.level for r in self._runs if r.level > 0})
            for level in levels:
                if self._level_bytes(level) > self._level_target_bytes(level):
                    self._compact_locked(level)
                    break
            else:
                return

    def maybe_compact(self) -> None:
        with self._lock:
            self._maybe_compact_locked()

    @staticmethod
    def _collapse(entries: np.ndarray, drop_tombstones: bool) -> np.ndarray:
        """Keep the newest entry per (src, dst), sorted by composite key."""
        order = np.lexsort((entries["seq"], entries["dst"], entries["src"]))
        entries = entries[order]
        keep = np.ones(len(entries), dtype=bool)
        same = (entries["src"][1:] == entries["src"][:-1]) & \
               (entries["dst"][1:] == entries["dst"][:-1])
        keep[:-1] &= ~same
        entries = entries[keep]
        if drop_tombstones:
            entries = entries[entries["op"] == OP_PUT]
        return entries

    def _compact_locked(self, level: int) -> None:
        sources = [r for r in self._runs if r.level == level]
        if not sources:
            return
        target = level + 1
        hull_min = min(r.min_key for r in sources)
        hull_max = max(r.max_key for r in sources)
        participants = list(sources)
        for r in self._runs:
            if r.level == target and not (r.max_key < hull_min or r.min_key > hull_max):
                participants.append(r)
        rest = [r for r in self._runs if r not in participants]
        drop = all(r.level <= target for r in rest)
        merged = self._collapse(
            np.concatenate([r.read_all() for r in participants]), drop,
        )
        new_runs = list(rest)
        if len(merged):
            path = self._new_run_path()
            write_run(path, merged)
            new_runs.append(RunFile(path, target, self.bloom_enabled))
        self._runs = new_runs
        self._save_manifest()
        for r in participants:
            os.unlink(r.path)

    def compact(self, level: int) -> None:
        """Merge all runs at ``level`` with overlapping runs one level down."""
        with self._lock:
            self._compact_locked(level)

    def compact_all(self) -> None:
        """Merge every run into a single deepest-level run, dropping tombstones."""
        with self._lock:
            if not self._runs:
                return
            deepest = max(1, max(r.level for r in self._runs))
            old_runs = self._runs
            merged = self._collapse(
                np.concatenate([r.read_all() for r in old_runs]), drop_tombstones=True,
            )
            new_runs: list[RunFile] = []
            if len(merged):
                path = self._new_run_path()
                write_run(path, merged)
                new_runs.append(RunFile(path, deepest, self.bloom_enabled))
            self._runs = new_runs
            self._save_manifest()
            for r in old_runs:
                os.unlink(r.path)

    # -- physical re-keying (reordering support) --------------------------------

    def rewrite_keys(self, mapping: dict[int, int]) -> None:
        """Full compaction that re-keys every record under a new placement map.

        Requires exclusive access. Records become (map(src), map(dst))
        and are re-sorted; reads translate at the boundary afterward, so
        logical results are unchanged.
        """
        with self._lock:
            self._flush_locked()
            pieces = [r.read_all() for r in self._runs]
            old_runs = self._runs
            deepest = max([r.level for r in self._runs], default=1)
            deepest = max(deepest, 1)
            merged = (self._collapse(np.concatenate(pieces), drop_tombstones=True)
                      if pieces else np.empty(0, dtype=ENTRY_DT))

            old_decode = self._decode
            logical = [(old_decode(int(e["src"])), old_decode(int(e["dst"])),
                        int(e["seq"])) for e in merged]
            next_pos = max(mapping.values(), default=-1) + 1
            for src, dst, _ in logical:
                for vid in (src, dst):
                    if vid not in mapping:
                        mapping[vid] = next_pos
                        next_pos += 1
            rekeyed = np.array(
                [(mapping[src], mapping[dst], seq, OP_PUT) for src, dst, seq in logical],
                dtype=ENTRY_DT,
            )
            if len(rekeyed):
                rekeyed = rekeyed[np.lexsort((rekeyed["dst"], rekeyed["src"]))]
                path = self._new_run_path()
                write_run(path, rekeyed)
                self._runs = [RunFile(path, deepest, self.bloom_enabled)]
            else:
                self._runs = []
            self.key_map = mapping
            self._inv_map = {v: k for k, v in mapping.items()}
            self._next_pos = next_pos
            self._save_manifest()
            for r in old_runs:
                os.unlink(r.path)

    # -- inspection ----------------------------------------------------------

    def run_files(self) -> list[tuple[int, str]]:
        return [(r.level, r.path) for r in self._runs]

    @property
    def memtable_entry_count(self) -> int:
        return self._memtable.count
