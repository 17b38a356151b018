"""On-disk vector storage with slot indirection.

Vectors live in a contiguous file of fixed-width float32 records; a
sidecar slot table maps ids to slots so physical placement can change
(slot reuse, reordering) while ids stay stable for the life of the
store. Deletion tombstones the id and frees the slot; ids are never
reassigned.
"""

from __future__ import annotations

import mmap
import os
import struct
import threading

import numpy as np

from . import kernels
from .metrics import IoCounters

SLOT_MAGIC = b"LVSL"
SLOT_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_PAIR = struct.Struct("<QQ")


class NotFound(KeyError):
    """Raised for ids that are unknown or already deleted."""


def distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between two equal-dimension vectors."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return kernels.euclidean(
        np.ascontiguousarray(a, dtype=np.float32),
        np.ascontiguousarray(b, dtype=np.float32),
    )


class VectorStore:
    """Slot file of raw float32 vectors plus an id -> slot table.

    Concurrency: many readers, one writer. Readers see an id only once
    its record is fully written; mutations are serialized by a lock.
    """

    def __init__(self, directory: str, dim: int | None = None,
                 counters: IoCounters | None = None):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)
        self.data_path = os.path.join(directory, "vectors.dat")
        self.table_path = os.path.join(directory, "slots.lvsl")
        self.counters = counters if counters is not None else IoCounters()
        self._write_lock = threading.Lock()

        self.id_to_slot: dict[int, int] = {}
        self.free_slots: list[int] = []
        self.high_water = 0
        self.next_id = 0

        if os.path.exists(self.table_path):
            self._load_table()
            if dim is not None and dim != self.dim:
                raise ValueError(f"store has d={self.dim}, requested d={dim}")
        else:
            if dim is None:
                raise ValueError("dimension required for a new store")
            if dim <= 0:
                raise ValueError("dimension must be positive")
            self.dim = dim
        self._record_size = 4 * self.dim
        flags = os.O_RDWR | os.O_CREAT
        self._fd = os.open(self.data_path, flags, 0o644)
        # reads go through a shared read-only map of the slot file;
        # superseded maps are parked until close so in-flight readers
        # never touch a torn-down mapping
        self._map: mmap.mmap | None = None
        self._map_size = 0
        self._old_maps: list[mmap.mmap] = []
        self._map_lock = threading.Lock()

    def _read_record(self, slot: int) -> bytes:
        offset = slot * self._record_size
        end = offset + self._record_size
        m = self._map
        if m is None or end > self._map_size:
            with self._map_lock:
                size = os.fstat(self._fd).st_size
                if end > size:
                    raise OSError(f"slot {slot} beyond data file end")
                if self._map is None or size > self._map_size:
                    if self._map is not None:
                        self._old_maps.append(self._map)
                    self._map = mmap.mmap(self._fd, size, prot=mmap.PROT_READ)
                    self._map_size = size
                m = self._map
        return m[offset:end]

    # -- persistence ------------------------------------------------------

    def _load_table(self) -> None:
        with open(self.table_path, "rb") as f:
            raw = f.read()
        magic, version, dim, high_water = _HEADER.unpack_from(raw, 0)
        if magic != SLOT_MAGIC:
            raise ValueError(f"bad slot-table magic {magic!r}")
        if version != SLOT_VERSION:
            raise ValueError(f"unsupported slot-table version {version}")
        self.dim = dim
        self.high_water = high_water
        offset = _HEADER.size
        while offset < len(raw):
            vid, slot = _PAIR.unpack_from(raw, offset)
            self.id_to_slot[vid] = slot
            offset += _PAIR.size
        used = set(self.id_to_slot.values())
        self.free_slots = sorted(s for s in range(high_water) if s not in used)
        self.next_id = max(self.id_to_slot, default=-1) + 1

    def save_table(self) -> None:
        tmp = self.table_path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(_HEADER.pack(SLOT_MAGIC, SLOT_VERSION, self.dim, self.high_water))
            for vid in sorted(self.id_to_slot):
                f.write(_PAIR.pack(vid, self.id_to_slot[vid]))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.table_path)

    def close(self) -> None:
        self.save_table()
        self._drop_maps()
        os.close(self._fd)
        self._fd = -1

    def _drop_maps(self) -> None:
        with self._map_lock:
            for m in self._old_maps:
                m.close()
            self._old_maps = []
            if self._map is not None:
                self._map.close()
                self._map = None
            self._map_size = 0

    # -- core operations --------------------------------------------------

    def append(self, x: np.ndarray) -> int:
        """Write a vector into a free or new slot and return its fresh id."""
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 1 or x.shape[0] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("vector has non-finite coordinates")
        with self._write_lock:
            if self.free_slots:
                slot = self.free_slots.pop()
            else:
                slot = self.high_water
            written = os.pwrite(self._fd, x.tobytes(), slot * self._record_size)
            if written != self._record_size:
                raise OSError(f"short write: {written} of {self._record_size} bytes")
            if slot == self.high_water:
                self.high_water += 1
            vid = self.next_id
            self.next_id += 1
            self.id_to_slot[vid] = slot
            return vid

    def get(self, vid: int) -> np.ndarray:
        """Read a live vector; counts one vector fetch."""
        slot = self.id_to_slot.get(vid)
        if slot is None:
            raise NotFound(vid)
        raw = self._read_record(slot)
        self.counters.count_vector_fetch(self._record_size)
        return np.frombuffer(raw, dtype=np.float32).copy()

    def get_batch(self, vids: list[int]) -> np.ndarray:
        """Read several live vectors into one matrix; counts each fetch."""
        out = np.empty((len(vids), self.dim), dtype=np.float32)
        for i, vid in enumerate(vids):
            slot = self.id_to_slot.get(vid)
            if slot is None:
                raise NotFound(vid)
            out[i] = np.frombuffer(self._read_record(slot), dtype=np.float32)
        self.counters.count_vector_fetches(len(vids), len(vids) * self._record_size)
        return out

    def mark_deleted(self, vid: int) -> None:
        """Tombstone an id; its slot becomes reusable, the id never does."""
        with self._write_lock:
            slot = self.id_to_slot.pop(vid, None)
            if slot is None:
                raise NotFound(vid)
            self.free_slots.append(slot)

    def contains(self, vid: int) -> bool:
        return vid in self.id_to_slot

    def slot_of(self, vid: int) -> int:
        slot = self.id_to_slot.get(vid)
        if slot is None:
            raise NotFound(vid)
        return slot

    def live_ids(self) -> list[int]:
        return sorted(self.id_to_slot)

    @property
    def live_count(self) -> int:
        return len(self.id_to_slot)

    # -- physical reordering ----------------------------------------------

    def apply_slot_assignment(self, new_slots: dict[int, int]) -> None:
        """Rewrite the vector file so each live id sits at its assigned slot.

        ``new_slots`` must be a bijection from the live ids onto
        0..n-1. The rewrite goes to a temp file and is swapped in with an
        atomic rename, so a failure leaves the original file intact.
        """
        with self._write_lock:
            if set(new_slots) != set(self.id_to_slot):
                raise ValueError("assignment does not cover exactly the live ids")
            n = len(new_slots)
            if sorted(new_slots.values()) != list(range(n)):
                raise ValueError("assignment is not a bijection onto 0..n-1")
            tmp = self.data_path + ".tmp"
            tmp_fd = os.open(tmp, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
            try:
                for vid, new_slot in new_slots.items():
                    raw = os.pread(
                        self._fd, self._record_size,
                        self.id_to_slot[vid] * self._record_size,
                    )
                    os.pwrite(tmp_fd, raw, new_slot * self._record_size)
                os.fsync(tmp_fd)
            except BaseException:
                os.close(tmp_fd)
                os.unlink(tmp)
                raise
            os.close(tmp_fd)
            os.replace(tmp, self.data_path)
            self._drop_maps()
            os.close(self._fd)
            self._fd = os.open(self.data_path, os.O_RDWR, 0o644)
            self.id_to_slot = dict(new_slots)
            self.free_slots = []
            self.high_water = n
            self.save_table()
