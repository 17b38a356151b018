"""Shared integrity checks used across test modules and acceptance runs.

Everything here inspects the artifact from the outside: file scans,
adjacency walks, and replay of an operation log kept by the store. None
of it reuses the index's own search/merge code paths.
"""

from __future__ import annotations

import numpy as np

from lsmann.lsm_store import OP_PUT, read_run_entries


def replay_log(op_log) -> dict[int, list[int]]:
    """Sequentially replay (src, dst, op, seq) records into an adjacency map."""
    state: dict[int, dict[int, int]] = {}
    for src, dst, op, _seq in op_log:
        state.setdefault(src, {})[dst] = op
    return {src: sorted(d for d, op in dsts.items() if op == OP_PUT)
            for src, dsts in state.items()}


def check_log_equivalence(store, op_log) -> None:
    expected = replay_log(op_log)
    srcs = set(expected)
    for src in sorted(srcs):
        got = store.neighbors(src)
        want = expected.get(src, [])
        assert got == want, f"neighbors({src}) = {got}, log replay says {want}"


def check_run_files(store) -> None:
    """Sortedness of every run and key-range disjointness per level > 0."""
    by_level: dict[int, list[tuple[tuple, tuple]]] = {}
    for level, path in store.run_files():
        entries = read_run_entries(path)
        keys = list(zip(entries["src"].tolist(), entries["dst"].tolist()))
        assert keys == sorted(keys), f"{path} is not sorted"
        assert len(set(keys)) == len(keys), f"{path} has duplicate (src, dst)"
        by_level.setdefault(level, []).append((keys[0], keys[-1]))
    for level, ranges in by_level.items():
        if level == 0:
            continue
        ranges.sort()
        for (lo1, hi1), (lo2, hi2) in zip(ranges, ranges[1:]):
            assert hi1 < lo2, f"level {level} ranges overlap: {hi1} vs {lo2}"


def check_slot_table(store) -> None:
    """Injectivity and free-slot accounting of the vector store."""
    slots = list(store.id_to_slot.values())
    assert len(set(slots)) == len(slots), "two live ids share a slot"
    assert all(0 <= s < store.high_water for s in slots)
    free = set(store.free_slots)
    assert len(free) == len(store.free_slots), "duplicate free slots"
    assert free.isdisjoint(slots), "free slot is referenced by a live id"
    assert free | set(slots) == set(range(store.high_water)), \
        "slots below the high-water mark must be live or free"


def check_index(index, op_log=None) -> None:
    """Full invariant suite over an index instance."""
    live = set(index.vectors.live_ids())

    # entry point validity
    if index.live_count == 0:
        assert index.entry_point is None
    else:
        assert index.entry_point in live
        if index.l_max >= 2:
            assert index.entry_point in index.layers[index.l_max]

    # upper layers: bidirectional, no self-loops, capped, nested, live
    for level, adj in index.layers.items():
        assert level >= 2
        for u, nbrs in adj.items():
            assert u in live, f"layer {level} node {u} is deleted"
            assert u not in nbrs, f"self-loop at {u}"
            assert len(nbrs) == len(set(nbrs))
            assert len(nbrs) <= index.params.m_max
            for v in nbrs:
                assert u in adj[v], f"edge {u}->{v} not reciprocated at {level}"
        lower = index.layers.get(level - 1)
        if level - 1 >= 2:
            assert lower is not None and set(adj) <= set(lower), \
                f"layer {level} nodes missing from layer {level - 1}"

    # bottom layer: bidirectional pairs, no dangling, capped
    bottom = {vid: index.graph.neighbors(vid) for vid in sorted(live)}
    for u, nbrs in bottom.items():
        assert len(nbrs) == len(set(nbrs))
        assert u not in nbrs, f"bottom self-loop at {u}"
        assert len(nbrs) <= index.params.m_max, \
            f"{u} has degree {len(nbrs)} > {index.params.m_max}"
        for v in nbrs:
            assert v in live, f"bottom edge {u}->{v} references deleted id"
            assert u in bottom[v], f"bottom edge {u}->{v} not reciprocated"

    check_slot_table(index.vectors)
    check_run_files(index.graph)
    if op_log is not None:
        check_log_equivalence(index.graph, op_log)


def brute_force_knn(queries: np.ndarray, ids: list[int], corpus: np.ndarray,
                    k: int) -> list[list[int]]:
    """Independent float64 exhaustive k-NN (ties to smaller id)."""
    ids_arr = np.asarray(ids, dtype=np.int64)
    corpus64 = np.asarray(corpus, dtype=np.float64)
    out = []
    for q in np.asarray(queries, dtype=np.float64):
        diff = corpus64 - q
        d2 = np.einsum("ij,ij->i", diff, diff)
        order = np.lexsort((ids_arr, d2))
        out.append([int(ids_arr[i]) for i in order[:k]])
    return out
