"""Command-line driver: build, query, mutate, benchmark, reorder, inspect.

Every flag can also come from a plain-text config file of key=value
lines (underscores or dashes both accepted); explicit flags win over
config values. Seeds make every command reproducible: reruns with the
same seed and config print identical reports apart from wall-clock and
memory columns.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import bench, kernels, metrics, reorder as reorder_mod, simhash
from .hnsw import HnswIndex, HnswParams


def load_config(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _filter_params(args) -> simhash.FilterParams:
    epsilon = None if args.epsilon is not None and args.epsilon <= 0 else args.epsilon
    return simhash.FilterParams(epsilon=epsilon, rho=args.rho)


def _load_base(args) -> np.ndarray:
    vectors = bench.read_vectors(args.base, fmt=args.format, limit=args.limit)
    if args.dim is not None and vectors.shape[1] != args.dim:
        raise SystemExit(f"file has dimension {vectors.shape[1]}, "
                         f"--dim says {args.dim}")
    return np.ascontiguousarray(vectors, dtype=np.float32)


def cmd_build(args) -> int:
    vectors = _load_base(args)
    params = HnswParams(m=args.m, m_max=args.m_max,
                        ef_construction=args.ef_construction,
                        ef_search=args.ef)
    index = HnswIndex(args.index, dim=vectors.shape[1], params=params,
                      m_bits=args.m_bits, seed=args.seed,
                      memtable_bytes=args.memtable_bytes,
                      bloom_enabled=args.bloom)
    start = time.perf_counter()
    for row in vectors:
        index.insert(row)
    elapsed = time.perf_counter() - start
    print(f"built index: n={index.live_count} d={index.vectors.dim} "
          f"m={params.m} ef_construction={params.ef_construction} "
          f"levels={index.l_max} backend={kernels.BACKEND}")
    print(f"build wall-clock: {elapsed:.2f}s")
    index.close()
    return 0


def cmd_search(args) -> int:
    index = HnswIndex(args.index)
    queries = bench.read_vectors(args.queries, fmt=args.format,
                                 limit=args.limit)
    fp = _filter_params(args)
    rows = []
    start = time.perf_counter()
    for q in queries:
        result = index.search(q, args.k, ef_search=args.ef, filter_params=fp)
        rows.append(result)
    elapsed_ms = (time.perf_counter() - start) * 1000.0 / max(len(queries), 1)

    recalls = None
    if args.ground_truth:
        ids = index.vectors.live_ids()
        corpus = np.stack([index.vectors.get(v) for v in ids])
        truth = bench.ground_truth(queries, ids, corpus, args.k)
        recalls = [bench.recall_at_k(r.ids, t, args.k)
                   for r, t in zip(rows, truth)]

    for i, result in enumerate(rows):
        ids = ",".join(str(v) for v in result.ids)
        dists = ",".join(f"{d:.6f}" for d in result.dists)
        line = f"query {i}: ids=[{ids}] dists=[{dists}]"
        if recalls is not None:
            line += f" recall={recalls[i]:.3f}"
        print(line)
    total_vf = sum(r.io.vector_fetches for r in rows)
    total_nf = sum(r.io.neighbor_list_fetches for r in rows)
    total_t = sum(r.io.nodes_visited for r in rows)
    print(f"queries={len(rows)} k={args.k} ef={args.ef} rho={args.rho} "
          f"epsilon={args.epsilon}")
    print(f"totals: vector_fetches={total_vf} neighbor_list_fetches={total_nf} "
          f"nodes_visited={total_t}")
    if recalls is not None:
        print(f"mean recall {args.k}@{args.k}: {float(np.mean(recalls)):.4f}")
    print(f"mean latency: {elapsed_ms:.3f} ms/query  [wall-clock]")
    if args.report:
        import csv
        with open(args.report, "w", newline="") as f:
            writer = csv.writer(f)
            header = ["query", "ids", "dists", "vector_fetches",
                      "neighbor_list_fetches", "nodes_visited"]
            if recalls is not None:
                header.append("recall")
            writer.writerow(header)
            for i, r in enumerate(rows):
                row = [i, " ".join(map(str, r.ids)),
                       " ".join(f"{d:.6f}" for d in r.dists),
                       r.io.vector_fetches, r.io.neighbor_list_fetches,
                       r.io.nodes_visited]
                if recalls is not None:
                    row.append(f"{recalls[i]:.6f}")
                writer.writerow(row)
    index.close()
    return 0


def cmd_insert(args) -> int:
    index = HnswIndex(args.index)
    vectors = bench.read_vectors(args.vectors, fmt=args.format, limit=args.limit)
    ids = [index.insert(row) for row in vectors]
    print(f"inserted {len(ids)} vectors, ids {ids[0]}..{ids[-1]}"
          if ids else "inserted 0 vectors")
    index.close()
    return 0


def cmd_delete(args) -> int:
    index = HnswIndex(args.index)
    if args.ids:
        victims = [int(s) for s in args.ids.split(",")]
    else:
        rng = np.random.Generator(np.random.PCG64(args.seed))
        live = index.vectors.live_ids()
        count = min(args.count, len(live))
        picks = rng.choice(len(live), size=count, replace=False)
        victims = [live[i] for i in sorted(int(p) for p in picks)]
    for vid in victims:
        index.delete(vid)
    print(f"deleted {len(victims)} vectors; live={index.live_count}")
    index.close()
    return 0


def cmd_bench(args) -> int:
    base = _load_base(args)
    queries = bench.read_vectors(args.queries, fmt=args.format,
                                 limit=args.query_count)
    n_base = args.base_count if args.base_count is not None else len(base) // 2
    if n_base >= len(base):
        raise SystemExit("--base-count must leave vectors for the insert reserve")
    initial, reserve = base[:n_base], list(base[n_base:])

    params = HnswParams(m=args.m, m_max=args.m_max,
                        ef_construction=args.ef_construction, ef_search=args.ef)
    index = HnswIndex(args.index, dim=base.shape[1], params=params,
                      m_bits=args.m_bits, seed=args.seed,
                      memtable_bytes=args.memtable_bytes,
                      bloom_enabled=args.bloom)
    live: dict[int, np.ndarray] = {}
    for row in initial:
        live[index.insert(row)] = row

    spec = bench.WorkloadSpec.for_scenario(
        args.scenario, args.batches, len(live), seed=args.seed,
        batch_size=args.batch_size)
    report = bench.run_workload(index, spec, live, reserve, queries,
                                k=args.k, ef_search=args.ef,
                                filter_params=_filter_params(args),
                                scenario=args.scenario)

    cols = bench.BatchRow.DETERMINISTIC + bench.BatchRow.TIMING
    print(" ".join(cols))
    for row in report.rows:
        det = " ".join(str(getattr(row, c)) for c in bench.BatchRow.DETERMINISTIC)
        timing = " ".join(f"{getattr(row, c):.3f}" if isinstance(getattr(row, c), float)
                          else str(getattr(row, c)) for c in bench.BatchRow.TIMING)
        print(f"{det} {timing}  [timing cols are wall-clock]")
    if report.exhausted:
        print("warning: insert reserve exhausted; run ended early")
    if args.report:
        report.to_csv(args.report)
        print(f"report written to {args.report}")
    index.close()
    return 0


def cmd_reorder(args) -> int:
    index = HnswIndex(args.index)
    sp = reorder_mod.ScoreParams(lam=getattr(args, "lambda"), w=args.window,
                                 mode=args.mode)
    graph = index.bottom_adjacency()
    if args.dump_heat:
        index.heat.dump_csv(args.dump_heat)
        print(f"heat map written to {args.dump_heat}")
    phi = reorder_mod.reorder(graph, index.heat, sp)
    before = reorder_mod.layout_objective(
        reorder_mod.identity_permutation(graph), graph, index.heat, sp)
    after = reorder_mod.layout_objective(phi, graph, index.heat, sp)
    reorder_mod.apply_permutation(index, phi)
    print(f"reordered {len(phi)} vectors: objective {before:.1f} -> {after:.1f} "
          f"(window={args.window}, lambda={getattr(args, 'lambda')}, "
          f"mode={args.mode})")
    index.close()
    return 0


def cmd_stats(args) -> int:
    index = HnswIndex(args.index)
    print(f"dimension            {index.vectors.dim}")
    print(f"live vectors         {index.live_count}")
    print(f"max level            {index.l_max}")
    print(f"entry point          {index.entry_point}")
    print(f"upper-layer nodes    "
          f"{sum(len(a) for a in index.layers.values())}")
    print(f"hash bits            {index.m_bits}")
    print(f"kernel backend       {kernels.BACKEND}")
    levels: dict[int, int] = {}
    for level, _ in index.graph.run_files():
        levels[level] = levels.get(level, 0) + 1
    for level in sorted(levels):
        print(f"lsm level {level}          {levels[level]} run(s)")
    print(f"memtable entries     {index.graph.memtable_entry_count}")
    if args.queries:
        queries = bench.read_vectors(args.queries, fmt=args.format,
                                     limit=args.limit)
        fp = _filter_params(args)
        wrapped = _SearchAdapter(index, fp, args.ef)
        params = metrics.CostModelParams(t_n=args.t_n, t_v=args.t_v,
                                         d=0.0, rho=args.rho)
        report = metrics.predict_vs_measure(wrapped, list(queries), args.k, params)
        print("cost model (measured vs predicted):")
        for line in report.lines():
            print(f"  {line}")
    index.close()
    return 0


class _SearchAdapter:
    """Bind search options so predict_vs_measure sees a plain search(q, k)."""

    def __init__(self, index, fp, ef):
        self._index = index
        self._fp = fp
        self._ef = ef
        self.counters = index.counters

    def search(self, q, k):
        return self._index.search(q, k, ef_search=self._ef,
                                  filter_params=self._fp)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--index", required=True, help="index directory")
    p.add_argument("--config", help="key=value config file (flags override)")
    p.add_argument("--format", choices=["fvecs", "bvecs", "ivecs"],
                   help="dataset format (default: by file extension)")
    p.add_argument("--seed", type=int, default=0)


def _add_search_knobs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--ef", type=int, default=50, help="search pool size")
    p.add_argument("--rho", type=float, default=1.0, help="sampling ratio")
    p.add_argument("--epsilon", type=float, default=0.05,
                   help="filter error target; <= 0 disables the threshold")


def _add_build_knobs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--m-max", type=int, default=32)
    p.add_argument("--ef-construction", type=int, default=100)
    p.add_argument("--m-bits", type=int, default=128)
    p.add_argument("--memtable-bytes", type=int, default=4 * 1024 * 1024)
    p.add_argument("--bloom", action="store_true",
                   help="enable per-run source membership summaries")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lsmann",
        description="disk-based dynamic approximate nearest neighbor index")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build an index from a vector file")
    _add_common(p)
    _add_build_knobs(p)
    p.add_argument("--base", required=True)
    p.add_argument("--dim", type=int, help="expected dimension (checked)")
    p.add_argument("--limit", type=int)
    p.add_argument("--ef", type=int, default=50)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("search", help="query an existing index")
    _add_common(p)
    _add_search_knobs(p)
    p.add_argument("--queries", required=True)
    p.add_argument("--limit", type=int, help="query count cap")
    p.add_argument("--ground-truth", action="store_true",
                   help="compute exact recall against the live corpus")
    p.add_argument("--report", help="write per-query CSV here")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("insert", help="insert vectors from a file")
    _add_common(p)
    p.add_argument("--vectors", required=True)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_insert)

    p = sub.add_parser("delete", help="delete by id or randomly")
    _add_common(p)
    p.add_argument("--ids", help="comma-separated ids")
    p.add_argument("--count", type=int, default=0,
                   help="delete this many uniformly random live ids")
    p.set_defaults(func=cmd_delete)

    p = sub.add_parser("bench", help="run a dynamic-update workload")
    _add_common(p)
    _add_build_knobs(p)
    _add_search_knobs(p)
    p.add_argument("--base", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--dim", type=int)
    p.add_argument("--limit", type=int, help="base vector cap")
    p.add_argument("--scenario", default="balanced",
                   choices=sorted(bench.SCENARIOS))
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--batch-size", type=int,
                   help="updates per batch (default 1%% of initial size)")
    p.add_argument("--base-count", type=int,
                   help="initial corpus size (rest feeds inserts)")
    p.add_argument("--query-count", type=int, default=100)
    p.add_argument("--report", help="write the batch CSV here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("reorder", help="optimize on-disk placement")
    _add_common(p)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--lambda", type=float, default=1.0, dest="lambda")
    p.add_argument("--mode", choices=["heat", "literal"], default="heat")
    p.add_argument("--dump-heat", help="dump the heat map CSV here first")
    p.set_defaults(func=cmd_reorder)

    p = sub.add_parser("stats", help="print index stats and the cost model")
    _add_common(p)
    _add_search_knobs(p)
    p.add_argument("--queries", help="measure this query file")
    p.add_argument("--limit", type=int)
    p.add_argument("--t-n", type=float, default=1.0,
                   help="abstract neighbor-list fetch cost")
    p.add_argument("--t-v", type=float, default=1.0,
                   help="abstract vector fetch cost")
    p.set_defaults(func=cmd_stats)

    return parser


def _apply_config(argv: list[str], parser: argparse.ArgumentParser) -> list[str]:
    """Splice config-file values in as low-precedence flags."""
    if not argv or "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        return argv
    config = load_config(argv[idx + 1])
    command = argv[0]
    sub_actions = [a for a in parser._actions
                   if isinstance(a, argparse._SubParsersAction)]
    subparser = sub_actions[0].choices.get(command)
    if subparser is None:
        return argv
    known = {opt.lstrip("-").replace("-", "_"): opt
             for action in subparser._actions
             for opt in action.option_strings}
    spliced: list[str] = []
    flags = {a.dest for a in subparser._actions
             if isinstance(a, (argparse._StoreTrueAction, argparse._StoreFalseAction))}
    for key, value in config.items():
        if key not in known:
            continue
        if key in flags:
            if value.lower() in ("1", "true", "yes", "on"):
                spliced.append(known[key])
        else:
            spliced.extend([known[key], value])
    return [command] + spliced + argv[1:]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    argv = _apply_config(argv, parser)
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
