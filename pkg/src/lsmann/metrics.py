"""I/O accounting and the closed-form search cost model.

Counters record what the traversal actually touched (neighbor-list
fetches, vector fetches, expanded nodes, bytes); the model predicts the
same quantities from abstract per-fetch costs, so measured and predicted
values can be compared on one report.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass


@dataclass(frozen=True)
class CounterSnapshot:
    """Immutable point-in-time counter values."""

    vector_fetches: int = 0
    neighbor_list_fetches: int = 0
    nodes_visited: int = 0
    bytes_read: int = 0

    def __sub__(self, other: "CounterSnapshot") -> "CounterSnapshot":
        return CounterSnapshot(
            self.vector_fetches - other.vector_fetches,
            self.neighbor_list_fetches - other.neighbor_list_fetches,
            self.nodes_visited - other.nodes_visited,
            self.bytes_read - other.bytes_read,
        )


class IoCounters:
    """Monotone I/O counters, safe for concurrent increments."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.vector_fetches = 0
        self.neighbor_list_fetches = 0
        self.nodes_visited = 0
        self.bytes_read = 0

    def count_vector_fetch(self, nbytes: int = 0) -> None:
        with self._lock:
            self.vector_fetches += 1
            self.bytes_read += nbytes

    def count_vector_fetches(self, n: int, nbytes: int = 0) -> None:
        with self._lock:
            self.vector_fetches += n
            self.bytes_read += nbytes

    def count_neighbor_list_fetch(self, nbytes: int = 0) -> None:
        with self._lock:
            self.neighbor_list_fetches += 1
            self.bytes_read += nbytes

    def count_node_visit(self) -> None:
        with self._lock:
            self.nodes_visited += 1

    def snapshot(self) -> CounterSnapshot:
        with self._lock:
            return CounterSnapshot(
                self.vector_fetches,
                self.neighbor_list_fetches,
                self.nodes_visited,
                self.bytes_read,
            )


@dataclass
class CostModelParams:
    """Abstract unit costs and traversal shape for the cost model."""

    t_n: float = 1.0
    t_v: float = 1.0
    d: float = 0.0
    rho: float = 1.0

    def __post_init__(self) -> None:
        if self.t_n <= 0 or self.t_v <= 0:
            raise ValueError("fetch costs must be positive")
        if self.d < 0:
            raise ValueError("degree must be nonnegative")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("sampling ratio must be in (0, 1]")


def cost_full(t: float, d: float, t_n: float, t_v: float) -> float:
    """Traversal cost when every neighbor of each visited node is fetched."""
    return t * (t_n + d * t_v)


def cost_sampling(t: float, d: float, t_n: float, t_v: float, rho: float) -> float:
    """Traversal cost when only a ``rho`` fraction of neighbors is fetched."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("sampling ratio must be in (0, 1]")
    return t * (t_n + rho * d * t_v)


def sampling_saving(t: float, d: float, t_n: float, t_v: float, rho: float) -> float:
    """Cost difference between full and sampled traversal."""
    return cost_full(t, d, t_n, t_v) - cost_sampling(t, d, t_n, t_v, rho)


@dataclass(frozen=True)
class CostReport:
    """Measured-vs-predicted I/O for one query batch."""

    queries: int
    rho: float
    mean_nodes_visited: float
    mean_expanded_degree: float
    mean_vector_fetches: float
    predicted_vector_fetches: float
    relative_deviation: float
    mean_neighbor_list_fetches: float
    predicted_cost: float

    def lines(self) -> list[str]:
        return [
            f"queries                  {self.queries}",
            f"sampling ratio           {self.rho}",
            f"mean nodes visited (T)   {self.mean_nodes_visited:.2f}",
            f"mean expanded degree (d) {self.mean_expanded_degree:.2f}",
            f"mean vector fetches      {self.mean_vector_fetches:.2f}",
            f"predicted rho*d*T        {self.predicted_vector_fetches:.2f}",
            f"relative deviation       {self.relative_deviation:+.3f}",
            f"mean neighbor fetches    {self.mean_neighbor_list_fetches:.2f}",
            f"predicted cost           {self.predicted_cost:.2f}",
        ]


def predict_vs_measure(index, queries, k: int, params: CostModelParams) -> CostReport:
    """Run a query batch and compare measured fetches with the model.

    ``index`` must expose ``counters`` and a ``search(q, k)`` method; the
    model's degree input is the mean candidate-list length observed at
    expansion time, not the static graph average.
    """
    if len(queries) == 0:
        raise ValueError("empty query batch")
    before = index.counters.snapshot()
    degree_sum = 0
    expansions = 0
    for q in queries:
        result = index.search(q, k)
        degree_sum += result.expanded_degree_sum
        expansions += result.expanded_count
    delta = index.counters.snapshot() - before

    n = len(queries)
    mean_t = delta.nodes_visited / n
    mean_d = degree_sum / expansions if expansions else 0.0
    mean_vf = delta.vector_fetches / n
    predicted = params.rho * mean_d * mean_t
    deviation = (mean_vf - predicted) / predicted if predicted else 0.0
    return CostReport(
        queries=n,
        rho=params.rho,
        mean_nodes_visited=mean_t,
        mean_expanded_degree=mean_d,
        mean_vector_fetches=mean_vf,
        predicted_vector_fetches=predicted,
        relative_deviation=deviation,
        mean_neighbor_list_fetches=delta.neighbor_list_fetches / n,
        predicted_cost=cost_sampling(mean_t, mean_d, params.t_n, params.t_v, params.rho),
    )
