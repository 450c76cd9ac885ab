"""Shared test utilities: random graphs and reference implementations."""

from __future__ import annotations

import numpy as np

from flexgcn.graph import SkeletonGraph


def random_connected_graph(rng: np.random.Generator, n: int) -> SkeletonGraph:
    """Random connected graph on n nodes: random tree plus extra edges."""
    edges = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    existing = {(min(i, j), max(i, j)) for i, j in edges}
    p_extra = float(rng.uniform(0.0, 0.15))
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) not in existing and rng.random() < p_extra:
                edges.append((i, j))
                existing.add((i, j))
    return SkeletonGraph(n, edges, root=0)


def random_tree(rng: np.random.Generator, n: int) -> SkeletonGraph:
    """Random tree on n nodes (every non-root attaches to an earlier node)."""
    edges = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    return SkeletonGraph(n, edges, root=0)


def reference_gelu(x: np.ndarray) -> np.ndarray:
    """Straight-line tanh-approximation GELU, independent of the library."""
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))
