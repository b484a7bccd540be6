"""Exact and approximate nearest-neighbor search over descriptor stores.

Exact search is a full cosine scan and is the default below 1e5 items.
The approximate index is a layered small-world graph: each item gets a
geometric random level, upper layers give a coarse route and layer 0 holds
the dense neighborhood; queries greedily descend then run a beam search.
The graph is immutable once built and a build-time self-test checks
recall against exact search on held-out probes.
"""

from __future__ import annotations

import math

import numpy as np

from .descriptors import DescriptorStore


def search_exact(query: np.ndarray, store: DescriptorStore, k: int) -> list[tuple[str, float]]:
    """Top-k store entries by cosine, ties broken by ascending image id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    scores = store.matrix @ q
    order = np.lexsort((np.asarray(store.ids), -scores))
    top = order[: min(k, len(store))]
    return [(store.ids[i], float(scores[i])) for i in top]


class IndexBuildError(RuntimeError):
    pass


class AnnIndex:
    """Layered proximity graph with cosine metric.

    Build parameters follow common small-world practice: ``m`` neighbors
    per node per layer (doubled on layer 0) and an ``ef_construction``
    beam during insertion. Same seed, same data: identical graph.
    """

    def __init__(self, store: DescriptorStore, m: int = 16,
                 ef_construction: int = 100, seed: int = 0,
                 self_test: bool = True, min_recall: float = 0.95):
        self.store = store
        self.m = m
        self.ef_construction = ef_construction
        self._vectors = store.matrix
        n = len(store)
        rng = np.random.default_rng(seed)
        ml = 1.0 / math.log(m)
        self.levels = np.minimum((-np.log(rng.uniform(size=n)) * ml).astype(int), 12)
        self.max_level = int(self.levels.max()) if n else 0
        # adjacency[level][node] -> list of neighbor node indices
        self.adjacency: list[dict[int, list[int]]] = [
            {} for _ in range(self.max_level + 1)
        ]
        self.entry = 0
        self._build()
        self.self_test_recall: float | None = None
        if self_test and n > 20:
            self.self_test_recall = self._self_test(rng)
            if self.self_test_recall < min_recall:
                raise IndexBuildError(
                    f"build self-test recall@10 {self.self_test_recall:.3f} "
                    f"below {min_recall}")

    # -- construction -----------------------------------------------------

    def _sims(self, q: np.ndarray, nodes: list[int]) -> np.ndarray:
        return self._vectors[nodes] @ q

    def _search_layer(self, q: np.ndarray, entry: list[int], ef: int,
                      level: int) -> list[tuple[float, int]]:
        """Beam search one layer; returns (similarity, node) best-first."""
        adj = self.adjacency[level]
        visited = set(entry)
        sims = self._sims(q, entry)
        best = sorted(zip(sims.tolist(), entry), reverse=True)[:ef]
        frontier = list(best)
        while frontier:
            frontier.sort(reverse=True)
            sim, node = frontier.pop(0)
            if sim < best[-1][0] and len(best) >= ef:
                break
            fresh = [v for v in adj.get(node, ()) if v not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            for s, v in zip(self._sims(q, fresh).tolist(), fresh):
                if len(best) < ef or s > best[-1][0]:
                    best.append((s, v))
                    frontier.append((s, v))
            best.sort(reverse=True)
            del best[ef:]
        return best

    def _build(self) -> None:
        n = len(self.store)
        order = np.argsort(-self.levels, kind="stable")
        self.entry = int(order[0])
        top = self.levels[self.entry]
        for lvl in range(top + 1):
            self.adjacency[lvl][self.entry] = []
        for idx in order[1:]:
            idx = int(idx)
            q = self._vectors[idx]
            node_level = int(self.levels[idx])
            entry = [self.entry]
            for lvl in range(self.max_level, node_level, -1):
                entry = [self._search_layer(q, entry, 1, lvl)[0][1]]
            for lvl in range(min(node_level, self.max_level), -1, -1):
                cap = self.m * 2 if lvl == 0 else self.m
                found = self._search_layer(q, entry, self.ef_construction, lvl)
                neigh = [v for _, v in found[: self.m]]
                self.adjacency[lvl][idx] = neigh
                for v in neigh:
                    lst = self.adjacency[lvl].setdefault(v, [])
                    lst.append(idx)
                    if len(lst) > cap:
                        sims = self._sims(self._vectors[v], lst)
                        keep = np.argsort(-sims, kind="stable")[:cap]
                        self.adjacency[lvl][v] = [lst[i] for i in keep]
                entry = [v for _, v in found]

    # -- queries ----------------------------------------------------------

    def search(self, query: np.ndarray, k: int, ef_search: int = 64) -> list[tuple[str, float]]:
        q = np.asarray(query, dtype=np.float64)
        entry = [self.entry]
        for lvl in range(self.max_level, 0, -1):
            entry = [self._search_layer(q, entry, 1, lvl)[0][1]]
        best = self._search_layer(q, entry, max(k, ef_search), 0)
        ranked = sorted(best, key=lambda sv: (-sv[0], self.store.ids[sv[1]]))[:k]
        return [(self.store.ids[i], float(s)) for s, i in ranked]

    def _self_test(self, rng: np.random.Generator, probes: int = 32) -> float:
        dim = self.store.dim
        hits = total = 0
        for _ in range(probes):
            q = rng.normal(size=dim)
            q /= np.linalg.norm(q)
            exact = {i for i, _ in search_exact(q, self.store, 10)}
            approx = {i for i, _ in self.search(q, 10)}
            hits += len(exact & approx)
            total += len(exact)
        return hits / total
