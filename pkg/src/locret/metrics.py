"""Ranking metrics and the three-difficulty evaluation protocol.

Average precision follows the revisited-benchmark convention: junk ids
are deleted from the ranking with positions closed up, each positive
contributes precision at its rank, and positives missing from the ranking
contribute zero. Difficulty setups remap the per-query easy/hard/junk
sets: the medium setup scores easy and hard together, the hard setup
treats easy as junk, and the base setup uses the annotation as listed.
Mean precision at k truncates the denominator at the rank of the last
positive so a query with few positives can still score 1.0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .descriptors import DescriptorStore
from .search import search_exact

PROTOCOLS = ("base", "medium", "hard")


@dataclass(frozen=True)
class QueryAnnotation:
    image_id: str
    crop: tuple[int, int, int, int] | None
    easy: frozenset[str]
    hard: frozenset[str]
    junk: frozenset[str]

    def __post_init__(self):
        if self.easy & self.hard or self.easy & self.junk or self.hard & self.junk:
            raise ValueError(f"query {self.image_id!r}: easy/hard/junk must be disjoint")


@dataclass
class EvaluationSet:
    queries: list[QueryAnnotation]
    gallery: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "queries": [
                {
                    "id": q.image_id,
                    "crop": list(q.crop) if q.crop else None,
                    "easy": sorted(q.easy),
                    "hard": sorted(q.hard),
                    "junk": sorted(q.junk),
                }
                for q in self.queries
            ],
            "gallery": list(self.gallery),
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvaluationSet":
        d = json.loads(text)
        queries = [
            QueryAnnotation(
                image_id=q["id"],
                crop=tuple(q["crop"]) if q.get("crop") else None,
                easy=frozenset(q.get("easy", ())),
                hard=frozenset(q.get("hard", ())),
                junk=frozenset(q.get("junk", ())),
            )
            for q in d["queries"]
        ]
        return cls(queries=queries, gallery=list(d.get("gallery", ())))

    @classmethod
    def load(cls, path: str | Path) -> "EvaluationSet":
        return cls.from_json(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def average_precision(ranking, positives, junk=()) -> float:
    """AP of one ranked id list against a positive set.

    Junk ids are removed first (closing the ranking up). Positives that
    never appear in the ranking count as precision zero.
    """
    positives = set(positives)
    junk = set(junk)
    if not positives:
        raise ValueError("positives must be nonempty")
    filtered = [r for r in ranking if r not in junk]
    hits = 0
    total = 0.0
    for rank, rid in enumerate(filtered, start=1):
        if rid in positives:
            hits += 1
            total += hits / rank
    return total / len(positives)


def precision_at(ranking, positives, junk, k: int) -> float:
    """Precision at k with the truncated denominator rule.

    The denominator is min(rank of the last retrieved positive, k); if no
    positive was retrieved the precision is zero.
    """
    positives = set(positives)
    junk = set(junk)
    filtered = [r for r in ranking if r not in junk]
    pos_ranks = [i for i, rid in enumerate(filtered, start=1) if rid in positives]
    if not pos_ranks:
        return 0.0
    kq = min(pos_ranks[-1], k)
    return sum(1 for r in pos_ranks if r <= kq) / kq


def protocol_sets(query: QueryAnnotation, protocol: str) -> tuple[set[str], set[str]]:
    """Positive and junk sets for one query under a difficulty setup."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; pick one of {PROTOCOLS}")
    if protocol == "hard":
        return set(query.hard), set(query.junk) | set(query.easy)
    # base and medium both score easy+hard with the junk list as annotated;
    # base exists so original-annotation sets can be evaluated unfiltered
    return set(query.easy) | set(query.hard), set(query.junk)


def evaluate(store: DescriptorStore, eval_set: EvaluationSet, protocol: str,
             k_list=(10,)) -> dict:
    """mAP and mP@k over an evaluation set against a descriptor store.

    Requires a descriptor for every gallery and query id; each query is
    ranked against the gallery with itself excluded. Queries whose
    positive set is empty under the protocol are skipped and reported.
    """
    missing = [g for g in eval_set.gallery if g not in store]
    missing += [q.image_id for q in eval_set.queries if q.image_id not in store]
    if missing:
        raise KeyError(f"descriptors missing for ids: {sorted(set(missing))}")

    aps, prec, skipped = [], {k: [] for k in k_list}, []
    for q in eval_set.queries:
        positives, junk = protocol_sets(q, protocol)
        if not positives:
            skipped.append(q.image_id)
            continue
        gallery = [g for g in eval_set.gallery if g != q.image_id]
        qvec = store.vector(q.image_id)
        scores = np.array([store.matrix[store._index[g]] @ qvec for g in gallery])
        order = np.lexsort((np.asarray(gallery), -scores))
        ranking = [gallery[i] for i in order]
        aps.append(average_precision(ranking, positives, junk))
        for k in k_list:
            prec[k].append(precision_at(ranking, positives, junk, k))

    if not aps:
        raise ValueError("every query was skipped (no positives under protocol)")
    return {
        "protocol": protocol,
        "mAP": float(np.mean(aps)),
        "mP": {k: float(np.mean(v)) for k, v in prec.items()},
        "num_queries": len(aps),
        "skipped_queries": skipped,
        "per_query_ap": aps,
    }


def rank_gallery(store: DescriptorStore, query_id: str, gallery) -> list[str]:
    """Full cosine ranking of a gallery for one stored query id."""
    qvec = store.vector(query_id)
    ids = [g for g in gallery if g != query_id]
    ranked = search_exact(qvec, store, k=len(store))
    keep = set(ids)
    return [i for i, _ in ranked if i in keep]
