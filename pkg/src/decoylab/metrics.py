"""Recall percentage, discovery and identity uniformity for one query, and their means.

An entry counts toward the query identity's own photos when it carries that
identity and the ``clean`` role.  Photos a person modified themselves keep the
``clean`` role (they still depict that person); protector decoys never count.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .lookup import search


@dataclass(frozen=True)
class QueryOutcome:
    query_id: str
    identity: str
    recall: tuple  # entries with .identity and .role, nearest first
    k: int
    n_identities: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.n_identities < 1:
            raise ValueError("store must hold at least one identity")


def outcome_from_search(store, query_id, identity, idx, k) -> QueryOutcome:
    return QueryOutcome(query_id, identity, tuple(store.entries[i] for i in idx[:k]), k, store.n_identities)


def _own(outcome: QueryOutcome) -> int:
    return sum(1 for e in outcome.recall if e.identity == outcome.identity and e.role == "clean")


def recall_percentage(outcome: QueryOutcome) -> float:
    return _own(outcome) / outcome.k


def discovery(outcome: QueryOutcome) -> int:
    return int(_own(outcome) > 0)


def identity_uniformity(outcome: QueryOutcome) -> float:
    return 1.0 - len({e.identity for e in outcome.recall}) / outcome.n_identities


@dataclass
class MetricReport:
    key: dict
    recall_mean: float
    discovery_mean: float
    idunif_mean: float
    n_queries: int
    per_identity: dict = field(default_factory=dict)  # identity -> (recall, discovery, idunif, n)
    discovery_identity_mean: float = float("nan")

    def row(self) -> dict:
        return dict(self.key, recall_mean=self.recall_mean, discovery_mean=self.discovery_mean,
                    idunif_mean=self.idunif_mean, n_queries=self.n_queries)


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def aggregate(outcomes, key=None) -> MetricReport | None:
    """Means over queries, per-identity means, and discovery averaged per identity first.

    Summation uses ``math.fsum`` over queries in the given order, so equal
    inputs always give bit-equal reports.  An empty cell gives ``None`` and a
    warning.
    """
    outcomes = list(outcomes)
    key = dict(key or {})
    if not outcomes:
        warnings.warn(f"empty metric cell {key}; omitted", stacklevel=2)
        return None
    rp = [recall_percentage(o) for o in outcomes]
    dr = [discovery(o) for o in outcomes]
    iu = [identity_uniformity(o) for o in outcomes]
    groups: dict[str, list[int]] = {}
    for i, o in enumerate(outcomes):
        groups.setdefault(o.identity, []).append(i)
    per = {ident: (_mean(rp[i] for i in ix), _mean(dr[i] for i in ix), _mean(iu[i] for i in ix), len(ix))
           for ident, ix in groups.items()}
    return MetricReport(key, _mean(rp), _mean(dr), _mean(iu), len(outcomes), per,
                        _mean(v[1] for v in per.values()))


def evaluate(store, model, queries, query_ids, identities, k_grid, key=None) -> list[MetricReport]:
    """One report per k, from a single search at the largest k."""
    k_grid = sorted(set(int(k) for k in k_grid))
    if not k_grid:
        raise ValueError("k grid must be non-empty")
    if k_grid[-1] > len(store):
        warnings.warn(f"k={k_grid[-1]} exceeds store size {len(store)}", stacklevel=2)
    idx = search(store, np.asarray(queries), model, k_grid[-1])
    reports = []
    for k in k_grid:
        outs = [outcome_from_search(store, qid, ident, row, k) for qid, ident, row in zip(query_ids, identities, idx)]
        reports.append(aggregate(outs, dict(key or {}, k=k)))
    return reports
