"""Target vectors for decoys and the protector/protected assignment.

Targets are read from a sealed :class:`~decoylab.lookup.LookupStore`.  For an
ensemble, :func:`choose_targets` returns one target per member, each taken in
that member's own embedding space; the random choices (which photo, which
decoy) are shared across members so the targets describe the same point.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .numerics import embedding_stats, make_rng

KINDS = ("universal", "random-lookup", "mean", "gaussian-sample", "decoy-retarget")


class StrategyPreconditionError(ValueError):
    pass


class DegenerateMeanError(ValueError):
    pass


class AssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class TargetStrategy:
    kind: str
    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")

    def rng_for(self, protected: str) -> np.random.Generator:
        # crc32 keeps the per-identity stream stable across processes
        return make_rng(self.seed, (self.stream << 32) | zlib.crc32(protected.encode("utf-8")))


def _model_ids(store, model_ids):
    if model_ids is None:
        return [store.primary]
    if isinstance(model_ids, str):
        return [model_ids]
    return [getattr(m, "model_id", m) for m in model_ids]


def _pool(strategy: TargetStrategy, protected: str, store) -> list[int]:
    if strategy.kind == "decoy-retarget":
        idx = store.decoys_targeting(protected)
        if not idx:
            raise StrategyPreconditionError(f"no decoys target {protected!r}")
    else:
        idx = store.indices_of(protected, "clean")
        if not idx:
            raise StrategyPreconditionError(f"{protected!r} has no clean entries")
    return idx


def choose_targets(strategy: TargetStrategy, protected: str, store, n: int, model_ids=None) -> np.ndarray:
    """``n`` target vectors for decoys protecting ``protected``.

    With a single model id (default: the store's primary model) the result is
    ``(n, d)``; with a list of ids it is ``(n, len(ids), d)``.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    ids = _model_ids(store, model_ids)
    pool = _pool(strategy, protected, store)
    rng = strategy.rng_for(protected)
    kind = strategy.kind
    per_model = []
    if kind == "universal":
        pick = pool[int(rng.integers(len(pool)))]
        per_model = [np.repeat(store.embeddings(m)[pick][None], n, axis=0) for m in ids]
    elif kind in ("random-lookup", "decoy-retarget"):
        picks = np.asarray(pool)[rng.integers(0, len(pool), n)] if n else np.zeros(0, dtype=int)
        per_model = [store.embeddings(m)[picks] for m in ids]
    else:
        for m in ids:
            mean, std = embedding_stats(store.embeddings(m)[pool])
            if np.linalg.norm(mean) < 1e-8:
                raise DegenerateMeanError(f"mean embedding of {protected!r} has norm below 1e-8")
            if kind == "mean" or not np.any(std):
                per_model.append(np.repeat(mean[None], n, axis=0))
            else:
                per_model.append(mean + std * rng.standard_normal((n, len(mean))))
    out = np.stack(per_model, axis=1) if per_model else np.zeros((n, 0, 0))
    return out[:, 0, :] if model_ids is None or isinstance(model_ids, str) else out


@dataclass(frozen=True)
class ProtectionAssignment:
    """For every protected identity, the protector supplying each decoy slot."""

    slots: dict[str, tuple[str, ...]]

    def counts(self, protected: str) -> list[tuple[str, int]]:
        seen: dict[str, int] = {}
        for p in self.slots[protected]:
            seen[p] = seen.get(p, 0) + 1
        return list(seen.items())

    def balanced(self) -> bool:
        for protected, slots in self.slots.items():
            c = self.counts(protected)
            if c and max(n for _, n in c) > math.ceil(len(slots) / len(c)):
                return False
        return True

    def rows(self):
        """``(protected, protector, count)`` in assignment order."""
        for protected in self.slots:
            for protector, count in self.counts(protected):
                yield protected, protector, count


def assign_protectors(protected_ids, protector_ids, decoys_per_protected: int,
                      rng: np.random.Generator) -> ProtectionAssignment:
    """Round-robin over a seeded permutation of the eligible protectors.

    Decoy slot ``j`` goes to protector ``order[j % m]``, so the first
    ``n mod m`` protectors supply one more decoy than the rest.
    """
    protectors = list(dict.fromkeys(protector_ids))
    if not protectors:
        raise AssignmentError("protector set is empty")
    slots = {}
    for p in protected_ids:
        eligible = [q for q in protectors if q != p]
        if not eligible:
            raise AssignmentError(f"{p!r} cannot be its own only protector")
        order = [eligible[i] for i in rng.permutation(len(eligible))]
        slots[p] = tuple(order[j % len(order)] for j in range(decoys_per_protected))
    return ProtectionAssignment(slots)


def write_assignment_tsv(path, assignment: ProtectionAssignment) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("protected\tprotector\tcount\n")
        for row in assignment.rows():
            fh.write("\t".join(map(str, row)) + "\n")
