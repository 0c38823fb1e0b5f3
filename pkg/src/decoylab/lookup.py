"""The adversary's photo store: exact nearest-neighbor search and a top-1 oracle.

A store is immutable once built.  Embeddings are kept per model id so the
same poisoned store can be queried through several models (direct and
transfer evaluation).  Ties in distance are broken by photo id.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (
    DegenerateVectorError,
    EmptySetError,
    normalize_rows,
    read_embeddings,
    write_embeddings,
)

ROLES = ("clean", "decoy")
MANIFEST = "manifest.tsv"
MANIFEST_COLUMNS = ("photo_id", "identity", "role", "strategy", "epsilon", "generator", "target")


class DuplicatePhotoError(ValueError):
    pass


class EmptyStoreError(EmptySetError):
    pass


@dataclass(frozen=True)
class Provenance:
    """Where a modified photo came from.  ``target`` is the protected identity."""

    strategy: str = ""
    epsilon: float | None = None
    generator: str = ""
    target: str = ""


@dataclass(frozen=True, eq=False)
class LookupEntry:
    photo_id: str
    identity: str
    role: str
    embedding: np.ndarray
    provenance: Provenance | None = None


@dataclass(frozen=True, eq=False)
class LookupStore:
    entries: tuple[LookupEntry, ...]
    caches: dict[str, np.ndarray]  # model id -> (n, d) normalized embeddings
    primary: str
    _rank: np.ndarray = field(repr=False)
    _by_identity: dict[str, tuple[int, ...]] = field(repr=False)

    def __len__(self):
        return len(self.entries)

    @property
    def identities(self) -> list[str]:
        return sorted(self._by_identity)

    @property
    def n_identities(self) -> int:
        return len(self._by_identity)

    def indices_of(self, identity: str, role: str | None = None) -> list[int]:
        idx = self._by_identity.get(identity, ())
        if role is None:
            return list(idx)
        return [i for i in idx if self.entries[i].role == role]

    def embeddings(self, model_id: str | None = None) -> np.ndarray:
        key = self.primary if model_id is None else model_id
        if key not in self.caches:
            raise KeyError(f"store has no embeddings for model {key!r}; have {sorted(self.caches)}")
        return self.caches[key]

    def decoys_targeting(self, identity: str) -> list[int]:
        return [i for i, e in enumerate(self.entries)
                if e.role == "decoy" and e.provenance is not None and e.provenance.target == identity]


def _model_list(models):
    if hasattr(models, "members"):
        return list(models.members)
    if hasattr(models, "embed_batch"):
        return [models]
    return list(models)


def _embed(records, models) -> dict[str, np.ndarray]:
    caches = {}
    for m in models:
        if not records:
            caches[m.model_id] = np.zeros((0, m.dim))
            continue
        raw = m.embed_batch(np.stack([r[3] for r in records]))
        try:
            caches[m.model_id] = normalize_rows(raw)
        except DegenerateVectorError:
            norms = np.linalg.norm(raw, axis=1)
            bad = [records[i][0] for i in np.flatnonzero(~(norms >= 1e-12))]
            raise DegenerateVectorError(f"model {m.model_id} gives zero-norm embeddings for {bad[:5]}") from None
    return caches


def _seal(entries, caches, primary) -> LookupStore:
    ids = [e.photo_id for e in entries]
    order = sorted(range(len(ids)), key=ids.__getitem__)
    rank = np.empty(len(ids), dtype=np.int64)
    rank[order] = np.arange(len(ids))
    by_identity: dict[str, list[int]] = {}
    for i, e in enumerate(entries):
        by_identity.setdefault(e.identity, []).append(i)
    for arr in caches.values():
        arr.setflags(write=False)
    return LookupStore(tuple(entries), caches, primary, rank, {k: tuple(v) for k, v in by_identity.items()})


def _check_records(records, existing=()):
    seen = set(existing)
    for r in records:
        if r[0] in seen:
            raise DuplicatePhotoError(f"duplicate photo id {r[0]!r}")
        if r[2] not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {r[2]!r}")
        seen.add(r[0])


def build(records, models) -> LookupStore:
    """Embed and seal ``records``: tuples ``(photo_id, identity, role, image[, provenance])``.

    ``models`` is one model, an ensemble or a list; the first is the primary
    whose embedding is stored on each entry.
    """
    records = [tuple(r) for r in records]
    models = _model_list(models)
    if not models:
        raise ValueError("build needs at least one model")
    _check_records(records)
    caches = _embed(records, models)
    primary = models[0].model_id
    entries = [LookupEntry(r[0], r[1], r[2], caches[primary][i], r[4] if len(r) > 4 else None)
               for i, r in enumerate(records)]
    return _seal(entries, caches, primary)


def with_entries(store: LookupStore, records, models=None) -> LookupStore:
    """A new store holding ``store``'s entries followed by ``records``.

    Existing rows are copied, never recomputed, so their distances to any
    query are unchanged.  New rows are embedded under every cached model
    (``models`` must supply each of them).
    """
    records = [tuple(r) for r in records]
    _check_records(records, (e.photo_id for e in store.entries))
    by_id = {m.model_id: m for m in _model_list(models or [])}
    missing = set(store.caches) - set(by_id)
    if records and missing:
        raise ValueError(f"models needed to embed new entries: {sorted(missing)}")
    fresh = _embed(records, [by_id[k] for k in store.caches]) if records else {
        k: np.zeros((0, v.shape[1])) for k, v in store.caches.items()}
    caches = {k: np.vstack([store.caches[k], fresh[k]]) for k in store.caches}
    n0 = len(store)
    entries = list(store.entries) + [
        LookupEntry(r[0], r[1], r[2], caches[store.primary][n0 + i], r[4] if len(r) > 4 else None)
        for i, r in enumerate(records)]
    return _seal(entries, caches, store.primary)


def search_embeddings(store: LookupStore, query_embs, k: int, model_id: str | None = None) -> np.ndarray:
    """Indices of the ``k`` nearest entries for each (already embedded) query.

    Returns an int array of shape ``(queries, min(k, len(store)))``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(store) == 0:
        raise EmptyStoreError("cannot search an empty store")
    emb = store.embeddings(model_id)
    q = normalize_rows(np.atleast_2d(query_embs))
    kk = min(k, len(store))
    out = np.empty((len(q), kk), dtype=np.int64)
    for i, row in enumerate(q):
        diff = emb - row
        d = np.einsum("ij,ij->i", diff, diff)
        out[i] = np.lexsort((store._rank, d))[:kk]
    return out


def distances_to(store: LookupStore, query_emb, idx, model_id: str | None = None) -> np.ndarray:
    q = normalize_rows(np.atleast_2d(query_emb))[0]
    diff = store.embeddings(model_id)[np.asarray(idx)] - q
    return np.einsum("ij,ij->i", diff, diff)


def search(store: LookupStore, queries, model, k: int) -> np.ndarray:
    """Batch ``top_k`` returning entry indices, one row per query image."""
    if len(store) == 0:
        raise EmptyStoreError("cannot search an empty store")
    return search_embeddings(store, model.embed_batch(np.asarray(queries)), k, model.model_id)


def top_k(store: LookupStore, q, model, k: int) -> list[LookupEntry]:
    idx = search(store, np.asarray(q, dtype=np.float64)[None], model, k)[0]
    return [store.entries[i] for i in idx]


def identify_top1(store: LookupStore, q, model, tau: float) -> str | None:
    """Identity of the nearest entry if it is within ``tau``, otherwise ``None``."""
    if tau < 0:
        raise ValueError("threshold must be >= 0")
    emb = model.embed_batch(np.asarray(q, dtype=np.float64)[None])
    i = int(search_embeddings(store, emb, 1, model.model_id)[0, 0])
    d = distances_to(store, emb, [i], model.model_id)[0]
    return store.entries[i].identity if d <= tau else None


def identify_top1_batch(store: LookupStore, queries, model, tau: float) -> list[str | None]:
    if tau < 0:
        raise ValueError("threshold must be >= 0")
    embs = model.embed_batch(np.asarray(queries))
    idx = search_embeddings(store, embs, 1, model.model_id)[:, 0]
    out = []
    for e, i in zip(embs, idx):
        d = distances_to(store, e, [i], model.model_id)[0]
        out.append(store.entries[i].identity if d <= tau else None)
    return out


def calibrate_threshold(store: LookupStore, queries, identities, model, percentile: float = 95.0) -> float:
    """Percentile of each query's distance to its nearest same-identity clean entry."""
    embs = model.embed_batch(np.asarray(queries))
    cache = store.embeddings(model.model_id)
    nearest = []
    for e, ident in zip(normalize_rows(embs), identities):
        own = store.indices_of(ident, "clean")
        if not own:
            raise EmptySetError(f"no clean entries for identity {ident!r}")
        diff = cache[own] - e
        nearest.append(np.einsum("ij,ij->i", diff, diff).min())
    if not nearest:
        raise EmptySetError("calibration needs at least one query")
    return float(np.percentile(nearest, percentile))


# --- persistence ----------------------------------------------------------


def save_store(store: LookupStore, directory) -> None:
    """Manifest TSV plus one FGE1 cache per model id (float32 on disk)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / MANIFEST, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in store.entries:
            p = e.provenance or Provenance()
            w.writerow([e.photo_id, e.identity, e.role, p.strategy,
                        "" if p.epsilon is None else repr(p.epsilon), p.generator, p.target])
    for model_id, arr in store.caches.items():
        write_embeddings(directory / f"{model_id}.fge", arr)
    (directory / "primary.txt").write_text(store.primary + "\n", encoding="utf-8")


def load_store(directory) -> LookupStore:
    directory = Path(directory)
    with open(directory / MANIFEST, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    primary = (directory / "primary.txt").read_text(encoding="utf-8").strip()
    caches = {}
    for path in sorted(directory.glob("*.fge")):
        arr = read_embeddings(path)
        if len(arr) != len(rows):
            raise ValueError(f"{path.name}: {len(arr)} rows, manifest has {len(rows)}")
        caches[path.stem] = normalize_rows(arr) if len(arr) else arr
    if primary not in caches:
        raise ValueError(f"missing embedding cache for primary model {primary!r}")
    entries = []
    for i, r in enumerate(rows):
        prov = None
        if r["role"] == "decoy" or r["strategy"]:
            prov = Provenance(r["strategy"], float(r["epsilon"]) if r["epsilon"] else None, r["generator"], r["target"])
        entries.append(LookupEntry(r["photo_id"], r["identity"], r["role"], caches[primary][i], prov))
    _check_records([(e.photo_id, e.identity, e.role) for e in entries])
    return _seal(entries, caches, primary)


def write_neighbors_csv(path, store: LookupStore, query_ids, query_embs, k: int, model_id: str | None = None):
    """Rows ``query_id, rank, photo_id, identity, distance`` (rank starts at 1)."""
    idx = search_embeddings(store, query_embs, k, model_id)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "rank", "photo_id", "identity", "distance"])
        for qid, e, row in zip(query_ids, np.atleast_2d(query_embs), idx):
            ds = distances_to(store, e, row, model_id)
            for r, (i, d) in enumerate(zip(row, ds), start=1):
                ent = store.entries[i]
                w.writerow([qid, r, ent.photo_id, ent.identity, f"{d:.9g}"])
