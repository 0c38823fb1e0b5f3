"""Acceptance suite: one PASS/FAIL line per criterion, printed at the end of the session.

Run on its own with ``python3 -m pytest tests/test_acceptance.py -v`` (about 15 minutes on one core).
"""

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from decoylab.embednet import EmbedNet, loss_and_input_gradient
from decoylab.harness import baseline_gate, emit_report, run_scenario
from decoylab.lookup import build, search, top_k
from decoylab.metrics import evaluate
from decoylab.numerics import make_rng, normalize_rows
from decoylab.synthpeople import generate
from suite import config

pytestmark = pytest.mark.slow

FIXTURES = json.loads((Path(__file__).parent / "fixtures" / "regression.json").read_text())
RESULTS: dict[int, str] = {}


def verdict(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


_RUNS = {}


def run(name):
    if name not in _RUNS:
        _RUNS[name] = run_scenario(config(name))
    return _RUNS[name]


@pytest.fixture(scope="module")
def dataset():
    return generate()


@pytest.fixture(scope="module")
def model():
    return EmbedNet.from_seed(1)


def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    worst = 0.0
    h = 1e-4
    for trial in range(10):
        rng = make_rng(900 + trial, 0)
        m = EmbedNet.from_seed(100 + trial)
        x = rng.uniform(0.1, 0.9, m.input_shape)
        v = rng.standard_normal(m.dim)
        _, g = loss_and_input_gradient(m, x, v)
        n = x.size
        step = (np.eye(n) * h).reshape((n,) + x.shape)
        tg = np.repeat(v[None], n, axis=0)
        fd = (m.losses_batch(x + step, tg) - m.losses_batch(x - step, tg)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(g.reshape(-1) - fd) / (np.abs(fd) + 1e-8))))
    dt = time.perf_counter() - t0
    verdict(1, worst <= 1e-4 and dt < 10, f"max relative error {worst:.2e} over 10 x 1024 components, {dt:.1f}s")


def test_c03_metric_oracle(dataset, model):
    t0 = time.perf_counter()
    rng = make_rng(3, 0)
    recs = [(pid, ident, "clean", img) for pid, ident, img in dataset.clean_records()]
    n_id = len(dataset.identities)
    for j in range(1000 - len(recs)):
        a = int(rng.integers(n_id))
        img = np.clip(dataset.photos[a, rng.integers(50)] + rng.normal(0, 0.03, dataset.photos.shape[2:]), 0, 1)
        recs.append((f"decoy-{j:03d}", dataset.identities[(a + 1) % n_id], "decoy", img))
    store = build(recs, model)
    q = list(dataset.query_records())
    extra = [(f"x{j}", dataset.identities[j], np.clip(dataset.queries[j, 0] + 0.02, 0, 1)) for j in range(100 - len(q))]
    q += extra
    imgs = np.stack([r[2] for r in q])
    ids, truth = [r[0] for r in q], [r[1] for r in q]
    k_grid = (1, 10, 100)
    reports = evaluate(store, model, imgs, ids, truth, k_grid)
    embs = normalize_rows(model.embed_batch(imgs))
    mismatches = 0
    for rep, k in zip(reports, k_grid):
        rp, dr, iu = [], [], []
        for e, ident in zip(embs, truth):
            scored = sorted((float(np.dot(ent.embedding - e, ent.embedding - e)), ent.photo_id, ent)
                            for ent in store.entries)
            top = [s[2] for s in scored[:k]]
            own = sum(1 for ent in top if ent.identity == ident and ent.role == "clean")
            rp.append(own / k)
            dr.append(1.0 if own else 0.0)
            iu.append(1.0 - len({ent.identity for ent in top}) / store.n_identities)
        expected = (math.fsum(rp) / 100, math.fsum(dr) / 100, math.fsum(iu) / 100)
        mismatches += (rep.recall_mean, rep.discovery_mean, rep.idunif_mean) != expected
    dt = time.perf_counter() - t0
    verdict(3, mismatches == 0 and dt < 30 and len(store) == 1000,
            f"{mismatches} mismatching cells of 3 (100 queries, 1000 entries), {dt:.1f}s")


def test_c04_knn_oracle(model):
    failures = 0
    for size in (1, 10, 100, 1000):
        rng = make_rng(4, size)
        imgs = rng.uniform(0, 1, (size,) + model.input_shape)
        for i in range(5, size, 5):
            imgs[i] = imgs[i - 5]  # exact ties
        pids = [f"p{j:05d}" for j in rng.permutation(size)]
        store = build([(pids[i], f"id{i % 7}", "clean", imgs[i]) for i in range(size)], model)
        queries = rng.uniform(0, 1, (20,) + model.input_shape)
        queries[: min(4, size)] = imgs[: min(4, size)]
        embs = normalize_rows(model.embed_batch(queries))
        for k in sorted({1, 10, size}):
            got = search(store, queries, model, k)
            for e, row, qimg in zip(embs, got, queries):
                ref = sorted((float(np.dot(ent.embedding - e, ent.embedding - e)), ent.photo_id) for ent in store.entries)
                failures += [store.entries[i].photo_id for i in row] != [pid for _, pid in ref[:k]]
                failures += [ent.photo_id for ent in top_k(store, qimg, model, k)] != [pid for _, pid in ref[:k]]
    verdict(4, failures == 0, f"{failures} disagreements with a full sort (sizes 1/10/100/1000, 20 queries)")


def test_c05_baseline_gate(dataset, model):
    gate = baseline_gate(dataset, [model], threshold=0.0)[model.model_id]
    r = gate["recall_at_1"]
    verdict(5, r >= 0.9, f"undefended recall@1 {r:.3f} (intra {gate['intra']:.4f} < inter {gate['inter']:.4f})")


def test_c06_loss_profile():
    rec = run("loss-profile")
    header, rows = rec.tables["loss_profile"]
    mean, init = header.index("mean"), header.index("initial_mean")
    means = [r[mean] for r in rows]
    mono = all(b <= a + 1e-6 for a, b in zip(means, means[1:]))
    exact = rows[0][0] == 0.0 and rows[0][mean] == rows[0][init]
    verdict(6, mono and exact, "mean final loss " + " ".join(f"{m:.4g}" for m in means) + f"; eps=0 equals initial: {exact}")


def test_c07_community_effect():
    rec = run("community")
    cell = dict(strategy="random-lookup", epsilon=0.06, k=10)
    base_r = rec.metric("recall_mean", decoy_ratio=0.0, **cell)
    base_u = rec.metric("idunif_mean", decoy_ratio=0.0, **cell)
    r = rec.metric("recall_mean", decoy_ratio=4.0, **cell)
    u = rec.metric("idunif_mean", decoy_ratio=4.0, **cell)
    pinned = FIXTURES["community_k10"]
    same = (r, u, base_r, base_u) == (pinned["recall"], pinned["idunif"], pinned["baseline_recall"],
                                       pinned["baseline_idunif"])
    ok = r <= 0.5 * base_r and u < base_u and same and rec.wall_clock < 600
    verdict(7, ok, f"recall@10 {r:.4f} vs baseline {base_r:.4f}, IDUnif@10 {u:.4f} vs {base_u:.4f}, "
                   f"matches pinned run: {same}, {rec.wall_clock:.0f}s")


def test_c08_strategy_ordering():
    rec = run("community")
    at = dict(epsilon=0.06, decoy_ratio=4.0)
    dr_rand = rec.metric("discovery_mean", strategy="random-lookup", k=10, **at)
    dr_univ = rec.metric("discovery_mean", strategy="universal", k=10, **at)
    rp_mean = rec.metric("recall_mean", strategy="mean", k=100, **at)
    rp_rand = rec.metric("recall_mean", strategy="random-lookup", k=100, **at)
    verdict(8, dr_rand <= dr_univ and rp_mean <= rp_rand,
            f"DR@10 random-lookup {dr_rand:.4f} <= universal {dr_univ:.4f}: {dr_rand <= dr_univ}; "
            f"RP@100 mean {rp_mean:.4f} <= random-lookup {rp_rand:.4f}: {rp_mean <= rp_rand}")


def test_c09_large_k_discovery(dataset, model):
    rng = make_rng(9, 0)
    n_id = len(dataset.identities)
    recs = []
    for i, ident in enumerate(dataset.identities):
        keep = 1 if i % 2 else 50  # half the identities keep a single clean photo
        recs += [(dataset.photo_id(i, j), ident, "clean", dataset.photos[i, j]) for j in range(keep)]
        recs += [(f"{ident}-decoy{j}", dataset.identities[(i + 1) % n_id], "decoy",
                  np.clip(dataset.photos[i, j] + rng.normal(0, 0.05, dataset.photos.shape[2:]), 0, 1))
                 for j in range(30)]
    store = build(recs, model)
    q = list(dataset.query_records())
    with pytest.warns(UserWarning, match="exceeds store size"):
        rep = evaluate(store, model, np.stack([r[2] for r in q]), [r[0] for r in q], [r[1] for r in q],
                       [len(store), len(store) + 10])
    worst = min(r.discovery_mean for r in rep)
    verdict(9, worst == 1.0, f"DR at k >= store size ({len(store)} entries): {worst}")


def test_c10_transfer():
    rec = run("transfer")
    evals = sorted({r.key["model_eval"] for r in rec.reports})
    unseen = [m for m in evals if m.startswith("m3-")][0]
    direct = [m for m in evals if m != unseen]
    base = rec.metric("recall_mean", decoy_ratio=0.0, model_eval=unseen, k=1)
    parts, ok = [f"baseline {base:.3f}"], True
    for ratio in sorted({r.key["decoy_ratio"] for r in rec.reports if r.key["decoy_ratio"] >= 8}):
        t = rec.metric("recall_mean", decoy_ratio=ratio, model_eval=unseen, k=1)
        d = float(np.mean([rec.metric("recall_mean", decoy_ratio=ratio, model_eval=m, k=1) for m in direct]))
        ok &= t < base and d <= t
        parts.append(f"ratio {ratio:g}: transfer {t:.3f}, direct {d:.3f}")
    verdict(10, ok, "recall@1 at eps 0.5, " + "; ".join(parts))


def test_c11_multi_round():
    rec = run("multi-round")
    diffs = {}
    for name in ("recall_mean", "discovery_mean", "idunif_mean"):
        a = rec.metric(name, round=1, k=50)
        b = rec.metric(name, round=2, k=50)
        diffs[name] = abs(b - a)
    verdict(11, max(diffs.values()) <= 0.1, ", ".join(f"|d {k.split('_')[0]}| {v:.4f}" for k, v in diffs.items()))


def test_c12_solo_subsample():
    rec = run("solo")
    k = max(rec.config.k_grid)
    rates = rec.config.subsample_rates
    dr = [rec.metric("discovery_mean", strategy=f"solo@{r:g}", k=k) for r in rates]
    # discovery may not fall as the rate drops and must rise overall; the 1.0 cap rules out a strict rise each step
    ok = all(b >= a for a, b in zip(dr, dr[1:])) and dr[-1] > dr[0]
    verdict(12, ok, f"DR@{k} for rates {', '.join(f'{r:g}' for r in rates)}: {', '.join(f'{d:.3f}' for d in dr)}")


def test_c02_constraints():
    names = ("loss-profile", "community", "multi-round", "solo", "transfer")
    total = sum(run(n).n_decoys for n in names)
    bad = sum(run(n).violations for n in names)
    verdict(2, bad == 0 and total > 0, f"{bad} violations among {total} attacked photos in {len(names)} scenarios")


def test_c13_determinism(tmp_path):
    same = True
    for i in range(2):
        rec = run_scenario(config("determinism"))
        emit_report(rec, tmp_path / f"run{i}")
    files = sorted(p.name for p in (tmp_path / "run0").glob("*.csv"))
    for name in files:
        same &= (tmp_path / "run0" / name).read_bytes() == (tmp_path / "run1" / name).read_bytes()
    emit_report(run_scenario(config("community", n_protected=3)), tmp_path / "c1")
    emit_report(run_scenario(config("community", n_protected=3)), tmp_path / "c2")
    for name in ("metrics.csv", "ratio_vs_k.csv"):
        same &= (tmp_path / "c1" / name).read_bytes() == (tmp_path / "c2" / name).read_bytes()
    verdict(13, same and bool(files), f"byte-identical CSVs across repeated runs: {same}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
