import math
import warnings
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decoylab.metrics import (
    QueryOutcome,
    aggregate,
    discovery,
    evaluate,
    identity_uniformity,
    recall_percentage,
)


@dataclass(frozen=True)
class E:
    identity: str
    role: str = "clean"


def outcome(recall, identity="me", n_identities=20, k=None):
    return QueryOutcome("q", identity, tuple(recall), k or len(recall), n_identities)


@pytest.mark.parametrize("recall, expected", [
    ([E("me")] * 10, 1.0),
    ([E("you")] * 10, 0.0),
    ([E("me")] * 2 + [E("you")] * 8, 0.2),
])
def test_recall_examples(recall, expected):
    assert recall_percentage(outcome(recall)) == expected


def test_decoys_of_own_identity_do_not_count():
    o = outcome([E("me", "decoy")] * 4 + [E("me")])
    assert recall_percentage(o) == 0.2
    assert discovery(outcome([E("me", "decoy")] * 5)) == 0


def test_discovery_examples():
    assert discovery(outcome([E("you")] * 9 + [E("me")])) == 1
    assert discovery(outcome([E("you")] * 10)) == 0
    outs = [outcome([E("me")])] * 2 + [outcome([E("you")])] * 3
    assert aggregate(outs).discovery_mean == 0.4


@pytest.mark.parametrize("idents, n, expected", [
    (["a"] * 5, 20, 0.95),
    ([f"i{j}" for j in range(20)], 20, 0.0),
    ([f"i{j}" for j in range(10)], 19, 1 - 10 / 19),
])
def test_idunif_examples(idents, n, expected):
    assert identity_uniformity(outcome([E(i) for i in idents], n_identities=n)) == pytest.approx(expected, abs=1e-15)


def test_single_outcome_report_equals_raw():
    o = outcome([E("me"), E("you"), E("me")], n_identities=4)
    r = aggregate([o], {"k": 3})
    assert (r.recall_mean, r.discovery_mean, r.idunif_mean, r.n_queries) == \
        (recall_percentage(o), discovery(o), identity_uniformity(o), 1)
    assert r.row()["k"] == 3


def test_nineteen_by_five_means():
    rng = np.random.default_rng(0)
    outs = [outcome([E(f"i{rng.integers(19)}") for _ in range(10)], identity=f"i{i}", n_identities=19)
            for i in range(19) for _ in range(5)]
    r = aggregate(outs)
    assert r.n_queries == 95 and len(r.per_identity) == 19
    assert all(v[3] == 5 for v in r.per_identity.values())
    # equal group sizes: the two discovery nestings agree
    assert r.discovery_identity_mean == pytest.approx(r.discovery_mean, abs=1e-15)


def test_empty_cell_warns_and_is_omitted():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert aggregate([], {"k": 5}) is None
    assert w


def test_invalid_outcomes():
    with pytest.raises(ValueError):
        outcome([], k=0)
    with pytest.raises(ValueError):
        outcome([E("a")], n_identities=0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=1,
                                                        max_size=12)), min_size=1, max_size=30))
def test_aggregate_matches_naive_loop(data):
    outs = [outcome([E(f"i{j}", "clean" if c else "decoy") for j, c in rec], identity=f"i{who}", n_identities=7)
            for who, rec in data]
    r = aggregate(outs)
    rp = dr = iu = 0.0
    for o in outs:
        own = 0
        names = set()
        for e in o.recall:
            names.add(e.identity)
            if e.identity == o.identity and e.role == "clean":
                own += 1
        rp += own / o.k
        dr += 1.0 if own else 0.0
        iu += 1 - len(names) / 7
    n = len(outs)
    assert abs(r.recall_mean - rp / n) <= 1e-12
    assert abs(r.discovery_mean - dr / n) <= 1e-12
    assert abs(r.idunif_mean - iu / n) <= 1e-12


def test_aggregation_is_order_exact():
    outs = [outcome([E("me")] * a + [E("x")] * (7 - a)) for a in range(8)]
    assert aggregate(outs).recall_mean == math.fsum(a / 7 for a in range(8)) / 8
    assert aggregate(outs[::-1]).recall_mean == aggregate(outs).recall_mean


def test_evaluate_slices_one_search(small_dataset):
    from decoylab.embednet import EmbedNet
    from decoylab.lookup import build
    small_model = EmbedNet.from_seed(2, (16, 16, 1), hidden=10, dim=8)
    store = build([(pid, ident, "clean", img) for pid, ident, img in small_dataset.clean_records()], small_model)
    q = list(small_dataset.query_records())
    reports = evaluate(store, small_model, np.stack([r[2] for r in q]), [r[0] for r in q], [r[1] for r in q],
                       [10, 1, 5], {"strategy": "none"})
    assert [r.key["k"] for r in reports] == [1, 5, 10]
    assert all(r.n_queries == len(q) for r in reports)
    assert reports[0].key["strategy"] == "none"
    with pytest.raises(ValueError):
        evaluate(store, small_model, np.stack([r[2] for r in q]), [], [], [])
