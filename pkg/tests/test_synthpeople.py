import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from decoylab.embednet import EmbedNet
from decoylab.numerics import distance
from decoylab.synthpeople import InsufficientIdentitiesError, SynthDatasetSpec, cluster_quality, generate

FIXTURES = json.loads((Path(__file__).parent / "fixtures" / "regression.json").read_text())


def test_default_counts():
    ds = generate()
    assert ds.photos.shape == (19, 50, 32, 32, 1)
    assert ds.queries.shape == (19, 5, 32, 32, 1)
    assert len(set(ds.identities)) == 19
    assert ds.photos.min() >= 0 and ds.photos.max() <= 1


def test_zero_jitter_gives_identical_photos():
    spec = SynthDatasetSpec(n_identities=2, photos_per_identity=50, queries_per_identity=2, image_shape=(8, 8, 1),
                            brightness=0, noise_std=0, max_translation=0, texture_std=0)
    ds = generate(spec)
    assert np.all(ds.photos[0] == ds.photos[0, 0])
    m = EmbedNet.from_seed(1, (8, 8, 1), hidden=6, dim=4)
    assert cluster_quality(ds, m)[0] == pytest.approx(0.0, abs=1e-12)


def test_determinism():
    spec = SynthDatasetSpec(n_identities=3, photos_per_identity=4, seed=77)
    assert generate(spec).photos.tobytes() == generate(spec).photos.tobytes()
    assert generate(spec).photos.tobytes() != generate(replace(spec, seed=78)).photos.tobytes()


def test_queries_differ_from_photos(small_dataset):
    for i in range(small_dataset.photos.shape[0]):
        for q in small_dataset.queries[i]:
            assert not any(np.array_equal(q, p) for p in small_dataset.photos[i])


def test_single_identity_signals_insufficient():
    ds = generate(SynthDatasetSpec(n_identities=1, photos_per_identity=3, image_shape=(8, 8, 1)))
    with pytest.raises(InsufficientIdentitiesError):
        cluster_quality(ds, EmbedNet.from_seed(1, (8, 8, 1), hidden=4, dim=3))


def test_invalid_spec():
    with pytest.raises(ValueError):
        SynthDatasetSpec(n_identities=0)
    with pytest.raises(ValueError):
        SynthDatasetSpec(noise_std=-1)


def test_cluster_quality_matches_pairwise_oracle(small_dataset):
    m = EmbedNet.from_seed(3, (16, 16, 1), hidden=10, dim=8)
    intra, inter = cluster_quality(small_dataset, m)
    embs = [[m.forward(p) for p in ident] for ident in small_dataset.photos]
    same, cross = [], []
    n_id, n_ph = small_dataset.photos.shape[:2]
    for a in range(n_id):
        for b in range(a, n_id):
            for i in range(n_ph):
                for j in range(n_ph):
                    if a == b and j <= i:
                        continue
                    (same if a == b else cross).append(distance(embs[a][i], embs[b][j]))
    assert intra == pytest.approx(np.mean(same), rel=1e-9)
    assert inter == pytest.approx(np.mean(cross), rel=1e-9)


def test_default_world_separates_identities():
    intra, inter = cluster_quality(generate(), EmbedNet.from_seed(1))
    assert intra < inter
    assert intra == pytest.approx(FIXTURES["cluster_quality"]["intra"], rel=1e-6)
    assert inter == pytest.approx(FIXTURES["cluster_quality"]["inter"], rel=1e-6)
