import json
from dataclasses import replace

import numpy as np
import pytest

from nbfrec.graph import Schema, ingest_interactions
from nbfrec.synth import SynthSpec, block_codes, family_pair, generate


def test_edge_count_matches_binomial():
    spec = SynthSpec(num_users=10, num_items=10, num_clusters=2, p_intra=0.5, p_inter=0.0, feature_dim=2)
    # 50 same-cluster pairs at p = 0.5: mean 25, sd sqrt(12.5)
    counts = [generate(replace(spec, seed=s)).graph.num_edges for s in range(30)]
    assert all(abs(c - 25) <= 3 * np.sqrt(12.5) for c in counts)
    s = generate(spec)
    assert np.all(s.user_clusters[s.graph.users] == s.item_clusters[s.graph.items])


def test_generation_is_deterministic():
    a, b = generate(SynthSpec(seed=3)), generate(SynthSpec(seed=3))
    assert a.graph.same_as(b.graph)
    assert not a.graph.same_as(generate(SynthSpec(seed=4)).graph)


def test_full_signal_features_reveal_the_block():
    spec = SynthSpec(num_users=30, num_items=30, num_clusters=3, p_intra=0.5, p_inter=0.1, feature_dim=8,
                     feature_signal=1.0)
    s = generate(spec)
    codes = block_codes(3, 8)
    block = s.user_clusters[s.graph.users] * 3 + s.item_clusters[s.graph.items]
    decoded = np.argmax(s.graph.features @ codes.T, axis=1)
    assert np.array_equal(decoded, block)


def test_block_codes_are_distinct_unit_vectors():
    codes = block_codes(4, 16)
    assert np.allclose(np.linalg.norm(codes, axis=1), 1.0)
    assert len({tuple(c) for c in codes}) == 16
    assert np.all(codes[:, 8:] == 0)
    assert block_codes(3, 0).shape == (9, 0)


@pytest.mark.parametrize(
    "kw",
    [
        dict(num_users=0),
        dict(num_clusters=0),
        dict(p_intra=0.1, p_inter=0.2),
        dict(feature_signal=1.5),
        dict(feature_dim=-1),
        dict(num_users=3, num_items=3, p_intra=0.1, p_inter=0.0),
    ],
)
def test_invalid_specs_are_rejected(kw):
    with pytest.raises(ValueError):
        generate(SynthSpec(**kw))


def test_family_pair_shares_density_but_differs():
    spec = SynthSpec()
    a, b = family_pair(spec, 0, 1000)
    assert not a.graph.same_as(b.graph)
    mean = spec.expected_edges()
    # sum of independent Bernoullis: variance is at most the mean
    for s in (a, b):
        assert abs(s.graph.num_edges - mean) <= 3 * np.sqrt(mean)
    assert a.graph.d_raw == b.graph.d_raw == spec.feature_dim


def test_labels_and_files(tmp_path):
    s = generate(SynthSpec(num_users=20, num_items=20, num_clusters=2, p_intra=0.4, p_inter=0.05, feature_dim=3))
    labels = json.loads(s.labels_json())
    assert labels["spec"]["num_users"] == 20
    assert labels["user_clusters"] == s.user_clusters.tolist()
    schema = s.write(tmp_path / "g.csv", tmp_path / "labels.json")
    back = ingest_interactions((tmp_path / "g.csv").read_text(), schema)
    assert back.num_edges == s.graph.num_edges
    assert np.array_equal(back.features, s.graph.features)
    assert isinstance(schema, Schema)
    assert json.loads((tmp_path / "labels.json").read_text()) == labels
