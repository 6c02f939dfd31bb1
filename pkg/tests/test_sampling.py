import numpy as np
import pytest

from geotopics.data import aggregate_venues, bin_timestamp
from geotopics.sampling import Geometric, make_synthetic_model, sample_checkins, sample_dataset, sample_with_topics

DIMS = {"category": 4, "users": 5, "time_of_day": 6, "day_of_week": 7}


def test_one_hot_beta_all_venues_carry_value():
    m = make_synthetic_model([[0, 0]], dims={"category": 4}, varying=["category"], n_deviations=1, deviation=60.0, seed=3)
    ds = sample_dataset(m, 200, seed=0)
    j = int(np.argmax(m.beta("category")[0]))
    assert np.all(ds.category_index() == j)


def test_degenerate_theta():
    m = make_synthetic_model([[0, 0], [5, 5]], theta=[1.0, 0.0], dims=DIMS, seed=0)
    _, topics = sample_with_topics(m, 100, seed=1)
    assert np.all(topics == 0)


def test_law_of_large_numbers():
    m = make_synthetic_model([[0, 0], [1, 1]], theta=[0.3, 0.7], dims=DIMS, seed=4)
    ds, topics = sample_with_topics(m, 50_000, checkins=5, seed=2)
    assert np.allclose(np.bincount(topics, minlength=2) / ds.M, m.theta, atol=0.01)
    for f in m.features:
        for z in range(2):
            rows = ds.counts[f][topics == z]
            freq = np.asarray(rows.sum(axis=0)).ravel() / rows.sum()
            assert np.allclose(freq, m.beta(f)[z], atol=0.02)
    for z in range(2):
        loc = ds.locations[topics == z]
        assert np.allclose(loc.mean(axis=0), m.centers[z], atol=0.01)


def test_deterministic_under_seed():
    m = make_synthetic_model([[0, 0], [1, 1]], dims=DIMS, seed=4)
    a, b = sample_dataset(m, 50, seed=7), sample_dataset(m, 50, seed=7)
    assert np.array_equal(a.locations, b.locations)
    assert all((a.counts[f] != b.counts[f]).nnz == 0 for f in m.features)


def test_count_rules():
    m = make_synthetic_model([[0, 0]], dims=DIMS, seed=4)
    ds = sample_dataset(m, 300, checkins=3, per_feature={"users": Geometric(4.0)}, seed=1)
    assert np.all(np.asarray(ds.counts["time_of_day"].sum(axis=1)).ravel() == 3)
    assert np.all(np.asarray(ds.counts["category"].sum(axis=1)).ravel() == 1)
    users = np.asarray(ds.counts["users"].sum(axis=1)).ravel()
    assert users.min() >= 1 and abs(users.mean() - 4.0) < 0.5
    assert ds.metadata["sampler"]["per_feature"]["users"] == {"rule": "geometric", "mean": 4.0}


def test_sampled_data_has_finite_likelihood():
    from geotopics.model import venue_log_likelihoods

    m = make_synthetic_model([[0, 0], [1, 1]], dims=DIMS, seed=4)
    assert np.all(np.isfinite(venue_log_likelihoods(m, sample_dataset(m, 200, seed=5))))


def test_bad_inputs():
    m = make_synthetic_model([[0, 0]], dims=DIMS, seed=4)
    with pytest.raises(ValueError):
        sample_dataset(m, 0)
    with pytest.raises(ValueError):
        Geometric(0.5)


def test_checkins_reaggregate_to_same_counts():
    m = make_synthetic_model([[0, 0], [0.1, 0.1]], 0.001 * np.eye(2), dims=DIMS, seed=4)
    records = sample_checkins(m, 60, seed=3)
    ds = aggregate_venues(records)
    direct, _ = sample_with_topics(m, 60, seed=3)
    for rec in records[:50]:
        dow, tod = bin_timestamp(rec.timestamp, rec.utc_offset_minutes)
        assert 0 <= dow < 7 and 0 <= tod < 6
    # venue ids sort identically, so per-venue time/day histograms must agree
    for f in ("time_of_day", "day_of_week"):
        assert np.array_equal(ds.counts[f].toarray(), direct.counts[f].toarray())
    assert np.allclose(ds.locations, direct.locations)
