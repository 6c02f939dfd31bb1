import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geotopics.data import FeatureDomains, Dataset, TIME_OF_DAY
from geotopics.errors import GeotopicsError
from geotopics.model import ModelInstance, penalized_objective
from geotopics.sampling import make_synthetic_model, sample_dataset
from geotopics.trainer import (
    EtaSolverConfig,
    TrainingConfig,
    compute_global_log_probs,
    e_step,
    eta_objective,
    global_log_probs_from_counts,
    grid_search,
    m_step_eta,
    m_step_mixture,
    run_em,
    solve_eta,
)

from oracles import eta_lattice_max, eta_objective_loop, gaussian_pdf, softmax_loop

NYC_TOD = [106_000, 219_000, 240_000, 333_000, 118_000, 25_000]


def dataset(locations, counts: dict, domains: dict) -> Dataset:
    M = len(locations)
    return Dataset(tuple(f"v{i}" for i in range(M)), np.asarray(locations, float), {f: np.asarray(c, float) for f, c in counts.items()}, FeatureDomains(domains))


class TestGlobalLogProbs:
    def test_nyc_evening_raw_frequencies(self):
        mu = global_log_probs_from_counts(NYC_TOD, smoothing=0.0)
        assert mu[TIME_OF_DAY.index("evening")] == pytest.approx(math.log(333 / 1041), abs=1e-6)
        assert mu[3] == pytest.approx(-1.1397, abs=1e-4)

    def test_nyc_evening_smoothed_bias(self):
        # default smoothing shifts the log by about eps/c - m*eps/T
        mu = global_log_probs_from_counts(NYC_TOD)
        bias = 0.5 / 333_000 - 6 * 0.5 / 1_041_000
        assert mu[3] - math.log(333 / 1041) == pytest.approx(bias, rel=1e-3)
        assert mu[3] == pytest.approx(-1.1397, abs=1e-4)

    def test_uniform(self):
        assert np.allclose(global_log_probs_from_counts([7, 7, 7, 7]), -math.log(4), atol=1e-15)

    def test_smoothing_arithmetic(self):
        assert np.allclose(global_log_probs_from_counts([1, 0]), [math.log(0.75), math.log(0.25)], atol=1e-15)

    def test_zero_total(self):
        with pytest.raises(ValueError):
            global_log_probs_from_counts([0, 0])

    def test_from_dataset_sums_all_venues(self):
        ds = dataset([[0, 0], [1, 1]], {"category": [[1, 0, 0], [0, 0, 1]]}, {"category": ("a", "b", "c")})
        assert np.allclose(compute_global_log_probs(ds, "category"), np.log(np.array([1.5, 0.5, 1.5]) / 3.5))


def two_topic(centers, covs, theta, mu, eta, labels=("a", "b")):
    return ModelInstance(theta=theta, centers=centers, covariances=covs, mu={"category": mu}, eta={"category": eta}, domains=FeatureDomains({"category": labels}))


class TestEStep:
    def test_single_topic(self, toy_data):
        m = make_synthetic_model([[0.5, 0.3]], dims={f: toy_data.domains.size(f) for f in toy_data.features}, seed=1)
        m = m.replace(domains=toy_data.domains)
        assert np.array_equal(e_step(m, toy_data), np.ones((toy_data.M, 1)))

    def test_mirror_symmetry(self):
        m = two_topic([[-1, 0], [1, 0]], [np.eye(2)] * 2, [0.5, 0.5], np.log([0.5, 0.5]), [[1.0, 0.0], [0.0, 1.0]])
        ds = dataset([[0, 0.3]], {"category": [[1, 1]]}, {"category": ("a", "b")})
        assert np.allclose(e_step(m, ds), 0.5, atol=1e-15)

    def test_bayes_rule_toy(self):
        m = two_topic([[0, 0], [1, 0.5]], [np.diag([0.5, 0.3]), [[0.4, 0.1], [0.1, 0.6]]], [0.3, 0.7], np.log([0.6, 0.4]), [[0.5, 0.0], [0.0, 1.2]])
        locs = [[0.1, 0.2], [0.8, 0.4], [0.5, -0.3]]
        counts = [[1, 0], [0, 1], [1, 0]]
        ds = dataset(locs, {"category": counts}, {"category": ("a", "b")})
        q = e_step(m, ds)
        for d in range(3):
            joint = []
            for z in range(2):
                beta = softmax_loop(list(m.mu["category"] + m.eta["category"][z]))
                p = m.theta[z] * gaussian_pdf(locs[d], m.centers[z], m.covariances[z])
                for j, n in enumerate(counts[d]):
                    p *= beta[j] ** n
                joint.append(p)
            assert np.allclose(q[d], np.array(joint) / sum(joint), atol=1e-9)

    def test_rows_stochastic(self, toy_model, toy_data):
        q = e_step(toy_model, toy_data)
        assert np.allclose(q.sum(axis=1), 1.0, atol=1e-9) and np.all(q >= 0)


class TestMStepMixture:
    def test_plus_four(self):
        ds = dataset([[1, 0], [-1, 0]], {"category": [[1], [1]]}, {"category": ("a",)})
        theta, centers, covs, empty = m_step_mixture(np.ones((2, 1)), ds)
        assert covs[0, 0, 0] == pytest.approx(1 / 3, abs=1e-15)
        assert np.allclose(centers[0], 0.0) and theta[0] == 1.0 and not empty.any()

    def test_hard_assignment_means(self, rng):
        a = rng.normal(0, 1, (10, 2))
        b = rng.normal(5, 1, (7, 2))
        ds = dataset(np.vstack([a, b]), {"category": np.ones((17, 1))}, {"category": ("a",)})
        resp = np.zeros((17, 2))
        resp[:10, 0] = 1
        resp[10:, 1] = 1
        theta, centers, _, _ = m_step_mixture(resp, ds)
        assert np.allclose(centers, [a.mean(axis=0), b.mean(axis=0)], atol=1e-12)
        assert np.allclose(theta, [10 / 17, 7 / 17])

    def test_weighted_moment_oracle(self, rng):
        loc = rng.normal(0, 1, (25, 2))
        resp = rng.dirichlet(np.ones(3), 25)
        ds = dataset(loc, {"category": np.ones((25, 1))}, {"category": ("a",)})
        theta, centers, covs, _ = m_step_mixture(resp, ds)
        for z in range(3):
            w = resp[:, z]
            c = [sum(w[d] * loc[d, i] for d in range(25)) / sum(w) for i in range(2)]
            s = [[sum(w[d] * (loc[d, i] - c[i]) * (loc[d, j] - c[j]) for d in range(25)) / (sum(w) + 4) for j in range(2)] for i in range(2)]
            assert np.allclose(centers[z], c, atol=1e-10)
            assert np.allclose(covs[z], s, atol=1e-10)
            assert theta[z] == pytest.approx(sum(w) / 25, abs=1e-12)

    def test_empty_topic_flagged(self):
        ds = dataset([[0, 0], [1, 1]], {"category": [[1], [1]]}, {"category": ("a",)})
        resp = np.array([[1.0, 0.0], [1.0, 0.0]])
        _, centers, _, empty = m_step_mixture(resp, ds)
        assert empty.tolist() == [False, True] and np.all(np.isnan(centers[1]))

    def test_floor_applied(self):
        ds = dataset([[0, 0], [0, 0]], {"category": [[1], [1]]}, {"category": ("a",)})
        _, _, covs, _ = m_step_mixture(np.ones((2, 1)), ds)
        assert np.linalg.eigvalsh(covs[0]).min() >= 1e-8 - 1e-20


class TestEta:
    def test_huge_lambda_zero(self, rng):
        C = rng.integers(0, 50, (4, 6)).astype(float)
        eta = solve_eta(C, np.log(np.full(6, 1 / 6)), 1e6)
        assert np.abs(eta).max() < 1e-3

    def test_counts_matching_mu_stationary(self):
        mu = np.log([0.5, 0.3, 0.2])
        eta = solve_eta(np.array([[50.0, 30.0, 20.0]]), mu, 0.0)
        assert np.abs(eta).max() < 1e-6

    def test_lattice_oracle_10_1_1(self):
        C = [10.0, 1.0, 1.0]
        mu = np.log(np.full(3, 1 / 3))
        eta = solve_eta(np.array([C]), mu, 1.0, max_iter=1000, rel_tol=1e-10)[0]
        ours = eta_objective_loop(C, mu, eta, 1.0)
        assert ours >= eta_lattice_max(C, mu, 1.0) - 1e-6

    def test_objective_matches_loop(self, rng):
        C, mu, eta = rng.integers(0, 9, 5).astype(float), np.log(rng.dirichlet(np.ones(5))), rng.normal(size=5)
        assert eta_objective(C, mu, eta, 0.4)[0] == pytest.approx(eta_objective_loop(C, mu, eta, 0.4), abs=1e-12)

    @given(arrays(float, (3, 4), elements=st.integers(0, 30).map(float)), st.floats(0.0, 20.0))
    def test_never_worse_than_warm_start(self, C, lam):
        mu = np.log(np.array([0.4, 0.3, 0.2, 0.1]))
        warm = np.tile([0.5, -0.5, 0.0, 0.2], (3, 1))
        eta = solve_eta(C, mu, lam, warm)
        assert np.all(eta_objective(C, mu, eta, lam) >= eta_objective(C, mu, warm, lam) - 1e-9)

    @given(arrays(float, (2, 5), elements=st.integers(0, 40).map(float)), st.floats(0.05, 10.0))
    def test_subgradient_optimality(self, C, lam):
        mu = np.log(np.full(5, 0.2))
        eta = solve_eta(C, mu, lam, max_iter=2000, rel_tol=1e-12)
        for z in range(2):
            N = C[z].sum()
            beta = np.exp(mu + eta[z]) / np.exp(mu + eta[z]).sum()
            g = C[z] - N * beta
            # zero entries: |g| <= lam; nonzero: g = lam * sign(eta)
            tol = 1e-3 * max(1.0, N)
            zero = eta[z] == 0
            assert np.all(np.abs(g[zero]) <= lam + tol)
            assert np.allclose(g[~zero], lam * np.sign(eta[z][~zero]), atol=tol)

    def test_exact_zeros(self):
        eta = solve_eta(np.array([[20.0, 19.0, 21.0, 0.0]]), np.log(np.full(4, 0.25)), 2.0)
        assert np.sum(eta == 0.0) >= 2

    def test_non_finite_objective(self):
        with pytest.raises(GeotopicsError):
            solve_eta(np.array([[1.0, 1.0]]), np.array([0.0, -np.inf]), 1.0)

    def test_m_step_eta_uses_expected_counts(self, toy_model, toy_data):
        resp = e_step(toy_model, toy_data)
        eta = m_step_eta(resp, toy_data, "category", 1.0, toy_model.mu["category"], None, EtaSolverConfig(500, 1e-10))
        C = np.asarray((toy_data.counts["category"].T @ resp).T)
        assert np.allclose(eta, solve_eta(C, toy_model.mu["category"], 1.0, None, 500, 1e-10))


class TestRunEM:
    def test_k1_center_is_sample_mean(self):
        m = make_synthetic_model([[2.0, -1.0]], 0.3 * np.eye(2), dims={"category": 4}, seed=2)
        ds = sample_dataset(m, 500, seed=3)
        model, _ = run_em(ds, TrainingConfig(k=1))
        se = np.sqrt(np.diag(np.cov(ds.locations.T)) / ds.M)
        assert np.all(np.abs(model.centers[0] - ds.locations.mean(axis=0)) <= 3 * se)

    def test_monotone(self, toy_data):
        _, trace = run_em(toy_data, TrainingConfig(k=3, seed=1))
        obj = [r.penalized_objective for r in trace]
        assert all(b >= a - 1e-9 for a, b in zip(obj, obj[1:]))

    def test_trace_objective_recomputes(self, toy_data):
        model, trace = run_em(toy_data, TrainingConfig(k=2, seed=3))
        assert trace[-1].penalized_objective == pytest.approx(penalized_objective(model, toy_data), rel=1e-12)

    def test_invariants(self, toy_data):
        model, _ = run_em(toy_data, TrainingConfig(k=4, seed=0, max_em_iters=30))
        assert abs(model.theta.sum() - 1) < 1e-12
        assert np.all(np.linalg.eigvalsh(model.covariances) >= 1e-8 - 1e-20)
        assert model.metadata["k"] == 4 and "iterations" in model.metadata

    def test_too_few_venues(self, toy_data):
        with pytest.raises(GeotopicsError):
            run_em(toy_data.subset([0, 1]), TrainingConfig(k=3))

    def test_mu_shift_invariance(self, toy_data):
        mu = {f: compute_global_log_probs(toy_data, f) for f in toy_data.features}
        a, _ = run_em(toy_data, TrainingConfig(k=3, max_em_iters=5), mu=mu)
        b, _ = run_em(toy_data, TrainingConfig(k=3, max_em_iters=5), mu={f: v + 3.0 for f, v in mu.items()})
        assert np.allclose(e_step(a, toy_data), e_step(b, toy_data), atol=1e-12)

    def test_deterministic(self, toy_data):
        a, _ = run_em(toy_data, TrainingConfig(k=3, seed=9, max_em_iters=20))
        b, _ = run_em(toy_data, TrainingConfig(k=3, seed=9, max_em_iters=20))
        assert np.array_equal(a.centers, b.centers)

    def test_clamped_feature_stays_zero(self, toy_data):
        model, _ = run_em(toy_data, TrainingConfig(k=3, clamp_eta=frozenset({"users"}), max_em_iters=20))
        assert np.all(model.eta["users"] == 0)

    def test_fixed_gaussians_frozen(self, toy_model, toy_data):
        model, _ = run_em(toy_data, TrainingConfig(k=3, max_em_iters=10), fixed_gaussians=(toy_model.centers, toy_model.covariances))
        assert np.array_equal(model.centers, toy_model.centers)

    def test_random_init(self, toy_data):
        model, _ = run_em(toy_data, TrainingConfig(k=3, init_scheme="random", max_em_iters=10))
        assert model.k == 3

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainingConfig(k=0)
        with pytest.raises(ValueError):
            TrainingConfig(lam=-1)
        with pytest.raises(ValueError):
            TrainingConfig(em_rel_tol=0)


class TestGridSearch:
    def test_single_cell(self, toy_data):
        _, report = grid_search(toy_data, [2], [1.0], TrainingConfig(max_em_iters=20))
        assert [(e["k"], e["lambda"]) for e in report.entries] == [(2, 1.0)]
        assert report.selected == {"k": 2, "lambda": 1.0}
        assert (report.train_size, report.test_size) == (240, 60)

    def test_duplicate_pair_identical(self, toy_data):
        _, report = grid_search(toy_data, [2, 2], [1.0], TrainingConfig(max_em_iters=20))
        a, b = report.entries
        assert a["test_mean_log_likelihood"] == b["test_mean_log_likelihood"]

    def test_ties_prefer_smaller(self, toy_data):
        # identical fits for every lambda when eta is clamped everywhere
        cfg = TrainingConfig(max_em_iters=10, clamp_eta=frozenset(toy_data.features))
        _, report = grid_search(toy_data, [2], [10.0, 0.1, 1.0], cfg)
        assert report.selected == {"k": 2, "lambda": 0.1}

    def test_known_truth(self, toy_model):
        ds = sample_dataset(toy_model, 1500, seed=21)
        _, report = grid_search(ds, [1, 3], [1.0], TrainingConfig(seed=0))
        assert report.selected["k"] == 3

    def test_empty_grid(self, toy_data):
        with pytest.raises(ValueError):
            grid_search(toy_data, [], [1.0])
