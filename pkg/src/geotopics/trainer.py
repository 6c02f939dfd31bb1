"""Expectation-maximization for the sparse geospatial topic model."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp
from sklearn.cluster import kmeans_plusplus

from .data import Dataset, split_train_test
from .errors import GeotopicsError
from .model import (
    LocationMixture,
    ModelInstance,
    dataset_log_likelihood,
    log_joint,
    penalty_terms,
    regularize_covariance,
)

log = logging.getLogger(__name__)

DEFAULT_KS = (5, 10, 20, 35, 50, 55)
DEFAULT_LAMBDAS = (0.1, 1.0, 10.0)
EMPTY_TOPIC_MASS = 1e-12


@dataclass(frozen=True)
class EtaSolverConfig:
    max_inner_iters: int = 200
    inner_rel_tol: float = 1e-6


@dataclass(frozen=True)
class TrainingConfig:
    """Hyper-parameters for one EM fit.

    ``seed`` drives both the train/test split used by the grid search and the
    k-means++ initialization. ``clamp_eta`` lists features whose deviations are
    held at zero (feature ablation).
    """

    k: int = 10
    lam: float = 1.0
    max_em_iters: int = 200
    em_rel_tol: float = 1e-6
    eta_solver: EtaSolverConfig = field(default_factory=EtaSolverConfig)
    seed: int = 0
    init_scheme: str = "kmeans++"
    smoothing: float = 0.5
    train_fraction: float = 0.8
    clamp_eta: frozenset = frozenset()

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.em_rel_tol <= 0 or self.eta_solver.inner_rel_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.init_scheme not in ("kmeans++", "random"):
            raise ValueError(f"unknown init scheme {self.init_scheme!r}")
        object.__setattr__(self, "clamp_eta", frozenset(self.clamp_eta))

    def to_json(self) -> dict:
        d = asdict(self)
        d["clamp_eta"] = sorted(self.clamp_eta)
        return d


@dataclass
class IterationRecord:
    iteration: int
    penalized_objective: float
    log_likelihood: float
    reinitialized: list = field(default_factory=list)


def compute_global_log_probs(ds: Dataset, feature: str, smoothing: float = 0.5) -> np.ndarray:
    """Smoothed log relative frequencies of a feature's values over all venues."""
    counts = np.asarray(ds.counts[feature].sum(axis=0)).ravel()
    return global_log_probs_from_counts(counts, smoothing)


def global_log_probs_from_counts(counts, smoothing: float = 0.5) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        raise ValueError("feature has zero total count")
    return np.log((counts + smoothing) / (total + smoothing * counts.size))


def e_step(model: ModelInstance, ds: Dataset) -> np.ndarray:
    """Posterior topic responsibilities q_d(z), rows summing to one."""
    lj = log_joint(model, ds)
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


def m_step_mixture(resp: np.ndarray, ds: Dataset):
    """Closed-form updates of theta, centers and covariances.

    Returns ``(theta, centers, covariances, empty)`` where ``empty`` flags topics
    whose total responsibility is below 1e-12; their center and covariance are
    left as NaN for the caller to reinitialize.
    """
    qt = np.ascontiguousarray(resp.T)  # (k, M): reductions run along contiguous axis
    mass = qt.sum(axis=1)
    theta = mass / mass.sum()
    empty = mass < EMPTY_TOPIC_MASS
    safe = np.where(empty, 1.0, mass)
    loc = ds.locations
    centers = np.stack([(qt * loc[:, 0]).sum(axis=1), (qt * loc[:, 1]).sum(axis=1)], axis=1) / safe[:, None]
    dx = loc[None, :, 0] - centers[:, None, 0]
    dy = loc[None, :, 1] - centers[:, None, 1]
    sxx = (qt * dx * dx).sum(axis=1)
    sxy = (qt * dx * dy).sum(axis=1)
    syy = (qt * dy * dy).sum(axis=1)
    covs = np.stack([np.stack([sxx, sxy], -1), np.stack([sxy, syy], -1)], axis=1)
    covs = covs / (mass + 4.0)[:, None, None]
    covs = regularize_covariance(covs)
    centers[empty] = np.nan
    covs[empty] = np.nan
    return theta, centers, covs, empty


def _soft_threshold(x: np.ndarray, t) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _smooth_part(C, N, mu, eta):
    a = mu[None, :] + eta
    lse = logsumexp(a, axis=1)
    f = (C * a).sum(axis=1) - N * lse
    grad = C - N[:, None] * np.exp(a - lse[:, None])
    return f, grad


def eta_objective(C, mu, eta, lam) -> np.ndarray:
    """sum_j C_j log beta_j(eta) - lam * |eta|_1 per row."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    f, _ = _smooth_part(C, C.sum(axis=1), np.asarray(mu, dtype=float), eta)
    return f - lam * np.abs(eta).sum(axis=1)


def solve_eta(
    C: np.ndarray,
    mu: np.ndarray,
    lam: float,
    eta0: np.ndarray | None = None,
    max_iter: int = 200,
    rel_tol: float = 1e-6,
) -> np.ndarray:
    """Maximize ``sum_j C[z, j] log softmax(mu + eta_z)_j - lam |eta_z|_1`` row-wise.

    Accelerated proximal gradient ascent with soft-thresholding, backtracking
    and function-value restarts. Every accepted iterate improves the objective,
    so the result never scores below ``eta0``. Zeros produced by the proximal
    step are exact.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    mu = np.asarray(mu, dtype=float)
    k, m = C.shape
    x = np.zeros((k, m)) if eta0 is None else np.array(eta0, dtype=float).reshape(k, m)
    N = C.sum(axis=1)
    f_x, _ = _smooth_part(C, N, mu, x)
    F_x = f_x - lam * np.abs(x).sum(axis=1)
    if not np.all(np.isfinite(F_x)):
        raise GeotopicsError("non-finite objective in deviation sub-problem")

    empty = N <= 0
    if lam > 0:
        x[empty] = 0.0
    active = ~empty
    # gradient Lipschitz constant is at most N/2, so 2/N always passes the test
    min_step = np.where(empty, 1.0, 2.0 / np.where(empty, 1.0, N))
    step = min_step.copy()
    y = x.copy()
    t = np.ones(k)

    for _ in range(max_iter):
        if not active.any():
            break
        rows = np.flatnonzero(active)
        Cr, Nr, yr = C[rows], N[rows], y[rows]
        f_y, g_y = _smooth_part(Cr, Nr, mu, yr)
        s = np.maximum(step[rows] * 2.0, min_step[rows])
        while True:
            x_new = _soft_threshold(yr + s[:, None] * g_y, (s * lam)[:, None])
            d = x_new - yr
            f_new, _ = _smooth_part(Cr, Nr, mu, x_new)
            bound = f_y + (g_y * d).sum(axis=1) - (d * d).sum(axis=1) / (2.0 * s)
            bad = (f_new < bound - 1e-12 * np.abs(f_y)) & (s > min_step[rows])
            if not bad.any():
                break
            s = np.where(bad, np.maximum(s * 0.5, min_step[rows]), s)
        step[rows] = s
        F_new = f_new - lam * np.abs(x_new).sum(axis=1)
        F_old = F_x[rows]
        accept = F_new >= F_old
        rel = (F_new - F_old) / np.maximum(np.abs(F_old), 1e-300)

        x_prev = x[rows].copy()
        acc = rows[accept]
        x[acc] = x_new[accept]
        F_x[acc] = F_new[accept]
        t_old = t[acc]
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_old * t_old))
        y[acc] = x[acc] + ((t_old - 1.0) / t_new)[:, None] * (x[acc] - x_prev[accept])
        t[acc] = t_new
        done = acc[rel[accept] < rel_tol]

        rej = rows[~accept]
        # a rejected step taken from y == x is rounding noise at the optimum
        stalled = rej[np.all(y[rej] == x[rej], axis=1)]
        y[rej] = x[rej]
        t[rej] = 1.0
        active[done] = False
        active[stalled] = False
    return x


def m_step_eta(
    resp: np.ndarray,
    ds: Dataset,
    feature: str,
    lam: float,
    mu: np.ndarray,
    warm_start: np.ndarray | None = None,
    solver: EtaSolverConfig = EtaSolverConfig(),
) -> np.ndarray:
    C = np.asarray((ds.counts[feature].T @ resp).T)  # (k, m) expected counts per topic
    return solve_eta(C, mu, lam, warm_start, solver.max_inner_iters, solver.inner_rel_tol)


def _global_covariance(locations: np.ndarray) -> np.ndarray:
    if len(locations) < 2:
        return np.eye(2) * 1e-4
    return regularize_covariance(np.cov(locations.T, bias=True).reshape(2, 2))


def _initial_centers(ds: Dataset, cfg: TrainingConfig) -> np.ndarray:
    if cfg.init_scheme == "random":
        rng = np.random.default_rng(cfg.seed)
        return ds.locations[rng.choice(ds.M, size=cfg.k, replace=False)].copy()
    centers, _ = kmeans_plusplus(ds.locations, cfg.k, random_state=cfg.seed)
    return np.asarray(centers, dtype=float)


def _normalize_log_probs(mu: np.ndarray) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    return mu - logsumexp(mu)


def run_em(
    ds: Dataset,
    cfg: TrainingConfig,
    *,
    mu: Mapping[str, np.ndarray] | None = None,
    fixed_gaussians: tuple[np.ndarray, np.ndarray] | None = None,
    shared_location: LocationMixture | None = None,
    init: ModelInstance | None = None,
) -> tuple[ModelInstance, list[IterationRecord]]:
    """Fit a model by EM; returns the final model and the per-iteration trace.

    ``mu`` overrides the global log-probabilities (normalized on entry).
    ``fixed_gaussians`` freezes topic centers and covariances; with
    ``shared_location`` every topic uses that fixed location mixture instead.
    Only theta and eta are then re-estimated. ``init`` warm-starts theta and
    eta, which breaks the topic symmetry a shared location would leave.
    """
    k = cfg.k
    if ds.M < k:
        raise GeotopicsError(f"need at least k={k} venues, got {ds.M}")
    features = ds.features
    if mu is None:
        mu = {f: compute_global_log_probs(ds, f, cfg.smoothing) for f in features}
    else:
        mu = {f: _normalize_log_probs(mu[f]) for f in features}

    glob_cov = _global_covariance(ds.locations)
    init_cov = regularize_covariance(glob_cov / k)
    if fixed_gaussians is not None:
        centers = np.asarray(fixed_gaussians[0], dtype=float).reshape(k, 2)
        covs = np.asarray(fixed_gaussians[1], dtype=float).reshape(k, 2, 2)
    else:
        centers = _initial_centers(ds, cfg)
        covs = np.repeat(init_cov[None], k, axis=0)
    free_gaussians = fixed_gaussians is None and shared_location is None

    metadata = {
        "k": k,
        "lambda": cfg.lam,
        "seed": cfg.seed,
        "init_scheme": cfg.init_scheme,
        "train_venues": ds.M,
        "user_groups": ds.metadata.get("user_groups"),
        "user_grouping_scope": "full dataset before split" if ds.metadata.get("user_groups") else None,
    }
    if cfg.clamp_eta:
        metadata["clamp_eta"] = sorted(cfg.clamp_eta)
    if fixed_gaussians is not None:
        metadata["fixed_gaussians"] = True

    if init is not None:
        if init.k != k:
            raise GeotopicsError(f"init model has k={init.k}, expected {k}")
        theta0 = np.array(init.theta)
        eta0 = {f: np.zeros((k, ds.domains.size(f))) if f in cfg.clamp_eta else np.array(init.eta[f]) for f in features}
    else:
        theta0 = np.full(k, 1.0 / k)
        eta0 = {f: np.zeros((k, ds.domains.size(f))) for f in features}
    model = ModelInstance(
        theta=theta0,
        centers=centers,
        covariances=covs,
        mu=mu,
        eta=eta0,
        domains=ds.domains,
        lam=cfg.lam,
        shared_location=shared_location,
        metadata=metadata,
    )

    def score(mdl):
        lj = log_joint(mdl, ds)
        ll = logsumexp(lj, axis=1)
        total = float(np.sum(ll))
        l1, jeff = penalty_terms(mdl)
        return lj, ll, total, total + l1 + jeff

    lj, ll, total, obj = score(model)
    trace = [IterationRecord(0, obj, total)]
    for it in range(1, cfg.max_em_iters + 1):
        resp = np.exp(lj - ll[:, None])
        theta, new_centers, new_covs, empty = m_step_mixture(resp, ds)
        reinit = []
        if not free_gaussians:
            new_centers, new_covs = model.centers, model.covariances
        elif empty.any():
            # restart each empty topic at the worst-explained venue
            order = np.argsort(ll, kind="stable")
            for n, z in enumerate(np.flatnonzero(empty)):
                new_centers[z] = ds.locations[order[n]]
                new_covs[z] = init_cov
                reinit.append(int(z))
            theta = np.where(empty, 1.0 / ds.M, theta)
            theta = theta / theta.sum()
        eta = {}
        for f in features:
            if f in cfg.clamp_eta:
                eta[f] = np.zeros_like(model.eta[f])
                continue
            warm = model.eta[f].copy()
            warm[empty] = 0.0
            eta[f] = m_step_eta(resp, ds, f, cfg.lam, mu[f], warm, cfg.eta_solver)
        model = model.replace(theta=theta, centers=new_centers, covariances=new_covs, eta=eta)
        prev = obj
        lj, ll, total, obj = score(model)
        trace.append(IterationRecord(it, obj, total, reinit))
        if reinit:
            log.info("iteration %d: reinitialized empty topics %s", it, reinit)
            continue
        rel = (obj - prev) / max(abs(prev), 1e-300)
        if rel < cfg.em_rel_tol:
            break
    model.metadata["iterations"] = len(trace) - 1
    model.metadata["converged"] = len(trace) - 1 < cfg.max_em_iters
    return model, trace


@dataclass
class GridSearchReport:
    entries: list[dict]
    selected: dict
    train_size: int
    test_size: int
    seed: int

    def to_json(self) -> dict:
        return asdict(self)


def grid_search(
    ds: Dataset,
    ks: Sequence[int] = DEFAULT_KS,
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    cfg: TrainingConfig = TrainingConfig(),
) -> tuple[ModelInstance, GridSearchReport]:
    """Train one model per (k, lambda) on an 80/20 split and keep the best on test data.

    Ties in test mean log-likelihood go to the smaller k, then the smaller lambda.
    """
    if not ks or not lambdas:
        raise ValueError("grids must be non-empty")
    train, test = split_train_test(ds, cfg.train_fraction, cfg.seed)
    entries = []
    best_key, best_model, best_entry = None, None, None
    for k in ks:
        for lam in lambdas:
            run_cfg = replace(cfg, k=int(k), lam=float(lam))
            model, trace = run_em(train, run_cfg)
            _, train_mean = dataset_log_likelihood(model, train)
            _, test_mean = dataset_log_likelihood(model, test)
            entry = {
                "k": int(k),
                "lambda": float(lam),
                "train_mean_log_likelihood": train_mean,
                "test_mean_log_likelihood": test_mean,
                "iterations": len(trace) - 1,
            }
            entries.append(entry)
            log.info("grid k=%d lambda=%g: train %.4f test %.4f", k, lam, train_mean, test_mean)
            key = (-test_mean, int(k), float(lam))
            if best_key is None or key < best_key:
                best_key, best_model, best_entry = key, model, entry
    selected = {"k": best_entry["k"], "lambda": best_entry["lambda"]}
    best_model.metadata["split_seed"] = cfg.seed
    best_model.metadata["train_fraction"] = cfg.train_fraction
    return best_model, GridSearchReport(entries, selected, train.M, test.M, cfg.seed)

