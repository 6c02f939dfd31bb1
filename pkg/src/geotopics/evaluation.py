"""Feature ablation, distinctness metrics and fixed-region comparison.

All logarithms are natural. Means over topics are unweighted.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import rel_entr

from .data import Dataset, split_train_test
from .errors import DataFormatError
from .model import LocationMixture, ModelInstance, Region, dataset_log_likelihood
from .similarity import WeightedRegionSet
from .trainer import TrainingConfig, run_em

LOCATION = "location"


def beta_entropy(beta) -> float:
    """H = -sum b ln b with 0 ln 0 = 0."""
    b = np.asarray(beta, dtype=float)
    return float(-np.sum(b * np.log(np.where(b > 0, b, 1.0))))


def mean_feature_entropy(model: ModelInstance, feature: str) -> float:
    return float(np.mean([beta_entropy(b) for b in model.beta(feature)]))


def kl(p, q) -> float:
    return float(np.sum(rel_entr(np.asarray(p, dtype=float), np.asarray(q, dtype=float))))


def jsd(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def mean_jsd_from_city(model: ModelInstance, feature: str) -> float:
    city = np.exp(model.mu[feature])
    return float(np.mean([jsd(b, city) for b in model.beta(feature)]))


def fit_enclosing_gaussian(points) -> Region:
    """Centroid plus the sample covariance rescaled so the farthest point sits on the 2-sigma ellipse."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("need at least 3 points in the plane")
    center = pts.mean(axis=0)
    cov = np.cov(pts, rowvar=False)
    eig = np.linalg.eigvalsh(cov)
    if eig[0] <= 1e-12 * max(eig[1], 1e-300):
        raise ValueError("points are collinear or coincident")
    d = pts - center
    maha = np.sqrt(np.einsum("ni,ij,nj->n", d, np.linalg.inv(cov), d))
    s = (maha.max() / 2.0) ** 2
    return Region(center, cov * s, 1.0)


def load_regions(path: str | Path) -> tuple[list[str], WeightedRegionSet]:
    """Read ``[{name, polygon: [[x, y], ...]}, ...]`` and fit an enclosing Gaussian to each."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        names = [str(r["name"]) for r in doc]
        regions = [fit_enclosing_gaussian(r["polygon"]) for r in doc]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"bad regions file {path}: {exc}") from exc
    if not regions:
        raise DataFormatError(f"regions file {path} is empty")
    return names, WeightedRegionSet(regions, "external")


@dataclass
class AblationResult:
    feature: str
    full_log_likelihood: float
    ablated_log_likelihood: float
    venues: int
    k: int
    lam: float
    seed: int
    train_size: int

    @property
    def drop(self) -> float:
        return self.full_log_likelihood - self.ablated_log_likelihood

    @property
    def drop_per_venue(self) -> float:
        return self.drop / self.venues

    def to_json(self) -> dict:
        d = asdict(self)
        d["drop"] = self.drop
        d["drop_per_venue"] = self.drop_per_venue
        return d


def _train_split(ds: Dataset, cfg: TrainingConfig) -> Dataset:
    return split_train_test(ds, cfg.train_fraction, cfg.seed)[0]


def train_full(ds: Dataset, cfg: TrainingConfig) -> ModelInstance:
    """The reference fit every ablation is compared against."""
    return run_em(_train_split(ds, cfg), cfg)[0]


def _result(feature, full, ablated, ds, cfg, train) -> AblationResult:
    return AblationResult(
        feature=feature,
        full_log_likelihood=dataset_log_likelihood(full, ds)[0],
        ablated_log_likelihood=dataset_log_likelihood(ablated, ds)[0],
        venues=ds.M,
        k=cfg.k,
        lam=cfg.lam,
        seed=cfg.seed,
        train_size=train.M,
    )


def ablate_categorical(
    ds: Dataset, cfg: TrainingConfig, feature: str, full: ModelInstance | None = None
) -> AblationResult:
    """Retrain with eta of ``feature`` held at 0; compare likelihood over all of ``ds``."""
    if feature not in ds.features:
        raise ValueError(f"unknown feature {feature!r}")
    train = _train_split(ds, cfg)
    full = full or run_em(train, cfg)[0]
    ablated = run_em(train, replace(cfg, clamp_eta=cfg.clamp_eta | {feature}))[0]
    return _result(feature, full, ablated, ds, cfg, train)


def shared_mixture(model: ModelInstance) -> LocationMixture:
    return LocationMixture(np.array(model.theta), np.array(model.centers), np.array(model.covariances))


def ablate_location(ds: Dataset, model: ModelInstance, cfg: TrainingConfig) -> AblationResult:
    """Retrain with every topic located by the frozen mixture of the full model's Gaussians."""
    train = _train_split(ds, cfg)
    # warm start from the full model: with one shared location density the
    # topics would otherwise stay identical from a zero-eta start
    ablated = run_em(train, cfg, shared_location=shared_mixture(model), init=model)[0]
    return _result(LOCATION, model, ablated, ds, cfg, train)


@dataclass
class ContributionReport:
    rows: list[AblationResult]
    per_seed: dict[str, list[float]] = field(default_factory=dict)

    def summary(self) -> dict[str, dict[str, float]]:
        """Five-number summary of per-venue drops across seeds, per feature."""
        out = {}
        for f, drops in sorted(self.per_seed.items()):
            q = np.percentile(drops, [0, 25, 50, 75, 100])
            out[f] = dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)))
        return out

    def to_json(self) -> dict:
        return {
            "ranking": [r.to_json() for r in self.rows],
            "per_seed_drop_per_venue": {f: list(v) for f, v in sorted(self.per_seed.items())},
            "summary": self.summary(),
        }


def _one_seed(ds: Dataset, cfg: TrainingConfig, workers: int) -> list[AblationResult]:
    full = train_full(ds, cfg)
    jobs = [lambda f=f: ablate_categorical(ds, cfg, f, full) for f in ds.features]
    jobs.append(lambda: ablate_location(ds, full, cfg))
    if workers <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: job(), jobs))


def feature_contributions(
    ds: Dataset, cfg: TrainingConfig, seeds: Sequence[int] | None = None, workers: int = 1
) -> ContributionReport:
    """All categorical ablations plus the location ablation, ranked by drop.

    The ranking comes from the first seed; every seed feeds the spread summary.
    """
    seeds = [cfg.seed] if seeds is None else list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    per_seed: dict[str, list[float]] = {}
    ranked = None
    for s in seeds:
        rows = _one_seed(ds, replace(cfg, seed=int(s)), workers)
        for r in rows:
            per_seed.setdefault(r.feature, []).append(r.drop_per_venue)
        if ranked is None:
            # stable sort keeps feature order on exact ties
            ranked = sorted(rows, key=lambda r: -r.drop)
    return ContributionReport(ranked, per_seed)


@dataclass
class MetricsReport:
    entropy: dict[str, float]
    jsd_from_city: dict[str, float]
    held_out_log_likelihood_per_venue: float
    venues: int
    k: int
    topic_averaging: str = "uniform"

    def to_json(self) -> dict:
        return asdict(self)


def compute_metrics(model: ModelInstance, ds: Dataset) -> MetricsReport:
    """Entropy and city JSD per feature plus mean log-likelihood of ``ds`` (held-out data)."""
    return MetricsReport(
        entropy={f: mean_feature_entropy(model, f) for f in model.features},
        jsd_from_city={f: mean_jsd_from_city(model, f) for f in model.features},
        held_out_log_likelihood_per_venue=dataset_log_likelihood(model, ds)[1],
        venues=ds.M,
        k=model.k,
    )


def compare_fixed_regions(
    ds: Dataset, regions: Sequence[Region] | WeightedRegionSet, cfg: TrainingConfig
) -> tuple[ModelInstance, MetricsReport]:
    """Train with topic Gaussians frozen to ``regions`` (theta and eta free) and report on the test split."""
    regions = list(regions)
    if not regions:
        raise ValueError("need at least one region")
    train, test = split_train_test(ds, cfg.train_fraction, cfg.seed)
    centers = np.array([r.center for r in regions])
    covs = np.array([r.covariance for r in regions])
    model = run_em(train, replace(cfg, k=len(regions)), fixed_gaussians=(centers, covs))[0]
    return model, compute_metrics(model, test)
