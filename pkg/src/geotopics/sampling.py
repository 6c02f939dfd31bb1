"""Draw synthetic venues (and their check-ins) from a model instance."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Mapping, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .data import DAY_OF_WEEK, TIME_OF_DAY, CheckinRecord, Dataset, FeatureDomains
from .model import ModelInstance


@dataclass(frozen=True)
class Geometric:
    """Per-venue count drawn from a geometric law on {1, 2, ...} with the given mean."""

    mean: float

    def __post_init__(self):
        if self.mean < 1:
            raise ValueError("geometric mean must be >= 1")

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.geometric(1.0 / self.mean, size=size)

    def describe(self) -> dict:
        return {"rule": "geometric", "mean": self.mean}


CountRule = Union[int, Geometric]


def _draw_counts(rule: CountRule, rng: np.random.Generator, size: int) -> np.ndarray:
    if isinstance(rule, Geometric):
        return rule.draw(rng, size)
    if int(rule) < 0:
        raise ValueError("fixed count must be non-negative")
    return np.full(size, int(rule), dtype=int)


def _describe(rule: CountRule) -> dict:
    return rule.describe() if isinstance(rule, Geometric) else {"rule": "fixed", "n": int(rule)}


@dataclass
class Draws:
    topics: np.ndarray
    locations: np.ndarray
    # flat item indices per feature; venue i owns items[f][offsets[f][i]:offsets[f][i+1]]
    items: dict[str, np.ndarray]
    offsets: dict[str, np.ndarray]


def draw_venues(
    model: ModelInstance,
    M: int,
    checkins: CountRule = Geometric(10.0),
    per_feature: Mapping[str, CountRule] | None = None,
    seed: int = 0,
) -> Draws:
    """Run the generative process ``M`` times.

    ``checkins`` gives the number of items per venue shared by every feature
    except ``category`` (always one item); ``per_feature`` overrides it for
    individual features.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    per_feature = dict(per_feature or {})
    rng = np.random.default_rng(seed)
    k = model.k
    topics = rng.choice(k, size=M, p=model.theta)
    chol = np.linalg.cholesky(model.covariances)
    std = rng.standard_normal((M, 2))
    if model.shared_location is not None:
        sl = model.shared_location
        comp = rng.choice(len(sl.weights), size=M, p=np.asarray(sl.weights) / np.sum(sl.weights))
        sl_chol = np.linalg.cholesky(sl.covariances)
        locations = sl.centers[comp] + np.einsum("nij,nj->ni", sl_chol[comp], std)
    else:
        locations = model.centers[topics] + np.einsum("nij,nj->ni", chol[topics], std)
    shared_n = _draw_counts(checkins, rng, M)

    items, offsets = {}, {}
    members = [np.flatnonzero(topics == z) for z in range(k)]
    for f in model.features:
        if f == "category":
            n = np.ones(M, dtype=int)
        elif f in per_feature:
            n = _draw_counts(per_feature[f], rng, M)
        else:
            n = shared_n
        off = np.zeros(M + 1, dtype=int)
        np.cumsum(n, out=off[1:])
        flat = np.empty(off[-1], dtype=int)
        beta = model.beta(f)
        for z in range(k):
            idx = members[z]
            total = int(n[idx].sum())
            if total == 0:
                continue
            drawn = rng.choice(beta.shape[1], size=total, p=beta[z])
            pos = 0
            for i in idx:
                flat[off[i]:off[i + 1]] = drawn[pos:pos + n[i]]
                pos += n[i]
        items[f], offsets[f] = flat, off
    return Draws(topics, locations, items, offsets)


def _dataset_from_draws(model: ModelInstance, draws: Draws, meta: dict) -> Dataset:
    M = len(draws.topics)
    counts = {}
    for f in model.features:
        off = draws.offsets[f]
        rows = np.repeat(np.arange(M), np.diff(off))
        counts[f] = sp.coo_matrix(
            (np.ones(len(rows)), (rows, draws.items[f])), shape=(M, model.domains.size(f))
        ).tocsr()
    ref = next((f for f in ("time_of_day", "users", "day_of_week") if f in draws.offsets), None)
    checkins = np.diff(draws.offsets[ref]) if ref else np.zeros(M, dtype=int)
    return Dataset(
        venue_ids=tuple(f"v{i:06d}" for i in range(M)),
        locations=draws.locations,
        counts=counts,
        domains=model.domains,
        checkins=checkins,
        metadata=meta,
    )


def sample_with_topics(
    model: ModelInstance,
    M: int,
    checkins: CountRule = Geometric(10.0),
    per_feature: Mapping[str, CountRule] | None = None,
    seed: int = 0,
) -> tuple[Dataset, np.ndarray]:
    draws = draw_venues(model, M, checkins, per_feature, seed)
    meta = {
        "sampler": {
            "seed": seed,
            "venues": M,
            "checkins": _describe(checkins),
            "per_feature": {f: _describe(r) for f, r in sorted((per_feature or {}).items())},
        }
    }
    return _dataset_from_draws(model, draws, meta), draws.topics


def sample_dataset(
    model: ModelInstance,
    M: int,
    checkins: CountRule = Geometric(10.0),
    per_feature: Mapping[str, CountRule] | None = None,
    seed: int = 0,
) -> Dataset:
    return sample_with_topics(model, M, checkins, per_feature, seed)[0]


# Monday; bins are placed inside one reference week
_WEEK_START = datetime(2012, 4, 2, tzinfo=timezone.utc)
_BIN_START_HOUR = (6, 10, 14, 18, 22, 2)
# night is kept before midnight so the weekday survives re-binning
_BIN_MINUTES = (240, 240, 240, 240, 120, 240)


def sample_checkins(
    model: ModelInstance,
    M: int,
    checkins: CountRule = Geometric(10.0),
    seed: int = 0,
) -> list[CheckinRecord]:
    """Synthetic check-in records in the ingest format.

    Each check-in pairs the t-th drawn user, time-of-day and day-of-week value
    of its venue; timestamps are placed in a reference week at UTC offset 0.
    """
    needed = {"category", "users", "time_of_day", "day_of_week"}
    if not needed <= set(model.features):
        raise ValueError(f"model must carry features {sorted(needed)}")
    draws = draw_venues(model, M, checkins, None, seed)
    rng = np.random.default_rng([seed, 1])
    labels = model.domains.labels
    records = []
    for i in range(M):
        x, y = draws.locations[i]
        cat = labels["category"][draws.items["category"][i]]
        lo, hi = draws.offsets["users"][i], draws.offsets["users"][i + 1]
        for t in range(hi - lo):
            user = labels["users"][draws.items["users"][lo + t]]
            tod = int(draws.items["time_of_day"][lo + t])
            dow = int(draws.items["day_of_week"][lo + t])
            minute = int(rng.integers(_BIN_MINUTES[tod]))
            ts = _WEEK_START + timedelta(days=dow, hours=_BIN_START_HOUR[tod], minutes=minute)
            records.append(
                CheckinRecord(
                    user_id=user,
                    venue_id=f"v{i:06d}",
                    latitude=float(y),
                    longitude=float(x),
                    category=cat,
                    timestamp=ts,
                    utc_offset_minutes=0,
                )
            )
    return records


DEFAULT_DIMS = {"category": 20, "users": 30, "time_of_day": 6, "day_of_week": 7}


def make_synthetic_model(
    centers,
    covariances=None,
    theta=None,
    dims: Mapping[str, int] | None = None,
    varying: Sequence[str] | None = None,
    n_deviations: int = 3,
    deviation: float = 2.0,
    lam: float = 1.0,
    seed: int = 0,
) -> ModelInstance:
    """A ground-truth model with sparse deviations for synthetic experiments.

    Each topic gets ``n_deviations`` entries of +``deviation`` in eta for every
    feature listed in ``varying`` (default: all); other features share the
    global distribution across topics.
    """
    rng = np.random.default_rng(seed)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    k = len(centers)
    if covariances is None:
        covariances = np.repeat((0.01 * np.eye(2))[None], k, axis=0)
    covariances = np.asarray(covariances, dtype=float)
    if covariances.ndim == 2:
        covariances = np.repeat(covariances[None], k, axis=0)
    theta = np.full(k, 1.0 / k) if theta is None else np.asarray(theta, dtype=float)
    dims = dict(DEFAULT_DIMS if dims is None else dims)
    varying = set(dims if varying is None else varying)
    labels = {}
    for f, m in dims.items():
        if f == "time_of_day":
            labels[f] = TIME_OF_DAY
        elif f == "day_of_week":
            labels[f] = DAY_OF_WEEK
        elif f == "users":
            labels[f] = tuple(f"u{j:04d}" for j in range(m))
        else:
            labels[f] = tuple(f"{f}{j:03d}" for j in range(m))
    mu, eta = {}, {}
    for f, m in dims.items():
        p = rng.dirichlet(np.full(m, 5.0))
        mu[f] = np.log(p)
        e = np.zeros((k, m))
        if f in varying:
            for z in range(k):
                idx = rng.choice(m, size=min(n_deviations, m), replace=False)
                e[z, idx] = deviation
        eta[f] = e
    return ModelInstance(
        theta=theta,
        centers=centers,
        covariances=covariances,
        mu=mu,
        eta=eta,
        domains=FeatureDomains(labels),
        lam=lam,
        metadata={"synthetic_seed": seed},
    )
