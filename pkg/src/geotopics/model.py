"""Generative model: topic Gaussians, sparse deviations from global feature
distributions, likelihoods and the versioned model file."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import logsumexp

from .data import Dataset, FeatureDomains, Venue
from .errors import ModelFormatError

COV_FLOOR = 1e-8
# SPD violations smaller than this are repaired, larger ones rejected
_SPD_SLACK = 1e-10
# log-det coefficient of the covariance prior; 2 is what the "+4" update maximizes
JEFFREYS_WEIGHT = 2.0

MODEL_FORMAT = "geotopics-model"
MODEL_VERSION = 1


def regularize_covariance(cov: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    """Symmetrize and lift every eigenvalue to at least ``floor``."""
    cov = np.asarray(cov, dtype=float)
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, v = np.linalg.eigh(sym)
    if np.all(w >= floor):
        return sym
    w = np.maximum(w, floor)
    return (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)


def check_covariance(cov: np.ndarray) -> np.ndarray:
    """Validate a 2x2 (or stacked) covariance; tiny SPD violations get the floor added."""
    cov = np.asarray(cov, dtype=float)
    if cov.shape[-2:] != (2, 2):
        raise ValueError(f"covariance must be 2x2, got shape {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise ValueError("covariance has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(cov))))
    if np.max(np.abs(cov - np.swapaxes(cov, -1, -2))) > 1e-9 * scale:
        raise ValueError("covariance is not symmetric")
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w = np.linalg.eigvalsh(cov)
    if np.any(w < -_SPD_SLACK):
        raise ValueError(f"covariance is not positive definite (eigenvalues {w})")
    # half-floor threshold so an already floored matrix is left untouched on reload
    bad = w.min(axis=-1) < 0.5 * COV_FLOOR
    if np.any(bad):
        cov = cov.copy()
        cov[bad] += COV_FLOOR * np.eye(2)
    return cov


def beta_from_deviation(mu: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Softmax of ``mu + eta`` along the last axis (rows of ``eta`` are topics)."""
    mu = np.asarray(mu, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if mu.shape[-1] != eta.shape[-1]:
        raise ValueError(f"length mismatch: mu {mu.shape[-1]} vs eta {eta.shape[-1]}")
    a = mu + eta
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def log_beta_from_deviation(mu: np.ndarray, eta: np.ndarray) -> np.ndarray:
    a = np.asarray(mu, dtype=float) + np.asarray(eta, dtype=float)
    return a - logsumexp(a, axis=-1, keepdims=True)


def gaussian_logpdf(points: np.ndarray, centers: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Bivariate normal log-density of ``points`` (n, 2) under each of k Gaussians -> (n, k)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    covs = np.asarray(covs, dtype=float).reshape(-1, 2, 2)
    a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    det = a * c - b * b
    if np.any(det <= 0) or np.any(a <= 0):
        raise ValueError("covariance is not positive definite")
    dx = points[:, None, 0] - centers[None, :, 0]
    dy = points[:, None, 1] - centers[None, :, 1]
    with np.errstate(over="ignore", invalid="ignore"):
        # far-off points overflow to inf, i.e. log-density -inf
        maha = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    return -np.log(2.0 * np.pi) - 0.5 * np.log(det) - 0.5 * maha


@dataclass(frozen=True)
class TopicParams:
    center: np.ndarray
    covariance: np.ndarray
    eta: Mapping[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class Region:
    """A weighted bivariate Gaussian used as a spatial region."""

    center: np.ndarray
    covariance: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(2))
        object.__setattr__(self, "covariance", check_covariance(self.covariance))
        if not self.weight > 0:
            raise ValueError(f"region weight must be positive, got {self.weight}")

    def log_density(self, points: np.ndarray) -> np.ndarray:
        return gaussian_logpdf(points, self.center[None], self.covariance[None])[:, 0]

    def density(self, points: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(points))

    def to_json(self) -> dict:
        return {
            "center": self.center.tolist(),
            "covariance": self.covariance.tolist(),
            "weight": float(self.weight),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Region":
        return cls(np.array(obj["center"]), np.array(obj["covariance"]), float(obj.get("weight", 1.0)))


def location_log_density(topic: TopicParams | Region, l) -> float:
    cov = check_covariance(topic.covariance)
    return float(gaussian_logpdf(np.asarray(l, dtype=float)[None], np.asarray(topic.center)[None], cov[None])[0, 0])


@dataclass(frozen=True)
class LocationMixture:
    """Fixed mixture shared by every topic (used by the location ablation)."""

    weights: np.ndarray
    centers: np.ndarray
    covariances: np.ndarray

    def log_density(self, points: np.ndarray) -> np.ndarray:
        lp = gaussian_logpdf(points, self.centers, self.covariances)
        with np.errstate(divide="ignore"):
            return logsumexp(lp + np.log(self.weights)[None, :], axis=1)


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelInstance:
    """Trained parameters for k topics over a fixed set of categorical features.

    ``eta[f]`` is ``(k, m_f)``; ``mu[f]`` is a normalized log-probability vector.
    """

    theta: np.ndarray
    centers: np.ndarray
    covariances: np.ndarray
    mu: Mapping[str, np.ndarray]
    eta: Mapping[str, np.ndarray]
    domains: FeatureDomains
    lam: float = 1.0
    shared_location: LocationMixture | None = None
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        theta = _frozen(self.theta)
        k = theta.shape[0]
        if k < 1:
            raise ValueError("model needs at least one topic")
        if np.any(theta < 0) or abs(theta.sum() - 1.0) > 1e-9:
            raise ValueError("theta must be a probability vector")
        centers = _frozen(np.reshape(self.centers, (k, 2)))
        covs = _frozen(check_covariance(np.reshape(self.covariances, (k, 2, 2))))
        mu, eta = {}, {}
        for f in self.domains.features:
            if f not in self.mu or f not in self.eta:
                raise ValueError(f"missing parameters for feature {f!r}")
            m = self.domains.size(f)
            mu_f = np.asarray(self.mu[f], dtype=float)
            eta_f = np.asarray(self.eta[f], dtype=float).reshape(k, m)
            if mu_f.shape != (m,) or not np.all(np.isfinite(mu_f)):
                raise ValueError(f"bad mu for {f!r}")
            if abs(np.exp(logsumexp(mu_f)) - 1.0) > 1e-9:
                raise ValueError(f"exp(mu) for {f!r} does not sum to 1")
            if not np.all(np.isfinite(eta_f)):
                raise ValueError(f"non-finite eta for {f!r}")
            mu[f], eta[f] = _frozen(mu_f), _frozen(eta_f)
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def k(self) -> int:
        return self.theta.shape[0]

    @property
    def features(self) -> tuple[str, ...]:
        return self.domains.features

    @property
    def topics(self) -> list[TopicParams]:
        return [
            TopicParams(self.centers[z], self.covariances[z], {f: self.eta[f][z] for f in self.features})
            for z in range(self.k)
        ]

    def beta(self, feature: str) -> np.ndarray:
        return beta_from_deviation(self.mu[feature], self.eta[feature])

    def log_beta(self, feature: str) -> np.ndarray:
        return log_beta_from_deviation(self.mu[feature], self.eta[feature])

    def location_log_densities(self, points: np.ndarray) -> np.ndarray:
        """log N_z(l) for every point and topic -> (n, k)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.shared_location is not None:
            lp = self.shared_location.log_density(points)
            return np.repeat(lp[:, None], self.k, axis=1)
        return gaussian_logpdf(points, self.centers, self.covariances)

    def replace(self, **changes) -> "ModelInstance":
        return replace(self, **changes)


def log_joint(model: ModelInstance, ds: Dataset) -> np.ndarray:
    """log theta_z + log N_z(loc_d) + sum_i n_d^(i) . log beta_z^(i), shape (M, k)."""
    with np.errstate(divide="ignore"):
        out = model.location_log_densities(ds.locations) + np.log(model.theta)[None, :]
    for f in model.features:
        if f not in ds.counts:
            raise ValueError(f"dataset lacks feature {f!r}")
        if ds.counts[f].shape[1] != model.domains.size(f):
            raise ValueError(f"feature {f!r}: dataset domain size differs from model")
        out = out + np.asarray(ds.counts[f] @ model.log_beta(f).T)
    return out


def venue_log_likelihood(model: ModelInstance, v: Venue) -> float:
    with np.errstate(divide="ignore"):
        terms = model.location_log_densities(np.asarray(v.location)[None])[0] + np.log(model.theta)
    for f in model.features:
        lb = model.log_beta(f)
        m = model.domains.size(f)
        for j, n in v.counts.get(f, {}).items():
            if not 0 <= j < m:
                raise ValueError(f"feature {f!r}: value index {j} outside domain of size {m}")
            terms = terms + n * lb[:, j]
    return float(logsumexp(terms))


def venue_log_likelihoods(model: ModelInstance, ds: Dataset) -> np.ndarray:
    return logsumexp(log_joint(model, ds), axis=1)


def dataset_log_likelihood(model: ModelInstance, ds: Dataset) -> tuple[float, float]:
    """Total and per-venue mean log-likelihood."""
    if ds.M == 0:
        raise ValueError("empty dataset")
    total = float(np.sum(venue_log_likelihoods(model, ds)))
    return total, total / ds.M


def penalty_terms(model: ModelInstance) -> tuple[float, float]:
    """(L1 deviation penalty, covariance prior) contributions, both <= 0 typically."""
    l1 = -model.lam * sum(float(np.abs(model.eta[f]).sum()) for f in model.features)
    if model.shared_location is not None:
        jeff = 0.0
    else:
        _, logdet = np.linalg.slogdet(model.covariances)
        jeff = -JEFFREYS_WEIGHT * float(np.sum(logdet))
    return l1, jeff


def penalized_objective(model: ModelInstance, ds: Dataset) -> float:
    total, _ = dataset_log_likelihood(model, ds)
    l1, jeff = penalty_terms(model)
    return total + l1 + jeff


# serialization


def model_to_json(model: ModelInstance) -> dict:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "k": model.k,
        "lambda": float(model.lam),
        "theta": model.theta.tolist(),
        "topics": [
            {
                "center": model.centers[z].tolist(),
                "covariance": model.covariances[z].tolist(),
                "eta": {f: model.eta[f][z].tolist() for f in model.features},
            }
            for z in range(model.k)
        ],
        "mu": {f: model.mu[f].tolist() for f in model.features},
        "domains": model.domains.to_json(),
        "shared_location": None,
        "metadata": dict(model.metadata),
    }
    if model.shared_location is not None:
        sl = model.shared_location
        doc["shared_location"] = {
            "weights": np.asarray(sl.weights).tolist(),
            "centers": np.asarray(sl.centers).tolist(),
            "covariances": np.asarray(sl.covariances).tolist(),
        }
    return doc


def model_from_json(doc: Mapping) -> ModelInstance:
    if not isinstance(doc, Mapping) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a geotopics model document")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version')!r} (expected {MODEL_VERSION})")
    try:
        domains = FeatureDomains.from_json(doc["domains"])
        topics = doc["topics"]
        k = int(doc["k"])
        if len(topics) != k or len(doc["theta"]) != k:
            raise ValueError("topic count does not match k")
        shared = None
        if doc.get("shared_location") is not None:
            s = doc["shared_location"]
            shared = LocationMixture(
                np.array(s["weights"], dtype=float),
                np.array(s["centers"], dtype=float).reshape(-1, 2),
                check_covariance(np.array(s["covariances"], dtype=float).reshape(-1, 2, 2)),
            )
        return ModelInstance(
            theta=np.array(doc["theta"], dtype=float),
            centers=np.array([t["center"] for t in topics], dtype=float),
            covariances=np.array([t["covariance"] for t in topics], dtype=float),
            mu={f: np.array(doc["mu"][f], dtype=float) for f in domains.features},
            eta={f: np.array([t["eta"][f] for t in topics], dtype=float) for f in domains.features},
            domains=domains,
            lam=float(doc["lambda"]),
            shared_location=shared,
            metadata=doc.get("metadata") or {},
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ModelFormatError(f"invalid model document: {exc}") from exc


def dumps_model(model: ModelInstance) -> str:
    return json.dumps(model_to_json(model), sort_keys=True, indent=1) + "\n"


def save_model(model: ModelInstance, path: str | Path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def load_model(path: str | Path) -> ModelInstance:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: truncated or invalid JSON ({exc})") from exc
    return model_from_json(doc)
