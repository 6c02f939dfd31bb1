"""Location-conditional feature queries and heatmap export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from .data import Dataset
from .errors import OutsideSupportError
from .model import ModelInstance


@dataclass(frozen=True)
class GridSpec:
    """Regular lattice of ``nx * ny`` cells; queries are evaluated at cell centers."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float
    nx: int = 100
    ny: int = 100

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs at least 2 cells per axis")
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError("grid box must have positive area")

    @property
    def dx(self) -> float:
        return (self.xmax - self.xmin) / self.nx

    @property
    def dy(self) -> float:
        return (self.ymax - self.ymin) / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def xs(self) -> np.ndarray:
        return self.xmin + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def ys(self) -> np.ndarray:
        return self.ymin + (np.arange(self.ny) + 0.5) * self.dy

    def points(self) -> np.ndarray:
        """Cell centers, x-major: index ``i * ny + j`` is ``(xs[i], ys[j])``."""
        gx, gy = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])

    def with_resolution(self, nx: int, ny: int) -> "GridSpec":
        return GridSpec(self.xmin, self.xmax, self.ymin, self.ymax, nx, ny)

    def to_json(self) -> dict:
        return {"xmin": self.xmin, "xmax": self.xmax, "ymin": self.ymin, "ymax": self.ymax, "nx": self.nx, "ny": self.ny}


def _padded(lo: np.ndarray, hi: np.ndarray, pad: float) -> tuple[np.ndarray, np.ndarray]:
    ext = hi - lo
    if np.any(ext <= 0):
        raise ValueError("degenerate extent: the grid box would have zero area")
    return lo - pad * ext, hi + pad * ext


def default_grid(source: ModelInstance | Dataset, n: int = 100, pad: float = 0.05) -> GridSpec:
    """City-covering grid.

    From a dataset: the 1st-99th percentile box of venue coordinates. From a
    model: the union of ``center +- 3 sigma`` boxes over topics. Either box is
    padded by ``pad`` of its extent on each side.
    """
    if isinstance(source, Dataset):
        if source.M == 0:
            raise ValueError("empty dataset")
        lo = np.percentile(source.locations, 1, axis=0)
        hi = np.percentile(source.locations, 99, axis=0)
    else:
        sd = np.sqrt(np.diagonal(source.covariances, axis1=1, axis2=2))
        lo = (source.centers - 3 * sd).min(axis=0)
        hi = (source.centers + 3 * sd).max(axis=0)
    lo, hi = _padded(lo, hi, pad)
    return GridSpec(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]), n, n)


def _log_topic_weights(model: ModelInstance, points: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return model.location_log_densities(points) + np.log(model.theta)[None, :]


def topic_posteriors(model: ModelInstance, points) -> np.ndarray:
    """p(topic = z | loc = l) for each point -> (n, k)."""
    lw = _log_topic_weights(model, np.atleast_2d(points))
    if np.any(np.isneginf(lw.max(axis=1))):
        raise OutsideSupportError("location outside model support: every topic density underflows")
    return softmax(lw, axis=1)


def location_density(model: ModelInstance, points) -> np.ndarray:
    """p(loc = l | I) = sum_z theta_z N_z(l)."""
    return np.exp(logsumexp(_log_topic_weights(model, np.atleast_2d(points)), axis=1))


def conditional_distributions(model: ModelInstance, feature: str, points) -> np.ndarray:
    """gamma(x | l) for many locations -> (n, m)."""
    return topic_posteriors(model, points) @ model.beta(feature)


def conditional_feature_distribution(model: ModelInstance, feature: str, l) -> np.ndarray:
    l = np.asarray(l, dtype=float).reshape(2)
    if not np.all(np.isfinite(l)):
        raise ValueError("location must be finite")
    return conditional_distributions(model, feature, l[None])[0]


def marginal_feature_distribution(model: ModelInstance, feature: str) -> np.ndarray:
    return model.theta @ model.beta(feature)


def most_likely_value(model: ModelInstance, feature: str, l) -> tuple[int, float]:
    gamma = conditional_feature_distribution(model, feature, l)
    j = int(np.argmax(gamma))  # first maximum: ties go to domain order
    return j, float(gamma[j])


def distinctiveness_ratio(model: ModelInstance, feature: str, l) -> np.ndarray:
    return conditional_feature_distribution(model, feature, l) / marginal_feature_distribution(model, feature)


def most_distinctive_value(model: ModelInstance, feature: str, l) -> tuple[int, float]:
    ratio = distinctiveness_ratio(model, feature, l)
    j = int(np.argmax(ratio))
    return j, float(ratio[j])


@dataclass
class HeatmapLayer:
    grid: GridSpec
    feature: str
    mode: str
    value_index: np.ndarray
    labels: list[str]
    scores: np.ndarray
    densities: np.ndarray

    def rows(self):
        pts = self.grid.points()
        for n in range(len(pts)):
            yield pts[n, 0], pts[n, 1], self.labels[n], self.scores[n], self.densities[n]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "value_label", "score", "density"])
            for x, y, label, score, dens in self.rows():
                w.writerow([repr(float(x)), repr(float(y)), label, repr(float(score)), repr(float(dens))])


def render_heatmap(model: ModelInstance, feature: str, grid: GridSpec, mode: str = "likely") -> HeatmapLayer:
    """Per-cell most likely (probability) or most distinctive (ratio) value."""
    if mode not in ("likely", "distinctive"):
        raise ValueError(f"mode must be 'likely' or 'distinctive', got {mode!r}")
    pts = grid.points()
    lw = _log_topic_weights(model, pts)
    dens = np.exp(logsumexp(lw, axis=1))
    # cells where every topic underflows carry no information; score them 0
    ok = ~np.isneginf(lw.max(axis=1))
    post = np.zeros_like(lw)
    post[ok] = softmax(lw[ok], axis=1)
    gamma = post @ model.beta(feature)
    if mode == "distinctive":
        gamma = gamma / marginal_feature_distribution(model, feature)[None, :]
    idx = np.argmax(gamma, axis=1)
    scores = gamma[np.arange(len(pts)), idx]
    labels = model.domains.labels[feature]
    return HeatmapLayer(
        grid=grid,
        feature=feature,
        mode=mode,
        value_index=idx,
        labels=[labels[j] for j in idx],
        scores=scores,
        densities=dens,
    )
