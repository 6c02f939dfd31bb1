"""Cross-city region similarity and the best-first region search.

Both similarity integrals factor over the two cities once the inner product
over feature values is pulled out::

    condsim = sum_x (sum_l1 w1(l1) gamma1(x|l1)) * (sum_l2 w2(l2) gamma2(x|l2))
    jointsim = sum_x (sum_l1 a1 N1(l1) psi1(x,l1)) * (sum_l2 a2 N2(l2) psi2(x,l2))

so every region reduces to one vector over the shared feature values and a
pair score is a dot product. The grid sums are the same double sums over the
two lattices, evaluated without materializing the (n1 * n2) cell pairs.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import RegionOutsideGridError
from .model import ModelInstance, Region, regularize_covariance
from .query import GridSpec, default_grid, location_density, topic_posteriors

MEASURES = ("condsim", "jointsim")
MIN_GRID_MASS = 0.5


@dataclass
class WeightedRegionSet:
    regions: list[Region]
    provenance: str = "model"

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    def __getitem__(self, i) -> Region:
        return self.regions[i]

    def to_json(self) -> dict:
        return {"provenance": self.provenance, "regions": [r.to_json() for r in self.regions]}


def gaussian_moment_merge(a: Region, b: Region) -> Region:
    """Single Gaussian matching the first two moments of the mixture ``[a, b]``."""
    w = a.weight + b.weight
    pa, pb = a.weight / w, b.weight / w
    mean = pa * a.center + pb * b.center
    da, db = a.center - mean, b.center - mean
    cov = pa * (a.covariance + np.outer(da, da)) + pb * (b.covariance + np.outer(db, db))
    return Region(mean, regularize_covariance(cov), w)


def model_base_regions(model: ModelInstance) -> WeightedRegionSet:
    regions = [Region(model.centers[z], model.covariances[z], float(model.theta[z])) for z in range(model.k)]
    return WeightedRegionSet(regions, "model")


def grid_region_sigma(model: ModelInstance, a: float) -> float:
    """Isotropic sigma whose 1-sigma disc is 1/a of the median topic 1-sigma ellipse."""
    if not a > 0:
        raise ValueError("a must be positive")
    sqrt_det = np.sqrt(np.linalg.det(model.covariances))
    return float(np.sqrt(np.median(sqrt_det) / a))


def grid_base_regions(
    model: ModelInstance, a: float, grid: GridSpec | None = None, max_regions: int = 20000
) -> WeightedRegionSet:
    """Isotropic Gaussians at spacing 2 sigma tiling the grid box, equal weights.

    The tiling is centered and stays at least sigma inside the box, so every
    base region keeps most of its mass on a grid over the same box.
    """
    sigma = grid_region_sigma(model, a)
    box = grid or default_grid(model)
    axes = []
    for lo, hi in ((box.xmin, box.xmax), (box.ymin, box.ymax)):
        n = max(1, int(np.floor((hi - lo) / (2 * sigma))))
        offset = (hi - lo - n * 2 * sigma) / 2
        axes.append(lo + offset + sigma + 2 * sigma * np.arange(n))
    count = len(axes[0]) * len(axes[1])
    if count > max_regions:
        raise ValueError(f"grid-{a} would create {count} regions (limit {max_regions})")
    cov = sigma * sigma * np.eye(2)
    regions = [Region(np.array([x, y]), cov, 1.0 / count) for x in axes[0] for y in axes[1]]
    return WeightedRegionSet(regions, f"grid-{a:g}")


def joint_feature_location(model: ModelInstance, feature: str, x: int, l) -> np.ndarray:
    """psi(x, l) = sum_z theta_z N_z(l) beta_z(x), for one value index and one or more locations."""
    pts = np.atleast_2d(np.asarray(l, dtype=float))
    with np.errstate(divide="ignore"):
        lw = model.location_log_densities(pts) + np.log(model.theta)[None, :]
    out = np.exp(lw) @ model.beta(feature)[:, x]
    return out if np.ndim(l) > 1 else out[0]


@dataclass
class _Side:
    model: ModelInstance
    grid: GridSpec
    points: np.ndarray
    gamma: np.ndarray  # (n, m_shared) conditional distributions
    psi: np.ndarray  # (n, m_shared) joint densities


class SimilarityContext:
    """Two models, one feature and per-city grids with cached per-cell quantities.

    Feature values are matched across the models by label; values present in
    only one model can never agree and are dropped from the inner products.
    """

    def __init__(
        self,
        model_a: ModelInstance,
        model_b: ModelInstance,
        feature: str,
        grid_a: GridSpec | None = None,
        grid_b: GridSpec | None = None,
    ):
        self.feature = feature
        labels_a = model_a.domains.labels[feature]
        index_b = model_b.domains.index(feature)
        shared = [lab for lab in labels_a if lab in index_b]
        idx_a = np.array([model_a.domains.index(feature)[lab] for lab in shared], dtype=int)
        idx_b = np.array([index_b[lab] for lab in shared], dtype=int)
        self.shared_values = tuple(shared)
        self.sides = (
            self._build(model_a, grid_a, idx_a),
            self._build(model_b, grid_b, idx_b),
        )

    def _build(self, model: ModelInstance, grid: GridSpec | None, idx: np.ndarray) -> _Side:
        grid = grid or default_grid(model)
        pts = grid.points()
        beta = model.beta(self.feature)[:, idx]
        dens = location_density(model, pts)
        post = np.zeros((len(pts), model.k))
        ok = dens > 0
        if ok.any():
            post[ok] = topic_posteriors(model, pts[ok])
        gamma = post @ beta
        return _Side(model, grid, pts, gamma, gamma * dens[:, None])

    @property
    def models(self) -> tuple[ModelInstance, ModelInstance]:
        return self.sides[0].model, self.sides[1].model

    def grid_weights(self, side: int, region: Region) -> np.ndarray:
        """Region density times cell area at every cell; raises if under half the mass is on the grid."""
        s = self.sides[side]
        w = region.density(s.points) * s.grid.cell_area
        mass = float(w.sum())
        if mass < MIN_GRID_MASS:
            raise RegionOutsideGridError(f"only {mass:.3f} of the region's mass lies on the grid")
        return w

    def project(self, side: int, region: Region, measure: str) -> np.ndarray:
        w = self.grid_weights(side, region)
        s = self.sides[side]
        if measure == "condsim":
            return (w / w.sum()) @ s.gamma
        if measure == "jointsim":
            return w @ s.psi
        raise ValueError(f"unknown measure {measure!r}")


def condsim(g1: Region, g2: Region, ctx: SimilarityContext) -> float:
    """Probability that the two region-conditional draws share the feature value."""
    return float(ctx.project(0, g1, "condsim") @ ctx.project(1, g2, "condsim"))


def jointsim(g1: Region, g2: Region, ctx: SimilarityContext) -> float:
    """Expected product of region densities at model-drawn venues that share the value."""
    return float(ctx.project(0, g1, "jointsim") @ ctx.project(1, g2, "jointsim"))


@dataclass
class Match:
    region_a: Region | None
    region_b: Region | None
    score: float
    members_a: tuple[int, ...] = ()
    members_b: tuple[int, ...] = ()
    measure: str = "jointsim"
    trace: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "measure": self.measure,
            "score": self.score,
            "region_a": self.region_a.to_json() if self.region_a is not None else None,
            "region_b": self.region_b.to_json() if self.region_b is not None else None,
            "members_a": list(self.members_a),
            "members_b": list(self.members_b),
            "trace": self.trace,
        }


def all_pairs_condsim(
    ctx: SimilarityContext, bases_a: Sequence[Region], bases_b: Sequence[Region], measure: str = "condsim"
) -> Match:
    """Exact maximization over the Cartesian product; ties go to the lowest (i, j)."""
    if not len(bases_a) or not len(bases_b):
        raise ValueError("candidate sets must be non-empty")
    pa = np.array([ctx.project(0, r, measure) for r in bases_a])
    pb = np.array([ctx.project(1, r, measure) for r in bases_b])
    scores = pa @ pb.T
    i, j = np.unravel_index(int(np.argmax(scores)), scores.shape)
    return Match(bases_a[i], bases_b[j], float(scores[i, j]), (int(i),), (int(j),), measure)


def geo_explore(
    ctx: SimilarityContext,
    bases_a: Sequence[Region],
    bases_b: Sequence[Region],
    R: int = 5,
    measure: str | Callable[[Region, Region], float] = "jointsim",
) -> Match:
    """Best-first search over base regions and their moment-matched merges.

    Phase 1 scores every base pair. Phase 2 runs ``R`` Retrieve-Update-Expand
    loops: pop the best pair from a max-heap, then push every pair from the
    cross product of both sides' expansions except the popped pair itself. A
    region expands into itself plus its merge with each base region it does
    not already contain. Pairs already scored are not pushed again, and pairs
    with a region mostly off its city's grid are skipped.

    The best pair is tracked over every scored candidate, so the result is
    never below the best base pair, even for ``R = 0``.
    """
    if not len(bases_a) or not len(bases_b):
        raise ValueError("base region sets must be non-empty")
    bases = (list(bases_a), list(bases_b))

    if callable(measure):
        score_fn, label = measure, getattr(measure, "__name__", "custom")
        project = None
    else:
        label = measure
        cache: dict[tuple[int, frozenset], np.ndarray] = {}

        def project(side: int, region: Region, members: frozenset) -> np.ndarray:
            key = (side, members)
            if key not in cache:
                cache[key] = ctx.project(side, region, measure)
            return cache[key]

    def score(ca, cb) -> float:
        if project is None:
            return float(score_fn(ca[0], cb[0]))
        return float(project(0, ca[0], ca[1]) @ project(1, cb[0], cb[1]))

    def expand(side: int, cand):
        region, members = cand
        out = [cand]
        for j, base in enumerate(bases[side]):
            if j not in members:
                out.append((gaussian_moment_merge(region, base), members | {j}))
        return out

    heap: list = []
    counter = 0
    seen: set = set()
    skipped = 0
    best = (None, None, 0.0)

    def push(ca, cb):
        nonlocal counter, best, skipped
        key = (ca[1], cb[1])
        if key in seen:
            return
        seen.add(key)
        try:
            s = score(ca, cb)
        except RegionOutsideGridError:
            skipped += 1
            return
        heapq.heappush(heap, (-s, counter, ca, cb))
        counter += 1
        if s > best[2]:
            best = (ca, cb, s)

    # phase 1: expand(NULL) yields the base regions on each side
    cands_a = [(r, frozenset({i})) for i, r in enumerate(bases[0])]
    cands_b = [(r, frozenset({j})) for j, r in enumerate(bases[1])]
    for ca in cands_a:
        for cb in cands_b:
            push(ca, cb)

    trace = []
    for loop in range(1, R + 1):
        if not heap:
            break
        neg, _, ca, cb = heapq.heappop(heap)
        trace.append({"loop": loop, "members_a": sorted(ca[1]), "members_b": sorted(cb[1]), "score": -neg})
        for na in expand(0, ca):
            for nb in expand(1, cb):
                if na[1] == ca[1] and nb[1] == cb[1]:
                    continue
                push(na, nb)

    if skipped:
        trace.append({"skipped_off_grid": skipped})
    ca, cb, s = best
    if ca is None:
        return Match(None, None, 0.0, (), (), label, trace)
    return Match(ca[0], cb[0], s, tuple(sorted(ca[1])), tuple(sorted(cb[1])), label, trace)
