"""Independent reference computations used by the tests.

Each oracle re-derives a quantity from first principles with plain loops or
sampling, sharing no code path with the library implementation.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def gaussian_pdf(l, c, cov) -> float:
    """Bivariate normal density from the textbook formula."""
    (a, b), (_, d) = cov
    det = a * d - b * b
    dx, dy = l[0] - c[0], l[1] - c[1]
    q = (d * dx * dx - 2 * b * dx * dy + a * dy * dy) / det
    return math.exp(-0.5 * q) / (2 * math.pi * math.sqrt(det))


def softmax_loop(v) -> list[float]:
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def venue_log_likelihood_loop(model, ds, i) -> float:
    """log sum_z theta_z N_z(l) prod_f prod_j beta_zj^n_j by explicit loops."""
    l = ds.locations[i]
    terms = []
    for z in range(model.k):
        t = math.log(model.theta[z]) + math.log(gaussian_pdf(l, model.centers[z], model.covariances[z]))
        for f in ds.features:
            beta = softmax_loop(list(model.mu[f] + model.eta[f][z]))
            row = ds.counts[f].getrow(i)
            for j, n in zip(row.indices, row.data):
                t += n * math.log(beta[j])
        terms.append(t)
    m = max(terms)
    return m + math.log(sum(math.exp(t - m) for t in terms))


def eta_objective_loop(C, mu, eta, lam) -> float:
    """sum_j C_j log softmax(mu + eta)_j - lam * sum |eta| for one topic."""
    beta = softmax_loop([a + b for a, b in zip(mu, eta)])
    return sum(c * math.log(p) for c, p in zip(C, beta)) - lam * sum(abs(e) for e in eta)


def eta_lattice_max(C, mu, lam, lo=-3.0, hi=3.0, step=1e-3) -> float:
    """Maximum of the concave eta objective over the step-lattice in [lo, hi]^3.

    The full lattice has 6001^3 points; since the objective is concave, a
    coarse-to-fine search over nested sub-lattices (each aligned with the
    target lattice) reaches its maximum.
    """
    n_total = int(round((hi - lo) / step))
    C, mu = np.asarray(C, float), np.asarray(mu, float)

    def f(idx):
        eta = lo + step * np.asarray(idx, float)
        x = mu + eta
        lse = np.log(np.exp(x - x.max()).sum()) + x.max()
        return float(C @ (x - lse) - lam * np.abs(eta).sum())

    stride = 500
    axes = [np.arange(0, n_total + 1, stride)] * 3
    best = max(itertools.product(*axes), key=f)
    while stride > 1:
        new = max(1, stride // 5)
        axes = [np.arange(max(0, b - 2 * stride), min(n_total, b + 2 * stride) + 1, new) for b in best]
        best = max(itertools.product(*axes), key=f)
        stride = new
    # final polish: exhaustive 5^3 neighbourhood at unit stride
    for _ in range(50):
        nb = [np.arange(max(0, b - 2), min(n_total, b + 2) + 1) for b in best]
        cand = max(itertools.product(*nb), key=f)
        if cand == best:
            break
        best = cand
    return f(best)


def kl_loop(p, q) -> float:
    return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)


def jsd_two_term(p, q) -> float:
    m = [(a + b) / 2 for a, b in zip(p, q)]
    return 0.5 * kl_loop(p, m) + 0.5 * kl_loop(q, m)


def _draw_categorical(rng, probs):
    u = rng.random((len(probs), 1))
    return (np.cumsum(probs, axis=1) > u).argmax(axis=1)


def condsim_procedure(model_a, model_b, feature, ga, gb, n, rng) -> float:
    """Procedure P: sample a location from each region, then a value from each model at it.

    The two sides are independent, so every one of the n * n cross pairs is an
    unbiased draw of the agreement indicator; averaging over all of them uses
    the same n draws per side with far less variance than n fixed pairs.
    """
    from geotopics.query import conditional_distributions

    la = rng.multivariate_normal(ga.center, ga.covariance, n)
    lb = rng.multivariate_normal(gb.center, gb.covariance, n)
    xa = _draw_categorical(rng, conditional_distributions(model_a, feature, la))
    xb = _draw_categorical(rng, conditional_distributions(model_b, feature, lb))
    la_lab = np.array(model_a.domains.labels[feature], dtype=object)[xa]
    lb_lab = np.array(model_b.domains.labels[feature], dtype=object)[xb]
    return float(sum(np.mean(la_lab == v) * np.mean(lb_lab == v) for v in set(la_lab) & set(lb_lab)))


def _draw_venue_values(model, feature, n, rng):
    z = rng.choice(model.k, size=n, p=model.theta)
    chol = np.linalg.cholesky(model.covariances)
    loc = model.centers[z] + np.einsum("nij,nj->ni", chol[z], rng.standard_normal((n, 2)))
    x = _draw_categorical(rng, model.beta(feature)[z])
    return loc, np.array(model.domains.labels[feature], dtype=object)[x]


def jointsim_procedure(model_a, model_b, feature, ga, gb, n, rng) -> float:
    """Procedure R: sample a venue from each model and score N_a(l_a) N_b(l_b) 1[x_a = x_b].

    Averaged over all n * n cross pairs of the independent per-side draws.
    """
    la, xa = _draw_venue_values(model_a, feature, n, rng)
    lb, xb = _draw_venue_values(model_b, feature, n, rng)
    sa, sb = ga.density(la), gb.density(lb)
    return float(sum(np.mean(sa * (xa == v)) * np.mean(sb * (xb == v)) for v in set(xa) & set(xb)))


def merge_loop(a, b):
    """Moment-matched merge written out componentwise."""
    w = a.weight + b.weight
    mean = [(a.weight * a.center[i] + b.weight * b.center[i]) / w for i in range(2)]
    cov = [[0.0, 0.0], [0.0, 0.0]]
    for g in (a, b):
        for i in range(2):
            for j in range(2):
                cov[i][j] += g.weight / w * (g.covariance[i][j] + (g.center[i] - mean[i]) * (g.center[j] - mean[j]))
    return mean, cov, w


def best_two_merge_pair(score, bases_a, bases_b):
    """Exhaustive max of score over region pairs built from at most two bases per side."""
    from geotopics.similarity import gaussian_moment_merge

    def family(bases):
        out = list(bases)
        for i, j in itertools.combinations(range(len(bases)), 2):
            out.append(gaussian_moment_merge(bases[i], bases[j]))
        return out

    return max(score(a, b) for a in family(bases_a) for b in family(bases_b))
