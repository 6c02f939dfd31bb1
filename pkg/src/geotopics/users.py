"""Collapse the ``users`` feature into super-users via truncated SVD."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import svds

from .data import Dataset, FeatureDomains

log = logging.getLogger(__name__)

DEFAULT_GROUPS = 100
# below this size a dense SVD is cheaper and exact
_DENSE_LIMIT = 2000


@dataclass(frozen=True)
class UserGrouping:
    d: int
    assignment: np.ndarray  # (n_users,) group index per user
    singular_vectors: np.ndarray  # (d, n_users)

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=int)
        object.__setattr__(self, "assignment", a)
        if self.d > len(a):
            raise ValueError("more groups than users")
        if a.size and (a.min() < 0 or a.max() >= self.d):
            raise ValueError("group index out of range")


def build_user_venue_matrix(ds: Dataset) -> sp.csr_matrix:
    """Users x venues check-in counts (the transpose of the users count block)."""
    if "users" not in ds.counts:
        raise ValueError("dataset has no users feature")
    return ds.counts["users"].T.tocsr()


def _sign_normalize(vectors: np.ndarray) -> np.ndarray:
    out = vectors.copy()
    for row in out:
        if not row.any():
            continue
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return out


def top_right_singular_vectors(m, d: int) -> np.ndarray:
    """Top-``d`` singular vectors over users of a users x venues matrix.

    Rows of the result are ordered by decreasing singular value and each is
    flipped so that its largest-magnitude entry is positive. Directions beyond
    the numerical rank are returned as zeros (with a warning).
    """
    n_users, n_venues = m.shape
    if not 1 <= d <= n_users:
        raise ValueError(f"d must lie in [1, {n_users}], got {d}")
    r = min(n_users, n_venues)
    if r <= _DENSE_LIMIT or d >= r - 1:
        dense = m.toarray() if sp.issparse(m) else np.asarray(m, dtype=float)
        u, s, _ = np.linalg.svd(dense, full_matrices=False)
    else:
        # ARPACK start vector fixed for reproducibility
        v0 = np.full(r, 1.0 / np.sqrt(r))
        u, s, _ = svds(sp.csr_matrix(m, dtype=float), k=d, v0=v0, tol=1e-10)
        order = np.argsort(-s, kind="stable")
        u, s = u[:, order], s[order]
    tol = (s[0] if s.size else 0.0) * max(m.shape) * np.finfo(float).eps
    rank = int(np.sum(s > tol))
    vectors = np.zeros((d, n_users))
    keep = min(d, rank, u.shape[1])
    vectors[:keep] = u[:, :keep].T
    if keep < d:
        warnings.warn(f"matrix rank {rank} < d={d}; {d - keep} singular vectors zero-filled", stacklevel=2)
    return _sign_normalize(vectors)


def assign_user_groups(vectors: np.ndarray) -> UserGrouping:
    """Send each user to the vector in which it has the largest entry (ties: lowest)."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    assignment = np.argmax(vectors, axis=0)
    return UserGrouping(d=vectors.shape[0], assignment=assignment, singular_vectors=vectors)


def apply_grouping(ds: Dataset, g: UserGrouping) -> Dataset:
    """Rewrite the users feature in terms of super-users ``"0" .. str(d-1)``."""
    n_users = ds.domains.size("users")
    if len(g.assignment) != n_users:
        raise ValueError(f"grouping covers {len(g.assignment)} users, dataset has {n_users}")
    proj = sp.csr_matrix(
        (np.ones(n_users), (np.arange(n_users), g.assignment)), shape=(n_users, g.d)
    )
    labels = dict(ds.domains.labels)
    labels["users"] = tuple(str(j) for j in range(g.d))
    counts = dict(ds.counts)
    counts["users"] = (ds.counts["users"] @ proj).tocsr()
    table = {u: int(gi) for u, gi in zip(ds.domains.labels["users"], g.assignment)}
    metadata = dict(ds.metadata)
    metadata["user_groups"] = g.d
    return Dataset(
        venue_ids=ds.venue_ids,
        locations=ds.locations,
        counts=counts,
        domains=FeatureDomains(labels),
        checkins=ds.checkins,
        user_groups=table,
        metadata=metadata,
    )


def reduce_users(ds: Dataset, d: int = DEFAULT_GROUPS) -> Dataset:
    """Group users into at most ``d`` super-users; ``d`` is capped at the user count."""
    n_users = ds.domains.size("users")
    d = min(d, n_users)
    if d < 1:
        return ds
    vectors = top_right_singular_vectors(build_user_venue_matrix(ds), d)
    return apply_grouping(ds, assign_user_groups(vectors))
