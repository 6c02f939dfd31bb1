"""Check-in ingestion: parsing, time binning, user filtering and venue aggregation.

A dataset is venue-centric: every venue is one data point carrying a location,
a single category and per-feature value-count vectors built from its check-ins.
Counts are stored as one sparse ``(M, m)`` matrix per categorical feature.
"""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DataFormatError

log = logging.getLogger(__name__)

FEATURES = ("category", "users", "time_of_day", "day_of_week")
TIME_OF_DAY = ("morning", "noon", "afternoon", "evening", "night", "late_night")
DAY_OF_WEEK = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")

DATASET_FORMAT = "geotopics-dataset"
DATASET_VERSION = 1

# hour of local day -> time-of-day bin; bins are half-open [from, to)
_HOUR_TO_BIN = np.empty(24, dtype=int)
_HOUR_TO_BIN[6:10] = 0
_HOUR_TO_BIN[10:14] = 1
_HOUR_TO_BIN[14:18] = 2
_HOUR_TO_BIN[18:22] = 3
_HOUR_TO_BIN[22:24] = 4
_HOUR_TO_BIN[0:2] = 4
_HOUR_TO_BIN[2:6] = 5

_COORD_TOL = 1e-6


@dataclass(frozen=True)
class CheckinRecord:
    user_id: str
    venue_id: str
    latitude: float
    longitude: float
    category: str
    timestamp: datetime
    utc_offset_minutes: int = 0

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude out of range: {self.longitude}")
        if not self.category:
            raise ValueError("empty category")
        if not self.user_id or not self.venue_id:
            raise ValueError("empty user or venue id")

    def to_json(self) -> dict:
        ts = self.timestamp.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        return {
            "user": self.user_id,
            "venue": self.venue_id,
            "lat": self.latitude,
            "lon": self.longitude,
            "category": self.category,
            "time": ts,
            "utc_offset_min": self.utc_offset_minutes,
        }


def _parse_time(text: str) -> datetime:
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        raise ValueError("timestamp lacks a UTC offset")
    return ts.astimezone(timezone.utc)


def _record_from_obj(obj: Mapping) -> CheckinRecord:
    if not isinstance(obj, Mapping):
        raise ValueError("not an object")
    lat, lon = obj["lat"], obj["lon"]
    if isinstance(lat, bool) or isinstance(lon, bool):
        raise ValueError("boolean coordinate")
    offset = obj.get("utc_offset_min", 0)
    if isinstance(offset, bool) or int(offset) != offset:
        raise ValueError("utc_offset_min must be an integer")
    return CheckinRecord(
        user_id=str(obj["user"]),
        venue_id=str(obj["venue"]),
        latitude=float(lat),
        longitude=float(lon),
        category=str(obj["category"]),
        timestamp=_parse_time(str(obj["time"])),
        utc_offset_minutes=int(offset),
    )


def parse_checkins(lines: Iterable[str]) -> tuple[list[CheckinRecord], int]:
    """Parse line-delimited JSON check-ins.

    Returns the well-formed records in input order and the number of malformed
    lines. Blank lines are ignored. Raises :class:`DataFormatError` when more
    than half of the non-blank lines are malformed, which usually means the
    wrong file was passed.
    """
    records: list[CheckinRecord] = []
    malformed = 0
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(_record_from_obj(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            malformed += 1
            log.debug("line %d malformed: %s", lineno, exc)
    total = len(records) + malformed
    if malformed:
        log.warning("%d of %d check-in lines malformed", malformed, total)
    if total and malformed * 2 > total:
        raise DataFormatError(f"{malformed} of {total} lines malformed; not a check-in file?")
    return records, malformed


def read_checkins(path: str | Path) -> tuple[list[CheckinRecord], int]:
    with open(path, encoding="utf-8") as fh:
        return parse_checkins(fh)


def write_checkins(records: Iterable[CheckinRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def bin_timestamp(timestamp: datetime, utc_offset_minutes: int = 0) -> tuple[int, int]:
    """Map a UTC instant to ``(day_of_week, time_of_day)`` indices in local time.

    Monday is 0. Check-ins between local midnight and 02:00 fall in ``night``
    of the calendar day on which they occur.
    """
    if timestamp.tzinfo is not None:
        timestamp = timestamp.astimezone(timezone.utc).replace(tzinfo=None)
    local = timestamp + timedelta(minutes=utc_offset_minutes)
    return local.weekday(), int(_HOUR_TO_BIN[local.hour])


def filter_low_activity_users(
    records: Sequence[CheckinRecord], min_distinct_venues: int = 5
) -> list[CheckinRecord]:
    """Drop every check-in of users seen at fewer than ``min_distinct_venues`` venues.

    Applied once; removing users can leave other users below the threshold and
    that is deliberately not iterated.
    """
    venues_by_user: dict[str, set[str]] = defaultdict(set)
    for rec in records:
        venues_by_user[rec.user_id].add(rec.venue_id)
    keep = {u for u, vs in venues_by_user.items() if len(vs) >= min_distinct_venues}
    return [rec for rec in records if rec.user_id in keep]


@dataclass(frozen=True)
class FeatureDomains:
    """Ordered value labels per categorical feature."""

    labels: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        object.__setattr__(self, "labels", {f: tuple(v) for f, v in self.labels.items()})
        if "time_of_day" in self.labels and len(self.labels["time_of_day"]) != 6:
            raise ValueError("time_of_day must have 6 values")
        if "day_of_week" in self.labels and len(self.labels["day_of_week"]) != 7:
            raise ValueError("day_of_week must have 7 values")

    @property
    def features(self) -> tuple[str, ...]:
        return tuple(self.labels)

    def size(self, feature: str) -> int:
        return len(self.labels[feature])

    def index(self, feature: str) -> dict[str, int]:
        return {label: j for j, label in enumerate(self.labels[feature])}

    def to_json(self) -> dict:
        return {f: list(v) for f, v in self.labels.items()}

    @classmethod
    def from_json(cls, obj: Mapping) -> "FeatureDomains":
        return cls({f: tuple(str(x) for x in v) for f, v in obj.items()})


@dataclass(frozen=True)
class Venue:
    venue_id: str
    location: tuple[float, float]
    category_index: int
    counts: Mapping[str, Mapping[int, int]]
    total_checkins: int


@dataclass
class Dataset:
    """Venues as arrays: ``locations`` is ``(M, 2)`` as (x=lon, y=lat)."""

    venue_ids: tuple[str, ...]
    locations: np.ndarray
    counts: dict[str, sp.csr_matrix]
    domains: FeatureDomains
    checkins: np.ndarray | None = None
    user_groups: dict[str, int] | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.venue_ids = tuple(self.venue_ids)
        M = len(self.venue_ids)
        self.locations = np.asarray(self.locations, dtype=float).reshape(M, 2)
        self.counts = {f: sp.csr_matrix(c, dtype=float) for f, c in self.counts.items()}
        for f, c in self.counts.items():
            if f not in self.domains.labels:
                raise ValueError(f"feature {f!r} has no domain")
            if c.shape != (M, self.domains.size(f)):
                raise ValueError(f"counts for {f!r} have shape {c.shape}, expected {(M, self.domains.size(f))}")
            if c.nnz and c.data.min() < 0:
                raise ValueError(f"negative counts for {f!r}")
        if self.checkins is None:
            ref = next((f for f in ("time_of_day", "users", "day_of_week") if f in self.counts), None)
            if ref is None:
                self.checkins = np.zeros(M, dtype=int)
            else:
                self.checkins = np.asarray(self.counts[ref].sum(axis=1)).ravel().astype(int)
        self.checkins = np.asarray(self.checkins, dtype=int)

    @property
    def M(self) -> int:
        return len(self.venue_ids)

    def __len__(self) -> int:
        return self.M

    @property
    def features(self) -> tuple[str, ...]:
        return tuple(f for f in self.domains.features if f in self.counts)

    def category_index(self) -> np.ndarray:
        c = self.counts["category"]
        return np.asarray(c.argmax(axis=1)).ravel()

    def venue(self, i: int) -> Venue:
        counts = {}
        for f, c in self.counts.items():
            row = c.getrow(i)
            counts[f] = {int(j): int(v) for j, v in zip(row.indices, row.data)}
        cat = next(iter(counts["category"]), -1) if "category" in counts else -1
        return Venue(
            venue_id=self.venue_ids[i],
            location=(float(self.locations[i, 0]), float(self.locations[i, 1])),
            category_index=cat,
            counts=counts,
            total_checkins=int(self.checkins[i]),
        )

    @property
    def venues(self) -> list[Venue]:
        return [self.venue(i) for i in range(self.M)]

    def subset(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(
            venue_ids=tuple(self.venue_ids[i] for i in idx),
            locations=self.locations[idx],
            counts={f: c[idx] for f, c in self.counts.items()},
            domains=self.domains,
            checkins=self.checkins[idx],
            user_groups=self.user_groups,
            metadata=dict(self.metadata),
        )

    def concat(self, other: "Dataset") -> "Dataset":
        if other.domains != self.domains:
            raise ValueError("datasets have different domains")
        return Dataset(
            venue_ids=self.venue_ids + other.venue_ids,
            locations=np.vstack([self.locations, other.locations]),
            counts={f: sp.vstack([c, other.counts[f]]).tocsr() for f, c in self.counts.items()},
            domains=self.domains,
            checkins=np.concatenate([self.checkins, other.checkins]),
            user_groups=self.user_groups,
            metadata=dict(self.metadata),
        )

    # serialization

    def to_json(self) -> dict:
        venues = []
        for i in range(self.M):
            entry = {
                "id": self.venue_ids[i],
                "x": float(self.locations[i, 0]),
                "y": float(self.locations[i, 1]),
                "checkins": int(self.checkins[i]),
                "counts": {},
            }
            for f, c in self.counts.items():
                lo, hi = c.indptr[i], c.indptr[i + 1]
                order = np.argsort(c.indices[lo:hi], kind="stable")
                entry["counts"][f] = [
                    [int(c.indices[lo + o]), int(c.data[lo + o])] for o in order
                ]
            venues.append(entry)
        return {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "domains": self.domains.to_json(),
            "user_groups": self.user_groups,
            "metadata": self.metadata,
            "venues": venues,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Dataset":
        if obj.get("format") != DATASET_FORMAT:
            raise DataFormatError("not a geotopics dataset file")
        if obj.get("version") != DATASET_VERSION:
            raise DataFormatError(f"unsupported dataset version {obj.get('version')!r}")
        try:
            domains = FeatureDomains.from_json(obj["domains"])
            venues = obj["venues"]
            M = len(venues)
            counts = {}
            for f in domains.features:
                rows, cols, vals = [], [], []
                for i, v in enumerate(venues):
                    for j, n in v["counts"].get(f, []):
                        rows.append(i)
                        cols.append(int(j))
                        vals.append(float(n))
                counts[f] = sp.csr_matrix(
                    (vals, (rows, cols)), shape=(M, domains.size(f))
                )
            return cls(
                venue_ids=tuple(str(v["id"]) for v in venues),
                locations=np.array([[v["x"], v["y"]] for v in venues], dtype=float).reshape(M, 2),
                counts=counts,
                domains=domains,
                checkins=np.array([v.get("checkins", 0) for v in venues], dtype=int),
                user_groups=obj.get("user_groups"),
                metadata=dict(obj.get("metadata") or {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"malformed dataset file: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: not JSON ({exc})") from exc
        return cls.from_json(obj)


def _resolve_location(recs: list[CheckinRecord]) -> tuple[float, float]:
    lon0, lat0 = recs[0].longitude, recs[0].latitude
    if all(abs(r.longitude - lon0) <= _COORD_TOL and abs(r.latitude - lat0) <= _COORD_TOL for r in recs):
        return lon0, lat0
    # ties on timestamp go to the later record in input order
    latest = max(range(len(recs)), key=lambda i: (recs[i].timestamp, i))
    return recs[latest].longitude, recs[latest].latitude


def _resolve_category(recs: list[CheckinRecord]) -> str:
    tally = Counter(r.category for r in recs)
    return min(tally, key=lambda c: (-tally[c], c))


def aggregate_venues(records: Sequence[CheckinRecord]) -> Dataset:
    """Group check-ins into venues and build per-feature count matrices."""
    by_venue: dict[str, list[CheckinRecord]] = defaultdict(list)
    for rec in records:
        by_venue[rec.venue_id].append(rec)
    venue_ids = sorted(by_venue)
    categories = {v: _resolve_category(by_venue[v]) for v in venue_ids}
    users = sorted({r.user_id for r in records})
    domains = FeatureDomains(
        {
            "category": tuple(sorted(set(categories.values()))),
            "users": tuple(users),
            "time_of_day": TIME_OF_DAY,
            "day_of_week": DAY_OF_WEEK,
        }
    )
    cat_idx = domains.index("category")
    user_idx = domains.index("users")

    M = len(venue_ids)
    locations = np.zeros((M, 2))
    triplets: dict[str, tuple[list, list]] = {f: ([], []) for f in FEATURES}
    checkins = np.zeros(M, dtype=int)
    for i, vid in enumerate(venue_ids):
        recs = by_venue[vid]
        locations[i] = _resolve_location(recs)
        checkins[i] = len(recs)
        triplets["category"][0].append(i)
        triplets["category"][1].append(cat_idx[categories[vid]])
        for rec in recs:
            dow, tod = bin_timestamp(rec.timestamp, rec.utc_offset_minutes)
            for f, j in (("users", user_idx[rec.user_id]), ("time_of_day", tod), ("day_of_week", dow)):
                triplets[f][0].append(i)
                triplets[f][1].append(j)

    counts = {}
    for f in FEATURES:
        rows, cols = triplets[f]
        # duplicate (row, col) pairs are summed on conversion
        counts[f] = sp.coo_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(M, domains.size(f))
        ).tocsr()
    return Dataset(venue_ids, locations, counts, domains, checkins=checkins)


def split_train_test(ds: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Random venue partition; train size is ``floor(train_fraction * M)``."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    if ds.M < 2:
        raise ValueError("need at least 2 venues to split")
    n_train = int(np.floor(train_fraction * ds.M))
    if n_train == 0 or n_train == ds.M:
        raise ValueError(f"split of {ds.M} venues at {train_fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(ds.M)
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))
