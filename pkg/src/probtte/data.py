"""Trips, sub-trip augmentation and same-day mini-batches.

A trip is an ordered, deduplicated link sequence plus GPS checkpoints
``(prefix_len, elapsed_s)``: after ``prefix_len`` links the vehicle had
been travelling for ``elapsed_s`` seconds. Only checkpoint times are ever
used as regression targets.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from itertools import groupby
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import sparse

from ._rng import substream
from .errors import ValidationError

SECONDS_PER_DAY = 86400

# Duration filter defaults follow the public taxi datasets (420-2994 s).
DEFAULT_MIN_TIME = 420.0
DEFAULT_MAX_TIME = 2994.0


@dataclass(frozen=True)
class Trip:
    trip_id: str
    day: int
    depart: float
    links: tuple
    checkpoints: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(int(l) for l in self.links))
        object.__setattr__(
            self, "checkpoints", tuple((int(n), float(t)) for n, t in self.checkpoints)
        )
        validate_trip(self)

    @property
    def total_time(self) -> float:
        return self.checkpoints[-1][1] if self.checkpoints else math.nan

    @property
    def arrival(self) -> float:
        return self.depart + self.total_time


def validate_trip(trip: Trip, n_links: Optional[int] = None) -> None:
    if not trip.links:
        raise ValidationError(f"trip {trip.trip_id}: empty link sequence")
    if len(set(trip.links)) != len(trip.links):
        raise ValidationError(f"trip {trip.trip_id}: repeated link in sequence")
    if n_links is not None:
        bad = [l for l in trip.links if not 0 <= l < n_links]
        if bad:
            raise ValidationError(f"trip {trip.trip_id}: unknown link id {bad[0]}")
    prev_n, prev_t = 0, 0.0
    for n, t in trip.checkpoints:
        if n <= prev_n or t <= prev_t:
            raise ValidationError(f"trip {trip.trip_id}: checkpoints must be strictly increasing")
        prev_n, prev_t = n, t
    if trip.checkpoints and prev_n != len(trip.links):
        raise ValidationError(f"trip {trip.trip_id}: final checkpoint must cover every link")


def _trip_from_record(rec: dict, require_checkpoints: bool) -> Trip:
    try:
        checkpoints = rec.get("checkpoints") or []
        if require_checkpoints and not checkpoints:
            raise ValidationError(f"trip {rec.get('trip_id')}: no checkpoints")
        return Trip(
            trip_id=str(rec["trip_id"]),
            day=int(rec["day"]),
            depart=float(rec["depart_s"]),
            links=rec["links"],
            checkpoints=[(c[0], c[1]) for c in checkpoints],
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ValidationError(f"malformed trip record: {exc}") from exc


def _read_jsonl(path: str) -> list:
    records = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        records.append(json.loads(line))
                    except json.JSONDecodeError as exc:
                        raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    return records


def load_trips(
    path: str,
    net=None,
    min_time: Optional[float] = DEFAULT_MIN_TIME,
    max_time: Optional[float] = DEFAULT_MAX_TIME,
) -> list:
    """Read a trips JSONL file, validating and duration-filtering each trip.

    Pass ``min_time=None`` / ``max_time=None`` to disable either bound.
    """
    trips = []
    n_links = net.link_count if net is not None else None
    for rec in _read_jsonl(path):
        trip = _trip_from_record(rec, require_checkpoints=True)
        validate_trip(trip, n_links)
        if min_time is not None and trip.total_time < min_time:
            continue
        if max_time is not None and trip.total_time > max_time:
            continue
        trips.append(trip)
    return trips


def load_queries(path: str, net=None) -> list:
    """Like :func:`load_trips` but checkpoints are optional and nothing is filtered."""
    n_links = net.link_count if net is not None else None
    out = []
    for rec in _read_jsonl(path):
        trip = _trip_from_record(rec, require_checkpoints=False)
        validate_trip(trip, n_links)
        out.append(trip)
    return out


def trip_record(trip: Trip) -> dict:
    return {
        "trip_id": trip.trip_id,
        "day": trip.day,
        "depart_s": int(trip.depart) if float(trip.depart).is_integer() else trip.depart,
        "links": list(trip.links),
        "checkpoints": [[n, t] for n, t in trip.checkpoints],
    }


def save_trips(trips: Iterable[Trip], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for trip in trips:
            fh.write(json.dumps(trip_record(trip), separators=(",", ":")) + "\n")


def assign_bucket(depart: float, p: int) -> int:
    """Index of the intra-day time bucket containing ``depart``."""
    if p < 1:
        raise ValidationError("bucket count must be >= 1")
    if not 0 <= depart < SECONDS_PER_DAY:
        raise ValidationError(f"departure {depart} outside [0, 86400)")
    return int(math.floor(depart * p / SECONDS_PER_DAY))


@dataclass(frozen=True)
class SubTripSet:
    """A trip together with its checkpoint-anchored prefixes.

    ``members`` holds ``(prefix_len, travel_time)`` pairs; member 0 is the
    full trip and the rest are strictly shorter prefixes in ascending order.
    """

    parent: Trip
    members: tuple

    @property
    def k(self) -> int:
        return len(self.members) - 1

    @property
    def size(self) -> int:
        return len(self.members)

    def rows(self) -> list:
        links = np.asarray(self.parent.links, dtype=np.int64)
        return [links[:n] for n, _ in self.members]

    @property
    def targets(self) -> np.ndarray:
        return np.array([t for _, t in self.members])


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def subsample(trip: Trip, k: int, eta: Optional[float] = None) -> SubTripSet:
    """Augment ``trip`` with up to ``k`` prefix sub-trips.

    The j-th cut aims at ``round(eta * j * len(links))`` links and snaps to
    the checkpoint whose prefix length is nearest, ties going to the shorter
    prefix. Cuts that collapse onto an already used prefix are dropped.
    """
    if k < 0:
        raise ValidationError("k must be >= 0")
    if eta is None:
        eta = 1.0 / (k + 1)
    if k > 0 and eta > 1.0 / k + 1e-12:
        raise ValidationError(f"stride rate {eta} exceeds 1/k = {1.0 / k}")
    full = trip.checkpoints[-1]
    members = [full]
    if k == 0 or len(trip.checkpoints) < 2:
        return SubTripSet(trip, tuple(members))
    n = len(trip.links)
    cps = trip.checkpoints
    used = {full[0]}
    cuts = []
    for j in range(1, k + 1):
        target = _round_half_up(eta * j * n)
        # min over (distance, prefix_len) breaks ties toward the shorter prefix
        best = min(cps, key=lambda c: (abs(c[0] - target), c[0]))
        if best[0] not in used:
            used.add(best[0])
            cuts.append(best)
    members.extend(sorted(cuts))
    return SubTripSet(trip, tuple(members))


class Batch:
    """Same-day, same-bucket trip groups with their stacked augmented rows.

    Row order is group by group, each group's full trip first. The selection
    matrix over links and the per-block pair-intersection incidence are built
    lazily and cached.
    """

    def __init__(self, day: int, bucket: int, groups: Sequence[SubTripSet]):
        if not groups:
            raise ValidationError("a batch needs at least one trip")
        self.day = int(day)
        self.bucket = int(bucket)
        self.groups = list(groups)
        self.rows = [r for g in self.groups for r in g.rows()]
        self.block_sizes = np.array([g.size for g in self.groups], dtype=np.int64)
        self.block_offsets = np.concatenate([[0], np.cumsum(self.block_sizes)[:-1]])
        self.targets = np.concatenate([g.targets for g in self.groups])
        self._cache: dict = {}

    @property
    def m(self) -> int:
        return len(self.rows)

    @cached_property
    def max_link(self) -> int:
        return int(max(r.max() for r in self.rows))

    @cached_property
    def block_index(self) -> np.ndarray:
        """Block (trip group) id of every row."""
        return np.repeat(np.arange(len(self.groups)), self.block_sizes)

    def selection(self, n_links: int) -> sparse.csr_matrix:
        """Binary row-by-link incidence matrix."""
        key = ("A", n_links)
        if key not in self._cache:
            if self.max_link >= n_links:
                raise ValidationError(f"batch references link {self.max_link} >= {n_links}")
            indptr = np.concatenate([[0], np.cumsum([len(r) for r in self.rows])])
            indices = np.concatenate(self.rows)
            data = np.ones(len(indices))
            self._cache[key] = sparse.csr_matrix((data, indices, indptr), shape=(self.m, n_links))
        return self._cache[key]

    def size_classes(self, n_links: int) -> list:
        """Blocks grouped by size.

        Each entry is ``(s, rows, K)`` where ``rows`` is an (n_blocks, s) array
        of batch row indices and ``K`` is a sparse (n_blocks*s*s, n_links)
        matrix whose row ``(q, a, b)`` indicates the links shared by rows
        ``a`` and ``b`` of block ``q``.
        """
        key = ("K", n_links)
        if key in self._cache:
            return self._cache[key]
        classes = []
        for s in np.unique(self.block_sizes):
            blocks = np.flatnonzero(self.block_sizes == s)
            rows = self.block_offsets[blocks][:, None] + np.arange(s)[None, :]
            indptr = [0]
            indices = []
            for q in blocks:
                members = self.groups[q].rows()
                for a in range(s):
                    for b in range(s):
                        if a == b:
                            shared = members[a]
                        else:
                            shared = np.intersect1d(members[a], members[b], assume_unique=True)
                        indices.append(shared)
                        indptr.append(indptr[-1] + len(shared))
            indices = np.concatenate(indices)
            K = sparse.csr_matrix(
                (np.ones(len(indices)), indices, np.asarray(indptr)),
                shape=(len(blocks) * s * s, n_links),
            )
            classes.append((int(s), rows, K))
        self._cache[key] = classes
        return classes

    def dense_block_mask(self) -> np.ndarray:
        idx = self.block_index
        return (idx[:, None] == idx[None, :]).astype(float)


def make_batch(groups: Sequence[SubTripSet], p: int = 1) -> Batch:
    first = groups[0].parent
    return Batch(first.day, assign_bucket(first.depart, p), groups)


def make_batches(
    trips: Sequence[Trip],
    b: int,
    k: int = 0,
    eta: Optional[float] = None,
    p: int = 1,
    seed: int = 0,
    shuffle_batches: bool = True,
) -> list:
    """Group trips by (day, bucket), shuffle within groups and chunk into batches."""
    if b < 1:
        raise ValidationError("batch size must be >= 1")
    if not trips:
        raise ValidationError("cannot batch an empty dataset")
    rng = substream(seed, "shuffle")
    keyed = sorted(
        ((t.day, assign_bucket(t.depart, p)), i) for i, t in enumerate(trips)
    )
    batches = []
    for (day, bucket), items in groupby(keyed, key=lambda x: x[0]):
        idx = np.array([i for _, i in items])
        idx = idx[rng.permutation(len(idx))]
        for start in range(0, len(idx), b):
            groups = [subsample(trips[i], k, eta) for i in idx[start:start + b]]
            batches.append(Batch(day, bucket, groups))
    if shuffle_batches:
        order = rng.permutation(len(batches))
        batches = [batches[i] for i in order]
    return batches


def split_trips(trips: Sequence[Trip], seed: int, fractions=(0.7, 0.15, 0.15)) -> tuple:
    """Random train/validation/test split."""
    rng = substream(seed, "split")
    order = rng.permutation(len(trips))
    n_train = int(round(fractions[0] * len(trips)))
    n_val = int(round(fractions[1] * len(trips)))
    pick = lambda ix: [trips[i] for i in sorted(ix)]
    return (
        pick(order[:n_train]),
        pick(order[n_train:n_train + n_val]),
        pick(order[n_train + n_val:]),
    )
