"""Road network graph, link contraction and its effect on model parameters.

Links are the graph nodes. A network is stored on disk as two CSV files
inside one directory: ``links.csv`` (``link_id[,x,y]``) and ``edges.csv``
(``src,dst``).
"""
from __future__ import annotations

import csv
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class RoadNetwork:
    link_count: int
    edges: frozenset = field(default_factory=frozenset)
    coords: Optional[np.ndarray] = None  # (link_count, 2) or None

    def __post_init__(self):
        if self.link_count < 1:
            raise ValidationError("network must contain at least one link")
        for src, dst in self.edges:
            if not (0 <= src < self.link_count and 0 <= dst < self.link_count):
                raise ValidationError(f"dangling edge endpoint in ({src}, {dst})")
        if self.coords is not None:
            coords = np.asarray(self.coords, dtype=float)
            if coords.shape != (self.link_count, 2):
                raise ValidationError("coords must have shape (link_count, 2)")
            object.__setattr__(self, "coords", coords)

    @property
    def links(self) -> range:
        return range(self.link_count)

    def neighbors(self) -> list[set]:
        """Undirected adjacency lists, used for path-connectivity checks."""
        adj: list[set] = [set() for _ in range(self.link_count)]
        for src, dst in self.edges:
            adj[src].add(dst)
            adj[dst].add(src)
        return adj

    def successors(self) -> list[list]:
        out: list[list] = [[] for _ in range(self.link_count)]
        for src, dst in sorted(self.edges):
            out[src].append(dst)
        return out


@dataclass(frozen=True)
class ContractionMap:
    """A partition of the source links into super-links.

    ``groups[g]`` lists the source links merged into contracted link ``g``.
    """

    groups: tuple

    def __init__(self, groups: Iterable[Iterable[int]]):
        object.__setattr__(self, "groups", tuple(tuple(int(l) for l in g) for g in groups))

    @property
    def source_count(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def target_count(self) -> int:
        return len(self.groups)

    @classmethod
    def identity(cls, n: int) -> "ContractionMap":
        return cls([[l] for l in range(n)])

    def assignment(self) -> np.ndarray:
        """Group index of every source link."""
        out = np.full(self.source_count, -1, dtype=np.int64)
        for g, members in enumerate(self.groups):
            out[list(members)] = g
        return out

    def matrix(self) -> np.ndarray:
        """The binary mapping matrix of shape (n_groups, n_links)."""
        m = np.zeros((self.target_count, self.source_count))
        for g, members in enumerate(self.groups):
            m[g, list(members)] = 1.0
        return m

    def validate(self, net: Optional[RoadNetwork] = None) -> None:
        n = net.link_count if net is not None else self.source_count
        seen = np.zeros(n, dtype=bool)
        for members in self.groups:
            if not members:
                raise ValidationError("contraction groups must be non-empty")
            for l in members:
                if not 0 <= l < n:
                    raise ValidationError(f"contraction group references unknown link {l}")
                if seen[l]:
                    raise ValidationError(f"link {l} appears in more than one group")
                seen[l] = True
        if not seen.all():
            missing = np.flatnonzero(~seen)[:5].tolist()
            raise ValidationError(f"contraction map does not cover links {missing}...")
        if net is not None:
            adj = net.neighbors()
            for members in self.groups:
                if not _connected(members, adj):
                    raise ValidationError(f"contraction group {list(members)} is not path-connected")


def _connected(members: Sequence[int], adj: list[set]) -> bool:
    if len(members) == 1:
        return True
    want = set(members)
    seen = {members[0]}
    queue = deque([members[0]])
    while queue:
        cur = queue.popleft()
        for nxt in adj[cur]:
            if nxt in want and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen == want


def contract(net: RoadNetwork, cmap: ContractionMap) -> RoadNetwork:
    """Merge each group of links into one super-link.

    An edge (g, g') survives when some original edge crosses from group g
    to group g'; edges inside a group are dropped.
    """
    cmap.validate(net)
    assign = cmap.assignment()
    edges = frozenset(
        (int(assign[s]), int(assign[d])) for s, d in net.edges if assign[s] != assign[d]
    )
    coords = None
    if net.coords is not None:
        coords = np.array([net.coords[list(g)].mean(axis=0) for g in cmap.groups])
    return RoadNetwork(cmap.target_count, edges, coords)


def load_network(path: str) -> RoadNetwork:
    """Read ``links.csv`` and ``edges.csv`` from the directory ``path``."""
    links_path = os.path.join(path, "links.csv")
    edges_path = os.path.join(path, "edges.csv")
    try:
        with open(links_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "link_id" not in reader.fieldnames:
                raise ValidationError(f"{links_path}: missing link_id header")
            has_xy = {"x", "y"} <= set(reader.fieldnames)
            rows = list(reader)
        ids = [int(r["link_id"]) for r in rows]
        coords = np.array([[float(r["x"]), float(r["y"])] for r in rows]) if has_xy else None
        edges = []
        if os.path.exists(edges_path):
            with open(edges_path, newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames is None or not {"src", "dst"} <= set(reader.fieldnames):
                    raise ValidationError(f"{edges_path}: expected header src,dst")
                edges = [(int(r["src"]), int(r["dst"])) for r in reader]
    except (OSError, KeyError) as exc:
        raise ValidationError(f"cannot read network at {path}: {exc}") from exc
    except ValueError as exc:
        raise ValidationError(f"malformed network file at {path}: {exc}") from exc

    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate link ids")
    if sorted(ids) != list(range(len(ids))):
        raise ValidationError("link ids must be dense integers 0..n-1")
    if coords is not None:
        order = np.argsort(ids)
        coords = coords[order]
    return RoadNetwork(len(ids), frozenset(edges), coords)


def save_network(net: RoadNetwork, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "links.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if net.coords is not None:
            w.writerow(["link_id", "x", "y"])
            for l in net.links:
                w.writerow([l, repr(float(net.coords[l, 0])), repr(float(net.coords[l, 1]))])
        else:
            w.writerow(["link_id"])
            for l in net.links:
                w.writerow([l])
    with open(os.path.join(path, "edges.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst"])
        for s, d in sorted(net.edges):
            w.writerow([s, d])


def apply_contraction(params, cmap: ContractionMap):
    """Contract every bucket's embeddings: ``L' = M L``, ``H' = M H``.

    The contracted diagonal sums member-link noise variances and is stored
    as an explicit override, since softplus does not commute with sums.
    """
    from .model import ModelParams, diag_d

    if cmap.source_count != params.n_links:
        raise ValidationError(
            f"map covers {cmap.source_count} links but params have {params.n_links}"
        )
    cmap.validate()
    M = cmap.matrix()
    d = np.stack([diag_d(params, t) for t in range(params.p)])
    return ModelParams(
        np.einsum("gn,pnr->pgr", M, params.L),
        np.einsum("gn,pnr->pgr", M, params.H),
        params.w_mu.copy(),
        params.w_d.copy(),
        d @ M.T,
        params.scale,
    )


def contract_trip(trip, cmap: ContractionMap):
    """Rewrite a trip over super-links; its link set must be a union of groups."""
    from .data import Trip

    assign = cmap.assignment()
    links = set(trip.links)
    seq = []
    for l in trip.links:
        g = int(assign[l])
        if not seq or seq[-1] != g:
            if g in seq:
                raise ValidationError(f"trip {trip.trip_id} re-enters group {g}")
            if not set(cmap.groups[g]) <= links:
                raise ValidationError(f"trip {trip.trip_id} covers group {g} only partially")
            seq.append(g)
    cps = []
    for n, t in trip.checkpoints:
        covered = {int(assign[l]) for l in trip.links[:n]}
        # checkpoints falling inside a super-link have no contracted counterpart
        if sum(len(cmap.groups[g]) for g in covered) == n:
            cps.append((len(covered), t))
    return Trip(trip.trip_id, trip.day, trip.depart, seq, cps)
