"""Model-consistent synthetic road networks and trip corpora.

Ground-truth embeddings are built from radial-basis features of link
midpoints: a long length-scale for the day-level factor (smooth, network
wide correlation) and a short one for the trip-level factor (local
correlation). Trips are self-avoiding walks whose link times are drawn
exactly from the model, so every modeling assumption holds by
construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._rng import substream
from .data import Trip, make_batches
from .errors import ValidationError
from .model import ModelParams, diag_d, mu_vector, nll
from .network import RoadNetwork

DAY_STD_FRACTION = 0.15
TRIP_STD_FRACTION = 0.10


@dataclass
class GroundTruth:
    params: ModelParams
    network: RoadNetwork
    length_scale: float
    short_length_scale: float
    seed: int
    meta: dict = field(default_factory=dict)


def gen_network(width: int, height: int, spacing: float = 1.0) -> RoadNetwork:
    """Grid of intersections; every street is a pair of opposite directed links.

    Link i connects to link j when j leaves the intersection i enters,
    U-turns excluded. Link coordinates are street midpoints, nudged a little
    to the right of the direction of travel.
    """
    if width < 2 or height < 2:
        raise ValidationError("grid needs width, height >= 2")
    node = lambda x, y: y * width + x
    pos = {node(x, y): np.array([x * spacing, y * spacing]) for x in range(width) for y in range(height)}
    links = []
    for y in range(height):
        for x in range(width):
            if x + 1 < width:
                links += [(node(x, y), node(x + 1, y)), (node(x + 1, y), node(x, y))]
            if y + 1 < height:
                links += [(node(x, y), node(x, y + 1)), (node(x, y + 1), node(x, y))]
    by_tail: dict = {}
    for i, (u, _) in enumerate(links):
        by_tail.setdefault(u, []).append(i)
    edges = set()
    for i, (u, v) in enumerate(links):
        for j in by_tail.get(v, []):
            if links[j][1] != u:
                edges.add((i, j))
    coords = np.empty((len(links), 2))
    for i, (u, v) in enumerate(links):
        direction = (pos[v] - pos[u]) / spacing
        coords[i] = 0.5 * (pos[u] + pos[v]) + 0.05 * spacing * np.array([direction[1], -direction[0]])
    return RoadNetwork(len(links), frozenset(edges), coords)


def _rbf_rows(coords: np.ndarray, centers: np.ndarray, length_scale: float) -> np.ndarray:
    """Unit-norm radial-basis feature rows, stable for tiny and infinite scales."""
    d2 = ((coords[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    if math.isinf(length_scale):
        phi = np.ones_like(d2)
    else:
        phi = np.exp(-(d2 - d2.min(axis=1, keepdims=True)) / (2.0 * length_scale ** 2))
    return phi / np.linalg.norm(phi, axis=1, keepdims=True)


def _softplus_inv(y):
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def gen_ground_truth(
    net: RoadNetwork,
    r_L: int = 8,
    r_H: int = 8,
    seed: int = 0,
    length_scale: Optional[float] = None,
    short_length_scale: Optional[float] = None,
    mean_range: tuple = (30.0, 60.0),
) -> GroundTruth:
    """Draw true link embeddings (one bucket) for ``net``.

    Day-level link std is about 15% of the link mean and trip-level std
    about 10%, split evenly between the low-rank and diagonal parts.
    """
    if net.coords is None:
        raise ValidationError("ground truth needs link coordinates")
    rng = substream(seed, "truth")
    X = net.coords
    extent = float(np.ptp(X, axis=0).max()) or 1.0
    if length_scale is None:
        length_scale = 0.35 * extent
    if short_length_scale is None:
        short_length_scale = 0.08 * extent
    lo, hi = X.min(axis=0), X.max(axis=0)
    target_mean = rng.uniform(*mean_range, size=net.link_count)

    phi_l = _rbf_rows(X, rng.uniform(lo, hi, size=(r_L, 2)), length_scale)
    L = (DAY_STD_FRACTION * target_mean)[:, None] * phi_l
    # mu = L w: ask for phi_l w = 1/fraction so that mu ~ target_mean
    w_mu = np.linalg.lstsq(phi_l, np.full(net.link_count, 1.0 / DAY_STD_FRACTION), rcond=None)[0]
    if not np.all(L @ w_mu > 0):
        # a poorly conditioned feature set cannot reach a positive mean everywhere
        w_mu = np.full(r_L, 1.0 / DAY_STD_FRACTION) / phi_l.sum(axis=1).mean()

    phi_h = _rbf_rows(X, rng.uniform(lo, hi, size=(r_H, 2)), short_length_scale)
    trip_var = (TRIP_STD_FRACTION * target_mean) ** 2
    H = np.sqrt(0.5 * trip_var)[:, None] * phi_h
    w_d = np.linalg.lstsq(H, _softplus_inv(0.5 * trip_var), rcond=None)[0]

    params = ModelParams(L, H, w_mu, w_d, scale=1.0)
    meta = {
        "mean_link_time": float(mu_vector(params, 0).mean()),
        "min_link_time": float(mu_vector(params, 0).min()),
    }
    return GroundTruth(params, net, float(length_scale), float(short_length_scale), seed, meta)


def self_avoiding_walk(net: RoadNetwork, length: int, rng: np.random.Generator,
                       successors=None, tries: int = 20) -> list:
    """A walk over links that never revisits a link; best of ``tries`` attempts."""
    succ = successors if successors is not None else net.successors()
    best: list = []
    for _ in range(tries):
        walk = [int(rng.integers(net.link_count))]
        seen = {walk[0]}
        while len(walk) < length:
            options = [j for j in succ[walk[-1]] if j not in seen]
            if not options:
                break
            nxt = options[int(rng.integers(len(options)))]
            walk.append(nxt)
            seen.add(nxt)
        if len(walk) > len(best):
            best = walk
        if len(best) == length:
            break
    return best


def sample_link_times(truth: GroundTruth, links, day_effect: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
    """Per-link travel times of one trip given the day's link deviations."""
    P = truth.params
    links = np.asarray(links, dtype=np.int64)
    H = P.H[0][links]
    noise = H @ rng.standard_normal(P.r_H) + np.sqrt(diag_d(P, 0)[links]) * rng.standard_normal(len(links))
    return mu_vector(P, 0)[links] + day_effect[links] + noise


def gen_trips(
    truth: GroundTruth,
    n_days: int,
    trips_per_day: int,
    walk_len_range: tuple = (15, 35),
    checkpoint_rate: int = 3,
    seed: int = 0,
    window: tuple = (8 * 3600.0, 9 * 3600.0),
) -> list:
    """Simulate a corpus: one shared day effect per day, independent trip noise."""
    if n_days < 1 or trips_per_day < 1 or checkpoint_rate < 1:
        raise ValidationError("counts must be positive")
    lo, hi = walk_len_range
    if lo < 1 or hi < lo:
        raise ValidationError("invalid walk length range")
    rng = substream(seed, "trips")
    succ = truth.network.successors()
    P = truth.params
    trips = []
    for day in range(n_days):
        eta = P.L[0] @ rng.standard_normal(P.r_L)
        departs = np.sort(rng.uniform(window[0], window[1], size=trips_per_day))
        for q in range(trips_per_day):
            walk = self_avoiding_walk(truth.network, int(rng.integers(lo, hi + 1)), rng, succ)
            times = sample_link_times(truth, walk, eta, rng)
            elapsed = np.cumsum(times)
            n = len(walk)
            cuts = sorted(set(range(checkpoint_rate, n, checkpoint_rate)) | {n})
            cps, last = [], 0.0
            for c in cuts:
                t = float(elapsed[c - 1])
                if t > last or c == n:
                    cps.append((c, t))
                    last = t
            if cps[-1][1] <= 0 or any(b[1] <= a[1] for a, b in zip(cps, cps[1:])):
                continue  # negative total time: vanishingly rare at these scales
            trips.append(Trip(f"d{day:03d}-t{q:04d}", day, float(np.round(departs[q], 3)), walk, cps))
    return trips


def oracle_nll(trips, truth: GroundTruth, b: int = 64, k: int = 0, eta=None, seed: int = 0) -> float:
    """Batch negative log-likelihood of ``trips`` under the true parameters."""
    if not trips:
        return 0.0
    batches = make_batches(trips, b, k, eta, truth.params.p, seed)
    return float(sum(nll(batch, truth.params) for batch in batches))
