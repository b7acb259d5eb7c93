"""Maximum-likelihood training of the link embeddings."""
from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from ._rng import substream
from .data import Batch, assign_bucket, make_batches, subsample
from .errors import NumericalError, ValidationError
from .inference import predict_trip
from .metrics import MEAN_BASED, MetricsReport, score
from .model import ModelParams, grad_nll, init_params, nll


@dataclass
class TrainConfig:
    b: int = 64
    k: int = 2
    eta: Optional[float] = None
    p: int = 24
    r_L: int = 36
    r_H: int = 36
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 100
    patience: int = 10
    seed: int = 0
    standardize: bool = True
    deterministic: bool = False

    def __post_init__(self):
        for name in ("b", "p", "r_L", "r_H", "epochs", "patience"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.k < 0:
            raise ValidationError("k must be >= 0")
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValidationError("invalid optimizer settings")
        if self.eta is not None and (self.eta <= 0 or (self.k > 0 and self.eta > 1.0 / self.k)):
            raise ValidationError("stride rate must satisfy 0 < eta <= 1/k")

    @property
    def stride(self) -> float:
        return self.eta if self.eta is not None else 1.0 / (self.k + 1)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # dicts: epoch, train_nll, val_nll, seconds
    best_epoch: int = 0
    best_val_nll: float = math.inf
    scale: float = 1.0
    bucket_counts: dict = field(default_factory=dict)
    status: str = "ok"
    message: str = ""
    selection: str = "validation"  # set scored for early stopping

    def to_dict(self) -> dict:
        return asdict(self)


class DivergenceError(NumericalError):
    """Training hit a non-finite objective; carries the last finite state."""

    def __init__(self, message, params, report):
        super().__init__(message)
        self.params = params
        self.report = report


class _Adam:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {n: np.zeros_like(getattr(params, n)) for n in ("L", "H", "w_mu", "w_d")}
        self.v = {n: np.zeros_like(getattr(params, n)) for n in ("L", "H", "w_mu", "w_d")}
        self.steps = np.zeros(params.p, dtype=np.int64)

    def step(self, params: ModelParams, bucket: int, grads) -> None:
        c = self.cfg
        self.steps[bucket] += 1
        n = self.steps[bucket]
        for name in ("L", "H", "w_mu", "w_d"):
            g = getattr(grads, name)
            m = self.m[name][bucket]
            v = self.v[name][bucket]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            m_hat = m / (1 - c.beta1 ** n)
            v_hat = v / (1 - c.beta2 ** n)
            getattr(params, name)[bucket] -= c.lr * m_hat / (np.sqrt(v_hat) + 1e-8)


def target_scale(trips: Sequence) -> float:
    """Mean seconds per link, so standardized link means are O(1)."""
    total = sum(t.total_time for t in trips)
    links = sum(len(t.links) for t in trips)
    return total / links


def _softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def _embed_rank_one(N: np.ndarray, target: np.ndarray, direction: np.ndarray, weight: float):
    """Return (M, w) with ``M w == target``: N with ``direction`` projected out
    plus a rank-one term carrying ``target``."""
    M = N - np.outer(N @ direction, direction) + np.outer(target / weight, direction)
    return M, weight * direction


def _variance_split(lengths: np.ndarray, resid2: np.ndarray, base: float) -> tuple:
    """Per-link and shared variance from squared residuals (NNLS on |T|, |T|^2).

    A component the regression sets to zero falls back to 5% of the
    variance the other one explains, so neither factor starts degenerate.
    """
    from scipy.optimize import nnls

    (per_link, shared), _ = nnls(np.column_stack([lengths, lengths ** 2]), resid2)
    n1, n2 = lengths.mean(), (lengths ** 2).mean()
    if per_link <= 0 and shared <= 0:
        per_link = shared = (0.1 * base) ** 2
    elif per_link <= 0:
        per_link = 0.05 * shared * n2 / n1
    elif shared <= 0:
        shared = 0.05 * per_link * n1 / n2
    return float(per_link), float(shared)


def _rescale_residual(N: np.ndarray, direction: np.ndarray, target_sq: float) -> np.ndarray:
    """N with ``direction`` projected out, shrunk so its mean squared row
    norm is at most ``target_sq``.

    Only shrinking is allowed: the moment split overstates the independent
    part when day effects are short-range, and training grows a small
    factor more readily than it sheds a large one.
    """
    R = N - np.outer(N @ direction, direction)
    now = float(np.mean(np.sum(R * R, axis=1)))
    return R * math.sqrt(target_sq / now) if now > target_sq else R


def warm_start(params: ModelParams, trips: Sequence, seed: int = 0) -> None:
    """Moment-matched initialization of every populated bucket.

    Link means come from damped least squares of full-trip times on link
    counts. Squared residuals are regressed on ``|T|`` and ``|T|^2``
    (non-negative least squares) to split variance into an independent
    per-link part and a shared part. The means go into ``L w_mu`` through
    one random direction that also carries the shared variance. The random
    factor entries stay as drawn unless they would exceed the moment
    estimates, in which case they are shrunk to them. Half the per-link
    part seeds ``softplus(H w_d)``.
    """
    from scipy.sparse.linalg import lsqr

    rng = substream(seed, "warm-start")
    by_bucket: dict = {}
    for t in trips:
        by_bucket.setdefault(assign_bucket(t.depart, params.p), []).append(t)
    for bucket in sorted(by_bucket):
        group = by_bucket[bucket]
        batch = Batch(group[0].day, bucket, [subsample(t, 0) for t in group])
        A = batch.selection(params.n_links)
        y = batch.targets / params.scale
        lengths = np.asarray(A.sum(axis=1)).ravel()
        base = y.sum() / lengths.sum()
        mu = base + lsqr(A, y - base * lengths, damp=1.0)[0]
        mu = np.maximum(mu, 0.1 * base)
        per_link, shared = _variance_split(lengths, (y - A @ mu) ** 2, base)

        # the mean direction carries the shared variance; the random
        # remainder may add at most as much again
        u = rng.standard_normal(params.r_L)
        u /= np.linalg.norm(u)
        weight = float(mu.mean()) / math.sqrt(shared)
        R = _rescale_residual(params.L[bucket], u, shared)
        params.L[bucket], params.w_mu[bucket] = _embed_rank_one(R, mu, u, weight)

        g = _softplus_inv(np.full(params.n_links, 0.5 * per_link))
        v = rng.standard_normal(params.r_H)
        v /= np.linalg.norm(v)
        # the w_d direction adds no more than the random entries do
        weight = max(float(np.abs(g).max()), 1.0) / min(0.1 / math.sqrt(params.r_H),
                                                        math.sqrt(0.05 * per_link))
        R = _rescale_residual(params.H[bucket], v, 0.5 * per_link)
        params.H[bucket], params.w_d[bucket] = _embed_rank_one(R, g, v, weight)


def total_nll(batches: Sequence, params: ModelParams) -> float:
    return float(sum(nll(b, params) for b in batches))


def train(
    trips: Sequence,
    net,
    config: TrainConfig,
    val_trips: Optional[Sequence] = None,
    init: Optional[ModelParams] = None,
    log=None,
) -> tuple:
    """Fit per-bucket embeddings by Adam on batch negative log-likelihood.

    Returns ``(params, report)`` with the parameters of the best validation
    epoch. Without validation trips the full training NLL at the end of
    each epoch plays that role.
    """
    if not trips:
        raise ValidationError("training set is empty")
    cfg = config
    scale = target_scale(trips) if cfg.standardize else 1.0
    if init is None:
        params = init_params(net.link_count, cfg.p, cfg.r_L, cfg.r_H, cfg.seed, scale)
        warm_start(params, trips, cfg.seed)
    else:
        params = init.copy()
    if params.n_links != net.link_count:
        raise ValidationError("parameter link count does not match network")

    counts = Counter(assign_bucket(t.depart, cfg.p) for t in trips)
    report = TrainReport(scale=params.scale, bucket_counts={str(k): v for k, v in sorted(counts.items())})
    eval_train = make_batches(trips, cfg.b, cfg.k, cfg.eta, cfg.p, cfg.seed)
    if val_trips:
        val_batches = make_batches(val_trips, cfg.b, cfg.k, cfg.eta, cfg.p, cfg.seed)
    else:
        val_batches = eval_train
        report.selection = "training"

    def record(epoch, train_value, seconds):
        val_value = total_nll(val_batches, params)
        report.epochs.append({
            "epoch": epoch,
            "train_nll": train_value,
            "val_nll": val_value,
            "seconds": None if cfg.deterministic else seconds,
        })
        if log:
            log(f"epoch {epoch}: train {train_value:.3f} val {val_value:.3f}")
        return val_value

    opt = _Adam(params, cfg)
    best = params.copy()
    v0 = record(0, total_nll(eval_train, params), 0.0)
    report.best_val_nll = v0
    since_best = 0
    shuffle = substream(cfg.seed, "shuffle-epochs")
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        batches = make_batches(trips, cfg.b, cfg.k, cfg.eta, cfg.p, int(shuffle.integers(2 ** 31)))
        running = 0.0
        try:
            # overflow surfaces below as a divergence, not as warnings
            with np.errstate(over="ignore", invalid="ignore"):
                for batch in batches:
                    value, grads = grad_nll(batch, params)
                    running += value
                    opt.step(params, batch.bucket, grads)
            if not all(np.all(np.isfinite(getattr(params, n))) for n in ("L", "H", "w_mu", "w_d")):
                raise NumericalError("parameters became non-finite")
            val_value = record(epoch, running, time.perf_counter() - start)
        except NumericalError as exc:
            report.status = "diverged"
            report.message = f"epoch {epoch}: {exc}"
            raise DivergenceError(report.message, best, report) from exc

        if val_value < report.best_val_nll:
            report.best_val_nll = val_value
            report.best_epoch = epoch
            best = params.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                report.message = f"early stop after epoch {epoch}"
                break
    return best, report


def predict_many(
    trips: Sequence,
    params: ModelParams,
    policy: str = "conditional",
    pool: Optional[Sequence] = None,
    max_obs: int = 32,
    k: int = 2,
    eta: Optional[float] = None,
) -> list:
    pool = trips if pool is None else pool
    return [predict_trip(t, params, pool, policy, max_obs, k, eta) for t in trips]


def evaluate(
    trips: Sequence,
    params: ModelParams,
    policy: str = "conditional",
    pool: Optional[Sequence] = None,
    max_obs: int = 32,
    k: int = 2,
    eta: Optional[float] = None,
    mode: str = MEAN_BASED,
    seed: int = 0,
) -> MetricsReport:
    """Score predictions for ``trips`` under a conditioning policy.

    ``pool`` supplies the completed trips available for conditioning and
    defaults to ``trips`` itself.
    """
    if not trips:
        raise ValidationError("test set is empty")
    preds = predict_many(trips, params, policy, pool, max_obs, k, eta)
    return score(preds, [t.total_time for t in trips], params.scale, mode, seed, policy)
