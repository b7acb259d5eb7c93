"""Link-embedding Gaussian model of trip travel times.

For one time bucket the link parameters are

* ``L`` (n_links, r_L): day-level factor, ``Sigma_d = L L^T``
* ``w_mu`` (r_L,): link means ``mu = L w_mu``
* ``H`` (n_links, r_H) and ``w_d`` (r_H,): trip-level covariance
  ``Sigma_p = H H^T + diag(softplus(H w_d))``

A batch of augmented trips from one day is jointly Gaussian with mean
``A mu`` and covariance ``V V^T + Lambda`` where ``V = A L`` and
``Lambda`` is block diagonal with one small block per trip group. The
negative log-likelihood is evaluated with the Woodbury identity and the
matrix determinant lemma, so only ``r_L x r_L`` and block-sized systems are
ever factorized.

All arrays live in *model units*: travel times divided by ``scale``.
Likelihoods are reported for raw seconds (the ``m log(scale)`` Jacobian
is added).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg as sla

from ._rng import substream
from .errors import NumericalError, ValidationError

LOG_2PI = math.log(2.0 * math.pi)
BLOCK_FLOOR = 1e-9
DENSE_MAX_ROWS = 2048


def softplus(x):
    """log(1 + exp(x)), linear above 30 and exponential below -30."""
    x = np.asarray(x, dtype=float)
    out = np.log1p(np.exp(np.clip(x, -30.0, 30.0)))
    out = np.where(x > 30.0, x, out)
    return np.where(x < -30.0, np.exp(np.clip(x, -745.0, -30.0)), out)


def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class ModelParams:
    """Per-bucket link embeddings, stacked along the first axis."""

    L: np.ndarray  # (p, n_links, r_L)
    H: np.ndarray  # (p, n_links, r_H)
    w_mu: np.ndarray  # (p, r_L)
    w_d: np.ndarray  # (p, r_H)
    diag_override: Optional[np.ndarray] = None  # (p, n_links), replaces softplus(H w_d)
    scale: float = 1.0

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=float)
        self.H = np.asarray(self.H, dtype=float)
        self.w_mu = np.asarray(self.w_mu, dtype=float)
        self.w_d = np.asarray(self.w_d, dtype=float)
        if self.L.ndim == 2:
            self.L, self.H = self.L[None], self.H[None]
            self.w_mu, self.w_d = self.w_mu[None], self.w_d[None]
            if self.diag_override is not None:
                self.diag_override = np.asarray(self.diag_override, dtype=float)[None]
        p, n, r_l = self.L.shape
        if self.H.shape[:2] != (p, n) or self.w_mu.shape != (p, r_l) or self.w_d.shape != (p, self.H.shape[2]):
            raise ValidationError("inconsistent parameter shapes")
        if r_l < 1 or self.H.shape[2] < 1:
            raise ValidationError("ranks must be >= 1")
        if self.diag_override is not None:
            self.diag_override = np.asarray(self.diag_override, dtype=float)
            if self.diag_override.shape != (p, n):
                raise ValidationError("diag_override must have shape (p, n_links)")
            if not np.all(self.diag_override > 0):
                raise ValidationError("diag_override entries must be positive")
        if not self.scale > 0:
            raise ValidationError("scale must be positive")
        self.scale = float(self.scale)

    @property
    def p(self) -> int:
        return self.L.shape[0]

    @property
    def n_links(self) -> int:
        return self.L.shape[1]

    @property
    def r_L(self) -> int:
        return self.L.shape[2]

    @property
    def r_H(self) -> int:
        return self.H.shape[2]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.L.copy(), self.H.copy(), self.w_mu.copy(), self.w_d.copy(),
            None if self.diag_override is None else self.diag_override.copy(), self.scale,
        )

    def check_bucket(self, bucket: int) -> None:
        if not 0 <= bucket < self.p:
            raise ValidationError(f"bucket {bucket} outside 0..{self.p - 1}")


def init_params(n_links, p, r_L, r_H, seed=0, scale=1.0) -> ModelParams:
    """Small random embeddings: N(0, (0.1/sqrt(r))^2) entries, zero weights."""
    rng = substream(seed, "init")
    L = rng.normal(0.0, 0.1 / math.sqrt(r_L), size=(p, n_links, r_L))
    H = rng.normal(0.0, 0.1 / math.sqrt(r_H), size=(p, n_links, r_H))
    return ModelParams(L, H, np.zeros((p, r_L)), np.zeros((p, r_H)), scale=scale)


@dataclass
class Gradients:
    L: np.ndarray
    H: np.ndarray
    w_mu: np.ndarray
    w_d: np.ndarray


@dataclass
class BatchGaussian:
    """Factored joint Gaussian of a batch, in model units."""

    mean: np.ndarray
    V: np.ndarray
    lambda_blocks: list
    scale: float = 1.0

    @property
    def m(self) -> int:
        return len(self.mean)

    def dense_cov(self) -> np.ndarray:
        return self.V @ self.V.T + sla.block_diag(*self.lambda_blocks)


def mu_vector(params: ModelParams, bucket: int) -> np.ndarray:
    params.check_bucket(bucket)
    return params.L[bucket] @ params.w_mu[bucket]


def diag_d(params: ModelParams, bucket: int) -> np.ndarray:
    params.check_bucket(bucket)
    if params.diag_override is not None:
        return params.diag_override[bucket]
    return softplus(params.H[bucket] @ params.w_d[bucket])


def _indicator_sum(links, M) -> np.ndarray:
    links = np.asarray(links, dtype=np.int64)
    if links.size and (links.min() < 0 or links.max() >= M.shape[0]):
        raise ValidationError("unknown link id")
    return M[links].sum(axis=0)


def trip_cov(trip_q, trip_q2, params: ModelParams, bucket: int) -> float:
    """Day-level covariance of two same-day trips' travel times, in s^2."""
    params.check_bucket(bucket)
    L = params.L[bucket]
    return float(_indicator_sum(trip_q, L) @ _indicator_sum(trip_q2, L)) * params.scale ** 2


@dataclass
class _Pieces:
    A: object
    mean: np.ndarray
    V: np.ndarray
    G: np.ndarray
    d: np.ndarray
    resid: np.ndarray
    classes: list  # (rows, K, Lambda stack)


def _assemble(batch, params: ModelParams, targets=None) -> _Pieces:
    t = batch.bucket
    params.check_bucket(t)
    n = params.n_links
    A = batch.selection(n)
    L, H = params.L[t], params.H[t]
    d = diag_d(params, t)
    mean = A @ (L @ params.w_mu[t])
    V = A @ L
    G = A @ H
    y = batch.targets if targets is None else targets
    resid = np.asarray(y, dtype=float) / params.scale - mean
    classes = []
    for s, rows, K in batch.size_classes(n):
        Gq = G[rows]
        lam = Gq @ np.swapaxes(Gq, 1, 2) + (K @ d).reshape(len(rows), s, s)
        lam = lam + BLOCK_FLOOR * np.eye(s)
        classes.append((rows, K, lam))
    return _Pieces(A, mean, V, G, d, resid, classes)


def batch_gaussian(batch, params: ModelParams) -> BatchGaussian:
    """Mean, low-rank factor and per-trip noise blocks of ``batch``."""
    pc = _assemble(batch, params)
    blocks = [None] * len(batch.groups)
    for rows, _, lam in pc.classes:
        for stack_i, r in enumerate(rows):
            blocks[int(np.searchsorted(batch.block_offsets, r[0]))] = lam[stack_i]
    for blk in blocks:
        try:
            np.linalg.cholesky(blk)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalError("trip block is not positive definite; duplicate sub-trips?") from exc
    return BatchGaussian(pc.mean, pc.V, blocks, params.scale)


@dataclass
class _Solved:
    logdet: float
    quad: float
    W: np.ndarray  # Lambda^-1 V
    alpha: np.ndarray  # Sigma^-1 r
    C_inv: np.ndarray
    vtu: np.ndarray  # V^T Lambda^-1 r
    lam_inv: list  # per class, (nb, s, s)


def _block_inverse(lam: np.ndarray) -> tuple:
    try:
        chol = np.linalg.cholesky(lam)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError("trip block is not positive definite") from exc
    chol_inv = np.linalg.inv(chol)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum()
    return np.swapaxes(chol_inv, 1, 2) @ chol_inv, logdet


def _solve(pc: _Pieces) -> _Solved:
    m, r_l = pc.V.shape
    W = np.empty_like(pc.V)
    u = np.empty(m)
    logdet = 0.0
    lam_inv = []
    for rows, _, lam in pc.classes:
        inv, ld = _block_inverse(lam)
        logdet += ld
        lam_inv.append(inv)
        W[rows] = inv @ pc.V[rows]
        u[rows] = np.einsum("qab,qb->qa", inv, pc.resid[rows])
    C = np.eye(r_l) + pc.V.T @ W
    try:
        C_chol = sla.cholesky(C, lower=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError("capacitance matrix is not positive definite",
                             min_eig=float(np.linalg.eigvalsh(C).min()) if np.all(np.isfinite(C)) else None) from exc
    logdet += 2.0 * np.log(np.diag(C_chol)).sum()
    C_inv = sla.cho_solve((C_chol, True), np.eye(r_l))
    vtu = pc.V.T @ u
    alpha = u - W @ (C_inv @ vtu)
    quad = float(pc.resid @ alpha)
    return _Solved(logdet, quad, W, alpha, C_inv, vtu, lam_inv)


def _finish(value: float, m: int, scale: float) -> float:
    if not math.isfinite(value):
        raise NumericalError("non-finite negative log-likelihood", value=value)
    return value + m * math.log(scale)


def nll(batch, params: ModelParams) -> float:
    """Negative log-likelihood of the batch targets (seconds), Woodbury path."""
    pc = _assemble(batch, params)
    sv = _solve(pc)
    return _finish(0.5 * (batch.m * LOG_2PI + sv.logdet + sv.quad), batch.m, params.scale)


def grad_nll(batch, params: ModelParams) -> tuple:
    """Negative log-likelihood and its exact gradient for the batch's bucket.

    Returns ``(value, Gradients)``. With a ``diag_override`` present the
    diagonal is not a function of ``H`` and ``w_d`` receives zero gradient.
    """
    t = batch.bucket
    pc = _assemble(batch, params)
    sv = _solve(pc)
    value = _finish(0.5 * (batch.m * LOG_2PI + sv.logdet + sv.quad), batch.m, params.scale)

    L, H = params.L[t], params.H[t]
    w_mu, w_d = params.w_mu[t], params.w_d[t]
    alpha = sv.alpha
    # d nll / d V = Sigma^-1 V - alpha alpha^T V, with Sigma^-1 V = W C^-1
    dV = sv.W @ sv.C_inv - np.outer(alpha, pc.V.T @ alpha)
    dL = pc.A.T @ (dV - np.outer(alpha, w_mu))
    dw_mu = -(pc.V.T @ alpha)

    dG = np.zeros_like(pc.G)
    dd = np.zeros(params.n_links)
    WC = sv.W @ sv.C_inv
    for (rows, K, _), inv in zip(pc.classes, sv.lam_inv):
        Wq = sv.W[rows]
        aq = alpha[rows]
        Gblk = 0.5 * (inv - WC[rows] @ np.swapaxes(Wq, 1, 2) - aq[:, :, None] * aq[:, None, :])
        dG[rows] = 2.0 * Gblk @ pc.G[rows]
        dd += K.T @ Gblk.ravel()
    dH = pc.A.T @ dG
    if params.diag_override is None:
        dz = dd * _sigmoid(H @ w_d)
        dH = dH + np.outer(dz, w_d)
        dw_d = H.T @ dz
    else:
        dw_d = np.zeros_like(w_d)
    grads = Gradients(np.asarray(dL), np.asarray(dH), dw_mu, dw_d)
    for g in (grads.L, grads.H, grads.w_mu, grads.w_d):
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient")
    return value, grads


def dense_joint(batch, params: ModelParams) -> tuple:
    """Materialized mean and covariance of the batch (model units)."""
    if batch.m > DENSE_MAX_ROWS:
        raise ValidationError(f"dense path limited to {DENSE_MAX_ROWS} rows, got {batch.m}")
    t = batch.bucket
    params.check_bucket(t)
    A = batch.selection(params.n_links).toarray()
    L, H = params.L[t], params.H[t]
    sigma_d = L @ L.T
    sigma_p = H @ H.T + np.diag(diag_d(params, t))
    cov = A @ sigma_d @ A.T + batch.dense_block_mask() * (A @ sigma_p @ A.T)
    cov = cov + BLOCK_FLOOR * np.eye(batch.m)
    return A @ mu_vector(params, t), cov


def nll_dense(batch, params: ModelParams) -> float:
    """Reference negative log-likelihood via a dense Cholesky factorization."""
    mean, cov = dense_joint(batch, params)
    r = batch.targets / params.scale - mean
    try:
        chol = sla.cholesky(cov, lower=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError("joint covariance is not positive definite") from exc
    z = sla.solve_triangular(chol, r, lower=True)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return _finish(0.5 * (batch.m * LOG_2PI + logdet + z @ z), batch.m, params.scale)
