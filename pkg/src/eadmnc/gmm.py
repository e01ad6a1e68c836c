"""Gaussian mixture model of the continuous marginal P(x).

Initialisation runs k-means on a random subset of the data; fitting is plain
EM with full covariances.  A per-feature diagonal ridge keeps every
covariance positive definite.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .parallel import DEFAULT_CHUNK, map_chunks

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
RIDGE_SCALE = 1e-6


class DegenerateClusterError(ValueError):
    pass


@dataclass(frozen=True)
class GmmParams:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        mu = np.array(self.means, dtype=np.float64)
        cov = np.array(self.covariances, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("weights must be a non-empty vector")
        k = w.size
        if mu.ndim != 2 or mu.shape[0] != k:
            raise ValueError(f"means must have shape ({k}, d), got {mu.shape}")
        d = mu.shape[1]
        if cov.shape != (k, d, d):
            raise ValueError(f"covariances must have shape ({k}, {d}, {d}), got {cov.shape}")
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must lie on the simplex, got {w}")
        for a in (w, mu, cov):
            a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def n_components(self) -> int:
        return int(self.weights.size)

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @cached_property
    def _cholesky(self) -> np.ndarray:
        return np.linalg.cholesky(self.covariances)

    @cached_property
    def _log_dets(self) -> np.ndarray:
        return 2.0 * np.log(np.diagonal(self._cholesky, axis1=1, axis2=2)).sum(axis=1)

    @cached_property
    def _log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GmmParams":
        return cls(
            np.asarray(obj["weights"], dtype=np.float64),
            np.asarray(obj["means"], dtype=np.float64),
            np.asarray(obj["covariances"], dtype=np.float64),
        )


def default_ridge(data: np.ndarray) -> np.ndarray:
    """1e-6 x per-feature variance; zero-variance features fall back to 1e-6."""
    var = np.asarray(data, dtype=np.float64).var(axis=0)
    return RIDGE_SCALE * np.where(var > 0, var, 1.0)


def _check_dim(params: GmmParams, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.dim:
        raise ValueError(f"dimension mismatch: got {X.shape[1]}, model has {params.dim}")
    return X


def component_log_pdf_matrix(params: GmmParams, X: np.ndarray) -> np.ndarray:
    """(n, K) matrix of log N(x_n; mu_k, Sigma_k), without mixture weights."""
    X = _check_dim(params, X)
    n, d = X.shape
    out = np.empty((n, params.n_components))
    for k in range(params.n_components):
        diff = (X - params.means[k]).T
        sol = solve_triangular(params._cholesky[k], diff, lower=True, check_finite=False)
        maha = np.einsum("ij,ij->j", sol, sol)
        out[:, k] = -0.5 * (d * LOG_2PI + params._log_dets[k] + maha)
    return out


def component_log_pdfs(params: GmmParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("component_log_pdfs expects a single vector")
    return component_log_pdf_matrix(params, x[None, :])[0]


def log_pdf_vector(params: GmmParams, X: np.ndarray, workers: int = 1, chunk_size: int = DEFAULT_CHUNK) -> np.ndarray:
    X = _check_dim(params, X)

    def work(a, b):
        return logsumexp(component_log_pdf_matrix(params, X[a:b]) + params._log_weights, axis=1)

    parts = map_chunks(work, X.shape[0], workers, chunk_size)
    return np.concatenate(parts) if parts else np.empty(0)


def log_pdf(params: GmmParams, x: np.ndarray) -> float:
    """log sum_k w_k N(x; mu_k, Sigma_k), evaluated with log-sum-exp."""
    return float(logsumexp(component_log_pdfs(params, x) + params._log_weights))


def assign_vector(params: GmmParams, X: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, which is the lowest-index tie rule
    return np.argmax(component_log_pdf_matrix(params, X) + params._log_weights, axis=1)


def assign(params: GmmParams, x: np.ndarray) -> int:
    x = np.asarray(x, dtype=np.float64)
    return int(assign_vector(params, x[None, :])[0])


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [points[rng.integers(len(points))]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(len(points)))
        else:
            idx = int(rng.choice(len(points), p=d2 / total))
        centers.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm; empty clusters are re-seeded from the farthest point."""
    centers = _kmeans_pp(points, k, rng)
    labels = np.full(len(points), -1)
    for _ in range(max_iter):
        dist = _sq_dists(points, centers)
        new_labels = np.argmin(dist, axis=1)
        counts = np.bincount(new_labels, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            own = dist[np.arange(len(points)), new_labels]
            # a point that is alone in its cluster must stay there
            own[counts[new_labels] <= 1] = -1.0
            far = int(np.argmax(own))
            counts[new_labels[far]] -= 1
            new_labels[far] = empty
            counts[empty] = 1
            centers[empty] = points[far]
            dist[:, empty] = ((points - centers[empty]) ** 2).sum(axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            centers[j] = points[labels == j].mean(axis=0)
    return centers, labels


def init_kmeans(
    data: np.ndarray,
    K: int,
    subset_fraction: float = 0.2,
    seed: int = 0,
    ridge: np.ndarray | None = None,
) -> GmmParams:
    data = np.asarray(data, dtype=np.float64)
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0.0 < subset_fraction <= 1.0:
        raise ValueError("subset_fraction must be in (0, 1]")
    n, d = data.shape
    if n == 0:
        raise ValueError("cannot initialise a mixture from no data")
    ridge = default_ridge(data) if ridge is None else np.asarray(ridge, dtype=np.float64)
    rng = np.random.default_rng(seed)
    size = min(n, max(K, int(math.ceil(subset_fraction * n))))
    subset = data[np.sort(rng.choice(n, size=size, replace=False))]
    if len(np.unique(subset, axis=0)) < K:
        if len(np.unique(data, axis=0)) < K:
            raise DegenerateClusterError(f"K={K} exceeds the number of distinct points")
        subset = data
    centers, labels = kmeans(subset, K, rng)
    counts = np.bincount(labels, minlength=K)
    covs = np.empty((K, d, d))
    for j in range(K):
        members = subset[labels == j]
        diff = members - centers[j]
        covs[j] = diff.T @ diff / len(members) + np.diag(ridge)
    return GmmParams(counts / counts.sum(), centers, covs)


def _em_stats(params: GmmParams, X: np.ndarray) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    logp = component_log_pdf_matrix(params, X) + params._log_weights
    norm = logsumexp(logp, axis=1)
    resp = np.exp(logp - norm[:, None])
    nk = resp.sum(axis=0)
    sx = resp.T @ X
    sxx = np.einsum("nk,ni,nj->kij", resp, X, X, optimize=True)
    return float(norm.sum()), nk, sx, sxx


def fit_em(
    data: np.ndarray,
    init: GmmParams,
    max_iter: int = 100,
    tol: float = 1e-6,
    ridge: np.ndarray | None = None,
    workers: int = 1,
    history: list[float] | None = None,
    chunk_size: int = DEFAULT_CHUNK,
) -> GmmParams:
    """Expectation-Maximisation from ``init``.

    Stops after ``max_iter`` iterations or when the relative change of the
    mean log-likelihood drops below ``tol``.  The mean log-likelihood seen at
    each E-step is appended to ``history`` when given.
    """
    X = _check_dim(init, data)
    n, d = X.shape
    ridge = default_ridge(X) if ridge is None else np.asarray(ridge, dtype=np.float64)
    params = init
    prev = -np.inf
    for it in range(max_iter):
        parts = map_chunks(lambda a, b: _em_stats(params, X[a:b]), n, workers, chunk_size)
        ll = sum(p[0] for p in parts) / n
        nk = sum(p[1] for p in parts)
        sx = sum(p[2] for p in parts)
        sxx = sum(p[3] for p in parts)
        if history is not None:
            history.append(ll)
        if it > 0 and abs(ll - prev) <= tol * max(abs(prev), 1.0):
            break
        prev = ll

        means = params.means.copy()
        covs = params.covariances.copy()
        for k in range(params.n_components):
            if nk[k] <= 1e-10 * n:
                log.warning("mixture component %d collapsed (mass %.3g); keeping previous mean/covariance", k, nk[k])
                continue
            mu = sx[k] / nk[k]
            cov = sxx[k] / nk[k] - np.outer(mu, mu)
            cov = 0.5 * (cov + cov.T) + np.diag(ridge)
            if np.linalg.eigvalsh(cov).min() < ridge.min():
                log.warning("covariance of component %d fell below the ridge; repaired", k)
                vals, vecs = np.linalg.eigh(cov)
                cov = (vecs * np.maximum(vals, ridge.min())) @ vecs.T
            means[k], covs[k] = mu, cov
        weights = nk / nk.sum()
        params = GmmParams(weights, means, covs)
    return params


def fit_gmm(
    data: np.ndarray,
    K: int = 2,
    subset_fraction: float = 0.2,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
    workers: int = 1,
) -> GmmParams:
    ridge = default_ridge(data)
    init = init_kmeans(data, K, subset_fraction, seed, ridge)
    return fit_em(data, init, max_iter, tol, ridge, workers)
