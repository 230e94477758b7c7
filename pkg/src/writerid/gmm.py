"""Diagonal-covariance GMM dictionary (EM) and mini-batch k-means for VLAD.

The GMM acts as the background dictionary that is later MAP-adapted per
document. Variances are floored at a fraction of the mean data variance:
sparse ReLU features otherwise drive components singular.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)

DEFAULT_COMPONENTS = 100
DEFAULT_TOL = 1e-5
DEFAULT_MAX_ITERS = 200
VARIANCE_FLOOR_FACTOR = 1e-4
_INIT_KMEANS_ITERS = 10


@dataclass
class GmmModel:
    weights: np.ndarray  # (K,), positive, sums to 1
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D), floored away from 0
    em_trace: list[float] | None = field(default=None, repr=False, compare=False)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class KmeansModel:
    centers: np.ndarray  # (K, D)

    @property
    def n_centers(self) -> int:
        return self.centers.shape[0]


def _logsumexp(a: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.exp(a - m).sum(axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def log_component_densities(model: GmmModel, x: np.ndarray) -> np.ndarray:
    """(T, K) matrix of log N(x_t | mu_k, diag(var_k))."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ValueError(f"expected (T, {model.dim}) data, got {x.shape}")
    inv = 1.0 / model.variances  # (K, D)
    quad = (
        (x * x) @ inv.T
        - 2.0 * (x @ (model.means * inv).T)
        + np.sum(model.means**2 * inv, axis=1)
    )
    logdet = np.sum(np.log(model.variances), axis=1)
    return -0.5 * (model.dim * _LOG_2PI + logdet + quad)


def log_likelihood(model: GmmModel, x: np.ndarray) -> float:
    """Mean per-sample log mixture density, via log-sum-exp."""
    lg = log_component_densities(model, x) + np.log(model.weights)
    return float(_logsumexp(lg, axis=1).mean())


def _squared_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (T, K) squared Euclidean distances, clipped against rounding
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * x @ centers.T
        + np.sum(centers * centers, axis=1)
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: centers drawn with probability proportional to D^2."""
    t = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(t)]
    d2 = _squared_distances(x, centers[:1]).ravel()
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = x[rng.integers(t)]  # all mass already covered
        else:
            centers[i] = x[rng.choice(t, p=d2 / total)]
        d2 = np.minimum(d2, _squared_distances(x, centers[i : i + 1]).ravel())
    return centers


def lloyd_kmeans(
    x: np.ndarray, k: int, iters: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Plain Lloyd iterations from a k-means++ start; returns (centers, labels)."""
    centers = _kmeanspp_init(x, k, rng)
    labels = np.argmin(_squared_distances(x, centers), axis=1)
    for _ in range(iters):
        for j in range(k):
            sel = labels == j
            if sel.any():
                centers[j] = x[sel].mean(axis=0)
            else:
                centers[j] = x[rng.integers(x.shape[0])]
        new_labels = np.argmin(_squared_distances(x, centers), axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centers, labels


def fit_gmm(
    x: np.ndarray,
    k: int = DEFAULT_COMPONENTS,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    variance_floor_factor: float = VARIANCE_FLOOR_FACTOR,
) -> GmmModel:
    """EM fit of a K-component diagonal GMM, initialized from seeded k-means.

    Stops when the per-sample log-likelihood gain drops below ``tol`` or
    after ``max_iters`` iterations. The per-iteration log-likelihood
    trace is kept on the returned model (``em_trace``); it is
    non-decreasing up to floating-point reduction error. Components that
    starve (n_k -> 0) are re-seeded to a random data point and the event
    is logged.
    """
    x = np.asarray(x, dtype=np.float64)
    t, d = x.shape
    if t < k:
        raise ValueError(f"need at least {k} samples to fit {k} components, got {t}")
    rng = np.random.default_rng(seed)
    floor = variance_floor_factor * float(x.var(axis=0).mean())
    floor = max(floor, np.finfo(np.float64).tiny)

    centers, labels = lloyd_kmeans(x, k, _INIT_KMEANS_ITERS, rng)
    weights = np.bincount(labels, minlength=k).astype(np.float64)
    weights = np.maximum(weights, 1.0)
    weights /= weights.sum()
    means = centers.copy()
    variances = np.empty((k, d))
    for j in range(k):
        sel = labels == j
        variances[j] = x[sel].var(axis=0) if sel.any() else x.var(axis=0)
    variances = np.maximum(variances, floor)
    model = GmmModel(weights=weights, means=means, variances=variances)

    trace: list[float] = []
    for iteration in range(max_iters):
        lg = log_component_densities(model, x) + np.log(model.weights)
        norm = _logsumexp(lg, axis=1, keepdims=True)
        trace.append(float(norm.mean()))
        gamma = np.exp(lg - norm)  # (T, K)

        nk = gamma.sum(axis=0)
        starved = nk < 1e-10
        model.weights = np.maximum(nk, 1e-300) / t
        model.weights /= model.weights.sum()
        safe_nk = np.maximum(nk, 1e-300)
        model.means = (gamma.T @ x) / safe_nk[:, None]
        second = (gamma.T @ (x * x)) / safe_nk[:, None]
        model.variances = np.maximum(second - model.means**2, floor)

        if starved.any():
            for j in np.nonzero(starved)[0]:
                logger.warning("re-seeding starved GMM component %d", j)
                model.means[j] = x[rng.integers(t)]
                model.variances[j] = np.maximum(x.var(axis=0), floor)
                model.weights[j] = 1.0 / t
            model.weights /= model.weights.sum()

        if len(trace) >= 2 and trace[-1] - trace[-2] < tol:
            break
    model.em_trace = trace
    return model


def fit_minibatch_kmeans(
    x: np.ndarray,
    k: int,
    batch_size: int = 1024,
    iters: int = 100,
    seed: int = 0,
) -> KmeansModel:
    """Mini-batch k-means: per-batch center updates with learning rate 1/count.

    Seeded k-means++ initialization; each batch is assigned against the
    current centers, then every sample pulls its center with step size
    1/(times that center was hit so far).
    """
    x = np.asarray(x, dtype=np.float64)
    t = x.shape[0]
    if t < k:
        raise ValueError(f"need at least {k} samples for {k} centers, got {t}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(x, k, rng)
    counts = np.zeros(k, dtype=np.int64)
    batch_size = min(batch_size, t)
    for _ in range(iters):
        batch = x[rng.choice(t, size=batch_size, replace=False)]
        assign = np.argmin(_squared_distances(batch, centers), axis=1)
        for row, j in enumerate(assign):
            counts[j] += 1
            eta = 1.0 / counts[j]
            centers[j] += eta * (batch[row] - centers[j])
    return KmeansModel(centers=centers)


def quantization_error(centers: np.ndarray, x: np.ndarray) -> float:
    """Mean squared distance of each sample to its nearest center."""
    return float(np.min(_squared_distances(np.asarray(x, dtype=np.float64), centers), axis=1).mean())
