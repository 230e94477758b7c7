"""Aggregate a document's local descriptors into one global vector.

The main encoder adapts the background GMM means to the document
(mean-only MAP with relevance factor tau), concatenates them into a
K*D supervector and normalizes each component block with the
KL kernel sqrt(w_k) * var_k^{-1/2} * mu_k. SSR+L2 supervectors, VLAD and
Fisher vectors are provided as baseline encoders.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from writerid.gmm import GmmModel, KmeansModel, _logsumexp, log_component_densities

logger = logging.getLogger(__name__)

DEFAULT_TAU = 68.0
DEFAULT_TOP_C = 10

ENCODERS = ("sv_kl", "sv_ssr", "vlad", "fisher")


class EmptyDocumentError(ValueError):
    """A document produced no descriptors to encode."""


@dataclass(frozen=True)
class EncoderParams:
    tau: float = DEFAULT_TAU
    top_c: int = DEFAULT_TOP_C
    renormalize_truncated: bool = True
    normalization: str = "kl"  # "kl" or "ssr_l2"
    power: float = 0.5

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.top_c < 1:
            raise ValueError("top_c must be >= 1")
        if self.normalization not in ("kl", "ssr_l2"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass
class GlobalDescriptor:
    vector: np.ndarray
    doc_id: str = ""
    writer_id: str = ""
    encoder: str = ""


def posteriors(
    gmm: GmmModel,
    x: np.ndarray,
    top_c: int | None = DEFAULT_TOP_C,
    renormalize: bool = True,
) -> np.ndarray:
    """Per-descriptor component posteriors gamma_t(k), truncated to the top_c largest.

    Computed in log space (log-sum-exp), so rows sum to 1 before
    truncation. All but the ``top_c`` largest entries of each row are
    set to zero (ties keep the lower component index); with
    ``renormalize`` the surviving entries are rescaled to sum to 1.
    ``top_c=None`` disables truncation. Returned dense (T, K).
    """
    lg = log_component_densities(gmm, x) + np.log(gmm.weights)
    gamma = np.exp(lg - _logsumexp(lg, axis=1, keepdims=True))
    k = gmm.n_components
    if top_c is None or top_c >= k:
        return gamma
    # stable argsort on -gamma keeps the lower index among equal values
    order = np.argsort(-gamma, axis=1, kind="stable")
    cut = order[:, top_c:]
    np.put_along_axis(gamma, cut, 0.0, axis=1)
    if renormalize:
        sums = gamma.sum(axis=1, keepdims=True)
        gamma /= sums
    return gamma


def map_adapt_means(gmm: GmmModel, x: np.ndarray, gamma: np.ndarray, tau: float) -> np.ndarray:
    """Mean-only MAP adaptation of the GMM to one document's descriptors.

    With soft counts n_k = sum_t gamma_t(k) and first-order statistics
    mu_hat_k = (1/n_k) sum_t gamma_t(k) x_t, each mean is mixed as
    mu_tilde_k = alpha_k mu_hat_k + (1 - alpha_k) mu_k with
    alpha_k = n_k / (n_k + tau). Components with n_k = 0 keep the
    background mean.
    """
    x = np.asarray(x, dtype=np.float64)
    nk = gamma.sum(axis=0)  # (K,)
    stats = gamma.T @ x  # (K, D)
    adapted = gmm.means.astype(np.float64).copy()
    active = nk > 0
    mu_hat = stats[active] / nk[active, None]
    if tau == 0:
        alpha = np.ones(active.sum())
    else:
        alpha = nk[active] / (nk[active] + tau)
    adapted[active] = alpha[:, None] * mu_hat + (1.0 - alpha[:, None]) * gmm.means[active]
    return adapted


def _ssr(v: np.ndarray, power: float = 0.5) -> np.ndarray:
    return np.sign(v) * np.abs(v) ** power


def _l2(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def supervector(
    adapted_means: np.ndarray,
    gmm: GmmModel,
    params: EncoderParams = EncoderParams(),
    doc_id: str = "",
    writer_id: str = "",
) -> GlobalDescriptor:
    """Concatenate adapted means into a K*D supervector and normalize it.

    KL mode scales each component block by sqrt(w_k) and elementwise by
    the inverse standard deviation of the background component (the
    kernel induced by the symmetrized KL divergence between adapted and
    background mixtures); no further L2 step, cosine retrieval is
    scale-invariant. SSR mode applies signed power 0.5 then L2 over the
    plain concatenation.
    """
    if adapted_means.shape != (gmm.n_components, gmm.dim):
        raise ValueError(
            f"adapted means shape {adapted_means.shape} does not match GMM "
            f"({gmm.n_components}, {gmm.dim})"
        )
    if params.normalization == "kl":
        if np.any(gmm.variances <= 0):
            raise ValueError("non-positive GMM variance")
        blocks = np.sqrt(gmm.weights)[:, None] * adapted_means / np.sqrt(gmm.variances)
        vec = blocks.reshape(-1)
        tag = "sv_kl"
    else:
        vec = _l2(_ssr(adapted_means.reshape(-1), params.power))
        tag = "sv_ssr"
    return GlobalDescriptor(vector=vec, doc_id=doc_id, writer_id=writer_id, encoder=tag)


def encode_supervector(
    gmm: GmmModel,
    x: np.ndarray,
    params: EncoderParams = EncoderParams(),
    doc_id: str = "",
    writer_id: str = "",
) -> GlobalDescriptor:
    """Full supervector encoding of one document: posteriors, MAP, normalization."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyDocumentError(f"document {doc_id!r} has no descriptors")
    gamma = posteriors(gmm, x, top_c=params.top_c, renormalize=params.renormalize_truncated)
    adapted = map_adapt_means(gmm, x, gamma, params.tau)
    return supervector(adapted, gmm, params, doc_id=doc_id, writer_id=writer_id)


def encode_vlad(
    kmeans: KmeansModel,
    x: np.ndarray,
    power: float = 0.5,
    doc_id: str = "",
    writer_id: str = "",
) -> GlobalDescriptor:
    """VLAD: sum of residuals to the nearest center, hard assignment.

    Each descriptor is assigned to its nearest center (Euclidean, ties
    to the lower index), residuals are summed per center, concatenated,
    then SSR(power)+L2 normalized.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyDocumentError(f"document {doc_id!r} has no descriptors")
    centers = kmeans.centers
    d2 = (
        np.sum(x * x, axis=1)[:, None] - 2.0 * x @ centers.T + np.sum(centers * centers, axis=1)
    )
    assign = np.argmin(d2, axis=1)  # first minimum = lower index on ties
    k, d = centers.shape
    blocks = np.zeros((k, d))
    np.add.at(blocks, assign, x)
    counts = np.bincount(assign, minlength=k)
    blocks -= counts[:, None] * centers
    vec = _l2(_ssr(blocks.reshape(-1), power))
    return GlobalDescriptor(vector=vec, doc_id=doc_id, writer_id=writer_id, encoder="vlad")


def encode_fisher(
    gmm: GmmModel,
    x: np.ndarray,
    power: float = 0.5,
    doc_id: str = "",
    writer_id: str = "",
) -> GlobalDescriptor:
    """Normalized Fisher vector (mean and variance gradients), length 2*K*D.

    G_mu_k = 1/(T sqrt(w_k)) * sum_t gamma_t(k) (x_t - mu_k)/sigma_k and
    G_var_k = 1/(T sqrt(2 w_k)) * sum_t gamma_t(k) [((x_t - mu_k)/sigma_k)^2 - 1]
    with sigma_k the per-dimension standard deviation; posteriors are
    not truncated here. SSR(power)+L2 applied to the concatenation.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyDocumentError(f"document {doc_id!r} has no descriptors")
    t = x.shape[0]
    gamma = posteriors(gmm, x, top_c=None)
    std = np.sqrt(gmm.variances)  # (K, D)

    nk = gamma.sum(axis=0)  # (K,)
    s1 = gamma.T @ x  # (K, D)
    s2 = gamma.T @ (x * x)
    # sum_t gamma (x - mu)/std and sum_t gamma [((x - mu)/std)^2 - 1]
    g_mu = (s1 - nk[:, None] * gmm.means) / std
    g_var = (s2 - 2.0 * gmm.means * s1 + nk[:, None] * gmm.means**2) / gmm.variances - nk[:, None]
    g_mu /= t * np.sqrt(gmm.weights)[:, None]
    g_var /= t * np.sqrt(2.0 * gmm.weights)[:, None]
    vec = _l2(_ssr(np.concatenate([g_mu.reshape(-1), g_var.reshape(-1)]), power))
    return GlobalDescriptor(vector=vec, doc_id=doc_id, writer_id=writer_id, encoder="fisher")
