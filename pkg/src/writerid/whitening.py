"""ZCA/PCA whitening of activation features, followed by global L2 normalization.

The transform is fit once on the background (training) feature set and
reused unchanged for every other document or dataset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODES = ("zca", "pca")


@dataclass
class WhiteningTransform:
    mode: str  # "zca" or "pca"
    mean: np.ndarray  # (D,)
    projection: np.ndarray  # (D, D); symmetric for ZCA
    epsilon: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_whitening(x: np.ndarray, mode: str = "zca", epsilon: float = 1e-5) -> WhiteningTransform:
    """Fit a whitening transform on a (T, D) feature matrix.

    With the eigendecomposition C = U diag(e) U^T of the sample
    covariance (1/T normalization), the projection is
    diag(e + eps)^{-1/2} U^T for PCA (rows ordered by descending
    eigenvalue) and U diag(e + eps)^{-1/2} U^T for ZCA. ``epsilon``
    regularizes near-singular directions; ReLU features are sparse
    enough to need it.
    """
    mode = mode.lower()
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in whitening input")
    t = x.shape[0]
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / t
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    scale = 1.0 / np.sqrt(evals + epsilon)
    if mode == "pca":
        order = np.argsort(evals)[::-1]
        projection = scale[order, None] * evecs.T[order]
    else:
        projection = (evecs * scale) @ evecs.T
    return WhiteningTransform(mode=mode, mean=mean, projection=projection, epsilon=epsilon)


def apply_whitening(tf: WhiteningTransform, x: np.ndarray) -> np.ndarray:
    """Whiten rows of (T, D) and L2-normalize each to unit length.

    Rows that whiten to the zero vector (e.g. a patch with all-zero
    activations centered to the mean) are left as zero.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != tf.dim:
        raise ValueError(f"expected (T, {tf.dim}) features, got {x.shape}")
    y = (x - tf.mean) @ tf.projection.T
    norms = np.linalg.norm(y, axis=1)
    nz = norms > 0
    y[nz] /= norms[nz, None]
    return y
