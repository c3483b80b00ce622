"""Gaussian-mixture sensing world: centroids, scenarios, relevancy, fusion, MAP."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GmmModel:
    """Class-conditional Gaussians sharing one diagonal covariance.

    Classes are indexed ``0 .. num_classes - 1`` internally; the CLI and CSV
    outputs report them the same way.
    """

    centroids: np.ndarray  # (num_classes, feature_dim)
    cov_diag: np.ndarray  # (feature_dim,)

    def __post_init__(self):
        centroids = np.array(self.centroids, dtype=float)
        cov_diag = np.array(self.cov_diag, dtype=float)
        if centroids.ndim != 2 or centroids.shape[0] < 2:
            raise ValueError("centroids must be a (num_classes >= 2, d) array")
        if cov_diag.ndim != 1:
            raise ValueError("cov_diag must be the diagonal of the covariance (1-D); "
                             "general covariance matrices are not supported")
        if cov_diag.shape[0] != centroids.shape[1]:
            raise ValueError("cov_diag length must equal the feature dimension")
        if not np.all(np.isfinite(centroids)):
            raise ValueError("centroids must be finite")
        if not np.all(np.isfinite(cov_diag)) or np.any(cov_diag <= 0):
            raise ValueError("all variances must be strictly positive")
        centroids.setflags(write=False)
        cov_diag.setflags(write=False)
        object.__setattr__(self, "centroids", centroids)
        object.__setattr__(self, "cov_diag", cov_diag)

    @property
    def num_classes(self) -> int:
        return self.centroids.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centroids.shape[1]

    @classmethod
    def isotropic(cls, centroids, variance: float) -> "GmmModel":
        centroids = np.asarray(centroids, dtype=float)
        return cls(centroids, np.full(centroids.shape[1], float(variance)))

    def whiten(self, x):
        """Map features to Σ^{-1/2} x (broadcasts over leading axes)."""
        return np.asarray(x, dtype=float) / np.sqrt(self.cov_diag)


@dataclass(frozen=True)
class Scenario:
    query_class: int
    device_classes: np.ndarray  # (M,)
    query_feature: np.ndarray  # (d,)
    device_features: np.ndarray  # (M, d)


def build_centroids(num_classes: int, feature_dim: int) -> np.ndarray:
    """±1 block centroids: class i is -1 on its own contiguous block of entries.

    With 1-based indices, entry j of centroid i is -1 when
    ``floor(d (i-1) / Z) < j <= floor(d i / Z)`` and +1 otherwise.
    """
    if num_classes <= 0 or feature_dim <= 0:
        raise ValueError("num_classes and feature_dim must be positive")
    if feature_dim < num_classes:
        warnings.warn("feature_dim < num_classes: some centroids will coincide",
                      stacklevel=2)
    mu = np.ones((num_classes, feature_dim))
    j = np.arange(1, feature_dim + 1)
    for i in range(1, num_classes + 1):
        lo = (feature_dim * (i - 1)) // num_classes
        hi = (feature_dim * i) // num_classes
        mu[i - 1, (j > lo) & (j <= hi)] = -1.0
    return mu


def pairwise_mahalanobis(centroids, cov_diag) -> np.ndarray:
    """Matrix of (μ_i - μ_j)ᵀ Σ⁻¹ (μ_i - μ_j)."""
    w = np.asarray(centroids, dtype=float) / np.sqrt(np.asarray(cov_diag, dtype=float))
    sq = np.sum(w * w, axis=1)
    g = sq[:, None] + sq[None, :] - 2.0 * w @ w.T
    g = np.maximum(g, 0.0)
    np.fill_diagonal(g, 0.0)
    return g


def average_discriminant_gain(model: GmmModel) -> float:
    """Mean over unordered class pairs of the squared Mahalanobis centroid distance."""
    g = pairwise_mahalanobis(model.centroids, model.cov_diag)
    z = model.num_classes
    iu = np.triu_indices(z, k=1)
    return float(2.0 / (z * (z - 1)) * g[iu].sum())


def calibrate_covariance(centroids, target_gain: float) -> float:
    """Scalar variance C such that Σ = C·I yields the requested average gain.

    The average gain scales as 1/C, so C = Ḡ(C=1) / target.
    """
    if not target_gain > 0:
        raise ValueError("target_gain must be > 0")
    centroids = np.asarray(centroids, dtype=float)
    base = average_discriminant_gain(GmmModel.isotropic(centroids, 1.0))
    if base == 0.0:
        raise ValueError("degenerate centroids: all classes coincide")
    return base / target_gain


def reference_model(num_classes: int = 21, feature_dim: int = 75,
                    target_gain: float = 40.0) -> GmmModel:
    """Block-centroid model with isotropic covariance tuned to ``target_gain``.

    ``target_gain == 0`` gives the degenerate model where every class shares
    the same centroid (unit variance).
    """
    if target_gain == 0:
        return GmmModel.isotropic(np.ones((num_classes, feature_dim)), 1.0)
    mu = build_centroids(num_classes, feature_dim)
    return GmmModel.isotropic(mu, calibrate_covariance(mu, target_gain))


def draw_classes(num_classes: int, num_devices: int, p_pos: float, rng):
    """Query class and device classes (device = query w.p. p_pos, else uniform other)."""
    zq = int(rng.integers(num_classes))
    hit = rng.random(num_devices) < p_pos
    other = rng.integers(num_classes - 1, size=num_devices)
    other = other + (other >= zq)
    return zq, np.where(hit, zq, other)


def sample_scenario(model: GmmModel, num_devices: int, p_pos: float, rng) -> Scenario:
    if not 0.0 <= p_pos <= 1.0:
        raise ValueError("p_pos must lie in [0, 1]")
    if num_devices < 0:
        raise ValueError("num_devices must be >= 0")
    zq, zm = draw_classes(model.num_classes, num_devices, p_pos, rng)
    sd = np.sqrt(model.cov_diag)
    d = model.feature_dim
    noise = rng.standard_normal((num_devices + 1, d)) * sd
    xq = model.centroids[zq] + noise[0]
    xm = model.centroids[zm] + noise[1:]
    return Scenario(zq, zm, xq, xm)


def mahalanobis_sq(a, b, cov_diag):
    """Squared Mahalanobis distance under a diagonal covariance (broadcasting)."""
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return np.sum(diff * diff / np.asarray(cov_diag, dtype=float), axis=-1)


def relevancy_score(x_m, x_q, model: GmmModel):
    """exp(-ξ_Σ(x_m, x_q) / d)."""
    xi = mahalanobis_sq(x_m, x_q, model.cov_diag)
    out = np.exp(-xi / model.feature_dim)
    return float(out) if np.ndim(out) == 0 else out


def fuse_features(features, weights) -> np.ndarray:
    """Weight-normalized average of the received feature vectors."""
    features = np.asarray(features, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("cannot fuse an empty set of features")
    if weights.shape != (features.shape[0],):
        raise ValueError("one weight per feature vector is required")
    if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
        raise ValueError("weights must be finite and strictly positive")
    return weights @ features / weights.sum()


def fused_covariance_scale(weights) -> float:
    """Σ̂ = s·Σ with s = Σ w² / (Σ w)²."""
    w = np.asarray(weights, dtype=float)
    return float(np.sum(w * w) / np.sum(w) ** 2)


def class_posterior(fused, weights, model: GmmModel) -> np.ndarray:
    """p_pred(z | x̄) under the fused-observation covariance Σ̂."""
    scale = fused_covariance_scale(weights)
    xi = mahalanobis_sq(fused[None, :], model.centroids, model.cov_diag) / scale
    logits = -0.5 * xi
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def map_classify(fused, weights, model: GmmModel) -> int:
    """MAP class of the fused vector; ties go to the lowest class index.

    Σ̂ is a positive multiple of Σ, so the arg-max of the posterior is the
    nearest centroid in Σ-Mahalanobis distance and ``weights`` only matter
    for :func:`class_posterior`.
    """
    fused_covariance_scale(weights)  # validates weights
    xi = mahalanobis_sq(np.asarray(fused, dtype=float)[None, :], model.centroids,
                        model.cov_diag)
    return int(np.argmin(xi))
