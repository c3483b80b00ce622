"""Linear-projection queries and keys, matching scores, and the LDA projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sensing import GmmModel

ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class Projection:
    """Orthonormal ``l x d`` projection with the pairwise gains it induces."""

    rows: np.ndarray  # (l, d)
    gains: np.ndarray  # (Z, Z) symmetric, zero diagonal

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float)
        gains = np.array(self.gains, dtype=float)
        if rows.ndim != 2 or not 1 <= rows.shape[0] <= rows.shape[1]:
            raise ValueError("projection rows must be an (l, d) matrix with 1 <= l <= d")
        gram = rows @ rows.T
        if np.max(np.abs(gram - np.eye(rows.shape[0]))) > ORTHO_TOL:
            raise ValueError("projection rows are not orthonormal")
        if gains.ndim != 2 or gains.shape[0] != gains.shape[1]:
            raise ValueError("gains must be a square matrix")
        if np.any(gains < 0) or not np.allclose(gains, gains.T, rtol=0, atol=1e-12) \
                or np.any(np.diag(gains) != 0):
            raise ValueError("gains must be symmetric, nonnegative, zero on the diagonal")
        rows.setflags(write=False)
        gains.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "gains", gains)

    @property
    def query_dim(self) -> int:
        return self.rows.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.rows.shape[1]


def projected_gains(rows, model: GmmModel) -> np.ndarray:
    """G_ij = ‖P Σ^{-1/2} (μ_i - μ_j)‖² for every class pair."""
    a = model.whiten(model.centroids) @ np.asarray(rows, dtype=float).T  # (Z, l)
    diff = a[:, None, :] - a[None, :, :]
    g = np.sum(diff * diff, axis=-1)
    g = 0.5 * (g + g.T)
    np.fill_diagonal(g, 0.0)
    return g


def make_projection(rows, model: GmmModel) -> Projection:
    return Projection(rows, projected_gains(rows, model))


def _canonical_sign(vecs: np.ndarray) -> np.ndarray:
    # Make the first clearly nonzero entry of each column positive.
    out = vecs.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        idx = np.flatnonzero(np.abs(col) > 1e-12)
        if idx.size and col[idx[0]] < 0:
            out[:, k] = -col
    return out


def optimal_projection(model: GmmModel, query_dim: int) -> Projection:
    """Top-``query_dim`` eigenvectors of the whitened between-class scatter.

    W = Σ_i Σ^{-1/2}(μ_i - μ̄)(μ_i - μ̄)ᵀΣ^{-1/2}; its leading eigenvectors
    maximize the mean pairwise gain over all orthonormal ``l x d`` matrices.
    Eigenvectors are sorted by descending eigenvalue (stable in index on
    ties) and sign-normalized so the result is deterministic.
    """
    d = model.feature_dim
    if not 1 <= query_dim <= d:
        raise ValueError(f"query_dim must lie in [1, {d}]")
    centered = model.whiten(model.centroids - model.centroids.mean(axis=0))
    w = centered.T @ centered
    try:
        evals, evecs = np.linalg.eigh(w)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("symmetric eigendecomposition failed to converge") from exc
    order = np.argsort(-evals, kind="stable")
    evecs = _canonical_sign(evecs[:, order])
    return make_projection(evecs[:, :query_dim].T, model)


def projection_objective(projection: Projection) -> float:
    """Mean pairwise discriminant gain under the projection."""
    g = projection.gains
    z = g.shape[0]
    iu = np.triu_indices(z, k=1)
    return float(2.0 / (z * (z - 1)) * g[iu].sum())


def encode_query(x_q, projection: Projection, model: GmmModel) -> np.ndarray:
    """q = sqrt(d/l) P Σ^{-1/2} x_q; broadcasts over leading axes of ``x_q``."""
    l, d = projection.rows.shape
    return np.sqrt(d / l) * (model.whiten(x_q) @ projection.rows.T)


def encode_key(x_m, projection: Projection, model: GmmModel) -> np.ndarray:
    """Device key; the same map as :func:`encode_query`."""
    return encode_query(x_m, projection, model)


def matching_score(key, query, feature_dim: int):
    """exp(-‖k - q‖² / d).

    The exponent is normalized by the full feature dimension d, not l.
    """
    key = np.asarray(key, dtype=float)
    query = np.asarray(query, dtype=float)
    if key.shape[-1] != query.shape[-1]:
        raise ValueError("key and query must have the same length")
    diff = key - query
    out = np.exp(-np.sum(diff * diff, axis=-1) / feature_dim)
    return float(out) if np.ndim(out) == 0 else out


def save_projection(path, projection: Projection) -> None:
    """Write the projection rows as a row-major plain-text matrix."""
    np.savetxt(path, projection.rows, fmt="%.17g")


def load_projection(path, model: GmmModel) -> Projection:
    rows = np.loadtxt(path, dtype=float, ndmin=2)
    if rows.shape[1] != model.feature_dim:
        raise ValueError("projection file does not match the model feature dimension")
    return make_projection(rows, model)
