"""Evaluation metrics, collapse diagnostics, and compression baselines."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .basis import BasisSet
from .bench import format_float
from .cluster import kmeans
from .errors import ConfigError, DataError, ShapeError
from .nn import ParamVector
from .rng import RngSeed, stream


def personalized_accuracy(
    predictions: np.ndarray, labels: np.ndarray, label_distribution: np.ndarray
) -> float:
    """Accuracy with each test sample weighted by the client's frequency of
    its true class: ``sum_j P(y_j) 1[y_j = yhat_j] / sum_j P(y_j)``."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError("predictions and labels must have equal length")
    weights = np.asarray(label_distribution, dtype=np.float64)[labels]
    denom = weights.sum()
    if denom <= 0.0:
        raise DataError(
            "personalized accuracy undefined: none of the client's classes "
            "appear in the test set"
        )
    return float((weights * (predictions == labels)).sum() / denom)


def global_accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Plain unweighted accuracy."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError("predictions and labels must have equal length")
    return float((predictions == labels).mean())


def mean_pairwise_cosine(basis_set: BasisSet) -> float:
    """Mean cosine similarity over unordered basis pairs (major excluded)."""
    k = basis_set.k
    if k < 2:
        raise ConfigError("pairwise cosine needs at least two bases")
    vectors = basis_set.stacked()
    norms = np.linalg.norm(vectors, axis=1)
    if (norms == 0.0).any():
        raise DataError("cosine similarity undefined for a zero-norm basis")
    unit = vectors / norms[:, None]
    gram = unit @ unit.T
    upper = gram[np.triu_indices(k, k=1)]
    return float(upper.mean())


def alpha_entropy(coefficient_rows: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of simplex rows, with 0*ln(0) = 0."""
    rows = np.atleast_2d(np.asarray(coefficient_rows, dtype=np.float64))
    if (rows < -1e-12).any() or (np.abs(rows.sum(axis=1) - 1.0) > 1e-9).any():
        raise ShapeError("coefficient rows must lie on the simplex")
    safe = np.where(rows > 0.0, rows, 1.0)
    per_row = -(rows * np.log(safe)).sum(axis=1)
    return float(per_row.mean())


@dataclass(frozen=True)
class PcaResult:
    reconstructed: list[ParamVector]
    explained_variance_ratio: float


def pca_compress(models: list[ParamVector], k: int) -> PcaResult:
    """Reconstruct each model from its top-k principal components.

    Principal directions come from the eigendecomposition of the small
    (M x M) Gram matrix of centered model vectors, which is equivalent to
    PCA on the huge parameter covariance when M << P.
    """
    m = len(models)
    if not 1 <= k <= m:
        raise ConfigError(f"component count must be in [1, {m}], got {k}")
    block_spec = models[0].block_spec
    x = np.stack([mod.values for mod in models])  # (M, P)
    mean = x.mean(axis=0)
    centered = x - mean

    gram = centered @ centered.T
    eigvals, eigvecs = np.linalg.eigh(gram)  # ascending
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]

    top = eigvecs[:, :k]
    reconstructed_rows = mean + top @ (top.T @ centered)
    total = eigvals.sum()
    ratio = 1.0 if total == 0.0 else float(eigvals[:k].sum() / total)
    return PcaResult(
        reconstructed=[ParamVector(row, block_spec) for row in reconstructed_rows],
        explained_variance_ratio=min(ratio, 1.0),
    )


def kmeans_compress(
    models: list[ParamVector], k: int, seed: RngSeed
) -> tuple[np.ndarray, list[ParamVector]]:
    """Replace each model by its k-means centroid; returns (assignments, centroids)."""
    if k > len(models):
        raise ConfigError(f"k={k} exceeds the {len(models)} models")
    block_spec = models[0].block_spec
    x = np.stack([mod.values for mod in models])
    assign, centroids, _ = kmeans(x, k, stream(seed, "kmeans_compress"))
    return assign, [ParamVector(c, block_spec) for c in centroids]


def coefficient_heatmap_csv(
    entries: list[tuple[str, str, np.ndarray]], block_names: list[str]
) -> str:
    """CSV of per-client combination coefficients.

    ``entries`` holds (client_id, domain, coefficient matrix) triples; one
    output row per (client, block, basis index).
    """
    out = io.StringIO()
    out.write("client_id,domain,block,basis,coefficient\n")
    for client_id, domain, alpha in entries:
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.shape[0] != len(block_names):
            raise ShapeError(
                f"client {client_id!r}: {alpha.shape[0]} coefficient rows for "
                f"{len(block_names)} blocks"
            )
        for b, name in enumerate(block_names):
            for j in range(alpha.shape[1]):
                out.write(
                    f"{client_id},{domain},{name},{j},{format_float(alpha[b, j])}\n"
                )
    return out.getvalue()
