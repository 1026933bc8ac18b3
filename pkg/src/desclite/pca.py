"""PCA baseline: covariance eigendecomposition projection.

Model file format "DPC1" (little-endian): magic, u32 D, u32 d, D f64 mean,
then the D x d basis in column-major order as f64.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._binio import read_file, u32_bytes, write_atomic
from .data import DescriptorSet
from .errors import ConfigError, ShapeError
from .numerics import sym_eigen

_NORM_EPS = 1e-12


@dataclass
class PcaModel:
    mean: np.ndarray          # (D,)
    basis: np.ndarray         # (D, d), columns are principal directions
    input_dim: int
    output_dim: int
    eigenvalues: np.ndarray | None = None  # full spectrum from the fit, if known


def fit_pca(train: DescriptorSet, d: int) -> PcaModel:
    """Top-d principal directions of the sample covariance (divisor N-1).

    Columns are ordered by descending eigenvalue, with the sign fixed so each
    column's largest-magnitude entry is positive. A covariance with fewer
    than d positive eigenvalues triggers a warning and the basis is padded
    with the remaining (zero-variance) eigenvectors.
    """
    x = train.descriptors
    n, dim = x.shape
    if n < 2:
        raise ConfigError(f"fit_pca needs at least 2 rows, got {n}")
    if not 1 <= d <= dim:
        raise ConfigError(f"target dim must be in [1, {dim}], got {d}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = (centered.T @ centered) / (n - 1)
    eig = sym_eigen(cov)
    if np.sum(eig.eigenvalues > 0.0) < d:
        warnings.warn(
            f"covariance has fewer than {d} positive eigenvalues; "
            "basis padded with zero-variance directions",
            RuntimeWarning,
            stacklevel=2,
        )
    basis = eig.eigenvectors[:, :d].copy()
    for j in range(d):
        col = basis[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            basis[:, j] = -col
    return PcaModel(
        mean=mean,
        basis=basis,
        input_dim=dim,
        output_dim=d,
        eigenvalues=eig.eigenvalues.copy(),
    )


def pca_transform(model: PcaModel, dset: DescriptorSet,
                  normalize: bool = True) -> DescriptorSet:
    """Project rows onto the basis after centering; L2-normalized by default
    so PCA outputs face the same evaluation as the MLP embeddings."""
    if dset.dim != model.input_dim:
        raise ShapeError(
            f"descriptor dim {dset.dim} does not match PCA input dim {model.input_dim}"
        )
    z = (dset.descriptors - model.mean) @ model.basis
    if normalize:
        norms = np.linalg.norm(z, axis=1)
        zero = norms < _NORM_EPS
        safe = np.where(zero, 1.0, norms)
        z = z / safe[:, None]
        z[zero] = 0.0
    return DescriptorSet(
        descriptors=z,
        labels=dset.labels.copy(),
        sequence_ids=dset.sequence_ids.copy(),
        tiers=None if dset.tiers is None else dset.tiers.copy(),
        normalized=normalize,
    )


def save_pca(model: PcaModel, path: str) -> None:
    parts = [
        b"DPC1",
        u32_bytes(model.input_dim),
        u32_bytes(model.output_dim),
        model.mean.astype("<f8").tobytes(),
        np.asfortranarray(model.basis.astype("<f8")).tobytes(order="F"),
    ]
    write_atomic(path, b"".join(parts))


def load_pca(path: str) -> PcaModel:
    r = read_file(path)
    r.magic(b"DPC1")
    big_d = r.u32("input dim")
    small_d = r.u32("output dim")
    mean = r.array("<f8", big_d, "mean").astype(np.float64)
    basis = r.array("<f8", big_d * small_d, "basis").astype(np.float64)
    r.expect_end()
    return PcaModel(
        mean=mean,
        basis=basis.reshape(small_d, big_d).T.copy(),
        input_dim=big_d,
        output_dim=small_d,
        eigenvalues=None,
    )
