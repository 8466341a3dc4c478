"""Dense symmetric-matrix kernels shared by the numeric modules.

Everything here operates on plain numpy arrays. Inputs are treated as symmetric:
only one triangle is authoritative and results are explicitly symmetrized, so
callers never have to worry about round-off asymmetry accumulating through
products. Eigen-based routines are backed by LAPACK via numpy with a
deterministic sign convention layered on top.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DEFAULT, NumericConfig
from .errors import InvalidInput, NotPSD, SingularMatrix


def as_symmetric(m) -> np.ndarray:
    """Validate a square, finite matrix and return its symmetrized copy."""
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInput(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] < 1:
        raise InvalidInput("matrix must have dimension >= 1")
    if not np.all(np.isfinite(a)):
        raise InvalidInput("matrix has non-finite entries")
    return 0.5 * (a + a.T)


def frob(a: np.ndarray) -> float:
    return float(np.linalg.norm(a, "fro"))


@dataclass(frozen=True)
class EigenPair:
    """Eigendecomposition of a symmetric matrix.

    ``values`` are sorted descending; ``vectors`` holds the matching orthonormal
    eigenvectors as columns, each signed so its first non-negligible component
    is positive.
    """

    values: np.ndarray
    vectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def reconstruct(self) -> np.ndarray:
        q = self.vectors
        return (q * self.values) @ q.T


def sym_eigen(m, config: NumericConfig = DEFAULT) -> EigenPair:
    """Full eigendecomposition of a symmetric matrix, descending order.

    The sign convention (first component of each eigenvector with magnitude
    above 1e-12 made positive) makes repeated calls on equal inputs return
    identical output, which the seeded reproducibility contracts rely on.
    """
    a = as_symmetric(m)
    values, vectors = np.linalg.eigh(a)
    order = np.argsort(values)[::-1]
    values = np.ascontiguousarray(values[order])
    vectors = np.ascontiguousarray(vectors[:, order])
    for j in range(vectors.shape[1]):
        col = vectors[:, j]
        nonzero = np.flatnonzero(np.abs(col) > 1e-12)
        lead = nonzero[0] if nonzero.size else int(np.argmax(np.abs(col)))
        if col[lead] < 0.0:
            vectors[:, j] = -col
    return EigenPair(values=values, vectors=vectors)


def psd_factor(m, tol: float | None = None, config: NumericConfig = DEFAULT) -> np.ndarray:
    """Factor a PSD matrix as L @ L.T.

    Strictly positive definite inputs get the Cholesky factor; semidefinite ones
    fall back to the eigenvalue square root with slightly negative eigenvalues
    (within ``tol * ||M||_F``) clamped to zero.
    """
    a = as_symmetric(m)
    if tol is None:
        tol = config.psd_tol
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    pair = sym_eigen(a, config)
    scale = frob(a)
    floor = -tol * scale if scale > 0.0 else -tol
    min_eig = float(pair.values[-1])
    if min_eig < floor:
        raise NotPSD(
            f"matrix is not positive semidefinite: min eigenvalue {min_eig:.3e} "
            f"below tolerance {floor:.3e}"
        )
    clamped = np.clip(pair.values, 0.0, None)
    return pair.vectors * np.sqrt(clamped)


def spd_inverse(m, config: NumericConfig = DEFAULT) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix."""
    a = as_symmetric(m)
    pair = sym_eigen(a, config)
    min_eig = float(pair.values[-1])
    scale = frob(a)
    if min_eig <= config.singular_rtol * scale:
        raise SingularMatrix(
            f"matrix is singular to working precision (min eigenvalue {min_eig:.3e})",
            min_eigenvalue=min_eig,
        )
    q = pair.vectors
    inv = (q / pair.values) @ q.T
    return 0.5 * (inv + inv.T)


def sym_power(m, q: float, config: NumericConfig = DEFAULT) -> np.ndarray:
    """Matrix power M^q of a symmetric positive definite matrix.

    Non-integer powers require a strictly positive spectrum; a rank-deficient
    input is rejected rather than silently regularized.
    """
    a = as_symmetric(m)
    pair = sym_eigen(a, config)
    min_eig = float(pair.values[-1])
    scale = frob(a)
    if min_eig <= config.singular_rtol * scale:
        raise SingularMatrix(
            f"matrix power {q} requires a positive definite input "
            f"(min eigenvalue {min_eig:.3e})",
            min_eigenvalue=min_eig,
        )
    p = pair.vectors
    out = (p * pair.values**q) @ p.T
    return 0.5 * (out + out.T)


def trace_prod(a, b) -> float:
    """Trace of the product of two symmetric matrices, computed as sum(A * B)."""
    am = np.asarray(a, dtype=float)
    bm = np.asarray(b, dtype=float)
    if am.shape != bm.shape or am.ndim != 2 or am.shape[0] != am.shape[1]:
        raise InvalidInput(f"dimension mismatch: {am.shape} vs {bm.shape}")
    return float(np.sum(am * bm))


def log_det_spd(m, config: NumericConfig = DEFAULT) -> float:
    """log det of a symmetric positive definite matrix via its spectrum."""
    a = as_symmetric(m)
    pair = sym_eigen(a, config)
    min_eig = float(pair.values[-1])
    if min_eig <= config.singular_rtol * max(frob(a), 1e-300):
        raise SingularMatrix(
            f"log-determinant undefined: min eigenvalue {min_eig:.3e}",
            min_eigenvalue=min_eig,
        )
    return float(np.sum(np.log(pair.values)))
