"""Sparse and dense real linear algebra underneath the integrators.

The central object is :class:`SaddleFactorization`, a cached sparse LU
factorization of the indefinite block matrix

    [ S  B^T ]
    [ B   0  ]

which every stationary subproblem and the constrained flow evaluation
reduce to.  Matrices are carried as scipy CSR, vectors as 1-d numpy
arrays of float64.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import DimensionMismatch, SingularSaddle

__all__ = [
    "canonical_csr",
    "spmv",
    "SaddleFactorization",
    "assemble_saddle",
    "saddle_solve",
    "kernel_project",
    "require_spd",
    "read_matrix_market",
]

# Relative pivot threshold below which a factorization is declared singular.
PIVOT_RTOL = 1e-13


def canonical_csr(matrix) -> sp.csr_matrix:
    """Return ``matrix`` as a canonical CSR matrix.

    Canonical means: duplicates summed, explicit zeros dropped, column
    indices sorted within each row, all entries finite.
    """
    out = sp.csr_matrix(matrix, dtype=np.float64, copy=True)
    out.sum_duplicates()
    out.eliminate_zeros()
    out.sort_indices()
    if out.nnz and not np.isfinite(out.data).all():
        raise ValueError("sparse matrix contains non-finite entries")
    return out


def as_vector(x, length: int | None = None, name: str = "vector") -> np.ndarray:
    """Validate and convert ``x`` to a 1-d float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-d, got shape {v.shape}")
    if length is not None and v.shape[0] != length:
        raise DimensionMismatch(f"{name} has length {v.shape[0]}, expected {length}")
    return v


def spmv(matrix, v) -> np.ndarray:
    """Sparse matrix-vector product with dimension checking."""
    v = as_vector(v, name="spmv operand")
    if matrix.shape[1] != v.shape[0]:
        raise DimensionMismatch(
            f"matrix is {matrix.shape[0]}x{matrix.shape[1]}, vector has length {v.shape[0]}"
        )
    return matrix @ v


class SaddleFactorization:
    """Sparse LU factorization of ``[[S, B^T], [B, 0]]``.

    The factorization is computed once (fill-reducing column ordering,
    partial pivoting) and reused for every solve; it is read-only after
    construction, so concurrent solves against one factorization are
    fine.  Solves perform one step of iterative refinement when the
    first residual is not already at round-off.  The object keeps
    references to S and B so residuals and projections can be formed
    without re-assembly.

    Raises SingularSaddle if the block matrix is structurally singular
    or a pivot falls below ``PIVOT_RTOL`` times the largest entry,
    which signals a rank-deficient B or an S that is singular on the
    kernel of B.
    """

    def __init__(self, S, B, pivot_rtol: float = PIVOT_RTOL):
        self.S = canonical_csr(S)
        self.B = canonical_csr(B)
        n = self.S.shape[0]
        m = self.B.shape[0]
        if self.S.shape[1] != n:
            raise DimensionMismatch("S must be square")
        if self.B.shape[1] != n:
            raise DimensionMismatch("B must have as many columns as S")
        if m > n:
            raise DimensionMismatch("more constraint rows than unknowns")
        self.n = n
        self.m = m

        if m == 0:
            block = self.S
        else:
            block = sp.bmat(
                [[self.S, self.B.T], [self.B, None]], format="csr", dtype=np.float64
            )
        self._block = block
        scale = np.abs(block.data).max() if block.nnz else 0.0
        if scale == 0.0:
            raise SingularSaddle("saddle block matrix is all zero")
        try:
            self._lu = splu(block.tocsc(), permc_spec="COLAMD")
        except RuntimeError as exc:  # SuperLU signals exact singularity this way
            raise SingularSaddle(f"saddle factorization failed: {exc}") from exc
        pivots = np.abs(self._lu.U.diagonal())
        if pivots.min() < pivot_rtol * scale:
            raise SingularSaddle(
                f"pivot {pivots.min():.3e} below threshold {pivot_rtol * scale:.3e}"
            )

    def solve(self, rhs_primal, rhs_constraint) -> tuple[np.ndarray, np.ndarray]:
        """Solve S x + B^T mult = rhs_primal, B x = rhs_constraint."""
        rp = as_vector(rhs_primal, self.n, "rhs_primal")
        rc = as_vector(rhs_constraint, self.m, "rhs_constraint")
        rhs = np.concatenate([rp, rc]) if self.m else rp
        sol = self._lu.solve(rhs)
        # One refinement pass if the direct solve left a visible residual.
        res = rhs - self._block @ sol
        rhs_scale = np.linalg.norm(rhs)
        if rhs_scale > 0 and np.linalg.norm(res) > 1e-13 * rhs_scale:
            sol = sol + self._lu.solve(res)
        return sol[: self.n], sol[self.n :]

    def residual(self, x, mult, rhs_primal, rhs_constraint) -> tuple[float, float]:
        """Euclidean residual norms of the two block rows."""
        r1 = self.S @ x - rhs_primal
        if self.m:
            r1 = r1 + self.B.T @ mult
        r2 = self.B @ x - rhs_constraint if self.m else np.zeros(0)
        return float(np.linalg.norm(r1)), float(np.linalg.norm(r2))


def assemble_saddle(S, B) -> SaddleFactorization:
    """Factor the saddle block built from S (n x n) and B (m x n)."""
    return SaddleFactorization(S, B)


def saddle_solve(fact: SaddleFactorization, rhs_primal, rhs_constraint):
    """Functional wrapper around :meth:`SaddleFactorization.solve`."""
    return fact.solve(rhs_primal, rhs_constraint)


def kernel_project(fact: SaddleFactorization, x) -> np.ndarray:
    """S-orthogonal projection of ``x`` onto the kernel of B.

    ``fact`` must have been assembled from the inner-product matrix
    (typically the mass matrix) and B.  Solves S p + B^T mu = S x,
    B p = 0.
    """
    x = as_vector(x, fact.n, "x")
    if fact.m == 0:
        return x.copy()
    p, _ = fact.solve(fact.S @ x, np.zeros(fact.m))
    return p


def _band_width(mat: sp.csr_matrix) -> int:
    coo = mat.tocoo()
    if coo.nnz == 0:
        return 0
    return int(np.abs(coo.row - coo.col).max())


def require_spd(mat, name: str = "matrix", rtol: float = 1e-12) -> None:
    """Check symmetry and positive definiteness via a Cholesky factorization.

    Uses a dense factorization for small matrices and a banded one
    otherwise (the assembled mass matrices are narrow-band).
    """
    mat = canonical_csr(mat)
    n = mat.shape[0]
    if mat.shape[1] != n:
        raise DimensionMismatch(f"{name} must be square")
    scale = np.abs(mat.data).max() if mat.nnz else 0.0
    asym = sp.csr_matrix(mat - mat.T)
    asym_max = np.abs(asym.data).max() if asym.nnz else 0.0
    if asym_max > rtol * max(scale, 1.0):
        raise ValueError(f"{name} is not symmetric (deviation {asym_max:.3e})")
    try:
        if n <= 1200:
            scipy.linalg.cholesky(mat.toarray(), lower=False)
        else:
            p = _band_width(mat)
            ab = np.zeros((p + 1, n))
            coo = sp.triu(mat).tocoo()
            ab[p + coo.row - coo.col, coo.col] = coo.data
            scipy.linalg.cholesky_banded(ab, lower=False)
    except scipy.linalg.LinAlgError as exc:
        raise ValueError(f"{name} is not positive definite: {exc}") from exc


def read_matrix_market(path) -> sp.csr_matrix:
    """Read a real Matrix Market coordinate file.

    Supports the ``general`` and ``symmetric`` qualifiers; entries use
    1-based indices.  Returns a canonical CSR matrix.
    """
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip().lower().split()
        if len(header) != 5 or header[0] != "%%matrixmarket":
            raise ValueError("not a Matrix Market file")
        _, obj, fmt, field, symmetry = header
        if obj != "matrix" or fmt != "coordinate":
            raise ValueError(f"unsupported Matrix Market layout: {obj} {fmt}")
        if field != "real":
            raise ValueError(f"unsupported field type: {field}")
        if symmetry not in ("general", "symmetric"):
            raise ValueError(f"unsupported symmetry: {symmetry}")

        size_line = None
        for line in fh:
            stripped = line.strip()
            if not stripped or stripped.startswith("%"):
                continue
            size_line = stripped
            break
        if size_line is None:
            raise ValueError("missing size line")
        nrows, ncols, nnz = (int(tok) for tok in size_line.split())

        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=np.float64)
        k = 0
        for line in fh:
            stripped = line.strip()
            if not stripped or stripped.startswith("%"):
                continue
            if k >= nnz:
                raise ValueError("more entries than declared")
            i_tok, j_tok, v_tok = stripped.split()
            rows[k] = int(i_tok) - 1
            cols[k] = int(j_tok) - 1
            vals[k] = float(v_tok)
            k += 1
        if k != nnz:
            raise ValueError(f"expected {nnz} entries, found {k}")

    if symmetry == "symmetric":
        off = rows != cols
        rows, cols, vals = (
            np.concatenate([rows, cols[off]]),
            np.concatenate([cols, rows[off]]),
            np.concatenate([vals, vals[off]]),
        )
    return canonical_csr(sp.coo_matrix((vals, (rows, cols)), shape=(nrows, ncols)))
