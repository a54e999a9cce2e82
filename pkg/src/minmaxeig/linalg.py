"""Sparse symmetric storage and the shared linear-algebra kernels.

A problem is given by symmetric matrices A_1, ..., A_m (plus an optional
offset matrix B and linear term c).  Everything downstream needs four
primitives built here: mat-vec with a stored upper triangle, assembly of
the combination sum_j x_j A_j on a common pattern, the adjoint map
Y -> [Tr(A_1 Y); ...; Tr(A_m Y)], and eigenvalue estimation (Power method
for the large/sparse path, a dense eigendecomposition for verification and
for the exact scaled-exponential map).
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "SparseSymMatrix",
    "ProblemInstance",
    "PowerResult",
    "LipschitzEstimate",
    "as_dense_sym",
    "spmv",
    "assemble_combination",
    "adjoint_apply",
    "power_method",
    "power_method_lmax",
    "spectral_range",
    "exact_density",
    "lipschitz_constant",
]


def as_dense_sym(a, tol: float = 1e-12) -> np.ndarray:
    """Validate a dense symmetric matrix and return its symmetrized copy."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    scale = np.abs(a).max() if a.size else 0.0
    if np.abs(a - a.T).max(initial=0.0) > tol * (1.0 + scale):
        raise ValueError("matrix is not symmetric within tolerance")
    return 0.5 * (a + a.T)


class SparseSymMatrix:
    """Symmetric matrix stored as its upper triangle in coordinate form.

    Only entries with row <= col are stored; applications reflect the
    triangle.  Instances are immutable after construction (the index and
    value arrays are frozen), so they are safe to share across threads.
    """

    def __init__(self, n, rows, cols, values, pattern_id=None, validate=True):
        self.n = int(n)
        self.rows = np.array(rows, dtype=np.int64, copy=True)
        self.cols = np.array(cols, dtype=np.int64, copy=True)
        self.values = np.array(values, dtype=np.float64, copy=True)
        self.pattern_id = pattern_id
        self._csr = None
        if validate:
            self._validate()
        for arr in (self.rows, self.cols, self.values):
            arr.flags.writeable = False

    def _validate(self):
        if not (self.rows.shape == self.cols.shape == self.values.shape):
            raise ValueError("rows, cols and values must have equal length")
        if self.n < 1:
            raise ValueError("dimension must be positive")
        if self.rows.size:
            if self.rows.min() < 0 or self.cols.max() >= self.n:
                raise ValueError("entry index out of range")
            if np.any(self.rows > self.cols):
                raise ValueError("entries must lie in the upper triangle (row <= col)")
            key = self.rows * self.n + self.cols
            if np.unique(key).size != key.size:
                raise ValueError("duplicate (row, col) entry")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values must be finite")

    @property
    def nnz(self) -> int:
        """Stored (upper-triangle) entry count."""
        return self.values.size

    @property
    def nnz_full(self) -> int:
        """Nonzero count of the full symmetric matrix."""
        return self.values.size + int(np.count_nonzero(self.rows != self.cols))

    def csr(self) -> sp.csr_matrix:
        """Full symmetric matrix in CSR form (built lazily, cached)."""
        if self._csr is None:
            off = self.rows != self.cols
            r = np.concatenate([self.rows, self.cols[off]])
            c = np.concatenate([self.cols, self.rows[off]])
            v = np.concatenate([self.values, self.values[off]])
            self._csr = sp.coo_matrix((v, (r, c)), shape=(self.n, self.n)).tocsr()
        return self._csr

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.csr() @ v

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        out[self.rows, self.cols] = self.values
        off = self.rows != self.cols
        out[self.cols[off], self.rows[off]] = self.values[off]
        return out

    def add_to(self, out: np.ndarray, scale: float = 1.0) -> np.ndarray:
        """Accumulate ``scale * self`` into the dense array ``out`` in place."""
        out[self.rows, self.cols] += scale * self.values
        off = self.rows != self.cols
        out[self.cols[off], self.rows[off]] += scale * self.values[off]
        return out

    @classmethod
    def identity(cls, n: int) -> "SparseSymMatrix":
        idx = np.arange(n)
        return cls(n, idx, idx, np.ones(n))

    @classmethod
    def from_diag(cls, diag) -> "SparseSymMatrix":
        diag = np.asarray(diag, dtype=np.float64)
        idx = np.arange(diag.size)
        return cls(diag.size, idx, idx, diag)

    @classmethod
    def from_dense(cls, a, tol: float = 1e-12, keep_zeros: bool = False) -> "SparseSymMatrix":
        a = as_dense_sym(a, tol)
        r, c = np.triu_indices(a.shape[0])
        vals = a[r, c]
        if not keep_zeros:
            nz = vals != 0.0
            r, c, vals = r[nz], c[nz], vals[nz]
        return cls(a.shape[0], r, c, vals)


class ProblemInstance:
    """The family {A_j}, optional offset B and linear term c.

    Matrices with a shared sparsity pattern are exploited through a single
    index structure plus one value array per matrix; heterogeneous inputs
    fall back to the union pattern.  The Lipschitz bound (max spectral norm
    of the A_j) is cached write-once.
    """

    def __init__(self, matrices: Sequence[SparseSymMatrix], B=None, c=None,
                 lipschitz=None, meta=None):
        matrices = list(matrices)
        if not matrices:
            raise ValueError("need at least one matrix")
        self.n = matrices[0].n
        self.m = len(matrices)
        for a in matrices:
            if a.n != self.n:
                raise ValueError("all matrices must share the dimension n")
        if B is not None and B.n != self.n:
            raise ValueError("B must share the dimension n")
        self.matrices = matrices
        self.B = B
        if c is None:
            self.c = np.zeros(self.m)
        else:
            self.c = np.array(c, dtype=np.float64, copy=True)
            if self.c.shape != (self.m,):
                raise ValueError("c must have length m")
            if not np.all(np.isfinite(self.c)):
                raise ValueError("c must be finite")
        self.c.flags.writeable = False
        self._lipschitz = float(lipschitz) if lipschitz is not None else None
        self._lipschitz_converged = True
        self.meta = dict(meta or {})
        self._pattern = None
        self._combo_template = None

    # -- cached Lipschitz bound (write-once) --------------------------------

    @property
    def lipschitz(self):
        return self._lipschitz

    def set_lipschitz(self, value: float, converged: bool = True):
        if self._lipschitz is None:
            self._lipschitz = float(value)
            self._lipschitz_converged = bool(converged)
        return self._lipschitz

    # -- shared pattern machinery -------------------------------------------

    @property
    def joint_pattern(self) -> bool:
        first = self.matrices[0]
        for a in self.matrices[1:]:
            if not (np.array_equal(a.rows, first.rows) and np.array_equal(a.cols, first.cols)):
                return False
        return True

    def _build_pattern(self):
        mats = self.matrices
        keys = [a.rows * self.n + a.cols for a in mats]
        if self.B is not None:
            keys.append(self.B.rows * self.n + self.B.cols)
        union = np.unique(np.concatenate(keys)) if keys else np.empty(0, np.int64)
        rows = union // self.n
        cols = union % self.n
        nnz = union.size
        values_mat = np.zeros((self.m, nnz))
        for j, a in enumerate(mats):
            pos = np.searchsorted(union, a.rows * self.n + a.cols)
            values_mat[j, pos] = a.values
        b_values = np.zeros(nnz)
        if self.B is not None:
            pos = np.searchsorted(union, self.B.rows * self.n + self.B.cols)
            b_values[pos] = self.B.values
        weights = np.where(rows == cols, 1.0, 2.0)
        self._pattern = (rows, cols, weights, values_mat, b_values)

    @property
    def pattern(self):
        """(rows, cols, weights, values_mat, b_values) on the union pattern."""
        if self._pattern is None:
            self._build_pattern()
        return self._pattern

    def combination_values(self, x: np.ndarray) -> np.ndarray:
        """Upper-triangle values of B + sum_j x_j A_j on the union pattern."""
        _, _, _, values_mat, b_values = self.pattern
        return x @ values_mat + b_values

    def combination_csr(self, x: np.ndarray) -> sp.csr_matrix:
        """Full CSR of B + sum_j x_j A_j, reusing one precomputed structure."""
        rows, cols, _, _, _ = self.pattern
        if self._combo_template is None:
            off = rows != cols
            r = np.concatenate([rows, cols[off]])
            c = np.concatenate([cols, rows[off]])
            ids = np.arange(1, r.size + 1, dtype=np.float64)
            csr = sp.coo_matrix((ids, (r, c)), shape=(self.n, self.n)).tocsr()
            perm = csr.data.astype(np.int64) - 1
            self._combo_template = (csr, perm, off)
        csr, perm, off = self._combo_template
        vals = self.combination_values(x)
        full = np.concatenate([vals, vals[off]])
        out = csr.copy()
        out.data = full[perm]
        return out

    def quadratic_forms(self, X: np.ndarray) -> np.ndarray:
        """[x^T A_1 x; ...; x^T A_m x] summed over the columns of X.

        X may be a single vector (n,) or a batch (n, N); the batch form
        returns sum_s over the columns, which is what the sampling oracle
        accumulates.
        """
        rows, cols, weights, values_mat, _ = self.pattern
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            u = X[rows] * X[cols]
        else:
            u = (X[rows, :] * X[cols, :]).sum(axis=1)
        wu = weights * u
        return np.array([np.dot(values_mat[j], wu) for j in range(self.m)])


# -- operations ---------------------------------------------------------------

def spmv(A: SparseSymMatrix, v) -> np.ndarray:
    """Apply A to v, reflecting the stored upper triangle."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (A.n,):
        raise ValueError(f"vector length {v.shape} does not match dimension {A.n}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return A.matvec(v)


def assemble_combination(inst: ProblemInstance, x) -> SparseSymMatrix:
    """Return B + sum_j x_j A_j on the union pattern (linear in x)."""
    xw = np.asarray(getattr(x, "weights", x), dtype=np.float64)
    if xw.shape != (inst.m,):
        raise ValueError(f"coefficient length {xw.shape} does not match m={inst.m}")
    rows, cols, _, _, _ = inst.pattern
    vals = inst.combination_values(xw)
    return SparseSymMatrix(inst.n, rows, cols, vals, pattern_id=("combo", id(inst)),
                           validate=False)


def adjoint_apply(inst: ProblemInstance, Y) -> np.ndarray:
    """Adjoint map: [Tr(A_1 Y); ...; Tr(A_m Y)] via sparse-pattern dot products."""
    Y = as_dense_sym(Y)
    if Y.shape != (inst.n, inst.n):
        raise ValueError(f"matrix shape {Y.shape} does not match dimension {inst.n}")
    rows, cols, weights, values_mat, _ = inst.pattern
    y = weights * Y[rows, cols]
    return np.array([np.dot(values_mat[j], y) for j in range(inst.m)])


class PowerResult(NamedTuple):
    value: float
    vector: np.ndarray
    converged: bool
    iterations: int


def _as_matvec(op, n=None) -> tuple[Callable[[np.ndarray], np.ndarray], int]:
    if isinstance(op, SparseSymMatrix):
        return op.matvec, op.n
    if sp.issparse(op):
        return (lambda v: op @ v), op.shape[0]
    if isinstance(op, np.ndarray):
        return (lambda v: op @ v), op.shape[0]
    if callable(op):
        if n is None:
            raise ValueError("a callable operator needs an explicit dimension")
        return op, n
    raise TypeError(f"unsupported operator type {type(op)!r}")


def power_method(op, tol: float = 1e-8, max_iter: int = 1000, seed: int = 0,
                 n: int | None = None, v0: np.ndarray | None = None) -> PowerResult:
    """Estimate the eigenvalue of largest absolute value (signed Rayleigh quotient).

    Stops when successive Rayleigh quotients differ by at most
    tol * max(1, |value|); deterministic for a fixed seed.  An explicit start
    vector ``v0`` (e.g. the previous eigenvector of a slowly moving matrix)
    takes precedence over the seeded random start.  The ``converged`` flag is
    False when max_iter is exhausted first.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    matvec, dim = _as_matvec(op, n)
    if v0 is not None and np.all(np.isfinite(v0)) and np.linalg.norm(v0) > 0:
        v = np.asarray(v0, dtype=np.float64) / np.linalg.norm(v0)
    else:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
    lam = None
    for it in range(1, max_iter + 1):
        w = matvec(v)
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return PowerResult(0.0, v, True, it)
        v = w / nw
        if lam is not None and abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return PowerResult(lam_new, v, True, it)
        lam = lam_new
    return PowerResult(lam, v, False, max_iter)


def power_method_lmax(op, tol: float = 1e-8, max_iter: int = 1000, seed: int = 0,
                      n: int | None = None, v0: np.ndarray | None = None) -> PowerResult:
    """Estimate the maximal (signed) eigenvalue via the two-phase shift trick.

    Phase one estimates s ~ |lambda|_max; phase two runs on op + s*I, whose
    dominant eigenvalue is lambda_max + s >= 0, and subtracts the shift.
    """
    matvec, dim = _as_matvec(op, n)
    first = power_method(matvec, tol=tol, max_iter=max_iter, seed=seed, n=dim, v0=v0)
    shift = 1.05 * abs(first.value) + 1e-12
    shifted = power_method(lambda v: matvec(v) + shift * v, tol=tol,
                           max_iter=max_iter, seed=seed + 1, n=dim, v0=v0)
    return PowerResult(shifted.value - shift, shifted.vector,
                       first.converged and shifted.converged,
                       first.iterations + shifted.iterations)


def spectral_range(op, tol: float = 1e-8, max_iter: int = 1000, seed: int = 0,
                   n: int | None = None) -> tuple[float, float, bool]:
    """Estimate (lambda_min, lambda_max) with two shifted power runs."""
    matvec, dim = _as_matvec(op, n)
    first = power_method(matvec, tol=tol, max_iter=max_iter, seed=seed, n=dim)
    shift = 1.05 * abs(first.value) + 1e-12
    if first.value >= 0:
        lmax = first.value
        other = power_method(lambda v: matvec(v) - shift * v, tol=tol,
                             max_iter=max_iter, seed=seed + 1, n=dim)
        lmin = other.value + shift
    else:
        lmin = first.value
        other = power_method(lambda v: matvec(v) + shift * v, tol=tol,
                             max_iter=max_iter, seed=seed + 1, n=dim)
        lmax = other.value - shift
    lmin = min(lmin, lmax)
    return lmin, lmax, first.converged and other.converged


def exact_density(V) -> np.ndarray:
    """exp(V) / Tr(exp(V)) via dense eigendecomposition.

    The spectrum is shifted by its maximum before exponentiation; the map is
    invariant under adding multiples of the identity, and the shift makes
    overflow impossible.  Output is symmetric PSD with unit trace.
    """
    V = as_dense_sym(V)
    w, U = np.linalg.eigh(V)
    e = np.exp(w - w.max())
    e /= e.sum()
    Y = (U * e) @ U.T
    Y = 0.5 * (Y + Y.T)
    return Y / np.trace(Y)


class LipschitzEstimate(NamedTuple):
    value: float
    converged: bool


def lipschitz_constant(inst: ProblemInstance, tol: float = 1e-6,
                       max_iter: int = 2000, seed: int = 0) -> LipschitzEstimate:
    """max_j ||A_j||_spec, each via the plain Power method (|lambda|_max).

    Caches the value into the instance on first call; later calls return the
    cached value without recomputation.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if inst.lipschitz is not None:
        return LipschitzEstimate(inst.lipschitz, inst._lipschitz_converged)
    best = 0.0
    converged = True
    for j, a in enumerate(inst.matrices):
        if a.nnz == 0:
            continue
        res = power_method(a, tol=tol, max_iter=max_iter, seed=seed + j)
        best = max(best, abs(res.value))
        converged = converged and res.converged
    inst.set_lipschitz(best, converged)
    return LipschitzEstimate(best, converged)
