"""Randomized first-order oracle built on Gaussian probes.

Instead of materializing exp(V)/Tr(exp(V)) at cost O(n^3), the oracle pushes
N standard normal probes through a truncated Taylor expansion of exp(V/2)
and forms ratio estimates: the gradient estimate

    g_hat = sum_s [chi_s^T A_1 chi_s; ...; chi_s^T A_m chi_s] / sum_s chi_s^T chi_s + c

and, on request, the density estimate H_hat = sum_s chi_s chi_s^T / sum_s chi_s^T chi_s,
which is PSD with unit trace by construction.  V is shifted by an estimate of
its maximal eigenvalue before expansion; the represented density is invariant
under such shifts and the centering keeps the truncation level (and rounding)
minimal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import (ProblemInstance, adjoint_apply, as_dense_sym, exact_density,
                     spectral_range)
from .prox import SpectahedronLog

__all__ = [
    "OracleFailure",
    "ProbeBatch",
    "OracleOutput",
    "BiasDeviationRow",
    "BiasDeviationStats",
    "truncation_level",
    "taylor_exp_half_apply",
    "sample_oracle",
    "bias_deviation_probe",
]

# Power-method settings for the per-call spectrum estimates.  The truncation
# rule only needs a rough norm, so the tolerance is loose.
NORM_TOL = 5e-3
NORM_MAX_ITER = 80

_DENOM_FLOOR = 1e-300


class OracleFailure(RuntimeError):
    """Raised when the probe denominator underflows (measure-zero event)."""


def _seed_key(seed) -> tuple:
    return tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)


@dataclass(frozen=True)
class ProbeBatch:
    """A reproducible batch of N standard normal probes.

    ``seed`` may be an integer or a tuple; tuples map (iteration, call,
    retry, ...) coordinates onto disjoint substreams, so pre-committing the
    full schedule of samples and drawing them lazily are indistinguishable.
    """

    size: int
    seed: object = 0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("batch size must be >= 1")

    def probes(self, n: int) -> np.ndarray:
        """(n, N) array, one probe per column, regenerated from the seed."""
        rng = np.random.default_rng(np.random.SeedSequence(_seed_key(self.seed)))
        return rng.standard_normal((n, self.size))

    def derived_int_seed(self, tag: int = 0) -> int:
        ss = np.random.SeedSequence(_seed_key(self.seed) + (tag,))
        return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class OracleOutput:
    g_hat: np.ndarray
    h_hat: np.ndarray | None
    denom: float
    J_used: int
    flops_estimate: int


def truncation_level(norm_W: float, rho: float, strict: bool = False) -> int:
    """Taylor truncation level for a matrix of (estimated) spectral norm norm_W.

    Default is the empirical rule floor(max(ln(1/rho), e * norm_W)); strict
    mode uses ceil(max(ln(1/rho), e^2 * norm_W)), which is large enough for
    the e^{-J} remainder guarantee to hold unconditionally.
    """
    if not (0.0 < rho < 1.0):
        raise ValueError("rho must lie in (0, 1)")
    if not (norm_W >= 0.0 and math.isfinite(norm_W)):
        raise ValueError("norm_W must be finite and nonnegative")
    if strict:
        level = math.ceil(max(math.log(1.0 / rho), math.exp(2.0) * norm_W))
    else:
        level = math.floor(max(math.log(1.0 / rho), math.e * norm_W))
    return max(1, int(level))


def _taylor_batch(V: np.ndarray, X: np.ndarray, J: int) -> np.ndarray:
    """sum_{j<=J} (V/2)^j X / j! with the mat-vec recursion, columnwise."""
    term = X.copy()
    acc = X.copy()
    for j in range(1, J + 1):
        term = (V @ term) / (2.0 * j)
        acc += term
    return acc


def taylor_exp_half_apply(V, xi, J: int) -> np.ndarray:
    """Truncated Taylor action of exp(V/2) on a vector."""
    if J < 0:
        raise ValueError("J must be >= 0")
    V = as_dense_sym(V)
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (V.shape[0],):
        raise ValueError("vector length does not match matrix dimension")
    return _taylor_batch(V, xi.copy(), J)


def _log_matrix(V) -> np.ndarray:
    if isinstance(V, SpectahedronLog):
        return V.V
    return as_dense_sym(V)


def sample_oracle(V, inst: ProblemInstance, batch: ProbeBatch, J: int,
                  want_density: bool = False, center_shift: float | None = None) -> OracleOutput:
    """Gradient estimate (and optionally density estimate) at the dual point V.

    Deterministic given (batch.seed, V, J).  The quadratic forms run over the
    shared sparsity pattern, one pass per probe batch; the accumulation order
    is fixed, so results do not depend on thread count.
    """
    if J < 1:
        raise ValueError("J must be >= 1")
    Vm = _log_matrix(V)
    n = Vm.shape[0]
    if n != inst.n:
        raise ValueError("dual matrix dimension does not match the instance")
    if center_shift is None:
        _, lmax, _ = spectral_range(Vm, tol=NORM_TOL, max_iter=NORM_MAX_ITER,
                                    seed=batch.derived_int_seed(101))
        center_shift = lmax
    W = Vm - center_shift * np.eye(n)
    X = batch.probes(n)
    C = _taylor_batch(W, X, J)
    # Per-coordinate sums over probes; the denominator uses the same dot
    # primitive as the quadratic forms so exact cancellations survive.
    dsum = (C * C).sum(axis=1)
    denom = float(np.dot(np.ones(n), dsum))
    if not (denom > _DENOM_FLOOR):
        raise OracleFailure(f"probe denominator underflow ({denom!r})")
    g = inst.quadratic_forms(C) / denom + inst.c
    h = None
    if want_density:
        h = (C @ C.T) / denom
        h = 0.5 * (h + h.T)
    flops = 2 * n * n * J * batch.size + 2 * inst.pattern[0].size * (batch.size + inst.m)
    if want_density:
        flops += 2 * n * n * batch.size
    return OracleOutput(g, h, denom, J, flops)


@dataclass(frozen=True)
class BiasDeviationRow:
    n_probes: int
    bias: float
    dev_scale: float


@dataclass(frozen=True)
class BiasDeviationStats:
    rows: tuple
    bias_slope: float | None
    dev_slope: float | None


def _loglog_slope(ns, ys) -> float | None:
    ys = np.asarray(ys, dtype=np.float64)
    if np.any(ys <= 0.0):
        return None
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(ys), 1)[0])


def bias_deviation_probe(V, inst: ProblemInstance, N_grid, reps: int,
                         seed: int = 0) -> BiasDeviationStats:
    """Empirical bias and deviation of the gradient estimate versus sample size.

    Runs ``reps`` independent oracle calls per sample size on the near-exact
    Taylor path (J far beyond the strict rule, exact eigenvalue centering) and
    compares against the exact map computed by dense eigendecomposition.
    Returns per-N rows plus fitted log-log slopes (bias is expected to decay
    like 1/N, the deviation scale like 1/sqrt(N)).
    """
    if reps < 2:
        raise ValueError("reps must be >= 2")
    Vm = _log_matrix(V)
    w = np.linalg.eigvalsh(Vm)
    lmax_exact = float(w[-1])
    spread = float(w[-1] - w[0])
    J = int(math.ceil(math.exp(2.0) * spread / 2.0)) + 40
    adjoint_exact = adjoint_apply(inst, exact_density(Vm)) + inst.c
    rows = []
    for N in N_grid:
        G = np.empty((reps, inst.m))
        for r in range(reps):
            out = sample_oracle(Vm, inst, ProbeBatch(N, seed=(seed, int(N), r)), J,
                                center_shift=lmax_exact)
            G[r] = out.g_hat
        mean = G.mean(axis=0)
        bias = float(np.abs(mean - adjoint_exact).max())
        dev = float(np.abs(G - mean).max(axis=1).mean())
        rows.append(BiasDeviationRow(int(N), bias, dev))
    return BiasDeviationStats(
        tuple(rows),
        _loglog_slope([r.n_probes for r in rows], [r.bias for r in rows]),
        _loglog_slope([r.n_probes for r in rows], [r.dev_scale for r in rows]),
    )
