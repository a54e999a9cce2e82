"""Entropy proximal machinery on the simplex and the spectahedron.

The primal feasible set is the standard simplex with the negative-entropy
distance generator (closed-form exponentiated-gradient prox); the dual set
is the trace-one PSD cone slice, handled either exactly through a dense
eigendecomposition or implicitly in the log domain, where a prox step is a
plain matrix addition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import SparseSymMatrix, as_dense_sym, exact_density

__all__ = [
    "SimplexPoint",
    "SpectahedronLog",
    "SetupConstants",
    "simplex_entropy_prox",
    "spectahedron_entropy_prox_exact",
    "log_domain_update",
]

# Weights this small are floored so their logarithm stays finite; exact
# arithmetic keeps iterates interior, floating point does not.
WEIGHT_FLOOR = 1e-300

# Test-only fault-injection hook used by the verification canary.
_SIGN_FLIP = False


@dataclass(frozen=True)
class SimplexPoint:
    """Strictly positive weights summing to one (interior of the simplex)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("weights must be a nonempty vector")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if w.min() <= 0.0:
            raise ValueError("weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def m(self) -> int:
        return self.weights.size

    @classmethod
    def uniform(cls, m: int) -> "SimplexPoint":
        return cls(np.full(m, 1.0 / m))


@dataclass(frozen=True)
class SpectahedronLog:
    """Log-domain dual iterate: V represents exp(V)/Tr(exp(V)) implicitly."""

    V: np.ndarray

    def __post_init__(self):
        V = np.array(self.V, dtype=np.float64, copy=True)
        if V.ndim != 2 or V.shape[0] != V.shape[1]:
            raise ValueError("V must be square")
        if not np.all(np.isfinite(V)):
            raise ValueError("V must be finite")
        V.flags.writeable = False
        object.__setattr__(self, "V", V)

    @property
    def n(self) -> int:
        return self.V.shape[0]

    def density(self) -> np.ndarray:
        """Materialize exp(V)/Tr(exp(V)) (dense eigendecomposition)."""
        return exact_density(self.V)


@dataclass(frozen=True)
class SetupConstants:
    """Geometry constants: set diameters, regularity parameter, Lipschitz data."""

    omega_x: float
    omega_y: float
    kappa: float
    lipschitz_op: float
    lipschitz_total: float

    def __post_init__(self):
        for name in ("omega_x", "omega_y", "kappa", "lipschitz_op", "lipschitz_total"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if abs(self.lipschitz_total - self.omega_x * self.omega_y * self.lipschitz_op) \
                > 1e-14 * max(1.0, self.lipschitz_total):
            raise ValueError("lipschitz_total inconsistent with its factors")

    @classmethod
    def for_problem(cls, m: int, n: int, lipschitz_op: float,
                    kappa_scale: float = 1.0) -> "SetupConstants":
        # ln is clamped at dimension 2 so degenerate single-matrix problems
        # still get finite, positive constants.
        lnm = math.log(max(m, 2))
        lnn = math.log(max(n, 2))
        omega_x = math.sqrt(2.0 * lnm)
        omega_y = math.sqrt(2.0 * lnn)
        return cls(omega_x, omega_y, kappa_scale * lnm, lipschitz_op,
                   omega_x * omega_y * lipschitz_op)


def simplex_entropy_prox(x: SimplexPoint, xi) -> SimplexPoint:
    """Entropy prox on the simplex: w_j = x_j e^{-xi_j} / sum_l x_l e^{-xi_l}.

    Computed in log space with max subtraction, so at least one weight is
    exactly e^0 before normalization and total underflow cannot occur.
    """
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (x.m,):
        raise ValueError(f"step vector length {xi.shape} does not match m={x.m}")
    if not np.all(np.isfinite(xi)):
        raise ValueError("step vector must be finite")
    if _SIGN_FLIP:
        xi = -xi
    logw = np.log(x.weights) - xi
    logw -= logw.max()
    w = np.exp(logw)
    if w.min() < WEIGHT_FLOOR:
        w = w + WEIGHT_FLOOR
    w /= w.sum()
    return SimplexPoint(w)


def spectahedron_entropy_prox_exact(V_bar, xi) -> np.ndarray:
    """Exact spectahedron entropy prox, taken in the log domain.

    For a dual point represented as exp(V_bar)/Tr(exp(V_bar)), the prox step
    against the linear term xi lands at exp(V_bar - xi)/Tr(exp(V_bar - xi)).
    """
    V_bar = as_dense_sym(V_bar)
    xi = as_dense_sym(xi)
    if xi.shape != V_bar.shape:
        raise ValueError("shape mismatch between V and xi")
    return exact_density(V_bar - xi)


def log_domain_update(V: SpectahedronLog, gamma: float, direction) -> SpectahedronLog:
    """Dual prox step in the log domain: V + gamma * Omega_Y^2 * direction.

    Pure matrix addition; the represented density is never materialized.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    oy2 = 2.0 * math.log(max(V.n, 2))
    out = np.array(V.V, copy=True)
    if isinstance(direction, SparseSymMatrix):
        direction.add_to(out, gamma * oy2)
    else:
        out += gamma * oy2 * np.asarray(direction, dtype=np.float64)
    return SpectahedronLog(out)
