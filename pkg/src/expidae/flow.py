"""Krylov evaluation of the homogeneous constrained flow.

The linear DAE

    M z'(t) + A z(t) + B^T mu(t) = 0,      B z(t) = 0

with consistent initial value has solution z(t) = exp(X t) z0 for a
(never formed) matrix X whose action is one saddle solve:

    M y + B^T mu = -A z0,   B y = 0   =>   y = X z0.

exp(X t) z0 is approximated in the Krylov subspace built by the Arnoldi
iteration, using the dense exponential of the small Hessenberg matrix.
If the basis cap is reached before the generalized-residual estimate
meets the tolerance, the interval is halved recursively.  The accepted
result is projected back onto the kernel of B to kill round-off drift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InconsistentState, NoConvergence, ZeroInitialVector
from .linalg import SaddleFactorization, as_vector, canonical_csr, kernel_project
from .phi import expm

__all__ = ["DaeOperator", "KrylovFlowResult", "arnoldi", "flow"]

DEFAULT_TOL = 1e-10
DEFAULT_BASIS_CAP = 60
DEFAULT_SUBSTEP_LIMIT = 30
BREAKDOWN_RTOL = 1e-14
CONSISTENCY_RTOL = 1e-8


@dataclass(frozen=True)
class KrylovFlowResult:
    """Flow endpoint together with Arnoldi diagnostics."""

    state: np.ndarray
    basis_size: int
    residual_estimate: float
    substeps: int
    exact: bool = False
    multiplier: np.ndarray | None = None


class DaeOperator:
    """Action of the constrained-flow generator via mass saddle solves.

    Immutable after construction; concurrent flow evaluations against
    one operator are safe because each owns its basis storage.
    """

    def __init__(self, mass, stiffness, constraint):
        self.stiffness = canonical_csr(stiffness)
        self._saddle = SaddleFactorization(mass, constraint)
        if self.stiffness.shape != (self._saddle.n, self._saddle.n):
            raise ValueError("stiffness shape does not match mass/constraint")
        self.n = self._saddle.n
        self.m = self._saddle.m
        self._zero_dual = np.zeros(self.m)

    @property
    def mass(self):
        return self._saddle.S

    @property
    def constraint(self):
        return self._saddle.B

    def apply(self, x0) -> np.ndarray:
        """y = X x0, i.e. solve M y + B^T mu = -A x0, B y = 0."""
        x0 = as_vector(x0, self.n, "x0")
        y, _ = self._saddle.solve(-(self.stiffness @ x0), self._zero_dual)
        return y

    def multiplier_at(self, x) -> np.ndarray:
        """Dual variable of the saddle problem at state ``x``."""
        x = as_vector(x, self.n, "x")
        _, mu = self._saddle.solve(-(self.stiffness @ x), self._zero_dual)
        return mu

    def project(self, x) -> np.ndarray:
        """Mass-orthogonal projection onto the kernel of B."""
        return kernel_project(self._saddle, x)

    def constraint_defect(self, x) -> float:
        if self.m == 0:
            return 0.0
        return float(np.linalg.norm(self.constraint @ x))


def _arnoldi_extend(op, V, H, j):
    """One Arnoldi step: fill column j of H, normalize v_{j+1}.

    Classical Gram-Schmidt with a single refinement pass; returns the
    subdiagonal entry h_{j+1,j}.
    """
    w = op.apply(V[:, j])
    h = V[:, : j + 1].T @ w
    w -= V[:, : j + 1] @ h
    h2 = V[:, : j + 1].T @ w
    w -= V[:, : j + 1] @ h2
    H[: j + 1, j] = h + h2
    hnext = np.linalg.norm(w)
    H[j + 1, j] = hnext
    if hnext > 0.0:
        V[:, j + 1] = w / hnext
    return hnext


def arnoldi(op: DaeOperator, x0, r_max: int):
    """Orthonormal Krylov basis of span{x0, X x0, ...} and its Hessenberg matrix.

    Returns (V, H, h_next) with V of shape (n, r), H of shape (r, r) and
    h_next the first neglected subdiagonal entry.  A happy breakdown
    (h_next at round-off relative to H) terminates early with h_next
    reported as 0.0.
    """
    x0 = as_vector(x0, op.n, "x0")
    beta = np.linalg.norm(x0)
    if beta == 0.0:
        raise ZeroInitialVector("Arnoldi started from the zero vector")
    r_max = min(r_max, op.n)
    V = np.empty((op.n, r_max + 1))
    H = np.zeros((r_max + 1, r_max))
    V[:, 0] = x0 / beta
    r = r_max
    hnext = 0.0
    for j in range(r_max):
        hnext = _arnoldi_extend(op, V, H, j)
        hscale = np.linalg.norm(H[: j + 1, : j + 1])
        if hnext <= BREAKDOWN_RTOL * max(hscale, 1.0):
            r = j + 1
            hnext = 0.0
            break
    return V[:, :r].copy(), H[:r, :r].copy(), float(hnext)


def _krylov_shot(op, x0, beta, dt, tol, r_max):
    """Single Krylov approximation of exp(X dt) x0.

    Returns (state, basis_size, estimate, exact) or None when the basis
    cap is exhausted before the error estimate meets ``tol``.
    """
    r_cap = min(r_max, op.n)
    V = np.empty((op.n, r_cap + 1))
    H = np.zeros((r_cap + 1, r_cap))
    V[:, 0] = x0 / beta
    for j in range(r_cap):
        hnext = _arnoldi_extend(op, V, H, j)
        r = j + 1
        Hr = H[:r, :r]
        exact = hnext <= BREAKDOWN_RTOL * max(np.linalg.norm(Hr), 1.0)
        eHt = expm(dt * Hr)
        estimate = 0.0 if exact else beta * abs(hnext * eHt[r - 1, 0])
        if exact or estimate <= tol:
            state = beta * (V[:, :r] @ eHt[:, 0])
            return state, r, estimate, exact
    return None


def _flow_recursive(op, x0, dt, tol, r_max, budget, depth):
    if budget[0] <= 0:
        raise NoConvergence("flow substep limit exceeded")
    if depth > 16:
        raise NoConvergence("flow interval-halving recursion too deep")
    beta = np.linalg.norm(x0)
    if beta == 0.0:
        budget[0] -= 1
        return x0.copy(), 0, 0.0, 1, True
    shot = _krylov_shot(op, x0, beta, dt, tol, r_max)
    if shot is not None:
        state, r, estimate, exact = shot
        budget[0] -= 1
        return state, r, estimate, 1, exact
    xa, ra, ea, sa, exa = _flow_recursive(op, x0, dt / 2, tol / 2, r_max, budget, depth + 1)
    xb, rb, eb, sb, exb = _flow_recursive(op, xa, dt / 2, tol / 2, r_max, budget, depth + 1)
    return xb, max(ra, rb), ea + eb, sa + sb, exa and exb


def flow(
    op: DaeOperator,
    x0,
    t: float,
    tol: float = DEFAULT_TOL,
    r_max: int = DEFAULT_BASIS_CAP,
    substep_limit: int = DEFAULT_SUBSTEP_LIMIT,
    recover_multiplier: bool = False,
) -> KrylovFlowResult:
    """Approximate exp(X t) x0 for the homogeneous constrained system.

    ``x0`` must satisfy the constraint (relative defect below 1e-8);
    the error estimate of the returned result is below ``tol`` (the
    estimate carries the norm of x0 as a factor).  The endpoint is
    projected onto the kernel of B.
    """
    x0 = as_vector(x0, op.n, "x0")
    if t < 0:
        raise ValueError("flow time must be nonnegative")
    norm0 = np.linalg.norm(x0)
    defect = op.constraint_defect(x0)
    if defect > CONSISTENCY_RTOL * max(norm0, 1e-300):
        raise InconsistentState(
            f"initial value violates constraint: |B x0| = {defect:.3e}, |x0| = {norm0:.3e}"
        )
    if t == 0.0 or norm0 == 0.0:
        mult = op.multiplier_at(x0) if recover_multiplier else None
        return KrylovFlowResult(x0.copy(), 0, 0.0, 0, True, mult)

    budget = [substep_limit]
    state, basis, estimate, substeps, exact = _flow_recursive(
        op, x0, t, tol, r_max, budget, 0
    )
    state = op.project(state)
    mult = op.multiplier_at(state) if recover_multiplier else None
    return KrylovFlowResult(state, basis, estimate, substeps, exact, mult)
