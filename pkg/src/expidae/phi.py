"""Dense matrix exponential and the phi-function family.

phi_0 is the exponential and phi_{k+1}(z) = (phi_k(z) - phi_k(0)) / z
with phi_k(0) = 1/k!.  These functions drive the small Hessenberg
exponentials inside the Krylov flow and serve as dense oracles for the
integrator tests via the closed-form solution of linear systems with
polynomial forcing.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionMismatch, NonFinite, OrderTooHigh, SingularMatrix

__all__ = ["expm", "phi", "polyrhs_solution"]

MAX_PHI_ORDER = 4

# Norm thresholds for the Pade degrees of the scaling-and-squaring
# exponential (classical double-precision values).
_PADE_THETA = (
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
    (13, 5.371920351148152e0),
)

_PADE_B = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (
        17643225600.0,
        8821612800.0,
        2075673600.0,
        302702400.0,
        30270240.0,
        2162160.0,
        110880.0,
        3960.0,
        90.0,
        1.0,
    ),
    13: (
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ),
}


def _pade_uv(a: np.ndarray, degree: int) -> tuple[np.ndarray, np.ndarray]:
    b = _PADE_B[degree]
    n = a.shape[0]
    eye = np.eye(n)
    a2 = a @ a
    if degree == 13:
        a4 = a2 @ a2
        a6 = a4 @ a2
        u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
                 + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * eye)
        v = a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2) \
            + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * eye
        return u, v
    powers = [eye, a2]
    while 2 * len(powers) < degree + 1:
        powers.append(powers[-1] @ a2)
    u_poly = sum(b[2 * j + 1] * powers[j] for j in range((degree + 1) // 2))
    v = sum(b[2 * j] * powers[j] for j in range(degree // 2 + 1))
    return a @ u_poly, v


def expm(a) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a Pade approximant."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expm needs a square matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise NonFinite("expm input has non-finite entries")

    norm1 = np.linalg.norm(a, 1) if a.size else 0.0
    squarings = 0
    degree = 13
    for deg, theta in _PADE_THETA:
        if norm1 <= theta:
            degree = deg
            break
    else:
        squarings = max(0, int(math.ceil(math.log2(norm1 / _PADE_THETA[-1][1]))))
    scaled = a / (2.0**squarings)

    u, v = _pade_uv(scaled, degree)
    try:
        result = np.linalg.solve(v - u, v + u)
    except np.linalg.LinAlgError as exc:
        raise NonFinite(f"Pade denominator singular: {exc}") from exc
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(squarings):
            result = result @ result
    if not np.isfinite(result).all():
        raise NonFinite("matrix exponential overflowed")
    return result


def _phi_scalar_series(order: int, z: float) -> float:
    total = 0.0
    term = 1.0 / math.factorial(order)
    for j in range(25):
        total += term
        term *= z / (j + order + 1)
        if abs(term) < 1e-20 * max(abs(total), 1.0):
            break
    return total


def _phi_augmented(order: int, z: np.ndarray) -> np.ndarray:
    # Exponential of the block companion embedding: the (0, order) block
    # of expm([[Z, I, 0...], [0, 0, I...], ...]) equals phi_order(Z).
    n = z.shape[0]
    dim = n * (order + 1)
    w = np.zeros((dim, dim))
    w[:n, :n] = z
    for i in range(order):
        w[i * n : (i + 1) * n, (i + 1) * n : (i + 2) * n] = np.eye(n)
    return expm(w)[:n, order * n : (order + 1) * n]


def _phi_recursion(order: int, z: np.ndarray) -> np.ndarray:
    if np.linalg.cond(z) > 1e12:
        raise SingularMatrix("phi recursion requires an invertible argument")
    n = z.shape[0]
    eye = np.eye(n)
    p = expm(z)
    for k in range(order):
        p = np.linalg.solve(z, p - eye / math.factorial(k))
    return p


def phi(order: int, z):
    """Evaluate phi_order at a scalar or square matrix argument.

    Orders 0..4 are supported.  Small arguments are routed through a
    cancellation-free path (scalar series below 1e-4, block companion
    embedding below norm 0.5); larger ones use the recursion from the
    exponential.
    """
    if not 0 <= order <= MAX_PHI_ORDER:
        raise OrderTooHigh(f"phi order must be in 0..{MAX_PHI_ORDER}, got {order}")

    if np.isscalar(z) or np.ndim(z) == 0:
        zval = float(z)
        if not np.isfinite(zval):
            raise NonFinite("phi argument is non-finite")
        if order == 0:
            return math.exp(zval)
        if abs(zval) < 1e-4:
            return _phi_scalar_series(order, zval)
        mat = np.array([[zval]])
        if abs(zval) < 0.5:
            return float(_phi_augmented(order, mat)[0, 0])
        return float(_phi_recursion(order, mat)[0, 0])

    mat = np.asarray(z, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionMismatch(f"phi needs a scalar or square matrix, got {mat.shape}")
    if not np.isfinite(mat).all():
        raise NonFinite("phi argument has non-finite entries")
    if order == 0:
        return expm(mat)
    norm = np.linalg.norm(mat, 2)
    if norm == 0.0:
        return np.eye(mat.shape[0]) / math.factorial(order)
    if norm < 0.5:
        return _phi_augmented(order, mat)
    return _phi_recursion(order, mat)


def polyrhs_solution(a, u0, forcing, t: float) -> np.ndarray:
    """Exact solution of u' + a u = sum_k f_k t^(k-1) / (k-1)! at time t.

    ``forcing`` is the (possibly empty) list of coefficient vectors
    f_1..f_n; the solution is phi_0(-t a) u0 + sum_k phi_k(-t a) f_k t^k.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"coefficient matrix must be square, got {a.shape}")
    n = a.shape[0]
    u0 = np.atleast_1d(np.asarray(u0, dtype=np.float64))
    if u0.shape != (n,):
        raise DimensionMismatch(f"u0 has shape {u0.shape}, expected ({n},)")
    if len(forcing) > MAX_PHI_ORDER:
        raise OrderTooHigh(f"at most {MAX_PHI_ORDER} forcing terms supported")

    z = -t * a
    u = phi(0, z) @ u0
    for k, fk in enumerate(forcing, start=1):
        fk = np.atleast_1d(np.asarray(fk, dtype=np.float64))
        if fk.shape != (n,):
            raise DimensionMismatch(f"forcing term {k} has shape {fk.shape}")
        u = u + (t**k) * (phi(k, z) @ fk)
    return u
