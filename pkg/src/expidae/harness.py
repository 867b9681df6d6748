"""Convergence-study driver: error norms, reference solutions, CSV output.

A study integrates one problem over a ladder of step sizes, measures
the error against a reference solution in a chosen discrete norm
(at the final time, or as the maximum over the time grid) and fits the
observed order as the least-squares slope of log(error) versus
log(step size).  References are produced by the second-order scheme at
a much finer step and validated by comparing against a run with half
that step; they are cached on disk keyed by problem, config, final
time and reference step.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NegativeEnergy, SelfCheckFailed
from .integrators import ConstrainedSystem, SchemeConfig, integrate
from .linalg import as_vector
from .problems import Problem

__all__ = [
    "error_norm",
    "ConvergenceTable",
    "ReferenceSolution",
    "build_reference",
    "run_convergence",
    "emit_csv",
    "read_convergence_csv",
    "fit_order",
]

NORMS = ("energy", "h1", "l2")

# Points with error above this fraction of the reference scale are
# treated as pre-asymptotic and excluded from the order fit.
PREASYMPTOTIC_FRACTION = 0.5

REFERENCE_SCHEME = SchemeConfig(scheme="second-order", flow_tol=1e-12)


def error_norm(sys: ConstrainedSystem, e, norm: str) -> float:
    """Discrete norm of an error vector.

    ``energy`` uses the symmetric part of the spatial operator,
    ``h1`` the problem's stiffness-plus-mass form, ``l2`` the mass
    matrix.
    """
    e = as_vector(e, sys.n, "error vector")
    if norm == "l2":
        val = float(e @ (sys.mass @ e))
    elif norm == "energy":
        val = float(e @ (sys.stiffness @ e) + e @ (sys.stiffness.T @ e)) / 2.0
        if val < -1e-12:
            raise NegativeEnergy(
                f"energy quadratic form evaluated to {val:.3e}; "
                "symmetric part of the operator is not elliptic here"
            )
    elif norm == "h1":
        if sys.h1_form is None:
            raise ValueError("problem does not define an h1 form")
        val = float(e @ (sys.h1_form @ e))
    else:
        raise ValueError(f"unknown norm {norm!r}, expected one of {NORMS}")
    return math.sqrt(max(val, 0.0))


@dataclass(frozen=True)
class ReferenceSolution:
    """Fine-step solution used as the error yardstick.

    ``times``/``states`` hold the snapshot grid (just the final time
    unless a snapshot step was requested); ``check_states`` holds the
    same snapshots from the run with half the reference step.
    """

    problem: str
    config_key: str
    t_end: float
    scheme: str
    tau_ref: float
    times: np.ndarray
    states: np.ndarray          # (len(times), n)
    check_states: np.ndarray
    from_cache: bool = False

    @property
    def state(self) -> np.ndarray:
        """Endpoint at the final time."""
        return self.states[-1]

    @property
    def check_state(self) -> np.ndarray:
        return self.check_states[-1]

    def state_at(self, t: float) -> np.ndarray:
        idx = np.flatnonzero(np.abs(self.times - t) <= 1e-9 * max(abs(t), 1.0))
        if idx.size != 1:
            raise KeyError(f"reference has no snapshot at t={t!r}")
        return self.states[idx[0]]


@dataclass(frozen=True)
class ConvergenceTable:
    """Step sizes, errors and fitted order of one study."""

    problem: str
    scheme: str
    norm: str
    h: float | None
    taus: tuple
    errors: tuple
    local_orders: tuple         # None in the first slot
    fitted_order: float
    reference_scale: float
    max_constraint_residual: float
    self_check_gap: float | None = None
    sample: str = "final"

    def __post_init__(self):
        taus = np.asarray(self.taus)
        if taus.size and not (np.diff(taus) < 0).all():
            raise ValueError("step sizes must be strictly decreasing")
        errors = np.asarray(self.errors)
        if errors.size and not (np.isfinite(errors).all() and (errors > 0).all()):
            raise ValueError("errors must be finite and positive")


def fit_order(taus, errors, reference_scale: float) -> float:
    """Least-squares slope of log(error) vs log(tau).

    Points whose error exceeds half the reference scale are flagged as
    pre-asymptotic and dropped (unless that would leave fewer than two
    points).
    """
    taus = np.asarray(taus, dtype=float)
    errors = np.asarray(errors, dtype=float)
    keep = errors <= PREASYMPTOTIC_FRACTION * reference_scale
    if keep.sum() < 2:
        keep = np.ones_like(keep, dtype=bool)
    slope = np.polyfit(np.log(taus[keep]), np.log(errors[keep]), 1)[0]
    return float(slope)


def local_orders(taus, errors) -> tuple:
    out = [None]
    for i in range(1, len(taus)):
        out.append(
            float(math.log(errors[i - 1] / errors[i]) / math.log(taus[i - 1] / taus[i]))
        )
    return tuple(out)


def _cache_key(problem: Problem, t_end, tau_ref, scheme, snapshot_tau) -> str:
    return (
        f"{problem.name}|{problem.config!r}|t_end={t_end!r}|tau_ref={tau_ref!r}"
        f"|snap={snapshot_tau!r}|{scheme!r}"
    )


def _snapshot_run(problem, scheme, t_end, tau, stride):
    traj, _ = integrate(
        problem.system, scheme, problem.u0, 0.0, t_end, tau, snapshot_stride=stride
    )
    times = np.array([st.t for st in traj])
    states = np.stack([st.u for st in traj])
    return times, states


def build_reference(
    problem: Problem,
    t_end: float,
    tau_ref: float,
    scheme: SchemeConfig = REFERENCE_SCHEME,
    cache_dir=None,
    snapshot_tau: float | None = None,
) -> ReferenceSolution:
    """Integrate the reference at tau_ref and at tau_ref / 2.

    With ``snapshot_tau`` the full state is kept at every multiple of
    that step (it must be an integer multiple of tau_ref); otherwise
    only the endpoint is stored.  Results are cached on disk (when
    ``cache_dir`` is given) and served bit-identically on repeated
    calls with the same key.
    """
    if snapshot_tau is None:
        stride = int(round(t_end / tau_ref))
    else:
        stride = int(round(snapshot_tau / tau_ref))
        if abs(stride * tau_ref - snapshot_tau) > 1e-9 * snapshot_tau:
            raise ValueError("snapshot_tau must be an integer multiple of tau_ref")

    key = _cache_key(problem, t_end, tau_ref, scheme, snapshot_tau)
    cache_path = None
    if cache_dir is not None:
        digest = hashlib.sha256(key.encode()).hexdigest()[:20]
        cache_path = Path(cache_dir) / f"ref-{problem.name}-{digest}.npz"
        if cache_path.exists():
            with np.load(cache_path, allow_pickle=False) as data:
                if str(data["key"]) == key:
                    return ReferenceSolution(
                        problem.name, key, t_end, scheme.scheme, tau_ref,
                        data["times"], data["states"], data["check_states"],
                        from_cache=True,
                    )

    times, states = _snapshot_run(problem, scheme, t_end, tau_ref, stride)
    _, check_states = _snapshot_run(problem, scheme, t_end, tau_ref / 2, 2 * stride)

    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            cache_path,
            key=np.str_(key),
            times=times,
            states=states,
            check_states=check_states,
        )
    return ReferenceSolution(
        problem.name, key, t_end, scheme.scheme, tau_ref, times, states, check_states
    )


def run_convergence(
    problem: Problem,
    scheme: SchemeConfig,
    taus,
    t_end: float,
    norm: str = "energy",
    tau_ref: float | None = None,
    cache_dir=None,
    reference: str = "integrate",
    sample: str = "final",
    ref_scheme: SchemeConfig = REFERENCE_SCHEME,
) -> ConvergenceTable:
    """Integrate the ladder of step sizes and fit the observed order.

    ``reference`` is either "integrate" (fine-step run, requires
    ``tau_ref`` at most min(taus)/16) or "exact" (manufactured
    solution, available for the toy problem only).  ``sample`` selects
    the error functional: "final" measures at t_end only, "max" takes
    the maximum over all time grid points, which is what resolves the
    initial transient of problems with rough data.
    """
    taus = sorted((float(t) for t in taus), reverse=True)
    if len(taus) < 2:
        raise ValueError("a convergence study needs at least two step sizes")
    if len(set(taus)) != len(taus):
        raise ValueError("duplicate step sizes in ladder")
    if sample not in ("final", "max"):
        raise ValueError(f"unknown sample mode {sample!r}")
    sys = problem.system
    tau_min = min(taus)
    for tau in taus:
        ratio = tau / tau_min
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("step sizes must be integer multiples of the smallest")

    ref = None
    exact = None
    if reference == "exact":
        if problem.exact is None:
            raise ValueError(f"problem {problem.name!r} has no exact solution")
        exact = problem.exact
        ref_state = np.asarray(exact(t_end), dtype=float)
    elif reference == "integrate":
        if tau_ref is None:
            raise ValueError("tau_ref is required when integrating the reference")
        if tau_ref > tau_min / 16 + 1e-15:
            raise ValueError(
                f"tau_ref={tau_ref} too coarse; must be <= min(taus)/16 = {tau_min / 16}"
            )
        ref = build_reference(
            problem,
            t_end,
            tau_ref,
            scheme=ref_scheme,
            cache_dir=cache_dir,
            snapshot_tau=tau_min if sample == "max" else None,
        )
        ref_state = ref.state
    else:
        raise ValueError(f"unknown reference mode {reference!r}")

    errors = []
    max_residual = 0.0
    for tau in taus:
        traj, diag = integrate(sys, scheme, problem.u0, 0.0, t_end, tau)
        if sample == "final":
            err = error_norm(sys, traj[-1].u - ref_state, norm)
        else:
            err = 0.0
            stride = int(round(tau / tau_min))
            for k, st in enumerate(traj[1:], start=1):
                target = exact(st.t) if exact is not None else ref.states[k * stride]
                err = max(err, error_norm(sys, st.u - target, norm))
        errors.append(err)
        max_residual = max(max_residual, diag.max_constraint_residual)

    gap = None
    if ref is not None:
        if sample == "final":
            gap = error_norm(sys, ref.state - ref.check_state, norm)
        else:
            gap = max(
                error_norm(sys, a - b, norm)
                for a, b in zip(ref.states[1:], ref.check_states[1:])
            )
        if gap > 0.01 * min(errors):
            raise SelfCheckFailed(
                f"reference resolution check failed: gap {gap:.3e} exceeds 1% of "
                f"the smallest measured error {min(errors):.3e}"
            )

    scale = error_norm(sys, ref_state, norm)
    return ConvergenceTable(
        problem=problem.name,
        scheme=scheme.scheme,
        norm=norm,
        h=problem.mesh_h,
        taus=tuple(taus),
        errors=tuple(errors),
        local_orders=local_orders(taus, errors),
        fitted_order=fit_order(taus, errors, scale),
        reference_scale=scale,
        max_constraint_residual=max_residual,
        self_check_gap=gap,
        sample=sample,
    )


def emit_csv(table: ConvergenceTable, path) -> None:
    """Write the table with a '#'-prefixed metadata block and 17-digit rows."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# problem={table.problem}\n")
        fh.write(f"# scheme={table.scheme}\n")
        fh.write(f"# norm={table.norm}\n")
        fh.write(f"# h={'' if table.h is None else format(table.h, '.17g')}\n")
        fh.write(f"# sample={table.sample}\n")
        fh.write(f"# fitted_order={table.fitted_order:.17g}\n")
        fh.write("tau,error,local_order\n")
        for i, (tau, err) in enumerate(zip(table.taus, table.errors)):
            order = table.local_orders[i]
            order_txt = "" if order is None else format(order, ".17g")
            fh.write(f"{tau:.17g},{err:.17g},{order_txt}\n")


def read_convergence_csv(path):
    """Parse a file written by :func:`emit_csv`.

    Returns (metadata dict, list of (tau, error, local_order or None)).
    """
    meta = {}
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
            elif line.startswith("tau,"):
                continue
            else:
                tau_txt, err_txt, order_txt = line.split(",")
                rows.append(
                    (
                        float(tau_txt),
                        float(err_txt),
                        float(order_txt) if order_txt else None,
                    )
                )
    return meta, rows
