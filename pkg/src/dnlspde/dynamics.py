"""Deterministic time stepping for the doubly nonlinear equation.

One step of the semi-implicit scheme solves

    b(u_new) - tau div a(grad u_new) = b(u_old) + forcing * sigma(u_old)

for the interior node values, with the noise/control coefficient frozen
at the previous step.  The solve is damped Newton on the residual in the
h_x-weighted L2 norm: the Jacobian diag(b') + tau K_a is symmetric
positive definite (b' >= C3 > 0, a' >= 0), so the exact Newton direction
is always a descent direction for the residual norm and residual-halving
line search cannot cycle.  If the line search still stalls, one
frozen-coefficient (Kacanov) sweep replaces the Newton step: both b and a
are rewritten in secant form b(u) = beta(u) u, a(g) = kappa(g) g and the
resulting linear SPD system is solved once.

Initial data is first smoothed by one implicit p-Laplacian step
w - tau div(|grad w|^{p-2} grad w) = u0, which can only shrink the energy
1/2 |w|^2 + tau |grad w|_p^p below 1/2 |u0|^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import solve_banded, solveh_banded

from .coefficients import BFunction, Coefficients, FluxFunction, linear_b
from .errors import StepDivergedError, StepNonconvergedError
from .grid import (
    Field,
    Grid1D,
    divergence_values,
    gradient_values,
    lq_norm_values,
    _stiffness_upper_banded,
)

__all__ = [
    "SolverSettings",
    "SolveReport",
    "Control",
    "Trajectory",
    "project_control",
    "regularize_initial",
    "implicit_step",
    "solve_skeleton",
    "AprioriDiagnostics",
    "apriori_report",
    "continuity_experiment",
    "trajectory_summary_rows",
]


@dataclass(frozen=True)
class SolverSettings:
    """Newton iteration knobs for the per-step solves."""

    newton_tol: float = 1e-10
    max_iter: int = 100
    max_halvings: int = 30

    def __post_init__(self):
        if self.newton_tol <= 0 or self.max_iter < 1:
            raise ValueError("newton_tol must be positive and max_iter >= 1")


DEFAULT_SETTINGS = SolverSettings()


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    residual: float
    damping_events: int
    converged: bool


@dataclass(frozen=True)
class Control:
    """Piecewise-constant control with values h_1 .. h_N on cells of width tau."""

    values: np.ndarray
    tau: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or vals.size < 1:
            raise ValueError("control needs at least one cell value")
        if not np.all(np.isfinite(vals)):
            raise ValueError("control values must be finite")
        if not (self.tau > 0):
            raise ValueError(f"tau must be positive, got {self.tau}")
        object.__setattr__(self, "values", vals)

    @property
    def n_steps(self) -> int:
        return self.values.size

    @property
    def horizon(self) -> float:
        return self.n_steps * self.tau

    def energy(self) -> float:
        """The candidate action 1/2 tau sum h_k^2 of the step function."""
        return 0.5 * self.tau * float(np.sum(self.values**2))

    @staticmethod
    def zero(N: int, T: float) -> "Control":
        return Control(np.zeros(N), T / N)


def project_control(h: Callable[[float], float], N: int, T: float,
                    subdiv: int = 64) -> Control:
    """L2 projection of h onto step functions: cell averages on N cells.

    Averages by composite midpoint quadrature with ``subdiv`` points per
    cell.  Cell averaging never increases the L2 norm (Jensen), so
    tau sum h_k^2 <= int h^2 up to the quadrature error.
    """
    if N < 1:
        raise ValueError("need at least one cell")
    tau = T / N
    pts = (np.arange(N)[:, None] + (np.arange(subdiv)[None, :] + 0.5) / subdiv) * tau
    flat = pts.ravel()
    try:
        sampled = np.asarray(h(flat), dtype=float)
        if sampled.shape != flat.shape:
            raise TypeError
    except (TypeError, ValueError):
        sampled = np.array([float(h(t)) for t in flat])
    return Control(sampled.reshape(N, subdiv).mean(axis=1), tau)


# -- nonlinear per-step solver ----------------------------------------------


def _weighted_norm(r: np.ndarray, h_x: float) -> float:
    return math.sqrt(h_x * float(np.dot(r, r)))


def _solve_step_values(u_guess: np.ndarray, rhs: np.ndarray, tau: float,
                       flux: FluxFunction, b: BFunction, h_x: float,
                       settings: SolverSettings):
    """Damped Newton for b(u) - tau div a(grad u) = rhs on bare arrays."""
    n = u_guess.shape[0]
    inv_h2 = tau / h_x**2
    tol = settings.newton_tol
    damping = 0
    history = []

    def residual(u):
        g = gradient_values(u, h_x)
        return np.asarray(b.value(u)) - tau * divergence_values(flux.value(g), h_x) - rhs, g

    u = u_guess.copy()
    r, g = residual(u)
    rn = _weighted_norm(r, h_x)
    history.append(rn)
    if not np.isfinite(rn):
        raise StepDivergedError("non-finite residual at the initial guess", history)

    for it in range(settings.max_iter):
        if rn <= tol:
            return u, SolveReport(it, rn, damping, True)

        ap = np.asarray(flux.deriv(g))
        ab = np.zeros((3, n))
        ab[1] = np.asarray(b.deriv(u)) + inv_h2 * (ap[:-1] + ap[1:])
        if n > 1:
            ab[0, 1:] = -inv_h2 * ap[1:-1]
            ab[2, :-1] = -inv_h2 * ap[1:-1]
        delta = solve_banded((1, 1), ab, r, check_finite=False)

        alpha = 1.0
        accepted = False
        for _ in range(settings.max_halvings):
            cand = u - alpha * delta
            r_new, g_new = residual(cand)
            rn_new = _weighted_norm(r_new, h_x)
            if not np.isfinite(rn_new):
                alpha *= 0.5
                damping += 1
                continue
            if rn_new <= (1.0 - 1e-4 * alpha) * rn:
                u, r, g, rn = cand, r_new, g_new, rn_new
                accepted = True
                break
            alpha *= 0.5
            damping += 1

        if not accepted:
            # frozen-coefficient sweep: secant forms keep the system SPD;
            # near zero the secant slope is replaced by the derivative
            beta = np.asarray(b.deriv(u)).copy()
            np.divide(np.asarray(b.value(u)), u, out=beta, where=np.abs(u) > 1e-12)
            kap = np.asarray(flux.deriv(g)).copy()
            np.divide(np.asarray(flux.value(g)), g, out=kap, where=np.abs(g) > 1e-12)
            ab = np.zeros((3, n))
            ab[1] = beta + inv_h2 * (kap[:-1] + kap[1:])
            if n > 1:
                ab[0, 1:] = -inv_h2 * kap[1:-1]
                ab[2, :-1] = -inv_h2 * kap[1:-1]
            cand = solve_banded((1, 1), ab, rhs, check_finite=False)
            r_new, g_new = residual(cand)
            rn_new = _weighted_norm(r_new, h_x)
            if not np.isfinite(rn_new):
                history.append(rn_new)
                raise StepDivergedError("frozen-coefficient sweep produced NaN", history)
            u, r, g, rn = cand, r_new, g_new, rn_new
            damping += 1
        history.append(rn)
        if not np.isfinite(rn):
            raise StepDivergedError("residual became non-finite", history)

    if rn <= tol:
        return u, SolveReport(settings.max_iter, rn, damping, True)
    raise StepNonconvergedError(
        f"step solve stalled at residual {rn:.3e} > {tol:.3e}", history)


def implicit_step(u_prev: Field, forcing: float, tau: float, c: Coefficients,
                  settings: SolverSettings = DEFAULT_SETTINGS):
    """One semi-implicit step from ``u_prev`` with scalar forcing.

    The right-hand side is b(u_prev) + forcing * sigma(u_prev) nodewise;
    for the controlled equation the forcing is tau * h_{k+1}, for the
    stochastic one tau * h_{k+1} + sqrt(eps) * dW_{k+1}.
    Returns the new field and a :class:`SolveReport`.
    """
    if not (tau > 0) or not np.isfinite(forcing):
        raise ValueError("tau must be positive and forcing finite")
    rhs = np.asarray(c.b.value(u_prev.values)) + forcing * np.asarray(
        c.sigma.value(u_prev.values))
    vals, report = _solve_step_values(u_prev.values, rhs, tau, c.flux, c.b,
                                      u_prev.grid.h_x, settings)
    return Field(u_prev.grid, vals), report


def _regularization_flux(c: Coefficients) -> FluxFunction:
    # pure p-Laplacian with the problem's exponent; p = 2 degenerates to
    # the identity flux since |g|^0 g = g
    return FluxFunction(kind="p_laplacian", p=c.flux.p, delta_reg=c.flux.delta_reg)


_IDENTITY_B = linear_b(1.0)


def regularize_initial(u0: Field, tau: float, c: Coefficients,
                       settings: SolverSettings = DEFAULT_SETTINGS):
    """Smooth the initial data by w - tau div(|grad w|^{p-2} grad w) = u0.

    Testing the equation with w shows the solve can only dissipate:
    1/2 |w|^2 + tau |grad w|_p^p <= 1/2 |u0|^2.
    """
    if not (tau > 0):
        raise ValueError(f"tau must be positive, got {tau}")
    vals, report = _solve_step_values(u0.values, u0.values, tau,
                                      _regularization_flux(c), _IDENTITY_B,
                                      u0.grid.h_x, settings)
    return Field(u0.grid, vals), report


# -- trajectories -----------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """Knot values of a discrete solution path.

    ``values[k]`` holds u_k, ``b_values[k]`` holds b(u_k); ``reports[0]``
    is the initial-regularization solve, ``reports[k]`` the k-th step.
    Interpolant views are derived on demand: the right-continuous step
    function used in the space-time integrals, the left-continuous one
    used by the explicit noise coefficient, and the piecewise-affine
    interpolant of the saturation values used by the time-regularity
    diagnostics.
    """

    grid: Grid1D
    times: np.ndarray
    values: np.ndarray
    b_values: np.ndarray
    reports: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        bv = np.asarray(self.b_values, dtype=float)
        if v.shape != (t.size, self.grid.n_interior) or bv.shape != v.shape:
            raise ValueError("trajectory arrays have inconsistent shapes")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "b_values", bv)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def tau(self) -> float:
        return float(self.times[1] - self.times[0])

    def field(self, k: int) -> Field:
        return Field(self.grid, self.values[k])

    def b_field(self, k: int) -> Field:
        return Field(self.grid, self.b_values[k])

    def _bracket(self, t: float):
        times = self.times
        if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
            raise ValueError(f"time {t} outside [{times[0]}, {times[-1]}]")
        k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, self.n_steps - 1))
        return k

    def right_step_values(self, t: float) -> np.ndarray:
        """u_tau(t) = u_{k+1} on [t_k, t_{k+1})."""
        return self.values[self._bracket(t) + 1]

    def left_step_values(self, t: float) -> np.ndarray:
        """u_hat_tau(t) = u_k on (t_k, t_{k+1}]."""
        times = self.times
        if t <= times[0]:
            return self.values[0]
        k = int(np.clip(np.searchsorted(times, t, side="left") - 1, 0, self.n_steps - 1))
        return self.values[k]

    def interp_values(self, t: float) -> np.ndarray:
        """Piecewise-affine interpolant of the u knots."""
        k = self._bracket(t)
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return (1 - w) * self.values[k] + w * self.values[k + 1]

    def interp_b_values(self, t: float) -> np.ndarray:
        """Piecewise-affine interpolant of the b(u) knots."""
        k = self._bracket(t)
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return (1 - w) * self.b_values[k] + w * self.b_values[k + 1]

    def sup_b_l2(self) -> float:
        h = self.grid.h_x
        return float(np.sqrt(h * np.max(np.sum(self.b_values**2, axis=1))))


def _run_steps(u0_vals: np.ndarray, forcings: np.ndarray, tau: float,
               c: Coefficients, grid: Grid1D, settings: SolverSettings) -> Trajectory:
    """Regularize, then march the semi-implicit scheme through all forcings."""
    h_x = grid.h_x
    reg_flux = _regularization_flux(c)
    u, rep0 = _solve_step_values(u0_vals, u0_vals, tau, reg_flux, _IDENTITY_B,
                                 h_x, settings)
    N = forcings.size
    n = u0_vals.size
    values = np.empty((N + 1, n))
    b_values = np.empty((N + 1, n))
    reports = [rep0]
    values[0] = u
    b_values[0] = c.b.value(u)
    for k in range(N):
        rhs = b_values[k] + forcings[k] * np.asarray(c.sigma.value(values[k]))
        try:
            u, rep = _solve_step_values(values[k], rhs, tau, c.flux, c.b, h_x, settings)
        except (StepNonconvergedError, StepDivergedError) as exc:
            exc.step_index = k + 1
            raise
        values[k + 1] = u
        b_values[k + 1] = c.b.value(u)
        reports.append(rep)
    times = tau * np.arange(N + 1)
    return Trajectory(grid=grid, times=times, values=values, b_values=b_values,
                      reports=tuple(reports))


def solve_skeleton(u0: Field, ctrl: Control, c: Coefficients,
                   settings: SolverSettings = DEFAULT_SETTINGS) -> Trajectory:
    """Controlled deterministic path: step forcing tau * h_{k+1}."""
    return _run_steps(u0.values, ctrl.tau * ctrl.values, ctrl.tau, c, u0.grid, settings)


# -- diagnostics ------------------------------------------------------------


@dataclass(frozen=True)
class AprioriDiagnostics:
    """Discrete counterparts of the basic energy estimate.

    The bounded quantities are sup_k |b(u_k)|^2, the summed squared jumps
    of b(u), the space-time gradient integral tau sum |grad u_k|_p^p, the
    dual-exponent flux integral, and the time-Hoelder table of the affine
    interpolant of b(u) in the discrete dual norm.
    """

    sup_b_l2_sq: float
    sum_b_jumps_sq: float
    time_int_gradient_p: float
    time_int_flux_dual: float
    holder_exponent: float
    holder_max_ratio: float
    holder_by_lag: tuple

    def to_jsonable(self) -> dict:
        return {
            "sup_b_l2_sq": self.sup_b_l2_sq,
            "sum_b_jumps_sq": self.sum_b_jumps_sq,
            "time_int_gradient_p": self.time_int_gradient_p,
            "time_int_flux_dual": self.time_int_flux_dual,
            "holder_exponent": self.holder_exponent,
            "holder_max_ratio": self.holder_max_ratio,
            "holder_by_lag": [[int(l), float(r)] for l, r in self.holder_by_lag],
        }


def apriori_report(traj: Trajectory, c: Coefficients) -> AprioriDiagnostics:
    h_x = traj.grid.h_x
    p = c.flux.p
    pd = p / (p - 1.0)
    bv = traj.b_values
    sup_b = float(np.max(h_x * np.sum(bv**2, axis=1)))
    jumps = float(np.sum(h_x * np.sum(np.diff(bv, axis=0) ** 2, axis=1)))

    int_grad = 0.0
    int_flux = 0.0
    for k in range(1, traj.times.size):
        g = gradient_values(traj.values[k], h_x)
        int_grad += h_x * float(np.sum(np.abs(g) ** p))
        int_flux += h_x * float(np.sum(np.abs(np.asarray(c.flux.value(g))) ** pd))
    int_grad *= traj.tau
    int_flux *= traj.tau

    beta = min(1.0 / p, 0.5)
    # precompute K^{-1} b(u_k) once; pair norms are then O(n) dot products
    ab = _stiffness_upper_banded(traj.grid)
    winv = solveh_banded(ab, bv.T, check_finite=False).T
    N = traj.n_steps
    by_lag = []
    max_ratio = 0.0
    for lag in range(1, N + 1):
        d_b = bv[lag:] - bv[:-lag]
        d_w = winv[lag:] - winv[:-lag]
        dual_sq = h_x * np.sum(d_b * d_w, axis=1)
        dt = lag * traj.tau
        ratio = float(np.sqrt(np.maximum(dual_sq, 0.0).max())) / dt**beta
        by_lag.append((lag, ratio))
        max_ratio = max(max_ratio, ratio)
    return AprioriDiagnostics(
        sup_b_l2_sq=sup_b, sum_b_jumps_sq=jumps, time_int_gradient_p=int_grad,
        time_int_flux_dual=int_flux, holder_exponent=beta,
        holder_max_ratio=max_ratio, holder_by_lag=tuple(by_lag),
    )


def continuity_experiment(h_base: Callable[[float], float], n_list: Sequence[int],
                          c: Coefficients, u0: Field, N: int, T: float,
                          settings: SolverSettings = DEFAULT_SETTINGS,
                          subdiv: int = 64):
    """Weak-to-strong continuity probe of the control-to-solution map.

    Perturbs the base control by sin(2 pi n t); as n grows the perturbed
    controls converge weakly (not strongly) to the base, and the solution
    map is expected to wash the oscillation out.  Returns rows
    (n, sup_t |b(u_n) - b(u_base)|_{L2}) over the knots.
    """
    base = project_control(h_base, N, T, subdiv=subdiv)
    ref = solve_skeleton(u0, base, c, settings)
    h_x = u0.grid.h_x
    rows = []
    for n in n_list:
        pert = project_control(lambda t, n=n: h_base(t) + np.sin(2 * np.pi * n * t),
                               N, T, subdiv=subdiv)
        traj = solve_skeleton(u0, pert, c, settings)
        dev = np.sqrt(h_x * np.max(np.sum((traj.b_values - ref.b_values) ** 2, axis=1)))
        rows.append((int(n), float(dev)))
    return rows


def trajectory_summary_rows(traj: Trajectory, c: Coefficients):
    """Per-step CSV rows: step,t,norm_B_l2,seminorm_w1p,residual,newton_iters."""
    h_x = traj.grid.h_x
    p = c.flux.p
    rows = []
    for k in range(traj.times.size):
        b_l2 = math.sqrt(h_x * float(np.dot(traj.b_values[k], traj.b_values[k])))
        semi = lq_norm_values(gradient_values(traj.values[k], h_x), h_x, p)
        rep = traj.reports[k]
        rows.append(
            f"{k},{traj.times[k]:.17g},{b_l2:.17g},{semi:.17g},"
            f"{rep.residual:.17g},{rep.iterations}"
        )
    return rows
