"""Invariant-measure diagnostics at unit noise strength.

The key structural inequality is the dissipativity condition

    2 C1 C3 |grad u|_p^p - |sigma(u)|_{L2}^2 >= delta |u|_{L2}^p,

probed here on random fields across amplitude scales: the implied
delta_hat is the smallest sampled ratio, clamped at zero.  When it is
positive, time averages of the L2 norm to the p-th power obey an
explicit bound, and occupation-measure averages of a bounded observable
battery stabilize along a single long path, the discrete shadow of
constructing an invariant measure from time averages.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import partial
from typing import Optional, Sequence

import numpy as np

from .coefficients import Coefficients
from .dynamics import DEFAULT_SETTINGS, SolverSettings, Trajectory
from .errors import EnsembleError
from .grid import Field, Grid1D, gradient_values
from .montecarlo import EnsembleConfig, map_paths, sample_path, solve_spde

__all__ = [
    "DissipativityReport",
    "check_dissipativity",
    "Observable",
    "observable_battery",
    "OccupationSummary",
    "long_run",
    "occupation_rows_csv",
    "MomentBoundReport",
    "time_avg_lp_norm",
    "moment_bound_check",
    "SemigroupEstimate",
    "semigroup_estimate",
]

_INVARIANT_EPS = 1.0  # noise strength is pinned at 1 for invariant-measure runs


@dataclass(frozen=True)
class DissipativityReport:
    """Sampled margins of the dissipativity condition.

    ``rows`` holds (amplitude, margin_at_zero_delta, ratio) per sample,
    where ratio = (2 C1 C3 |grad u|_p^p - |sigma(u)|^2) / |u|_{L2}^p.
    ``delta_hat`` is the smallest ratio clamped at 0; the check passes
    iff it is strictly positive.
    """

    delta_hat: float
    passed: bool
    rows: tuple
    witness: Optional[dict]
    sample_count: int
    seed: int

    def to_jsonable(self) -> dict:
        return {
            "delta_hat": self.delta_hat,
            "passed": self.passed,
            "sample_count": self.sample_count,
            "seed": self.seed,
            "witness": self.witness,
            "rows": [[float(a), float(m), float(r)] for a, m, r in self.rows],
        }


def _direction_family(grid: Grid1D, rng, sample_count: int):
    # the gradient-to-norm ratio is smallest on smooth profiles, so the
    # family must contain low modes, not just rough random fields
    dirs = [np.sin(k * np.pi * grid.x / grid.length)
            for k in range(1, min(4, grid.n_interior) + 1)]
    dirs.append(np.minimum(grid.x, grid.length - grid.x))
    dirs.extend(rng.standard_normal(grid.n_interior) for _ in range(sample_count))
    return dirs


def check_dissipativity(c: Coefficients, grid: Grid1D, sample_count: int = 64,
                        seed: int = 0,
                        amplitudes: Sequence[float] = (0.01, 0.1, 1.0, 10.0, 100.0)
                        ) -> DissipativityReport:
    """Probe the dissipativity condition on a family of sample fields.

    Directions are low sine modes, a tent profile, and ``sample_count``
    standard normal fields, each rescaled to every amplitude in
    ``amplitudes``; small amplitudes matter because a linear noise always
    defeats the p-homogeneous gradient term there when p > 2.
    """
    rng = np.random.default_rng(seed)
    h = grid.h_x
    p = c.flux.p
    two_c1c3 = 2.0 * c.flux.C1 * c.b.C3
    rows = []
    worst = (math.inf, None)
    for v in _direction_family(grid, rng, sample_count):
        nv = math.sqrt(h * float(np.dot(v, v)))
        if nv == 0.0:
            continue
        v = v / nv
        for amp in amplitudes:
            u = amp * v
            g = gradient_values(u, h)
            lhs = two_c1c3 * h * float(np.sum(np.abs(g) ** p))
            noise = h * float(np.sum(np.asarray(c.sigma.value(u)) ** 2))
            den = amp**p  # |u|_{L2} = amp by construction
            margin = lhs - noise
            ratio = margin / den
            rows.append((float(amp), float(margin), float(ratio)))
            if ratio < worst[0]:
                worst = (ratio, {"amplitude": float(amp), "ratio": float(ratio),
                                 "margin": float(margin)})
    min_ratio = worst[0]
    delta_hat = max(0.0, min_ratio)
    passed = min_ratio > 0.0
    return DissipativityReport(
        delta_hat=float(delta_hat), passed=passed, rows=tuple(rows),
        witness=None if passed else worst[1], sample_count=sample_count, seed=seed)


# -- observables ------------------------------------------------------------


@dataclass(frozen=True)
class Observable:
    """Bounded observable of the saturation state b(u).

    ``bump``: exp(-|b(u) - center|_{L2}^2), values in (0, 1].
    ``clip_norm``: min(|b(u)|_{L2}, cap), values in [0, cap].
    """

    id: str
    kind: str
    center: Optional[np.ndarray] = None
    cap: float = 1.0

    def __call__(self, b_vals: np.ndarray, h_x: float) -> float:
        if self.kind == "bump":
            d = b_vals - self.center
            return math.exp(-h_x * float(np.dot(d, d)))
        if self.kind == "clip_norm":
            return min(math.sqrt(h_x * float(np.dot(b_vals, b_vals))), self.cap)
        raise ValueError(f"unknown observable kind {self.kind!r}")


def observable_battery(grid: Grid1D) -> dict:
    """The preset battery: Gaussian bumps at fixed centers plus clipped norms."""
    zero = np.zeros(grid.n_interior)
    hump = 0.5 * np.sin(np.pi * grid.x / grid.length)
    return {
        "bump_zero": Observable(id="bump_zero", kind="bump", center=zero),
        "bump_pos": Observable(id="bump_pos", kind="bump", center=hump),
        "bump_neg": Observable(id="bump_neg", kind="bump", center=-hump),
        "clip_norm_1": Observable(id="clip_norm_1", kind="clip_norm", cap=1.0),
        "clip_norm_2": Observable(id="clip_norm_2", kind="clip_norm", cap=2.0),
    }


def _resolve_observable(grid: Grid1D, observable_id: str) -> Observable:
    battery = observable_battery(grid)
    if observable_id not in battery:
        raise ValueError(
            f"unknown observable id {observable_id!r}; valid: {sorted(battery)}")
    return battery[observable_id]


# -- occupation averages ----------------------------------------------------


@dataclass(frozen=True)
class OccupationSummary:
    """Cesaro averages of the battery at window ends along one path.

    ``averages[m, j]`` is the time average of observable j over [0, T_m]
    with T_m the end of window m; ``discrepancies[m - 1, j]`` is the gap
    |avg_m - avg_{m-1}| whose decay tracks Cesaro stabilization.
    """

    observable_ids: tuple
    window_length: float
    averages: np.ndarray
    discrepancies: np.ndarray
    seed: int

    @property
    def n_windows(self) -> int:
        return self.averages.shape[0]


def long_run(u0: Field, c: Coefficients, T_long: float, window: float,
             seed: int, dt: float,
             dissipativity: Optional[DissipativityReport] = None,
             settings: SolverSettings = DEFAULT_SETTINGS) -> OccupationSummary:
    """Single unit-noise path with cumulative occupation averages.

    Needs at least two whole windows.  If a dissipativity report is
    supplied and failed, a warning is emitted: without dissipativity the
    time averages have no reason to stay tight.
    """
    if dissipativity is not None and not dissipativity.passed:
        warnings.warn("dissipativity check failed; occupation averages may drift",
                      stacklevel=2)
    w_steps = int(round(window / dt))
    n_win = int(round(T_long / window))
    if w_steps < 1 or n_win < 2:
        raise ValueError("need window >= dt and at least two whole windows")
    N = w_steps * n_win
    path = sample_path(seed, N, dt)
    traj = solve_spde(u0, _INVARIANT_EPS, path, None, c, settings)

    battery = observable_battery(u0.grid)
    ids = tuple(sorted(battery))
    h = u0.grid.h_x
    # step-function convention: the state on (t_k-1, t_k] is u_k
    phi = np.empty((N, len(ids)))
    for k in range(1, N + 1):
        for j, oid in enumerate(ids):
            phi[k - 1, j] = battery[oid](traj.b_values[k], h)
    csum = np.cumsum(phi, axis=0)
    ends = np.arange(1, n_win + 1) * w_steps
    averages = csum[ends - 1] / ends[:, None]
    discrepancies = np.abs(np.diff(averages, axis=0))
    return OccupationSummary(observable_ids=ids, window_length=window,
                             averages=averages, discrepancies=discrepancies,
                             seed=seed)


def occupation_rows_csv(summary: OccupationSummary):
    """CSV rows window_index,observable_id,average,discrepancy_prev."""
    rows = []
    for m in range(summary.n_windows):
        for j, oid in enumerate(summary.observable_ids):
            prev = summary.discrepancies[m - 1, j] if m >= 1 else float("nan")
            rows.append(f"{m},{oid},{summary.averages[m, j]:.17g},{prev:.17g}")
    return rows


# -- moment bound -----------------------------------------------------------


@dataclass(frozen=True)
class MomentBoundReport:
    lhs: float
    rhs: float
    delta: float
    horizon: float
    slack: float
    passed: bool

    def to_jsonable(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "delta": self.delta,
                "horizon": self.horizon, "slack": self.slack, "passed": self.passed}


def time_avg_lp_norm(traj: Trajectory, p: float) -> float:
    """(1/T) int |u(t)|_{L2}^p dt along the right-continuous step view."""
    h = traj.grid.h_x
    norms_sq = h * np.sum(traj.values[1:] ** 2, axis=1)
    return float(np.mean(norms_sq ** (p / 2.0)))


def moment_bound_check(c: Coefficients, delta: float, u0: Field, horizon: float,
                       lhs: float, slack: float = 0.0) -> MomentBoundReport:
    """Check the dissipativity-driven time-average bound.

    ``lhs`` is the empirical time average of |u|_{L2}^p (typically an
    ensemble mean of ``time_avg_lp_norm`` values); rhs is
    (2 K1 L + |u0|_{L2}^2 / T) / delta.  delta must be positive, normally
    the delta_hat of a passing dissipativity report.
    """
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    h = u0.grid.h_x
    u0_sq = h * float(np.dot(u0.values, u0.values))
    rhs = (2.0 * c.flux.K1 * u0.grid.length + u0_sq / horizon) / delta
    return MomentBoundReport(lhs=float(lhs), rhs=rhs, delta=delta, horizon=horizon,
                             slack=slack, passed=lhs <= rhs * (1.0 + slack))


# -- semigroup estimation ---------------------------------------------------


@dataclass(frozen=True)
class SemigroupEstimate:
    value: float
    std_error: float
    n_paths: int
    n_failed: int


def _observable_at_end(obs: Observable, traj: Trajectory) -> tuple:
    return (obs(traj.b_values[-1], traj.grid.h_x),)


def semigroup_estimate(observable_id: str, v: Field, t: float, M_paths: int,
                       base_seed: int, c: Coefficients, n_steps: int = 16,
                       workers: int = 1,
                       settings: SolverSettings = DEFAULT_SETTINGS) -> SemigroupEstimate:
    """Monte Carlo estimate of the semigroup action E[phi(b(u(t, v)))].

    At t = 0 no paths are needed: the value is phi(b(v)) exactly with
    zero standard error.
    """
    obs = _resolve_observable(v.grid, observable_id)
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    if t == 0:
        val = obs(np.asarray(c.b.value(v.values)), v.grid.h_x)
        return SemigroupEstimate(value=float(val), std_error=0.0, n_paths=0, n_failed=0)
    cfg = EnsembleConfig(u0=v, c=c, T=t, N=n_steps, M_paths=M_paths,
                         base_seed=base_seed, eps=_INVARIANT_EPS, settings=settings)
    results, failures = map_paths(cfg, partial(_observable_at_end, obs), workers=workers)
    if not results:
        raise EnsembleError("no path survived the semigroup estimate")
    vals = np.array([x for _, (x,) in results])
    se = float(np.std(vals, ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
    return SemigroupEstimate(value=float(np.mean(vals)), std_error=se,
                             n_paths=len(results), n_failed=len(failures))
