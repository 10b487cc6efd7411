"""Stochastic paths and ensembles for the small-noise equation.

Brownian increments come from a counter-based generator keyed on
(seed, step index): increment k is the first raw output of the Philox
block with counter k, mapped through the inverse normal CDF.  Any single
increment is therefore recomputable in isolation, paths are bitwise
reproducible, and ensembles can be distributed over workers without
changing a single bit of the result: per-path seeds are base_seed XOR
path_index and the reduction always runs in ascending path order in the
parent process.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Callable, Optional

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

from .coefficients import Coefficients
from .dynamics import (
    DEFAULT_SETTINGS,
    Control,
    SolverSettings,
    Trajectory,
    _run_steps,
)
from .errors import EnsembleError, SolverError
from .grid import Field, gradient_values

__all__ = [
    "NoisePath",
    "sample_path",
    "increment_at",
    "solve_spde",
    "EnsembleConfig",
    "MomentReport",
    "ensemble_stats",
    "map_paths",
    "ensemble_rows",
]


@dataclass(frozen=True)
class NoisePath:
    """Brownian increments dW_1 .. dW_N with variance tau each."""

    seed: int
    tau: float
    increments: np.ndarray

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 1:
            raise ValueError("increments must be a 1-D array")
        object.__setattr__(self, "increments", inc)

    @property
    def n_steps(self) -> int:
        return self.increments.size


def _raw_to_normal(raw: np.ndarray) -> np.ndarray:
    # top 53 bits -> uniform strictly inside (0, 1) -> inverse CDF
    u = (raw >> np.uint64(11)) * 2.0**-53 + 2.0**-54
    return ndtri(u)


def sample_path(seed: int, N: int, tau: float) -> NoisePath:
    """Sample a full path; increment k comes from Philox counter block k."""
    if N < 0:
        raise ValueError("N must be nonnegative")
    if not (tau > 0):
        raise ValueError("tau must be positive")
    if N == 0:
        return NoisePath(seed=seed, tau=tau, increments=np.empty(0))
    raws = Philox(key=seed).random_raw(4 * N)[::4]
    return NoisePath(seed=seed, tau=tau, increments=_raw_to_normal(raws) * np.sqrt(tau))


def increment_at(seed: int, k: int, tau: float) -> float:
    """Recompute increment k of :func:`sample_path` in isolation, bit for bit."""
    raw = Philox(counter=k, key=seed).random_raw(1)
    return float(_raw_to_normal(raw)[0] * np.sqrt(tau))


def solve_spde(u0: Field, eps: float, path: NoisePath,
               shift: Optional[Control], c: Coefficients,
               settings: SolverSettings = DEFAULT_SETTINGS) -> Trajectory:
    """March the semi-implicit scheme with noise and optional control shift.

    Step forcing is tau h_{k+1} + sqrt(eps) dW_{k+1}, multiplying
    sigma(u_k) nodewise.  With eps = 0 and no shift this reduces exactly
    (bitwise) to the zero-control deterministic solve.
    """
    if eps < 0:
        raise ValueError(f"eps must be nonnegative, got {eps}")
    forcings = np.sqrt(eps) * path.increments
    if shift is not None:
        if shift.n_steps != path.n_steps or abs(shift.tau - path.tau) > 1e-12 * path.tau:
            raise ValueError("shift control and noise path disagree on the time grid")
        forcings = forcings + shift.tau * shift.values
    return _run_steps(u0.values, forcings, path.tau, c, u0.grid, settings)


@dataclass(frozen=True)
class EnsembleConfig:
    """Everything needed to reproduce one ensemble."""

    u0: Field
    c: Coefficients
    T: float
    N: int
    M_paths: int
    base_seed: int
    eps: float
    shift: Optional[Control] = None
    settings: SolverSettings = DEFAULT_SETTINGS

    def __post_init__(self):
        if self.N < 1 or self.M_paths < 1:
            raise ValueError("N and M_paths must be at least 1")
        if not (self.T > 0):
            raise ValueError("T must be positive")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.base_seed < 0:
            raise ValueError("base_seed must be a nonnegative integer")

    @property
    def tau(self) -> float:
        return self.T / self.N

    def path_seed(self, index: int) -> int:
        return self.base_seed ^ index


def _solve_indexed_path(cfg: EnsembleConfig, index: int) -> Trajectory:
    path = sample_path(cfg.path_seed(index), cfg.N, cfg.tau)
    return solve_spde(cfg.u0, cfg.eps, path, cfg.shift, cfg.c, cfg.settings)


def _map_one(args):
    cfg, index, per_path = args
    try:
        return index, per_path(_solve_indexed_path(cfg, index)), None
    except SolverError as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


def map_paths(cfg: EnsembleConfig, per_path: Callable[[Trajectory], tuple],
              workers: int = 1, max_failure_fraction: float = 0.1):
    """Apply a picklable per-trajectory functional to every path.

    Returns (results, failures): ``results`` is a list of
    (path_index, value) for successful paths in ascending index order,
    ``failures`` a list of (path_index, message).  Raises
    :class:`EnsembleError` when more than ``max_failure_fraction`` of the
    paths fail.  The outcome does not depend on ``workers``.
    """
    if workers < 1:
        raise ValueError("workers must be at least 1")
    jobs = [(cfg, i, per_path) for i in range(cfg.M_paths)]
    if workers == 1:
        outcomes = [_map_one(job) for job in jobs]
    else:
        chunk = max(1, cfg.M_paths // (workers * 8))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_map_one, jobs, chunksize=chunk))
    results = [(i, val) for i, val, err in outcomes if err is None]
    failures = [(i, err) for i, _, err in outcomes if err is not None]
    if len(failures) > max_failure_fraction * cfg.M_paths:
        raise EnsembleError(
            f"{len(failures)} of {cfg.M_paths} paths failed "
            f"(> {max_failure_fraction:.0%}); first: {failures[0]}")
    return results, failures


@dataclass(frozen=True)
class MomentReport:
    """Ensemble moment estimates with their Monte Carlo standard errors.

    ``sup_b_sq`` estimates E[sup_t |b(u)|^2], ``sup_b_4`` the fourth
    moment E[sup_t |b(u)|^4], and ``int_w1p_p_sq`` the squared space-time
    gradient integral E[(int |u|_{W^{1,p}}^p dt)^2].
    """

    sup_b_sq: float
    sup_b_4: float
    int_w1p_p_sq: float
    se_sup_b_sq: float
    se_sup_b_4: float
    se_int_w1p_p_sq: float
    n_paths: int
    n_failed: int
    rows: tuple  # (path_index, seed, sup_b_sq, sup_b_4, int_w1p_p_sq, converged)

    def to_jsonable(self) -> dict:
        return {
            "sup_b_sq": self.sup_b_sq,
            "sup_b_4": self.sup_b_4,
            "int_w1p_p_sq": self.int_w1p_p_sq,
            "se_sup_b_sq": self.se_sup_b_sq,
            "se_sup_b_4": self.se_sup_b_4,
            "se_int_w1p_p_sq": self.se_int_w1p_p_sq,
            "n_paths": self.n_paths,
            "n_failed": self.n_failed,
        }


def _moment_functionals(p: float, traj: Trajectory) -> tuple:
    h = traj.grid.h_x
    sup_b_sq = float(np.max(h * np.sum(traj.b_values**2, axis=1)))
    int_w1p = 0.0
    for k in range(1, traj.times.size):
        g = gradient_values(traj.values[k], h)
        int_w1p += h * float(np.sum(np.abs(g) ** p))
    int_w1p *= traj.tau
    return sup_b_sq, sup_b_sq**2, int_w1p**2


def _mean_se(x: np.ndarray):
    m = float(np.mean(x))
    if x.size < 2:
        return m, 0.0
    return m, float(np.std(x, ddof=1) / np.sqrt(x.size))


def ensemble_stats(cfg: EnsembleConfig, workers: int = 1) -> MomentReport:
    """Moment estimates over an ensemble; fixed-order reduction."""
    per_path = partial(_moment_functionals, cfg.c.flux.p)
    results, failures = map_paths(cfg, per_path, workers=workers)
    if not results:
        raise EnsembleError("no path survived; cannot form moment estimates")
    vals = np.array([v for _, v in results])
    m2, se2 = _mean_se(vals[:, 0])
    m4, se4 = _mean_se(vals[:, 1])
    mw, sew = _mean_se(vals[:, 2])
    failed = {i for i, _ in failures}
    rows = []
    by_index = dict(results)
    for i in range(cfg.M_paths):
        if i in failed:
            rows.append((i, cfg.path_seed(i), float("nan"), float("nan"), float("nan"), 0))
        else:
            s2, s4, w = by_index[i]
            rows.append((i, cfg.path_seed(i), s2, s4, w, 1))
    return MomentReport(
        sup_b_sq=m2, sup_b_4=m4, int_w1p_p_sq=mw,
        se_sup_b_sq=se2, se_sup_b_4=se4, se_int_w1p_p_sq=sew,
        n_paths=len(results), n_failed=len(failures), rows=tuple(rows),
    )


def ensemble_rows(report: MomentReport):
    """CSV rows path_index,seed,sup_B_l2_sq,sup_B_l2_4,int_w1p_p_sq,converged."""
    out = []
    for i, seed, s2, s4, w, ok in report.rows:
        out.append(f"{i},{seed},{s2:.17g},{s4:.17g},{w:.17g},{ok}")
    return out
