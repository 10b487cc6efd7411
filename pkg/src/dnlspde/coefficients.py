"""Problem coefficients: flux a, saturation b, noise sigma.

All evaluation rules are data-driven (a kind tag plus numeric parameters)
so coefficient sets can be pickled to worker processes and written to
config files.  Each carries the structural constants used by the energy
estimates: growth/coercivity constants for the flux, the derivative
bounds of the saturation, and the Lipschitz constant of the noise.

Built-in assumption checks draw heavy-tailed samples and report
violations as data (witness points), never as exceptions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InverseNonconvergedError

__all__ = [
    "FluxFunction",
    "BFunction",
    "NoiseFunction",
    "Coefficients",
    "p_laplacian_flux",
    "linear_flux",
    "custom_flux",
    "linear_b",
    "wave_b",
    "linear_noise",
    "quadratic_noise",
    "zero_noise",
    "apply_flux",
    "b_inverse",
    "b_inverse_values",
    "validate_assumptions",
    "AssumptionCheck",
    "ValidationReport",
    "coefficients_from_config",
]

_DELTA_REG_DEFAULT = 1e-10


@dataclass(frozen=True)
class FluxFunction:
    """Monotone flux a(xi) with p-growth.

    Stored constants satisfy a(xi) xi >= C1 |xi|^p - K1 and
    |a(xi)| <= C2 |xi|^{p-1} + K2.  The derivative is regularized by
    ``delta_reg`` near xi = 0 (the residual itself never is), which keeps
    Newton matrices invertible on flat profiles without biasing solutions.
    """

    kind: str
    p: float
    c_lin: float = 0.0
    c_plap: float = 1.0
    delta_reg: float = _DELTA_REG_DEFAULT
    C1: float = 1.0
    C2: float = 1.0
    K1: float = 0.0
    K2: float = 0.0

    def value(self, xi):
        xi = np.asarray(xi, dtype=float)
        if self.kind == "linear":
            return xi.copy()
        if self.kind == "p_laplacian":
            return np.abs(xi) ** (self.p - 2) * xi
        if self.kind == "custom":
            return self.c_lin * xi + self.c_plap * np.abs(xi) ** (self.p - 2) * xi
        raise ValueError(f"unknown flux kind {self.kind!r}")

    def deriv(self, xi):
        xi = np.asarray(xi, dtype=float)
        if self.kind == "linear":
            return np.ones_like(xi)
        smooth = (xi * xi + self.delta_reg**2) ** ((self.p - 2) / 2)
        if self.kind == "p_laplacian":
            return (self.p - 1) * smooth
        if self.kind == "custom":
            return self.c_lin + self.c_plap * (self.p - 1) * smooth
        raise ValueError(f"unknown flux kind {self.kind!r}")


def p_laplacian_flux(p: float, delta_reg: float = _DELTA_REG_DEFAULT) -> FluxFunction:
    """a(xi) = |xi|^{p-2} xi with p > 2; C1 = C2 = 1, K1 = K2 = 0."""
    if p <= 2:
        raise ValueError(f"p_laplacian flux needs p > 2, got {p}")
    return FluxFunction(kind="p_laplacian", p=p, delta_reg=delta_reg)


def linear_flux() -> FluxFunction:
    """a(xi) = xi, the p = 2 degenerate member kept for linear oracles."""
    return FluxFunction(kind="linear", p=2.0)


def custom_flux(c_lin: float, c_plap: float, p: float,
                delta_reg: float = _DELTA_REG_DEFAULT) -> FluxFunction:
    """a(xi) = c_lin xi + c_plap |xi|^{p-2} xi from a tabulated parameter set.

    Needs c_plap > 0 and c_lin >= 0 so the coercivity constant stays
    positive: C1 = c_plap, K1 = 0, C2 = c_lin + c_plap, K2 = c_lin.
    """
    if p <= 2:
        raise ValueError(f"custom flux needs p > 2, got {p}")
    if c_plap <= 0 or c_lin < 0:
        raise ValueError("custom flux needs c_plap > 0 and c_lin >= 0")
    return FluxFunction(
        kind="custom", p=p, c_lin=c_lin, c_plap=c_plap, delta_reg=delta_reg,
        C1=c_plap, C2=c_lin + c_plap, K1=0.0, K2=c_lin,
    )


@dataclass(frozen=True)
class BFunction:
    """Saturation b with b(0) = 0 and 0 < C3 <= b' <= C4.

    ``lip_deriv`` bounds |b'(r1) - b'(r2)| / |r1 - r2|.
    """

    kind: str
    beta: float
    gamma: float = 0.0
    C3: float = 1.0
    C4: float = 1.0
    lip_deriv: float = 0.0

    def value(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "linear":
            return self.beta * r
        if self.kind == "wave":
            return self.beta * r + self.gamma * np.sin(r)
        raise ValueError(f"unknown saturation kind {self.kind!r}")

    def deriv(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "linear":
            return np.full_like(r, self.beta)
        if self.kind == "wave":
            return self.beta + self.gamma * np.cos(r)
        raise ValueError(f"unknown saturation kind {self.kind!r}")


def linear_b(beta: float = 1.0) -> BFunction:
    if beta <= 0:
        raise ValueError(f"linear saturation needs beta > 0, got {beta}")
    return BFunction(kind="linear", beta=beta, C3=beta, C4=beta, lip_deriv=0.0)


def wave_b(beta: float = 2.0, gamma: float = 1.0) -> BFunction:
    """b(r) = beta r + gamma sin(r); needs beta - gamma > 0 and gamma >= 0."""
    if gamma < 0:
        raise ValueError(f"wave saturation needs gamma >= 0, got {gamma}")
    if beta - gamma <= 0:
        raise ValueError(f"wave saturation needs beta > gamma, got beta={beta} gamma={gamma}")
    return BFunction(kind="wave", beta=beta, gamma=gamma,
                     C3=beta - gamma, C4=beta + gamma, lip_deriv=gamma)


@dataclass(frozen=True)
class NoiseFunction:
    """Noise amplitude sigma with sigma(0) = 0 and Lipschitz bound.

    ``linear``      sigma(r) = scale * r                       (lip = scale)
    ``quadratic``   sigma(r) = scale * sign(r) min(r^2, |r|)   (lip = 2 scale)

    The quadratic kind vanishes superlinearly at 0, which is what the
    dissipativity condition demands for p > 2: a linear noise always loses
    to the p-homogeneous flux term at small amplitudes.
    """

    kind: str
    scale: float

    @property
    def lipschitz(self) -> float:
        return self.scale if self.kind == "linear" else 2.0 * self.scale

    def value(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "linear":
            return self.scale * r
        if self.kind == "quadratic":
            return self.scale * np.sign(r) * np.minimum(r * r, np.abs(r))
        raise ValueError(f"unknown noise kind {self.kind!r}")


def linear_noise(scale: float = 1.0) -> NoiseFunction:
    if scale < 0:
        raise ValueError("noise scale must be nonnegative")
    return NoiseFunction(kind="linear", scale=scale)


def quadratic_noise(lipschitz: float = 1.0) -> NoiseFunction:
    if lipschitz < 0:
        raise ValueError("noise Lipschitz constant must be nonnegative")
    return NoiseFunction(kind="quadratic", scale=lipschitz / 2.0)


def zero_noise() -> NoiseFunction:
    return NoiseFunction(kind="linear", scale=0.0)


@dataclass(frozen=True)
class Coefficients:
    """The full coefficient triple (a, b, sigma)."""

    flux: FluxFunction
    b: BFunction
    sigma: NoiseFunction


# -- operations -------------------------------------------------------------


def apply_flux(flux: FluxFunction, G):
    """Edgewise flux evaluation; accepts an EdgeField or a bare array."""
    from .grid import EdgeField  # local import to avoid a cycle

    if isinstance(G, EdgeField):
        return EdgeField(G.grid, flux.value(G.values))
    return flux.value(np.asarray(G, dtype=float))


def b_inverse_values(b: BFunction, y: np.ndarray, tol: float = 1e-12,
                     max_iter: int = 200) -> np.ndarray:
    """Vectorized safeguarded Newton for b(r) = y.

    Since b(0) = 0 and C3 <= b' the root lies in [0, y/C3] (signed), which
    seeds the bisection bracket.  Terminates when |b(r) - y| <= tol * C3,
    so the root error is at most tol.
    """
    y = np.asarray(y, dtype=float)
    hi = np.maximum(y / b.C3, 0.0)
    lo = np.minimum(y / b.C3, 0.0)
    r = y / b.C4  # underestimate of the root magnitude, inside the bracket
    target = tol * b.C3
    for _ in range(max_iter):
        f = b.value(r) - y
        if np.all(np.abs(f) <= target):
            return r
        # shrink the bracket around the sign change
        lo = np.where(f < 0, r, lo)
        hi = np.where(f > 0, r, hi)
        step = f / b.deriv(r)
        cand = r - step
        bad = (cand <= lo) | (cand >= hi) | ~np.isfinite(cand)
        r = np.where(bad & (np.abs(f) > target), 0.5 * (lo + hi),
                     np.where(np.abs(f) > target, cand, r))
    f = b.value(r) - y
    worst = int(np.argmax(np.abs(f)))
    raise InverseNonconvergedError(
        f"saturation inverse stalled: residual {float(np.abs(f).max()):.3e} > {target:.3e}",
        bracket=(float(np.ravel(lo)[worst]), float(np.ravel(hi)[worst])),
    )


def b_inverse(b: BFunction, y: float, tol: float = 1e-12) -> float:
    """Scalar inverse of the saturation function; |b(r) - y| <= tol * C3."""
    return float(b_inverse_values(b, np.array([float(y)]), tol=tol)[0])


# -- assumption validation --------------------------------------------------


@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    passed: bool
    witness: Optional[dict]
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple
    sample_count: int
    seed: int
    observed: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_jsonable(self) -> dict:
        return {
            "passed": self.passed,
            "sample_count": self.sample_count,
            "seed": self.seed,
            "observed": {k: float(v) for k, v in self.observed.items()},
            "checks": [
                {"name": c.name, "passed": c.passed, "witness": c.witness, "detail": c.detail}
                for c in self.checks
            ],
        }


def _first_violation(mask: np.ndarray, **arrays) -> Optional[dict]:
    idx = np.flatnonzero(~mask)
    if idx.size == 0:
        return None
    i = int(idx[0])
    return {k: float(v[i]) for k, v in arrays.items()}


def validate_assumptions(c: Coefficients, sample_count: int = 100_000,
                         seed: int = 0) -> ValidationReport:
    """Sample-based check of the structural assumptions on (a, b, sigma).

    Draws Cauchy samples so the tails get probed, evaluates each assumed
    inequality with a relative round-off allowance, and records the first
    violating sample as a witness.  Failures are reported, not raised.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_cauchy(sample_count)
    y = rng.standard_cauchy(sample_count)
    # make sure the origin and near-origin region are always probed
    x[:4] = [0.0, 1e-8, -1e-8, 1.0]
    y[:4] = [0.0, -1e-8, 1e-8, -1.0]

    flux, b, sig = c.flux, c.b, c.sigma
    checks = []

    ax, ay = flux.value(x), flux.value(y)
    mono = (ax - ay) * (x - y)
    slack = 1e-9 * (np.abs(ax * x) + np.abs(ay * y) + 1.0)
    m = mono >= -slack
    checks.append(AssumptionCheck(
        "flux_monotone", bool(m.all()), _first_violation(m, xi1=x, xi2=y, product=mono),
        "(a(xi1) - a(xi2)) (xi1 - xi2) >= 0"))

    coer = ax * x - (flux.C1 * np.abs(x) ** flux.p - flux.K1)
    slack = 1e-9 * (np.abs(ax * x) + flux.C1 * np.abs(x) ** flux.p + flux.K1 + 1.0)
    m = coer >= -slack
    checks.append(AssumptionCheck(
        "flux_coercive", bool(m.all()), _first_violation(m, xi=x, margin=coer),
        "a(xi) xi >= C1 |xi|^p - K1"))

    grow = flux.C2 * np.abs(x) ** (flux.p - 1) + flux.K2 - np.abs(ax)
    slack = 1e-9 * (np.abs(ax) + flux.C2 * np.abs(x) ** (flux.p - 1) + flux.K2 + 1.0)
    m = grow >= -slack
    checks.append(AssumptionCheck(
        "flux_bounded", bool(m.all()), _first_violation(m, xi=x, margin=grow),
        "|a(xi)| <= C2 |xi|^{p-1} + K2"))

    b0 = float(b.value(0.0))
    checks.append(AssumptionCheck(
        "b_zero_at_origin", abs(b0) <= 1e-14, None if abs(b0) <= 1e-14 else {"b0": b0},
        "b(0) = 0"))

    bp = b.deriv(x)
    m = (bp >= b.C3 * (1 - 1e-12) - 1e-12) & (bp <= b.C4 * (1 + 1e-12) + 1e-12)
    checks.append(AssumptionCheck(
        "b_deriv_range", bool(m.all()), _first_violation(m, r=x, deriv=bp),
        "C3 <= b'(r) <= C4"))

    bq = b.deriv(y)
    lipgap = b.lip_deriv * np.abs(x - y) - np.abs(bp - bq)
    slack = 1e-9 * (np.abs(bp) + np.abs(bq) + b.lip_deriv * np.abs(x - y) + 1.0)
    m = lipgap >= -slack
    checks.append(AssumptionCheck(
        "b_deriv_lipschitz", bool(m.all()), _first_violation(m, r1=x, r2=y, margin=lipgap),
        "|b'(r1) - b'(r2)| <= lip |r1 - r2|"))

    bx, by = b.value(x), b.value(y)
    rev = np.abs(bx - by) / b.C3 - np.abs(x - y)
    slack = 1e-9 * (np.abs(bx) + np.abs(by) + np.abs(x - y) + 1.0)
    m = rev >= -slack
    checks.append(AssumptionCheck(
        "b_reverse_pointwise", bool(m.all()), _first_violation(m, r1=x, r2=y, margin=rev),
        "|r1 - r2| <= |b(r1) - b(r2)| / C3"))

    s0 = float(sig.value(0.0))
    checks.append(AssumptionCheck(
        "sigma_zero_at_origin", abs(s0) <= 1e-14, None if abs(s0) <= 1e-14 else {"sigma0": s0},
        "sigma(0) = 0"))

    sx, sy = sig.value(x), sig.value(y)
    lgap = sig.lipschitz * np.abs(x - y) - np.abs(sx - sy)
    slack = 1e-9 * (np.abs(sx) + np.abs(sy) + sig.lipschitz * np.abs(x - y) + 1.0)
    m = lgap >= -slack
    checks.append(AssumptionCheck(
        "sigma_lipschitz", bool(m.all()), _first_violation(m, r1=x, r2=y, margin=lgap),
        "|sigma(r1) - sigma(r2)| <= c_sigma |r1 - r2|"))

    observed = {
        "b_deriv_min": float(bp.min()),
        "b_deriv_max": float(bp.max()),
        "flux_abs_max": float(np.abs(ax).max()),
        "sample_abs_max": float(np.abs(x).max()),
    }
    return ValidationReport(checks=tuple(checks), sample_count=sample_count,
                            seed=seed, observed=observed)


# -- config -----------------------------------------------------------------

_FLUX_BUILDERS = {
    "p_laplacian": lambda d: p_laplacian_flux(float(d.get("p", 4.0))),
    "linear": lambda d: linear_flux(),
    "custom": lambda d: custom_flux(float(d.get("c_lin", 1.0)),
                                    float(d.get("c_plap", 1.0)),
                                    float(d.get("p", 4.0))),
}

_B_BUILDERS = {
    "linear": lambda d: linear_b(float(d.get("beta", 1.0))),
    "wave": lambda d: wave_b(float(d.get("beta", 2.0)), float(d.get("gamma", 1.0))),
}

_SIGMA_BUILDERS = {
    "linear": lambda d: linear_noise(float(d.get("sigma_lipschitz", 1.0))),
    "quadratic": lambda d: quadratic_noise(float(d.get("sigma_lipschitz", 1.0))),
    "zero": lambda d: zero_noise(),
}


def coefficients_from_config(block: dict) -> Coefficients:
    """Build a coefficient triple from a ``[coefficients]`` config block.

    Recognized keys: flux, p, c_lin, c_plap, b, beta, gamma, sigma,
    sigma_lipschitz.  Unknown kind names raise ValueError.
    """
    flux_kind = block.get("flux", "p_laplacian")
    if flux_kind not in _FLUX_BUILDERS:
        raise ValueError(f"unknown flux kind {flux_kind!r}; valid: {sorted(_FLUX_BUILDERS)}")
    b_kind = block.get("b", "wave")
    if b_kind not in _B_BUILDERS:
        raise ValueError(f"unknown saturation kind {b_kind!r}; valid: {sorted(_B_BUILDERS)}")
    sigma_kind = block.get("sigma", "linear")
    if sigma_kind not in _SIGMA_BUILDERS:
        raise ValueError(f"unknown noise kind {sigma_kind!r}; valid: {sorted(_SIGMA_BUILDERS)}")
    return Coefficients(
        flux=_FLUX_BUILDERS[flux_kind](block),
        b=_B_BUILDERS[b_kind](block),
        sigma=_SIGMA_BUILDERS[sigma_kind](block),
    )
