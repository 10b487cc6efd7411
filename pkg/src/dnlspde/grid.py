"""Uniform 1-D Dirichlet grid, node/edge fields, and discrete calculus.

The domain (0, L) is split into ``n_interior + 1`` cells of width
``h_x = L / (n_interior + 1)``.  Node fields carry interior values only;
the homogeneous Dirichlet boundary values are implicit zeros.  Edge fields
live on the ``n_interior + 1`` cell interfaces.  The gradient maps nodes
to edges by forward differencing against the ghost zeros, the divergence
maps edges back to nodes, and the pair is an exact negative adjoint under
the ``h_x``-weighted inner products.  That summation-by-parts identity is
what makes the discrete energy estimates close without spurious boundary
terms, so it is enforced to near machine precision by the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigvalsh_tridiagonal, solveh_banded

from .errors import InvalidExponentError

__all__ = [
    "Grid1D",
    "Field",
    "EdgeField",
    "gradient",
    "divergence",
    "inner_l2",
    "norm_lq",
    "seminorm_w1p",
    "dual_norm_h1",
    "poincare_constant",
    "field_csv_header",
    "field_csv_row",
    "grid_metadata_json",
    "grid_from_metadata",
]


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid on (0, length) with homogeneous Dirichlet boundary.

    Parameters
    ----------
    n_interior : int
        Number of interior nodes, at least 1.
    length : float
        Domain length L, strictly positive.
    """

    n_interior: int
    length: float

    def __post_init__(self):
        if not isinstance(self.n_interior, (int, np.integer)) or self.n_interior < 1:
            raise ValueError(f"n_interior must be a positive integer, got {self.n_interior!r}")
        if not np.isfinite(self.length) or self.length <= 0:
            raise ValueError(f"length must be finite and positive, got {self.length!r}")

    @property
    def h_x(self) -> float:
        """Cell width L / (n_interior + 1)."""
        return self.length / (self.n_interior + 1)

    @property
    def x(self) -> np.ndarray:
        """Interior node coordinates h_x, 2 h_x, ..., n_interior h_x."""
        return self.h_x * np.arange(1, self.n_interior + 1)

    @property
    def x_edges(self) -> np.ndarray:
        """Edge midpoint coordinates of the n_interior + 1 cell interfaces."""
        return self.h_x * (np.arange(self.n_interior + 1) + 0.5)


def _as_values(grid: Grid1D, values, size: int, what: str) -> np.ndarray:
    vals = np.asarray(values, dtype=float)
    if vals.shape != (size,):
        raise ValueError(f"{what} expects shape ({size},), got {vals.shape}")
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"{what} values must be finite")
    return vals


@dataclass(frozen=True)
class Field:
    """Interior node values of a scalar field; boundary values are zero."""

    grid: Grid1D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(
            self, "values", _as_values(self.grid, self.values, self.grid.n_interior, "Field")
        )


@dataclass(frozen=True)
class EdgeField:
    """Values on the n_interior + 1 cell interfaces (e.g. fluxes, gradients)."""

    grid: Grid1D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(
            self,
            "values",
            _as_values(self.grid, self.values, self.grid.n_interior + 1, "EdgeField"),
        )


# -- array-level kernels ----------------------------------------------------
# The time steppers run these on bare arrays; the Field wrappers above are
# for the public API and serialization boundaries.


def gradient_values(u: np.ndarray, h_x: float) -> np.ndarray:
    """Forward-difference gradient on edges, ghost zeros at both ends."""
    n = u.shape[0]
    g = np.empty(n + 1)
    g[0] = u[0]
    g[1:n] = u[1:] - u[:-1]
    g[n] = -u[-1]
    g /= h_x
    return g


def divergence_values(F: np.ndarray, h_x: float) -> np.ndarray:
    """Difference of adjacent edge values at each interior node."""
    return (F[1:] - F[:-1]) / h_x


def lq_norm_values(vals: np.ndarray, h_x: float, q: float) -> float:
    if q < 1:
        raise InvalidExponentError(f"Lq norm needs q >= 1, got {q}")
    if np.isinf(q):
        return float(np.max(np.abs(vals))) if vals.size else 0.0
    return float((h_x * np.sum(np.abs(vals) ** q)) ** (1.0 / q))


# -- public operations ------------------------------------------------------


def gradient(f: Field) -> EdgeField:
    """Discrete gradient of a node field.

    Edge k carries (f_k - f_{k-1}) / h_x with the Dirichlet ghost values
    f_0 = f_{n+1} = 0, so a constant-1 interior profile produces nonzero
    gradients only on the two boundary edges.
    """
    return EdgeField(f.grid, gradient_values(f.values, f.grid.h_x))


def divergence(F: EdgeField) -> Field:
    """Discrete divergence of an edge field, the exact negative adjoint of
    :func:`gradient` under the h_x-weighted inner products."""
    return Field(F.grid, divergence_values(F.values, F.grid.h_x))


def inner_l2(a, b) -> float:
    """h_x-weighted inner product of two like-shaped fields."""
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")
    if a.values.shape != b.values.shape:
        raise ValueError("node/edge field mismatch in inner product")
    return float(a.grid.h_x * np.dot(a.values, b.values))


def norm_lq(f: Field, q: float) -> float:
    """Weighted l^q norm (h_x sum |f_i|^q)^(1/q); q must be >= 1."""
    return lq_norm_values(f.values, f.grid.h_x, q)


def seminorm_w1p(f: Field, p: float) -> float:
    """W^{1,p} seminorm: the weighted l^p norm of the discrete gradient.

    With Dirichlet ghosts this is a genuine norm on interior fields; a
    single-node field of height 1 on the unit interval has seminorm 2 for
    every p because both edge slopes are +-2.
    """
    if p <= 1:
        raise InvalidExponentError(f"W1p seminorm needs p > 1, got {p}")
    return lq_norm_values(gradient_values(f.values, f.grid.h_x), f.grid.h_x, p)


def _stiffness_upper_banded(grid: Grid1D) -> np.ndarray:
    """Second-difference Dirichlet stiffness K in solveh_banded upper form."""
    n, h = grid.n_interior, grid.h_x
    if n == 1:
        # bandwidth must not exceed the matrix size
        return np.array([[2.0 / h**2]])
    ab = np.zeros((2, n))
    ab[0, 1:] = -1.0 / h**2
    ab[1, :] = 2.0 / h**2
    return ab


def dual_norm_h1(f: Field) -> float:
    """Discrete H^{-1} proxy norm sqrt(<f, K^{-1} f>_{h_x}).

    K is the second-difference Dirichlet stiffness operator; one symmetric
    tridiagonal solve per evaluation.  Stands in for the W^{-1,p'} norm in
    the time-regularity diagnostics.
    """
    w = solveh_banded(_stiffness_upper_banded(f.grid), f.values, check_finite=False)
    val = f.grid.h_x * float(np.dot(f.values, w))
    # K is positive definite; tiny negative round-off is clipped.
    return float(np.sqrt(max(val, 0.0)))


def poincare_constant(grid: Grid1D) -> float:
    """Constant C_P with dual_norm_h1(f) <= C_P * norm_lq(f, 2).

    Computed from the smallest eigenvalue of the stiffness operator,
    C_P = lambda_min(K)^{-1/2}.
    """
    n, h = grid.n_interior, grid.h_x
    d = np.full(n, 2.0 / h**2)
    e = np.full(max(n - 1, 0), -1.0 / h**2)
    if n == 1:
        lam_min = d[0]
    else:
        lam_min = eigvalsh_tridiagonal(d, e, select="i", select_range=(0, 0))[0]
    return float(1.0 / np.sqrt(lam_min))


# -- serialization ----------------------------------------------------------

_FMT = "{:.17g}"


def field_csv_header(grid: Grid1D) -> str:
    return "t," + ",".join(f"x_{i}" for i in range(1, grid.n_interior + 1))


def field_csv_row(t: float, f: Field) -> str:
    return ",".join([_FMT.format(t)] + [_FMT.format(v) for v in f.values])


def grid_metadata_json(grid: Grid1D) -> str:
    return json.dumps({"n_interior": grid.n_interior, "length": grid.length}, sort_keys=True)


def grid_from_metadata(text: str) -> Grid1D:
    meta = json.loads(text)
    return Grid1D(n_interior=int(meta["n_interior"]), length=float(meta["length"]))
