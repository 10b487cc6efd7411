"""Desk-scale numerical laboratory for a doubly nonlinear stochastic PDE.

The model is d b(u) = div a(grad u) dt + sqrt(eps) sigma(u) dW on an
interval with homogeneous Dirichlet boundary, discretized by a
semi-implicit scheme that keeps the noise coefficient explicit.  The
package covers deterministic controlled solves, small-noise Monte Carlo,
rare-event rate-function optimization, and invariant-measure diagnostics.
"""

__version__ = "0.1.0"
