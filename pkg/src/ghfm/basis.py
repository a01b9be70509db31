"""B-spline bases on a bounded interval and the integrals built from them.

Everything the losses need is an integral of a product of piecewise
polynomials: the roughness matrix (second derivatives), the Gram matrix, and
the projections of observed curves onto the basis.  Products of splines are
integrated exactly with composite Gauss-Legendre rules on the knot spans;
curves known only at grid points are integrated through their
piecewise-linear interpolant.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class BasisSpec:
    """Clamped B-spline basis with equally spaced knots on ``[start, end]``.

    Parameters
    ----------
    order : int
        Spline order (polynomial degree + 1). Cubic splines have order 4.
    knot_count : int
        Number of distinct knots including both end points. The interval is
        split into ``knot_count - 1`` equal spans.
    domain_start, domain_end : float
        End points of the domain.
    """

    order: int
    knot_count: int
    domain_start: float = 0.0
    domain_end: float = 1.0

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 2:
            raise ValueError(f"order must be an integer >= 2, got {self.order}")
        if int(self.knot_count) != self.knot_count or self.knot_count < 2:
            raise ValueError(f"knot_count must be an integer >= 2, got {self.knot_count}")
        if not np.isfinite(self.domain_start) or not np.isfinite(self.domain_end):
            raise ValueError("domain end points must be finite")
        if self.domain_end <= self.domain_start:
            raise ValueError(
                f"domain length must be positive, got [{self.domain_start}, {self.domain_end}]"
            )

    @property
    def degree(self) -> int:
        return self.order - 1

    @property
    def dim(self) -> int:
        """Number of basis functions, ``(knot_count - 1) + degree``."""
        return self.knot_count - 1 + self.degree

    @property
    def length(self) -> float:
        return float(self.domain_end - self.domain_start)

    @property
    def breakpoints(self) -> np.ndarray:
        """Distinct knots, i.e. the end points of the polynomial pieces."""
        return np.linspace(self.domain_start, self.domain_end, self.knot_count)

    @property
    def knots(self) -> np.ndarray:
        """Full clamped knot vector (end knots repeated ``order`` times)."""
        bp = self.breakpoints
        return np.concatenate(
            [np.full(self.degree, bp[0]), bp, np.full(self.degree, bp[-1])]
        )

    def __call__(self, t, deriv: int = 0) -> np.ndarray:
        return eval_basis(self, t, deriv=deriv)

    # Matrices are cached on the instance; the spec itself is immutable.
    @cached_property
    def gram(self) -> np.ndarray:
        return gram_matrix(self)

    @cached_property
    def roughness(self) -> np.ndarray:
        return penalty_matrix(self)


def make_basis(order: int, knot_count: int, domain=(0.0, 1.0)) -> BasisSpec:
    """Construct a clamped B-spline basis from its order and knot count."""
    start, end = (float(v) for v in domain)
    return BasisSpec(int(order), int(knot_count), start, end)


def basis_with_dim(order: int, dim: int, domain=(0.0, 1.0)) -> BasisSpec:
    """Construct the basis of a given order and dimension ``L``.

    The number of equal spans is ``M = L - degree``; ``dim`` must leave at
    least one span.
    """
    knot_count = int(dim) - int(order) + 2
    if knot_count < 2:
        raise ValueError(f"dimension {dim} is too small for order {order}")
    return make_basis(order, knot_count, domain)


def _as_points(spec: BasisSpec, t, check: bool) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if check:
        tol = 1e-12 * max(1.0, spec.length)
        if np.any(t < spec.domain_start - tol) or np.any(t > spec.domain_end + tol):
            raise ValueError(
                f"evaluation points must lie in [{spec.domain_start}, {spec.domain_end}]"
            )
    return np.clip(t, spec.domain_start, spec.domain_end)


def _cox_de_boor(knots: np.ndarray, t: np.ndarray, order: int) -> np.ndarray:
    """All B-splines of ``order`` on ``knots`` evaluated at ``t``.

    Returns an array of shape ``(len(t), len(knots) - order)``.  Intervals are
    half-open except the last non-degenerate one, which is closed so that the
    right end point is covered.
    """
    n_int = len(knots) - 1
    left, right = knots[:-1], knots[1:]
    vals = ((t[:, None] >= left) & (t[:, None] < right)).astype(float)
    last = np.nonzero(right > left)[0][-1]
    at_end = t == knots[last + 1]
    vals[at_end, :] = 0.0
    vals[at_end, last] = 1.0
    for k in range(2, order + 1):
        nb = n_int - k + 1
        new = np.zeros((len(t), nb))
        for i in range(nb):
            d1 = knots[i + k - 1] - knots[i]
            d2 = knots[i + k] - knots[i + 1]
            if d1 > 0:
                new[:, i] += (t - knots[i]) / d1 * vals[:, i]
            if d2 > 0:
                new[:, i] += (knots[i + k] - t) / d2 * vals[:, i + 1]
        vals = new
    return vals


def eval_basis(spec: BasisSpec, t, deriv: int = 0, check: bool = True) -> np.ndarray:
    """Evaluate the basis (or a derivative of it) at points ``t``.

    Parameters
    ----------
    spec : BasisSpec
    t : float or array_like
        Evaluation points inside the domain.
    deriv : int
        Derivative order; values ``>= order`` give zeros.
    check : bool
        Raise if any point lies outside the domain.

    Returns
    -------
    ndarray of shape ``(len(t), L)``, or ``(L,)`` for scalar ``t``.
    """
    scalar = np.ndim(t) == 0
    pts = _as_points(spec, t, check)
    knots = spec.knots
    k = spec.order
    if deriv >= k:
        out = np.zeros((len(pts), spec.dim))
    else:
        vals = _cox_de_boor(knots, pts, k - deriv)
        # Raise the order one step at a time with the derivative recurrence.
        for q in range(k - deriv + 1, k + 1):
            nb = vals.shape[1] - 1
            new = np.zeros((len(pts), nb))
            for i in range(nb):
                d1 = knots[i + q - 1] - knots[i]
                d2 = knots[i + q] - knots[i + 1]
                if d1 > 0:
                    new[:, i] += vals[:, i] / d1
                if d2 > 0:
                    new[:, i] -= vals[:, i + 1] / d2
            vals = (q - 1) * new
        out = vals
    return out[0] if scalar else out


def gauss_legendre_rule(breakpoints, nodes_per_span: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights over consecutive spans.

    Exact for piecewise polynomials of degree ``2 * nodes_per_span - 1`` whose
    pieces join at ``breakpoints``.
    """
    bp = np.unique(np.asarray(breakpoints, dtype=float))
    x, w = np.polynomial.legendre.leggauss(int(nodes_per_span))
    a, b = bp[:-1], bp[1:]
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    t = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    return t, wt


def _product_integral(spec: BasisSpec, deriv: int) -> np.ndarray:
    t, w = gauss_legendre_rule(spec.breakpoints, spec.order)
    B = eval_basis(spec, t, deriv=deriv, check=False)
    M = B.T @ (w[:, None] * B)
    return 0.5 * (M + M.T)


def penalty_matrix(spec: BasisSpec) -> np.ndarray:
    """Roughness matrix ``R[a, b] = integral of B_a'' B_b''``."""
    return _product_integral(spec, 2)


def gram_matrix(spec: BasisSpec) -> np.ndarray:
    """Gram matrix ``W[a, b] = integral of B_a B_b``."""
    return _product_integral(spec, 0)


def cross_gram(spec_a: BasisSpec, spec_b: BasisSpec) -> np.ndarray:
    """``C[a, b] = integral of A_a B_b`` for two bases on the same domain."""
    if not (
        np.isclose(spec_a.domain_start, spec_b.domain_start)
        and np.isclose(spec_a.domain_end, spec_b.domain_end)
    ):
        raise ValueError("bases must share a domain")
    bp = np.union1d(spec_a.breakpoints, spec_b.breakpoints)
    t, w = gauss_legendre_rule(bp, max(spec_a.order, spec_b.order))
    A = eval_basis(spec_a, t, check=False)
    B = eval_basis(spec_b, t, check=False)
    return A.T @ (w[:, None] * B)


def _check_grid(spec: BasisSpec, grid_times) -> np.ndarray:
    times = np.asarray(grid_times, dtype=float)
    if times.ndim != 1:
        raise ValueError("grid_times must be one-dimensional")
    if len(times) < spec.dim:
        raise ValueError(
            f"need at least {spec.dim} grid points for a basis of dimension {spec.dim}, "
            f"got {len(times)}"
        )
    if np.any(np.diff(times) <= 0):
        raise ValueError("grid_times must be strictly increasing")
    tol = 1e-9 * max(1.0, spec.length)
    if times[0] < spec.domain_start - tol or times[-1] > spec.domain_end + tol:
        raise ValueError("grid_times must lie inside the basis domain")
    return times


def projection_matrix(spec: BasisSpec, grid_times) -> np.ndarray:
    """Linear map from grid samples to ``gamma = integral of B(t) X(t)``.

    ``X`` is the piecewise-linear interpolant of the samples, held constant
    beyond the first and last grid points.  Returns ``P`` of shape
    ``(L, m)`` so that ``gamma = P @ values``.
    """
    times = _check_grid(spec, grid_times)
    bp = np.union1d(np.clip(times, spec.domain_start, spec.domain_end), spec.breakpoints)
    # Interpolant is degree 1 on each piece; product has degree order.
    t, w = gauss_legendre_rule(bp, spec.order // 2 + 1)
    B = eval_basis(spec, t, check=False)
    m = len(times)
    idx = np.clip(np.searchsorted(times, t, side="right") - 1, 0, m - 2) if m > 1 else None
    interp = np.zeros((len(t), m))
    rows = np.arange(len(t))
    if m == 1:
        interp[:, 0] = 1.0
    else:
        lo, hi = times[idx], times[idx + 1]
        frac = np.clip((t - lo) / (hi - lo), 0.0, 1.0)
        interp[rows, idx] = 1.0 - frac
        interp[rows, idx + 1] += frac
    return (B * w[:, None]).T @ interp


def project_covariate(spec: BasisSpec, grid_times, grid_values) -> np.ndarray:
    """Project sampled curve(s) onto the basis: ``gamma_a = integral of B_a X``.

    ``grid_values`` may be a single curve of length ``m`` or an ``(n, m)``
    array of curves on the same grid.
    """
    P = projection_matrix(spec, grid_times)
    vals = np.asarray(grid_values, dtype=float)
    return vals @ P.T


def smoothing_matrix(spec: BasisSpec, grid_times) -> np.ndarray:
    """Least-squares map from grid samples to spline coefficients, ``(L, m)``."""
    times = _check_grid(spec, grid_times)
    if len(np.unique(times)) < spec.dim:
        raise ValueError("fewer distinct grid times than basis functions")
    B = eval_basis(spec, times)
    q, r = np.linalg.qr(B)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-12 * diag.max():
        raise ValueError("spline design is rank deficient on this grid")
    return np.linalg.solve(r, q.T)


def smooth_curve(spec: BasisSpec, grid_times, grid_values) -> np.ndarray:
    """Least-squares spline coefficients of sampled curve(s)."""
    S = smoothing_matrix(spec, grid_times)
    return np.asarray(grid_values, dtype=float) @ S.T


def constant_coefficients(spec: BasisSpec, value: float = 1.0) -> np.ndarray:
    """Coefficients of the constant function (partition of unity)."""
    return np.full(spec.dim, float(value))


def l2_norm(spec: BasisSpec, coef) -> np.ndarray:
    """``sqrt(b^T W b)`` along the last axis: the L2 norm of the spline."""
    coef = np.asarray(coef, dtype=float)
    return np.sqrt(np.maximum(np.einsum("...a,ab,...b->...", coef, spec.gram, coef), 0.0))
