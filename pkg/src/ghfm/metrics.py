"""Partition agreement (NMI, purity) and coefficient-function error (ISE)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .basis import BasisSpec, eval_basis, gauss_legendre_rule


def _check_pair(truth, estimate):
    truth = np.asarray(truth).ravel()
    estimate = np.asarray(estimate).ravel()
    if truth.size != estimate.size:
        raise ValueError(f"label vectors differ in length ({truth.size} vs {estimate.size})")
    if truth.size == 0:
        raise ValueError("label vectors are empty")
    return truth, estimate


def contingency(truth, estimate) -> np.ndarray:
    """Counts ``C[a, b]`` of items with truth label ``a`` and estimate label ``b``."""
    truth, estimate = _check_pair(truth, estimate)
    _, ti = np.unique(truth, return_inverse=True)
    _, ei = np.unique(estimate, return_inverse=True)
    C = np.zeros((ti.max() + 1, ei.max() + 1), dtype=int)
    np.add.at(C, (ti, ei), 1)
    return C


def _entropy(counts) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(truth, estimate) -> float:
    """Normalized mutual information ``2 I / (H(truth) + H(estimate))``.

    Natural logarithms; ``0 log 0 = 0``.  Two single-cluster partitions
    agree perfectly and score one.
    """
    C = contingency(truth, estimate)
    h_t = _entropy(C.sum(axis=1))
    h_e = _entropy(C.sum(axis=0))
    if h_t + h_e == 0.0:
        return 1.0
    # I = H(truth) + H(estimate) - H(joint) makes identical partitions score exactly one.
    mi = h_t + h_e - _entropy(C.ravel())
    return float(np.clip(2.0 * mi / (h_t + h_e), 0.0, 1.0))


def purity(preclusters, truth, n_groups: int | None = None) -> float:
    """Unweighted mean over pre-clusters of the majority-subgroup fraction.

    ``n_groups`` declares the number of pre-clusters when some labels in
    ``0..n_groups-1`` may be unused; empty groups are excluded from the
    average with a warning.
    """
    pre, truth = _check_pair(preclusters, truth)
    C = contingency(pre, truth)
    if n_groups is not None:
        present = len(np.unique(pre))
        if present < n_groups:
            warnings.warn(
                f"{n_groups - present} empty pre-cluster(s) excluded from purity",
                RuntimeWarning,
                stacklevel=2,
            )
    sizes = C.sum(axis=1)
    return float(np.mean(C.max(axis=1) / sizes))


# ---------------------------------------------------------------------------
# Functions on [0, T] and ISE
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplineCurve:
    """Coefficient function ``B(t)^T coef`` on a spline basis."""

    spec: BasisSpec
    coef: np.ndarray

    def __call__(self, t):
        return eval_basis(self.spec, np.asarray(t, dtype=float), check=False) @ np.asarray(self.coef)

    @property
    def breakpoints(self) -> np.ndarray:
        return self.spec.breakpoints

    @property
    def degree(self) -> int:
        return self.spec.degree


@dataclass(frozen=True)
class PolyCurve:
    """Polynomial ``sum_r c[r] t^r`` on ``[start, end]``."""

    coef: tuple
    start: float
    end: float

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.polynomial.polynomial.polyval(t, np.asarray(self.coef, dtype=float))

    @property
    def breakpoints(self) -> np.ndarray:
        return np.array([self.start, self.end], dtype=float)

    @property
    def degree(self) -> int:
        return len(self.coef) - 1


def _l2_sq(curve_a, curve_b=None) -> float:
    """Exact ``integral (a - b)^2`` for piecewise polynomials (``b`` optional)."""
    bps = [curve_a.breakpoints] + ([curve_b.breakpoints] if curve_b is not None else [])
    bp = np.unique(np.concatenate(bps))
    deg = max(curve_a.degree, curve_b.degree if curve_b is not None else 0)
    t, w = gauss_legendre_rule(bp, deg + 1)
    f = curve_a(t) - (curve_b(t) if curve_b is not None else 0.0)
    return float(w @ (f * f))


def match_groups(true_labels, est_labels) -> np.ndarray:
    """Estimated group holding the plurality of each true group's members.

    Returns an array indexed by the sorted truth labels; ties go to the
    smallest estimated label.
    """
    true_labels, est_labels = _check_pair(true_labels, est_labels)
    t_vals = np.unique(true_labels)
    e_vals = np.unique(est_labels)
    C = contingency(true_labels, est_labels)
    return e_vals[np.argmax(C, axis=1)][: len(t_vals)]


def ise(estimates, truths, true_labels=None, est_labels=None) -> float:
    """Relative L2 error of stacked coefficient functions.

    ``sqrt(sum_k integral (bhat_k - b_k)^2) / sqrt(sum_k integral b_k^2)``
    over the true subgroups ``k``.  With labels, estimate ``k`` is the
    estimated group (an index into ``estimates``) holding the plurality of
    true subgroup ``k``; otherwise the two sequences are paired in order.
    Integrals are exact Gauss-Legendre rules on the union of breakpoints.
    """
    truths = list(truths)
    estimates = list(estimates)
    if true_labels is not None or est_labels is not None:
        if true_labels is None or est_labels is None:
            raise ValueError("pass both true_labels and est_labels, or neither")
        match = match_groups(true_labels, est_labels)
        if len(match) != len(truths):
            raise ValueError("number of true functions does not match the true labels")
        paired = [estimates[int(m)] for m in match]
    else:
        if len(estimates) != len(truths):
            raise ValueError(
                f"{len(estimates)} estimated functions for {len(truths)} true ones; pass labels to match"
            )
        paired = estimates
    den = sum(_l2_sq(b) for b in truths)
    if not den > 0:
        raise ValueError("true coefficient functions have zero norm")
    num = sum(_l2_sq(bh, b) for bh, b in zip(paired, truths))
    return float(np.sqrt(num / den))


@dataclass
class MetricReport:
    nmi: list
    purity: list | None
    ise: float | None

    def to_dict(self) -> dict:
        return {"nmi": self.nmi, "purity": self.purity, "ise": self.ise}
