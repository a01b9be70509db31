"""Pairwise-fusion penalized functional GLM: objective, ADMM and LQA solvers.

Fit-units are either single subjects or pre-cluster groups of subjects.  Each
unit ``u`` carries one spline coefficient vector ``b[u, j]`` per covariate,
and the data loss of a unit is the sum of its members' losses.  The
objective is::

    (1/n) sum_i loss_i(alpha + sum_j gamma_ij . b[u(i), j])
        + phi * sum_{u,j} b[u,j]^T R b[u,j]
        + lam * sum_j sum_{(u,u') in graph} ||b[u,j] - b[u',j]||

with ``loss_i`` the squared residual (Gaussian) or the negative
log-likelihood (Bernoulli), and the fusion norm either the L2 function norm
``sqrt(d^T W d)`` or a trapezoid approximation of ``integral |d^T B(t)| dt``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .basis import BasisSpec, eval_basis
from .dataset import FunctionalDataset
from .family import irls_step_quantities, profile_loglik

log = logging.getLogger(__name__)

LARGE_SAMPLE_THRESHOLD = 500


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PenaltyConfig:
    """Tuning and solver settings for one fit.

    ``fusion_norm`` is ``"gram_l2"`` or ``"discretized_l1"``; the latter
    uses ``quad_points`` equally spaced trapezoid nodes.
    """

    phi: float = 0.0
    lam: float = 0.0
    admm_rho: float = 1.0
    tol_primal: float = 1e-5
    tol_dual: float = 1e-5
    tol_outer: float = 1e-8
    max_admm_iters: int = 500
    max_outer_iters: int = 25
    max_lqa_iters: int = 500
    fusion_norm: str = "gram_l2"
    quad_points: int = 0
    merge_tol: float = 1e-4
    lqa_eps: float = 1e-8

    def __post_init__(self):
        if self.phi < 0 or self.lam < 0:
            raise ValueError("phi and lam must be non-negative")
        if self.admm_rho <= 0:
            raise ValueError("admm_rho must be positive")
        if min(self.tol_primal, self.tol_dual, self.tol_outer) <= 0:
            raise ValueError("tolerances must be positive")
        if self.fusion_norm not in ("gram_l2", "discretized_l1"):
            raise ValueError(f"unknown fusion norm {self.fusion_norm!r}")
        if self.merge_tol <= 0:
            raise ValueError("merge_tol must be positive")


@dataclass(frozen=True)
class FitUnits:
    """Assignment of subjects to fit-units (subjects or pre-cluster groups)."""

    unit_of: np.ndarray  # (n,) unit index of each subject
    sizes: np.ndarray  # (U,) number of subjects per unit

    @property
    def count(self) -> int:
        return len(self.sizes)

    @classmethod
    def direct(cls, n: int) -> "FitUnits":
        return cls(np.arange(n), np.ones(n, dtype=int))

    @classmethod
    def from_labels(cls, labels) -> "FitUnits":
        """Units from group labels; empty groups are dropped and labels compacted."""
        labels = np.asarray(labels, dtype=int)
        uniq, inv = np.unique(labels, return_inverse=True)
        return cls(inv, np.bincount(inv, minlength=len(uniq)))

    @property
    def is_direct(self) -> bool:
        return self.count == len(self.unit_of) and np.all(self.sizes == 1)


@dataclass
class CoefficientSet:
    """Intercept plus one coefficient vector per unit (or subgroup) per covariate.

    ``coefs`` has shape ``(U, p, L)``; ``unit_sizes`` counts the subjects
    behind each row.
    """

    alpha: float
    coefs: np.ndarray
    unit_sizes: np.ndarray

    @property
    def shape(self):
        return self.coefs.shape

    def copy(self) -> "CoefficientSet":
        return CoefficientSet(float(self.alpha), self.coefs.copy(), self.unit_sizes.copy())


@dataclass
class Partition:
    """Per-covariate subgroup labels over fit-units (0-based, surjective)."""

    labels: np.ndarray  # (U, p)

    @property
    def counts(self) -> list:
        return [int(self.labels[:, j].max()) + 1 for j in range(self.labels.shape[1])]

    def subject_labels(self, units: FitUnits) -> np.ndarray:
        return self.labels[units.unit_of]

    @classmethod
    def trivial(cls, n_units: int, p: int) -> "Partition":
        return cls(np.zeros((n_units, p), dtype=int))

    @classmethod
    def from_subject_labels(cls, labels) -> "Partition":
        labels = np.asarray(labels)
        if labels.ndim == 1:
            labels = labels[:, None]
        out = np.empty(labels.shape, dtype=int)
        for j in range(labels.shape[1]):
            out[:, j] = _relabel(labels[:, j])
        return cls(out)


@dataclass
class GroupFit:
    """Coefficients of a fit at a fixed partition (one vector per subgroup)."""

    alpha: float
    coefs: list  # per covariate: (K_j, L)
    eta: np.ndarray
    converged: bool = True
    jitter: float = 0.0


@dataclass
class FitReport:
    """Result of one penalized fit at fixed ``(phi, lam)``."""

    coefficients: GroupFit  # merged and refit, one vector per subgroup
    partition: Partition
    raw: CoefficientSet  # solver output before merging
    objective_trace: list
    bic: float
    negloglik: float
    loglik: float
    converged: bool
    phi: float
    lam: float
    solver: str
    units: FitUnits
    iterations: int = 0
    jitter: float = 0.0
    k_hat: list = field(default_factory=list)
    state: dict | None = field(default=None, repr=False)

    def subject_labels(self) -> np.ndarray:
        return self.partition.subject_labels(self.units)

    def to_dict(self, subject_ids=None, test=None) -> dict:
        out = {
            "solver": self.solver,
            "phi": self.phi,
            "lambda": self.lam,
            "intercept": self.coefficients.alpha,
            "k_hat": self.k_hat,
            "coefficients": [c.tolist() for c in self.coefficients.coefs],
            "unit_labels": (self.partition.labels + 1).tolist(),
            "unit_sizes": self.units.sizes.tolist(),
            "bic": _json_float(self.bic),
            "loglik": _json_float(self.loglik),
            "negloglik": _json_float(self.negloglik),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "jitter": self.jitter,
            "objective_trace": [float(v) for v in self.objective_trace],
        }
        if subject_ids is not None:
            out["subject_ids"] = list(subject_ids)
            out["subject_labels"] = (self.subject_labels() + 1).tolist()
        if test is not None:
            out["heterogeneity_test"] = test
        return out


def _json_float(x):
    x = float(x)
    return x if math.isfinite(x) else None


# ---------------------------------------------------------------------------
# Graphs and norms
# ---------------------------------------------------------------------------

def complete_graph(n_units: int) -> np.ndarray:
    """All unordered pairs ``(u, u')`` with ``u < u'``, shape ``(E, 2)``."""
    iu = np.triu_indices(n_units, k=1)
    return np.column_stack(iu).astype(int)


def knn_graph(coef: np.ndarray, gram: np.ndarray, k: int) -> np.ndarray:
    """Symmetrized k-nearest-neighbour graph on units in the Gram norm.

    ``coef`` is ``(U, p, L)``; distances add the squared norms over covariates.
    """
    U = coef.shape[0]
    flat = coef.reshape(U, -1)
    G = np.kron(np.eye(coef.shape[1]), gram)
    sq = np.einsum("ua,ab,ub->u", flat, G, flat)
    d2 = sq[:, None] + sq[None, :] - 2.0 * flat @ G @ flat.T
    np.fill_diagonal(d2, np.inf)
    k = min(k, U - 1)
    nbr = np.argsort(d2, axis=1, kind="stable")[:, :k]
    pairs = {(min(u, v), max(u, v)) for u in range(U) for v in nbr[u]}
    return np.array(sorted(pairs), dtype=int).reshape(-1, 2)


def _is_complete(edges: np.ndarray, n_units: int) -> bool:
    return len(edges) == n_units * (n_units - 1) // 2 and (
        len(edges) == 0 or np.array_equal(edges, complete_graph(n_units))
    )


@dataclass(frozen=True)
class _FusionGeometry:
    """Linear map and metric realizing the fusion norm of a coefficient difference.

    The norm of ``d`` is ``||T d||`` in the metric ``diag(weights)`` (group
    norm for ``gram_l2``, weighted L1 for ``discretized_l1``).
    """

    kind: str
    T: np.ndarray  # (Q, L)
    weights: np.ndarray  # (Q,)
    metric: np.ndarray  # (L, L) = T^T diag(w) T

    def norm(self, d: np.ndarray) -> np.ndarray:
        """Fusion norm along the last axis of ``d`` (coefficient differences)."""
        if self.kind == "gram_l2":
            return np.sqrt(np.maximum(np.einsum("...a,ab,...b->...", d, self.metric, d), 0.0))
        return np.abs(d @ self.T.T) @ self.weights

    def prox(self, v: np.ndarray, thresh: float) -> np.ndarray:
        """Proximal map of ``thresh * norm`` in the transformed coordinates."""
        if self.kind == "gram_l2":
            nv = np.sqrt(np.maximum(np.einsum("...a,ab,...b->...", v, self.metric, v), 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = np.where(nv > thresh, 1.0 - thresh / nv, 0.0)
            return v * scale[..., None]
        return np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0)

    def transform(self, d: np.ndarray) -> np.ndarray:
        return d if self.kind == "gram_l2" else d @ self.T.T

    def metric_norm(self, v: np.ndarray) -> float:
        """Total ``sqrt(sum v^T M v)`` of transformed-space vectors."""
        if self.kind == "gram_l2":
            return float(math.sqrt(max(float(np.sum((v @ self.metric) * v)), 0.0)))
        return float(math.sqrt(max(np.sum(v * v * self.weights), 0.0)))

    def pullback(self, v: np.ndarray) -> np.ndarray:
        """``T^T diag(w) v``: transformed-space vector back to coefficient space."""
        if self.kind == "gram_l2":
            return v @ self.metric
        return (v * self.weights) @ self.T


def fusion_geometry(spec: BasisSpec, norm: str = "gram_l2", quad_points: int = 0) -> _FusionGeometry:
    if norm == "gram_l2":
        L = spec.dim
        return _FusionGeometry("gram_l2", np.eye(L), np.ones(L), spec.gram)
    Q = int(quad_points) if quad_points else max(10 * spec.dim, 200)
    if Q < spec.dim:
        raise ValueError(f"discretized_l1 needs at least L = {spec.dim} quadrature points")
    t = np.linspace(spec.domain_start, spec.domain_end, Q)
    w = np.full(Q, spec.length / (Q - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    T = eval_basis(spec, t)
    return _FusionGeometry("discretized_l1", T, w, T.T @ (w[:, None] * T))


def fusion_value(spec: BasisSpec, diff, norm: str = "gram_l2", quad_points: int = 0) -> np.ndarray:
    """Fusion norm of coefficient difference(s) ``diff`` (last axis length L)."""
    return fusion_geometry(spec, norm, quad_points).norm(np.asarray(diff, dtype=float))


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def _unit_eta(gamma: np.ndarray, units: FitUnits, alpha: float, coefs: np.ndarray) -> np.ndarray:
    return alpha + np.einsum("ija,ija->i", gamma, coefs[units.unit_of])


def objective_parts(dataset: FunctionalDataset, coef: CoefficientSet, cfg: PenaltyConfig,
                    units: FitUnits | None = None, edges: np.ndarray | None = None) -> dict:
    """Data, roughness and fusion terms of the penalized objective."""
    gamma = dataset.require_gamma()
    spec = dataset.basis
    n = dataset.n
    units = units or FitUnits.direct(n)
    if coef.coefs.shape != (units.count, dataset.p, spec.dim):
        raise ValueError(
            f"coefficient shape {coef.coefs.shape} does not match "
            f"{(units.count, dataset.p, spec.dim)}"
        )
    eta = _unit_eta(gamma, units, coef.alpha, coef.coefs)
    data = float(np.sum(dataset.family.data_loss(dataset.y, eta)) / n)
    rough = float(cfg.phi * np.einsum("uja,ab,ujb->", coef.coefs, spec.roughness, coef.coefs))
    fusion = 0.0
    if cfg.lam > 0 and units.count > 1:
        if edges is None:
            edges = complete_graph(units.count)
        geom = fusion_geometry(spec, cfg.fusion_norm, cfg.quad_points)
        diff = coef.coefs[edges[:, 0]] - coef.coefs[edges[:, 1]]
        fusion = float(cfg.lam * np.sum(geom.norm(diff)))
    return {"data": data, "roughness": rough, "fusion": fusion,
            "total": data + rough + fusion, "eta": eta}


def objective(dataset: FunctionalDataset, coef: CoefficientSet, cfg: PenaltyConfig,
              units: FitUnits | None = None, edges: np.ndarray | None = None) -> float:
    """Penalized objective value (see module docstring)."""
    return objective_parts(dataset, coef, cfg, units, edges)["total"]


def smooth_gradient(dataset: FunctionalDataset, coef: CoefficientSet, phi: float,
                    units: FitUnits | None = None) -> tuple[float, np.ndarray]:
    """Gradient of data loss plus roughness with respect to ``(alpha, coefs)``."""
    gamma = dataset.require_gamma()
    units = units or FitUnits.direct(dataset.n)
    eta = _unit_eta(gamma, units, coef.alpha, coef.coefs)
    r = dataset.family.data_loss_grad(dataset.y, eta) / dataset.n
    g_alpha = float(r.sum())
    g = np.zeros_like(coef.coefs)
    np.add.at(g, units.unit_of, r[:, None, None] * gamma)
    g += 2.0 * phi * np.einsum("ab,ujb->uja", dataset.basis.roughness, coef.coefs)
    return g_alpha, g


# ---------------------------------------------------------------------------
# Quadratic model of the data term
# ---------------------------------------------------------------------------

@dataclass
class _Quadratic:
    """Data term ``(c/n) sum_i w_i (z_i - eta_i)^2`` aggregated per unit.

    Gradient equations read ``H theta = g`` with ``H = (2c/n) X^T W X``.
    """

    h_aa: float
    h_ab: np.ndarray  # (U, q)
    h_bb: np.ndarray  # (U, q, q)
    g_a: float
    g_b: np.ndarray  # (U, q)


def _quadratic(gamma_flat, units: FitUnits, w, z, scale) -> _Quadratic:
    U = units.count
    q = gamma_flat.shape[1]
    wz = w * z
    h_bb = np.zeros((U, q, q))
    h_ab = np.zeros((U, q))
    g_b = np.zeros((U, q))
    if units.is_direct:
        h_bb = np.einsum("i,ia,ib->iab", w, gamma_flat, gamma_flat)
        h_ab = w[:, None] * gamma_flat
        g_b = wz[:, None] * gamma_flat
    else:
        order = np.argsort(units.unit_of, kind="stable")
        bounds = np.concatenate([[0], np.cumsum(units.sizes)])
        G = gamma_flat[order]
        ws, wzs = w[order], wz[order]
        for u in range(U):
            s = slice(bounds[u], bounds[u + 1])
            Gu = G[s]
            h_bb[u] = (Gu * ws[s, None]).T @ Gu
            h_ab[u] = ws[s] @ Gu
            g_b[u] = wzs[s] @ Gu
    return _Quadratic(scale * float(w.sum()), scale * h_ab, scale * h_bb,
                      scale * float(wz.sum()), scale * g_b)


class _LinearSystem:
    """Solver for the stationarity equations of the augmented b-update.

    Matrix::

        [ h_aa      h_ab^T                                  ]
        [ h_ab   blockdiag(h_bb_u + 2 phi R) + rho Lap (x) M ]

    ``Lap`` is the fusion-graph Laplacian and ``M`` the fusion metric on each
    covariate block.  A complete graph is handled by the Woodbury identity
    (the Laplacian is ``U I - 1 1^T``); other graphs use a sparse LU.
    """

    def __init__(self, quad: _Quadratic, Rq: np.ndarray, Mq: np.ndarray, rho: float,
                 edges: np.ndarray | None, complete: bool, jitter_rel: float = 0.0):
        self.U, self.q = quad.g_b.shape
        U, q = self.U, self.q
        self.quad = quad
        blocks = quad.h_bb + Rq[None]
        scale = max(float(np.trace(blocks.sum(axis=0)) / (U * q)), quad.h_aa / max(U, 1), 1e-300)
        self.jitter = 0.0
        jitter = jitter_rel * scale
        for attempt in range(8):
            try:
                self._factor(blocks, Mq, rho, edges, complete, jitter)
                self.jitter = jitter
                return
            except (np.linalg.LinAlgError, sla.LinAlgError, RuntimeError, ValueError):
                jitter = max(jitter * 100.0, 1e-10 * scale)
        raise np.linalg.LinAlgError("b-update system is singular even after ridge jitter")

    def _factor(self, blocks, Mq, rho, edges, complete, jitter):
        U, q = self.U, self.q
        quad = self.quad
        eye = np.eye(q)
        self.mode = None
        if rho == 0 or U == 1 or (edges is not None and len(edges) == 0):
            N = blocks + jitter * eye
            self.Ninv = np.linalg.inv(_check_pd(N))
            self.mode = "block"
            self.S_inv = None
        elif complete:
            N = blocks + rho * U * Mq[None] + jitter * eye
            self.Ninv = np.linalg.inv(_check_pd(N))
            S = np.linalg.inv(rho * Mq) - self.Ninv.sum(axis=0)
            # A_bb = N - E C E^T is positive definite iff S is.
            self.S_inv = np.linalg.inv(_check_pd(0.5 * (S + S.T)))
            self.mode = "woodbury"
        else:
            lap = _laplacian(U, edges)
            A = sp.block_diag(list(blocks)) + sp.kron(lap, sp.csr_matrix(rho * Mq)) + jitter * sp.identity(U * q)
            self.lu = spla.splu(sp.csc_matrix(A))
            self.mode = "sparse"
        v = self._solve_bb(quad.h_ab)
        self.v = v
        s = quad.h_aa + jitter - float(np.sum(quad.h_ab * v))
        if not s > 1e-14 * max(quad.h_aa, 1e-300):
            raise np.linalg.LinAlgError("intercept Schur complement is not positive")
        self.s = s

    def _solve_bb(self, r: np.ndarray) -> np.ndarray:
        if self.mode == "block":
            return np.einsum("uab,ub->ua", self.Ninv, r)
        if self.mode == "woodbury":
            y = np.einsum("uab,ub->ua", self.Ninv, r)
            corr = self.S_inv @ y.sum(axis=0)
            return y + np.einsum("uab,b->ua", self.Ninv, corr)
        return self.lu.solve(r.ravel()).reshape(self.U, self.q)

    def solve(self, r_a: float, r_b: np.ndarray) -> tuple[float, np.ndarray]:
        x0 = self._solve_bb(r_b)
        alpha = (r_a - float(np.sum(self.quad.h_ab * x0))) / self.s
        return alpha, x0 - self.v * alpha


def _check_pd(A):
    """Return ``A`` unchanged; raise ``LinAlgError`` unless every block is positive definite."""
    np.linalg.cholesky(A)
    return A


def _laplacian(U: int, edges: np.ndarray) -> sp.csr_matrix:
    inc = _incidence(U, edges)
    return (inc.T @ inc).tocsr()


def _incidence(U: int, edges: np.ndarray) -> sp.csr_matrix:
    E = len(edges)
    rows = np.repeat(np.arange(E), 2)
    cols = edges.ravel()
    vals = np.tile([1.0, -1.0], E)
    return sp.csr_matrix((vals, (rows, cols)), shape=(E, U))


# ---------------------------------------------------------------------------
# Union-find partition extraction
# ---------------------------------------------------------------------------

def _relabel(labels) -> np.ndarray:
    """Map labels to 0..K-1 in order of first appearance."""
    labels = np.asarray(labels)
    out = np.empty(len(labels), dtype=int)
    seen = {}
    for i, v in enumerate(labels.tolist()):
        out[i] = seen.setdefault(v, len(seen))
    return out


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # Lowest index stays the representative.
            lo, hi = (ra, rb) if ra < rb else (rb, ra)
            self.parent[hi] = lo

    def labels(self) -> np.ndarray:
        roots = [self.find(i) for i in range(len(self.parent))]
        return _relabel(roots)


def extract_partition(coef: CoefficientSet, merge_tol: float, gram: np.ndarray,
                      fused_pairs: list | None = None) -> tuple[Partition, CoefficientSet]:
    """Group units whose coefficient functions coincide.

    Units ``u`` and ``u'`` merge for covariate ``j`` when
    ``||b_u - b_u'||_W <= merge_tol * (1 + min(||b_u||_W, ||b_u'||_W))``,
    closed transitively.  ``fused_pairs[j]`` optionally lists extra pairs
    known to be fused exactly (e.g. zero ADMM differences).

    Returns the partition and the size-weighted average coefficient of each
    subgroup, in a ``CoefficientSet`` of shape ``(K_max, p, L)`` where rows
    beyond ``K_j`` of covariate ``j`` are zero.
    """
    if merge_tol <= 0:
        raise ValueError("merge_tol must be positive")
    U, p, L = coef.coefs.shape
    labels = np.zeros((U, p), dtype=int)
    for j in range(p):
        B = coef.coefs[:, j, :]
        uf = _UnionFind(U)
        norms = np.sqrt(np.maximum(np.einsum("ua,ab,ub->u", B, gram, B), 0.0))
        sq = norms ** 2
        d2 = sq[:, None] + sq[None, :] - 2.0 * B @ gram @ B.T
        # Recompute close pairs exactly to avoid cancellation.
        thr = merge_tol * (1.0 + np.minimum(norms[:, None], norms[None, :]))
        cand = np.argwhere(np.triu(d2 <= (2.0 * thr) ** 2 + 1e-300, k=1))
        for u, v in cand:
            d = B[u] - B[v]
            if math.sqrt(max(float(d @ gram @ d), 0.0)) <= thr[u, v]:
                uf.union(int(u), int(v))
        if fused_pairs is not None:
            for u, v in fused_pairs[j]:
                uf.union(int(u), int(v))
        labels[:, j] = uf.labels()
    part = Partition(labels)
    K = part.counts
    merged = np.zeros((max(K), p, L))
    sizes = np.zeros((max(K), p))
    for j in range(p):
        for k in range(K[j]):
            members = labels[:, j] == k
            wts = coef.unit_sizes[members].astype(float)
            merged[k, j] = wts @ coef.coefs[members, j] / wts.sum()
            sizes[k, j] = wts.sum()
    return part, CoefficientSet(coef.alpha, merged, sizes[:, 0].astype(int))


# ---------------------------------------------------------------------------
# Penalized GLM at a fixed partition
# ---------------------------------------------------------------------------

def fit_partition(dataset: FunctionalDataset, subject_labels, phi: float,
                  roughness_weights=None, init: GroupFit | None = None,
                  max_iter: int = 100, tol: float = 1e-10, jitter_rel: float = 1e-12) -> GroupFit:
    """Penalized GLM with one coefficient function per subgroup per covariate.

    Parameters
    ----------
    subject_labels : (n, p) int array
        Subgroup of each subject for each covariate (0-based, compact).
    phi : float
        Roughness weight.
    roughness_weights : list of arrays, optional
        Per covariate, a multiplier of ``phi`` for each subgroup (defaults to
        one).  Passing the number of fit-units in each subgroup reproduces the
        fusion objective restricted to the partition.

    Gaussian fits solve the normal equations once; Bernoulli fits run IRLS
    with step halving on the penalized negative log-likelihood.
    """
    gamma = dataset.require_gamma()
    fam = dataset.family
    spec = dataset.basis
    n, p, L = gamma.shape
    labels = np.asarray(subject_labels, dtype=int).reshape(n, p)
    K = [int(labels[:, j].max()) + 1 for j in range(p)]
    offsets = np.concatenate([[1], 1 + np.cumsum([k * L for k in K])])
    P = int(offsets[-1])
    rows = np.repeat(np.arange(n), 1 + p * L)
    cols = np.empty((n, 1 + p * L), dtype=int)
    cols[:, 0] = 0
    vals = np.empty((n, 1 + p * L))
    vals[:, 0] = 1.0
    for j in range(p):
        cols[:, 1 + j * L:1 + (j + 1) * L] = offsets[j] + labels[:, j, None] * L + np.arange(L)
        vals[:, 1 + j * L:1 + (j + 1) * L] = gamma[:, j, :]
    X = sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(n, P))
    pen = np.zeros((P, P))
    R = spec.roughness
    for j in range(p):
        wts = np.ones(K[j]) if roughness_weights is None else np.asarray(roughness_weights[j], float)
        for k in range(K[j]):
            s = slice(offsets[j] + k * L, offsets[j] + (k + 1) * L)
            pen[s, s] = 2.0 * phi * wts[k] * R
    two_c = 2.0 * fam.loss_scale / n

    def penalized(theta):
        eta = X @ theta
        return float(np.sum(fam.data_loss(dataset.y, eta)) / n + 0.5 * theta @ pen @ theta), eta

    def solve(w, z):
        A = two_c * (X.T @ X.multiply(w[:, None])).toarray() + pen
        A = 0.5 * (A + A.T)
        rhs = two_c * (X.T @ (w * z))
        scale = max(np.trace(A) / P, 1e-300)
        jit = jitter_rel * scale
        try:
            c = sla.cho_factor(A + jit * np.eye(P), lower=True)
            d = np.abs(np.diag(c[0]))
            if d.min() > 1e-7 * d.max():
                theta = sla.cho_solve(c, rhs)
                if np.all(np.isfinite(theta)):
                    return theta, jit
        except sla.LinAlgError:
            pass
        # Singular normal equations: exact minimum-norm solution.
        return sla.lstsq(A, rhs, cond=1e-13, lapack_driver="gelsd")[0], 0.0

    if init is not None:
        theta = _pack_group(init, offsets, K, L)
    else:
        theta = np.zeros(P)
    if fam.is_gaussian:
        theta, jit = solve(np.ones(n), dataset.y)
        eta = X @ theta
        return _unpack_group(theta, offsets, K, L, eta, True, jit)
    f, eta = penalized(theta)
    converged = False
    jit = 0.0
    for _ in range(max_iter):
        z, w = irls_step_quantities(fam, dataset.y, eta)
        cand, jit = solve(w, z)
        step = 1.0
        for _ in range(30):
            trial = theta + step * (cand - theta)
            f_new, eta_new = penalized(trial)
            if f_new <= f + 1e-12 * abs(f):
                break
            step *= 0.5
        else:
            converged = True
            break
        rel = abs(f - f_new) / max(abs(f), 1e-300)
        theta, f, eta = trial, f_new, eta_new
        if rel < tol:
            converged = True
            break
    return _unpack_group(theta, offsets, K, L, eta, converged, jit)


def _pack_group(g: GroupFit, offsets, K, L) -> np.ndarray:
    theta = np.zeros(int(offsets[-1]))
    theta[0] = g.alpha
    for j, c in enumerate(g.coefs):
        if c.shape == (K[j], L):
            theta[offsets[j]:offsets[j] + K[j] * L] = c.ravel()
    return theta


def _unpack_group(theta, offsets, K, L, eta, converged, jitter) -> GroupFit:
    coefs = [theta[offsets[j]:offsets[j] + K[j] * L].reshape(K[j], L).copy() for j in range(len(K))]
    return GroupFit(float(theta[0]), coefs, np.asarray(eta), converged, float(jitter))


def homogeneous_fit(dataset: FunctionalDataset, phi: float, roughness_weight: float = 1.0) -> GroupFit:
    """Single coefficient function per covariate for all subjects."""
    labels = np.zeros((dataset.n, dataset.p), dtype=int)
    return fit_partition(dataset, labels, phi, [np.array([roughness_weight])] * dataset.p)


DEFAULT_PHI_REL = 0.5


def phi_scale(dataset: FunctionalDataset, units: FitUnits | None = None) -> float:
    """Roughness weight at which ``phi R`` matches the average unit data curvature.

    The data curvature of a unit is ``(2c/n) w sum_i ||gamma_i||^2`` over its
    members, with ``w = 1`` for Gaussian and the logistic bound ``1/4``
    otherwise, and its size is compared with ``trace(R)``.  Relative
    roughness weights ``phi_rel`` then map to ``phi = phi_rel * phi_scale``
    independently of the units of ``X`` and ``y``.
    """
    gamma = dataset.require_gamma()
    n = dataset.n
    units = units or FitUnits.direct(n)
    fam = dataset.family
    w = 1.0 if fam.is_gaussian else 0.25
    per_subject = np.sum(gamma.reshape(n, -1) ** 2, axis=1)
    curv = 2.0 * fam.loss_scale * w / n * float(per_subject.sum()) / units.count
    tr = float(np.trace(dataset.basis.roughness)) * dataset.p
    if tr <= 0:
        return 0.0
    return curv / tr


def default_phi(dataset: FunctionalDataset, units: FitUnits | None = None,
                phi_rel: float = DEFAULT_PHI_REL) -> float:
    return phi_rel * phi_scale(dataset, units)


# ---------------------------------------------------------------------------
# Information criterion
# ---------------------------------------------------------------------------

def bic_value(loglik: float, k_hat, dim: int, n: int) -> float:
    """``k ln n - 2 loglik`` with ``k = sum_j (K_j L + 1)``.

    Models with ``k >= n`` can interpolate the data and are not comparable;
    their BIC is infinite.
    """
    k = sum(int(kj) * dim + 1 for kj in k_hat)
    if k >= n:
        return math.inf
    return k * math.log(n) - 2.0 * loglik


def bic(dataset: FunctionalDataset, report: FitReport) -> float:
    """BIC of a finalized report, from its merged and refit coefficients."""
    ll = profile_loglik(dataset.family, dataset.y, report.coefficients.eta)
    return bic_value(ll, report.partition.counts, dataset.basis.dim, dataset.n)


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

def _init_coefficients(dataset: FunctionalDataset, units: FitUnits, phi: float) -> CoefficientSet:
    """Per-unit penalized fit with no fusion (lam = 0)."""
    part = Partition(np.repeat(np.arange(units.count)[:, None], dataset.p, axis=1))
    g = fit_partition(dataset, part.subject_labels(units), phi, jitter_rel=1e-10)
    coefs = np.stack(g.coefs, axis=1)
    return CoefficientSet(g.alpha, coefs, units.sizes.copy())


def lambda_max(dataset: FunctionalDataset, phi: float, units: FitUnits | None = None,
               fusion_norm: str = "gram_l2", quad_points: int = 0) -> float:
    """Smallest ``lam`` (up to a conservative bound) that fuses every unit.

    At the fully fused optimum ``b_bar`` the fused solution satisfies the
    optimality conditions when ``lam >= max_{u<u'} ||g_u - g_u'||_* / U`` for
    the complete graph, where ``g_u`` is the unit gradient of the smooth part
    and ``||.||_*`` the dual of the fusion norm.  For ``discretized_l1`` the
    dual norm is bounded above by a feasible dual certificate.
    """
    units = units or FitUnits.direct(dataset.n)
    U = units.count
    if U < 2:
        return 0.0
    spec = dataset.basis
    labels = np.zeros((dataset.n, dataset.p), dtype=int)
    g = fit_partition(dataset, labels, phi, [np.array([float(U)])] * dataset.p)
    fused = CoefficientSet(g.alpha, np.repeat(np.stack(g.coefs, axis=1), U, axis=0), units.sizes)
    _, grad = smooth_gradient(dataset, fused, phi, units)
    geom = fusion_geometry(spec, fusion_norm, quad_points)
    best = 0.0
    for j in range(dataset.p):
        G = grad[:, j, :]
        if geom.kind == "gram_l2":
            Winv = np.linalg.inv(geom.metric)
            sq = np.einsum("ua,ab,ub->u", G, Winv, G)
            d2 = sq[:, None] + sq[None, :] - 2.0 * G @ Winv @ G.T
            best = max(best, math.sqrt(max(float(d2.max()), 0.0)))
        else:
            A = geom.T.T * geom.weights  # (L, Q)
            cert = np.linalg.solve(A @ A.T, A)  # rows give minimum-norm dual vectors
            proj = G @ cert
            for u in range(U):
                best = max(best, float(np.abs(proj[u] - proj[u + 1:]).max(initial=0.0)))
    return best / U * (1.0 + 1e-9)


def _objective_theta(dataset, units, edges, cfg, alpha, coefs):
    return objective(dataset, CoefficientSet(alpha, coefs, units.sizes), cfg, units, edges)


def _fused_pairs_from_z(edges: np.ndarray, z: np.ndarray) -> list:
    p = z.shape[1]
    zero = np.all(z == 0.0, axis=2)
    return [edges[zero[:, j]] for j in range(p)]


def _finalize(dataset, units, cfg, solver, alpha, coefs, trace, converged, iterations,
              jitter, fused_pairs=None, state=None) -> FitReport:
    raw = CoefficientSet(float(alpha), coefs, units.sizes.copy())
    if cfg.lam == 0:
        fused_pairs = None
    part, _merged = extract_partition(raw, cfg.merge_tol, dataset.basis.gram, fused_pairs)
    weights = []
    for j in range(dataset.p):
        weights.append(np.bincount(part.labels[:, j], minlength=part.counts[j]).astype(float))
    refit = fit_partition(dataset, part.subject_labels(units), cfg.phi, weights)
    ll = profile_loglik(dataset.family, dataset.y, refit.eta)
    nll = -ll
    report = FitReport(
        coefficients=refit,
        partition=part,
        raw=raw,
        objective_trace=list(trace),
        bic=bic_value(ll, part.counts, dataset.basis.dim, dataset.n),
        negloglik=nll,
        loglik=ll,
        converged=bool(converged),
        phi=cfg.phi,
        lam=cfg.lam,
        solver=solver,
        units=units,
        iterations=int(iterations),
        jitter=float(jitter),
        k_hat=part.counts,
        state=state,
    )
    return report


def _resolve_graph(units: FitUnits, fusion_graph) -> np.ndarray:
    if fusion_graph is None:
        if units.is_direct and units.count > LARGE_SAMPLE_THRESHOLD:
            raise ValueError(
                f"complete fusion graph over {units.count} subjects is limited to "
                f"n <= {LARGE_SAMPLE_THRESHOLD}; pre-cluster first or pass a kNN graph"
            )
        return complete_graph(units.count)
    edges = np.asarray(fusion_graph, dtype=int).reshape(-1, 2)
    if len(edges) and (edges.min() < 0 or edges.max() >= units.count or np.any(edges[:, 0] == edges[:, 1])):
        raise ValueError("fusion graph references invalid units")
    return edges


def _prepare(dataset, units, init):
    gamma = dataset.require_gamma()
    n, p, L = gamma.shape
    units = units or FitUnits.direct(n)
    if len(units.unit_of) != n:
        raise ValueError("units do not match the dataset")
    if init is not None and init.coefs.shape != (units.count, p, L):
        raise ValueError(f"init has shape {init.coefs.shape}, expected {(units.count, p, L)}")
    return gamma, units


def fit_admm(dataset: FunctionalDataset, cfg: PenaltyConfig, fusion_graph=None,
             init: CoefficientSet | None = None, units: FitUnits | None = None,
             state: dict | None = None) -> FitReport:
    """Minimize the fusion objective by ADMM on coefficient differences.

    Splitting variables ``z_e = T (b_u - b_u')`` for each edge carry the
    fusion norm; the coefficient update solves a penalized least-squares
    system (IRLS-weighted for Bernoulli, one reweighting per outer
    iteration) and the ``z`` update is a block (or elementwise)
    soft-threshold.  ``rho`` adapts by residual balancing.

    ``state`` (from a previous report) warm-starts ``z``, the scaled duals
    and ``rho``.
    """
    gamma, units = _prepare(dataset, units, init)
    n, p, L = gamma.shape
    fam = dataset.family
    spec = dataset.basis
    U = units.count
    q = p * L
    edges = _resolve_graph(units, fusion_graph)
    if cfg.lam > 0 and U > 1 and len(edges) == 0:
        raise ValueError("fusion graph is empty but lam > 0")
    complete = _is_complete(edges, U)
    geom = fusion_geometry(spec, cfg.fusion_norm, cfg.quad_points)
    coef0 = init if init is not None else _init_coefficients(dataset, units, cfg.phi)
    alpha, b = float(coef0.alpha), coef0.coefs.copy()
    gflat = gamma.reshape(n, q)
    Rq = 2.0 * cfg.phi * np.kron(np.eye(p), spec.roughness)
    Mq = np.kron(np.eye(p), geom.metric)
    scale = 2.0 * fam.loss_scale / n
    obj = _objective_theta(dataset, units, edges, cfg, alpha, b)
    trace = [obj]
    total_iters = 0
    jitter = 0.0

    if cfg.lam == 0 or U == 1:
        z, w = irls_step_quantities(fam, dataset.y, _unit_eta(gamma, units, alpha, b))
        converged = False
        for outer in range(cfg.max_outer_iters):
            quad = _quadratic(gflat, units, w, z, scale)
            system = _LinearSystem(quad, Rq, Mq, 0.0, edges, complete, jitter_rel=1e-12)
            jitter = max(jitter, system.jitter)
            a_new, bb = system.solve(quad.g_a, quad.g_b)
            alpha, b, obj, ok = _accept(dataset, units, edges, cfg, alpha, b, a_new,
                                        bb.reshape(U, p, L), obj)
            trace.append(obj)
            total_iters += 1
            if fam.is_gaussian or not ok or abs(trace[-2] - obj) <= cfg.tol_outer * max(abs(obj), 1e-300):
                converged = True
                break
            z, w = irls_step_quantities(fam, dataset.y, _unit_eta(gamma, units, alpha, b))
        return _finalize(dataset, units, cfg, "admm", alpha, b, trace, converged, total_iters, jitter)

    E = len(edges)
    inc = _incidence(U, edges)
    Qd = geom.T.shape[0] if geom.kind == "discretized_l1" else L
    if state is not None and state.get("z") is not None and state["z"].shape == (E, p, Qd):
        zv = state["z"].copy()
        uv = state["u"].copy()
        rho = float(state["rho"])
    else:
        zv = geom.transform(b[edges[:, 0]] - b[edges[:, 1]])
        uv = np.zeros_like(zv)
        rho = None
    converged = False
    eta = _unit_eta(gamma, units, alpha, b)
    coef_scale = max(float(np.sqrt(np.mean(np.einsum("uja,ab,ujb->uj", b, spec.gram, b)))), 1e-300)
    for outer in range(cfg.max_outer_iters):
        zw, w = irls_step_quantities(fam, dataset.y, eta)
        quad = _quadratic(gflat, units, w, zw, scale)
        if rho is None:
            # Balance the fusion curvature with the per-unit data curvature.
            data_curv = float(np.trace(quad.h_bb.sum(axis=0) + U * Rq)) / (U * q)
            metric_curv = float(np.trace(Mq)) / q
            rho = cfg.admm_rho * max(data_curv / (U * metric_curv), 1e-12)
            # Keep rho comparable with the fusion threshold scale.
            rho = max(rho, cfg.admm_rho * cfg.lam / max(_typical_norm(geom, b, edges), 1e-12))
        system = _LinearSystem(quad, Rq, Mq, rho, edges, complete, jitter_rel=1e-13)
        jitter = max(jitter, system.jitter)
        # Absolute floors, so that an exactly fused solution can terminate.
        abs_pri = 1e-3 * coef_scale * math.sqrt(E * p)
        abs_dual = 1e-3 * float(np.linalg.norm(quad.g_b))
        a_k, b_k = alpha, b.reshape(U, q).copy()
        admm_ok = False
        for it in range(cfg.max_admm_iters):
            total_iters += 1
            rhs_b = quad.g_b + rho * (inc.T @ geom.pullback(zv - uv).reshape(E, q))
            a_k, b_k = system.solve(quad.g_a, rhs_b)
            d = b_k.reshape(U, p, L)
            tdb = geom.transform(d[edges[:, 0]] - d[edges[:, 1]])
            z_old = zv
            zv = geom.prox(tdb + uv, cfg.lam / rho)
            uv = uv + tdb - zv
            r_norm = geom.metric_norm(tdb - zv)
            s_norm = rho * float(np.linalg.norm(inc.T @ geom.pullback(zv - z_old).reshape(E, q)))
            eps_pri = cfg.tol_primal * (max(geom.metric_norm(tdb), geom.metric_norm(zv)) + abs_pri)
            eps_dual = cfg.tol_dual * (rho * float(np.linalg.norm(inc.T @ geom.pullback(uv).reshape(E, q))) + abs_dual)
            if r_norm <= eps_pri and s_norm <= eps_dual:
                admm_ok = True
                break
            if it % 10 == 9:
                ratio_r = r_norm / eps_pri
                ratio_s = s_norm / eps_dual
                factor = 0.0
                if ratio_r > 10.0 * ratio_s:
                    factor = 2.0
                elif ratio_s > 10.0 * ratio_r:
                    factor = 0.5
                if factor:
                    rho *= factor
                    uv = uv / factor
                    system = _LinearSystem(quad, Rq, Mq, rho, edges, complete, jitter_rel=1e-13)
                    jitter = max(jitter, system.jitter)
        alpha, b, obj, ok = _accept(dataset, units, edges, cfg, alpha, b, a_k, b_k.reshape(U, p, L), obj)
        trace.append(obj)
        eta = _unit_eta(gamma, units, alpha, b)
        small = abs(trace[-2] - obj) <= cfg.tol_outer * max(abs(obj), 1e-300)
        if admm_ok and (fam.is_gaussian or small or not ok):
            converged = True
            break
    if not converged:
        log.warning("ADMM did not converge (lam=%g, phi=%g)", cfg.lam, cfg.phi)
    # Pairs fused exactly by the splitting variables: only trusted when the
    # coefficient differences agree with them to the primal tolerance.
    fused = _fused_pairs_from_z(edges, zv) if converged else None
    new_state = {"z": zv, "u": uv, "rho": rho}
    return _finalize(dataset, units, cfg, "admm", alpha, b, trace, converged, total_iters,
                     jitter, fused_pairs=fused, state=new_state)


def _typical_norm(geom, b, edges):
    if len(edges) == 0:
        return 1.0
    sample = edges[:: max(1, len(edges) // 500)]
    return float(np.median(geom.norm(b[sample[:, 0]] - b[sample[:, 1]]))) or 1.0


def _accept(dataset, units, edges, cfg, alpha, b, a_new, b_new, obj):
    """Move towards a candidate with step halving; never increase the objective.

    Returns the accepted point, its objective and whether any step was taken.
    """
    step = 1.0
    for _ in range(30):
        a_t = alpha + step * (a_new - alpha)
        b_t = b + step * (b_new - b)
        f = _objective_theta(dataset, units, edges, cfg, a_t, b_t)
        if f <= obj + 1e-12 * abs(obj):
            return a_t, b_t, min(f, obj), True
        step *= 0.5
    return alpha, b, obj, False


def fit_lqa(dataset: FunctionalDataset, cfg: PenaltyConfig, fusion_graph=None,
            init: CoefficientSet | None = None, units: FitUnits | None = None) -> FitReport:
    """Minimize the fusion objective by local quadratic approximation.

    Each fusion term ``|x|`` is majorized by ``x^2 / (2c) + c / 2`` at the
    current iterate (``c`` guarded below by ``lqa_eps``), turning the problem
    into a weighted ridge system.  Bernoulli data terms are majorized with
    the curvature bound ``1/4``, so every step is a majorize-minimize step and
    the objective never increases.
    """
    gamma, units = _prepare(dataset, units, init)
    n, p, L = gamma.shape
    fam = dataset.family
    spec = dataset.basis
    U = units.count
    q = p * L
    edges = _resolve_graph(units, fusion_graph)
    if cfg.lam == 0 or U == 1:
        report = fit_admm(dataset, cfg, edges, init, units)
        report.solver = "lqa"
        return report
    geom = fusion_geometry(spec, cfg.fusion_norm, cfg.quad_points)
    coef0 = init if init is not None else _init_coefficients(dataset, units, cfg.phi)
    alpha, b = float(coef0.alpha), coef0.coefs.copy()
    gflat = gamma.reshape(n, q)
    Rq = 2.0 * cfg.phi * np.kron(np.eye(p), spec.roughness)
    scale = 2.0 * fam.loss_scale / n
    obj = _objective_theta(dataset, units, edges, cfg, alpha, b)
    trace = [obj]
    typical = max(float(np.mean(np.sqrt(np.einsum("uja,ab,ujb->uj", b, spec.gram, b)))), 1e-12)
    eps = cfg.lqa_eps * (1.0 + typical)
    converged = False
    it = 0
    for it in range(1, cfg.max_lqa_iters + 1):
        eta = _unit_eta(gamma, units, alpha, b)
        if fam.is_gaussian:
            zw, w = dataset.y, np.ones(n)
        else:
            w = np.full(n, 0.25)
            zw = eta + (dataset.y - fam.mean(eta)) / 0.25
        quad = _quadratic(gflat, units, w, zw, scale)
        A = np.zeros((1 + U * q, 1 + U * q))
        A[0, 0] = quad.h_aa
        A[0, 1:] = quad.h_ab.ravel()
        A[1:, 0] = quad.h_ab.ravel()
        Abb = np.zeros((U, U, q, q))
        idx = np.arange(U)
        Abb[idx, idx] = quad.h_bb + Rq[None]
        diff = b[edges[:, 0]] - b[edges[:, 1]]  # (E, p, L)
        for j in range(p):
            sl = slice(j * L, (j + 1) * L)
            if geom.kind == "gram_l2":
                c = np.maximum(geom.norm(diff[:, j]), eps)
                blocks = (cfg.lam / c)[:, None, None] * geom.metric[None]
            else:
                c = np.maximum(np.abs(diff[:, j] @ geom.T.T), eps)  # (E, Q)
                wq = cfg.lam * geom.weights[None, :] / c
                blocks = np.einsum("eq,qa,qb->eab", wq, geom.T, geom.T)
            e0, e1 = edges[:, 0], edges[:, 1]
            np.add.at(Abb[:, :, sl, sl], (e0, e0), blocks)
            np.add.at(Abb[:, :, sl, sl], (e1, e1), blocks)
            np.add.at(Abb[:, :, sl, sl], (e0, e1), -blocks)
            np.add.at(Abb[:, :, sl, sl], (e1, e0), -blocks)
        A[1:, 1:] = Abb.transpose(0, 2, 1, 3).reshape(U * q, U * q)
        rhs = np.concatenate([[quad.g_a], quad.g_b.ravel()])
        sol = _dense_solve(A, rhs)
        a_new, b_new = sol[0], sol[1:].reshape(U, p, L)
        # Majorize-minimize: accept, but guard rounding with the same rule as ADMM.
        alpha, b, obj_new, ok = _accept(dataset, units, edges, cfg, alpha, b, a_new, b_new, obj)
        trace.append(obj_new)
        small = abs(obj - obj_new) <= cfg.tol_outer * max(abs(obj_new), 1e-300)
        obj = obj_new
        if small or not ok:
            converged = True
            break
    return _finalize(dataset, units, cfg, "lqa", alpha, b, trace, converged, it, 0.0)


def _dense_solve(A, rhs):
    A = 0.5 * (A + A.T)
    scale = max(np.trace(A) / len(A), 1e-300)
    jit = 0.0
    for _ in range(10):
        try:
            c = sla.cho_factor(A + jit * np.eye(len(A)), lower=True)
            return sla.cho_solve(c, rhs)
        except sla.LinAlgError:
            jit = max(jit * 100, 1e-12 * scale)
    return np.linalg.lstsq(A, rhs, rcond=None)[0]


# ---------------------------------------------------------------------------
# Tuning path
# ---------------------------------------------------------------------------

@dataclass
class PathResult:
    best: FitReport
    table: list  # dicts with phi, lambda, bic, k_hat, converged, error
    reports: list


def default_lambda_grid(lam_max: float, count: int = 16, ratio: float = 1e-3) -> np.ndarray:
    """Descending log-spaced grid from ``lam_max`` down to ``ratio * lam_max``."""
    return lam_max * np.geomspace(1.0, ratio, count)


def fit_path(dataset: FunctionalDataset, phi_grid, lambda_grid=None, units: FitUnits | None = None,
             base: PenaltyConfig | None = None, solver: str = "admm", fusion_graph=None,
             lambda_count: int = 16, lambda_ratio: float = 1e-3, keep_reports: bool = False) -> PathResult:
    """Warm-started sweep over ``(phi, lam)``; returns the minimum-BIC fit.

    ``lambda_grid=None`` uses :func:`default_lambda_grid` from the computed
    ``lambda_max`` for each ``phi`` (complete graph).  Grids are swept with
    ``lam`` descending; a failing grid point is recorded and skipped.
    """
    phi_grid = list(np.atleast_1d(phi_grid))
    if not phi_grid:
        raise ValueError("phi grid is empty")
    units = units or FitUnits.direct(dataset.n)
    base = base or PenaltyConfig()
    fitter = {"admm": fit_admm, "lqa": fit_lqa}[solver]
    table, reports = [], []
    best = None
    for phi in phi_grid:
        if lambda_grid is None:
            lam_max = lambda_max(dataset, phi, units, base.fusion_norm, base.quad_points)
            grid = default_lambda_grid(lam_max, lambda_count, lambda_ratio)
        else:
            grid = np.sort(np.atleast_1d(np.asarray(lambda_grid, dtype=float)))[::-1]
            if grid.size == 0:
                raise ValueError("lambda grid is empty")
        prev = None
        for lam in grid:
            cfg = dataclasses.replace(base, phi=float(phi), lam=float(lam))
            row = {"phi": float(phi), "lambda": float(lam)}
            try:
                kwargs = {}
                if prev is not None:
                    kwargs["init"] = prev.raw
                    if solver == "admm":
                        kwargs["state"] = prev.state
                rep = fitter(dataset, cfg, fusion_graph, units=units, **kwargs)
            except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
                row.update(bic=math.inf, k_hat=None, converged=False, error=str(exc))
                table.append(row)
                continue
            prev = rep
            row.update(bic=rep.bic, k_hat=list(rep.k_hat), converged=rep.converged, error="")
            table.append(row)
            if keep_reports:
                reports.append(rep)
            if best is None or rep.bic < best.bic:
                best = rep
    if best is None:
        raise RuntimeError("every grid point failed")
    return PathResult(best, table, reports)
