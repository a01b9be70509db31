"""Coarse partition of large samples by alternating assignment and refit.

Each of ``K`` groups carries its own coefficient functions (one per
covariate) and all groups share the intercept.  An iteration assigns every
subject to the group under which its own negative log-likelihood is
smallest, then refits every group's coefficients on its members.  Neither
step can increase the total loss, so the loss trace decreases.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import FunctionalDataset
from .fusion import CoefficientSet, FitUnits, GroupFit, fit_partition

log = logging.getLogger(__name__)

INIT_METHODS = ("seeded_plus_plus", "random_partition")


@dataclass(frozen=True)
class PreclusterConfig:
    """Settings for :func:`precluster`.

    ``phi`` is the roughness weight used in group refits (zero reproduces the
    pure likelihood loss).
    """

    K: int
    phi: float = 0.0
    init: str = "seeded_plus_plus"
    max_iters: int = 100
    empty_group_policy: str = "reseed_worst_fit"
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.K > 500:
            warnings.warn("more than 500 pre-clusters; the fusion step becomes expensive", stacklevel=2)
        if self.phi < 0:
            raise ValueError("phi must be non-negative")
        if self.init not in INIT_METHODS:
            raise ValueError(f"unknown init {self.init!r}; choose from {INIT_METHODS}")
        if self.empty_group_policy != "reseed_worst_fit":
            raise ValueError(f"unknown empty-group policy {self.empty_group_policy!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


@dataclass
class PreclusterResult:
    K: int
    labels: np.ndarray  # (n,) 0-based group of each subject
    group_coefficients: np.ndarray  # (K, p, L)
    alpha: float
    loss_trace: list
    iterations: int
    converged: bool
    notes: list = field(default_factory=list)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)

    def to_dict(self, subject_ids=None) -> dict:
        out = {
            "K": self.K,
            "alpha": self.alpha,
            "labels": (self.labels + 1).tolist(),
            "group_coefficients": self.group_coefficients.tolist(),
            "loss_trace": [float(v) for v in self.loss_trace],
            "iterations": self.iterations,
            "converged": self.converged,
            "notes": list(self.notes),
        }
        if subject_ids is not None:
            out["subject_ids"] = list(subject_ids)
        return out

    def write_json(self, path, subject_ids=None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(subject_ids), fh, indent=2)

    def write_labels_csv(self, path, subject_ids) -> None:
        with open(path, "w") as fh:
            fh.write("subject_id,label\n")
            for sid, lab in zip(subject_ids, self.labels):
                fh.write(f"{sid},{int(lab) + 1}\n")


def subject_losses(dataset: FunctionalDataset, group_coefficients: np.ndarray, alpha: float) -> np.ndarray:
    """``L[i, k]``: negative log-likelihood of subject ``i`` under group ``k``.

    Gaussian losses are squared residuals, which is the negative
    log-likelihood up to constants shared by all groups.
    """
    gamma = dataset.require_gamma()
    n = dataset.n
    G = gamma.reshape(n, -1)
    B = np.asarray(group_coefficients).reshape(len(group_coefficients), -1)
    eta = alpha + G @ B.T
    return dataset.family.data_loss(dataset.y[:, None], eta)


def assign_subject(dataset: FunctionalDataset, i: int, group_coefficients, alpha: float) -> tuple[int, float]:
    """Best group for subject ``i`` and its loss; ties go to the lowest group."""
    sub = dataset.subset([i])
    losses = subject_losses(sub, group_coefficients, alpha)[0]
    k = int(np.argmin(losses))
    return k, float(losses[k])


def _ridge_coefficients(dataset: FunctionalDataset) -> np.ndarray:
    """Per-subject minimum-norm coefficients fitting ``y_i - mean(y)`` exactly."""
    gamma = dataset.require_gamma()
    n = dataset.n
    G = gamma.reshape(n, -1)
    if dataset.family.is_gaussian:
        r = dataset.y - dataset.y.mean()
    else:
        ybar = np.clip(dataset.y.mean(), 0.05, 0.95)
        r = dataset.family.link(np.clip(dataset.y, 0.05, 0.95)) - dataset.family.link(ybar)
    sq = np.maximum(np.sum(G * G, axis=1), np.finfo(float).tiny)
    return G * (r / sq)[:, None]


def _initial_labels(dataset: FunctionalDataset, cfg: PreclusterConfig) -> np.ndarray:
    n = dataset.n
    rng = np.random.default_rng(cfg.seed)
    # Work in sorted-id order so the result does not depend on row order.
    order = np.argsort(np.asarray(dataset.subject_ids, dtype=str), kind="stable")
    if cfg.init == "random_partition":
        lab = np.empty(n, dtype=int)
        perm = rng.permutation(n)
        lab[order[perm]] = np.arange(n) % cfg.K
        return lab
    coefs = _ridge_coefficients(dataset)[order]
    p = dataset.p
    Wq = np.kron(np.eye(p), dataset.basis.gram)
    # k-means++ seeding with W-norm distances.
    first = int(rng.integers(n))
    centers = [first]
    d2 = _wdist2(coefs, coefs[first], Wq)
    for _ in range(1, cfg.K):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, _wdist2(coefs, coefs[nxt], Wq))
    C = coefs[centers]
    D = np.stack([_wdist2(coefs, c, Wq) for c in C], axis=1)
    lab_sorted = np.argmin(D, axis=1)
    lab_sorted[centers] = np.arange(cfg.K)
    lab = np.empty(n, dtype=int)
    lab[order] = lab_sorted
    return lab


def _wdist2(X, c, W):
    d = X - c
    return np.maximum(np.einsum("ia,ab,ib->i", d, W, d), 0.0)


def _refit(dataset, labels, K, phi):
    """Penalized fit with shared intercept; returns (alpha, coefs (K, p, L))."""
    n, p, L = dataset.require_gamma().shape
    sub_labels = np.repeat(labels[:, None], p, axis=1)
    g: GroupFit = fit_partition(dataset, _compact(sub_labels), phi, jitter_rel=0.0)
    coefs = np.zeros((K, p, L))
    present = np.unique(labels)
    for j in range(p):
        coefs[present, j] = g.coefs[j]
    return g.alpha, coefs


def _compact(sub_labels):
    out = np.empty_like(sub_labels)
    for j in range(sub_labels.shape[1]):
        _, out[:, j] = np.unique(sub_labels[:, j], return_inverse=True)
    return out


def _total_loss(dataset, labels, coefs, alpha, phi):
    L = subject_losses(dataset, coefs, alpha)
    val = float(L[np.arange(dataset.n), labels].sum())
    if phi:
        present = np.unique(labels)
        val += dataset.n * phi * float(np.einsum("kja,ab,kjb->", coefs[present], dataset.basis.roughness, coefs[present]))
    return val


def precluster(dataset: FunctionalDataset, cfg: PreclusterConfig) -> PreclusterResult:
    """Alternating minimization of the summed per-subject best-group loss.

    The loss trace records the total loss (sum of squared residuals for
    Gaussian outcomes, negative log-likelihood for Bernoulli) after every
    refit.  It decreases strictly whenever labels change; the loop stops
    when no label changes or after ``max_iters`` iterations.
    """
    n = dataset.n
    K = cfg.K
    if K > n:
        raise ValueError(f"K = {K} exceeds the number of subjects n = {n}")
    notes = []
    G = dataset.require_gamma().reshape(n, -1)
    identical = (np.allclose(G, G[0], rtol=1e-12, atol=0.0)
                 and np.allclose(dataset.y, dataset.y[0], rtol=1e-12, atol=0.0))
    if K > 1 and identical:
        msg = "all subjects are identical; surplus groups stay empty"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
        labels = np.zeros(n, dtype=int)
        alpha, coefs = _refit(dataset, labels, K, cfg.phi)
        loss = _total_loss(dataset, labels, coefs, alpha, cfg.phi)
        return PreclusterResult(K, labels, coefs, alpha, [loss], 0, True, notes)

    labels = _initial_labels(dataset, cfg) if K > 1 else np.zeros(n, dtype=int)
    labels = _reseed_empty(dataset, labels, K, None, None, notes)
    alpha, coefs = _refit(dataset, labels, K, cfg.phi)
    loss = _total_loss(dataset, labels, coefs, alpha, cfg.phi)
    trace = [loss]
    converged = K == 1
    it = 0
    while not converged and it < cfg.max_iters:
        it += 1
        losses = subject_losses(dataset, coefs, alpha)
        best = np.argmin(losses, axis=1)
        cur = losses[np.arange(n), labels]
        # Keep the current group on ties so that every move strictly helps.
        move = losses[np.arange(n), best] < cur
        new_labels = np.where(move, best, labels)
        new_labels = _reseed_empty(dataset, new_labels, K, losses, new_labels, notes)
        if np.array_equal(new_labels, labels):
            converged = True
            break
        a_new, c_new = _refit(dataset, new_labels, K, cfg.phi)
        # Guard against an inexact refit: the old coefficients are feasible.
        kept = _keep_empty(new_labels, coefs, c_new, K)
        f_new = _total_loss(dataset, new_labels, kept, a_new, cfg.phi)
        f_old = _total_loss(dataset, new_labels, coefs, alpha, cfg.phi)
        if f_new <= f_old:
            alpha, coefs, loss = a_new, kept, f_new
        else:
            loss = f_old
        labels = new_labels
        trace.append(loss)
    if not converged:
        notes.append(f"labels still changing after {cfg.max_iters} iterations")
        log.warning(notes[-1])
    return PreclusterResult(K, labels, coefs, float(alpha), trace, it, converged, notes)


def _keep_empty(labels, old, new, K):
    present = np.zeros(K, dtype=bool)
    present[np.unique(labels)] = True
    out = new.copy()
    out[~present] = old[~present]
    return out


def _reseed_empty(dataset, labels, K, losses, _unused, notes):
    """Move the worst-fitting subject into each empty group."""
    labels = labels.copy()
    sizes = np.bincount(labels, minlength=K)
    empty = np.flatnonzero(sizes == 0)
    if len(empty) == 0:
        return labels
    if losses is None:
        cur = np.abs(dataset.y - dataset.y.mean())
    else:
        cur = losses[np.arange(dataset.n), labels]
    order = np.argsort(-cur, kind="stable")
    taken = 0
    for k in empty:
        for i in order[taken:]:
            taken += 1
            if sizes[labels[i]] > 1:
                sizes[labels[i]] -= 1
                labels[i] = k
                sizes[k] = 1
                break
    notes.append(f"reseeded {len(empty)} empty group(s)")
    return labels


def to_grouped_units(dataset: FunctionalDataset, result: PreclusterResult) -> tuple[FitUnits, CoefficientSet]:
    """Fit-units from pre-cluster groups (empty groups dropped) and matching init."""
    if len(result.labels) != dataset.n:
        raise ValueError("pre-cluster labels do not match the dataset")
    units = FitUnits.from_labels(result.labels)
    present = np.unique(result.labels)
    init = CoefficientSet(result.alpha, result.group_coefficients[present].copy(), units.sizes.copy())
    return units, init
