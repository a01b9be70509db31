"""Simulation designs with known subgroup structure, and a replication harness.

Two designs for one functional covariate on ``[0, 1440]`` sampled each minute
with ``X(t_k) ~ N(3, 1)``; each curve is reconstructed on a shared cubic
B-spline basis of dimension 15 before the outcome is generated.

* ``bspline_random`` – subject coefficient vectors drawn around a subgroup mean
  vector (all entries 5, -5, 2, -2 for subgroups 1..4).
* ``polynomial`` – odd subgroups linear, even subgroups quadratic in ``t``.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .basis import BasisSpec, basis_with_dim, gauss_legendre_rule, eval_basis, smoothing_matrix
from .dataset import FunctionalDataset, bind_basis, make_dataset, uniform_grid
from .family import get_family

log = logging.getLogger(__name__)

SETTINGS = {1: "bspline_random", 2: "polynomial", "1": "bspline_random", "2": "polynomial",
            "bspline_random": "bspline_random", "polynomial": "polynomial"}
SETTING1_MEANS = (5.0, -5.0, 2.0, -2.0)


@dataclass(frozen=True)
class SimConfig:
    """Parameters of one simulated dataset.

    ``coef_sd`` is the spread of subject coefficients around their subgroup
    mean (``bspline_random`` only), ``noise_sd`` the Gaussian outcome noise.
    ``eta_scale`` multiplies the signal before it enters the logit for
    Bernoulli outcomes; Gaussian outcomes ignore it.
    """

    setting: str = "bspline_random"
    n: int = 100
    k1: int = 2
    family: str = "gaussian"
    m: int = 1440
    domain_end: float = 1440.0
    truth_dim: int = 15
    coef_sd: float = 0.5
    noise_sd: float | None = None
    eta_scale: float = 1.0 / 5000.0
    seed: int = 0

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        object.__setattr__(self, "setting", SETTINGS[self.setting])
        if self.n < 1 or self.k1 < 1 or self.m < self.truth_dim:
            raise ValueError("n, k1 must be positive and m >= truth_dim")
        if self.coef_sd < 0 or (self.noise_sd is not None and self.noise_sd < 0):
            raise ValueError("noise levels must be non-negative")
        get_family(self.family)

    @property
    def resolved_noise_sd(self) -> float:
        if self.noise_sd is not None:
            return float(self.noise_sd)
        return DEFAULT_NOISE_SD[self.setting]


# Outcome noise when not given.  The within-subgroup signal spread is about
# 600 in bspline_random (coefficient spread 0.5) and 150 in polynomial.
DEFAULT_NOISE_SD = {"bspline_random": 120.0, "polynomial": 30.0}


@dataclass(frozen=True)
class SimulatedDataset:
    """A generated dataset together with everything needed to score a fit."""

    dataset: FunctionalDataset
    labels: np.ndarray  # (n, p) true subgroup index, 0-based
    config: SimConfig
    truth_basis: BasisSpec
    subject_coefs: np.ndarray  # (n, L_truth) L2 projection of each subject's beta
    group_coefs: np.ndarray  # (K, L_truth) L2 projection of each subgroup's beta
    group_poly: np.ndarray | None  # (K, 3) closed form a + b t + c t^2 (polynomial setting)
    x_coefs: np.ndarray  # (n, L_truth) smoothed covariate curves
    signal: np.ndarray  # integral of X beta for each subject
    noise: np.ndarray  # Gaussian noise added to the signal (zeros for Bernoulli)
    effect_scale: float = 1.0  # multiplier from beta to the linear predictor

    def truth_curves(self) -> list:
        """True coefficient function of each subgroup as an exact curve object.

        ``bspline_random`` subgroups are represented by their mean function.
        """
        from .metrics import PolyCurve, SplineCurve

        if self.group_poly is not None:
            return [PolyCurve(tuple(c), self.truth_basis.domain_start, self.truth_basis.domain_end)
                    for c in self.group_poly]
        return [SplineCurve(self.truth_basis, c) for c in self.group_coefs]

    def group_function(self, k: int):
        """Callable true coefficient function of subgroup ``k`` (0-based)."""
        if self.group_poly is not None:
            a, b, c = self.group_poly[k]
            return lambda t: a + b * np.asarray(t) + c * np.asarray(t) ** 2
        coef = self.group_coefs[k]
        return lambda t: eval_basis(self.truth_basis, t) @ coef


def setting2_coefficients(k: int) -> tuple[float, float, float]:
    """``(intercept, slope, curvature)`` of polynomial subgroup ``k`` (1-based)."""
    if k % 2 == 1:
        a = -3.0 + 0.5 * (k - 1) / 2
        b = 0.005 - 0.002 * (k - 1) / 2
        return a, b, 0.0
    A = -1.0 - 0.5 * (k / 2 - 1)
    B = -0.005 + 0.001 * (k / 2 - 1)
    C = 0.000005 - 0.000002 * (k / 2 - 1)
    return A, B, C


def _poly_moments(spec: BasisSpec) -> np.ndarray:
    """``M[a, r] = integral of B_a(t) t^r`` for ``r = 0, 1, 2``."""
    t, w = gauss_legendre_rule(spec.breakpoints, spec.order + 2)
    B = eval_basis(spec, t, check=False)
    powers = np.stack([np.ones_like(t), t, t ** 2], axis=1)
    return B.T @ (w[:, None] * powers)


def generate(cfg: SimConfig) -> SimulatedDataset:
    rng = np.random.default_rng(cfg.seed)
    domain = (0.0, float(cfg.domain_end))
    spec = basis_with_dim(4, cfg.truth_dim, domain)
    times = uniform_grid(cfg.m, domain)
    labels = rng.integers(cfg.k1, size=cfg.n)
    X = rng.normal(3.0, 1.0, size=(cfg.n, cfg.m))
    x_coefs = X @ smoothing_matrix(spec, times).T
    W = spec.gram
    L = spec.dim
    group_poly = None
    if cfg.setting == "bspline_random":
        if cfg.k1 > len(SETTING1_MEANS):
            raise ValueError(f"bspline_random supports at most {len(SETTING1_MEANS)} subgroups")
        means = np.array([np.full(L, SETTING1_MEANS[k]) for k in range(cfg.k1)])
        subject_coefs = means[labels] + cfg.coef_sd * rng.standard_normal((cfg.n, L))
        signal = np.einsum("ia,ab,ib->i", x_coefs, W, subject_coefs)
        group_coefs = means
    else:
        group_poly = np.array([setting2_coefficients(k + 1) for k in range(cfg.k1)])
        moments = _poly_moments(spec)
        # L2 projection of each polynomial onto the truth basis.
        group_coefs = np.linalg.solve(W, moments @ group_poly.T).T
        subject_coefs = group_coefs[labels]
        # Exact integral of the smoothed covariate against the polynomial.
        signal = np.einsum("ia,ak,ik->i", x_coefs, moments, group_poly[labels])
    fam = get_family(cfg.family)
    if fam.is_gaussian:
        noise = rng.normal(0.0, cfg.resolved_noise_sd, size=cfg.n)
        y = signal + noise
        scale = 1.0
    else:
        noise = np.zeros(cfg.n)
        scale = float(cfg.eta_scale)
        log.info("Bernoulli linear predictor rescaled by %g", scale)
        prob = 1.0 / (1.0 + np.exp(-scale * signal))
        y = (rng.random(cfg.n) < prob).astype(float)
    ds = make_dataset(X, y, fam, times=times, domain=domain)
    return SimulatedDataset(
        dataset=ds,
        labels=labels[:, None],
        config=cfg,
        truth_basis=spec,
        subject_coefs=subject_coefs,
        group_coefs=group_coefs,
        group_poly=group_poly,
        x_coefs=x_coefs,
        signal=signal,
        noise=noise,
        effect_scale=scale,
    )


def generate_setting1(cfg: SimConfig | None = None, **kwargs) -> SimulatedDataset:
    cfg = dataclasses.replace(cfg or SimConfig(), setting="bspline_random", **kwargs)
    return generate(cfg)


def generate_setting2(cfg: SimConfig | None = None, **kwargs) -> SimulatedDataset:
    cfg = dataclasses.replace(cfg or SimConfig(), setting="polynomial", **kwargs)
    return generate(cfg)


# ---------------------------------------------------------------------------
# Replication harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodConfig:
    """How each replicate is fitted.

    ``method`` is ``"ghfm"`` (fusion path with BIC) or ``"homogeneous"``
    (one coefficient function for everybody).  ``precluster_k`` switches
    the fusion to grouped mode over that many pre-clusters.  ``phi_rel`` is
    relative to :func:`ghfm.fusion.phi_scale`.
    """

    method: str = "ghfm"
    basis_dim: int = 15
    basis_order: int = 4
    gamma_method: str = "grid"
    phi_rel: float = 0.5
    lambda_count: int = 12
    lambda_ratio: float = 1e-2
    solver: str = "admm"
    precluster_k: int | None = None
    precluster_phi: float = 0.0
    run_test: bool = True

    def __post_init__(self):
        if self.method not in ("ghfm", "homogeneous"):
            raise ValueError(f"unknown method {self.method!r}")


SUMMARY_COLUMNS = ("replication", "seed", "NMI", "Purity", "ISE", "p-value", "K_hat",
                   "lambda", "phi", "seconds", "error")


@dataclass
class ReplicationSummary:
    rows: list
    config: SimConfig
    method: MethodConfig

    @property
    def successes(self) -> list:
        return [r for r in self.rows if not r["error"]]

    @property
    def n_failed(self) -> int:
        return len(self.rows) - len(self.successes)

    def mean(self, column: str) -> float:
        vals = [r[column] for r in self.successes if r[column] is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def fraction(self, column: str, predicate) -> float:
        vals = [r[column] for r in self.successes if r[column] is not None]
        return float(np.mean([bool(predicate(v)) for v in vals])) if vals else float("nan")

    def means(self) -> dict:
        return {c: self.mean(c) for c in ("NMI", "Purity", "ISE", "p-value", "seconds")}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SUMMARY_COLUMNS)
            for r in self.rows:
                w.writerow(["" if r[c] is None else r[c] for c in SUMMARY_COLUMNS])
            m = self.means()
            w.writerow(["mean", "", m["NMI"], m["Purity"], m["ISE"], m["p-value"], "", "", "",
                        m["seconds"], f"{self.n_failed} failed of {len(self.rows)}"])


def fit_replicate(sim: SimulatedDataset, method: MethodConfig) -> dict:
    """Fit one simulated dataset and score it against the truth."""
    from .fusion import FitUnits, default_phi, fit_path, homogeneous_fit
    from .inference import test_heterogeneity
    from .metrics import SplineCurve, ise, nmi, purity
    from .precluster import PreclusterConfig, precluster, to_grouped_units

    spec = basis_with_dim(method.basis_order, method.basis_dim, sim.dataset.domain)
    ds = bind_basis(sim.dataset, spec, method.gamma_method)
    truth = sim.labels[:, 0]
    out = {"NMI": None, "Purity": None, "ISE": None, "p-value": None, "K_hat": None,
           "lambda": None, "phi": None}
    units = FitUnits.direct(ds.n)
    if method.method == "homogeneous":
        phi = default_phi(ds, units, method.phi_rel)
        g = homogeneous_fit(ds, phi, roughness_weight=float(units.count))
        est = [SplineCurve(spec, g.coefs[0][0])]
        labels = np.zeros(ds.n, dtype=int)
        out.update(NMI=nmi(truth, labels), K_hat=1, phi=phi,
                   ISE=ise(est, sim.truth_curves(), truth, labels))
        return out
    init = None
    if method.precluster_k:
        pc = precluster(ds, PreclusterConfig(K=method.precluster_k, phi=method.precluster_phi,
                                             seed=sim.config.seed))
        out["Purity"] = purity(pc.labels, truth, method.precluster_k)
        units, init = to_grouped_units(ds, pc)
    phi = default_phi(ds, units, method.phi_rel)
    res = fit_path(ds, [phi], units=units, solver=method.solver,
                   lambda_count=method.lambda_count, lambda_ratio=method.lambda_ratio)
    best = res.best
    labels = best.subject_labels()[:, 0]
    est = [SplineCurve(spec, c) for c in best.coefficients.coefs[0]]
    out.update(NMI=nmi(truth, labels), ISE=ise(est, sim.truth_curves(), truth, labels),
               K_hat=int(best.k_hat[0]), phi=phi, **{"lambda": best.lam})
    if method.run_test:
        try:
            out["p-value"] = test_heterogeneity(ds, best.subject_labels(), phi).p_value
        except ValueError as exc:
            log.info("heterogeneity test skipped: %s", exc)
    return out


def _one_replication(args):
    cfg, method, r = args
    seed = cfg.seed + r
    t0 = time.perf_counter()
    row = {c: None for c in SUMMARY_COLUMNS}
    row.update(replication=r, seed=seed, error="")
    try:
        sim = generate(dataclasses.replace(cfg, seed=seed))
        row.update(fit_replicate(sim, method))
    except Exception as exc:  # recorded, summary uses successes only
        log.warning("replication %d failed: %s", r, exc)
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["seconds"] = time.perf_counter() - t0
    return row


def run_replications(cfg: SimConfig, method: MethodConfig | None = None, n_reps: int = 20,
                     workers: int = 1) -> ReplicationSummary:
    """Generate and fit ``n_reps`` datasets with seeds ``cfg.seed + r``."""
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")
    method = method or MethodConfig()
    jobs = [(cfg, method, r) for r in range(n_reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_one_replication, jobs))
    else:
        rows = [_one_replication(j) for j in jobs]
    return ReplicationSummary(rows, cfg, method)
