"""Command-line interface: simulate, fit, test, evaluate, replicate.

Every command writes ``<command>_manifest.json`` next to its outputs recording the
resolved options, seed and library versions.  Exit codes: 0 success, 1 usage
error, 2 invalid data, 3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import platform
import sys
import time
from importlib import metadata

import numpy as np
import scipy

from . import fusion
from .basis import BasisSpec, basis_with_dim, eval_basis
from .dataset import DEFAULT_DOMAIN_END, DataValidationError, bind_basis, load_config, load_dataset, write_dataset
from .inference import HeterogeneityTest, test_heterogeneity
from .metrics import PolyCurve, SplineCurve, ise, nmi, purity
from .precluster import PreclusterConfig, precluster, to_grouped_units
from .simulate import MethodConfig, SimConfig, generate, run_replications

log = logging.getLogger("ghfm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONCONVERGED = 0, 1, 2, 3
OUTPUT_ENV = "GHFM_OUTPUT_DIR"
DEFAULT_PRECLUSTER_K = 50


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"ghfm": pkg, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _write_manifest(outdir, args, outputs, notes=(), extra=None):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": cfg,
        "seed": getattr(args, "seed", None),
        "versions": _versions(),
        "outputs": sorted(os.path.basename(p) for p in outputs),
        "notes": list(notes),
    }
    if extra:
        manifest.update(extra)
    _write_json(os.path.join(outdir, f"{args.command}_manifest.json"), manifest)


def _outdir(args) -> str:
    out = args.outdir or os.environ.get(OUTPUT_ENV) or "."
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out!r}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out!r} is not writable")
    return out


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _sim_config(args) -> SimConfig:
    return SimConfig(setting=str(args.setting), n=args.n, k1=args.k, family=args.family,
                     m=args.m, coef_sd=args.coef_sd, noise_sd=args.noise_sd,
                     eta_scale=args.eta_scale, seed=args.seed)


def _truth_record(sim) -> list:
    spec = sim.truth_basis
    out = []
    for k, curve in enumerate(sim.truth_curves()):
        if isinstance(curve, PolyCurve):
            out.append({"label": k + 1, "kind": "polynomial", "coef": list(curve.coef),
                        "domain": [curve.start, curve.end],
                        "spline_projection": sim.group_coefs[k].tolist()})
        else:
            out.append({"label": k + 1, "kind": "spline", "order": spec.order, "dim": spec.dim,
                        "domain": [spec.domain_start, spec.domain_end], "coef": curve.coef.tolist()})
    return out


def cmd_simulate(args) -> int:
    out = _outdir(args)
    sim = generate(_sim_config(args))
    paths = list(write_dataset(sim.dataset, out).values())
    lab_path = os.path.join(out, "truth_labels.csv")
    with open(lab_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "label"])
        for sid, lab in zip(sim.dataset.subject_ids, sim.labels[:, 0]):
            w.writerow([sid, int(lab) + 1])
    truth_path = os.path.join(out, "truth.json")
    _write_json(truth_path, {
        "setting": sim.config.setting,
        "family": sim.config.family,
        "effect_scale": sim.effect_scale,
        "noise_sd": sim.config.resolved_noise_sd,
        "functions": _truth_record(sim),
    })
    paths += [lab_path, truth_path]
    notes = []
    if sim.effect_scale != 1.0:
        notes.append(f"linear predictor multiplied by {sim.effect_scale!r} before the logit")
    _write_manifest(out, args, paths, notes, {"sim_config": dataclasses.asdict(sim.config)})
    print(f"wrote {sim.dataset.n} subjects to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _load(args):
    curves = args.curves
    if not curves:
        raise UsageError("--curves is required")
    for p in list(curves) + [args.outcomes]:
        if not p or not os.path.exists(p):
            raise UsageError(f"input file {p!r} does not exist")
    ds = load_dataset(curves, args.outcomes, args.family, (0.0, args.domain_end))
    if ds.rejected:
        log.warning("rejected %d subject(s) with missing cells", len(ds.rejected))
    spec = basis_with_dim(args.basis_order, args.basis_dim, (0.0, args.domain_end))
    return bind_basis(ds, spec, args.gamma_method)


def _penalty_base(args) -> fusion.PenaltyConfig:
    return fusion.PenaltyConfig(
        admm_rho=args.admm_rho, tol_primal=args.tol, tol_dual=args.tol,
        max_admm_iters=args.max_admm_iters, max_outer_iters=args.max_outer_iters,
        fusion_norm=args.fusion_norm, quad_points=args.quad_points, merge_tol=args.merge_tol,
    )


def _write_coefficient_csv(path, spec: BasisSpec, report: fusion.FitReport, names, points: int):
    t = np.linspace(spec.domain_start, spec.domain_end, points)
    B = eval_basis(spec, t)
    cols, header = [t], ["t"]
    for j, name in enumerate(names):
        for k, c in enumerate(report.coefficients.coefs[j]):
            cols.append(B @ c)
            header.append(f"{name}_group{k + 1}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.column_stack(cols):
            w.writerow([repr(float(v)) for v in row])


def _write_labels_csv(path, ids, labels, names):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id"] + [f"label_{n}" for n in names])
        for sid, row in zip(ids, labels):
            w.writerow([sid] + [int(v) + 1 for v in row])


def _write_grid_csv(path, table):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phi", "lambda", "bic", "k_hat", "converged", "error"])
        for r in table:
            k = "" if r["k_hat"] is None else ";".join(str(v) for v in r["k_hat"])
            w.writerow([repr(r["phi"]), repr(r["lambda"]), repr(float(r["bic"])), k,
                        r["converged"], r["error"]])


def cmd_fit(args) -> int:
    out = _outdir(args)
    ds = _load(args)
    notes, outputs = [], []
    units = fusion.FitUnits.direct(ds.n)
    grouped = args.K is not None or ds.n > args.large_sample_threshold
    init = None
    if grouped:
        K = args.K if args.K is not None else DEFAULT_PRECLUSTER_K
        if args.K is None:
            notes.append(f"n = {ds.n} exceeds {args.large_sample_threshold}; pre-clustered with default K = {K}")
        pc = precluster(ds, PreclusterConfig(K=K, phi=args.precluster_phi, seed=args.seed))
        units, init = to_grouped_units(ds, pc)
        pj = os.path.join(out, "precluster.json")
        pl = os.path.join(out, "precluster_labels.csv")
        pc.write_json(pj, ds.subject_ids)
        pc.write_labels_csv(pl, ds.subject_ids)
        outputs += [pj, pl]
        notes.append(f"grouped mode over {units.count} pre-clusters")
    else:
        notes.append("direct mode (one fit-unit per subject)")
    if args.phi is not None:
        phi_grid = list(args.phi)
    else:
        scale = fusion.phi_scale(ds, units)
        phi_grid = [r * scale for r in args.phi_rel]
    graph = None
    if args.knn:
        if grouped:
            raise UsageError("--knn applies to direct mode only")
        start = fusion._init_coefficients(ds, units, phi_grid[0])
        graph = fusion.knn_graph(start.coefs, ds.basis.gram, args.knn)
        if args.lambda_ is None:
            raise UsageError("--knn requires an explicit --lambda grid")
        notes.append(f"{args.knn}-nearest-neighbour fusion graph with {len(graph)} edges")
    res = fusion.fit_path(ds, phi_grid, args.lambda_, units=units, base=_penalty_base(args),
                          solver=args.solver, fusion_graph=graph,
                          lambda_count=args.lambda_count, lambda_ratio=args.lambda_ratio)
    best = res.best
    rp = os.path.join(out, "fit_report.json")
    report = best.to_dict(ds.subject_ids)
    report["basis"] = {"order": ds.basis.order, "dim": ds.basis.dim,
                       "domain": [ds.basis.domain_start, ds.basis.domain_end]}
    report["covariates"] = list(ds.covariate_names)
    report["mode"] = "grouped" if grouped else "direct"
    report["rejected_subjects"] = [list(r) for r in ds.rejected]
    _write_json(rp, report)
    lp = os.path.join(out, "labels.csv")
    _write_labels_csv(lp, ds.subject_ids, best.subject_labels(), ds.covariate_names)
    cp = os.path.join(out, "coefficients.csv")
    _write_coefficient_csv(cp, ds.basis, best, ds.covariate_names, args.grid_points)
    gp = os.path.join(out, "bic_grid.csv")
    _write_grid_csv(gp, res.table)
    outputs += [rp, lp, cp, gp]
    converged = best.converged
    if not converged:
        notes.append("selected fit did not converge")
    _write_manifest(out, args, outputs, notes,
                    {"inputs": {"curves": [os.path.abspath(p) for p in args.curves],
                                "outcomes": os.path.abspath(args.outcomes)}})
    print(f"K_hat = {best.k_hat}, lambda = {best.lam:.6g}, BIC = {best.bic:.6g}")
    return EXIT_OK if converged else EXIT_NONCONVERGED


# ---------------------------------------------------------------------------
# test and evaluate
# ---------------------------------------------------------------------------

def _read_fit(fit_dir):
    rp = os.path.join(fit_dir, "fit_report.json")
    mp = os.path.join(fit_dir, "fit_manifest.json")
    for p in (rp, mp):
        if not os.path.exists(p):
            raise UsageError(f"missing fit artifact {p}")
    with open(rp, encoding="utf-8") as fh:
        report = json.load(fh)
    with open(mp, encoding="utf-8") as fh:
        manifest = json.load(fh)
    return report, manifest


def _dataset_from_fit(report, manifest):
    cfg = manifest["config"]
    inputs = manifest["inputs"]
    dom = tuple(report["basis"]["domain"])
    ds = load_dataset(inputs["curves"], inputs["outcomes"], cfg["family"], dom)
    spec = basis_with_dim(report["basis"]["order"], report["basis"]["dim"], dom)
    ds = bind_basis(ds, spec, cfg["gamma_method"])
    ids = report["subject_ids"]
    if list(ds.subject_ids) != ids:
        raise DataValidationError("dataset subjects differ from the fitted subjects")
    return ds


def cmd_test(args) -> int:
    out = _outdir(args)
    report, manifest = _read_fit(args.fit)
    ds = _dataset_from_fit(report, manifest)
    labels = np.asarray(report["subject_labels"], dtype=int) - 1
    phi = report["phi"] if args.phi is None else args.phi
    res: HeterogeneityTest = test_heterogeneity(ds, labels, phi)
    jp = os.path.join(out, "test.json")
    _write_json(jp, res.to_dict())
    cp = os.path.join(out, "test.csv")
    with open(cp, "w", encoding="utf-8") as fh:
        fh.write(HeterogeneityTest.CSV_HEADER + "\n" + res.csv_row() + "\n")
    _write_manifest(out, args, [jp, cp])
    print(f"{res.statistic_kind} = {res.statistic:.6g}, df = {res.df}, p-value = {res.p_value:.6g}")
    return EXIT_OK


def _read_labels(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return {r[0]: int(r[1]) for r in rows[1:]}


def _truth_curves(truth):
    curves = []
    for f in truth["functions"]:
        if f["kind"] == "polynomial":
            curves.append(PolyCurve(tuple(f["coef"]), *f["domain"]))
        else:
            spec = basis_with_dim(f["order"], f["dim"], tuple(f["domain"]))
            curves.append(SplineCurve(spec, np.asarray(f["coef"])))
    return curves


def cmd_evaluate(args) -> int:
    out = _outdir(args)
    report, _ = _read_fit(args.fit)
    tl = os.path.join(args.truth, "truth_labels.csv")
    tj = os.path.join(args.truth, "truth.json")
    for p in (tl, tj):
        if not os.path.exists(p):
            raise UsageError(f"missing truth artifact {p}")
    truth_map = _read_labels(tl)
    ids = report["subject_ids"]
    missing = [s for s in ids if s not in truth_map]
    if missing:
        raise DataValidationError(f"subject {missing[0]!r} has no truth label")
    truth = np.array([truth_map[s] for s in ids]) - 1
    est = np.asarray(report["subject_labels"], dtype=int)[:, 0] - 1
    with open(tj, encoding="utf-8") as fh:
        truth_fn = json.load(fh)
    b = report["basis"]
    spec = basis_with_dim(b["order"], b["dim"], tuple(b["domain"]))
    est_curves = [SplineCurve(spec, np.asarray(c)) for c in report["coefficients"][0]]
    t_curves = _truth_curves(truth_fn)
    scale = float(truth_fn.get("effect_scale", 1.0))
    if scale != 1.0:
        # Estimates live on the rescaled linear-predictor scale.
        est_curves = [SplineCurve(c.spec, c.coef / scale) for c in est_curves]
    metrics = {"NMI": nmi(truth, est), "ISE": ise(est_curves, t_curves, truth, est), "Purity": None}
    pj = os.path.join(args.fit, "precluster.json")
    if os.path.exists(pj):
        with open(pj, encoding="utf-8") as fh:
            pc = json.load(fh)
        metrics["Purity"] = purity(np.asarray(pc["labels"]), truth, pc["K"])
    mj = os.path.join(out, "metrics.json")
    _write_json(mj, metrics)
    mc = os.path.join(out, "metrics.csv")
    with open(mc, "w", encoding="utf-8") as fh:
        fh.write("NMI,Purity,ISE\n")
        pur = "" if metrics["Purity"] is None else repr(metrics["Purity"])
        fh.write(f"{metrics['NMI']!r},{pur},{metrics['ISE']!r}\n")
    _write_manifest(out, args, [mj, mc])
    print(", ".join(f"{k} = {v:.4g}" for k, v in metrics.items() if v is not None))
    return EXIT_OK


# ---------------------------------------------------------------------------
# replicate
# ---------------------------------------------------------------------------

def cmd_replicate(args) -> int:
    out = _outdir(args)
    cfg = _sim_config(args)
    method = MethodConfig(method=args.method, basis_dim=args.basis_dim, basis_order=args.basis_order,
                          gamma_method=args.gamma_method, phi_rel=args.phi_rel[0],
                          lambda_count=args.lambda_count, lambda_ratio=args.lambda_ratio,
                          solver=args.solver, precluster_k=args.K)
    t0 = time.perf_counter()
    summary = run_replications(cfg, method, args.reps, workers=args.threads)
    path = os.path.join(out, "replications.csv")
    summary.write_csv(path)
    _write_manifest(out, args, [path], extra={"sim_config": dataclasses.asdict(cfg),
                                              "method_config": dataclasses.asdict(method),
                                              "seconds": time.perf_counter() - t0})
    m = summary.means()
    print(f"{len(summary.successes)}/{args.reps} replications; "
          + ", ".join(f"{k} = {v:.4g}" for k, v in m.items() if np.isfinite(v)))
    return EXIT_OK if summary.successes else EXIT_NONCONVERGED


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="key = value file supplying defaults for any option")
    p.add_argument("--outdir", help=f"output directory (default ${OUTPUT_ENV} or .)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="maximum worker processes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_sim(p):
    p.add_argument("--setting", choices=["1", "2"], default="1")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--k", type=int, default=2, help="number of true subgroups")
    p.add_argument("--family", choices=["gaussian", "bernoulli"], default="gaussian")
    p.add_argument("--m", type=int, default=1440, help="grid points per curve")
    p.add_argument("--coef-sd", type=float, default=0.5)
    p.add_argument("--noise-sd", type=float, default=None)
    p.add_argument("--eta-scale", type=float, default=1.0 / 5000.0)


def _add_model(p):
    p.add_argument("--domain-end", type=float, default=DEFAULT_DOMAIN_END)
    p.add_argument("--basis-order", type=int, default=4)
    p.add_argument("--basis-dim", type=int, default=15)
    p.add_argument("--gamma-method", choices=["grid", "smooth"], default="grid")
    p.add_argument("--phi", type=float, nargs="+", default=None, help="absolute roughness weights")
    p.add_argument("--phi-rel", type=float, nargs="+", default=[fusion.DEFAULT_PHI_REL],
                   help="roughness weights relative to the data curvature scale")
    p.add_argument("--lambda", dest="lambda_", type=float, nargs="+", default=None)
    p.add_argument("--lambda-count", type=int, default=12)
    p.add_argument("--lambda-ratio", type=float, default=1e-2)
    p.add_argument("--solver", choices=["admm", "lqa"], default="admm")
    p.add_argument("--K", type=int, default=None, help="number of pre-clusters (grouped mode)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ghfm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a simulated dataset")
    _add_common(p)
    _add_sim(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the fusion model with BIC tuning")
    _add_common(p)
    _add_model(p)
    p.add_argument("--curves", nargs="+", help="one wide CSV per covariate")
    p.add_argument("--outcomes", help="CSV with subject_id,y")
    p.add_argument("--family", choices=["gaussian", "bernoulli"], default="gaussian")
    p.add_argument("--large-sample-threshold", type=int, default=fusion.LARGE_SAMPLE_THRESHOLD)
    p.add_argument("--precluster-phi", type=float, default=0.0)
    p.add_argument("--knn", type=int, default=None, help="direct-mode k-nearest-neighbour graph")
    p.add_argument("--fusion-norm", choices=["gram_l2", "discretized_l1"], default="gram_l2")
    p.add_argument("--quad-points", type=int, default=0)
    p.add_argument("--merge-tol", type=float, default=1e-4)
    p.add_argument("--admm-rho", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--max-admm-iters", type=int, default=500)
    p.add_argument("--max-outer-iters", type=int, default=25)
    p.add_argument("--grid-points", type=int, default=145, help="samples in coefficients.csv")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("test", help="heterogeneity test for a fitted partition")
    _add_common(p)
    p.add_argument("--fit", required=True, help="directory written by fit")
    p.add_argument("--phi", type=float, default=None, help="override the fit's roughness weight")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("evaluate", help="score a fit against simulation truth")
    _add_common(p)
    p.add_argument("--fit", required=True)
    p.add_argument("--truth", required=True, help="directory written by simulate")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("replicate", help="simulate and fit many replicates")
    _add_common(p)
    _add_sim(p)
    _add_model(p)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--method", choices=["ghfm", "homogeneous"], default="ghfm")
    p.set_defaults(func=cmd_replicate)
    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults taken from ``--config`` (command line wins)."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    if not os.path.exists(args.config):
        raise UsageError(f"config file {args.config!r} does not exist")
    values = load_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest == "lambda":
            dest = "lambda_"
        if dest not in known:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        action = known[dest]
        if isinstance(value, str):
            parts = value.split()
            conv = action.type or str
            try:
                vals = [conv(v) for v in parts]
            except ValueError as exc:
                raise UsageError(f"bad value for {key!r}: {value!r}") from exc
            value = vals if action.nargs in ("+", "*") else vals[0]
        elif action.nargs in ("+", "*"):
            value = [value]
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(f"ghfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("ghfm: error: --threads must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ghfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataValidationError as exc:
        print(f"ghfm: invalid data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeError as exc:
        print(f"ghfm: solver failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
