"""Grid-sampled functional covariates, scalar outcomes, and their CSV layout.

Curves are stored one wide CSV per covariate (``subject_id, v_1, ..., v_m``)
and outcomes in a two-column CSV (``subject_id, y``).  A header made of
numbers is read as the time grid; any other header means the grid is uniform,
``t_k = start + k * T / m`` for ``k = 0, ..., m - 1``.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSpec, cross_gram, projection_matrix, smoothing_matrix
from .family import Family, get_family

MISSING_TOKENS = {"", "na", "nan", "none", "null"}
DEFAULT_DOMAIN_END = 1440.0


class DataValidationError(ValueError):
    """Input files are inconsistent or malformed."""


@dataclass(frozen=True)
class FunctionalDataset:
    """``n`` subjects with ``p`` curve covariates and one scalar outcome each.

    ``gamma`` has shape ``(n, p, L)`` once a basis is bound with
    :func:`bind_basis`; it holds the integrals of the basis against each
    curve.
    """

    subject_ids: tuple
    covariate_names: tuple
    times: tuple
    curves: tuple
    y: np.ndarray
    family: Family
    domain: tuple = (0.0, DEFAULT_DOMAIN_END)
    basis: BasisSpec | None = None
    gamma: np.ndarray | None = None
    gamma_method: str | None = None
    rejected: tuple = field(default=())

    def __post_init__(self):
        n = len(self.subject_ids)
        if len(set(self.subject_ids)) != n:
            raise DataValidationError("subject ids must be unique")
        if not (len(self.covariate_names) == len(self.times) == len(self.curves)):
            raise DataValidationError("covariate names, grids and curves must align")
        for name, t, X in zip(self.covariate_names, self.times, self.curves):
            if X.shape != (n, len(t)):
                raise DataValidationError(
                    f"covariate {name!r}: expected curves of shape {(n, len(t))}, got {X.shape}"
                )
            if not np.all(np.isfinite(X)):
                raise DataValidationError(f"covariate {name!r} has non-finite values")
            if len(t) > 1 and np.any(np.diff(t) <= 0):
                raise DataValidationError(f"covariate {name!r}: time grid is not increasing")
        if self.y.shape != (n,):
            raise DataValidationError(f"expected {n} outcomes, got shape {self.y.shape}")
        try:
            self.family.validate(self.y)
        except ValueError as exc:
            raise DataValidationError(str(exc)) from exc

    @property
    def n(self) -> int:
        return len(self.subject_ids)

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    def require_gamma(self) -> np.ndarray:
        if self.gamma is None:
            raise ValueError("dataset has no basis bound; call bind_basis first")
        return self.gamma

    def subset(self, index) -> "FunctionalDataset":
        """Dataset restricted to the subjects at positions ``index``."""
        index = np.asarray(index, dtype=int)
        return dataclasses.replace(
            self,
            subject_ids=tuple(self.subject_ids[i] for i in index),
            curves=tuple(X[index] for X in self.curves),
            y=self.y[index],
            gamma=None if self.gamma is None else self.gamma[index],
            rejected=(),
        )

    def with_outcomes(self, y) -> "FunctionalDataset":
        return dataclasses.replace(self, y=np.asarray(y, dtype=float))


def make_dataset(curves, y, family, times=None, subject_ids=None, names=None,
                 domain=(0.0, DEFAULT_DOMAIN_END)) -> FunctionalDataset:
    """Build a dataset from in-memory arrays.

    ``curves`` is one ``(n, m)`` array or a sequence of them (one per
    covariate).  ``times`` defaults to the uniform grid on ``domain``.
    """
    if isinstance(curves, np.ndarray) and curves.ndim == 2:
        curves = [curves]
    curves = [np.asarray(X, dtype=float) for X in curves]
    n = curves[0].shape[0]
    if times is None:
        times = [uniform_grid(X.shape[1], domain) for X in curves]
    elif isinstance(times, np.ndarray) and times.ndim == 1:
        times = [times] * len(curves)
    if subject_ids is None:
        width = len(str(max(n - 1, 0)))
        subject_ids = [f"s{i:0{width}d}" for i in range(n)]
    if names is None:
        names = [f"X{j + 1}" for j in range(len(curves))]
    return FunctionalDataset(
        subject_ids=tuple(str(s) for s in subject_ids),
        covariate_names=tuple(names),
        times=tuple(np.asarray(t, dtype=float) for t in times),
        curves=tuple(curves),
        y=np.asarray(y, dtype=float),
        family=get_family(family),
        domain=(float(domain[0]), float(domain[1])),
    )


def uniform_grid(m: int, domain=(0.0, DEFAULT_DOMAIN_END)) -> np.ndarray:
    start, end = domain
    return start + np.arange(m) * (end - start) / m


def bind_basis(dataset: FunctionalDataset, spec: BasisSpec, method: str = "grid",
               smooth_spec: BasisSpec | None = None) -> FunctionalDataset:
    """Compute ``gamma[i, j] = integral of B(t) X_ij(t)`` for every subject.

    ``method="grid"`` integrates the piecewise-linear interpolant of the
    samples; ``method="smooth"`` first fits each curve by least squares on
    ``smooth_spec`` (default: ``spec``) and integrates the smoothed curve.
    """
    if (spec.domain_start, spec.domain_end) != tuple(dataset.domain):
        raise ValueError(
            f"basis domain [{spec.domain_start}, {spec.domain_end}] does not match "
            f"dataset domain {list(dataset.domain)}"
        )
    gammas = []
    for t, X in zip(dataset.times, dataset.curves):
        if len(t) < spec.dim:
            raise ValueError(
                f"grid of {len(t)} points is shorter than the basis dimension {spec.dim}"
            )
        if method == "grid":
            gammas.append(X @ projection_matrix(spec, t).T)
        elif method == "smooth":
            s = smooth_spec or spec
            coef = X @ smoothing_matrix(s, t).T
            gammas.append(coef @ (s.gram if s == spec else cross_gram(s, spec)))
        else:
            raise ValueError(f"unknown projection method {method!r}")
    gamma = np.stack(gammas, axis=1)
    return dataclasses.replace(dataset, basis=spec, gamma=gamma, gamma_method=method)


# ---------------------------------------------------------------------------
# CSV input / output
# ---------------------------------------------------------------------------

def _parse_cell(text: str, where: str) -> float:
    s = text.strip()
    if s.lower() in MISSING_TOKENS:
        return math.nan
    try:
        return float(s)
    except ValueError:
        raise DataValidationError(f"non-numeric cell {text!r} at {where}") from None


def _header_times(header, m, domain):
    try:
        t = np.array([float(h) for h in header])
    except ValueError:
        return uniform_grid(m, domain)
    if len(t) > 1 and np.any(np.diff(t) <= 0):
        raise DataValidationError("time header must be strictly increasing")
    return t


def read_curve_csv(path, domain=(0.0, DEFAULT_DOMAIN_END)):
    """Read a wide curve file. Returns ``(ids, times, values)``; missing cells are NaN."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataValidationError(f"{path}: header needs subject_id and at least one value column")
        m = len(header) - 1
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != m + 1:
                raise DataValidationError(
                    f"{path}:{lineno}: ragged row with {len(row) - 1} values, expected {m}"
                )
            ids.append(row[0].strip())
            rows.append([_parse_cell(c, f"{path}:{lineno}") for c in row[1:]])
    times = _header_times(header[1:], m, domain)
    values = np.array(rows, dtype=float).reshape(len(rows), m)
    return ids, times, values


def read_outcome_csv(path):
    ids, y = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != 2:
            raise DataValidationError(f"{path}: expected header 'subject_id,y'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataValidationError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            ids.append(row[0].strip())
            y.append(_parse_cell(row[1], f"{path}:{lineno}"))
    return ids, np.array(y, dtype=float)


def load_dataset(curve_files, outcome_file, family, domain=(0.0, DEFAULT_DOMAIN_END)) -> FunctionalDataset:
    """Load and validate a dataset from CSV files.

    Parameters
    ----------
    curve_files : mapping or sequence of paths
        One wide CSV per covariate. A mapping gives covariate names; a
        sequence uses the file stems.
    outcome_file : path
    family : str or Family

    Subjects with a missing cell in any file are dropped and listed in
    ``dataset.rejected``. Any id present in one file but not another is an
    error.
    """
    if isinstance(curve_files, (str, os.PathLike)):
        curve_files = [curve_files]
    if not isinstance(curve_files, dict):
        curve_files = {os.path.splitext(os.path.basename(str(p)))[0]: p for p in curve_files}
    fam = get_family(family)
    out_ids, y = read_outcome_csv(outcome_file)
    if len(set(out_ids)) != len(out_ids):
        raise DataValidationError(f"{outcome_file}: duplicate subject ids")
    order = {sid: k for k, sid in enumerate(out_ids)}
    names, times, curves = [], [], []
    bad = {out_ids[k]: "missing outcome" for k in np.nonzero(np.isnan(y))[0]}
    for name, path in curve_files.items():
        ids, t, values = read_curve_csv(path, domain)
        if len(set(ids)) != len(ids):
            raise DataValidationError(f"{path}: duplicate subject ids")
        id_set = set(ids)
        missing = [sid for sid in out_ids if sid not in id_set]
        if missing:
            raise DataValidationError(f"subject id {missing[0]!r} from {outcome_file} is absent from {path}")
        extra = [sid for sid in ids if sid not in order]
        if extra:
            raise DataValidationError(f"subject id {extra[0]!r} from {path} is absent from {outcome_file}")
        pos = {sid: k for k, sid in enumerate(ids)}
        aligned = values[[pos[sid] for sid in out_ids]]
        for k in np.nonzero(np.isnan(aligned).any(axis=1))[0]:
            bad.setdefault(out_ids[k], f"missing cell in {name}")
        names.append(name)
        times.append(t)
        curves.append(aligned)
    keep = np.array([sid not in bad for sid in out_ids], dtype=bool)
    ds = FunctionalDataset(
        subject_ids=tuple(sid for sid, k in zip(out_ids, keep) if k),
        covariate_names=tuple(names),
        times=tuple(times),
        curves=tuple(X[keep] for X in curves),
        y=y[keep],
        family=fam,
        domain=(float(domain[0]), float(domain[1])),
        rejected=tuple(sorted(bad.items())),
    )
    return ds


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(dataset: FunctionalDataset, directory, prefix: str = "") -> dict:
    """Write curves and outcomes as CSV; returns the written paths.

    Numbers use the shortest round-trip representation, so reloading gives
    identical values.
    """
    os.makedirs(directory, exist_ok=True)
    paths = {}
    for name, t, X in zip(dataset.covariate_names, dataset.times, dataset.curves):
        path = os.path.join(directory, f"{prefix}{name}.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id"] + [_fmt(v) for v in t])
            for sid, row in zip(dataset.subject_ids, X):
                w.writerow([sid] + [_fmt(v) for v in row])
        paths[name] = path
    out = os.path.join(directory, f"{prefix}outcomes.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "y"])
        for sid, v in zip(dataset.subject_ids, dataset.y):
            w.writerow([sid, _fmt(v)])
    paths["outcomes"] = out
    return paths


CONFIG_KEYS = {
    "domain_end": float,
    "domain_start": float,
    "basis_order": int,
    "basis_dim": int,
    "family": str,
}


def load_config(path) -> dict:
    """Read a ``key = value`` config file (``#`` comments, no sections needed).

    Known keys are converted to their types; other keys are returned as
    strings for the caller to interpret.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        parser.read_string("[config]\n" + fh.read())
    out = {}
    for key, value in parser["config"].items():
        conv = CONFIG_KEYS.get(key)
        out[key] = conv(value) if conv else value
    return out
