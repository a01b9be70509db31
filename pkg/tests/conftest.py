"""Shared fixtures: small datasets that keep the unit tests fast."""

import os

import numpy as np
import pytest
from hypothesis import settings

from ghfm.basis import basis_with_dim
from ghfm.dataset import bind_basis, make_dataset

settings.register_profile("ghfm", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("ghfm")

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture
def toy_paths():
    return os.path.join(FIXTURES, "toy_X1.csv"), os.path.join(FIXTURES, "toy_outcomes.csv")


def small_dataset(n=12, family="gaussian", m=60, dim=6, seed=0, groups=2, p=1, noise=0.1, effect=None):
    """Curves on [0, 1] with ``groups`` constant coefficient functions in ``[-effect, effect]``.

    ``effect`` defaults to 2 for Gaussian outcomes and 0.3 for Bernoulli
    outcomes, which keeps the classes overlapping.
    """
    if effect is None:
        effect = 2.0 if family == "gaussian" else 0.3
    rng = np.random.default_rng(seed)
    spec = basis_with_dim(4, dim, (0.0, 1.0))
    curves = [rng.normal(3.0, 1.0, size=(n, m)) for _ in range(p)]
    ds = bind_basis(make_dataset(curves, np.zeros(n), "gaussian", domain=(0.0, 1.0)), spec)
    labels = np.arange(n) % groups
    levels = np.linspace(-effect, effect, groups) if groups > 1 else np.zeros(1)
    coefs = np.stack([np.full((p, dim), levels[k]) for k in labels])
    eta = (0.5 if family == "gaussian" else -0.2) + np.einsum("ija,ija->i", ds.gamma, coefs)
    if family == "gaussian":
        y = eta + noise * rng.standard_normal(n)
    else:
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    ds = bind_basis(make_dataset(curves, y, family, domain=(0.0, 1.0)), spec)
    return ds, labels


@pytest.fixture
def gaussian_small():
    return small_dataset()


@pytest.fixture
def bernoulli_small():
    return small_dataset(n=30, family="bernoulli", seed=1)


ACCEPTANCE_LINES = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    """Queue one PASS/FAIL line for the end-of-run acceptance summary."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
