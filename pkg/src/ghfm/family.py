"""Exponential-family pieces used by every loss: Gaussian and Bernoulli-logit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

MU_CLAMP = 1e-10
WEIGHT_FLOOR = 1e-10


@dataclass(frozen=True)
class Family:
    """Response distribution with its canonical link.

    ``kind`` is ``"gaussian"`` (identity link, estimated dispersion) or
    ``"bernoulli"`` (logit link, dispersion fixed at one).
    """

    kind: str

    def __post_init__(self):
        if self.kind not in ("gaussian", "bernoulli"):
            raise ValueError(f"unknown family {self.kind!r}")

    @property
    def is_gaussian(self) -> bool:
        return self.kind == "gaussian"

    @property
    def loss_scale(self) -> float:
        """Multiplier turning half squared working residuals into the data loss.

        The Gaussian data term is ``RSS / n`` rather than a scaled
        log-likelihood, so its quadratic form carries a factor two relative
        to the Bernoulli second-order expansion.
        """
        return 1.0 if self.is_gaussian else 0.5

    def mean(self, eta) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        if self.is_gaussian:
            return eta
        return np.clip(expit(eta), MU_CLAMP, 1.0 - MU_CLAMP)

    def link(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if self.is_gaussian:
            return mu
        mu = np.clip(mu, MU_CLAMP, 1.0 - MU_CLAMP)
        return np.log(mu / (1.0 - mu))

    def validate(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise ValueError("outcomes must be finite")
        if not self.is_gaussian and not np.all((y == 0) | (y == 1)):
            raise ValueError("Bernoulli outcomes must be 0 or 1")
        return y

    def data_loss(self, y, eta) -> np.ndarray:
        """Per-subject data loss entering the penalized objective.

        Gaussian: squared residual. Bernoulli: negative log-likelihood.
        """
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if self.is_gaussian:
            return (y - eta) ** 2
        return np.logaddexp(0.0, eta) - y * eta

    def data_loss_grad(self, y, eta) -> np.ndarray:
        """Derivative of :meth:`data_loss` with respect to ``eta``."""
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if self.is_gaussian:
            return -2.0 * (y - eta)
        return expit(eta) - y


GAUSSIAN = Family("gaussian")
BERNOULLI = Family("bernoulli")


def get_family(family) -> Family:
    if isinstance(family, Family):
        return family
    return Family(str(family).lower())


def loglik(family, y, eta, dispersion: float = 1.0) -> float:
    """Exact log-likelihood of outcomes ``y`` at linear predictor ``eta``.

    For the Gaussian family ``dispersion`` is the variance and the
    normalizing ``-(n/2) log(2 pi sigma^2)`` term is included.
    """
    fam = get_family(family)
    y = fam.validate(y)
    eta = np.asarray(eta, dtype=float)
    if fam.is_gaussian:
        if not dispersion > 0:
            raise ValueError("Gaussian dispersion must be positive")
        n = y.size
        return float(-0.5 * np.sum((y - eta) ** 2) / dispersion - 0.5 * n * np.log(2 * np.pi * dispersion))
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def profile_loglik(family, y, eta) -> float:
    """Log-likelihood with the Gaussian variance at its MLE ``RSS / n``."""
    fam = get_family(family)
    if not fam.is_gaussian:
        return loglik(fam, y, eta)
    y = np.asarray(y, dtype=float)
    n = y.size
    rss = float(np.sum((y - np.asarray(eta)) ** 2))
    sigma2 = max(rss / n, np.finfo(float).tiny)
    return -0.5 * n * (np.log(2 * np.pi * sigma2) + 1.0)


def deviance(family, y, mu) -> float:
    """GLM deviance, scaled so that the Gaussian deviance is the RSS."""
    fam = get_family(family)
    y = fam.validate(y)
    mu = np.asarray(mu, dtype=float)
    if fam.is_gaussian:
        return float(np.sum((y - mu) ** 2))
    mu = np.clip(mu, MU_CLAMP, 1.0 - MU_CLAMP)
    # The saturated Bernoulli log-likelihood is zero.
    return float(-2.0 * np.sum(y * np.log(mu) + (1.0 - y) * np.log1p(-mu)))


def irls_step_quantities(family, y, eta) -> tuple[np.ndarray, np.ndarray]:
    """Working response and weights for one IRLS step at ``eta``."""
    fam = get_family(family)
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if fam.is_gaussian:
        return y.copy(), np.ones_like(y)
    mu = fam.mean(eta)
    w = np.maximum(mu * (1.0 - mu), WEIGHT_FLOOR)
    z = eta + (y - mu) / w
    return z, w
