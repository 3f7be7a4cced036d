"""Gaussian prior, noise model and the linearized Gaussian posterior."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist

from .binio import array_hash, read_arrays, write_arrays
from .errors import NumericalError, ParameterError

log = logging.getLogger(__name__)


@dataclass
class GaussianDensity:
    """Mean and covariance over a set of conductivity dofs.

    ``dofs`` maps coordinates to mesh node indices; ``jitter`` is the
    amount added to the covariance diagonal (already included).
    """

    mean: np.ndarray
    covariance: np.ndarray
    dofs: np.ndarray | None = None
    jitter: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        n = self.mean.size
        if self.covariance.shape != (n, n):
            raise ParameterError("covariance shape does not match the mean")
        if self.dofs is None:
            self.dofs = np.arange(n)
        self.dofs = np.asarray(self.dofs, dtype=np.int64)
        if self.dofs.shape != (n,):
            raise ParameterError("dof map length does not match the mean")

    @property
    def n(self) -> int:
        return self.mean.size

    def check(self, sym_tol: float = 1e-12, eig_tol: float = 1e-10) -> "GaussianDensity":
        C = self.covariance
        scale = np.abs(C).max() or 1.0
        if np.abs(C - C.T).max() > sym_tol * scale:
            raise NumericalError("covariance is not symmetric")
        ev = np.linalg.eigvalsh(0.5 * (C + C.T))
        if ev[0] < -eig_tol * max(ev[-1], 0.0):
            raise NumericalError(f"covariance has a negative eigenvalue {ev[0]:.3e}")
        return self

    def dof_hash(self) -> str:
        return array_hash(self.dofs)

    def save(self, path, tag: str = "") -> None:
        write_arrays(path, "eitoed-density 1",
                     {"mean": self.mean, "covariance": self.covariance, "dofs": self.dofs.astype(float)},
                     f"n {self.n} dofs {self.dof_hash()} jitter {self.jitter!r}",
                     f"tag {tag}")

    @classmethod
    def load(cls, path) -> "GaussianDensity":
        arrays, line3, line4 = read_arrays(path, "eitoed-density 1")
        parts = line3.split()
        dens = cls(arrays["mean"], arrays["covariance"], arrays["dofs"].astype(np.int64),
                   float(parts[5]), {"tag": line4.partition(" ")[2]})
        if dens.dof_hash() != parts[3]:
            raise NumericalError(f"{path}: dof map hash mismatch")
        return dens


@dataclass(frozen=True)
class NoiseModel:
    """White Gaussian noise with standard deviation ``std`` volts."""

    std: float
    scale: float | None = None

    def __post_init__(self):
        if not self.std > 0:
            raise ParameterError("noise standard deviation must be positive")

    @property
    def variance(self) -> float:
        return self.std ** 2

    def covariance(self, n: int) -> np.ndarray:
        return self.variance * np.eye(n)


def squared_exp_prior(nodes, length: float, std: float, dofs=None, jitter: float = 1e-10) -> GaussianDensity:
    """Zero-mean prior with covariance ``std^2 exp(-|x_i - x_j|^2 / (2 length^2))``.

    ``jitter * std^2`` is added to the diagonal and recorded.
    """
    if not length > 0 or not std > 0:
        raise ParameterError("correlation length and standard deviation must be positive")
    x = np.asarray(nodes, dtype=float)
    d2 = cdist(x, x, "sqeuclidean")
    C = std ** 2 * np.exp(-d2 / (2.0 * length ** 2))
    j = jitter * std ** 2
    C[np.diag_indices_from(C)] += j
    return GaussianDensity(np.zeros(len(x)), C, dofs, j, {"length": length, "std": std})


def noise_std(measurement, scale: float = 1e-3) -> NoiseModel:
    """``std = scale * (max - min)`` over the whole measurement vector."""
    y = np.asarray(measurement, dtype=float)
    spread = float(y.max() - y.min()) if y.size else 0.0
    if not spread > 0:
        raise NumericalError("measurement vector is constant; noise level would be degenerate")
    if not scale > 0:
        raise ParameterError("noise scaling must be positive")
    return NoiseModel(scale * spread, scale)


def innovation_factor(J, prior_cov, noise: NoiseModel):
    """Cholesky factor of ``J Gamma J^T + eta^2 I`` and ``X = J Gamma``."""
    X = J @ prior_cov
    S = X @ J.T
    S = 0.5 * (S + S.T)
    S[np.diag_indices_from(S)] += noise.variance
    try:
        cf = sla.cho_factor(S, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        raise NumericalError("innovation matrix is not positive definite") from None
    return cf, X


def posterior(J, prior: GaussianDensity, noise: NoiseModel, y=None) -> GaussianDensity:
    """Linear-Gaussian posterior in the measurement-sized (Woodbury) form."""
    J = np.asarray(J, dtype=float)
    if J.shape[1] != prior.n:
        raise ParameterError(f"Jacobian has {J.shape[1]} columns, prior has {prior.n} dofs")
    cf, X = innovation_factor(J, prior.covariance, noise)
    W = sla.cho_solve(cf, X)
    C = prior.covariance - X.T @ W
    C = 0.5 * (C + C.T)
    if y is None:
        mean = prior.mean.copy()
    else:
        y = np.asarray(y, dtype=float)
        if y.shape != (J.shape[0],):
            raise ParameterError("data length does not match the Jacobian")
        mean = prior.mean + X.T @ sla.cho_solve(cf, y - J @ prior.mean)
    return GaussianDensity(mean, C, prior.dofs, prior.jitter, dict(prior.meta))

