"""Weighted, smoothened total variation reconstruction by lagged diffusivity.

The conductivity perturbation ``kappa`` lives on interior nodes only (it
vanishes on the boundary).  Each lagged-diffusivity step minimizes the
quadratic majorant of the TV functional at the previous iterate, so the
Tikhonov value cannot increase within a linearization stage.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bayes import GaussianDensity, NoiseModel
from .errors import DivergenceError, NumericalError, ParameterError
from .forward import ElectrodeLayout, solve_forward
from .jacobians import jacobian_sigma, jacobian_zeta
from .mesh import SimplicialMesh, boundary_distance, stiffness_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TVParams:
    gamma: float = 1e5
    smoothing: float = 1e-6
    c_upsilon: float = 300.0
    b_upsilon: float = 0.01
    inner_steps: int = 5
    linearizations: int = 5

    def __post_init__(self):
        for name in ("gamma", "smoothing", "c_upsilon", "b_upsilon"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"TV parameter {name} must be positive")
        if self.inner_steps < 1 or self.linearizations < 1:
            raise ParameterError("iteration counts must be at least one")


def upsilon_weight(mesh_or_distance, c_upsilon: float = 300.0, b_upsilon: float = 0.01) -> np.ndarray:
    """Reciprocal of the smooth cut-off ``(1 + tanh(c (dist - b))) / 2``."""
    if isinstance(mesh_or_distance, SimplicialMesh):
        dist = boundary_distance(mesh_or_distance)
    else:
        dist = np.asarray(mesh_or_distance, dtype=float)
    return 2.0 / (1.0 + np.tanh(c_upsilon * (dist - b_upsilon)))


class TVRegularizer:
    """TV functional over interior-node perturbations on a fixed mesh."""

    def __init__(self, mesh: SimplicialMesh, params: TVParams, upsilon=None):
        self.mesh = mesh
        self.params = params
        self.interior = mesh.interior_nodes
        if upsilon is None:
            upsilon = upsilon_weight(mesh, params.c_upsilon, params.b_upsilon)
        self.upsilon = np.asarray(upsilon, dtype=float)
        # exact integral of the P1 interpolant of upsilon per element
        self.element_upsilon = mesh.volumes * self.upsilon[mesh.simplices].mean(axis=1)

    @property
    def n(self) -> int:
        return self.interior.size

    def full(self, kappa) -> np.ndarray:
        out = np.zeros(self.mesh.n_nodes)
        out[self.interior] = kappa
        return out

    def gradient_norms2(self, kappa) -> np.ndarray:
        k = self.full(kappa)
        g = np.einsum("kad,ka->kd", self.mesh.gradients, k[self.mesh.simplices])
        return (g * g).sum(axis=1)

    def value(self, kappa) -> float:
        T = self.params.smoothing
        return float(self.element_upsilon @ np.sqrt(self.gradient_norms2(kappa) + T * T))

    def theta(self, kappa) -> sp.csr_matrix:
        """Lagged diffusivity matrix over interior nodes."""
        T = self.params.smoothing
        w = self.element_upsilon / np.sqrt(self.gradient_norms2(kappa) + T * T)
        K = stiffness_matrix(self.mesh, w / self.mesh.volumes)
        return K[self.interior][:, self.interior].tocsr()


def theta_matrix(kappa, regularizer: TVRegularizer) -> sp.csr_matrix:
    return regularizer.theta(kappa)


def _factor(theta):
    try:
        return spla.splu(sp.csc_matrix(theta))
    except RuntimeError as exc:
        raise NumericalError(f"factorization of the diffusivity matrix failed ({exc})") from None


def _woodbury(theta, A, gamma):
    lu = _factor(theta)
    Z = lu.solve(np.ascontiguousarray(A.T, dtype=float))
    S = A @ Z
    S = 0.5 * (S + S.T)
    S[np.diag_indices_from(S)] += gamma
    try:
        cf = sla.cho_factor(S, lower=True)
    except np.linalg.LinAlgError:
        raise NumericalError("Woodbury inner matrix is not positive definite") from None
    return lu, Z, cf


def ld_step(theta, A, b, gamma: float) -> np.ndarray:
    """Minimizer of ``|A k - b|^2 / 2 + gamma k^T theta k / 2`` via the data-sized system."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    _, Z, cf = _woodbury(theta, A, gamma)
    return Z @ sla.cho_solve(cf, np.asarray(b, dtype=float))


def ld_covariance(theta, A, gamma: float) -> np.ndarray:
    """``(A^T A + gamma theta)^{-1}`` through the Woodbury form."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    lu, Z, cf = _woodbury(theta, A, gamma)
    Tinv = lu.solve(np.eye(theta.shape[0]))
    C = (Tinv - Z @ sla.cho_solve(cf, Z.T)) / gamma
    return 0.5 * (C + C.T)


def range_projection(B_zeta) -> np.ndarray:
    """Orthogonal projection onto the complement of ``range(B_zeta)``."""
    if B_zeta is None:
        return None
    Qr, R = np.linalg.qr(B_zeta)
    d = np.abs(np.diag(R))
    if d.size and d.min() <= 1e-12 * d.max():
        raise NumericalError("contact Jacobian is rank deficient")
    P = np.eye(B_zeta.shape[0]) - Qr @ Qr.T
    return 0.5 * (P + P.T)


def xi_update(B_sigma, B_zeta, y, kappa) -> np.ndarray:
    """Least-squares contact update for fixed ``kappa``."""
    B_zeta = np.asarray(B_zeta, dtype=float)
    s = np.linalg.svd(B_zeta, compute_uv=False)
    if s[-1] <= 1e-12 * s[0]:
        raise NumericalError("contact Jacobian is rank deficient")
    r = np.asarray(y, dtype=float) - B_sigma @ kappa
    return np.linalg.lstsq(B_zeta, r, rcond=None)[0]


@dataclass
class LinearizedData:
    """Whitened linearization; ``B_zeta`` is ``None`` when contacts are known."""

    y: np.ndarray
    B_sigma: np.ndarray
    B_zeta: np.ndarray | None
    Q: np.ndarray | None = None
    A: np.ndarray = field(init=False)
    b: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.B_zeta is not None and self.Q is None:
            self.Q = range_projection(self.B_zeta)
        if self.Q is None:
            self.A, self.b = self.B_sigma, self.y
        else:
            self.A, self.b = self.Q @ self.B_sigma, self.Q @ self.y

    def xi(self, kappa) -> np.ndarray | None:
        return None if self.B_zeta is None else xi_update(self.B_sigma, self.B_zeta, self.y, kappa)


def tikhonov_value(w, y, J, noise: NoiseModel, gamma: float, kappa, regularizer: TVRegularizer) -> float:
    r = np.asarray(y) - np.asarray(J) @ np.asarray(w)
    return 0.5 * float(r @ r) / noise.variance + gamma * regularizer.value(kappa)


def reduced_value(data: LinearizedData, kappa, gamma: float, regularizer: TVRegularizer) -> float:
    """Tikhonov value with the contact update eliminated."""
    r = data.A @ kappa - data.b
    return 0.5 * float(r @ r) + gamma * regularizer.value(kappa)


@dataclass
class TVResult:
    kappa: np.ndarray
    xi: np.ndarray
    density: GaussianDensity
    trace: list
    clamped: list

    @property
    def interior(self) -> np.ndarray:
        return self.density.dofs


def sequential_reconstruct(mesh: SimplicialMesh, data, layout: ElectrodeLayout, sigma0, params: TVParams,
                           noise: NoiseModel, surface=None, contacts_known: bool = True,
                           regularizer: TVRegularizer | None = None, min_facets: float = 4.0) -> TVResult:
    """Lagged diffusivity combined with repeated linearization of the forward map.

    Inner iterations of each stage start from the current estimate.  The
    forward map is evaluated at ``sigma0 + kappa`` clamped below at
    ``1e-3 min(sigma0)``.
    """
    reg = TVRegularizer(mesh, params) if regularizer is None else regularizer
    sigma0 = np.asarray(sigma0, dtype=float)
    data = np.asarray(data, dtype=float)
    floor = 1e-3 * sigma0.min()
    zeta0 = layout.peaks.copy()
    kappa = np.zeros(reg.n)
    xi = np.zeros(layout.M)
    trace, clamped = [], []
    gamma = params.gamma
    lin = None
    theta = None
    for k in range(params.linearizations):
        sigma = sigma0 + reg.full(kappa)
        low = sigma < floor
        if low.any():
            frac = low.mean()
            log.warning("stage %d: clamping conductivity at %d nodes (%.1f%%)", k, low.sum(), 100 * frac)
            if frac > 0.2:
                raise DivergenceError(f"conductivity clamp engaged on {100 * frac:.1f}% of nodes")
            sigma = np.maximum(sigma, floor)
        clamped.append(int(low.sum()))
        zeta = np.maximum(zeta0 + xi, 1e-3 * zeta0)
        lay = replace(layout, peaks=zeta)
        sol = solve_forward(mesh, sigma, lay, surface=surface, min_facets=min_facets)
        Js = jacobian_sigma(sol, reg.interior)
        y = data - sol.measurements + Js @ kappa
        Bz = None
        if not contacts_known:
            Jz = jacobian_zeta(sol)
            y = y + Jz @ xi
            Bz = Jz / noise.std
        lin = LinearizedData(y / noise.std, Js / noise.std, Bz)
        trace.append((k, 0, reduced_value(lin, kappa, gamma, reg)))
        for j in range(params.inner_steps):
            theta = reg.theta(kappa)
            kappa = ld_step(theta, lin.A, lin.b, gamma)
            trace.append((k, j + 1, reduced_value(lin, kappa, gamma, reg)))
        if not contacts_known:
            xi = lin.xi(kappa)
    cov = ld_covariance(theta, lin.A, gamma)
    dens = GaussianDensity(kappa.copy(), cov, reg.interior, 0.0, {"source": "tv"})
    return TVResult(kappa, xi, dens, trace, clamped)


def write_nodal(path, mesh: SimplicialMesh, values, header: dict | None = None, column: str = "kappa") -> None:
    values = np.asarray(values, dtype=float)
    with open(path, "w", newline="") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_index", "x", "y", "z", column])
        for i, (x, val) in enumerate(zip(mesh.nodes, values)):
            w.writerow([i, repr(float(x[0])), repr(float(x[1])), repr(float(x[2])), repr(float(val))])


def write_trace(path, trace, header: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["linearization", "inner_step", "tikhonov_value"])
        for lin, step, val in trace:
            w.writerow([lin, step, repr(float(val))])
