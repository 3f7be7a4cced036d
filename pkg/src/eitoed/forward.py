"""Smoothened complete electrode model on a fixed P1 mesh.

Electrodes are defined only through the smooth contact conductivity, so
moving an electrode moves its contact profile analytically while the mesh
stays fixed.  Electrode potentials live in the mean-free subspace and are
parametrized by coefficients on ``e_m - e_M``, which keeps the system
symmetric positive definite.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConductivityError, FormatError, LayoutError, NumericalError, ParameterError
from .mesh import SimplicialMesh, element_mean, stiffness_matrix
from .surface import SphereSurface, check_angles

log = logging.getLogger(__name__)

# exp() below this exponent underflows to zero anyway
_EXP_FLOOR = -700.0


def current_basis(M: int, feeding: int = 0) -> np.ndarray:
    """Patterns ``e_f - e_k`` for every ``k != f``, shape ``(M-1, M)``."""
    if M < 2:
        raise ParameterError("need at least two electrodes")
    if not 0 <= feeding < M:
        raise ParameterError(f"feeding electrode {feeding} out of range")
    others = [k for k in range(M) if k != feeding]
    I = np.zeros((M - 1, M))
    I[:, feeding] = 1.0
    I[np.arange(M - 1), others] = -1.0
    return I


def mean_free_basis(M: int) -> np.ndarray:
    """Columns ``e_m - e_M``, m < M; maps coefficients to mean-free vectors."""
    V = np.zeros((M, M - 1))
    V[np.arange(M - 1), np.arange(M - 1)] = 1.0
    V[M - 1, :] = -1.0
    return V


@dataclass
class ElectrodeLayout:
    """Electrode centers as angle pairs plus common radius, shape and peaks.

    ``peaks`` are the contact conductance peak values in S/m^2.
    """

    theta: np.ndarray
    phi: np.ndarray
    radius: float
    tau: float = 0.4
    peaks: np.ndarray = 1e3
    feeding: int = 0

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float).ravel()
        self.phi = np.array(self.phi, dtype=float).ravel()
        if self.theta.shape != self.phi.shape:
            raise LayoutError("theta and phi must have the same length")
        M = self.theta.size
        if M < 2:
            raise LayoutError("need at least two electrodes")
        self.peaks = np.array(np.broadcast_to(np.asarray(self.peaks, dtype=float), (M,)))
        self.radius = float(self.radius)
        self.tau = float(self.tau)
        if not self.radius > 0:
            raise LayoutError("electrode radius must be positive")
        if not self.tau >= 0:
            raise LayoutError("shape parameter must be nonnegative")
        if not (self.peaks > 0).all():
            raise LayoutError("contact peaks must be positive")
        if not 0 <= self.feeding < M:
            raise LayoutError("feeding electrode index out of range")

    @property
    def M(self) -> int:
        return self.theta.size

    @property
    def design(self) -> np.ndarray:
        return np.concatenate([self.theta, self.phi])

    def with_design(self, d) -> "ElectrodeLayout":
        d = np.asarray(d, dtype=float)
        return replace(self, theta=d[:self.M].copy(), phi=d[self.M:].copy())

    def centers(self, surface: SphereSurface) -> np.ndarray:
        return surface.point(self.theta, self.phi)

    def separation(self, surface: SphereSurface) -> float:
        c = self.centers(surface)
        d = np.linalg.norm(c[:, None] - c[None], axis=-1)
        d[np.diag_indices(self.M)] = np.inf
        return float(d.min())

    def validate(self, surface: SphereSurface) -> "ElectrodeLayout":
        try:
            check_angles(self.theta, self.phi)
        except ParameterError as exc:
            raise LayoutError(str(exc)) from None
        if not self.separation(surface) > 2 * self.radius:
            raise LayoutError("electrode supports overlap (center distance <= 2R)")
        return self

    def is_feasible(self, surface: SphereSurface) -> bool:
        try:
            self.validate(surface)
        except LayoutError:
            return False
        return True


def profile(r2, radius: float, tau: float):
    """Contact shape ``exp(tau - tau R^2/(R^2 - r^2))`` and its derivative in ``r^2``."""
    r2 = np.asarray(r2, dtype=float)
    R2 = radius * radius
    inside = r2 < R2
    gap = np.where(inside, R2 - r2, 1.0)
    expo = np.where(inside, tau - tau * R2 / gap, _EXP_FLOOR)
    ok = inside & (expo > _EXP_FLOOR)
    val = np.where(ok, np.exp(np.maximum(expo, _EXP_FLOOR)), 0.0)
    dval = np.where(ok, -val * tau * R2 / (gap * gap), 0.0)
    return val, dval


class ContactField:
    """Contact conductivity ``zeta(x) = sum_m zeta_m * shape(r_m(x))``.

    ``r_m`` is the distance to the line through the electrode center along
    the surface normal there; only the near side of the phantom counts.
    """

    def __init__(self, layout: ElectrodeLayout, surface: SphereSurface, peaks=None):
        layout.validate(surface)
        self.layout = layout
        self.surface = surface
        self.peaks = layout.peaks if peaks is None else np.asarray(peaks, dtype=float)
        self.centers, self.normals, self.t_theta, self.t_phi = surface.frame(layout.theta, layout.phi)

    @property
    def M(self) -> int:
        return self.layout.M

    def _offsets(self, x, m):
        w = x - self.centers[m]
        a = w @ self.normals[m]
        r2 = (w * w).sum(-1) - a * a
        r2 = np.where(a > -self.surface.radius, r2, np.inf)
        return w, a, r2

    def tangent(self, m: int, direction: str) -> np.ndarray:
        if direction in ("theta", "polar"):
            return self.t_theta[m]
        if direction in ("phi", "azimuthal"):
            return self.t_phi[m]
        raise ParameterError(f"unknown direction {direction!r}")

    def profiles(self, x) -> np.ndarray:
        """Unit-peak profile of every electrode at points ``x``; shape ``(M, ...)``."""
        x = np.asarray(x, dtype=float)
        out = np.empty((self.M,) + x.shape[:-1])
        for m in range(self.M):
            _, _, r2 = self._offsets(x, m)
            out[m] = profile(r2, self.layout.radius, self.layout.tau)[0]
        return out

    def values(self, x) -> np.ndarray:
        return np.tensordot(self.peaks, self.profiles(x), axes=1)

    def profile_derivative(self, x, m: int, direction: str) -> np.ndarray:
        """Derivative of electrode ``m``'s unit profile with respect to one of its angles."""
        x = np.asarray(x, dtype=float)
        t = self.tangent(m, direction)
        dnu = self.surface.normal_derivative(t)
        w, a, r2 = self._offsets(x, m)
        # w = x - c, dw = -t; r^2 = |w|^2 - (w.nu)^2
        dr2 = -2.0 * (w @ t) - 2.0 * a * (-(t @ self.normals[m]) + w @ dnu)
        _, dval = profile(r2, self.layout.radius, self.layout.tau)
        return dval * dr2

    def derivative(self, x, m: int, direction: str) -> np.ndarray:
        return self.peaks[m] * self.profile_derivative(x, m, direction)


def contact_field(layout: ElectrodeLayout, surface: SphereSurface) -> ContactField:
    return ContactField(layout, surface)


def boundary_edge_length(mesh: SimplicialMesh) -> float:
    f = mesh.nodes[mesh.boundary]
    e = np.concatenate([np.linalg.norm(f[:, i] - f[:, (i + 1) % f.shape[1]], axis=1)
                        for i in range(f.shape[1])])
    return float(np.median(e))


def check_electrode_resolution(mesh: SimplicialMesh, layout: ElectrodeLayout, min_facets: float = 4.0):
    if min_facets <= 0:
        return
    h = boundary_edge_length(mesh)
    if 2 * layout.radius < min_facets * h:
        raise LayoutError(
            f"electrode diameter {2 * layout.radius:.4g} m spans fewer than {min_facets:g} "
            f"boundary facets (median edge {h:.4g} m)")


def contact_blocks(mesh: SimplicialMesh, weights: np.ndarray) -> sp.csr_matrix:
    """Boundary part of the system for per-electrode contact weights ``(M, F, Q)``.

    Returns the ``(N+M-1)`` square matrix of
    ``sum_m int w_m (U_m - u)(V_m - v) dS`` in (u, coefficient) coordinates.
    """
    _, qw, bary = mesh.facet_quadrature
    M = weights.shape[0]
    N = mesh.n_nodes
    V = mean_free_basis(M)
    total = weights.sum(axis=0) * qw
    local = np.einsum("fq,qa,qb->fab", total, bary, bary)
    n = mesh.boundary.shape[1]
    rows = np.repeat(mesh.boundary, n, axis=1).ravel()
    cols = np.tile(mesh.boundary, (1, n)).ravel()
    Buu = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(N, N)).tocsr()
    cm = np.einsum("mfq,fq,qa->mfa", weights, qw, bary)
    C = np.zeros((N, M))
    for m in range(M):
        C[:, m] = -np.bincount(mesh.boundary.ravel(), weights=cm[m].ravel(), minlength=N)
    D = np.einsum("mfq,fq->m", weights, qw)
    CV = sp.csr_matrix(C @ V)
    DV = V.T @ (D[:, None] * V)
    return sp.bmat([[Buu, CV], [CV.T, sp.csr_matrix(DV)]], format="csr")


class SystemFactor:
    """Sparse LU factorization reused across right-hand sides; read-only after construction."""

    def __init__(self, matrix: sp.spmatrix):
        self.matrix = matrix.tocsc()
        try:
            self._lu = spla.splu(self.matrix)
        except RuntimeError as exc:
            diag = np.abs(self.matrix.diagonal())
            ratio = diag.max() / diag.min() if diag.min() > 0 else np.inf
            raise NumericalError(f"factorization failed ({exc}); diagonal ratio {ratio:.3e}") from None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(rhs, dtype=float))


@dataclass
class CEMSystem:
    """Assembled system over ``R^N + R^(M-1)`` and its ingredients."""

    matrix: sp.csr_matrix
    n_nodes: int
    n_electrodes: int
    electrode_integrals: np.ndarray
    contact_weights: np.ndarray

    @property
    def potential_basis(self) -> np.ndarray:
        return mean_free_basis(self.n_electrodes)

    def rhs(self, currents) -> np.ndarray:
        currents = np.atleast_2d(currents)
        b = np.zeros((self.n_nodes + self.n_electrodes - 1, currents.shape[0]))
        b[self.n_nodes:] = self.potential_basis.T @ currents.T
        return b

    def pack(self, u, U) -> np.ndarray:
        u = np.atleast_2d(u)
        U = np.atleast_2d(U)
        return np.concatenate([u, U[:, :-1]], axis=1).T

    def split(self, X):
        X = np.asarray(X)
        u = X[:self.n_nodes].T
        U = (self.potential_basis @ X[self.n_nodes:]).T
        return u, U

    def quadratic_form(self, w, W, v, V) -> float:
        """Bilinear form value for mean-free ``W``, ``V``."""
        x = self.pack(w, W)[:, 0]
        y = self.pack(v, V)[:, 0]
        return float(x @ (self.matrix @ y))

    def factorize(self) -> SystemFactor:
        return SystemFactor(self.matrix)


def assemble_system(sigma, contact: ContactField, mesh: SimplicialMesh,
                    layout: ElectrodeLayout | None = None,
                    min_facets: float = 4.0) -> CEMSystem:
    """Assemble the CEM system for nodal conductivity ``sigma``.

    Raises :class:`ConductivityError` for nonpositive conductivity and
    :class:`NumericalError` if some electrode carries no contact at all
    (the form is then not coercive).
    """
    layout = contact.layout if layout is None else layout
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (mesh.n_nodes,):
        raise ConductivityError(f"conductivity must have {mesh.n_nodes} nodal values")
    if not (sigma > 0).all():
        raise ConductivityError("conductivity must be positive at every node")
    check_electrode_resolution(mesh, layout, min_facets)
    points, _, _ = mesh.facet_quadrature
    weights = contact.peaks[:, None, None] * contact.profiles(points)
    D = np.einsum("mfq,fq->m", weights, mesh.facet_quadrature[1])
    if not (D > 0).all():
        raise NumericalError("bilinear form not coercive: an electrode has zero contact")
    K = stiffness_matrix(mesh, element_mean(mesh, sigma))
    blocks = contact_blocks(mesh, weights)
    N = mesh.n_nodes
    A = blocks + sp.block_diag([K, sp.csr_matrix((layout.M - 1, layout.M - 1))], format="csr")
    A = A.tocsr()
    A.sum_duplicates()
    return CEMSystem(A, N, layout.M, D, weights)


@dataclass
class ForwardSolution:
    """Potentials for every current pattern plus everything needed to reuse the solve."""

    mesh: SimplicialMesh
    layout: ElectrodeLayout
    surface: SphereSurface
    sigma: np.ndarray
    contact: ContactField
    system: CEMSystem
    factor: SystemFactor
    currents: np.ndarray
    state: np.ndarray
    residual: float
    u: np.ndarray = field(init=False)
    U: np.ndarray = field(init=False)

    def __post_init__(self):
        self.u, self.U = self.system.split(self.state)

    @property
    def measurements(self) -> np.ndarray:
        """Stacked electrode potentials, pattern-major, length ``P*M``."""
        return self.U.ravel()


def solve_forward(mesh: SimplicialMesh, sigma, layout: ElectrodeLayout, currents=None,
                  surface: SphereSurface | None = None, min_facets: float = 4.0,
                  max_residual: float = 1e-10) -> ForwardSolution:
    """Solve the CEM for every current pattern with one factorization."""
    surface = SphereSurface.from_mesh(mesh) if surface is None else surface
    if currents is None:
        currents = current_basis(layout.M, layout.feeding)
    currents = np.atleast_2d(np.asarray(currents, dtype=float))
    if currents.shape[1] != layout.M:
        raise ParameterError("current patterns must have one entry per electrode")
    if not np.allclose(currents.sum(axis=1), 0.0, atol=1e-12 * max(1.0, np.abs(currents).max())):
        raise ParameterError("current patterns must sum to zero")
    contact = ContactField(layout, surface)
    system = assemble_system(sigma, contact, mesh, layout, min_facets=min_facets)
    factor = system.factorize()
    b = system.rhs(currents)
    X = factor.solve(b)
    res = np.linalg.norm(system.matrix @ X - b) / np.linalg.norm(b)
    if not res <= max_residual:
        raise NumericalError(f"forward solve residual {res:.3e} exceeds {max_residual:.1e}")
    return ForwardSolution(mesh, layout, surface, np.asarray(sigma, dtype=float), contact,
                           system, factor, currents, X, float(res))


def measurement_map(mesh: SimplicialMesh, sigma, layout: ElectrodeLayout,
                    surface: SphereSurface | None = None, **kw) -> np.ndarray:
    return solve_forward(mesh, sigma, layout, surface=surface, **kw).measurements


# ----------------------------------------------------------------------- CSV I/O

MEASUREMENT_COLUMNS = ("pattern_index", "electrode_index", "value_volts")


def write_measurements(path, values, n_electrodes: int, header: dict | None = None) -> None:
    values = np.asarray(values, dtype=float).ravel()
    if values.size % n_electrodes:
        raise ParameterError("measurement length is not a multiple of the electrode count")
    with open(path, "w", newline="") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEASUREMENT_COLUMNS)
        for i, val in enumerate(values):
            w.writerow([i // n_electrodes, i % n_electrodes, repr(float(val))])


def read_header(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            k, _, v = line[1:].strip().partition("=")
            out[k.strip()] = v.strip()
    return out


def read_measurements(path):
    """Return ``(values, n_electrodes, header)``."""
    header = read_header(path)
    with open(path) as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    if not rows or tuple(rows[0]) != MEASUREMENT_COLUMNS:
        raise FormatError(f"{path}: missing measurement header row")
    data = np.array([[float(x) for x in r] for r in rows[1:]])
    M = int(data[:, 1].max()) + 1
    return data[:, 2], M, header
