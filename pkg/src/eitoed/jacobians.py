"""Derivatives of the discrete measurement map.

All Jacobians are obtained by sampling bilinear expressions in forward
solutions for pairs of basis currents and mapping the sampled functionals
back to electrode-potential coordinates.  Because the mean-free potential
vector is determined by its pairings with the ``M-1`` current patterns plus
the zero-sum condition, the back map is one fixed ``M x M`` inverse.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binio import array_hash, read_arrays, write_arrays
from .errors import BasisError, ParameterError
from .forward import ContactField, ForwardSolution, contact_blocks
from .mesh import SKIN, SimplicialMesh


def gram_inverse(currents) -> np.ndarray:
    """Inverse of the current patterns stacked over the all-ones row."""
    currents = np.atleast_2d(np.asarray(currents, dtype=float))
    P, M = currents.shape
    if P != M - 1:
        raise BasisError(f"need {M - 1} current patterns for {M} electrodes, got {P}")
    G = np.vstack([currents, np.ones(M)])
    s = np.linalg.svd(G, compute_uv=False)
    if s[-1] <= 1e-12 * s[0]:
        raise BasisError("current patterns are linearly dependent")
    return np.linalg.inv(G)


def back_map(samples: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    """``samples[i, k, j]`` = derivative of ``I_k . U_i`` -> rows ``(i, n)`` of the Jacobian."""
    P = samples.shape[0]
    out = np.einsum("nk,ikj->inj", ginv[:, :P], samples)
    return out.reshape(P * ginv.shape[0], samples.shape[2])


def element_gradients(mesh: SimplicialMesh, u) -> np.ndarray:
    """Constant gradient per element of each row of ``u``; shape ``(P, K, d)``."""
    u = np.atleast_2d(u)
    return np.einsum("kad,pka->pkd", mesh.gradients, u[:, mesh.simplices])


def sigma_samples(mesh: SimplicialMesh, u, v=None) -> np.ndarray:
    """``-int phi_j grad u_i . grad v_k dx`` for every node ``j``; shape ``(P, P', N)``.

    With ``v`` given the symmetric sum ``grad u_i.grad v_k + grad v_i.grad u_k``
    is sampled instead, which is the mixed-derivative integrand.
    """
    gu = element_gradients(mesh, u)
    vol = mesh.volumes
    if v is None:
        E = np.einsum("k,ikd,lkd->ilk", vol, gu, gu)
    else:
        gv = element_gradients(mesh, v)
        E = np.einsum("k,ikd,lkd->ilk", vol, gv, gu)
        E = E + E.transpose(1, 0, 2)
    P, L, K = E.shape
    S = -(mesh.node_average.T @ E.reshape(P * L, K).T).T
    return np.asarray(S).reshape(P, L, mesh.n_nodes)


def _select(J, columns):
    return J if columns is None else J[:, np.asarray(columns)]


def jacobian_sigma(base: ForwardSolution, columns=None) -> np.ndarray:
    """Derivative of the stacked measurements with respect to nodal conductivity."""
    S = sigma_samples(base.mesh, base.u)
    return _select(back_map(S, gram_inverse(base.currents)), columns)


def _boundary_values(mesh: SimplicialMesh, u) -> np.ndarray:
    """Values of each row of ``u`` at the facet quadrature points, ``(P, F, Q)``."""
    _, _, bary = mesh.facet_quadrature
    return np.einsum("pfa,qa->pfq", np.atleast_2d(u)[:, mesh.boundary], bary)


def jacobian_zeta(base: ForwardSolution) -> np.ndarray:
    """Derivative of the stacked measurements with respect to the contact peaks."""
    mesh = base.mesh
    points, qw, _ = mesh.facet_quadrature
    prof = base.contact.profiles(points)
    ub = _boundary_values(mesh, base.u)
    diff = base.U[:, :, None, None] - ub[:, None]          # (P, M, F, Q)
    S = -np.einsum("mfq,fq,imfq,kmfq->ikm", prof, qw, diff, diff)
    return back_map(S, gram_inverse(base.currents))


@dataclass(frozen=True)
class PerturbationField:
    """Rigid surface rotation that moves electrode ``m`` along one angle.

    The field ``h(x) = omega x x`` equals the parametric tangent at the
    electrode center and is tangential everywhere on the sphere.
    """

    m: int
    direction: str
    omega: np.ndarray
    contact: ContactField

    @classmethod
    def build(cls, contact: ContactField, m: int, direction: str) -> "PerturbationField":
        if not 0 <= m < contact.M:
            raise ParameterError(f"electrode index {m} out of range")
        t = contact.tangent(m, direction)
        c = contact.centers[m]
        omega = np.cross(c, t) / (c @ c)
        return cls(m, direction, omega, contact)

    def vector_field(self, x) -> np.ndarray:
        return np.cross(self.omega, np.asarray(x, dtype=float))

    def boundary_data(self, x) -> np.ndarray:
        """``h . Grad zeta``, i.e. minus the angular derivative of the contact."""
        return -self.contact.derivative(x, self.m, self.direction)

    def weights(self, mesh: SimplicialMesh) -> np.ndarray:
        """Per-electrode quadrature weights of the derivative of the contact block."""
        points, _, _ = mesh.facet_quadrature
        w = np.zeros((self.contact.M,) + points.shape[:2])
        w[self.m] = self.contact.derivative(points, self.m, self.direction)
        return w


def perturbation_field(base: ForwardSolution, m: int, direction: str) -> PerturbationField:
    return PerturbationField.build(base.contact, m, direction)


def shape_solution(base: ForwardSolution, pert: PerturbationField, patterns=None):
    """Derivatives ``(D_a u, D_a U)`` of the discrete solution along ``pert``.

    Reuses the forward factorization; the right-hand side is the contact
    block built from the analytic angular derivative of the contact.
    """
    X = base.state if patterns is None else base.state[:, np.atleast_1d(patterns)]
    dA = contact_blocks(base.mesh, pert.weights(base.mesh))
    dX = -base.factor.solve(dA @ X)
    return base.system.split(dX)


def jacobian_sigma_angle_derivative(base: ForwardSolution, m: int, direction: str,
                                    zero_skin: bool = False, columns=None) -> np.ndarray:
    """Derivative of :func:`jacobian_sigma` with respect to one electrode angle."""
    pert = perturbation_field(base, m, direction)
    du, _ = shape_solution(base, pert)
    S = sigma_samples(base.mesh, base.u, du)
    J = back_map(S, gram_inverse(base.currents))
    if zero_skin:
        J[:, base.mesh.region_nodes(SKIN)] = 0.0
    return _select(J, columns)


def design_derivatives(base: ForwardSolution, zero_skin: bool = False, columns=None) -> list:
    """All ``2M`` angle derivatives in design order (polar angles first)."""
    M = base.layout.M
    out = []
    for direction in ("theta", "phi"):
        for m in range(M):
            out.append(jacobian_sigma_angle_derivative(base, m, direction, zero_skin, columns))
    return out


def base_hash(base: ForwardSolution) -> str:
    L = base.layout
    return array_hash(base.sigma, L.design, L.peaks, [L.radius, L.tau], base.currents)


@dataclass
class JacobianSet:
    J_sigma: np.ndarray
    J_zeta: np.ndarray
    base_hash: str
    currents: np.ndarray

    @property
    def J(self) -> np.ndarray:
        return np.hstack([self.J_sigma, self.J_zeta])

    @classmethod
    def assemble(cls, base: ForwardSolution, columns=None) -> "JacobianSet":
        return cls(jacobian_sigma(base, columns), jacobian_zeta(base), base_hash(base), base.currents.copy())

    def save(self, path) -> None:
        write_arrays(path, "eitoed-jacobian 1",
                     {"J_sigma": self.J_sigma, "J_zeta": self.J_zeta, "currents": self.currents},
                     f"base {self.base_hash}", "order row-major float64-le")

    @classmethod
    def load(cls, path) -> "JacobianSet":
        arrays, line3, _ = read_arrays(path, "eitoed-jacobian 1")
        return cls(arrays["J_sigma"], arrays["J_zeta"], line3.split()[-1], arrays["currents"])
