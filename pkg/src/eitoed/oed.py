"""A-optimal electrode placement.

The target is the weighted trace of the linearized posterior covariance,
``psi(d) = tr(W Gamma_post(d))``, minimized over electrode angles by
normalized gradient descent with an Armijo line search.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .bayes import GaussianDensity, NoiseModel, innovation_factor
from .errors import LayoutError, NumericalError, ParameterError
from .forward import ElectrodeLayout, solve_forward
from .jacobians import design_derivatives, jacobian_sigma
from .mesh import SKIN, SimplicialMesh
from .surface import SphereSurface

log = logging.getLogger(__name__)


def _as_weight(weight, n):
    if weight is None:
        return sp.identity(n, format="csr")
    if sp.issparse(weight):
        return weight.tocsr()
    return np.asarray(weight, dtype=float)


def _trace_product(W, C) -> float:
    """``tr(W C)`` for symmetric ``W``."""
    if sp.issparse(W):
        return float(W.multiply(C).sum())
    return float(np.sum(W * C))


def a_target(J, prior: GaussianDensity, noise: NoiseModel, weight=None) -> float:
    """``tr(W Gamma_post)`` without forming the posterior covariance."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    W = _as_weight(weight, prior.n)
    cf, X = innovation_factor(J, prior.covariance, noise)
    XW = np.asarray((W @ X.T).T)
    return _trace_product(W, prior.covariance) - float(np.sum(sla.cho_solve(cf, X) * XW))


def a_target_gradient(J, dJ, prior: GaussianDensity, noise: NoiseModel, weight=None):
    """Value and derivatives ``-2 <G, dJ_k>`` for each matrix in ``dJ``."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    W = _as_weight(weight, prior.n)
    cf, X = innovation_factor(J, prior.covariance, noise)
    SX = sla.cho_solve(cf, X)
    XW = np.asarray((W @ X.T).T)
    psi = _trace_product(W, prior.covariance) - float(np.sum(SX * XW))
    G = sla.cho_solve(cf, XW @ prior.covariance - (XW @ X.T) @ SX)
    grad = np.array([-2.0 * float(np.sum(G * d)) for d in dJ])
    return psi, grad


class ATarget:
    """``psi`` as a function of the design vector for a fixed background.

    Infeasible designs evaluate to ``+inf``.  The last evaluation is cached.
    """

    def __init__(self, mesh: SimplicialMesh, sigma, prior: GaussianDensity, noise: NoiseModel,
                 template: ElectrodeLayout, weight=None, surface: SphereSurface | None = None,
                 zero_skin: bool = False, min_facets: float = 4.0):
        self.mesh = mesh
        self.sigma = np.asarray(sigma, dtype=float)
        self.prior = prior
        self.noise = noise
        self.template = template
        self.weight = _as_weight(weight, prior.n)
        self.surface = SphereSurface.from_mesh(mesh) if surface is None else surface
        self.zero_skin = zero_skin
        self.min_facets = min_facets
        self.evaluations = 0
        self._cache = {}
        skin = np.isin(prior.dofs, mesh.region_nodes(SKIN))
        rows = np.abs(self.weight).sum(axis=1)
        if np.any(np.asarray(rows).ravel()[skin] > 0):
            log.warning("weight covers %d skin-region nodes; angle derivatives there are "
                        "outside their validity range", int(skin.sum()))

    @property
    def prior_trace(self) -> float:
        return _trace_product(self.weight, self.prior.covariance)

    def layout(self, design) -> ElectrodeLayout:
        return self.template.with_design(design)

    def feasible(self, design) -> bool:
        return self.layout(design).is_feasible(self.surface)

    def _solve(self, design):
        lay = self.layout(design)
        return solve_forward(self.mesh, self.sigma, lay, surface=self.surface, min_facets=self.min_facets)

    def jacobian(self, design) -> np.ndarray:
        return jacobian_sigma(self._solve(design), self.prior.dofs)

    def value(self, design) -> float:
        design = np.asarray(design, dtype=float)
        key = design.tobytes()
        if key in self._cache:
            return self._cache[key][0]
        if not self.feasible(design):
            return math.inf
        self.evaluations += 1
        psi = a_target(self.jacobian(design), self.prior, self.noise, self.weight)
        self._cache = {key: (psi, None)}
        return psi

    def value_and_gradient(self, design):
        design = np.asarray(design, dtype=float)
        key = design.tobytes()
        hit = self._cache.get(key)
        if hit is not None and hit[1] is not None:
            return hit
        if not self.feasible(design):
            raise LayoutError("gradient requested at an infeasible design")
        self.evaluations += 1
        base = self._solve(design)
        J = jacobian_sigma(base, self.prior.dofs)
        dJ = design_derivatives(base, self.zero_skin, self.prior.dofs)
        psi, grad = a_target_gradient(J, dJ, self.prior, self.noise, self.weight)
        self._cache = {key: (psi, grad)}
        return psi, grad


def finite_difference_gradient(f, design, h: float = 1e-4) -> np.ndarray:
    design = np.asarray(design, dtype=float)
    g = np.empty_like(design)
    for k in range(design.size):
        e = np.zeros_like(design)
        e[k] = h
        g[k] = (f(design + e) - f(design - e)) / (2 * h)
    return g


def check_gradient(target: ATarget, design, h: float = 1e-4, rtol: float = 1e-2, floor: float = 0.0):
    """Compare the analytic gradient with central differences componentwise.

    Each component error is measured against ``max(|fd_k|, floor * max|fd|)``;
    ``floor = 0`` is the strict componentwise test.  Returns
    ``(analytic, fd, relative_errors)`` and raises :class:`NumericalError`
    when any component misses ``rtol``.
    """
    _, g = target.value_and_gradient(design)
    fd = finite_difference_gradient(target.value, design, h)
    if not np.all(np.isfinite(fd)):
        raise NumericalError("finite-difference stencil left the feasible set")
    scale = np.maximum(np.abs(fd), floor * np.abs(fd).max())
    rel = np.abs(g - fd) / np.maximum(scale, np.finfo(float).tiny)
    if np.any(rel > rtol):
        k = int(np.argmax(rel))
        raise NumericalError(f"gradient check failed: component {k} rel. err {rel[k]:.3e} > {rtol:g}")
    return g, fd, rel


@dataclass
class ArmijoResult:
    step: float
    trials: int
    accepted: bool
    value: float
    tried: list = field(default_factory=list)


def armijo_search(f, f0: float, slope: float, trial, lam: float = 0.5, alpha: float = 0.5,
                  beta: float = 5 / 6, n_trials: int = 30) -> ArmijoResult:
    """Backtracking with the sufficient-decrease rule.

    ``trial(step)`` maps a step length to a design, ``f`` evaluates it and
    ``slope`` is the directional derivative at the current design.  If no
    trial passes, ``lam * beta**n_trials`` is returned with ``accepted``
    false.
    """
    tried = []
    step = lam
    for _ in range(n_trials):
        tried.append(step)
        v = f(trial(step))
        if v - f0 < step * alpha * slope:
            return ArmijoResult(step, len(tried), True, v, tried)
        step *= beta
    return ArmijoResult(step, len(tried), False, math.nan, tried)


@dataclass(frozen=True)
class OptimizerOptions:
    tolerance: float = 0.0
    max_iterations: int = 40
    step: float = 0.5
    armijo_trials: int = 30
    alpha: float = 0.5
    beta: float = 5 / 6
    pole_threshold: float = 0.2
    bound_margin: float = 0.02

    def __post_init__(self):
        if self.max_iterations < 0 or self.armijo_trials < 1:
            raise ParameterError("iteration counts must be nonnegative")
        if not 0 < self.alpha < 1 or not 0 < self.beta < 1 or not self.step > 0:
            raise ParameterError("line-search parameters out of range")


def design_step(design, q, step: float, pole_threshold: float = 0.2) -> np.ndarray:
    """Move ``design`` by ``step * q``.

    Electrodes with polar angle below ``pole_threshold`` move in the plane
    chart ``theta (cos phi, sin phi)``; their azimuthal component is read
    as a displacement along the azimuthal unit vector there.
    """
    d = np.asarray(design, dtype=float)
    q = np.asarray(q, dtype=float)
    M = d.size // 2
    out = d + step * q
    for m in np.flatnonzero(d[:M] < pole_threshold):
        th, ph = d[m], d[M + m]
        er = np.array([math.cos(ph), math.sin(ph)])
        ep = np.array([-math.sin(ph), math.cos(ph)])
        p = th * er + step * (q[m] * er + q[M + m] * ep)
        out[m] = math.hypot(*p)
        out[M + m] = math.atan2(p[1], p[0])
    out[M:] = np.mod(out[M:], 2 * math.pi)
    return out


def descent_direction(design, grad, bound_margin: float = 0.02) -> np.ndarray:
    """Normalized steepest descent with blocked polar components.

    A polar component is dropped when its electrode lies within
    ``bound_margin`` of the equator and descent would push it further down.
    """
    g = np.array(grad, dtype=float)
    M = g.size // 2
    blocked = (np.asarray(design)[:M] > 0.5 * math.pi - bound_margin) & (g[:M] < 0)
    g[:M][blocked] = 0.0
    n = np.linalg.norm(g)
    return -g / n if n > 0 else g


@dataclass
class DesignTrace:
    M: int
    rows: list = field(default_factory=list)

    def append(self, iteration, design, psi, grad_norm, step, trials, accepted):
        self.rows.append({"iter": iteration, "design": np.array(design, dtype=float), "psi_a": psi,
                          "grad_norm": grad_norm, "lambda_bar": step, "armijo_trials": trials,
                          "accepted": accepted})

    @property
    def designs(self) -> np.ndarray:
        return np.array([r["design"] for r in self.rows])

    @property
    def psi(self) -> np.ndarray:
        return np.array([r["psi_a"] for r in self.rows])

    @property
    def psi_sqrt(self) -> np.ndarray:
        return np.sqrt(self.psi)

    @property
    def final(self) -> np.ndarray:
        return self.rows[-1]["design"]

    def write(self, path, header: dict | None = None) -> None:
        M = self.M
        cols = (["iter"] + [f"theta_{m + 1}" for m in range(M)] + [f"phi_{m + 1}" for m in range(M)]
                + ["psi_a", "psi_a_sqrt", "grad_norm", "lambda_bar", "armijo_trials", "accepted"])
        with open(path, "w", newline="") as fh:
            for k, v in (header or {}).items():
                fh.write(f"# {k}={v}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["iter"]] + [repr(float(x)) for x in r["design"]]
                           + [repr(float(r["psi_a"])), repr(math.sqrt(r["psi_a"])),
                              repr(float(r["grad_norm"])), repr(float(r["lambda_bar"])),
                              r["armijo_trials"], int(r["accepted"])])


def optimize_design(initial: ElectrodeLayout, target, options: OptimizerOptions | None = None) -> DesignTrace:
    """Normalized gradient descent with Armijo backtracking.

    ``target`` needs ``value(d)``, ``value_and_gradient(d)`` and
    ``feasible(d)``.  Row 0 of the trace is the initial design.
    """
    opt = OptimizerOptions() if options is None else options
    d = initial.design
    psi, g = target.value_and_gradient(d)
    trace = DesignTrace(initial.M)
    trace.append(0, d, psi, float(np.linalg.norm(g)), 0.0, 0, False)
    i = 0
    while i < opt.max_iterations:
        gn = float(np.linalg.norm(g))
        if gn < opt.tolerance:
            break
        i += 1
        if gn == 0.0:
            trace.append(i, d, psi, gn, 0.0, 0, False)
            continue
        q = descent_direction(d, g, opt.bound_margin)

        def trial(step, d=d, q=q):
            return design_step(d, q, step, opt.pole_threshold)

        res = armijo_search(target.value, psi, float(g @ q), trial, opt.step, opt.alpha, opt.beta,
                            opt.armijo_trials)
        candidate = trial(res.step)
        if res.accepted or target.feasible(candidate):
            d = candidate
            psi, g = target.value_and_gradient(d)
        else:
            log.info("iteration %d: no feasible step, design unchanged", i)
        trace.append(i, d, psi, float(np.linalg.norm(g)), res.step, res.trials, res.accepted)
        log.info("iteration %d: psi=%.6e sqrt=%.6e step=%.4g trials=%d", i, psi, math.sqrt(psi),
                 res.step, res.trials)
    return trace
