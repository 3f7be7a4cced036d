"""Acceptance suite.  Each test is tagged with the criterion it covers; the
terminal summary prints one PASS/FAIL line per criterion."""
import math
import time

import numpy as np
import pytest
import scipy.sparse as sp

from eitoed import config
from eitoed.bayes import GaussianDensity, NoiseModel, posterior, squared_exp_prior
from eitoed.cli import main, read_layout
from eitoed.forward import ElectrodeLayout, measurement_map, solve_forward
from eitoed.jacobians import jacobian_sigma, jacobian_sigma_angle_derivative, jacobian_zeta
from eitoed.mesh import mass_matrix
from eitoed.oed import ATarget, armijo_search, check_gradient
from eitoed.phantom import layered_conductivity, mean_angular_distance, roi_from_config, symmetric12
from eitoed.tv import TVParams, TVRegularizer, ld_covariance, ld_step

from conftest import DESK_RADIUS, INCLUSION, read_trace
from oracles import dense_tikhonov, information_posterior, random_spd, rel_err

crit = pytest.mark.criterion


# ------------------------------------------------------------ 1: derivatives

@pytest.fixture(scope="module")
def fd_base(desk_mesh, sphere):
    rng = np.random.default_rng(101)
    sigma = 0.15 + 0.1 * rng.random(desk_mesh.n_nodes)
    lay = symmetric12(DESK_RADIUS)
    lay = lay.with_design(lay.design + 0.04 * np.random.default_rng(7).standard_normal(24))
    return sigma, solve_forward(desk_mesh, sigma, lay, surface=sphere)


@crit(1)
def test_derivative_suite(desk_mesh, sphere, fd_base, record_property):
    t0 = time.perf_counter()
    sigma, base = fd_base
    lay = base.layout
    assert 1800 <= desk_mesh.n_nodes <= 2500
    rng = np.random.default_rng(0)

    def U(s=sigma, layout=lay):
        return measurement_map(desk_mesh, s, layout, sphere)

    J = jacobian_sigma(base)
    worst = 0.0
    for j in rng.choice(desk_mesh.n_nodes, 20, replace=False):
        h = 1e-3 * sigma[j]
        e = np.zeros(desk_mesh.n_nodes)
        e[j] = h
        worst = max(worst, rel_err(J[:, j], (U(sigma + e) - U(sigma - e)) / (2 * h)))
    record_property("J_sigma", f"{worst:.1e}")
    assert worst <= 1e-3

    # every contact column, then random directions to reach twenty checks
    Jz = jacobian_zeta(base)
    dirs = list(np.eye(lay.M)) + [rng.standard_normal(lay.M) for _ in range(20 - lay.M)]
    worst = 0.0
    for v in dirs:
        h = 1e-3 * lay.peaks.min() / np.abs(v).max()
        up = ElectrodeLayout(lay.theta, lay.phi, lay.radius, lay.tau, lay.peaks + h * v)
        dn = ElectrodeLayout(lay.theta, lay.phi, lay.radius, lay.tau, lay.peaks - h * v)
        worst = max(worst, rel_err(Jz @ v, (U(layout=up) - U(layout=dn)) / (2 * h)))
    record_property("J_zeta", f"{worst:.1e}")
    assert worst <= 1e-3

    worst = 0.0
    h = 1e-4
    for k in range(2 * lay.M):
        m, direction = (k, "theta") if k < lay.M else (k - lay.M, "phi")
        dJ = jacobian_sigma_angle_derivative(base, m, direction)
        e = np.zeros(2 * lay.M)
        e[k] = h
        Jp = jacobian_sigma(solve_forward(desk_mesh, sigma, lay.with_design(lay.design + e), surface=sphere))
        Jm = jacobian_sigma(solve_forward(desk_mesh, sigma, lay.with_design(lay.design - e), surface=sphere))
        worst = max(worst, rel_err(dJ, (Jp - Jm) / (2 * h)))
    record_property("dJ/dangle", f"{worst:.1e}")
    assert worst <= 1e-2

    exp_cfg = config.resolve(None, "gaussian-quadrant")
    prior = squared_exp_prior(desk_mesh.nodes, 0.05, 0.2)
    W = mass_matrix(desk_mesh, roi_from_config(desk_mesh, exp_cfg["roi"]))
    bg = layered_conductivity(desk_mesh)
    eta = 1e-3 * np.ptp(measurement_map(desk_mesh, bg, symmetric12(DESK_RADIUS), sphere))
    target = ATarget(desk_mesh, bg, prior, NoiseModel(eta), symmetric12(DESK_RADIUS), W, sphere)
    _, _, rel = check_gradient(target, symmetric12(DESK_RADIUS).design, 1e-4, 1e-2, floor=0.0)
    record_property("grad psi", f"{rel.max():.1e}")
    elapsed = time.perf_counter() - t0
    record_property("runtime", f"{elapsed:.0f}s")
    assert elapsed <= 300


# ------------------------------------------------------------ 2: reciprocity

@crit(2)
@pytest.mark.parametrize("seed", range(3))
def test_reciprocity_and_gauge(desk_mesh, sphere, generic_layout, seed, record_property):
    rng = np.random.default_rng(seed)
    sigma = 0.05 + 0.3 * rng.random(desk_mesh.n_nodes)
    sol = solve_forward(desk_mesh, sigma, generic_layout, surface=sphere)
    R = sol.currents @ sol.U.T
    rec = np.abs(R - R.T).max() / np.abs(R).max()
    gauge = np.abs(sol.U.sum(axis=1)).max()
    record_property(f"seed{seed}", f"recip {rec:.1e}, gauge {gauge:.1e}")
    assert rec <= 1e-10
    assert gauge <= 1e-12


# ------------------------------------------------------------ 3: posterior forms

@crit(3)
def test_posterior_equivalence(record_property):
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        C = random_spd(rng, 50, 1e2)
        C = 0.5 * (C + C.T)
        J = rng.standard_normal((20, 50))
        y = rng.standard_normal(20)
        var = 10 ** rng.uniform(-2, 0)
        post = posterior(J, GaussianDensity(np.zeros(50), C), NoiseModel(math.sqrt(var)), y)
        m, Cref = information_posterior(J, C, var, y)
        worst = max(worst, rel_err(post.covariance, Cref), rel_err(post.mean, m))
    record_property("gaussian", f"{worst:.1e}")
    assert worst <= 1e-8


@crit(3)
def test_lagged_diffusivity_equivalence(record_property):
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(2000 + trial)
        T = random_spd(rng, 50, 1e2)
        T = sp.csr_matrix(0.5 * (T + T.T))
        A = rng.standard_normal((20, 50))
        b = rng.standard_normal(20)
        gamma = 10 ** rng.uniform(-2, 2)
        k_ref, C_ref = dense_tikhonov(T.toarray(), A, b, gamma)
        worst = max(worst, rel_err(ld_step(T, A, b, gamma), k_ref), rel_err(ld_covariance(T, A, gamma), C_ref))
    record_property("lagged", f"{worst:.1e}")
    assert worst <= 1e-8


# ------------------------------------------------------------ 4: TV descent

@crit(4)
def test_lagged_diffusivity_descent(tv_run, record_property):
    assert len(tv_run.trace) == 30
    worst = -np.inf
    for k in range(5):
        v = np.array([val for s, _, val in tv_run.trace if s == k])
        worst = max(worst, (np.diff(v) / np.abs(v[:-1])).max())
    record_property("max relative step change", f"{worst:.1e}")
    assert worst <= 0


@crit(4)
def test_lagged_diffusivity_fixed_point(desk_mesh, tv_run, record_property):
    p = TVParams()
    reg = TVRegularizer(desk_mesh, p)
    k_star = tv_run.kappa
    theta = reg.theta(k_star)
    rng = np.random.default_rng(4)
    A = rng.standard_normal((132, reg.n))
    A[0] = p.gamma * (theta @ k_star)
    b = A @ k_star
    b[0] += 1.0
    err = rel_err(ld_step(theta, A, b, p.gamma), k_star)
    record_property("fixed point", f"{err:.1e}")
    assert err <= 1e-8


# ------------------------------------------------------------ 6, 5: Gaussian OED

@crit(6)
def test_quadrant_experiment(quadrant_run, desk_mesh, record_property):
    exp, final, rows, elapsed = quadrant_run
    s = np.array([float(r["psi_a_sqrt"]) for r in rows])
    reduction = 1 - s[-1] / s[0]
    c = desk_mesh.nodes[exp.roi].mean(axis=0)
    d0 = mean_angular_distance(symmetric12(DESK_RADIUS), c)
    d1 = mean_angular_distance(final, c)
    record_property("sqrt psi reduction", f"{100 * reduction:.2f}%")
    record_property("ROI distance", f"{d0:.4f} -> {d1:.4f}")
    record_property("runtime", f"{elapsed:.0f}s")
    assert reduction > 0
    assert d1 < d0
    assert elapsed <= 1800


def _accepted_monotone(rows):
    s = np.array([float(r["psi_a_sqrt"]) for r in rows])
    acc = np.array([r["accepted"] == "1" for r in rows])
    return np.all(np.diff(s)[acc[1:]] <= 0), int(acc.sum())


@crit(5)
def test_oed_monotone_and_informative(quadrant_run, desk_mesh, background, sphere, generic_layout, record_property):
    exp, final, rows, _ = quadrant_run
    ok, n_acc = _accepted_monotone(rows)
    assert ok and n_acc > 0
    prior = squared_exp_prior(desk_mesh.nodes, 0.05, 0.2)
    W = mass_matrix(desk_mesh, exp.roi)
    prior_trace = float(W.multiply(prior.covariance).sum())
    psi = np.array([float(r["psi_a"]) for r in rows])
    assert np.all(psi <= prior_trace)
    noise = exp.noise_model()
    checked = 0
    for lay in (symmetric12(DESK_RADIUS), final, generic_layout):
        J = jacobian_sigma(solve_forward(desk_mesh, background, lay, surface=sphere))
        post = posterior(J, prior, noise)
        assert float(W.multiply(post.covariance).sum()) <= prior_trace
        checked += 1
    record_property("accepted steps", n_acc)
    record_property("designs with full posterior", checked)


# ------------------------------------------------------------ 7: adaptive pipeline

@pytest.fixture(scope="module")
def adaptive_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("adaptive")
    times = []
    for name in ("a", "b"):
        t0 = time.perf_counter()
        assert main(["pipeline", "--preset", "tv-adaptive", "--seed", "0", "--out", str(out / name),
                     "--adaptive", "2"]) == 0
        times.append(time.perf_counter() - t0)
    return out, times


@crit(7)
def test_adaptive_pipeline(adaptive_runs, desk_mesh, record_property):
    out, times = adaptive_runs
    a = out / "a"
    nodal = read_trace(a / "round-1" / "reconstruction.csv")
    best = max(nodal, key=lambda r: float(r["kappa"]))
    peak = np.array([float(best[k]) for k in "xyz"])
    record_property("TV peak", np.round(peak, 4).tolist())
    c = np.asarray(INCLUSION["center"])
    assert np.all(np.sign(peak) == np.sign(c))

    start = mean_angular_distance(symmetric12(DESK_RADIUS), c)
    d1 = mean_angular_distance(read_layout(a / "round-1" / "layout.json"), c)
    d2 = mean_angular_distance(read_layout(a / "round-2" / "layout.json"), c)
    record_property("inclusion distance", f"{start:.4f} -> {d1:.4f} -> {d2:.4f}")
    record_property("runtime per pipeline", f"{times[0]:.0f}s")
    assert d1 < start
    assert d2 <= d1
    for r in ("round-1", "round-2"):
        ok, _ = _accepted_monotone(read_trace(a / r / "design_trace.csv"))
        assert ok


@crit(7)
def test_adaptive_pipeline_reproducible(adaptive_runs):
    out, _ = adaptive_runs
    files = sorted(p.relative_to(out / "a") for p in (out / "a").rglob("*") if p.is_file())
    assert len(files) == 13
    for f in files:
        assert (out / "a" / f).read_bytes() == (out / "b" / f).read_bytes(), f


# ------------------------------------------------------------ 8: Armijo

@crit(8)
def test_armijo_unit_behaviour():
    d = np.array([1.0, 0.0])

    def f(x):
        return float(x @ x)

    res = armijo_search(f, 1.0, -2.0, lambda s: d - s * d)
    assert res.accepted and res.trials == 1 and res.step == 0.5

    res = armijo_search(lambda x: math.inf, 1.0, -2.0, lambda s: d - s * d, n_trials=4)
    assert res.tried[0] == 0.5 and res.tried[1] == 5 / 12
    assert res.tried[2] == pytest.approx(25 / 72, rel=2 ** -52)
    assert res.tried[3] == pytest.approx(125 / 432, rel=2 ** -51)

    res = armijo_search(f, 1.0, -2.0, lambda s: d + s * d)
    assert not res.accepted and res.trials == 30
    assert res.step == pytest.approx(0.5 * (5 / 6) ** 30, rel=1e-13)
