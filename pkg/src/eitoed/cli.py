"""Command-line front end.

Every output file carries the hash of the resolved configuration, and
inputs produced under a different configuration are rejected.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import config as cfgmod
from .bayes import GaussianDensity, NoiseModel, noise_std, posterior, squared_exp_prior
from .errors import ConfigError, EITError, MeshParseError, NumericalError
from .forward import ElectrodeLayout, measurement_map, read_measurements, solve_forward, write_measurements
from .jacobians import jacobian_sigma
from .mesh import build_layered_ball_mesh, load_mesh, mass_matrix
from .oed import ATarget, OptimizerOptions, check_gradient, optimize_design
from .phantom import LAYOUT_PRESETS, ball_inclusion, layered_conductivity, roi_from_config
from .surface import SphereSurface
from .tv import TVParams, sequential_reconstruct, write_nodal, write_trace

log = logging.getLogger("eitoed")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


class ArtifactError(ConfigError):
    """An input artifact was produced under a different configuration."""


@dataclass
class Experiment:
    """Resolved configuration plus the derived mesh, background and layouts."""

    cfg: dict
    out: str

    @cached_property
    def hash(self) -> str:
        return cfgmod.config_hash(self.cfg)

    @cached_property
    def mesh(self):
        m = self.cfg["mesh"]
        if "path" in m:
            return load_mesh(m["path"])
        return build_layered_ball_mesh(m["outer_radius"], tuple(m["skull_shell"]), m["target_edge_length"],
                                       m.get("flat_bottom_height"))

    @cached_property
    def surface(self) -> SphereSurface:
        return SphereSurface.from_mesh(self.mesh)

    @cached_property
    def background(self) -> np.ndarray:
        return layered_conductivity(self.mesh, **self.cfg["conductivity"])

    @property
    def min_facets(self) -> float:
        return self.cfg["layout"]["min_facets"]

    def _layout_kw(self):
        lay = self.cfg["layout"]
        return {"tau": lay["tau"], "peaks": self.cfg["contact_peaks"], "feeding": lay["feeding"]}

    def preset_layout(self, name: str) -> ElectrodeLayout:
        return LAYOUT_PRESETS[name](self.cfg["layout"]["radius"], **self._layout_kw())

    @cached_property
    def initial_layout(self) -> ElectrodeLayout:
        lay = self.cfg["layout"]
        if "preset" in lay:
            return self.preset_layout(lay["preset"])
        if "file" in lay:
            return read_layout(lay["file"])
        return ElectrodeLayout(lay["theta"], lay["phi"], lay["radius"], **self._layout_kw())

    @cached_property
    def phantom(self) -> np.ndarray:
        inc = self.cfg.get("inclusion")
        if not inc:
            return self.background.copy()
        return self.background + ball_inclusion(self.mesh, inc["center"], inc["radius"], inc["amplitude"])

    @cached_property
    def roi(self) -> np.ndarray:
        return roi_from_config(self.mesh, self.cfg["roi"])

    def path(self, *parts) -> str:
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p) or ".", exist_ok=True)
        return p

    def header(self, **extra) -> dict:
        return {"config_hash": self.hash, **extra}

    @cached_property
    def noise(self) -> float:
        """Noise level, frozen in a state file on first use."""
        state = self.path(f"state-{self.hash[:16]}.json")
        if os.path.exists(state):
            with open(state) as fh:
                data = json.load(fh)
            if data.get("config_hash") != self.hash:
                raise ArtifactError(f"state file {state} belongs to another configuration")
            return float(data["eta"])
        scale = self.cfg["noise"]["scale"]
        eta = 0.0
        if scale > 0:
            ref = measurement_map(self.mesh, self.background, self.preset_layout("symmetric12"),
                                  self.surface, min_facets=self.min_facets)
            eta = noise_std(ref, scale).std
        with open(state, "w") as fh:
            json.dump({"config_hash": self.hash, "eta": eta}, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return eta

    def noise_model(self) -> NoiseModel:
        return NoiseModel(self.noise, self.cfg["noise"]["scale"])


def layout_dict(layout: ElectrodeLayout, config_hash: str) -> dict:
    return {"config_hash": config_hash, "theta": layout.theta.tolist(), "phi": layout.phi.tolist(),
            "radius": layout.radius, "tau": layout.tau, "peaks": layout.peaks.tolist(),
            "feeding": layout.feeding}


def write_layout(path, layout: ElectrodeLayout, config_hash: str) -> None:
    with open(path, "w") as fh:
        json.dump(layout_dict(layout, config_hash), fh, indent=1)
        fh.write("\n")


def read_layout(path) -> ElectrodeLayout:
    # the recorded hash is provenance only: a layout may seed any configuration
    with open(path) as fh:
        d = json.load(fh)
    try:
        return ElectrodeLayout(d["theta"], d["phi"], d["radius"], d.get("tau", 0.4), d.get("peaks", 1e3),
                               d.get("feeding", 0))
    except KeyError as exc:
        raise ConfigError(f"layout file lacks field {exc}", str(path)) from None


def _check_hash(found, exp: Experiment, path):
    if found != exp.hash:
        raise ArtifactError(f"{path} was produced under configuration {str(found)[:12]}, "
                            f"expected {exp.hash[:12]}")


# ------------------------------------------------------------------- commands

def cmd_simulate(exp: Experiment, layout: ElectrodeLayout | None = None, seed_offset: int = 0,
                 name: str = "measurements.csv") -> str:
    layout = exp.initial_layout if layout is None else layout
    seed = exp.cfg["noise"]["seed"] + seed_offset
    U = measurement_map(exp.mesh, exp.phantom, layout, exp.surface, min_facets=exp.min_facets)
    eta = exp.noise
    if eta > 0:
        U = U + eta * np.random.default_rng(seed).standard_normal(U.size)
    path = exp.path(name)
    lay = json.dumps({"theta": layout.theta.tolist(), "phi": layout.phi.tolist()}, separators=(",", ":"))
    write_measurements(path, U, layout.M, exp.header(seed=seed, eta=repr(eta), layout=lay))
    log.info("wrote %s", path)
    return path


def _measurement_layout(exp: Experiment, header: dict) -> ElectrodeLayout:
    if "layout" not in header:
        return exp.initial_layout
    d = json.loads(header["layout"])
    return exp.initial_layout.with_design(np.r_[d["theta"], d["phi"]])


def cmd_reconstruct(exp: Experiment, measurements: str, prefix: str = "") -> GaussianDensity:
    if not os.path.isfile(measurements):
        raise FileNotFoundError(f"measurement file not found: {measurements}")
    V, M, header = read_measurements(measurements)
    _check_hash(header.get("config_hash"), exp, measurements)
    layout = _measurement_layout(exp, header)
    if layout.M != M:
        raise ConfigError(f"{measurements} has {M} electrodes, layout has {layout.M}", "layout")
    noise = exp.noise_model()
    mesh = exp.mesh
    if exp.cfg["mode"] == "gaussian-roi":
        p = exp.cfg["prior"]
        prior = squared_exp_prior(mesh.nodes, p["length"], p["std"])
        base = solve_forward(mesh, exp.background, layout, surface=exp.surface, min_facets=exp.min_facets)
        dens = posterior(jacobian_sigma(base), prior, noise, V - base.measurements)
        nodal = dens.mean
    else:
        t = exp.cfg["tv"]
        params = TVParams(t["gamma"], t["smoothing"], t["c_upsilon"], t["b_upsilon"], t["inner_steps"],
                          t["linearizations"])
        res = sequential_reconstruct(mesh, V, layout, exp.background, params, noise, exp.surface,
                                     t["contacts_known"], min_facets=exp.min_facets)
        dens = res.density
        nodal = np.zeros(mesh.n_nodes)
        nodal[dens.dofs] = dens.mean
        write_trace(exp.path(prefix + "tv_trace.csv"), res.trace, exp.header())
    write_nodal(exp.path(prefix + "reconstruction.csv"), mesh, nodal, exp.header())
    dens.save(exp.path(prefix + "posterior.bin"), exp.hash)
    return dens


def _prior(exp: Experiment, prior_path: str | None) -> GaussianDensity:
    if prior_path is None:
        p = exp.cfg["prior"]
        return squared_exp_prior(exp.mesh.nodes, p["length"], p["std"])
    if not os.path.isfile(prior_path):
        raise FileNotFoundError(f"prior file not found: {prior_path}")
    dens = GaussianDensity.load(prior_path)
    _check_hash(dens.meta.get("tag"), exp, prior_path)
    return dens


def cmd_optimize(exp: Experiment, prior_path: str | None = None, layout: ElectrodeLayout | None = None,
                 skip_preflight: bool = False, prefix: str = "") -> ElectrodeLayout:
    layout = exp.initial_layout if layout is None else layout
    prior = _prior(exp, prior_path)
    W = mass_matrix(exp.mesh, exp.roi)[prior.dofs][:, prior.dofs]
    target = ATarget(exp.mesh, exp.background, prior, exp.noise_model(), layout, W, exp.surface,
                     min_facets=exp.min_facets)
    o = dict(exp.cfg["optimizer"])
    h, rtol = o.pop("gradient_step"), o.pop("gradient_rtol")
    if not skip_preflight:
        _, _, rel = check_gradient(target, layout.design, h, rtol, floor=1e-3)
        log.info("gradient preflight passed (max rel. err %.2e)", rel.max())
    trace = optimize_design(layout, target, OptimizerOptions(**o))
    final = layout.with_design(trace.final)
    trace.write(exp.path(prefix + "design_trace.csv"), exp.header())
    write_layout(exp.path(prefix + "layout.json"), final, exp.hash)
    return final


def cmd_adaptive(exp: Experiment, rounds: int, skip_preflight: bool = False) -> ElectrodeLayout:
    """Repeat simulate, reconstruct and optimize, each round starting from the last layout."""
    layout = exp.initial_layout
    for r in range(1, rounds + 1):
        pre = f"round-{r}{os.sep}"
        meas = cmd_simulate(exp, layout, seed_offset=r - 1, name=pre + "measurements.csv")
        cmd_reconstruct(exp, meas, prefix=pre)
        prior = exp.path(pre + "posterior.bin") if exp.cfg["mode"] == "tv-adaptive" else None
        layout = cmd_optimize(exp, prior, layout, skip_preflight, prefix=pre)
    return layout


# ------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eitoed", description="A-optimal electrode placement for EIT.")
    p.add_argument("command", choices=["simulate", "reconstruct", "optimize", "pipeline"])
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), help="named experiment preset")
    p.add_argument("--seed", type=int, help="noise seed (overrides the configuration)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--adaptive", type=int, default=None, metavar="N",
                   help="run N simulate/reconstruct/optimize rounds")
    p.add_argument("--skip-gradient-preflight", action="store_true")
    p.add_argument("--measurements", help="measurement CSV for reconstruct (default OUT/measurements.csv)")
    p.add_argument("--prior", help="covariance dump to use as prior in optimize")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(args) -> int:
    if args.config is None and args.preset is None:
        raise ConfigError("either --config or --preset is required", "--config")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer", "--seed")
    if args.adaptive is not None and args.adaptive < 0:
        raise ConfigError("number of rounds must be nonnegative", "--adaptive")
    user = None
    if args.config is not None:
        if not os.path.isfile(args.config):
            raise FileNotFoundError(f"configuration file not found: {args.config}")
        user = cfgmod.load_config(args.config)
    exp = Experiment(cfgmod.resolve(user, args.preset, args.seed), args.out)
    os.makedirs(exp.out, exist_ok=True)
    skip = args.skip_gradient_preflight
    if args.command == "simulate":
        cmd_simulate(exp)
    elif args.command == "reconstruct":
        cmd_reconstruct(exp, args.measurements or exp.path("measurements.csv"))
    elif args.command == "optimize":
        if args.adaptive:
            cmd_adaptive(exp, args.adaptive, skip)
        else:
            cmd_optimize(exp, args.prior, skip_preflight=skip)
    else:
        cmd_adaptive(exp, args.adaptive if args.adaptive is not None else 1, skip)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, ValueError) as exc:
        print(f"eitoed: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"eitoed: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, MeshParseError) as exc:
        print(f"eitoed: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EITError as exc:
        print(f"eitoed: error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
