"""Layered-ball conductivity phantoms, ROI predicates and initial layouts."""
from __future__ import annotations

import math

import numpy as np

from .errors import ParameterError
from .forward import ElectrodeLayout
from .mesh import BRAIN, SKIN, SKULL, SimplicialMesh

# healthy skin, skull and brain in S/m
DEFAULT_CONDUCTIVITY = {"skin": 0.2, "skull": 0.06, "brain": 0.2}


def layered_conductivity(mesh: SimplicialMesh, skin: float = 0.2, skull: float = 0.06,
                         brain: float = 0.2) -> np.ndarray:
    """Nodal background; nodes on a layer interface take the skull value."""
    if min(skin, skull, brain) <= 0:
        raise ParameterError("layer conductivities must be positive")
    sigma = np.full(mesh.n_nodes, np.nan)
    sigma[mesh.region_nodes(BRAIN)] = brain
    sigma[mesh.region_nodes(SKIN)] = skin
    sigma[mesh.region_nodes(SKULL)] = skull
    if np.isnan(sigma).any():
        raise ParameterError("mesh has nodes outside every region")
    return sigma


def ball_inclusion(mesh: SimplicialMesh, center, radius: float, amplitude: float) -> np.ndarray:
    """Nodal indicator of a ball scaled by ``amplitude``."""
    if not radius > 0:
        raise ParameterError("inclusion radius must be positive")
    d = np.linalg.norm(mesh.nodes - np.asarray(center, dtype=float), axis=1)
    return np.where(d <= radius, float(amplitude), 0.0)


class HalfSpaceROI:
    """Intersection of half-spaces ``n . x >= offset``; callable on coordinates."""

    def __init__(self, halfspaces=()):
        self.halfspaces = [(np.asarray(n, dtype=float), float(o)) for n, o in halfspaces]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        mask = np.ones(len(x), dtype=bool)
        for n, o in self.halfspaces:
            mask &= x @ n >= o - 1e-12
        return mask


def brain_interior(mesh: SimplicialMesh) -> np.ndarray:
    """Nodes whose every adjacent simplex is brain."""
    other = np.zeros(mesh.n_nodes, dtype=bool)
    other[mesh.simplices[mesh.regions != BRAIN].ravel()] = True
    mask = np.zeros(mesh.n_nodes, dtype=bool)
    mask[mesh.region_nodes(BRAIN)] = True
    return mask & ~other


def roi_from_config(mesh: SimplicialMesh, roi: dict):
    """ROI node mask from ``{"halfspaces": [[nx,ny,nz,offset], ...], "brain_only": bool}``."""
    hs = [(h[:3], h[3]) for h in roi.get("halfspaces", [])]
    mask = HalfSpaceROI(hs)(mesh.nodes)
    if roi.get("brain_only", True):
        mask &= brain_interior(mesh)
    if not mask.any():
        raise ParameterError("region of interest selects no nodes")
    return mask


def symmetric12(radius: float, **kw) -> ElectrodeLayout:
    """Eight electrodes on a low ring and four on a high ring; symmetric under ``y -> -y``."""
    theta = np.r_[np.full(8, 1.3), np.full(4, 0.6)]
    phi = np.r_[2 * math.pi * np.arange(8) / 8, math.pi / 4 + math.pi / 2 * np.arange(4)]
    return ElectrodeLayout(theta, phi, radius, **kw)


def quadrant12(radius: float, **kw) -> ElectrodeLayout:
    """Twelve electrodes drawn towards the ``x < 0, y < 0`` upper octant.

    Angles come from a penalized packing for ``radius = 0.025`` on a
    0.09 m ball, rounded to 0.01 rad.
    """
    theta = [1.35, 1.35, 1.35, 1.23, 1.02, 1.0, 0.95, 0.91, 0.66, 0.58, 0.38, 0.33]
    phi = [3.27, 4.6, 5.89, 2.54, 1.8, 3.93, 5.24, 0.82, 3.07, 6.15, 4.51, 1.59]
    return ElectrodeLayout(theta, phi, radius, **kw)


LAYOUT_PRESETS = {"symmetric12": symmetric12, "quadrant12": quadrant12}


def mean_angular_distance(layout: ElectrodeLayout, target) -> float:
    """Mean great-circle angle between electrode centers and the direction of ``target``."""
    t = np.asarray(target, dtype=float)
    t = t / np.linalg.norm(t)
    st = np.sin(layout.theta)
    c = np.stack([st * np.cos(layout.phi), st * np.sin(layout.phi), np.cos(layout.theta)], axis=1)
    return float(np.mean(np.arccos(np.clip(c @ t, -1.0, 1.0))))
