"""Angular parametrization of the phantom surface.

The polar angle is measured from the top pole (+z); electrodes live on the
open upper hemisphere ``theta in (0, pi/2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class SphereSurface:
    """Sphere of given radius centered at the origin."""

    radius: float

    @classmethod
    def from_mesh(cls, mesh) -> "SphereSurface":
        r = np.linalg.norm(mesh.nodes[mesh.boundary_nodes], axis=1)
        upper = mesh.nodes[mesh.boundary_nodes, 2] > 0
        return cls(float(np.median(r[upper] if upper.any() else r)))

    def point(self, theta, phi):
        st = np.sin(theta)
        return self.radius * np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)

    def frame(self, theta, phi):
        """Return ``(point, normal, t_theta, t_phi)``; tangents are parametric derivatives."""
        theta = np.asarray(theta, dtype=float)
        phi = np.asarray(phi, dtype=float)
        check_angles(theta, phi)
        st, ct = np.sin(theta), np.cos(theta)
        sf, cf = np.sin(phi), np.cos(phi)
        normal = np.stack([st * cf, st * sf, ct], axis=-1)
        point = self.radius * normal
        t_theta = self.radius * np.stack([ct * cf, ct * sf, -st], axis=-1)
        t_phi = self.radius * np.stack([-st * sf, st * cf, np.zeros_like(st)], axis=-1)
        return point, normal, t_theta, t_phi

    def normal_derivative(self, tangent):
        """Derivative of the unit normal along a parametric tangent."""
        return tangent / self.radius

    def angles(self, x):
        """Inverse parametrization for points off the axis."""
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        theta = np.arccos(np.clip(x[..., 2] / r, -1.0, 1.0))
        phi = np.mod(np.arctan2(x[..., 1], x[..., 0]), 2 * math.pi)
        return theta, phi


def check_angles(theta, phi) -> None:
    theta = np.asarray(theta)
    phi = np.asarray(phi)
    if not np.all((theta > 0) & (theta < 0.5 * math.pi)):
        raise DomainError("polar angle must lie in the open interval (0, pi/2)")
    if not np.all(np.isfinite(phi)):
        raise DomainError("azimuthal angle must be finite")


def surface_frame(theta, phi, surface: SphereSurface):
    """Point, outward unit normal and tangent vectors at ``(theta, phi)``."""
    return surface.frame(theta, phi)


def angular_distance(a, b) -> np.ndarray:
    """Great-circle angle between direction vectors (last axis)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return np.arccos(np.clip((a * b).sum(-1), -1.0, 1.0))
