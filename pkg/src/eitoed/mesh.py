"""Simplicial meshes of the layered ball phantom and P1 finite element helpers.

The generator maps a structured cube grid onto a ball (equiangular cubed
sphere), so skin, skull and brain are separated by exact grid shells.  Each
grid cell is split into six tetrahedra; the split is mirrored across the
coordinate planes, which keeps the mesh conforming and invariant under the
reflections ``x -> -x``, ``y -> -y`` and ``z -> -z``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import MeshParseError, MeshValidationError, ParameterError

SKIN, SKULL, BRAIN = 0, 1, 2
REGION_NAMES = {SKIN: "skin", SKULL: "skull", BRAIN: "brain"}

# Symmetric degree-5 rule on triangles, barycentric coordinates and weights
# normalized to sum to one.
_S15 = math.sqrt(15.0)
_A1, _B1 = (9 - 2 * _S15) / 21, (6 + _S15) / 21
_A2, _B2 = (9 + 2 * _S15) / 21, (6 - _S15) / 21
_W1, _W2 = (155 + _S15) / 1200, (155 - _S15) / 1200
TRIANGLE_RULE_POINTS = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
TRIANGLE_RULE_WEIGHTS = np.array([9 / 40, _W1, _W1, _W1, _W2, _W2, _W2])

# Gauss-Legendre, 3 points on a segment (for 2-D meshes).
SEGMENT_RULE_POINTS = np.array([
    [0.5 - math.sqrt(0.15), 0.5 + math.sqrt(0.15)],
    [0.5, 0.5],
    [0.5 + math.sqrt(0.15), 0.5 - math.sqrt(0.15)],
])
SEGMENT_RULE_WEIGHTS = np.array([5 / 18, 8 / 18, 5 / 18])


@dataclass(eq=False)
class SimplicialMesh:
    """Nodes (meters), simplices with region labels, and boundary facets.

    ``simplices`` has shape ``(K, d+1)``; ``boundary`` has shape ``(F, d)``
    and every facet is oriented with its normal pointing out of the domain.
    """

    nodes: np.ndarray
    simplices: np.ndarray
    regions: np.ndarray
    boundary: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float)
        self.simplices = np.ascontiguousarray(self.simplices, dtype=np.int64)
        self.regions = np.ascontiguousarray(self.regions, dtype=np.int64)
        self.boundary = np.ascontiguousarray(self.boundary, dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, SimplicialMesh):
            return NotImplemented
        return (np.array_equal(self.nodes, other.nodes)
                and np.array_equal(self.simplices, other.simplices)
                and np.array_equal(self.regions, other.regions)
                and np.array_equal(self.boundary, other.boundary))

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_simplices(self) -> int:
        return self.simplices.shape[0]

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary)

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    @cached_property
    def signed_volumes(self) -> np.ndarray:
        x = self.nodes[self.simplices]
        edges = x[:, 1:, :] - x[:, :1, :]
        return np.linalg.det(edges) / math.factorial(self.dim)

    @cached_property
    def volumes(self) -> np.ndarray:
        return np.abs(self.signed_volumes)

    @cached_property
    def gradients(self) -> np.ndarray:
        """Constant gradients of the P1 hat functions, shape ``(K, d+1, d)``."""
        x = self.nodes[self.simplices]
        edges = x[:, 1:, :] - x[:, :1, :]
        inv = np.linalg.inv(edges)  # rows of inv^T are grads of lambda_1..d
        g = np.empty((self.n_simplices, self.dim + 1, self.dim))
        g[:, 1:, :] = np.transpose(inv, (0, 2, 1))
        g[:, 0, :] = -g[:, 1:, :].sum(axis=1)
        return g

    @cached_property
    def node_average(self) -> sp.csr_matrix:
        """Sparse ``(K, N)`` matrix with ``1/(d+1)`` at each simplex vertex.

        ``E @ node_average`` turns per-simplex values into the integral of
        ``value * phi_j`` when ``E`` already carries the simplex volume.
        """
        k, n = self.simplices.shape
        rows = np.repeat(np.arange(k), n)
        return sp.csr_matrix((np.full(k * n, 1.0 / n), (rows, self.simplices.ravel())),
                             shape=(k, self.n_nodes))

    @cached_property
    def facet_areas(self) -> np.ndarray:
        x = self.nodes[self.boundary]
        if self.dim == 3:
            return 0.5 * np.linalg.norm(np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]), axis=1)
        return np.linalg.norm(x[:, 1] - x[:, 0], axis=1)

    @cached_property
    def facet_quadrature(self):
        """Quadrature on boundary facets: ``(points (F,Q,d), weights (F,Q), bary (Q,d))``."""
        if self.dim == 3:
            bary, w = TRIANGLE_RULE_POINTS, TRIANGLE_RULE_WEIGHTS
        else:
            bary, w = SEGMENT_RULE_POINTS, SEGMENT_RULE_WEIGHTS
        x = self.nodes[self.boundary]
        points = np.einsum("qa,fad->fqd", bary, x)
        weights = self.facet_areas[:, None] * w[None, :]
        return points, weights, bary

    def region_nodes(self, region: int) -> np.ndarray:
        return np.unique(self.simplices[self.regions == region])

    def validate(self) -> "SimplicialMesh":
        validate_mesh(self)
        return self


def _facet_key(faces: np.ndarray) -> np.ndarray:
    return np.sort(faces, axis=1)


def _local_faces(dim: int):
    n = dim + 1
    return [tuple(j for j in range(n) if j != i) for i in range(n)]


def exterior_faces(simplices: np.ndarray, dim: int):
    """Faces of exactly one simplex, returned with the owning simplex and opposite vertex."""
    faces, owner, opposite = [], [], []
    k = simplices.shape[0]
    for i, loc in enumerate(_local_faces(dim)):
        faces.append(simplices[:, loc])
        owner.append(np.arange(k))
        opposite.append(simplices[:, i])
    faces = np.concatenate(faces)
    owner = np.concatenate(owner)
    opposite = np.concatenate(opposite)
    keys = _facet_key(faces)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    single = counts[inv] == 1
    return faces[single], owner[single], opposite[single], counts


def _orient_outward(nodes, faces, opposite):
    faces = faces.copy()
    x = nodes[faces]
    if nodes.shape[1] == 3:
        normal = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
    else:
        t = x[:, 1] - x[:, 0]
        normal = np.stack([t[:, 1], -t[:, 0]], axis=1)
    flip = np.einsum("fd,fd->f", normal, nodes[opposite] - x[:, 0]) > 0
    faces[flip, 0], faces[flip, 1] = faces[flip, 1], faces[flip, 0].copy()
    return faces


def validate_mesh(mesh: SimplicialMesh) -> None:
    """Raise :class:`MeshValidationError` naming the first failed invariant."""
    d = mesh.dim
    if d not in (2, 3):
        raise MeshValidationError("dimension", f"nodes must be 2-D or 3-D, got {d}")
    if mesh.simplices.ndim != 2 or mesh.simplices.shape[1] != d + 1:
        raise MeshValidationError("simplex_arity", f"expected {d + 1} nodes per simplex")
    if mesh.boundary.ndim != 2 or mesh.boundary.shape[1] != d:
        raise MeshValidationError("facet_arity", f"expected {d} nodes per boundary facet")
    for name, arr in (("simplex_index_range", mesh.simplices), ("facet_index_range", mesh.boundary)):
        if arr.size and (arr.min() < 0 or arr.max() >= mesh.n_nodes):
            raise MeshValidationError(name, f"indices must lie in [0, {mesh.n_nodes})")
    if mesh.regions.shape != (mesh.n_simplices,) or not np.isin(mesh.regions, (SKIN, SKULL, BRAIN)).all():
        raise MeshValidationError("region_labels", "labels must be 0 (skin), 1 (skull) or 2 (brain)")
    vol = mesh.signed_volumes
    if not (vol > 0).all():
        bad = int(np.flatnonzero(vol <= 0)[0])
        raise MeshValidationError("positive_orientation", f"simplex {bad} has signed volume {vol[bad]:.3e}")
    faces, owner, _, counts = exterior_faces(mesh.simplices, d)
    if (counts > 2).any():
        raise MeshValidationError("manifold", "a face is shared by more than two simplices")
    expected = {tuple(f) for f in _facet_key(faces)}
    given = [tuple(f) for f in _facet_key(mesh.boundary)]
    if len(given) != len(set(given)) or set(given) != expected:
        raise MeshValidationError("boundary_tiling", "boundary facets do not match the exterior faces")
    # orientation of the given facets
    lookup = {tuple(f): i for i, f in enumerate(_facet_key(faces))}
    idx = np.array([lookup[g] for g in given], dtype=np.int64)
    simplex = mesh.simplices[owner[idx]]
    opp = np.array([np.setdiff1d(s, f)[0] for s, f in zip(simplex, mesh.boundary)])
    oriented = _orient_outward(mesh.nodes, mesh.boundary, opp)
    if not np.array_equal(oriented, mesh.boundary):
        raise MeshValidationError("facet_orientation", "boundary facets must be oriented outward")
    brain_owner = mesh.regions[owner[idx]] == BRAIN
    if brain_owner.any():
        raise MeshValidationError("brain_interior", "a brain simplex touches the boundary")
    if mesh.interior_nodes.size == 0:
        raise MeshValidationError("interior_nodes", "mesh has no interior nodes")


def build_layered_ball_mesh(outer_radius: float = 0.09,
                            skull_shell=(0.07, 0.08),
                            target_edge_length: float = 0.012,
                            flat_bottom_height: float | None = None) -> SimplicialMesh:
    """Tetrahedral three-layer ball: brain ``r < r_in``, skull, then skin.

    ``target_edge_length`` sets the angular resolution on the outer surface;
    node count scales like ``target_edge_length**-3``.  If
    ``flat_bottom_height`` is given, the lower half of the ball is squashed
    vertically so that its lowest point sits that far below the center.
    """
    r_in, r_out = (float(v) for v in skull_shell)
    R = float(outer_radius)
    h = float(target_edge_length)
    if not (0 < r_in < r_out < R):
        raise ParameterError(f"radii must satisfy 0 < r_in < r_out < outer_radius, got {r_in}, {r_out}, {R}")
    if not h > 0:
        raise ParameterError("target_edge_length must be positive")
    if flat_bottom_height is not None and not (0 < flat_bottom_height <= R):
        raise ParameterError("flat_bottom_height must lie in (0, outer_radius]")

    K = max(3, math.ceil(math.pi * R / (4 * h)))
    n_skin = max(1, round((R - r_out) / h))
    n_skull = max(1, round((r_out - r_in) / h))
    n_brain = K - n_skin - n_skull
    if n_brain < 1:
        n_brain = 1
        K = n_brain + n_skull + n_skin
    radii = np.concatenate([
        np.linspace(0.0, r_in, n_brain + 1),
        np.linspace(r_in, r_out, n_skull + 1)[1:],
        np.linspace(r_out, R, n_skin + 1)[1:],
    ])

    side = 2 * K + 1
    ijk = np.stack(np.meshgrid(*(np.arange(-K, K + 1),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    level = np.abs(ijk).max(axis=1)
    nodes = np.zeros((ijk.shape[0], 3))
    nz = level > 0
    c = ijk[nz] / level[nz, None]
    v = np.tan(0.25 * math.pi * c)
    n = v / np.linalg.norm(v, axis=1, keepdims=True)
    w = np.minimum(1.0, level[nz] / n_brain)[:, None]
    nodes[nz] = radii[level[nz], None] * ((1 - w) * c + w * n)
    if flat_bottom_height is not None:
        low = nodes[:, 2] < 0
        nodes[low, 2] *= flat_bottom_height / R

    def index(a):
        return ((a[..., 0] + K) * side + (a[..., 1] + K)) * side + (a[..., 2] + K)

    corners = np.stack(np.meshgrid(*(np.arange(-K, K),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    reflect = corners < 0
    cell_level = np.maximum(np.abs(corners), np.abs(corners + 1)).max(axis=1)
    cell_region = np.where(cell_level <= n_brain, BRAIN,
                           np.where(cell_level <= n_brain + n_skull, SKULL, SKIN))
    tets, regs = [], []
    eye = np.eye(3, dtype=np.int64)
    for perm in itertools.permutations(range(3)):
        path = np.zeros((4, 3), dtype=np.int64)
        for s in range(3):
            path[s + 1] = path[s] + eye[perm[s]]
        local = np.where(reflect[:, None, :], 1 - path[None, :, :], path[None, :, :])
        tets.append(index(corners[:, None, :] + local))
        regs.append(cell_region)
    simplices = np.concatenate(tets)
    regions = np.concatenate(regs)

    # orientation from the undistorted grid, then verify after mapping
    g = ijk[simplices].astype(float)
    vol_grid = np.linalg.det(g[:, 1:] - g[:, :1])
    neg = vol_grid < 0
    simplices[neg, 2], simplices[neg, 3] = simplices[neg, 3], simplices[neg, 2].copy()
    x = nodes[simplices]
    vol = np.linalg.det(x[:, 1:] - x[:, :1])
    if not (vol > 0).all():
        raise ParameterError("mesh mapping folded an element; use a smaller target_edge_length")

    faces, _, opposite, _ = exterior_faces(simplices, 3)
    boundary = _orient_outward(nodes, faces, opposite)
    order = np.lexsort(np.sort(boundary, axis=1).T[::-1])
    boundary = boundary[order]
    meta = dict(outer_radius=R, skull_shell=(r_in, r_out), target_edge_length=h,
                flat_bottom_height=flat_bottom_height, levels=K)
    return SimplicialMesh(nodes, simplices, regions, boundary, meta)


# --------------------------------------------------------------------------- I/O

def save_mesh(mesh: SimplicialMesh, path) -> None:
    """Write the ASCII ``eitmesh`` format; floats use round-trip ``repr``."""
    header = "eitmesh 1" if mesh.dim == 3 else "eitmesh2 1"
    lines = [header, f"nodes {mesh.n_nodes}"]
    lines += [" ".join(repr(float(c)) for c in row) for row in mesh.nodes]
    lines.append(f"simplices {mesh.n_simplices}")
    lines += [" ".join(str(int(i)) for i in s) + f" {int(r)}" for s, r in zip(mesh.simplices, mesh.regions)]
    lines.append(f"boundary {mesh.boundary.shape[0]}")
    lines += [" ".join(str(int(i)) for i in f) for f in mesh.boundary]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path, validate: bool = True) -> SimplicialMesh:
    """Parse an ``eitmesh`` file and check every mesh invariant."""
    with open(path, "r", newline="") as fh:
        raw = fh.read()
    if "\r" in raw:
        raise MeshParseError("CR characters are not allowed; use LF newlines", line=raw[:raw.index("\r")].count("\n") + 1)
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise MeshParseError("unexpected end of file", line=pos + 1)
        pos += 1
        return pos, lines[pos - 1].split()

    ln, tok = take()
    if tok == ["eitmesh", "1"]:
        dim = 3
    elif tok == ["eitmesh2", "1"]:
        dim = 2
    else:
        raise MeshParseError("expected header 'eitmesh 1' or 'eitmesh2 1'", line=ln)

    def count(keyword):
        ln, tok = take()
        if len(tok) != 2 or tok[0] != keyword:
            raise MeshParseError(f"expected '{keyword} <count>'", line=ln)
        try:
            n = int(tok[1])
        except ValueError:
            raise MeshParseError(f"invalid {keyword} count {tok[1]!r}", line=ln) from None
        if n < 0:
            raise MeshParseError(f"negative {keyword} count", line=ln)
        return n

    def rows(n, width, conv, what):
        out = []
        for _ in range(n):
            ln, tok = take()
            if len(tok) != width:
                raise MeshParseError(f"{what} line needs {width} fields, got {len(tok)}", line=ln)
            try:
                out.append([conv(t) for t in tok])
            except ValueError:
                raise MeshParseError(f"unparsable {what} entry", line=ln) from None
        return out

    n = count("nodes")
    nodes = np.array(rows(n, dim, float, "node"), dtype=float).reshape(n, dim)
    k = count("simplices")
    srows = np.array(rows(k, dim + 2, int, "simplex"), dtype=np.int64).reshape(k, dim + 2)
    f = count("boundary")
    facets = np.array(rows(f, dim, int, "boundary"), dtype=np.int64).reshape(f, dim)
    if pos != len(lines):
        raise MeshParseError("trailing content after boundary section", line=pos + 1)
    mesh = SimplicialMesh(nodes, srows[:, :-1], srows[:, -1], facets)
    if validate:
        validate_mesh(mesh)
    return mesh


# ------------------------------------------------------------- distance, matrices

def _point_triangle_distance(p, a, b, c):
    """Distances from points to triangles (broadcasting), closest-feature regions."""
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = (ab * ap).sum(-1), (ac * ap).sum(-1)
    d3, d4 = (ab * bp).sum(-1), (ac * bp).sum(-1)
    d5, d6 = (ab * cp).sum(-1), (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        closest = a + ab * (vb / denom)[..., None] + ac * (vc / denom)[..., None]
        # lowest priority first; later regions overwrite
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        closest = np.where(m[..., None], b + (c - b) * t[..., None], closest)
        t = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        closest = np.where(m[..., None], a + ac * t[..., None], closest)
        m = (d6 >= 0) & (d5 <= d6)
        closest = np.where(m[..., None], c, closest)
        t = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        closest = np.where(m[..., None], a + ab * t[..., None], closest)
        m = (d3 >= 0) & (d4 <= d3)
        closest = np.where(m[..., None], b, closest)
        m = (d1 <= 0) & (d2 <= 0)
        closest = np.where(m[..., None], a, closest)
    return np.linalg.norm(p - closest, axis=-1)


def _point_segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
    return np.linalg.norm(p - (a + ab * t[..., None]), axis=-1)


def boundary_distance(mesh: SimplicialMesh) -> np.ndarray:
    """Exact Euclidean distance from each node to the polyhedral boundary.

    Exact point-to-facet distances; a KD-tree over boundary vertices prunes
    facets that cannot be closest, so the worst case stays O(N*F).
    """
    from scipy.spatial import cKDTree

    f = mesh.nodes[mesh.boundary]
    centroid = f.mean(axis=1)
    reach = np.linalg.norm(f - centroid[:, None, :], axis=2).max(axis=1)
    tree = cKDTree(centroid)
    bound, _ = tree.query(mesh.nodes)
    out = np.zeros(mesh.n_nodes)
    slack = 2 * reach.max()
    candidates = tree.query_ball_point(mesh.nodes, bound + slack)
    for i, cand in enumerate(candidates):
        cand = np.asarray(cand, dtype=np.int64)
        p = mesh.nodes[i][None, :]
        g = f[cand]
        if mesh.dim == 3:
            d = _point_triangle_distance(p, g[:, 0], g[:, 1], g[:, 2])
        else:
            d = _point_segment_distance(p, g[:, 0], g[:, 1])
        out[i] = d.min()
    out[mesh.boundary_nodes] = 0.0
    return out


def _local_to_global(mesh, local, shape=None):
    k, n = mesh.simplices.shape
    rows = np.repeat(mesh.simplices, n, axis=1).ravel()
    cols = np.tile(mesh.simplices, (1, n)).ravel()
    shape = shape or (mesh.n_nodes, mesh.n_nodes)
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=shape).tocsr()


def mass_matrix(mesh: SimplicialMesh, roi=None) -> sp.csr_matrix:
    """P1 mass matrix with hat functions outside ``roi`` replaced by zero.

    ``roi`` may be ``None`` (all nodes), a boolean node mask, an index array,
    or a callable mapping ``(N, d)`` coordinates to a boolean mask.
    """
    mask = roi_mask(mesh, roi)
    if not mask.any():
        raise ParameterError("region of interest selects no nodes")
    d = mesh.dim
    n = d + 1
    ref = (np.ones((n, n)) + np.eye(n)) / ((d + 1) * (d + 2))
    local = mesh.volumes[:, None, None] * ref[None]
    M = _local_to_global(mesh, local)
    if not mask.all():
        D = sp.diags(mask.astype(float))
        M = (D @ M @ D).tocsr()
        M.eliminate_zeros()
    return M


def roi_mask(mesh: SimplicialMesh, roi) -> np.ndarray:
    if roi is None:
        return np.ones(mesh.n_nodes, dtype=bool)
    if callable(roi):
        mask = np.asarray(roi(mesh.nodes), dtype=bool)
    else:
        roi = np.asarray(roi)
        if roi.dtype == bool:
            mask = roi
        else:
            mask = np.zeros(mesh.n_nodes, dtype=bool)
            mask[roi.astype(np.int64)] = True
    if mask.shape != (mesh.n_nodes,):
        raise ParameterError("roi mask must have one entry per node")
    return mask


def stiffness_matrix(mesh: SimplicialMesh, element_weights) -> sp.csr_matrix:
    """``sum_T w_T |T| grad(phi_a) . grad(phi_b)`` for per-simplex weights."""
    w = np.broadcast_to(np.asarray(element_weights, dtype=float), (mesh.n_simplices,))
    g = mesh.gradients
    local = np.einsum("k,kad,kbd->kab", w * mesh.volumes, g, g)
    return _local_to_global(mesh, local)


def element_mean(mesh: SimplicialMesh, nodal) -> np.ndarray:
    """Mean over each simplex of a P1 nodal field (equals its integral average)."""
    return np.asarray(nodal, dtype=float)[mesh.simplices].mean(axis=1)
