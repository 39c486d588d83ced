"""Reference annulus between the body circle and the outer wall.

The mesh is a structured polar grid: ``n_radial + 1`` rings of ``n_angular``
nodes, ring 0 on the body circle and ring ``n_radial`` on the outer circle.
Ring spacing is geometric so the thinnest layer touches the body, where the
slip condition acts.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from errors import MeshIndexError, ParameterError

logger = logging.getLogger(__name__)

DEFAULT_GRADING = 0.8
NORMAL_TOLERANCE = 1e-12


class BoundaryTag(IntEnum):
    OUTER_WALL = 1
    BODY_INTERFACE = 2

    @property
    def label(self) -> str:
        return "OuterWall" if self is BoundaryTag.OUTER_WALL else "BodyInterface"


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulated fluid annulus with tagged, oriented boundary.

    Body normals point into the body (toward ``body_center``); wall normals
    point out of the domain. ``node_normals`` is aligned with ``body_nodes``.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    edge_tags: np.ndarray
    edge_normals: np.ndarray
    edge_triangles: np.ndarray
    body_nodes: np.ndarray
    node_normals: np.ndarray
    wall_nodes: np.ndarray
    body_center: np.ndarray
    outer_center: np.ndarray
    r_body: float
    r_outer: float
    h_max: float

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    @property
    def body_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_tags == BoundaryTag.BODY_INTERFACE)

    @property
    def wall_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_tags == BoundaryTag.OUTER_WALL)

    def moved(self, nodes: np.ndarray, body_center: Sequence[float]) -> "Mesh":
        """Same topology and tags, nodes relocated (the body stays a circle)."""
        nodes = np.array(nodes, dtype=float)
        center = np.array(body_center, dtype=float)
        edge_normals, node_normals = _boundary_normals(
            nodes, self.boundary_edges, self.edge_tags, self.body_nodes,
            center, self.outer_center,
        )
        return dataclasses.replace(
            self,
            nodes=nodes,
            edge_normals=edge_normals,
            node_normals=node_normals,
            body_center=center,
            h_max=_longest_edge(nodes, self.triangles),
        )


class MeshDefect(NamedTuple):
    invariant: str
    index: int
    detail: str


@dataclass(frozen=True)
class MeshReport:
    defects: Tuple[MeshDefect, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.defects

    def __len__(self) -> int:
        return len(self.defects)

    def __iter__(self):
        return iter(self.defects)


def layer_fractions(n_radial: int, grading: float) -> np.ndarray:
    """Normalized ring positions in [0, 1]; layer k is ``grading`` times layer k+1."""
    thickness = grading ** -np.arange(n_radial, dtype=float)
    positions = np.concatenate([[0.0], np.cumsum(thickness)])
    return positions / positions[-1]


def generate_annulus_mesh(
    r_body: float,
    r_outer: float,
    n_radial: int,
    n_angular: int,
    body_center: Sequence[float] = (0.0, 0.0),
    grading: float = DEFAULT_GRADING,
    outer_center: Sequence[float] = (0.0, 0.0),
) -> Mesh:
    """Build the structured polar mesh of the fluid annulus.

    Args:
        r_body: Body radius.
        r_outer: Outer wall radius.
        n_radial: Number of radial layers (rings minus one).
        n_angular: Nodes per ring.
        body_center: Body center; the outer circle is centered at ``outer_center``.
        grading: Thickness ratio between consecutive layers, innermost thinnest.

    Returns:
        The immutable mesh.

    Raises:
        ParameterError: If radii, counts or grading are invalid.
    """
    center = np.array(body_center, dtype=float)
    origin = np.array(outer_center, dtype=float)
    if not r_body > 0.0:
        raise ParameterError("r_body", f"must be positive, got {r_body}")
    if r_body >= r_outer:
        raise ParameterError("r_body", f"r_body >= R_outer ({r_body} >= {r_outer})")
    if n_radial < 2:
        raise ParameterError("n_radial", f"must be >= 2, got {n_radial}")
    if n_angular < 8:
        raise ParameterError("n_angular", f"must be >= 8, got {n_angular}")
    if not 0.0 < grading <= 1.0:
        raise ParameterError("grading", f"must lie in (0, 1], got {grading}")
    if np.linalg.norm(center - origin) + r_body >= r_outer:
        raise ParameterError("body_center", "body circle is not strictly inside the outer circle")

    phi = 2.0 * np.pi * np.arange(n_angular) / n_angular
    ring = np.column_stack([np.cos(phi), np.sin(phi)])
    inner = center + r_body * ring
    outer = origin + r_outer * ring
    s = layer_fractions(n_radial, grading)[:, None, None]
    nodes = ((1.0 - s) * inner[None] + s * outer[None]).reshape(-1, 2)

    i, j = np.meshgrid(np.arange(n_radial), np.arange(n_angular), indexing="ij")
    i, j = i.ravel(), j.ravel()
    jn = (j + 1) % n_angular
    a = i * n_angular + j
    b = i * n_angular + jn
    c = (i + 1) * n_angular + jn
    d = (i + 1) * n_angular + j
    # diagonal choice mirrors across the vertical axis through the center
    forward = np.cos(phi[j] + np.pi / n_angular) > 0.0
    first = np.where(forward[:, None], np.column_stack([a, d, c]), np.column_stack([a, d, b]))
    second = np.where(forward[:, None], np.column_stack([a, c, b]), np.column_stack([b, d, c]))
    triangles = np.stack([first, second], axis=1).reshape(-1, 3)
    triangles = _orient(nodes, triangles)

    ring_j = np.arange(n_angular)
    ring_jn = (ring_j + 1) % n_angular
    outer_base = n_radial * n_angular
    boundary_edges = np.vstack([
        np.column_stack([ring_j, ring_jn]),
        np.column_stack([outer_base + ring_j, outer_base + ring_jn]),
    ])
    edge_tags = np.concatenate([
        np.full(n_angular, BoundaryTag.BODY_INTERFACE, dtype=int),
        np.full(n_angular, BoundaryTag.OUTER_WALL, dtype=int),
    ])
    body_nodes = ring_j.copy()
    wall_nodes = outer_base + ring_j
    edge_normals, node_normals = _boundary_normals(
        nodes, boundary_edges, edge_tags, body_nodes, center, origin
    )

    mesh = Mesh(
        nodes=nodes,
        triangles=triangles,
        boundary_edges=boundary_edges,
        edge_tags=edge_tags,
        edge_normals=edge_normals,
        edge_triangles=_edge_triangles(triangles, boundary_edges),
        body_nodes=body_nodes,
        node_normals=node_normals,
        wall_nodes=wall_nodes,
        body_center=center,
        outer_center=origin,
        r_body=float(r_body),
        r_outer=float(r_outer),
        h_max=_longest_edge(nodes, triangles),
    )
    logger.debug(
        "annulus mesh: %d nodes, %d triangles, %d boundary edges, h_max=%.4g",
        mesh.n_nodes, mesh.n_triangles, len(boundary_edges), mesh.h_max,
    )
    return mesh


def boundary_normal(mesh: Mesh, edge_index: int) -> np.ndarray:
    """Unit normal of boundary edge ``edge_index``.

    Raises:
        MeshIndexError: If the index does not name a boundary edge.
    """
    n_edges = mesh.boundary_edges.shape[0]
    if not 0 <= edge_index < n_edges:
        raise MeshIndexError(f"edge {edge_index} is not one of the {n_edges} boundary edges")
    return mesh.edge_normals[edge_index].copy()


def validate_mesh(mesh: Mesh) -> MeshReport:
    """Check every mesh invariant; failures are listed, never raised."""
    defects: List[MeshDefect] = []

    p = mesh.nodes[mesh.triangles]
    area2 = _cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    for t in np.flatnonzero(area2 <= 0.0):
        defects.append(MeshDefect("positive-area", int(t), f"signed area {0.5 * area2[t]:.3e}"))

    incident: Dict[int, List[int]] = {}
    for edge, tag in zip(mesh.boundary_edges, mesh.edge_tags):
        for node in edge:
            incident.setdefault(int(node), []).append(int(tag))
    for node, tags in sorted(incident.items()):
        if len(tags) != 2 or tags[0] != tags[1]:
            defects.append(MeshDefect("closed-boundary", node, f"incident boundary tags {tags}"))

    lengths = np.linalg.norm(mesh.edge_normals, axis=1)
    for e in np.flatnonzero(np.abs(lengths - 1.0) > NORMAL_TOLERANCE):
        defects.append(MeshDefect("unit-normal", int(e), f"|n| = {lengths[e]:.15g}"))
    node_lengths = np.linalg.norm(mesh.node_normals, axis=1)
    for k in np.flatnonzero(np.abs(node_lengths - 1.0) > NORMAL_TOLERANCE):
        node = int(mesh.body_nodes[k])
        defects.append(MeshDefect("unit-node-normal", node, f"|n| = {node_lengths[k]:.15g}"))

    mid = mesh.nodes[mesh.boundary_edges].mean(axis=1)
    toward = np.where(
        (mesh.edge_tags == BoundaryTag.BODY_INTERFACE)[:, None],
        mesh.body_center - mid,
        mid - mesh.outer_center,
    )
    facing = np.einsum("ij,ij->i", mesh.edge_normals, toward)
    for e in np.flatnonzero(facing <= 0.0):
        label = BoundaryTag(int(mesh.edge_tags[e])).label
        defects.append(MeshDefect("normal-orientation", int(e), f"{label} normal points the wrong way"))

    return MeshReport(tuple(defects))


def _cross(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _orient(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = nodes[triangles]
    flip = _cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]) < 0.0
    oriented = triangles.copy()
    oriented[flip] = triangles[flip][:, [0, 2, 1]]
    return oriented


def _longest_edge(nodes: np.ndarray, triangles: np.ndarray) -> float:
    p = nodes[triangles]
    edges = p[:, [1, 2, 0]] - p
    return float(np.linalg.norm(edges, axis=2).max())


def _edge_triangles(triangles: np.ndarray, boundary_edges: np.ndarray) -> np.ndarray:
    owner: Dict[Tuple[int, int], int] = {}
    for t, tri in enumerate(triangles):
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            owner[(min(a, b), max(a, b))] = t
    return np.array([owner[(min(a, b), max(a, b))] for a, b in boundary_edges], dtype=int)


def _boundary_normals(
    nodes: np.ndarray,
    boundary_edges: np.ndarray,
    edge_tags: np.ndarray,
    body_nodes: np.ndarray,
    body_center: np.ndarray,
    outer_center: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    p0 = nodes[boundary_edges[:, 0]]
    p1 = nodes[boundary_edges[:, 1]]
    tangent = p1 - p0
    normals = np.column_stack([tangent[:, 1], -tangent[:, 0]])
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    mid = 0.5 * (p0 + p1)
    is_body = edge_tags == BoundaryTag.BODY_INTERFACE
    toward = np.where(is_body[:, None], body_center - mid, mid - outer_center)
    normals *= np.where(np.einsum("ij,ij->i", normals, toward) < 0.0, -1.0, 1.0)[:, None]

    summed = np.zeros_like(nodes)
    body_edges = np.flatnonzero(is_body)
    for column in range(2):
        np.add.at(summed, boundary_edges[body_edges, column], normals[body_edges])
    node_normals = summed[body_nodes]
    node_normals /= np.linalg.norm(node_normals, axis=1)[:, None]
    return normals, node_normals
