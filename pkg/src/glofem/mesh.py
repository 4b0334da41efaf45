"""Meshes: JSON I/O, validation, structured generators and set algebra.

The mesh file format is plain JSON with four arrays::

    {"nodes": [[x, y], ...],
     "elements": [[n0, n1, n2, n3], ...],      # CCW 4-node quads
     "node_sets": {"name": [node ids]},
     "side_sets": {"name": [[n1, n2], ...]}}   # boundary edges, CCW order

Side-set edges are listed in the element's counter-clockwise orientation,
so the outward normal of edge (a, b) is (dy, -dx)/L.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MeshError

_GAUSS = 1.0 / np.sqrt(3.0)
GP_COORDS = np.array([(-_GAUSS, -_GAUSS), (_GAUSS, -_GAUSS), (_GAUSS, _GAUSS), (-_GAUSS, _GAUSS)])


def shape_gradients(xi: float, eta: float):
    """Bilinear shape functions and parent-space gradients at (xi, eta)."""
    n = 0.25 * np.array(
        [(1 - xi) * (1 - eta), (1 + xi) * (1 - eta), (1 + xi) * (1 + eta), (1 - xi) * (1 + eta)]
    )
    dn = 0.25 * np.array(
        [
            [-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)],
            [-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)],
        ]
    )
    return n, dn


@dataclass
class Mesh:
    nodes: np.ndarray                      # (n_nodes, 2) [mm]
    elements: np.ndarray                   # (n_el, 4) int
    node_sets: dict[str, np.ndarray] = field(default_factory=dict)
    side_sets: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 2)
        self.elements = np.asarray(self.elements, dtype=int).reshape(-1, 4)
        self.node_sets = {k: np.asarray(v, dtype=int).reshape(-1) for k, v in self.node_sets.items()}
        self.side_sets = {k: np.asarray(v, dtype=int).reshape(-1, 2) for k, v in self.side_sets.items()}

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def validate(self) -> None:
        """Check connectivity ranges and positive Jacobians at all Gauss points."""
        if self.n_elements == 0 or self.n_nodes == 0:
            raise MeshError("empty mesh")
        if self.elements.min() < 0 or self.elements.max() >= self.n_nodes:
            raise MeshError("element connectivity out of range")
        for name, ids in self.node_sets.items():
            if ids.size and (ids.min() < 0 or ids.max() >= self.n_nodes):
                raise MeshError(f"node set '{name}' out of range")
        for name, edges in self.side_sets.items():
            if edges.size and (edges.min() < 0 or edges.max() >= self.n_nodes):
                raise MeshError(f"side set '{name}' out of range")
        coords = self.nodes[self.elements]  # (ne, 4, 2)
        for xi, eta in GP_COORDS:
            _, dn = shape_gradients(xi, eta)
            jac = np.einsum("ak,nkc->nac", dn, coords)
            det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
            if np.any(det <= 0.0):
                bad = int(np.argmax(det <= 0.0))
                raise MeshError(f"non-positive Jacobian in element {bad}")

    def gauss_points(self) -> np.ndarray:
        """Physical coordinates of all Gauss points, shape (n_el, 4, 2)."""
        coords = self.nodes[self.elements]
        out = np.empty((self.n_elements, 4, 2))
        for g, (xi, eta) in enumerate(GP_COORDS):
            n, _ = shape_gradients(xi, eta)
            out[:, g, :] = np.einsum("k,nkc->nc", n, coords)
        return out

    def boundary_edges(self) -> np.ndarray:
        """Edges belonging to exactly one element, in CCW orientation."""
        e = self.elements
        edges = np.concatenate(
            [np.stack([e[:, i], e[:, (i + 1) % 4]], axis=1) for i in range(4)]
        )
        key = np.sort(edges, axis=1)
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        return edges[counts[inv] == 1]

    def to_dict(self) -> dict:
        return {
            "nodes": self.nodes.tolist(),
            "elements": self.elements.tolist(),
            "node_sets": {k: v.tolist() for k, v in self.node_sets.items()},
            "side_sets": {k: v.tolist() for k, v in self.side_sets.items()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Mesh":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise MeshError(f"cannot read mesh {path}: {exc}") from exc
        missing = {"nodes", "elements", "node_sets", "side_sets"} - set(data)
        if missing:
            raise MeshError(f"mesh {path} missing fields: {sorted(missing)}")
        return cls(data["nodes"], data["elements"], data["node_sets"], data["side_sets"])


def rect_grid(x0: float, y0: float, lx: float, ly: float, nx: int, ny: int) -> Mesh:
    """Structured nx-by-ny quad grid with edge sets left/right/bottom/top."""
    xs = np.linspace(x0, x0 + lx, nx + 1)
    ys = np.linspace(y0, y0 + ly, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.stack([xx.ravel(), yy.ravel()], axis=1)

    def nid(i, j):
        return i * (ny + 1) + j

    elements = []
    for i in range(nx):
        for j in range(ny):
            elements.append([nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)])
    elements = np.array(elements, dtype=int)

    node_sets = {
        "left": np.array([nid(0, j) for j in range(ny + 1)]),
        "right": np.array([nid(nx, j) for j in range(ny + 1)]),
        "bottom": np.array([nid(i, 0) for i in range(nx + 1)]),
        "top": np.array([nid(i, ny) for i in range(nx + 1)]),
        "corner_bl": np.array([nid(0, 0)]),
    }
    # CCW boundary orientation: bottom left->right, right bottom->top, etc.
    side_sets = {
        "bottom": np.array([[nid(i, 0), nid(i + 1, 0)] for i in range(nx)]),
        "right": np.array([[nid(nx, j), nid(nx, j + 1)] for j in range(ny)]),
        "top": np.array([[nid(i + 1, ny), nid(i, ny)] for i in range(nx)]),
        "left": np.array([[nid(0, j + 1), nid(0, j)] for j in range(ny)]),
    }
    return Mesh(nodes, elements, node_sets, side_sets)


def remove_elements(mesh: Mesh, keep: np.ndarray) -> Mesh:
    """Keep only the given elements; drop orphan nodes and remap all sets."""
    keep = np.asarray(keep, dtype=int)
    elements = mesh.elements[keep]
    used = np.unique(elements)
    remap = -np.ones(mesh.n_nodes, dtype=int)
    remap[used] = np.arange(used.size)
    new_nodes = mesh.nodes[used]
    new_elements = remap[elements]
    node_sets = {}
    for k, v in mesh.node_sets.items():
        kept = v[np.isin(v, used)]
        if kept.size:
            node_sets[k] = remap[kept]
    side_sets = {}
    for k, edges in mesh.side_sets.items():
        if edges.size == 0:
            continue
        ok = np.all(np.isin(edges, used), axis=1)
        if np.any(ok):
            side_sets[k] = remap[edges[ok]]
    return Mesh(new_nodes, new_elements, node_sets, side_sets)


def punch_holes(mesh: Mesh, circles: list[tuple[float, float, float]]) -> Mesh:
    """Remove elements whose centroid falls inside any circle (cx, cy, r)."""
    centers = mesh.nodes[mesh.elements].mean(axis=1)
    inside = np.zeros(mesh.n_elements, dtype=bool)
    for cx, cy, r in circles:
        inside |= np.hypot(centers[:, 0] - cx, centers[:, 1] - cy) < r
    return remove_elements(mesh, np.nonzero(~inside)[0])


def merge_meshes(a: Mesh, b: Mesh, tol: float = 1e-8) -> Mesh:
    """Conformal merge: nodes of ``b`` coincident with nodes of ``a`` are fused.

    Node/side sets of the same name are unioned.
    """
    from scipy.spatial import cKDTree

    tree = cKDTree(a.nodes)
    dist, idx = tree.query(b.nodes)
    matched = dist <= tol
    remap = np.empty(b.n_nodes, dtype=int)
    remap[matched] = idx[matched]
    n_new = int(np.count_nonzero(~matched))
    remap[~matched] = a.n_nodes + np.arange(n_new)
    nodes = np.vstack([a.nodes, b.nodes[~matched]])
    elements = np.vstack([a.elements, remap[b.elements]])

    node_sets = {k: v.copy() for k, v in a.node_sets.items()}
    for k, v in b.node_sets.items():
        mapped = remap[v]
        node_sets[k] = np.unique(np.concatenate([node_sets.get(k, np.empty(0, int)), mapped]))
    side_sets = {k: v.copy() for k, v in a.side_sets.items()}
    for k, edges in b.side_sets.items():
        mapped = remap[edges]
        if k in side_sets:
            side_sets[k] = np.vstack([side_sets[k], mapped])
        else:
            side_sets[k] = mapped
    return Mesh(nodes, elements, node_sets, side_sets)


def submesh(mesh: Mesh, element_ids: np.ndarray) -> tuple[Mesh, np.ndarray]:
    """Extract the given elements as a new mesh.

    Returns (sub, node_map) where node_map[i] is the parent node id of
    sub node i.
    """
    element_ids = np.asarray(element_ids, dtype=int)
    elements = mesh.elements[element_ids]
    used = np.unique(elements)
    remap = -np.ones(mesh.n_nodes, dtype=int)
    remap[used] = np.arange(used.size)
    node_sets = {}
    for k, v in mesh.node_sets.items():
        kept = v[np.isin(v, used)]
        if kept.size:
            node_sets[k] = remap[kept]
    side_sets = {}
    for k, edges in mesh.side_sets.items():
        if edges.size == 0:
            continue
        ok = np.all(np.isin(edges, used), axis=1)
        if np.any(ok):
            side_sets[k] = remap[edges[ok]]
    sub = Mesh(mesh.nodes[used], remap[elements], node_sets, side_sets)
    return sub, used


def order_along_polyline(coords: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Order node ids along their dominant direction (monotone interfaces)."""
    pts = coords[ids]
    c = pts - pts.mean(axis=0)
    # principal axis of the point cloud
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    t = c @ vt[0]
    return ids[np.argsort(t, kind="stable")]
