"""Bounding-volume hierarchy over one mesh's triangles.

The tree is built once in numpy (median split on the longest centroid axis,
depth-first node layout) and exported as flat arrays that both kernel
backends consume:

* internal node: ``count == 0``, left child at ``node + 1``, right child in
  ``right``;
* leaf: ``count > 0`` triangles stored contiguously from ``left`` in the
  reordered triangle arrays;
* ``skip``: next node in depth-first order after this subtree (-1 past the
  root), which lets the numpy backend traverse without per-ray stacks.

Queries are read-only; an index can be shared freely across threads.
"""

from dataclasses import dataclass

import numpy as np

from .backend import get_kernels
from .camera import Ray
from .mesh import TriangleMesh

LEAF_SIZE = 4


@dataclass(frozen=True)
class Hit:
    t: float
    point: np.ndarray
    normal: np.ndarray
    face: int
    bary: tuple


class AccelIndex:
    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        v = mesh.vertices
        f = mesh.faces.astype(np.int64)
        a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        order, arrays = _build_fast(a, b, c)
        (self.nodes_min, self.nodes_max, self.left, self.right, self.count, self.skip) = arrays
        self.tri_face = order.astype(np.int32)
        self.tv0 = np.ascontiguousarray(a[order])
        self.te1 = np.ascontiguousarray(b[order] - a[order])
        self.te2 = np.ascontiguousarray(c[order] - a[order])
        n = mesh.normals
        self.tn0 = np.ascontiguousarray(n[f[order, 0]])
        self.tn1 = np.ascontiguousarray(n[f[order, 1]])
        self.tn2 = np.ascontiguousarray(n[f[order, 2]])
        self.diagonal = mesh.diagonal()
        self.t_eps = 1e-4 * self.diagonal

    # -- queries ------------------------------------------------------------

    def intersect_batch(self, origins, dirs, t_min=0.0):
        """Nearest hits for a batch of rays.

        Returns dict with t, face (original ids, -1 on miss), point, normal
        (barycentric-interpolated, renormalized, arbitrary values on miss),
        and valid mask.
        """
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        t_min_arr = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (len(origins),))
        k = get_kernels()
        t, idx, u, v = k.bvh_intersect(
            self.nodes_min, self.nodes_max, self.left, self.right, self.count, self.skip,
            self.tv0, self.te1, self.te2, origins, dirs, np.ascontiguousarray(t_min_arr),
        )
        valid = idx >= 0
        safe = np.where(valid, idx, 0)
        w = 1.0 - u - v
        normal = w[:, None] * self.tn0[safe] + u[:, None] * self.tn1[safe] + v[:, None] * self.tn2[safe]
        lens = np.linalg.norm(normal, axis=1, keepdims=True)
        normal = normal / np.where(lens > 0, lens, 1.0)
        point = origins + t[:, None] * dirs
        face = np.where(valid, self.tri_face[safe], -1)
        return {"t": t, "face": face, "u": u, "v": v, "point": point, "normal": normal, "valid": valid}

    def intersect(self, ray: Ray, t_min=0.0):
        r = self.intersect_batch(ray.origin[None, :], ray.direction[None, :], t_min)
        if not r["valid"][0]:
            return None
        return Hit(
            t=float(r["t"][0]),
            point=r["point"][0],
            normal=r["normal"][0],
            face=int(r["face"][0]),
            bary=(float(r["u"][0]), float(r["v"][0])),
        )

    def closest_point_batch(self, points):
        """Closest surface point, squared distance, and interpolated normal for each query."""
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        k = get_kernels()
        d2, idx, u, v = k.bvh_closest(
            self.nodes_min, self.nodes_max, self.left, self.right, self.count, self.skip,
            self.tv0, self.te1, self.te2, points,
        )
        w = 1.0 - u - v
        cp = w[:, None] * self.tv0[idx] + u[:, None] * (self.tv0[idx] + self.te1[idx]) + v[:, None] * (
            self.tv0[idx] + self.te2[idx]
        )
        normal = w[:, None] * self.tn0[idx] + u[:, None] * self.tn1[idx] + v[:, None] * self.tn2[idx]
        lens = np.linalg.norm(normal, axis=1, keepdims=True)
        normal = normal / np.where(lens > 0, lens, 1.0)
        return {
            "distance": np.sqrt(np.maximum(d2, 0.0)),
            "face": self.tri_face[idx],
            "point": cp,
            "normal": normal,
        }

    def occluded_segments(self, origins, targets, eps=None):
        """True where the open segment origin -> target hits the mesh."""
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
        delta = targets - origins
        dist = np.linalg.norm(delta, axis=1)
        dirs = delta / np.where(dist[:, None] > 0, dist[:, None], 1.0)
        eps = self.t_eps if eps is None else eps
        r = self.intersect_batch(origins, dirs, t_min=eps)
        return r["valid"] & (r["t"] < dist - eps)


def _build_fast(a, b, c):
    """Jit-compiled builder when numba is importable, else the numpy one."""
    if len(a) == 0:
        return _build(a, b, c)
    try:
        from .kernels.numba_backend import build_tree
    except ImportError:  # pragma: no cover
        return _build(a, b, c)
    lo_tri = np.minimum(np.minimum(a, b), c)
    hi_tri = np.maximum(np.maximum(a, b), c)
    centroids = (a + b + c) / 3.0
    nodes_min, nodes_max, left, right, count, skip, order = build_tree(
        np.ascontiguousarray(lo_tri), np.ascontiguousarray(hi_tri),
        np.ascontiguousarray(centroids), LEAF_SIZE,
    )
    return order, (nodes_min, nodes_max, left, right, count, skip)


def _build(a, b, c):
    n = len(a)
    if n == 0:
        arrays = (
            np.full((1, 3), np.inf),
            np.full((1, 3), -np.inf),
            np.zeros(1, dtype=np.int32),
            np.full(1, -1, dtype=np.int32),
            np.zeros(1, dtype=np.int32),
            np.full(1, -1, dtype=np.int32),
        )
        return np.arange(0, dtype=np.int64), arrays
    lo_tri = np.minimum(np.minimum(a, b), c)
    hi_tri = np.maximum(np.maximum(a, b), c)
    centroids = (a + b + c) / 3.0

    max_nodes = max(2 * n, 1)
    nodes_min = np.empty((max_nodes, 3))
    nodes_max = np.empty((max_nodes, 3))
    left = np.full(max_nodes, -1, dtype=np.int32)
    right = np.full(max_nodes, -1, dtype=np.int32)
    count = np.zeros(max_nodes, dtype=np.int32)

    order = np.arange(n, dtype=np.int64)
    n_nodes = 0
    parent_of = {}
    # iterative DFS so node ids come out in depth-first order
    pending = [(0, n)]
    spans = []
    while pending:
        lo, hi = pending.pop()
        node = n_nodes
        n_nodes += 1
        spans.append((node, lo, hi))
        seg = order[lo:hi]
        nodes_min[node] = lo_tri[seg].min(axis=0)
        nodes_max[node] = hi_tri[seg].max(axis=0)
        if hi - lo <= LEAF_SIZE:
            left[node] = lo
            count[node] = hi - lo
            continue
        cen = centroids[seg]
        extent = cen.max(axis=0) - cen.min(axis=0)
        axis = int(np.argmax(extent))
        if extent[axis] <= 0:
            left[node] = lo
            count[node] = hi - lo
            continue
        perm = np.argsort(cen[:, axis], kind="stable")
        order[lo:hi] = seg[perm]
        mid = (lo + hi) // 2
        # right pushed first so the left subtree is laid out immediately after
        pending.append((mid, hi))
        pending.append((lo, mid))
        parent_of[node] = (lo, mid, hi)

    # second pass: connect children by replaying the same DFS
    owner = {}
    for node, lo, hi in spans:
        owner[(lo, hi)] = node
    for node, (lo, mid, hi) in parent_of.items():
        left[node] = owner[(lo, mid)]
        right[node] = owner[(mid, hi)]

    skip = np.full(max_nodes, -1, dtype=np.int32)
    _assign_skip(0, -1, left, right, count, skip)

    arrays = (
        np.ascontiguousarray(nodes_min[:n_nodes]),
        np.ascontiguousarray(nodes_max[:n_nodes]),
        np.ascontiguousarray(left[:n_nodes]),
        np.ascontiguousarray(right[:n_nodes]),
        np.ascontiguousarray(count[:n_nodes]),
        np.ascontiguousarray(skip[:n_nodes]),
    )
    return order, arrays


def _assign_skip(root, after, left, right, count, skip):
    stack = [(root, after)]
    while stack:
        node, nxt = stack.pop()
        skip[node] = nxt
        if count[node] == 0:
            stack.append((right[node], nxt))
            stack.append((left[node], right[node]))
