"""Triangle meshes: storage, derived normals, and manifold/orientation checks."""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NonManifoldError


def _freeze(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64, world units
    faces: np.ndarray  # (F, 3) int32
    normals: np.ndarray = None  # (V, 3) unit vertex normals

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int32).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise DataError("face indices out of range")
        n = self.normals
        if n is None:
            n = vertex_normals(v, f)
        else:
            n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
            if n.shape != v.shape:
                raise DataError("vertex normal count must match vertex count")
        object.__setattr__(self, "vertices", _freeze(v))
        object.__setattr__(self, "faces", _freeze(f))
        object.__setattr__(self, "normals", _freeze(n))

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_faces(self):
        return len(self.faces)

    def face_corners(self):
        v = self.vertices
        f = self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_areas(self):
        a, b, c = self.face_corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def signed_volume(self):
        a, b, c = self.face_corners()
        return float(np.sum(np.einsum("ij,ij->i", a, np.cross(b, c))) / 6.0)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def diagonal(self):
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def oriented_outward(self):
        """Flip all faces if the enclosed signed volume is negative."""
        if self.signed_volume() >= 0:
            return self
        return TriangleMesh(self.vertices, self.faces[:, ::-1], normals=-self.normals)

    def transformed(self, rotation=None, translation=None, scale=1.0):
        v = self.vertices * float(scale)
        n = self.normals
        if rotation is not None:
            R = np.asarray(rotation, dtype=np.float64)
            v = v @ R.T
            n = n @ R.T
        if translation is not None:
            v = v + np.asarray(translation, dtype=np.float64)
        return TriangleMesh(v, self.faces, normals=n)


def vertex_normals(vertices, faces):
    """Area-weighted vertex normals (sum of incident face cross products)."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    n = np.zeros_like(v)
    if len(f):
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        for k in range(3):
            np.add.at(n, f[:, k], fn)
    lens = np.linalg.norm(n, axis=1)
    lens[lens == 0] = 1.0
    return n / lens[:, None]


def edge_face_counts(faces):
    """Count of incident faces per undirected edge; key to watertightness."""
    f = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def is_watertight(faces):
    counts = edge_face_counts(faces)
    return bool(len(counts)) and bool(np.all(counts == 2))


def require_manifold(faces):
    counts = edge_face_counts(faces)
    if not len(counts) or not np.all(counts == 2):
        bad = int(np.sum(counts != 2)) if len(counts) else 0
        raise NonManifoldError(f"mesh is not a closed 2-manifold ({bad} defective edges)")


def euler_characteristic(mesh):
    f = np.asarray(mesh.faces, dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    e = np.sort(e, axis=1)
    n_edges = len(np.unique(e, axis=0))
    used = np.unique(f)
    return len(used) - n_edges + len(f)


def sample_surface(mesh, n, seed=0):
    """Area-weighted uniform surface samples with interpolated unit normals.

    Deterministic for a given seed: triangle choice and barycentrics come
    from one PCG64 stream in a fixed order.
    """
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise DataError("cannot sample a zero-area mesh")
    probs = areas / total
    tri = rng.choice(len(areas), size=n, p=probs)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    u = 1.0 - r1
    v = r1 * (1.0 - r2)
    w = r1 * r2
    f = mesh.faces[tri]
    pts = (
        u[:, None] * mesh.vertices[f[:, 0]]
        + v[:, None] * mesh.vertices[f[:, 1]]
        + w[:, None] * mesh.vertices[f[:, 2]]
    )
    nrm = (
        u[:, None] * mesh.normals[f[:, 0]]
        + v[:, None] * mesh.normals[f[:, 1]]
        + w[:, None] * mesh.normals[f[:, 2]]
    )
    lens = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = nrm / np.where(lens > 0, lens, 1.0)
    return pts, nrm


def icosphere(subdivisions=3, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Unit icosphere by repeated midpoint subdivision of an icosahedron."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
        edges = np.sort(edges, axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        mids = verts[uniq[:, 0]] + verts[uniq[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        mid_idx = len(verts) + np.arange(len(uniq))
        verts = np.concatenate([verts, mids], axis=0)
        m01 = mid_idx[inv[: len(faces)]]
        m12 = mid_idx[inv[len(faces) : 2 * len(faces)]]
        m20 = mid_idx[inv[2 * len(faces) :]]
        f0, f1, f2 = faces[:, 0], faces[:, 1], faces[:, 2]
        faces = np.concatenate(
            [
                np.stack([f0, m01, m20], axis=1),
                np.stack([f1, m12, m01], axis=1),
                np.stack([f2, m20, m12], axis=1),
                np.stack([m01, m12, m20], axis=1),
            ],
            axis=0,
        )
    center = np.asarray(center, dtype=np.float64)
    points = verts * radius + center
    # exact analytic normals for a sphere
    return TriangleMesh(points, faces, normals=verts).oriented_outward()
