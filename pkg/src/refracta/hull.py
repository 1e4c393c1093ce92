"""Visual-hull initialization: silhouette carving, iso-surfacing, Loop
subdivision, and hull-derived first/second-surface normal maps."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage import measure

from .backend import get_kernels
from .bvh import AccelIndex
from .camera import Camera
from .errors import DataError, EmptyHullError
from .mesh import TriangleMesh, require_manifold
from .optics import NormalMapPair


@dataclass(frozen=True)
class OccupancyVolume:
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    grid: np.ndarray  # (nx, ny, nz) bool

    def __post_init__(self):
        lo = np.asarray(self.bounds_lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.bounds_hi, dtype=np.float64).reshape(3)
        g = np.ascontiguousarray(self.grid, dtype=bool)
        if g.ndim != 3 or min(g.shape) < 16:
            raise DataError("occupancy grid must be 3D with resolution >= 16")
        if np.any(hi <= lo):
            raise DataError("empty bounds")
        for a in (lo, hi, g):
            a.flags.writeable = False
        object.__setattr__(self, "bounds_lo", lo)
        object.__setattr__(self, "bounds_hi", hi)
        object.__setattr__(self, "grid", g)

    @property
    def voxel_size(self):
        return (self.bounds_hi - self.bounds_lo) / np.asarray(self.grid.shape)

    def volume(self):
        """Occupied voxel count times voxel volume."""
        return float(np.count_nonzero(self.grid)) * float(np.prod(self.voxel_size))

    def voxel_of(self, points):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        idx = np.floor((p - self.bounds_lo) / self.voxel_size).astype(np.int64)
        return idx

    def contains(self, points):
        """Occupancy at the voxels containing each point (False out of bounds)."""
        idx = self.voxel_of(points)
        shape = np.asarray(self.grid.shape)
        ok = np.all((idx >= 0) & (idx < shape), axis=1)
        idx = np.clip(idx, 0, shape - 1)
        return ok & self.grid[idx[:, 0], idx[:, 1], idx[:, 2]]


def fit_bounds(masks, cameras, margin=1.05):
    """Cube bounds from silhouette cones.

    Triangulates the central mask rays for a center estimate, then sizes the
    cube by the widest mask cone (exact over each silhouette's boundary
    pixels). Kept as tight as possible: bounds larger than the frusta leave
    corner regions that no view constrains, which survive carving as
    phantoms.
    """
    axes = []
    origins = []
    half_angles = []
    for mask, cam in zip(masks, cameras):
        m = np.asarray(mask, dtype=bool)
        if not m.any():
            raise DataError("a silhouette mask is empty")
        boundary = m & ~ndimage.binary_erosion(m, border_value=0)
        ys, xs = np.nonzero(boundary)
        cu, cv = float(xs.mean()), float(ys.mean())
        center_dir = cam.ray(cu, cv).direction
        dirs = cam.rays(np.stack([xs, ys], axis=1).astype(np.float64))
        # half a pixel of slack around the sampled boundary
        px_slack = 1.0 / min(cam.fx, cam.fy)
        ang = float(np.max(np.arccos(np.clip(dirs @ center_dir, -1.0, 1.0)))) + px_slack
        axes.append(center_dir)
        origins.append(cam.center)
        half_angles.append(ang)
    # least-squares point closest to all central rays
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for d, o in zip(axes, origins):
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ o
    center = np.linalg.solve(A, b)
    radius = 0.0
    for d, o, a in zip(axes, origins, half_angles):
        dist = float(np.linalg.norm(center - o))
        radius = max(radius, dist * np.tan(a))
    radius *= margin
    return center - radius, center + radius


def carve(masks, cameras, resolution=128, bounds=None):
    """Occupancy volume from silhouette masks by the voxel-center test.

    A voxel survives iff its center projects inside the mask in every view
    where it lands in-frame; out-of-frame and behind-camera projections
    impose no constraint.
    """
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if len(masks) < 1 or len(masks) != len(cameras):
        raise DataError("need one mask per camera")
    if bounds is None:
        if len(masks) < 2:
            raise DataError("auto-fit bounds require at least 2 views")
        lo, hi = fit_bounds(masks, cameras)
    else:
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,)).copy()
    if res.min() < 16:
        raise DataError("carving resolution must be at least 16")
    h, w = masks[0].shape
    for m in masks:
        if m.shape != (h, w):
            raise DataError("all masks must share one resolution")
    stack = np.ascontiguousarray(np.stack(masks).astype(np.uint8))
    cam_rt = np.ascontiguousarray(np.stack([c.rotation.T for c in cameras]))
    cam_t = np.ascontiguousarray(np.stack([c.center for c in cameras]))
    cam_k = np.ascontiguousarray(
        np.array([[c.fx, c.fy, c.cx, c.cy] for c in cameras], dtype=np.float64)
    )
    k = get_kernels()
    step = (hi - lo) / res
    occ = k.carve_grid(stack, cam_rt, cam_t, cam_k, lo, step, res)
    if not occ.any():
        raise EmptyHullError("empty hull: silhouette cones have no common voxel")
    return OccupancyVolume(lo, hi, occ.astype(bool))


def marching_cubes(vol: OccupancyVolume, smooth_passes=0):
    """Iso-surface of the {0,1} occupancy field at level 0.5.

    Optionally box-filters the field first (one 3x3x3 pass per count). The
    grid is zero-padded so the surface always closes; faces come out
    outward-oriented.
    """
    field = vol.grid.astype(np.float64)
    for _ in range(int(smooth_passes)):
        field = ndimage.uniform_filter(field, size=3, mode="constant", cval=0.0)
    return iso_surface(field, 0.5, vol.bounds_lo, vol.voxel_size)


def iso_surface(field, level, origin, step, inside_above=True):
    """Marching-cubes surface of a scalar field sampled at voxel centers.

    ``inside_above`` states which side of the level is the object interior;
    the padding ring is placed on the outside so the surface always closes
    within the padded domain.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.max() <= level or field.min() >= level:
        raise EmptyHullError("iso level outside the field's range: no surface")
    pad_value = min(level - 1.0, field.min() - 1.0) if inside_above else max(level + 1.0, field.max() + 1.0)
    padded = np.pad(field, 1, mode="constant", constant_values=pad_value)
    step = np.broadcast_to(np.asarray(step, dtype=np.float64), (3,))
    verts, faces, _, _ = measure.marching_cubes(padded, level=level, spacing=tuple(step))
    world = verts + (np.asarray(origin) - 0.5 * step)
    mesh = TriangleMesh(world.astype(np.float64), faces.astype(np.int32))
    return mesh.oriented_outward()


def loop_subdivide(mesh: TriangleMesh, iterations=3):
    """Loop-scheme subdivision of a closed manifold triangle mesh."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    v = np.asarray(mesh.vertices, dtype=np.float64)
    f = np.asarray(mesh.faces, dtype=np.int64)
    for _ in range(int(iterations)):
        require_manifold(f)
        v, f = _loop_once(v, f)
    return TriangleMesh(v, f.astype(np.int32))


def _loop_once(v, f):
    nf = len(f)
    half = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    opp = np.concatenate([f[:, 2], f[:, 0], f[:, 1]], axis=0)
    key = np.sort(half, axis=1)
    edges, inv = np.unique(key, axis=0, return_inverse=True)
    ne = len(edges)

    # odd (edge) points: 3/8 (a+b) + 1/8 (sum of the two opposite corners)
    opp_sum = np.zeros((ne, 3))
    np.add.at(opp_sum, inv, v[opp])
    edge_pts = 0.375 * (v[edges[:, 0]] + v[edges[:, 1]]) + 0.125 * opp_sum

    # even (vertex) points: (1 - n beta) v + beta * sum of neighbors
    valence = np.zeros(len(v), dtype=np.int64)
    np.add.at(valence, edges[:, 0], 1)
    np.add.at(valence, edges[:, 1], 1)
    nbr_sum = np.zeros((len(v), 3))
    np.add.at(nbr_sum, edges[:, 0], v[edges[:, 1]])
    np.add.at(nbr_sum, edges[:, 1], v[edges[:, 0]])
    n = np.maximum(valence, 1)
    beta = np.where(n == 3, 3.0 / 16.0, 3.0 / (8.0 * n))
    even = (1.0 - n * beta)[:, None] * v + beta[:, None] * nbr_sum

    m01 = len(v) + inv[:nf]
    m12 = len(v) + inv[nf : 2 * nf]
    m20 = len(v) + inv[2 * nf :]
    f0, f1, f2 = f[:, 0], f[:, 1], f[:, 2]
    new_f = np.concatenate(
        [
            np.stack([f0, m01, m20], axis=1),
            np.stack([f1, m12, m01], axis=1),
            np.stack([f2, m20, m12], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ],
        axis=0,
    )
    return np.concatenate([even, edge_pts], axis=0), new_f


def build_hull(masks, cameras, resolution=128, subdiv_iterations=3, smooth_passes=1, bounds=None):
    """carve -> marching cubes -> Loop subdivision, the full initialization."""
    vol = carve(masks, cameras, resolution=resolution, bounds=bounds)
    mesh = marching_cubes(vol, smooth_passes=smooth_passes)
    if subdiv_iterations > 0:
        mesh = loop_subdivide(mesh, subdiv_iterations)
    return vol, mesh


def trace_surface_maps(index: AccelIndex, camera: Camera, ior, grazing_eps=1e-6):
    """Two-interface trace of every camera ray through a closed mesh.

    Returns the NormalMapPair (both normals outward-oriented) plus the two
    hit-point maps; invalid pixels miss the mesh or graze it.
    """
    k = get_kernels()
    dirs = camera.rays()
    origins = np.ascontiguousarray(np.broadcast_to(camera.center, dirs.shape))
    n1, n2, p1, p2, valid, tir = k.trace_normal_pairs(
        index.nodes_min, index.nodes_max, index.left, index.right, index.count, index.skip,
        index.tv0, index.te1, index.te2, index.tn0, index.tn1, index.tn2,
        origins, dirs, float(ior), index.t_eps, grazing_eps,
    )
    h, w = camera.height, camera.width
    vmask = valid.reshape(h, w).astype(bool)
    pair = NormalMapPair(
        n_first=n1.reshape(h, w, 3),
        n_second=n2.reshape(h, w, 3),
        valid=vmask,
        tir=tir.reshape(h, w).astype(bool) & vmask,
    )
    return {"pair": pair, "p_first": p1.reshape(h, w, 3), "p_second": p2.reshape(h, w, 3)}


def hull_normal_maps(hull_index: AccelIndex, camera: Camera, ior):
    """First/second-surface normal maps of the visual hull for one view."""
    return trace_surface_maps(hull_index, camera, ior)["pair"]
