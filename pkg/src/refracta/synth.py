"""Synthetic scenes and the brute-force reference renderer.

Shapes are unions of random smooth implicit primitives polygonized by
marching cubes; cameras sit on a jittered Fibonacci sphere around the
object. The reference path tracer is the independent oracle for the
rendering layer: with the pixel-center filter and at most 4 bounces it
branches every interface fully and is exactly deterministic, while the box
filter jitters sub-pixel positions with counter-based per-pixel streams.
"""

import os
from dataclasses import dataclass

import numpy as np

from .backend import get_kernels
from .bvh import AccelIndex
from .camera import Camera, look_at, rotation_about_axis
from .envmap import EnvironmentMap, blob_env
from .errors import ConfigError
from .hull import iso_surface, loop_subdivide, trace_surface_maps
from .io import save_camera, save_json, save_mask, save_mesh, save_pfm
from .mesh import TriangleMesh
from .optics import NormalMapPair


# ---------------------------------------------------------------------------
# procedural shapes
# ---------------------------------------------------------------------------


def _sd_sphere(p, center, radius):
    return np.linalg.norm(p - center, axis=-1) - radius


def _sd_ellipsoid(p, center, radii):
    q = (p - center) / radii
    k0 = np.linalg.norm(q, axis=-1)
    k1 = np.linalg.norm(q / radii, axis=-1)
    k1 = np.where(k1 > 1e-12, k1, 1e-12)
    return k0 * (k0 - 1.0) / k1


def _sd_capsule(p, a, b, radius):
    pa = p - a
    ba = b - a
    h = np.clip(np.sum(pa * ba, axis=-1) / np.sum(ba * ba), 0.0, 1.0)
    return np.linalg.norm(pa - h[..., None] * ba, axis=-1) - radius


def _smooth_min(a, b, k):
    h = np.maximum(k - np.abs(a - b), 0.0) / k
    return np.minimum(a, b) - h * h * k * 0.25


def gen_shape(seed, grid_resolution=128, n_primitives=None, blend=0.15):
    """Random watertight blobby mesh: smooth-min union of 3-8 primitives."""
    rng = np.random.default_rng(seed)
    n = int(n_primitives) if n_primitives else int(rng.integers(3, 9))
    lin = (np.arange(grid_resolution) + 0.5) / grid_resolution * 2.0 - 1.0
    gx, gy, gz = np.meshgrid(lin, lin, lin, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1)
    sdf = np.full(pts.shape[:3], np.inf)
    for _ in range(n):
        kind = rng.integers(0, 3)
        center = rng.uniform(-0.45, 0.45, size=3)
        if kind == 0:
            d = _sd_sphere(pts, center, rng.uniform(0.15, 0.4))
        elif kind == 1:
            d = _sd_ellipsoid(pts, center, rng.uniform(0.15, 0.45, size=3))
        else:
            other = center + rng.uniform(-0.4, 0.4, size=3)
            other = np.clip(other, -0.5, 0.5)
            d = _sd_capsule(pts, center, other, rng.uniform(0.1, 0.25))
        sdf = _smooth_min(sdf, d, blend)
    step = 2.0 / grid_resolution
    mesh = iso_surface(-sdf, 0.0, origin=np.full(3, -1.0), step=np.full(3, step))
    return loop_subdivide(mesh, 1)


# ---------------------------------------------------------------------------
# camera rigs
# ---------------------------------------------------------------------------


def fibonacci_directions(n):
    i = np.arange(n, dtype=np.float64)
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    y = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(1.0 - y * y, 0.0))
    th = 2.0 * np.pi * i / phi
    return np.stack([r * np.cos(th), y, r * np.sin(th)], axis=1)


def camera_ring(mesh_or_radius, n_views, width=128, height=128, fov_deg=45.0,
                distance_factor=2.5, jitter_deg=3.0, seed=0):
    """Cameras on a Fibonacci sphere, look-at the object, small pose jitter."""
    if isinstance(mesh_or_radius, TriangleMesh):
        lo, hi = mesh_or_radius.bounds()
        center = (lo + hi) / 2.0
        radius = float(np.linalg.norm(hi - lo)) / 2.0
    else:
        center = np.zeros(3)
        radius = float(mesh_or_radius)
    rng = np.random.default_rng(seed)
    cams = []
    for d in fibonacci_directions(n_views):
        pos = center + d * radius * distance_factor
        cam = look_at(pos, center, width=width, height=height, fov_deg=fov_deg)
        if jitter_deg > 0:
            axis = rng.normal(size=3)
            ang = np.radians(rng.uniform(0.0, jitter_deg))
            R = rotation_about_axis(axis, ang) @ cam.rotation
            cam = Camera(cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy, R, cam.translation)
        cams.append(cam)
    return cams


# ---------------------------------------------------------------------------
# ground-truth maps and silhouettes
# ---------------------------------------------------------------------------


def gt_normal_maps(index: AccelIndex, camera: Camera, ior):
    """Ground-truth normal pair via the same trace as the hull maps."""
    return trace_surface_maps(index, camera, ior)


def silhouette_mask(index: AccelIndex, camera: Camera):
    """Pixels whose center ray hits the mesh."""
    dirs = camera.rays()
    origins = np.broadcast_to(camera.center, dirs.shape)
    r = index.intersect_batch(origins, dirs, t_min=0.0)
    return r["valid"].reshape(camera.height, camera.width)


@dataclass(frozen=True)
class AnalyticSphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))


def sphere_normal_maps(camera: Camera, sphere: AnalyticSphere, ior):
    """Closed-form first/second-surface normals of a sphere (no mesh involved)."""
    dirs = camera.rays()
    o = np.broadcast_to(camera.center, dirs.shape) - sphere.center
    b = np.einsum("ij,ij->i", o, dirs)
    c = np.einsum("ij,ij->i", o, o) - sphere.radius**2
    disc = b * b - c
    hit = disc > 0
    t1 = -b - np.sqrt(np.maximum(disc, 0.0))
    hit &= t1 > 0
    p1 = o + t1[:, None] * dirs
    n1 = p1 / sphere.radius
    eta = 1.0 / ior
    ci = -np.einsum("ij,ij->i", dirs, n1)
    hit &= ci > 1e-6
    ci = np.maximum(ci, 1e-9)
    ct = np.sqrt(np.maximum(1.0 - eta * eta * (1.0 - ci * ci), 0.0))
    lm = eta * dirs + (eta * ci - ct)[:, None] * n1
    b2 = np.einsum("ij,ij->i", p1, lm)
    p2 = p1 - 2.0 * b2[:, None] * lm
    n2 = p2 / sphere.radius
    ci2 = np.abs(np.einsum("ij,ij->i", lm, n2))
    tir = (1.0 - ior * ior * (1.0 - ci2 * ci2)) < 0.0
    h, w = camera.height, camera.width
    z = np.zeros((h * w, 3))
    n1 = np.where(hit[:, None], n1, z).reshape(h, w, 3)
    n2 = np.where(hit[:, None], n2, z).reshape(h, w, 3)
    valid = hit.reshape(h, w)
    return NormalMapPair(n1, n2, valid, (tir.reshape(h, w)) & valid)


# ---------------------------------------------------------------------------
# reference path tracer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceResult:
    image: np.ndarray  # (H, W, 3)
    hit_fraction: np.ndarray  # (H, W) fraction of samples whose primary ray hit
    tir_fraction: np.ndarray  # (H, W) fraction whose transmission path hit TIR


_EMPTY3 = np.zeros((0, 3))
_ONE3 = np.zeros((1, 3))
_I32 = np.zeros(1, dtype=np.int32)


def path_trace_reference(scene, env: EnvironmentMap, camera: Camera, ior,
                         max_bounces=2, samples_per_pixel=16, seed=0,
                         pixel_filter="center"):
    """Reference render of a dielectric ``scene`` (AccelIndex/TriangleMesh or
    AnalyticSphere) under the environment map.

    ``pixel_filter='center'`` shoots every sample through the pixel center
    (the apples-to-apples oracle for the rendering layer, deterministic up to
    roulette); ``'box'`` jitters sub-pixel positions uniformly.
    """
    if pixel_filter not in ("center", "box"):
        raise ConfigError(f"pixel_filter must be 'center' or 'box', got {pixel_filter!r}")
    k = get_kernels()
    if isinstance(scene, TriangleMesh):
        scene = AccelIndex(scene)
    if isinstance(scene, AnalyticSphere):
        geom = 1
        sph = np.array([*scene.center, scene.radius])
        args = (_ONE3, _ONE3, _I32, _I32, _I32, _I32, _EMPTY3, _EMPTY3, _EMPTY3, _EMPTY3, _EMPTY3, _EMPTY3)
        t_eps = 1e-4 * 2.0 * scene.radius
    else:
        geom = 0
        sph = np.zeros(4)
        args = (
            scene.nodes_min, scene.nodes_max, scene.left, scene.right, scene.count, scene.skip,
            scene.tv0, scene.te1, scene.te2, scene.tn0, scene.tn1, scene.tn2,
        )
        t_eps = scene.t_eps
    img, hitf, tirf = k.path_trace(
        geom, sph, *args,
        env.data, camera.rotation, camera.translation,
        camera.fx, camera.fy, camera.cx, camera.cy, camera.width, camera.height,
        float(ior), int(samples_per_pixel), int(max_bounces), int(seed),
        1 if pixel_filter == "box" else 0, t_eps,
    )
    h, w = camera.height, camera.width
    return TraceResult(img.reshape(h, w, 3), hitf.reshape(h, w), tirf.reshape(h, w))


# ---------------------------------------------------------------------------
# dataset bundles
# ---------------------------------------------------------------------------


def make_dataset(out_dir, shape_seeds, views=10, image_size=128, ior=1.4723,
                 env_seeds=None, env_height=128, grid_resolution=128,
                 max_bounces=2, samples_per_pixel=1, pixel_filter="center",
                 fov_deg=45.0, jitter_deg=3.0, ior_range=None, seed=0):
    """Write one scene bundle per shape seed; returns the manifest paths.

    With ``ior_range`` set, each scene's true refractive index is drawn
    uniformly from it (the assumed index at reconstruction time is whatever
    the pipeline config says, which is the point of the sensitivity harness).
    """
    rng = np.random.default_rng(seed)
    manifests = []
    for si, shape_seed in enumerate(shape_seeds):
        scene_dir = os.path.join(out_dir, f"scene_{int(shape_seed):04d}")
        os.makedirs(scene_dir, exist_ok=True)
        scene_ior = float(ior)
        if ior_range is not None:
            scene_ior = float(rng.uniform(ior_range[0], ior_range[1]))
        env_seed = (env_seeds[si] if env_seeds is not None else int(shape_seed) + 1000)
        env = blob_env(env_seed, height=env_height)
        mesh = gen_shape(shape_seed, grid_resolution=grid_resolution)
        index = AccelIndex(mesh)
        cams = camera_ring(mesh, views, width=image_size, height=image_size,
                           fov_deg=fov_deg, jitter_deg=jitter_deg, seed=int(shape_seed) + 7)
        save_mesh(os.path.join(scene_dir, "mesh.ply"), mesh)
        save_pfm(os.path.join(scene_dir, "env.pfm"), env.data)
        views_meta = []
        for vi, cam in enumerate(cams):
            vdir = os.path.join(scene_dir, f"view_{vi:02d}")
            os.makedirs(vdir, exist_ok=True)
            save_camera(os.path.join(vdir, "camera.json"), cam)
            res = path_trace_reference(
                index, env, cam, scene_ior, max_bounces=max_bounces,
                samples_per_pixel=samples_per_pixel, seed=int(shape_seed) * 1000 + vi,
                pixel_filter=pixel_filter,
            )
            save_pfm(os.path.join(vdir, "image.pfm"), res.image)
            mask = silhouette_mask(index, cam)
            save_mask(os.path.join(vdir, "mask.png"), mask)
            maps = gt_normal_maps(index, cam, scene_ior)
            save_pfm(os.path.join(vdir, "n1.pfm"), maps["pair"].n_first)
            save_pfm(os.path.join(vdir, "n2.pfm"), maps["pair"].n_second)
            rel = f"view_{vi:02d}"
            views_meta.append({
                "camera": f"{rel}/camera.json",
                "image": f"{rel}/image.pfm",
                "mask": f"{rel}/mask.png",
                "n1": f"{rel}/n1.pfm",
                "n2": f"{rel}/n2.pfm",
            })
        manifest = {
            "mesh": "mesh.ply",
            "ior": scene_ior,
            "env": "env.pfm",
            "views": views_meta,
        }
        mpath = os.path.join(scene_dir, "manifest.json")
        save_json(mpath, manifest)
        manifests.append(mpath)
    return manifests


def normal_pair_from_files(n1, n2, valid_mask, ior):
    """Rebuild a NormalMapPair from stored maps; TIR is recomputed from the
    exit-refraction radicand so the mask matches the stored normals exactly."""
    n1 = np.asarray(n1, dtype=np.float64)
    n2 = np.asarray(n2, dtype=np.float64)
    valid = np.asarray(valid_mask, dtype=bool)
    lens1 = np.linalg.norm(n1, axis=-1)
    lens2 = np.linalg.norm(n2, axis=-1)
    valid = valid & (lens1 > 0.5) & (lens2 > 0.5)
    n1 = np.where(valid[..., None], n1 / np.where(lens1 > 0, lens1, 1.0)[..., None], 0.0)
    n2 = np.where(valid[..., None], n2 / np.where(lens2 > 0, lens2, 1.0)[..., None], 0.0)
    return NormalMapPair(n1, n2, valid, np.zeros_like(valid))


def recompute_tir(pair: NormalMapPair, camera: Camera, ior):
    """TIR mask implied by the stored normals for this camera's rays."""
    from .optics import exit_tir_mask

    dirs = camera.rays().reshape(*pair.shape, 3)
    tir = exit_tir_mask(dirs, pair.n_first, pair.n_second, ior)
    return pair.with_normals(pair.n_first, pair.n_second, tir=tir & pair.valid)
