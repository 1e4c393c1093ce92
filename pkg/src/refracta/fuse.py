"""Map per-view predictions onto the hull point cloud.

Each hull sample collects, from the views that can actually see it, a fused
first-surface normal, a rendering-error score, a TIR score, and a view
cosine. Three fusion strategies are provided: sequential best-view selection
by rendering error (TIR-free views always beat TIR views, ties go to the
earlier view), plain visibility-weighted averaging, and nearest-view
selection by view cosine.
"""

from dataclasses import dataclass

import numpy as np

from .bvh import AccelIndex
from .camera import Camera
from .errors import DataError
from .io import load_ply, save_ply
from .mesh import TriangleMesh, sample_surface
from .optics import NormalMapPair


@dataclass(frozen=True)
class OrientedPointCloud:
    points: np.ndarray  # (N, 3)
    normals: np.ndarray  # (N, 3) unit
    err: np.ndarray  # (N,) rendering-error luminance (init 2)
    tir: np.ndarray  # (N,) in [0, 1] (init 1)
    cos: np.ndarray  # (N,) view cosine in [0, 1] (init 0)
    view: np.ndarray  # (N,) int, 1-based chosen view, 0 = none

    def __post_init__(self):
        p = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if p.shape != n.shape:
            raise DataError("points and normals disagree")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "normals", n)
        for name in ("err", "tir", "cos"):
            a = np.ascontiguousarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if len(a) != len(p):
                raise DataError(f"{name} length disagrees with points")
            object.__setattr__(self, name, a)
        v = np.ascontiguousarray(self.view, dtype=np.int32).reshape(-1)
        object.__setattr__(self, "view", v)

    def __len__(self):
        return len(self.points)

    def save(self, path):
        save_ply(
            path,
            self.points,
            normals=self.normals,
            extra={"err": self.err, "tir": self.tir, "cos": self.cos, "view": self.view.astype(np.float64)},
        )

    @classmethod
    def load(cls, path):
        d = load_ply(path)
        p = d["properties"]
        return cls(
            points=d["vertices"],
            normals=np.stack([p["nx"], p["ny"], p["nz"]], axis=1),
            err=p["err"],
            tir=p["tir"],
            cos=p["cos"],
            view=p["view"].astype(np.int32),
        )


@dataclass(frozen=True)
class ViewMaps:
    """One view's prediction maps, all in world frame / image layout."""

    camera: Camera
    n_first: np.ndarray  # (H, W, 3)
    err: np.ndarray  # (H, W) luminance of the rendering-error map
    tir: np.ndarray  # (H, W) bool or float
    valid: np.ndarray  # (H, W) bool

    @classmethod
    def from_pair(cls, camera, pair: NormalMapPair, err_rgb):
        return cls(
            camera=camera,
            n_first=pair.n_first,
            err=np.mean(np.asarray(err_rgb, dtype=np.float64), axis=-1),
            tir=pair.tir,
            valid=pair.valid,
        )


def sample_hull_points(mesh: TriangleMesh, n, seed=0):
    """Uniform area-weighted hull samples carrying hull normals and the
    Algorithm-1 initialization sentinels."""
    pts, nrm = sample_surface(mesh, n, seed=seed)
    return OrientedPointCloud(
        points=pts,
        normals=nrm,
        err=np.full(n, 2.0),
        tir=np.ones(n),
        cos=np.zeros(n),
        view=np.zeros(n, dtype=np.int32),
    )


def visibility(hull_index: AccelIndex, camera: Camera, points):
    """True where the segment camera -> point is hull-unoccluded and the
    point projects in-frame."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    _, _, in_frame = camera.project_many(points)
    origins = np.broadcast_to(camera.center, points.shape)
    occ = hull_index.occluded_segments(origins, points)
    return in_frame & ~occ


def sample_map(camera: Camera, points, image):
    """Project points and bilinearly sample an (H, W[, C]) map; clamped at
    the image border. Callers must ensure the points project in-frame."""
    img = np.asarray(image, dtype=np.float64)
    uv, _, _ = camera.project_many(points)
    x = np.clip(uv[:, 0], 0.0, camera.width - 1.0)
    y = np.clip(uv[:, 1], 0.0, camera.height - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, camera.width - 1)
    y1 = np.minimum(y0 + 1, camera.height - 1)
    fx = (x - x0)[:, None] if img.ndim == 3 else (x - x0)
    fy = (y - y0)[:, None] if img.ndim == 3 else (y - y0)
    return (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )


def _usable_and_samples(hull_index, view: ViewMaps, points):
    vis = visibility(hull_index, view.camera, points)
    val = sample_map(view.camera, points, view.valid.astype(np.float64))
    usable = vis & (val > 0.5)
    nrm = sample_map(view.camera, points, view.n_first)
    lens = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = nrm / np.where(lens > 1e-12, lens, 1.0)
    err = sample_map(view.camera, points, view.err)
    tir = sample_map(view.camera, points, view.tir.astype(np.float64))
    cos = view.camera.view_cosine(points)
    return usable, nrm, err, tir, cos


def map_features_re(cloud: OrientedPointCloud, views, hull_index: AccelIndex):
    """Rendering-error view selection, the sequential best-view scan.

    Views are visited in index order; a candidate replaces the incumbent
    when (a) it is TIR-free and the incumbent is TIR, (b) both are TIR-free
    and it has strictly lower sampled error, or (c) both are TIR and it has
    a strictly larger view cosine. Points visible nowhere keep the
    initialization (view id 0).
    """
    pts = cloud.points
    normals = cloud.normals.copy()
    err = np.full(len(pts), 2.0)
    tir = np.ones(len(pts))
    cos = np.zeros(len(pts))
    vid = np.zeros(len(pts), dtype=np.int32)
    for i, view in enumerate(views, start=1):
        usable, nrm, cerr, ctir, ccos = _usable_and_samples(hull_index, view, pts)
        cand_tir = ctir > 0.5
        inc_tir = tir > 0.5
        upd_tir = usable & cand_tir & inc_tir & (ccos > cos)
        upd_clear = usable & ~cand_tir & (inc_tir | (cerr < err))
        upd = upd_tir | upd_clear
        normals[upd] = nrm[upd]
        err[upd] = cerr[upd]
        tir[upd] = ctir[upd]
        cos[upd] = ccos[upd]
        vid[upd] = i
    return OrientedPointCloud(pts, normals, err, tir, cos, vid)


def map_features_avg(cloud: OrientedPointCloud, views, hull_index: AccelIndex):
    """Visibility-weighted means of the per-view samples; the mean normal is
    renormalized. Points visible nowhere keep the initialization."""
    pts = cloud.points
    n = len(pts)
    acc_n = np.zeros((n, 3))
    acc_err = np.zeros(n)
    acc_tir = np.zeros(n)
    acc_cos = np.zeros(n)
    cnt = np.zeros(n)
    for view in views:
        usable, nrm, cerr, ctir, ccos = _usable_and_samples(hull_index, view, pts)
        w = usable.astype(np.float64)
        acc_n += w[:, None] * nrm
        acc_err += w * cerr
        acc_tir += w * ctir
        acc_cos += w * ccos
        cnt += w
    seen = cnt > 0
    safe = np.where(seen, cnt, 1.0)
    normals = cloud.normals.copy()
    mean_n = acc_n / safe[:, None]
    lens = np.linalg.norm(mean_n, axis=1, keepdims=True)
    mean_n = mean_n / np.where(lens > 1e-12, lens, 1.0)
    normals[seen] = mean_n[seen]
    err = np.where(seen, acc_err / safe, 2.0)
    tir = np.where(seen, acc_tir / safe, 1.0)
    cos = np.where(seen, acc_cos / safe, 0.0)
    # averaging has no single chosen view; 0 marks "none" for downstream losses
    vid = np.zeros(n, dtype=np.int32)
    return OrientedPointCloud(pts, normals, err, tir, cos, vid)


def map_features_nearest(cloud: OrientedPointCloud, views, hull_index: AccelIndex):
    """Copy features from the usable view with the largest view cosine;
    ties break toward the lower view index."""
    pts = cloud.points
    n = len(pts)
    normals = cloud.normals.copy()
    err = np.full(n, 2.0)
    tir = np.ones(n)
    cos = np.zeros(n)
    best_cos = np.full(n, -1.0)
    vid = np.zeros(n, dtype=np.int32)
    for i, view in enumerate(views, start=1):
        usable, nrm, cerr, ctir, ccos = _usable_and_samples(hull_index, view, pts)
        upd = usable & (ccos > best_cos)
        best_cos[upd] = ccos[upd]
        normals[upd] = nrm[upd]
        err[upd] = cerr[upd]
        tir[upd] = ctir[upd]
        cos[upd] = ccos[upd]
        vid[upd] = i
    return OrientedPointCloud(pts, normals, err, tir, cos, vid)


STRATEGIES = {
    "re": map_features_re,
    "avg": map_features_avg,
    "nearest": map_features_nearest,
}


def map_features(cloud, views, hull_index, strategy="re"):
    if strategy not in STRATEGIES:
        raise DataError(f"unknown fusion strategy {strategy!r} (re|avg|nearest)")
    return STRATEGIES[strategy](cloud, views, hull_index)
