"""Final shape recovery from the fused oriented cloud.

The loss library mirrors the three supervision styles (nearest-point with
squared norms, view-projected targets, and a symmetric unsquared Chamfer sum
with the same lambda weights), grid Poisson reconstruction solves for an
indicator-like field whose gradient matches the splatted normals, and the
deformation path slides hull vertices along their normals to match the fused
normals and positions.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .bvh import AccelIndex
from .errors import NumericalError
from .fuse import OrientedPointCloud, sample_map
from .hull import iso_surface
from .mesh import TriangleMesh

LAMBDA_POS = 200.0
LAMBDA_NRM = 5.0


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_nearest(points, normals, gt_index: AccelIndex, lambda_pos=LAMBDA_POS, lambda_nrm=LAMBDA_NRM):
    """Squared distances to the closest ground-truth surface point and its
    interpolated normal, summed with the standard weights."""
    r = gt_index.closest_point_batch(points)
    dp = np.asarray(points) - r["point"]
    dn = np.asarray(normals) - r["normal"]
    return float(lambda_pos * np.sum(dp * dp) + lambda_nrm * np.sum(dn * dn))


def loss_view(cloud: OrientedPointCloud, gt_maps, cameras, gt_index: AccelIndex,
              lambda_pos=LAMBDA_POS, lambda_nrm=LAMBDA_NRM):
    """View-projected targets for points with a chosen view; nearest-point
    fallback for the rest.

    ``gt_maps`` is a list aligned with ``cameras``: dicts with 'p1' (H, W, 3)
    world-frame first-hit positions and 'n1' (H, W, 3) normals.
    """
    pts = cloud.points
    tgt_p = np.zeros_like(pts)
    tgt_n = np.zeros_like(pts)
    have = np.zeros(len(pts), dtype=bool)
    for i, (cam, maps) in enumerate(zip(cameras, gt_maps), start=1):
        sel = cloud.view == i
        if not np.any(sel):
            continue
        _, _, ok = cam.project_many(pts[sel])
        si = np.nonzero(sel)[0][ok]
        if not len(si):
            continue
        tgt_p[si] = sample_map(cam, pts[si], maps["p1"])
        n = sample_map(cam, pts[si], maps["n1"])
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        tgt_n[si] = n / np.where(lens > 1e-12, lens, 1.0)
        have[si] = True
    rest = ~have
    if np.any(rest):
        r = gt_index.closest_point_batch(pts[rest])
        tgt_p[rest] = r["point"]
        tgt_n[rest] = r["normal"]
    dp = pts - tgt_p
    dn = cloud.normals - tgt_n
    return float(lambda_pos * np.sum(dp * dp) + lambda_nrm * np.sum(dn * dn))


def loss_chamfer(points_a, normals_a, points_b, normals_b,
                 lambda_pos=LAMBDA_POS, lambda_nrm=LAMBDA_NRM):
    """Symmetric Chamfer sum with unsquared norms, halved weights per
    direction; nearest neighbors by position."""
    pa = np.asarray(points_a, dtype=np.float64)
    pb = np.asarray(points_b, dtype=np.float64)
    na = np.asarray(normals_a, dtype=np.float64)
    nb = np.asarray(normals_b, dtype=np.float64)
    ia = cKDTree(pb).query(pa, k=1)[1]
    ib = cKDTree(pa).query(pb, k=1)[1]
    d_ab = np.linalg.norm(pa - pb[ia], axis=1)
    d_ba = np.linalg.norm(pb - pa[ib], axis=1)
    n_ab = np.linalg.norm(na - nb[ia], axis=1)
    n_ba = np.linalg.norm(nb - na[ib], axis=1)
    return float(
        0.5 * lambda_pos * (np.sum(d_ab) + np.sum(d_ba))
        + 0.5 * lambda_nrm * (np.sum(n_ab) + np.sum(n_ba))
    )


# ---------------------------------------------------------------------------
# grid Poisson reconstruction
# ---------------------------------------------------------------------------


def _trilinear_splat(grid, idx, frac, values):
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (
                    (frac[:, 0] if dx else 1 - frac[:, 0])
                    * (frac[:, 1] if dy else 1 - frac[:, 1])
                    * (frac[:, 2] if dz else 1 - frac[:, 2])
                )
                tgt = idx + np.array([dx, dy, dz])
                if values.ndim == 2:
                    np.add.at(grid, (tgt[:, 0], tgt[:, 1], tgt[:, 2]), w[:, None] * values)
                else:
                    np.add.at(grid, (tgt[:, 0], tgt[:, 1], tgt[:, 2]), w * values)


def _trilinear_read(grid, idx, frac):
    out = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (
                    (frac[:, 0] if dx else 1 - frac[:, 0])
                    * (frac[:, 1] if dy else 1 - frac[:, 1])
                    * (frac[:, 2] if dz else 1 - frac[:, 2])
                )
                tgt = idx + np.array([dx, dy, dz])
                out = out + w * grid[tgt[:, 0], tgt[:, 1], tgt[:, 2]]
    return out


def _laplacian(x, inv_h2):
    """7-point Laplacian with implicit zero (Dirichlet) boundary."""
    out = -6.0 * x.copy()
    out[1:, :, :] += x[:-1, :, :]
    out[:-1, :, :] += x[1:, :, :]
    out[:, 1:, :] += x[:, :-1, :]
    out[:, :-1, :] += x[:, 1:, :]
    out[:, :, 1:] += x[:, :, :-1]
    out[:, :, :-1] += x[:, :, 1:]
    return out * inv_h2


def poisson_reconstruct(cloud: OrientedPointCloud, grid_resolution=128, screening=0.0,
                        smoothing_sigma=1.5, margin=0.15, cg_tol=1e-6, cg_max_iters=4000):
    """Screened grid Poisson surface reconstruction.

    Splats oriented normals into a vector field, Gaussian-smooths it, solves
    (-lap + screening * density) chi = -div V by conjugate gradients to a
    relative residual below ``cg_tol``, and extracts the iso-surface at the
    mean of chi over the input samples.
    """
    pts = cloud.points
    normals = cloud.normals
    if not np.any(np.linalg.norm(normals, axis=1) > 1e-12):
        raise NumericalError("no surface: splatted normal field is zero")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    pad = margin * float(np.max(hi - lo))
    lo = lo - pad
    hi = hi + pad
    res = int(grid_resolution)
    h = float(np.max(hi - lo)) / res
    dims = np.maximum(np.ceil((hi - lo) / h).astype(int) + 1, 8)
    # grid node i sits at lo + i * h
    x = (pts - lo) / h
    idx = np.clip(np.floor(x).astype(np.int64), 0, dims - 2)
    frac = x - idx

    vfield = np.zeros((*dims, 3))
    _trilinear_splat(vfield, idx, frac, normals)
    for c in range(3):
        vfield[..., c] = ndimage.gaussian_filter(vfield[..., c], sigma=smoothing_sigma, mode="constant")

    div = np.zeros(tuple(dims))
    div[1:-1, :, :] += (vfield[2:, :, :, 0] - vfield[:-2, :, :, 0]) / (2 * h)
    div[:, 1:-1, :] += (vfield[:, 2:, :, 1] - vfield[:, :-2, :, 1]) / (2 * h)
    div[:, :, 1:-1] += (vfield[:, :, 2:, 2] - vfield[:, :, :-2, 2]) / (2 * h)

    inv_h2 = 1.0 / (h * h)
    if screening > 0:
        density = np.zeros(tuple(dims))
        _trilinear_splat(density, idx, frac, np.ones(len(pts)))
        density = ndimage.gaussian_filter(density, sigma=smoothing_sigma, mode="constant")
        mean_d = density[density > 0].mean() if np.any(density > 0) else 1.0
        screen = screening * density / mean_d
    else:
        screen = None

    def op(x):
        y = -_laplacian(x, inv_h2)
        if screen is not None:
            y = y + screen * x
        return y

    rhs = -div
    chi = np.zeros_like(rhs)
    r = rhs - op(chi)
    p = r.copy()
    rs = float(np.sum(r * r))
    rhs_norm = float(np.sqrt(np.sum(rhs * rhs)))
    if rhs_norm == 0:
        raise NumericalError("no surface: divergence field is zero")
    history = []
    converged = False
    for _ in range(int(cg_max_iters)):
        ap = op(p)
        alpha = rs / float(np.sum(p * ap))
        chi += alpha * p
        r -= alpha * ap
        rs_new = float(np.sum(r * r))
        rel = np.sqrt(rs_new) / rhs_norm
        history.append(rel)
        if rel < cg_tol:
            converged = True
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    if not converged:
        raise NumericalError(
            f"conjugate gradients stalled at relative residual {history[-1]:.3e}", history=history
        )

    level = float(np.mean(_trilinear_read(chi, idx, frac)))
    # the boundary sits at chi = 0 (Dirichlet), so the interior lies on the
    # side of the level away from zero; outward-normal splats give level < 0
    inside_above = level > 0.0
    # node i is at lo + i*h: iso_surface expects voxel centers, so shift by h/2
    mesh = iso_surface(chi, level, origin=lo + 0.5 * h, step=np.full(3, h), inside_above=inside_above)
    return mesh.oriented_outward()


# ---------------------------------------------------------------------------
# normal-driven vertex deformation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeformConfig:
    w_normal: float = 1.0
    w_fit: float = 1.0
    w_prox: float = 0.1
    w_laplacian: float = 0.5
    iterations: int = 200
    step_factor: float = 0.005  # times the scene diagonal
    max_backtracks: int = 12


def _vertex_normal_grads(v, f, delta_dirs, weights, targets):
    """Energy sum_i w_i |N_i - T_i|^2 of area-weighted vertex normals plus its
    gradient wrt per-vertex offsets along ``delta_dirs``."""
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    cr = np.cross(b - a, c - a)
    m = np.zeros_like(v)
    for k in range(3):
        np.add.at(m, f[:, k], cr)
    lens = np.linalg.norm(m, axis=1, keepdims=True)
    lens = np.where(lens > 1e-18, lens, 1.0)
    n = m / lens
    resid = n - targets
    energy = float(np.sum(weights * np.sum(resid * resid, axis=1)))
    # a_v = 2 w_v J_normalize^T resid ; J_normalize = (I - n n^T)/|m|
    av = 2.0 * weights[:, None] * (resid - np.sum(resid * n, axis=1)[:, None] * n) / lens
    # dc_f/d delta_i = -(p_j - p_k) x dir_i  (cyclic in the face corners)
    grad = np.zeros(len(v))
    for corner in range(3):
        i = f[:, corner]
        j = f[:, (corner + 1) % 3]
        k = f[:, (corner + 2) % 3]
        dc = -np.cross(v[j] - v[k], delta_dirs[i])
        for vv in range(3):
            contrib = np.sum(av[f[:, vv]] * dc, axis=1)
            np.add.at(grad, i, contrib)
    return energy, n, grad


def _graph_laplacian(f, nv):
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    e = np.unique(np.sort(e, axis=1), axis=0)
    deg = np.zeros(nv)
    np.add.at(deg, e[:, 0], 1.0)
    np.add.at(deg, e[:, 1], 1.0)

    def apply(x):
        acc = np.zeros(nv)
        np.add.at(acc, e[:, 0], x[e[:, 1]])
        np.add.at(acc, e[:, 1], x[e[:, 0]])
        return deg * x - acc

    return apply


def deform_vertices(hull_mesh: TriangleMesh, cloud: OrientedPointCloud,
                    config: DeformConfig = DeformConfig()):
    """Slide hull vertices along their initial normals to match the fused
    cloud; gradient descent with backtracking, energy never increases across
    accepted iterations, connectivity is untouched."""
    v0 = hull_mesh.vertices.copy()
    f = hull_mesh.faces.astype(np.int64)
    dirs = hull_mesh.normals.copy()
    nv = len(v0)
    tree = cKDTree(cloud.points)
    nn = tree.query(v0, k=1)[1]
    targets_n = cloud.normals[nn]
    targets_p = cloud.points[nn]
    conf = np.clip(1.0 - cloud.tir[nn], 0.0, 1.0)
    w_n = config.w_normal * conf
    lap = _graph_laplacian(f, nv)
    diag = hull_mesh.diagonal()
    step = config.step_factor * diag

    delta = np.zeros(nv)

    def energy_grad(d):
        v = v0 + d[:, None] * dirs
        e_n, _, g_n = _vertex_normal_grads(v, f, dirs, w_n, targets_n)
        fit_res = v - targets_p
        fit_r = np.sum(fit_res * dirs, axis=1)
        e_fit = float(config.w_fit * np.sum(conf * np.sum(fit_res * fit_res, axis=1)))
        g_fit = config.w_fit * conf * 2.0 * fit_r
        e_prox = float(config.w_prox * np.sum(d * d))
        g_prox = 2.0 * config.w_prox * d
        ld = lap(d)
        e_lap = float(config.w_laplacian * np.sum(ld * ld))
        g_lap = 2.0 * config.w_laplacian * lap(ld)
        return e_n + e_fit + e_prox + e_lap, g_n + g_fit + g_prox + g_lap

    e_cur, g = energy_grad(delta)
    energies = [e_cur]
    for _ in range(int(config.iterations)):
        gnorm = float(np.max(np.abs(g)))
        if gnorm < 1e-12:
            break
        s = step / gnorm
        accepted = False
        for _ in range(int(config.max_backtracks)):
            cand = delta - s * g
            e_new, g_new = energy_grad(cand)
            if e_new <= e_cur:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            break
        delta = cand
        e_cur, g = e_new, g_new
        energies.append(e_cur)

    out = TriangleMesh(v0 + delta[:, None] * dirs, hull_mesh.faces)
    return out, np.asarray(energies)
