"""Per-pixel normal-hypothesis search around the hull normals.

Candidates are sampled on cones around each hull normal using a small angle
schedule (one sample at the apex, the rest on a ring whose radius tracks how
wrong hull normals tend to be for that view count). Every first x second
candidate pair is scored by its two-bounce rendering error against the
observed pixel; a soft-min over the K x K costs picks the output pair, and a
bounded smoothing pass cleans it up. The smoothing diffuses the deviation
from the hull normal rather than the normal itself, which caps how far the
result can stray from the search cone.
"""

from dataclasses import dataclass

import numpy as np

from .backend import get_kernels
from .camera import Camera
from .envmap import EnvironmentMap
from .errors import ConfigError, DataError
from .optics import NormalMapPair, exit_tir_mask

# supplementary-table ring spreads by view count
_TABLE = {5: 25.0, 10: 15.0, 20: 10.0}


@dataclass(frozen=True)
class AngleSchedule:
    thetas_deg: np.ndarray
    phis_deg: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.thetas_deg, dtype=np.float64).reshape(-1)
        p = np.asarray(self.phis_deg, dtype=np.float64).reshape(-1)
        if len(t) != len(p) or len(t) < 1:
            raise DataError("theta/phi lists must be equal length and non-empty")
        t.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "thetas_deg", t)
        object.__setattr__(self, "phis_deg", p)

    @property
    def count(self):
        return len(self.thetas_deg)

    @property
    def max_theta_deg(self):
        return float(self.thetas_deg.max())


def make_schedule(count=4, spread_deg=15.0):
    """Apex sample plus an evenly-spaced ring at ``spread_deg``."""
    if count < 1:
        raise ConfigError("schedule needs at least one sample")
    thetas = [0.0] + [float(spread_deg)] * (count - 1)
    phis = [0.0] + [360.0 * i / (count - 1) for i in range(count - 1)]
    return AngleSchedule(np.array(thetas[:count]), np.array(phis[:count]))


def angle_schedule_for_views(n_views, calibration_errors_deg=None, count=4):
    """Ring spread for a view count: the published table at 5/10/20 views,
    1/V-linear interpolation clamped to [10, 25] degrees elsewhere, or the
    85th percentile of a supplied hull-normal error sample."""
    if n_views < 2:
        raise ValueError(f"need at least 2 views, got {n_views}")
    if calibration_errors_deg is not None:
        spread = float(np.percentile(np.asarray(calibration_errors_deg, dtype=np.float64), 85))
        return make_schedule(count, spread)
    if n_views in _TABLE:
        return make_schedule(count, _TABLE[n_views])
    x = 1.0 / float(n_views)
    xs = np.array([1.0 / 20.0, 1.0 / 10.0, 1.0 / 5.0])
    ys = np.array([10.0, 15.0, 25.0])
    spread = float(np.clip(np.interp(x, xs, ys), 10.0, 25.0))
    return make_schedule(count, spread)


_FALLBACK_UP = np.array([1.0, 0.0, 0.0])


def local_frame(normal, up):
    """Right-handed orthonormal frame with Z along the normal.

    Falls back to a fixed alternate up vector when ``up`` is within 1e-6 of
    parallel; the flag reports that.
    """
    z = np.asarray(normal, dtype=np.float64).reshape(3)
    u = np.asarray(up, dtype=np.float64).reshape(3)
    used_fallback = False
    if abs(float(u @ z)) > 1.0 - 1e-6:
        u = _FALLBACK_UP if abs(z[0]) < 1.0 - 1e-6 else np.array([0.0, 1.0, 0.0])
        used_fallback = True
    y = u - float(u @ z) * z
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    return x, y, z, used_fallback


def sample_normals(normal, schedule: AngleSchedule, up):
    """The schedule's candidate directions around one normal."""
    x, y, z, _ = local_frame(normal, up)
    t = np.radians(schedule.thetas_deg)
    p = np.radians(schedule.phis_deg)
    return (
        np.outer(np.cos(p) * np.sin(t), x)
        + np.outer(np.sin(p) * np.sin(t), y)
        + np.outer(np.cos(t), z)
    )


def _frames_for_map(normals, up):
    """Vectorized local frames for an (N, 3) normal array."""
    z = normals
    u = np.broadcast_to(up, z.shape).copy()
    par = np.abs(np.einsum("ij,j->i", z, up)) > 1.0 - 1e-6
    if np.any(par):
        alt = np.where(np.abs(z[par, 0:1]) < 1.0 - 1e-6, _FALLBACK_UP, np.array([0.0, 1.0, 0.0]))
        u[par] = alt
    y = u - np.einsum("ij,ij->i", u, z)[:, None] * z
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    x = np.cross(y, z)
    return x, y, z


def candidate_maps(normals, schedule: AngleSchedule, up):
    """(N, K, 3) candidates for an (N, 3) normal array."""
    x, y, z = _frames_for_map(normals, up)
    t = np.radians(schedule.thetas_deg)
    p = np.radians(schedule.phis_deg)
    a = (np.cos(p) * np.sin(t))[None, :, None]
    b = (np.sin(p) * np.sin(t))[None, :, None]
    c = np.cos(t)[None, :, None]
    return a * x[:, None, :] + b * y[:, None, :] + c * z[:, None, :]


@dataclass(frozen=True)
class CostVolumeConfig:
    tau: float = 0.05  # soft-min temperature, relative to each pixel's cost range
    # the first-surface marginal gets its own (softer) temperature: first
    # normals start out more reliable than second normals, and because the
    # candidate ring is symmetric, near-uniform weights reproduce the hull
    # normal, so a soft first marginal only moves on decisive evidence
    tau_first: float = 1.0
    tv_weight: float = 0.1
    tv_iters: int = 30
    tir_penalty: float = 2.0
    # evidence gate: keep the hull pair unless the best candidate beats the
    # hull pair's own cost by this relative margin (0 disables the gate)
    gate_ratio: float = 0.5


@dataclass(frozen=True)
class SearchResult:
    pair: NormalMapPair
    cost: np.ndarray  # (H, W) selected-candidate cost
    best_first: np.ndarray  # (H, W) argmin candidate index for the first normal
    best_second: np.ndarray
    schedule: AngleSchedule


def search_normals(image, env: EnvironmentMap, hull_pair: NormalMapPair, camera: Camera,
                   ior, schedule: AngleSchedule, config: CostVolumeConfig = CostVolumeConfig()):
    """Cost-volume search: soft-min over K x K candidate pairs per pixel,
    then bounded deviation smoothing."""
    h, w = hull_pair.shape
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (h, w, 3):
        raise DataError("image dimensions must match the hull maps")
    k = get_kernels()
    dirs = camera.rays()
    valid = hull_pair.valid.reshape(-1)
    n1 = hull_pair.n_first.reshape(-1, 3)
    n2 = hull_pair.n_second.reshape(-1, 3)
    up = camera.up_world()
    c1 = np.ascontiguousarray(candidate_maps(n1, schedule, up))
    c2 = np.ascontiguousarray(candidate_maps(n2, schedule, up))
    cost = k.candidate_costs(
        env.data, np.ascontiguousarray(image.reshape(-1, 3)), dirs, c1, c2,
        valid.astype(np.uint8), float(ior), float(config.tir_penalty),
    )
    n = h * w
    kk = schedule.count
    flat = cost.reshape(n, kk * kk)
    amin = np.argmin(flat, axis=1)
    bi1 = amin // kk
    bi2 = amin % kk
    cmin = flat[np.arange(n), amin]
    crange = flat.max(axis=1) - cmin

    def softmin_weights(tau_rel):
        tau_px = tau_rel * crange
        hard = tau_px <= 1e-12
        weights = np.zeros_like(flat)
        soft = ~hard
        if np.any(soft):
            z = -(flat[soft] - cmin[soft, None]) / tau_px[soft, None]
            e = np.exp(z)
            weights[soft] = e / e.sum(axis=1, keepdims=True)
        weights[hard] = 0.0
        weights[hard, amin[hard]] = 1.0
        return weights.reshape(n, kk, kk)

    w1 = softmin_weights(config.tau_first).sum(axis=2)
    w2 = softmin_weights(config.tau).sum(axis=1)
    out1 = np.einsum("nk,nkj->nj", w1, c1)
    out2 = np.einsum("nk,nkj->nj", w2, c2)
    out1 /= np.maximum(np.linalg.norm(out1, axis=1, keepdims=True), 1e-12)
    out2 /= np.maximum(np.linalg.norm(out2, axis=1, keepdims=True), 1e-12)
    if config.gate_ratio > 0:
        hull_cost = cost[:, 0, 0].reshape(n)
        keep_hull = cmin >= (1.0 - config.gate_ratio) * hull_cost
        out1[keep_hull] = n1[keep_hull]
        out2[keep_hull] = n2[keep_hull]
    out1[~valid] = 0.0
    out2[~valid] = 0.0

    vgrid = hull_pair.valid
    out1 = _smooth_deviation(out1.reshape(h, w, 3), hull_pair.n_first, vgrid, config)
    out2 = _smooth_deviation(out2.reshape(h, w, 3), hull_pair.n_second, vgrid, config)

    dirs_grid = dirs.reshape(h, w, 3)
    tir = exit_tir_mask(dirs_grid, out1, out2, ior) & vgrid
    pair = NormalMapPair(out1, out2, vgrid, tir)
    return SearchResult(
        pair=pair,
        cost=cmin.reshape(h, w),
        best_first=bi1.reshape(h, w),
        best_second=bi2.reshape(h, w),
        schedule=schedule,
    )


def _smooth_deviation(normals, anchor, valid, config: CostVolumeConfig):
    """Red-black diffusion of (normal - anchor); averaging never grows the
    deviation, so the output stays within the search cone plus a small
    renormalization slack."""
    if config.tv_iters <= 0 or config.tv_weight <= 0:
        return normals
    h, w = valid.shape
    dev = np.where(valid[..., None], normals - anchor, 0.0)
    vf = valid.astype(np.float64)
    rows, cols = np.mgrid[0:h, 0:w]
    colors = ((rows + cols) % 2).astype(bool)
    lam = float(config.tv_weight)
    for it in range(int(config.tv_iters)):
        nb_sum = np.zeros_like(dev)
        nb_cnt = np.zeros((h, w))
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            src = np.zeros_like(dev)
            cnt = np.zeros((h, w))
            rs = slice(max(dr, 0), h + min(dr, 0))
            rd = slice(max(-dr, 0), h + min(-dr, 0))
            cs = slice(max(dc, 0), w + min(dc, 0))
            cd = slice(max(-dc, 0), w + min(-dc, 0))
            src[rd, cd] = dev[rs, cs] * vf[rs, cs, None]
            cnt[rd, cd] = vf[rs, cs]
            nb_sum += src
            nb_cnt += cnt
        upd = valid & (nb_cnt > 0) & (colors == bool(it % 2))
        mean = nb_sum[upd] / nb_cnt[upd][:, None]
        dev[upd] = dev[upd] + lam * (mean - dev[upd])
    out = anchor + dev
    lens = np.linalg.norm(out, axis=-1, keepdims=True)
    out = out / np.where(lens > 1e-12, lens, 1.0)
    return np.where(valid[..., None], out, 0.0)
