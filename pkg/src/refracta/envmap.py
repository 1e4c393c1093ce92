"""Equirectangular environment maps: distant illumination indexed by direction.

Mapping convention (shared verbatim by the numba kernels):

    u = atan2(dir.x, -dir.z) / (2 pi) + 0.5
    v = arccos(clamp(dir.y, -1, 1)) / pi

with bilinear filtering, horizontal wrap and vertical clamp; texel centers
sit at (i + 0.5) / size.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class EnvironmentMap:
    data: np.ndarray  # (H, W, 3) float64 linear radiance

    def __post_init__(self):
        d = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if d.ndim != 3 or d.shape[2] != 3:
            raise DataError("environment map must be (H, W, 3)")
        if d.shape[1] != 2 * d.shape[0]:
            raise DataError("equirectangular map needs width = 2 x height")
        if not np.isfinite(d).all() or (d < 0).any():
            raise DataError("environment radiance must be finite and non-negative")
        d.flags.writeable = False
        object.__setattr__(self, "data", d)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    def sample(self, dirs):
        """Bilinear radiance lookup for (..., 3) unit directions."""
        d = np.asarray(dirs, dtype=np.float64)
        squeeze = d.ndim == 1
        d = d.reshape(-1, 3)
        out = sample_equirect(self.data, d)
        return out[0] if squeeze else out.reshape(np.shape(dirs))

    def rotated_yaw_texels(self, shift):
        """Map rotated about +Y by an exact multiple of the texel width.

        A shift of ``s`` texels corresponds to a yaw of ``2 pi s / width``;
        because the grid maps onto itself the resampling is exact.
        """
        return EnvironmentMap(np.roll(self.data, int(shift), axis=1))


def direction_to_uv(dirs):
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    u = np.arctan2(d[:, 0], -d[:, 2]) / (2.0 * np.pi) + 0.5
    v = np.arccos(np.clip(d[:, 1], -1.0, 1.0)) / np.pi
    return u, v


def uv_to_direction(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    theta = v * np.pi
    phi = (u - 0.5) * 2.0 * np.pi
    sy = np.sin(theta)
    return np.stack([sy * np.sin(phi), np.cos(theta), -sy * np.cos(phi)], axis=-1)


def sample_equirect(data, dirs):
    """Vectorized bilinear lookup; ``dirs`` is (N, 3) and need not be exactly unit."""
    h, w = data.shape[0], data.shape[1]
    n = np.linalg.norm(dirs, axis=1, keepdims=True)
    d = dirs / np.where(n > 0, n, 1.0)
    u, v = direction_to_uv(d)
    x = u * w - 0.5
    y = np.clip(v * h - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    x1 = (x0 + 1) % w
    x0 = x0 % w
    y1 = np.minimum(y0 + 1, h - 1)
    t00 = data[y0, x0]
    t10 = data[y0, x1]
    t01 = data[y1, x0]
    t11 = data[y1, x1]
    wx = fx[:, None]
    wy = fy[:, None]
    return (
        t00 * (1 - wx) * (1 - wy)
        + t10 * wx * (1 - wy)
        + t01 * (1 - wx) * wy
        + t11 * wx * wy
    )


def constant_env(value, height=8):
    data = np.empty((height, 2 * height, 3))
    data[:] = np.asarray(value, dtype=np.float64).reshape(1, 1, -1)
    return EnvironmentMap(data)


def gradient_env(height=64, top=(1.2, 1.1, 1.0), bottom=(0.05, 0.08, 0.12)):
    """Smooth vertical gradient; handy where low within-pixel curvature matters."""
    t = np.linspace(0.0, 1.0, height)[:, None, None]
    top = np.asarray(top, dtype=np.float64).reshape(1, 1, 3)
    bottom = np.asarray(bottom, dtype=np.float64).reshape(1, 1, 3)
    data = np.repeat(top * (1 - t) + bottom * t, 2 * height, axis=1)
    return EnvironmentMap(data)


def blob_env(seed, height=128, blobs=40, sharpness=60.0, base=0.05):
    """Random HDR-ish sky of Gaussian blobs on the sphere.

    Larger ``sharpness`` gives higher angular frequency; used both as pipeline
    illumination and as the 'high frequency' map for cost-volume tests.
    """
    rng = np.random.default_rng(seed)
    w = 2 * height
    vv, uu = np.meshgrid(
        (np.arange(height) + 0.5) / height,
        (np.arange(w) + 0.5) / w,
        indexing="ij",
    )
    dirs = uv_to_direction(uu.ravel(), vv.ravel())
    data = np.full((height * w, 3), float(base))
    centers = rng.normal(size=(blobs, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    colors = rng.uniform(0.2, 3.0, size=(blobs, 3))
    widths = rng.uniform(0.5, 1.5, size=blobs) * sharpness
    for c, col, k in zip(centers, colors, widths):
        data += np.exp(k * (dirs @ c - 1.0))[:, None] * col[None, :]
    return EnvironmentMap(data.reshape(height, w, 3))
