"""Snell/Fresnel physics and the two-bounce rendering layer.

Radiance through a pixel is modeled from just the two surface normals met by
the backprojected ray: one Fresnel-weighted environment lookup along the
mirror direction, and one along the doubly-refracted exit direction,
attenuated at both interfaces. Pixels whose exit refraction has a negative
radicand are flagged total-internal-reflection and carry no transmitted
term.

``eta`` arguments are always the ratio n_from / n_to of the media on either
side of the interface, so entering the object uses ``1/ior`` and leaving it
uses ``ior``. Cosines are taken unsigned, which makes every operation
insensitive to the stored orientation of interpolated normals.
"""

import math
from dataclasses import dataclass

import numpy as np

from .backend import get_kernels
from .camera import Camera
from .envmap import EnvironmentMap
from .errors import DataError


def refract(l_i, normal, eta):
    """Transmitted unit direction by vector Snell's law; None on TIR."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    l = np.asarray(l_i, dtype=np.float64).reshape(3)
    n = np.asarray(normal, dtype=np.float64).reshape(3)
    c = float(l @ n)
    if c > 0:
        n = -n
        c = -c
    ci = -c
    rad = 1.0 - eta * eta * (1.0 - ci * ci)
    if rad < 0.0:
        return None
    ct = math.sqrt(rad)
    t = eta * l + (eta * ci - ct) * n
    return t / np.linalg.norm(t)


def reflect(l_i, normal):
    l = np.asarray(l_i, dtype=np.float64).reshape(3)
    n = np.asarray(normal, dtype=np.float64).reshape(3)
    r = l - 2.0 * float(l @ n) * n
    return r / np.linalg.norm(r)


def fresnel(l_i, l_t, normal, eta):
    """Unpolarized reflectance from incident/transmitted directions."""
    l = np.asarray(l_i, dtype=np.float64).reshape(3)
    t = np.asarray(l_t, dtype=np.float64).reshape(3)
    n = np.asarray(normal, dtype=np.float64).reshape(3)
    ci = abs(float(l @ n))
    ct = abs(float(t @ n))
    rp = (ci - eta * ct) / (ci + eta * ct)
    rs = (eta * ci - ct) / (eta * ci + ct)
    return float(min(max(0.5 * (rp * rp + rs * rs), 0.0), 1.0))


def critical_angle(ior):
    """Internal incidence angle (radians) beyond which exit refraction fails."""
    return math.asin(1.0 / ior)


def exit_tir_mask(dirs, n_first, n_second, ior):
    """Where the exit refraction's radicand goes negative, given per-pixel
    camera ray directions and both surface normals (any orientation)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n1 = np.asarray(n_first, dtype=np.float64)
    n2 = np.asarray(n_second, dtype=np.float64)
    eta = 1.0 / ior
    c1 = np.einsum("...k,...k->...", dirs, n1)
    m1 = np.where((c1 > 0)[..., None], -n1, n1)
    ci = np.abs(c1)
    ct = np.sqrt(np.maximum(1.0 - eta * eta * (1.0 - ci * ci), 0.0))
    lm = eta * dirs + (eta * ci - ct)[..., None] * m1
    ci2 = np.abs(np.einsum("...k,...k->...", lm, n2))
    return (1.0 - ior * ior * (1.0 - ci2 * ci2)) < 0.0


@dataclass(frozen=True)
class NormalMapPair:
    """First/second-surface unit normal maps with validity and TIR masks."""

    n_first: np.ndarray  # (H, W, 3) world frame
    n_second: np.ndarray
    valid: np.ndarray  # (H, W) bool, inside silhouette
    tir: np.ndarray  # (H, W) bool, subset of valid

    def __post_init__(self):
        n1 = np.ascontiguousarray(self.n_first, dtype=np.float64)
        n2 = np.ascontiguousarray(self.n_second, dtype=np.float64)
        valid = np.ascontiguousarray(self.valid, dtype=bool)
        tir = np.ascontiguousarray(self.tir, dtype=bool)
        if n1.shape != n2.shape or n1.shape[:2] != valid.shape or valid.shape != tir.shape:
            raise DataError("normal map shapes disagree")
        if np.any(tir & ~valid):
            raise DataError("TIR mask must be a subset of the valid mask")
        for n in (n1, n2):
            lens = np.linalg.norm(n[valid], axis=-1)
            if lens.size and np.max(np.abs(lens - 1.0)) > 1e-6:
                raise DataError("normals must be unit length on valid pixels")
        for a in (n1, n2, valid, tir):
            a.flags.writeable = False
        object.__setattr__(self, "n_first", n1)
        object.__setattr__(self, "n_second", n2)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "tir", tir)

    @property
    def shape(self):
        return self.valid.shape

    def with_normals(self, n_first, n_second, tir=None):
        if tir is None:
            tir = self.tir
        return NormalMapPair(n_first, n_second, self.valid, tir)


@dataclass(frozen=True)
class RenderOutput:
    reflected: np.ndarray  # (H, W, 3)
    transmitted: np.ndarray  # zero on TIR pixels
    tir: np.ndarray  # (H, W) bool

    def total(self):
        return self.reflected + self.transmitted


def two_bounce_radiance(env: EnvironmentMap, dirs, n_first, n_second, ior):
    """Flat-array core of the rendering layer: (reflected, transmitted, tir)."""
    k = get_kernels()
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n1 = np.ascontiguousarray(n_first, dtype=np.float64).reshape(-1, 3)
    n2 = np.ascontiguousarray(n_second, dtype=np.float64).reshape(-1, 3)
    valid = np.ones(len(dirs), dtype=np.uint8)
    ir, it, tir = k.render_pixels(env.data, dirs, n1, n2, valid, float(ior))
    return ir, it, tir.astype(bool)


def render_layer(env: EnvironmentMap, normals: NormalMapPair, camera: Camera, ior: float):
    """Two-bounce image formation from normal maps under a distant environment."""
    if ior <= 1.0:
        raise ValueError(f"ior must exceed 1, got {ior}")
    h, w = normals.shape
    if (camera.height, camera.width) != (h, w):
        raise DataError("normal map dimensions must match the camera")
    k = get_kernels()
    dirs = camera.rays()
    ir, it, tir = k.render_pixels(
        env.data,
        dirs,
        normals.n_first.reshape(-1, 3),
        normals.n_second.reshape(-1, 3),
        normals.valid.reshape(-1).astype(np.uint8),
        float(ior),
    )
    return RenderOutput(
        reflected=ir.reshape(h, w, 3),
        transmitted=it.reshape(h, w, 3),
        tir=(tir.reshape(h, w).astype(bool)) & normals.valid,
    )


def error_map(image, out: RenderOutput, mask):
    """Channel-wise |observed - rendered|, zeroed outside the mask."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if image.shape[:2] != mask.shape:
        raise DataError("image and mask dimensions disagree")
    err = np.abs(image - out.total())
    err[~mask] = 0.0
    return err


def error_luminance(err):
    return np.mean(err, axis=-1)


@dataclass(frozen=True)
class RenderLossResult:
    loss: float
    grad_first: np.ndarray  # (H, W, 3), tangent to n_first, zero on TIR/invalid
    grad_second: np.ndarray
    tir: np.ndarray  # (H, W) bool
    loss_map: np.ndarray  # (H, W) per-pixel squared error


def render_loss_and_grad(image, env: EnvironmentMap, normals: NormalMapPair, camera: Camera, ior):
    """Squared rendering error over non-TIR valid pixels + analytic normal gradients.

    The gradients chain through reflection, refraction, the Fresnel terms and
    the bilinear environment lookup, and are projected onto each normal's
    tangent plane. The scalar loss is reduced in numpy in row-major order, so
    it does not depend on kernel thread count.
    """
    if ior <= 1.0:
        raise ValueError(f"ior must exceed 1, got {ior}")
    h, w = normals.shape
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (h, w, 3):
        raise DataError("image dimensions must match the normal maps")
    k = get_kernels()
    dirs = camera.rays()
    loss_px, g1, g2, tir = k.render_loss_grad(
        env.data,
        np.ascontiguousarray(image.reshape(-1, 3)),
        dirs,
        normals.n_first.reshape(-1, 3),
        normals.n_second.reshape(-1, 3),
        normals.valid.reshape(-1).astype(np.uint8),
        float(ior),
    )
    return RenderLossResult(
        loss=float(np.sum(loss_px)),
        grad_first=g1.reshape(h, w, 3),
        grad_second=g2.reshape(h, w, 3),
        tir=tir.reshape(h, w).astype(bool) & normals.valid,
        loss_map=loss_px.reshape(h, w),
    )


@dataclass(frozen=True)
class NormalErrorStats:
    sq_loss: float
    first_median_deg: float
    first_mean_deg: float
    second_median_deg: float
    second_mean_deg: float


def angular_errors_deg(a, b):
    cosv = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cosv))


def normal_angle_loss(pred: NormalMapPair, gt: NormalMapPair):
    """Summed squared normal differences plus per-map angular statistics."""
    if pred.shape != gt.shape or not np.array_equal(pred.valid, gt.valid):
        raise ValueError("normal map pairs must share the same valid mask")
    m = pred.valid
    d1 = pred.n_first[m] - gt.n_first[m]
    d2 = pred.n_second[m] - gt.n_second[m]
    sq = float(np.sum(d1 * d1) + np.sum(d2 * d2))
    a1 = angular_errors_deg(pred.n_first[m], gt.n_first[m])
    a2 = angular_errors_deg(pred.n_second[m], gt.n_second[m])
    return NormalErrorStats(
        sq_loss=sq,
        first_median_deg=float(np.median(a1)) if a1.size else 0.0,
        first_mean_deg=float(np.mean(a1)) if a1.size else 0.0,
        second_median_deg=float(np.median(a2)) if a2.size else 0.0,
        second_mean_deg=float(np.mean(a2)) if a2.size else 0.0,
    )
