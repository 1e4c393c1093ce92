"""Pinhole cameras and the pixel/world coordinate conventions.

Conventions used everywhere in the package:

* world frame is right-handed;
* camera frame: +Z forward, +Y down, +X right; the stored rotation and
  translation map camera coordinates to world coordinates;
* pixel (u, v) has u along columns and v along rows, origin at the
  top-left, and integer coordinates landing exactly on sample centers, so
  map entry ``[r, c]`` lives at continuous (u=c, v=r).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


def normalized(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / n


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            d = d / n
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-8):
            raise DataError("camera rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise DataError("camera rotation must have determinant +1")
        if self.fx <= 0 or self.fy <= 0:
            raise DataError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise DataError("principal point must lie inside the image")
        R = R.copy()
        t = t.copy()
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self):
        """Camera center in world coordinates."""
        return self.translation

    @property
    def forward(self):
        return self.rotation[:, 2]

    def up_world(self):
        """Bottom-to-top direction of the image plane, in world coordinates."""
        return -self.rotation[:, 1]

    def view_to_world_point(self, p):
        p = np.asarray(p, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def world_to_view_point(self, p):
        p = np.asarray(p, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def view_to_world_dir(self, d):
        return np.asarray(d, dtype=np.float64) @ self.rotation.T

    def world_to_view_dir(self, d):
        return np.asarray(d, dtype=np.float64) @ self.rotation

    def ray(self, u, v):
        """Backproject a continuous pixel coordinate into a world-space ray."""
        u = min(max(float(u), 0.0), self.width - 1.0)
        v = min(max(float(v), 0.0), self.height - 1.0)
        d = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
        return Ray(self.center, self.rotation @ d)

    def rays(self, uv=None):
        """Directions for a batch of pixel coordinates (default: the full grid).

        Returns an (N, 3) array of unit world directions; origins are all at
        the camera center.
        """
        if uv is None:
            vv, uu = np.mgrid[0 : self.height, 0 : self.width]
            uv = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
        uv = np.asarray(uv, dtype=np.float64)
        d = np.empty((uv.shape[0], 3))
        d[:, 0] = (uv[:, 0] - self.cx) / self.fx
        d[:, 1] = (uv[:, 1] - self.cy) / self.fy
        d[:, 2] = 1.0
        return normalized(d @ self.rotation.T)

    def project(self, p):
        """Project a world point; ``None`` when behind the camera or out of frame."""
        x, y, z = self.world_to_view_point(p)
        if z <= 0:
            return None
        u = self.fx * x / z + self.cx
        v = self.fy * y / z + self.cy
        if not (0.0 <= u <= self.width - 1.0 and 0.0 <= v <= self.height - 1.0):
            return None
        return (u, v), z

    def project_many(self, points):
        """Vectorized projection: returns (uv (N,2), depth (N), valid (N))."""
        pc = self.world_to_view_point(points)
        z = pc[:, 2]
        safe = np.where(z > 0, z, 1.0)
        u = self.fx * pc[:, 0] / safe + self.cx
        v = self.fy * pc[:, 1] / safe + self.cy
        valid = (
            (z > 0)
            & (u >= 0.0)
            & (u <= self.width - 1.0)
            & (v >= 0.0)
            & (v <= self.height - 1.0)
        )
        return np.stack([u, v], axis=1), z, valid

    def view_cosine(self, points):
        """Cosine between the ray through each point and the optical axis, clamped to [0, 1]."""
        d = np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center
        d = normalized(d)
        return np.clip(d @ self.forward, 0.0, 1.0)

    def to_dict(self):
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "R": [float(x) for x in self.rotation.reshape(9)],
            "t": [float(x) for x in self.translation],
            "convention": "cam2world",
        }

    @classmethod
    def from_dict(cls, d):
        required = ("width", "height", "fx", "fy", "cx", "cy", "R", "t")
        for k in required:
            if k not in d:
                raise DataError(f"camera JSON missing key {k!r}")
        if d.get("convention", "cam2world") != "cam2world":
            raise DataError(f"unsupported camera convention {d['convention']!r}")
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            rotation=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["t"], dtype=np.float64),
        )


def look_at(position, target, up_hint=(0.0, 1.0, 0.0), width=256, height=256, fov_deg=45.0):
    """Build a camera at ``position`` looking at ``target``.

    ``up_hint`` is the world direction that should point towards the top of
    the image. With the +Y-down camera convention the middle rotation column
    is the projection of ``-up_hint`` onto the plane orthogonal to forward.
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = normalized(target - position)
    up = np.asarray(up_hint, dtype=np.float64)
    down = -(up - np.dot(up, fwd) * fwd)
    n = np.linalg.norm(down)
    if n < 1e-9:
        up = np.array([1.0, 0.0, 0.0]) if abs(fwd[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        down = -(up - np.dot(up, fwd) * fwd)
        n = np.linalg.norm(down)
    down = down / n
    right = np.cross(down, fwd)
    R = np.stack([right, down, fwd], axis=1)
    f = 0.5 * width / np.tan(np.radians(fov_deg) * 0.5)
    return Camera(
        width=width,
        height=height,
        fx=f,
        fy=f,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        rotation=R,
        translation=position,
    )


def rotation_about_axis(axis, angle_rad):
    """Rodrigues rotation matrix."""
    a = normalized(np.asarray(axis, dtype=np.float64))
    x, y, z = a
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )
