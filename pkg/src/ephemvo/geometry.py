"""Rigid-body transforms, pinhole camera model, and warping machinery.

Conventions used throughout the package:

* A ``Pose`` stores a 3x3 rotation matrix ``R`` and a 3-vector translation
  ``t`` (metres) and acts on points as ``R @ p + t``.
* Twist vectors are ordered ``(translation; rotation)`` and solvers apply
  left-multiplicative updates ``xi <- exp(delta) * xi``.
* Image coordinates put pixel centers at integer coordinates with the origin
  at the top-left pixel; ``u`` is the column, ``v`` the row.
* Points closer to the camera than ``Z_MIN`` (0.1 m) are out of view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

Z_MIN = 0.1

_ORTHO_DRIFT_TOL = 1e-12
_SMALL_ANGLE = 1e-8


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def _orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix via polar decomposition."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


@dataclass(frozen=True)
class Pose:
    """Rigid transform in SE(3): rotation matrix plus translation in metres."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise DataError("pose entries must be finite")
        drift = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
        if drift > _ORTHO_DRIFT_TOL:
            if drift > 1e-6:
                raise DataError(f"rotation is not orthonormal (drift {drift:.3e})")
            rotation = _orthonormalize(rotation)
        if np.linalg.det(rotation) < 0.0:
            raise DataError("rotation has negative determinant (reflection)")
        rotation.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rt(cls, rotation, translation) -> "Pose":
        return cls(np.asarray(rotation, dtype=np.float64), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """Apply ``other`` then ``self``."""
        rotation = self.rotation @ other.rotation
        translation = self.rotation @ other.translation + self.translation
        drift = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
        if drift > _ORTHO_DRIFT_TOL:
            rotation = _orthonormalize(rotation)
        return Pose(rotation, translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -(rt @ self.translation))

    def transform(self, point) -> np.ndarray:
        """Map a single 3-point: ``R @ p + t``."""
        p = np.asarray(point, dtype=np.float64).reshape(3)
        return self.rotation @ p + self.translation

    def transform_many(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def transform_point(g: Pose, p) -> np.ndarray:
    return g.transform(p)


def se3_exp(twist) -> Pose:
    """Exponential map from a (translation; rotation) twist to a Pose."""
    xi = np.asarray(twist, dtype=np.float64).reshape(6)
    rho, w = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    wx = _skew(w)
    wx2 = wx @ wx
    if theta < _SMALL_ANGLE:
        # second-order Taylor expansions of Rodrigues and its integral
        rotation = np.eye(3) + wx + 0.5 * wx2
        v = np.eye(3) + 0.5 * wx + wx2 / 6.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        rotation = np.eye(3) + (s / theta) * wx + ((1.0 - c) / theta**2) * wx2
        v = np.eye(3) + ((1.0 - c) / theta**2) * wx + ((theta - s) / theta**3) * wx2
    return Pose(rotation, v @ rho)


def se3_log(g: Pose) -> np.ndarray:
    """Logarithm map; raises for rotations within 1e-6 of angle pi."""
    r = g.rotation
    cos_theta = np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta > np.pi - 1e-6:
        raise DataError("se3_log undefined near rotation angle pi")
    if theta < _SMALL_ANGLE:
        w = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        wx = _skew(w)
        v_inv = np.eye(3) - 0.5 * wx + (wx @ wx) / 12.0
    else:
        scale = theta / (2.0 * np.sin(theta))
        w = scale * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        wx = _skew(w)
        coeff = (1.0 - theta * np.cos(0.5 * theta) / (2.0 * np.sin(0.5 * theta))) / theta**2
        v_inv = np.eye(3) - 0.5 * wx + coeff * (wx @ wx)
    rho = v_inv @ g.translation
    return np.concatenate([rho, w])


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with a stereo baseline used for the disparity unit."""

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0 and self.baseline > 0):
            raise ConfigError("fx, fy and baseline must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")
        if self.width < 1 or self.height < 1:
            raise ConfigError("image size must be positive")

    def disparity_from_depth(self, z):
        return self.fx * self.baseline / z

    def depth_from_disparity(self, d):
        return self.fx * self.baseline / d

    def scaled(self, factor: float) -> "CameraModel":
        """Camera for an image resampled by ``factor`` (e.g. 0.5 per pyramid level).

        Pixel centers sit at integer coordinates, so downsampling by two maps
        old coordinate u to (u - 0.5) / 2.
        """
        return CameraModel(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5,
            cy=(self.cy + 0.5) * factor - 0.5,
            baseline=self.baseline,
            width=max(1, int(self.width * factor)),
            height=max(1, int(self.height * factor)),
        )


@dataclass(frozen=True)
class Feature:
    """Sparse measurement: sub-pixel image location plus disparity."""

    u: float
    v: float
    d: float

    def __post_init__(self):
        if not self.d > 0:
            raise DataError("feature disparity must be positive")


def project(cam: CameraModel, p) -> tuple[float, float, float] | None:
    """Project a camera-frame point to (u, v, disparity); None if out of view."""
    x, y, z = np.asarray(p, dtype=np.float64).reshape(3)
    if z <= Z_MIN:
        return None
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    if not (0.0 <= u <= cam.width - 1 and 0.0 <= v <= cam.height - 1):
        return None
    return u, v, cam.fx * cam.baseline / z


def back_project(cam: CameraModel, u: float, v: float, d: float) -> np.ndarray:
    """Invert ``project``: pixel plus disparity to a camera-frame point."""
    z = cam.fx * cam.baseline / d
    x = (u - cam.cx) * z / cam.fx
    y = (v - cam.cy) * z / cam.fy
    return np.array([x, y, z])


def project_many(cam: CameraModel, points: np.ndarray):
    """Vectorized ``project``.

    Returns (u, v, d, in_view) arrays; u/v/d are only meaningful where
    ``in_view`` is true.
    """
    pts = np.asarray(points, dtype=np.float64)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    safe_z = np.where(z > Z_MIN, z, 1.0)
    u = cam.fx * x / safe_z + cam.cx
    v = cam.fy * y / safe_z + cam.cy
    d = cam.fx * cam.baseline / safe_z
    in_view = (
        (z > Z_MIN)
        & (u >= 0.0)
        & (u <= cam.width - 1)
        & (v >= 0.0)
        & (v <= cam.height - 1)
    )
    return u, v, d, in_view


def back_project_many(cam: CameraModel, u: np.ndarray, v: np.ndarray, d: np.ndarray) -> np.ndarray:
    z = cam.fx * cam.baseline / np.asarray(d, dtype=np.float64)
    x = (np.asarray(u, dtype=np.float64) - cam.cx) * z / cam.fx
    y = (np.asarray(v, dtype=np.float64) - cam.cy) * z / cam.fy
    return np.stack([x, y, z], axis=-1)


def warp(cam: CameraModel, x: Feature, xi: Pose) -> tuple[float, float] | None:
    """Back-project a feature, move it by ``xi``, and reproject.

    Returns the new (u, v) or None when the moved point is out of view.
    """
    p = back_project(cam, x.u, x.v, x.d)
    q = xi.transform(p)
    res = project(cam, q)
    if res is None:
        return None
    return res[0], res[1]


@dataclass
class Trajectory:
    """Timestamped sequence of global camera-to-world poses."""

    timestamps_ns: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        self.timestamps_ns = np.asarray(self.timestamps_ns, dtype=np.int64)
        if len(self.timestamps_ns) != len(self.poses):
            raise DataError("timestamp and pose counts differ")

    def __len__(self) -> int:
        return len(self.poses)

    def matrices(self) -> np.ndarray:
        out = np.empty((len(self.poses), 4, 4))
        for i, p in enumerate(self.poses):
            out[i] = p.matrix()
        return out

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)
