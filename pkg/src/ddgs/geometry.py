"""Cone-beam camera model, rigid poses and screen-space projection.

Conventions
-----------
* Quaternions are ``(w, x, y, z)``.
* A :class:`Pose` maps world to camera: ``x_cam = R @ x_world + t``.
* Camera looks down ``+z``; pixel ``(col, row)`` has its center at image
  coordinates ``(col, row)`` and the ray through it has camera-frame direction
  ``((col - cx) / f, (row - cy) / f, 1)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

Z_NEAR = 1.0  # mm
EPS_LOWPASS = 0.3  # px^2


class BehindCameraError(ValueError):
    pass


def _as_scipy(q) -> Rotation:
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w])


def _from_scipy(r: Rotation) -> np.ndarray:
    x, y, z, w = r.as_quat()
    q = np.array([w, x, y, z])
    return q if q[0] >= 0 else -q


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions; input is normalized first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_to_rotmat_vjp(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Pull a (..., 3, 3) gradient on ``quat_to_rotmat(q)`` back to raw ``q``.

    Includes the normalization Jacobian, so the result is tangent to the
    unit sphere at ``q / |q|``.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / norm
    w, x, y, z = np.moveaxis(u, -1, 0)
    g = grad_r
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    gu = np.stack([gw, gx, gy, gz], axis=-1)
    # d(q/|q|)/dq = (I - u u^T) / |q|
    return (gu - u * np.sum(gu * u, axis=-1, keepdims=True)) / norm


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not n > 0 or not np.all(np.isfinite(q)):
            raise ValueError("rotation quaternion must be finite and non-zero")
        q = q / n
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_matrix(cls, r: np.ndarray, t) -> "Pose":
        return cls(_from_scipy(Rotation.from_matrix(r)), t)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def camera_center(self) -> np.ndarray:
        """Source position in world coordinates."""
        return -self.matrix.T @ self.translation

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.matrix.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        r = self.matrix @ other.matrix
        return Pose.from_matrix(r, self.matrix @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        r = self.matrix.T
        return Pose.from_matrix(r, -r @ self.translation)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


@dataclass(frozen=True)
class Intrinsics:
    focal_px: float
    width: int
    height: int
    principal: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.focal_px > 0:
            raise ValueError("focal_px must be > 0")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("width and height must be ≥ 1")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "focal_px", float(self.focal_px))
        if self.principal is None:
            object.__setattr__(self, "principal", (0.5 * (self.width - 1), 0.5 * (self.height - 1)))
        else:
            object.__setattr__(self, "principal", tuple(float(p) for p in self.principal))


@dataclass(frozen=True)
class CameraView:
    pose: Pose
    intrinsics: Intrinsics

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def with_pose(self, pose: Pose) -> "CameraView":
        return CameraView(pose, self.intrinsics)

    def pixel_rays(self) -> np.ndarray:
        """Unit world-space ray directions, shape (H, W, 3)."""
        k = self.intrinsics
        cx, cy = k.principal
        cols, rows = np.meshgrid(np.arange(k.width), np.arange(k.height))
        d = np.stack([(cols - cx) / k.focal_px, (rows - cy) / k.focal_px, np.ones(cols.shape)], axis=-1)
        d = d @ self.pose.matrix  # camera -> world is R^T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_dict(self) -> dict:
        k = self.intrinsics
        return {
            **self.pose.to_dict(),
            "focal_px": k.focal_px,
            "width": k.width,
            "height": k.height,
            "principal": list(k.principal),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraView":
        return cls(
            Pose(d["rotation"], d["translation"]),
            Intrinsics(d["focal_px"], d["width"], d["height"], d.get("principal")),
        )


# -- single-point operations ----------------------------------------------------


def project_point(view: CameraView, mu) -> tuple[np.ndarray, float]:
    x = view.pose.apply(np.asarray(mu, dtype=np.float64))
    if x[2] <= Z_NEAR:
        raise BehindCameraError("behind camera")
    k = view.intrinsics
    uv = np.asarray(k.principal) + k.focal_px * x[:2] / x[2]
    return uv, float(x[2])


def perspective_jacobian(x_cam: np.ndarray, focal: float) -> np.ndarray:
    """(..., 2, 3) Jacobian of the pixel projection at camera-frame points."""
    x, y, z = np.moveaxis(np.asarray(x_cam, dtype=np.float64), -1, 0)
    j = np.zeros(np.shape(x) + (2, 3))
    j[..., 0, 0] = focal / z
    j[..., 1, 1] = focal / z
    j[..., 0, 2] = -focal * x / (z * z)
    j[..., 1, 2] = -focal * y / (z * z)
    return j


def project_covariance(view: CameraView, mu, sigma) -> np.ndarray:
    x = view.pose.apply(np.asarray(mu, dtype=np.float64))
    if x[2] <= Z_NEAR:
        raise BehindCameraError("behind camera")
    r = view.pose.matrix
    j = perspective_jacobian(x, view.intrinsics.focal_px)
    cov = j @ r @ np.asarray(sigma, dtype=np.float64) @ r.T @ j.T
    cov = 0.5 * (cov + cov.T)
    return cov + EPS_LOWPASS * np.eye(2)


def ray_angles(view: CameraView, mu) -> tuple[float, float]:
    d = np.asarray(mu, dtype=np.float64) - view.pose.camera_center
    n = np.linalg.norm(d)
    if not n > 0:
        raise ValueError("zero-length direction")
    return directions_to_angles(d / n)


def directions_to_angles(d: np.ndarray):
    d = np.asarray(d, dtype=np.float64)
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    phi = np.arctan2(d[..., 1], d[..., 0])
    if d.ndim == 1:
        return float(theta), float(phi)
    return theta, phi


def angles_to_directions(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def rotvec_to_matrix(w) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=np.float64)).as_matrix()


def perturb_pose(base: Pose, delta) -> Pose:
    """Left-compose ``(axis-angle, translation)`` onto ``base`` in the camera frame.

    ``x_cam' = R_delta @ x_cam + t_delta``.
    """
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    r_d = rotvec_to_matrix(delta[:3])
    return Pose.from_matrix(r_d @ base.matrix, r_d @ base.translation + delta[3:])


def rotation_angle_deg(a: Pose, b: Pose) -> float:
    """Angle of the relative rotation ``b^-1 ∘ a``."""
    rel = _as_scipy(b.rotation).inv() * _as_scipy(a.rotation)
    return float(np.degrees(rel.magnitude()))


# -- view generation ------------------------------------------------------------

# Camera axes at orbit angle 0: x_cam = +x_world, y_cam = -z_world, z_cam = +y_world.
_R0 = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


def orbit_pose(angle_deg: float, sod_mm: float, isocenter=(0.0, 0.0, 0.0)) -> Pose:
    """Source on a circle of radius ``sod_mm`` about the world z axis, aimed at the isocenter."""
    rz = Rotation.from_euler("z", angle_deg, degrees=True).as_matrix()
    r = _R0 @ rz.T
    c = np.asarray(isocenter, dtype=np.float64) + rz @ np.array([0.0, -sod_mm, 0.0])
    return Pose.from_matrix(r, -r @ c)


def orbit_views(angles_deg, sod_mm: float, intrinsics: Intrinsics, isocenter=(0.0, 0.0, 0.0)) -> list[CameraView]:
    return [CameraView(orbit_pose(a, sod_mm, isocenter), intrinsics) for a in angles_deg]


def even_angles(n: int, range_deg=(-90.0, 90.0)) -> np.ndarray:
    return np.linspace(range_deg[0], range_deg[1], int(n))


def random_angles(n: int, seed: int, range_deg=(-90.0, 90.0)) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(range_deg[0], range_deg[1], int(n))


def save_views(views, path) -> None:
    Path(path).write_text(json.dumps({"views": [v.to_dict() for v in views]}, indent=2) + "\n")


def load_views(path) -> list[CameraView]:
    data = json.loads(Path(path).read_text())
    items = data["views"] if isinstance(data, dict) else data
    return [CameraView.from_dict(d) for d in items]
