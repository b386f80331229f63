"""Rigid transforms, se(3) twists, pinhole cameras, and ray generation.

Coordinate conventions used throughout the package:

Canonical (world) frame, right-handed:
  - z is up; azimuth is measured from +x toward +y, elevation from the
    xy-plane toward +z.

Camera frame, right-handed, standard computer vision:
  - x right, y down, z forward (along the optical axis into the scene).
  - Extrinsics map world points into this frame: p_cam = R p_world + t.

Image frame:
  - origin top-left, u = (column, row) in pixels, pixel centers at
    half-integer coordinates (pixel (r, c) has center (c + 0.5, r + 0.5)).
  - fov_deg is the vertical field of view; the horizontal one follows from
    the aspect ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi

# Below this rotation angle the exp/log maps switch to series expansions.
SMALL_ANGLE = 1e-8

_ORTHONORMAL_ATOL = 1e-6


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    return a


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric (hat) matrix of a 3-vector."""
    v = _as_vec3(v)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation; composes and applies like a 4x4 matrix."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = _as_vec3(self.translation)
        if not np.allclose(R @ R.T, np.eye(3), atol=_ORTHONORMAL_ATOL):
            raise ValueError("rotation is not orthonormal")
        if not math.isclose(float(np.linalg.det(R)), 1.0, abs_tol=_ORTHONORMAL_ATOL):
            raise ValueError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self.compose(other))(p) = self(other(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or many (..., 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Twist:
    """se(3) tangent element: omega (radians) and v (scene units)."""

    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        o = _as_vec3(self.omega)
        v = _as_vec3(self.v)
        o.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "omega", o)
        object.__setattr__(self, "v", v)

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "Twist":
        x = np.asarray(x, dtype=float).reshape(6)
        return cls(x[:3], x[3:])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: a single vertical FoV plus the image size."""

    fov_deg: float
    width: int
    height: int

    def __post_init__(self):
        if not (0.0 < self.fov_deg < 180.0):
            raise ValueError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")

    @property
    def focal_px(self) -> float:
        """Focal length in pixels (vertical)."""
        return (self.height / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera extrinsics plus pinhole intrinsics."""

    extrinsics: RigidTransform
    intrinsics: CameraIntrinsics

    def center(self) -> np.ndarray:
        """Camera center in the canonical frame."""
        e = self.extrinsics
        return -e.rotation.T @ e.translation

    def optical_axis(self) -> np.ndarray:
        """Unit view direction (camera +z) in the canonical frame."""
        return self.extrinsics.rotation.T @ np.array([0.0, 0.0, 1.0])

    def project(self, points: np.ndarray) -> np.ndarray:
        """Project world points (..., 3) to pixel coordinates (..., 2).

        Points behind the camera produce non-finite or mirrored coordinates;
        callers that care should check depths() first.
        """
        p_cam = self.extrinsics.apply(points)
        f = self.intrinsics.focal_px
        with np.errstate(divide="ignore", invalid="ignore"):
            x = p_cam[..., 0] / p_cam[..., 2] * f + self.intrinsics.width / 2.0
            y = p_cam[..., 1] / p_cam[..., 2] * f + self.intrinsics.height / 2.0
        return np.stack([x, y], axis=-1)

    def depths(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame z of world points (positive = in front)."""
        return self.extrinsics.apply(points)[..., 2]

    def to_json_dict(self) -> dict:
        return {
            "world_to_camera": [float(x) for x in self.extrinsics.matrix().reshape(-1)],
            "fov_deg": float(self.intrinsics.fov_deg),
            "width": int(self.intrinsics.width),
            "height": int(self.intrinsics.height),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CameraPose":
        m = np.array(d["world_to_camera"], dtype=float).reshape(4, 4)
        return cls(
            RigidTransform.from_matrix(m),
            CameraIntrinsics(float(d["fov_deg"]), int(d["width"]), int(d["height"])),
        )


@dataclass(frozen=True)
class Ray:
    """Origin plus unit direction in the canonical frame."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _as_vec3(self.origin)
        d = _as_vec3(self.direction)
        n = float(np.linalg.norm(d))
        if abs(n - 1.0) > 1e-12:
            d = d / n
        o.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(np.asarray(t, dtype=float), self.direction)


def exp_map(t: Twist) -> RigidTransform:
    """Closed-form se(3) exponential (Rodrigues rotation)."""
    omega, v = t.omega, t.v
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    K2 = K @ K
    if theta < SMALL_ANGLE:
        # Series: sin(x)/x -> 1, (1-cos x)/x^2 -> 1/2, (x-sin x)/x^3 -> 1/6.
        R = np.eye(3) + K + 0.5 * K2
        V = np.eye(3) + 0.5 * K + K2 / 6.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        R = np.eye(3) + (s / theta) * K + ((1.0 - c) / theta**2) * K2
        V = (
            np.eye(3)
            + ((1.0 - c) / theta**2) * K
            + ((theta - s) / theta**3) * K2
        )
    return RigidTransform(R, V @ v)


def log_map(g: RigidTransform) -> Twist:
    """Inverse of exp_map; requires rotation angle below pi."""
    R = g.rotation
    tr = float(np.trace(R))
    if tr <= -1.0 + 1e-6:
        raise AngleNearPi(f"rotation angle too close to pi (trace={tr:.9f})")
    theta = math.acos(min(1.0, max(-1.0, (tr - 1.0) / 2.0)))
    if theta < SMALL_ANGLE:
        W = (R - R.T) / 2.0
        omega = np.array([W[2, 1], W[0, 2], W[1, 0]])
        K = skew(omega)
        V_inv = np.eye(3) - 0.5 * K
    else:
        W = (R - R.T) * (theta / (2.0 * math.sin(theta)))
        omega = np.array([W[2, 1], W[0, 2], W[1, 0]])
        K = skew(omega)
        # V^-1 = I - K/2 + (1/theta^2 - (1+cos)/(2 theta sin)) K^2
        coef = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (
            2.0 * theta * math.sin(theta)
        )
        V_inv = np.eye(3) - 0.5 * K + coef * (K @ K)
    return Twist(omega, V_inv @ g.translation)


def camera_from_spherical(
    azimuth_deg: float,
    elevation_deg: float,
    radius: float,
    fov_deg: float,
    width: int,
    height: int,
) -> CameraPose:
    """Camera on a sphere around the origin, optical axis toward the origin.

    The image up vector is world +z; looking straight down or up (|e| = 90)
    the tie-break up vector is +x.
    """
    if not (-90.0 <= elevation_deg <= 90.0):
        raise ValueError("elevation must lie in [-90, 90]")
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    a = math.radians(azimuth_deg)
    e = math.radians(elevation_deg)
    center = radius * np.array(
        [math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)]
    )
    forward = -center / np.linalg.norm(center)
    up = np.array([0.0, 0.0, 1.0])
    if np.linalg.norm(np.cross(forward, up)) < 1e-9:
        up = np.array([1.0, 0.0, 0.0])
    x_cam = np.cross(forward, up)
    x_cam /= np.linalg.norm(x_cam)
    y_cam = np.cross(forward, x_cam)  # z cross x = y (down in image)
    R = np.stack([x_cam, y_cam, forward])  # rows: world -> camera
    t = -R @ center
    return CameraPose(
        RigidTransform(R, t), CameraIntrinsics(fov_deg, width, height)
    )


def ray_for_pixel(pose: CameraPose, u) -> Ray:
    """Unit ray through the continuous pixel coordinate u = (x, y)."""
    u = np.asarray(u, dtype=float).reshape(2)
    intr = pose.intrinsics
    f = intr.focal_px
    d_cam = np.array(
        [(u[0] - intr.width / 2.0) / f, (u[1] - intr.height / 2.0) / f, 1.0]
    )
    d_world = pose.extrinsics.rotation.T @ d_cam
    return Ray(pose.center(), d_world / np.linalg.norm(d_world))


def rays_for_image(pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Rays through every pixel center: origins (H*W, 3), unit dirs (H*W, 3).

    Row-major pixel order (row 0 first), matching image array layout.
    """
    intr = pose.intrinsics
    f = intr.focal_px
    xs = (np.arange(intr.width) + 0.5 - intr.width / 2.0) / f
    ys = (np.arange(intr.height) + 0.5 - intr.height / 2.0) / f
    gx, gy = np.meshgrid(xs, ys)  # (H, W)
    d_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)
    d_world = d_cam @ pose.extrinsics.rotation  # == (R^T d)^T rowwise
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.center(), d_world.shape).copy()
    return origins, d_world
