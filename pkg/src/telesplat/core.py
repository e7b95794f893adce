"""Geometric and camera domain types shared across the whole stack.

Conventions (fixed project-wide): right-handed coordinates, the camera looks
down its +Z axis, image origin is top-left with u to the right and v down.
Pixels are sampled at integer coordinates, so the principal point (cx, cy)
lands exactly on pixel column cx / row cy. World frame is z-up.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Parameter domains enforced on construction.
SCALE_MIN_M = 1e-4
SCALE_MAX_M = 10.0
DEPTH_MIN_M = 0.05
DEPTH_MAX_M = 100.0

LOG_SCALE_MIN = math.log(SCALE_MIN_M)
LOG_SCALE_MAX = math.log(SCALE_MAX_M)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"logit domain is (0,1), got {p}")
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class Vec3:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Vec3":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def __add__(self, o: "Vec3") -> "Vec3":
        return Vec3(self.x + o.x, self.y + o.y, self.z + o.z)

    def __sub__(self, o: "Vec3") -> "Vec3":
        return Vec3(self.x - o.x, self.y - o.y, self.z - o.z)

    def __mul__(self, s: float) -> "Vec3":
        return Vec3(self.x * s, self.y * s, self.z * s)

    __rmul__ = __mul__

    def dot(self, o: "Vec3") -> float:
        return self.x * o.x + self.y * o.y + self.z * o.z

    def norm(self) -> float:
        return math.sqrt(self.dot(self))


@dataclass(frozen=True)
class Quat:
    """Unit quaternion (w, x, y, z); normalized on construction."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if n < 1e-12:
            raise ValueError("cannot normalize a zero quaternion")
        if abs(n - 1.0) > 1e-9:
            object.__setattr__(self, "w", self.w / n)
            object.__setattr__(self, "x", self.x / n)
            object.__setattr__(self, "y", self.y / n)
            object.__setattr__(self, "z", self.z / n)

    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def conjugate(self) -> "Quat":
        return Quat(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, o: "Quat") -> "Quat":
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = o.w, o.x, o.y, o.z
        return Quat(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def to_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ],
            dtype=np.float64,
        )

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Quat":
        # Shepperd's method: pick the largest diagonal combination for stability.
        t = np.trace(m)
        if t > 0:
            s = math.sqrt(t + 1.0) * 2
            return cls((0.25 * s), (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        i = int(np.argmax(np.diag(m)))
        if i == 0:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            return cls((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        if i == 1:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            return cls((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        return cls((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)

    @classmethod
    def from_axis_angle(cls, axis: Vec3, angle_rad: float) -> "Quat":
        n = axis.norm()
        if n < 1e-12:
            return cls()
        h = angle_rad * 0.5
        s = math.sin(h) / n
        return cls(math.cos(h), axis.x * s, axis.y * s, axis.z * s)

    @classmethod
    def from_yaw(cls, yaw_rad: float) -> "Quat":
        return cls(math.cos(yaw_rad * 0.5), 0.0, 0.0, math.sin(yaw_rad * 0.5))

    def rotate(self, v: Vec3) -> Vec3:
        return Vec3.from_array(self.to_matrix() @ v.to_array())

    def angle_to(self, o: "Quat") -> float:
        """Absolute rotation angle between the two orientations, in radians."""
        d = abs(self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z)
        return 2.0 * math.acos(min(1.0, d))


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform mapping local-frame points into the parent frame."""

    rotation: Quat = field(default_factory=Quat)
    translation: Vec3 = field(default_factory=Vec3)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "PoseSE3":
        return cls(Quat(), Vec3(x, y, z))

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self ∘ other: apply `other` first, then `self`."""
        return PoseSE3(
            self.rotation * other.rotation,
            self.translation + self.rotation.rotate(other.translation),
        )

    def inverse(self) -> "PoseSE3":
        rinv = self.rotation.conjugate()
        return PoseSE3(rinv, rinv.rotate(self.translation) * -1.0)

    def transform(self, p: Vec3) -> Vec3:
        return self.rotation.rotate(p) + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.to_matrix()
        m[:3, 3] = self.translation.to_array()
        return m


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    return a.compose(b)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def project(self, p_cam: Vec3) -> tuple[float, float]:
        """Pinhole projection of a camera-frame point (requires z > 0)."""
        if p_cam.z <= 0:
            raise ValueError(f"cannot project point with non-positive depth z={p_cam.z}")
        return (self.fx * p_cam.x / p_cam.z + self.cx, self.fy * p_cam.y / p_cam.z + self.cy)

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics for the same camera at a different resolution."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


def backproject(intrinsics: CameraIntrinsics, pixel: tuple[float, float], depth: float) -> Vec3:
    """Lift an image pixel with known depth to a camera-frame point."""
    if depth <= 0:
        raise ValueError(f"backproject requires positive depth, got {depth}")
    u, v = pixel
    return Vec3(
        (u - intrinsics.cx) * depth / intrinsics.fx,
        (v - intrinsics.cy) * depth / intrinsics.fy,
        depth,
    )


@dataclass(frozen=True)
class Gaussian:
    """One anisotropic splat: position, orientation, per-axis log scale,
    opacity as a logit, and plain RGB color in [0,1]."""

    position: Vec3
    rotation: Quat = field(default_factory=Quat)
    log_scale: Vec3 = field(default_factory=lambda: Vec3(-3.0, -3.0, -3.0))
    opacity_logit: float = 0.0
    color: Vec3 = field(default_factory=lambda: Vec3(0.5, 0.5, 0.5))

    def __post_init__(self):
        ls = self.log_scale
        clamped = Vec3(
            min(max(ls.x, LOG_SCALE_MIN), LOG_SCALE_MAX),
            min(max(ls.y, LOG_SCALE_MIN), LOG_SCALE_MAX),
            min(max(ls.z, LOG_SCALE_MIN), LOG_SCALE_MAX),
        )
        if clamped != ls:
            object.__setattr__(self, "log_scale", clamped)
        c = self.color
        cc = Vec3(min(max(c.x, 0.0), 1.0), min(max(c.y, 0.0), 1.0), min(max(c.z, 0.0), 1.0))
        if cc != c:
            object.__setattr__(self, "color", cc)

    @property
    def opacity(self) -> float:
        return sigmoid(self.opacity_logit)

    def covariance(self) -> np.ndarray:
        """World-frame covariance R · diag(exp(2·log_scale)) · Rᵀ."""
        r = self.rotation.to_matrix()
        s2 = np.exp(2.0 * self.log_scale.to_array())
        return r @ np.diag(s2) @ r.T


@dataclass
class Frame:
    """Timestamped posed RGB-D image. `pose` maps camera frame to world."""

    timestamp_us: int
    pose: PoseSE3
    intrinsics: CameraIntrinsics
    rgb: np.ndarray      # uint8, (H, W, 3)
    depth: np.ndarray    # float32 meters, (H, W); 0.0 marks invalid pixels

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.rgb.shape != (h, w, 3) or self.rgb.dtype != np.uint8:
            raise ValueError(f"rgb must be uint8 ({h},{w},3), got {self.rgb.dtype} {self.rgb.shape}")
        if self.depth.shape != (h, w) or self.depth.dtype != np.float32:
            raise ValueError(f"depth must be float32 ({h},{w}), got {self.depth.dtype} {self.depth.shape}")
        d = self.depth
        bad = (d != 0) & ((d <= DEPTH_MIN_M) | (d >= DEPTH_MAX_M))
        if bad.any():
            raise ValueError("depth values must be 0 (invalid) or within (0.05, 100) m")


@dataclass
class Keyframe:
    """A retained frame used as a supervision target for map optimization."""

    frame: Frame
    keyframe_id: int
    # (wall_clock_s, psnr_db, ssim) samples appended by the benchmark harness.
    quality_history: list = field(default_factory=list)

    @property
    def pose(self) -> PoseSE3:
        return self.frame.pose

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.frame.intrinsics
