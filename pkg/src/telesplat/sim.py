"""Synthetic world: analytic scene, robot kinematics, RGB-D ground truth.

The simulator stands in for a real quadcopter with a depth camera. Scenes
are built from analytic primitives (ground plane, spheres, axis-aligned
boxes) so every rendered depth pixel has a closed-form answer; RGB comes
from per-primitive surface patterns under one fixed directional light.

The robot follows a goal pose with first-order velocity smoothing, which
gives it the sluggish-but-stable feel of a real vehicle without modeling
attitude dynamics. Marker drops are pure ballistics off the current state.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import _kernels
from .core import (
    DEPTH_MAX_M,
    DEPTH_MIN_M,
    CameraIntrinsics,
    Frame,
    PoseSE3,
    Quat,
    Vec3,
)

GRAVITY = 9.81
LIGHT_DIRECTION = (-1.0, -2.0, -3.0)  # direction of travel, normalized at use
AMBIENT = 0.35
DIFFUSE = 0.65
TARGET_COLOR = (1.0, 1.0, 1.0)

PLANE, SPHERE, BOX = 0, 1, 2


class SceneError(ValueError):
    """Scene file failed validation."""


# ---------------------------------------------------------------------------
# Surface patterns


@dataclass(frozen=True)
class SolidPattern:
    color: tuple

    def sample(self, u, v):
        out = np.empty(u.shape + (3,))
        out[...] = self.color
        return out


@dataclass(frozen=True)
class CheckerPattern:
    cell: float
    color_a: tuple
    color_b: tuple

    def sample(self, u, v):
        parity = (np.floor(u / self.cell) + np.floor(v / self.cell)).astype(np.int64) & 1
        out = np.where(parity[..., None] == 0, self.color_a, self.color_b)
        return out.astype(np.float64)


@dataclass(frozen=True)
class TexturePattern:
    pixels: np.ndarray  # (H, W, 3) float in [0, 1]
    scale: float  # meters covered by one texture repeat

    def sample(self, u, v):
        h, w = self.pixels.shape[:2]
        iu = np.floor((u / self.scale) % 1.0 * w).astype(np.int64).clip(0, w - 1)
        iv = np.floor((v / self.scale) % 1.0 * h).astype(np.int64).clip(0, h - 1)
        return self.pixels[iv, iu]


Pattern = Union[SolidPattern, CheckerPattern, TexturePattern]


# ---------------------------------------------------------------------------
# Scene


@dataclass(frozen=True)
class Primitive:
    kind: int  # PLANE | SPHERE | BOX
    params: tuple  # plane: (z,); sphere: (cx,cy,cz,r); box: (cx,cy,cz,hx,hy,hz)
    pattern: Pattern


@dataclass(frozen=True)
class TargetDisc:
    center: tuple  # (x, y) on the ground plane
    radius: float
    target_id: int


@dataclass(frozen=True)
class SceneDescription:
    primitives: tuple
    targets: tuple
    spawn_position: Vec3
    spawn_yaw: float
    intrinsics: CameraIntrinsics
    camera_pitch_deg: float = -20.0
    background: tuple = (0.05, 0.05, 0.08)

    def ground_z(self) -> Optional[float]:
        for prim in self.primitives:
            if prim.kind == PLANE:
                return prim.params[0]
        return None

    def packed_primitives(self):
        types = np.array([p.kind for p in self.primitives], dtype=np.int64)
        params = np.zeros((len(self.primitives), 6))
        for i, p in enumerate(self.primitives):
            params[i, : len(p.params)] = p.params
        return types, params


def _check_spawn_clear(scene: SceneDescription) -> None:
    pos = scene.spawn_position
    for prim in scene.primitives:
        if prim.kind == PLANE and pos.z <= prim.params[0]:
            raise SceneError("spawn pose is at or below the ground plane")
        if prim.kind == SPHERE:
            cx, cy, cz, r = prim.params
            if (pos.x - cx) ** 2 + (pos.y - cy) ** 2 + (pos.z - cz) ** 2 <= r * r:
                raise SceneError("spawn pose is inside a sphere primitive")
        if prim.kind == BOX:
            cx, cy, cz, hx, hy, hz = prim.params
            if abs(pos.x - cx) <= hx and abs(pos.y - cy) <= hy and abs(pos.z - cz) <= hz:
                raise SceneError("spawn pose is inside a box primitive")


def validate_scene(scene: SceneDescription) -> SceneDescription:
    if not scene.primitives:
        raise SceneError("scene needs at least one primitive")
    if scene.targets and scene.ground_z() is None:
        raise SceneError("targets require a ground plane to lie on")
    _check_spawn_clear(scene)
    return scene


def _parse_pattern(obj: dict, base_dir: str) -> Pattern:
    kind = obj.get("kind")
    if kind == "solid":
        return SolidPattern(color=tuple(float(c) for c in obj["color"]))
    if kind == "checker":
        return CheckerPattern(
            cell=float(obj["cell"]),
            color_a=tuple(float(c) for c in obj["color_a"]),
            color_b=tuple(float(c) for c in obj["color_b"]),
        )
    if kind == "texture":
        from PIL import Image

        path = os.path.join(base_dir, obj["file"])
        if not os.path.exists(path):
            raise SceneError(f"texture file not found: {path}")
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        return TexturePattern(pixels=pixels, scale=float(obj.get("scale", 1.0)))
    raise SceneError(f"unknown pattern kind {kind!r}")


def scene_from_dict(obj: dict, base_dir: str = ".") -> SceneDescription:
    try:
        prims = []
        for p in obj["primitives"]:
            kind = p["kind"]
            pattern = _parse_pattern(p["pattern"], base_dir)
            if kind == "ground_plane":
                prims.append(Primitive(PLANE, (float(p.get("z", 0.0)),), pattern))
            elif kind == "sphere":
                c = [float(v) for v in p["center"]]
                prims.append(Primitive(SPHERE, (*c, float(p["radius"])), pattern))
            elif kind == "box":
                c = [float(v) for v in p["center"]]
                size = [float(v) for v in p["size"]]
                half = [s / 2.0 for s in size]
                prims.append(Primitive(BOX, (*c, *half), pattern))
            else:
                raise SceneError(f"unknown primitive kind {kind!r}")

        targets = tuple(
            TargetDisc(
                center=(float(t["center"][0]), float(t["center"][1])),
                radius=float(t["radius"]),
                target_id=int(t["id"]),
            )
            for t in obj.get("targets", ())
        )

        spawn = obj["spawn"]
        cam = obj["camera"]
        intrinsics = CameraIntrinsics(
            fx=float(cam["fx"]),
            fy=float(cam["fy"]),
            cx=float(cam["cx"]),
            cy=float(cam["cy"]),
            width=int(cam["width"]),
            height=int(cam["height"]),
        )
        scene = SceneDescription(
            primitives=tuple(prims),
            targets=targets,
            spawn_position=Vec3(*[float(v) for v in spawn["position"]]),
            spawn_yaw=math.radians(float(spawn.get("yaw_deg", 0.0))),
            intrinsics=intrinsics,
            camera_pitch_deg=float(cam.get("pitch_deg", -20.0)),
            background=tuple(float(c) for c in obj.get("background", (0.05, 0.05, 0.08))),
        )
    except SceneError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise SceneError(f"malformed scene description: {exc!r}") from exc
    return validate_scene(scene)


def load_scene(path: str) -> SceneDescription:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise SceneError(f"cannot read scene file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SceneError(f"scene file is not valid JSON: {exc}") from exc
    return scene_from_dict(obj, base_dir=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# Camera mounting

# Camera axes in body coordinates (body: x forward, y left, z up;
# camera: z forward, x right, y down).
_R_BODY_FROM_CAM = np.array(
    [
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)


def camera_pose_from_robot(robot_pose: PoseSE3, pitch_deg: float = -20.0) -> PoseSE3:
    """Mounted-camera pose: body yaw, then a fixed pitch about body-left.

    Negative pitch tilts the optical axis below the horizon (the default
    -20 deg looks down at the ground ahead of the robot).
    """
    a = math.radians(-pitch_deg)
    pitch = np.array(
        [
            [math.cos(a), 0.0, math.sin(a)],
            [0.0, 1.0, 0.0],
            [-math.sin(a), 0.0, math.cos(a)],
        ]
    )
    r_world_body = robot_pose.rotation.to_matrix()
    r_world_cam = r_world_body @ pitch @ _R_BODY_FROM_CAM
    return PoseSE3(rotation=Quat.from_matrix(r_world_cam), translation=robot_pose.translation)


# ---------------------------------------------------------------------------
# Ground-truth rendering


def _surface_uv(prim: Primitive, pts: np.ndarray, normals: np.ndarray):
    """Two pattern coordinates (meters) for each hit point on `prim`."""
    if prim.kind == PLANE:
        return pts[:, 0], pts[:, 1]
    if prim.kind == SPHERE:
        cx, cy, cz, r = prim.params
        lx = pts[:, 0] - cx
        ly = pts[:, 1] - cy
        lz = np.clip((pts[:, 2] - cz) / r, -1.0, 1.0)
        azimuth = np.arctan2(ly, lx)
        polar = np.arccos(lz)
        return azimuth * r, polar * r
    # Box: parameterize by the two in-face axes, chosen from the face normal.
    axis = np.argmax(np.abs(normals), axis=1)
    u = np.where(axis == 0, pts[:, 1], pts[:, 0])
    v = np.where(axis == 2, pts[:, 1], pts[:, 2])
    return u, v


def render_ground_truth(
    scene: SceneDescription,
    camera_pose: PoseSE3,
    intrinsics: Optional[CameraIntrinsics] = None,
    timestamp_us: int = 0,
) -> Frame:
    """Ray-cast the scene into a posed RGB-D frame.

    Depth is pinhole z-depth of the nearest hit (0 where nothing in range);
    color is the primitive's pattern under Lambertian shading, with target
    discs painted onto the ground plane.
    """
    cam = intrinsics or scene.intrinsics
    types, params = scene.packed_primitives()
    rcw = np.ascontiguousarray(camera_pose.rotation.to_matrix())
    origin = np.array(
        [camera_pose.translation.x, camera_pose.translation.y, camera_pose.translation.z]
    )
    depth, prim_id, hit_xyz, normal = _kernels.raytrace(
        types,
        params,
        rcw,
        origin,
        cam.fx,
        cam.fy,
        cam.cx,
        cam.cy,
        cam.width,
        cam.height,
        1e-9,
        1e6,
    )

    rgb = np.empty((cam.height, cam.width, 3))
    rgb[...] = scene.background

    light = -np.array(LIGHT_DIRECTION)
    light /= np.linalg.norm(light)
    ground_z = scene.ground_z()

    for i, prim in enumerate(scene.primitives):
        mask = prim_id == i
        if not mask.any():
            continue
        pts = hit_xyz[mask]
        nrm = normal[mask]
        u, v = _surface_uv(prim, pts, nrm)
        color = prim.pattern.sample(u, v)

        if prim.kind == PLANE and scene.targets and prim.params[0] == ground_z:
            for disc in scene.targets:
                d2 = (pts[:, 0] - disc.center[0]) ** 2 + (pts[:, 1] - disc.center[1]) ** 2
                color[d2 <= disc.radius**2] = TARGET_COLOR

        shade = AMBIENT + DIFFUSE * np.maximum(nrm @ light, 0.0)
        rgb[mask] = color * shade[:, None]

    out_rgb = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    out_depth = np.where(
        (depth >= DEPTH_MIN_M) & (depth <= DEPTH_MAX_M), depth, 0.0
    ).astype(np.float32)
    return Frame(
        timestamp_us=timestamp_us,
        pose=camera_pose,
        intrinsics=cam,
        rgb=out_rgb,
        depth=out_depth,
    )


# ---------------------------------------------------------------------------
# Robot kinematics


@dataclass(frozen=True)
class DynamicsParams:
    k_p: float = 1.0  # 1/s
    v_max: float = 1.0  # m/s
    tau_v: float = 0.4  # s
    k_yaw: float = 1.0  # 1/s
    omega_max: float = 1.5  # rad/s


@dataclass(frozen=True)
class GoalState:
    position: Vec3
    yaw: float

    def __post_init__(self):
        values = (self.position.x, self.position.y, self.position.z, self.yaw)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("goal state must be finite")


@dataclass(frozen=True)
class RobotState:
    pose: PoseSE3  # yaw-only attitude
    velocity: Vec3
    yaw_rate: float

    @property
    def yaw(self) -> float:
        q = self.pose.rotation
        return 2.0 * math.atan2(q.z, q.w)

    @classmethod
    def at(cls, position: Vec3, yaw: float = 0.0) -> "RobotState":
        return cls(
            pose=PoseSE3(rotation=Quat.from_yaw(yaw), translation=position),
            velocity=Vec3(0.0, 0.0, 0.0),
            yaw_rate=0.0,
        )


def _wrap_angle(a: float) -> float:
    return math.atan2(math.sin(a), math.cos(a))


def step_dynamics(
    state: RobotState,
    goal: GoalState,
    dt: float,
    params: DynamicsParams = DynamicsParams(),
) -> RobotState:
    """First-order velocity controller toward the goal.

    Commanded velocity is the clamped proportional error; actual velocity
    relaxes toward the command with time constant tau_v; position
    integrates the relaxed velocity. Yaw follows the same law with its own
    rate limit. Since the new velocity is a convex blend of the old one and
    a clamped command, speed can never exceed v_max.
    """
    if not 0.0 < dt <= 0.1:
        raise ValueError(f"dt must be in (0, 0.1], got {dt}")

    pos = state.pose.translation
    err = Vec3(goal.position.x - pos.x, goal.position.y - pos.y, goal.position.z - pos.z)
    cmd = np.array([params.k_p * err.x, params.k_p * err.y, params.k_p * err.z])
    speed = float(np.linalg.norm(cmd))
    if speed > params.v_max:
        cmd *= params.v_max / speed

    beta = math.exp(-dt / params.tau_v)
    vel = np.array([state.velocity.x, state.velocity.y, state.velocity.z])
    vel = cmd + (vel - cmd) * beta
    new_pos = Vec3(pos.x + vel[0] * dt, pos.y + vel[1] * dt, pos.z + vel[2] * dt)

    yaw_err = _wrap_angle(goal.yaw - state.yaw)
    cmd_w = max(-params.omega_max, min(params.omega_max, params.k_yaw * yaw_err))
    new_rate = cmd_w + (state.yaw_rate - cmd_w) * beta
    new_yaw = _wrap_angle(state.yaw + new_rate * dt)

    return RobotState(
        pose=PoseSE3(rotation=Quat.from_yaw(new_yaw), translation=new_pos),
        velocity=Vec3(*vel),
        yaw_rate=new_rate,
    )


# ---------------------------------------------------------------------------
# Marker drop


def drop_marker(state: RobotState, gravity: float = GRAVITY, ground_z: float = 0.0):
    """Ballistic impact of a marker released from the robot's position.

    Returns (impact point on the ground plane, fall time in seconds).
    Initial velocity is the robot's; there is no drag.
    """
    pos = state.pose.translation
    h = pos.z - ground_z
    if h <= 0.0:
        raise ValueError("robot is at or below the ground plane")
    vz = state.velocity.z
    # Solve ground_z = z + vz*t - g*t^2/2 for the positive root.
    t = (vz + math.sqrt(vz * vz + 2.0 * gravity * h)) / gravity
    impact = Vec3(
        pos.x + state.velocity.x * t,
        pos.y + state.velocity.y * t,
        ground_z,
    )
    return impact, t


def score_impact(impact: Vec3, target: TargetDisc):
    """Planar distance from the target center and whether the disc was hit."""
    distance = math.hypot(impact.x - target.center[0], impact.y - target.center[1])
    return distance, distance <= target.radius


# ---------------------------------------------------------------------------
# Simulator loop


@dataclass
class DropResult:
    impact: Vec3
    fall_time: float
    target_id: Optional[int]
    distance: Optional[float]
    hit: bool


class Simulator:
    """Fixed-dt world stepper with sensor-rate frame emission.

    Physics advances at `physics_dt` (default 1/60 s); frames can be pulled
    at any cadence. Optional Gaussian pose noise perturbs the pose stamped
    on emitted frames (rendering stays ground-truth) to stress consumers.
    """

    def __init__(
        self,
        scene: SceneDescription,
        physics_dt: float = 1.0 / 60.0,
        dynamics: DynamicsParams = DynamicsParams(),
        seed: int = 0,
        pose_noise_t: float = 0.0,
        pose_noise_r: float = 0.0,
    ):
        validate_scene(scene)
        self.scene = scene
        self.physics_dt = physics_dt
        self.dynamics = dynamics
        self.state = RobotState.at(scene.spawn_position, scene.spawn_yaw)
        self.goal = GoalState(position=scene.spawn_position, yaw=scene.spawn_yaw)
        self.home = GoalState(position=scene.spawn_position, yaw=scene.spawn_yaw)
        self.time = 0.0
        self._rng = np.random.default_rng(seed)
        self._pose_noise_t = pose_noise_t
        self._pose_noise_r = pose_noise_r

    def advance(self, sim_seconds: float) -> None:
        """Run physics forward by `sim_seconds` in fixed steps."""
        remaining = sim_seconds
        while remaining > 1e-12:
            dt = min(self.physics_dt, remaining)
            self.state = step_dynamics(self.state, self.goal, dt, self.dynamics)
            self.time += dt
            remaining -= dt

    def camera_pose(self) -> PoseSE3:
        return camera_pose_from_robot(self.state.pose, self.scene.camera_pitch_deg)

    def emit_frame(self) -> Frame:
        pose = self.camera_pose()
        frame = render_ground_truth(
            self.scene, pose, timestamp_us=int(round(self.time * 1e6))
        )
        if self._pose_noise_t > 0.0 or self._pose_noise_r > 0.0:
            frame = replace(frame, pose=self._noisy(pose))
        return frame

    def _noisy(self, pose: PoseSE3) -> PoseSE3:
        dt_ = self._rng.normal(scale=self._pose_noise_t, size=3)
        axis = self._rng.normal(size=3)
        axis /= max(np.linalg.norm(axis), 1e-12)
        angle = self._rng.normal(scale=self._pose_noise_r)
        jitter = PoseSE3(
            rotation=Quat.from_axis_angle(Vec3(*axis), angle),
            translation=Vec3(*dt_),
        )
        return pose.compose(jitter)

    def predicted_impact(self):
        try:
            impact, _ = drop_marker(self.state, ground_z=self.scene.ground_z() or 0.0)
        except ValueError:
            return None
        return impact

    def drop(self) -> DropResult:
        impact, fall_time = drop_marker(self.state, ground_z=self.scene.ground_z() or 0.0)
        best = None
        for target in self.scene.targets:
            distance, hit = score_impact(impact, target)
            if best is None or distance < best[0]:
                best = (distance, hit, target.target_id)
        if best is None:
            return DropResult(impact, fall_time, None, None, False)
        return DropResult(impact, fall_time, best[2], best[0], best[1])

    def return_home(self) -> None:
        self.goal = self.home
