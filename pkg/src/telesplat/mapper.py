"""Incremental mapping loop: keyframes, densification, continuous refinement.

The mapper owns the only mutable gaussian map. Each incoming posed RGB-D
frame may become a keyframe (movement or exposed uncovered area); keyframes
seed new gaussians by back-projecting poorly covered pixels, and a budget
of gradient-descent steps per frame keeps refining the map against a
uniformly sampled keyframe. Fresh map epochs go out through the shared map
at a fixed cadence so viewers track progress without touching the writer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

import numpy as np

from . import raster
from .core import CameraIntrinsics, Frame, Keyframe, PoseSE3, logit
from .gaussian_map import GaussianMap
from .shared_map import SharedMap


@dataclass(frozen=True)
class MapperConfig:
    kf_translation_m: float = 0.15
    kf_rotation_deg: float = 15.0
    tau_alpha: float = 0.5  # pixels with accumulated alpha below this count as uncovered
    uncovered_trigger: float = 0.10
    densify_stride: int = 4
    init_opacity: float = 0.5
    init_scale_factor: float = 1.5  # splat std = factor * depth / fx
    prune_opacity: float = 0.005
    prune_grace_iters: int = 50
    lr_position: float = 1.6e-4  # multiplied by scene_extent
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity_logit: float = 5e-2
    lr_color: float = 2.5e-3
    scene_extent: float = 4.0  # meters, scales the position step size
    iters_per_frame: int = 10
    max_gaussians: int = 200_000
    publish_every: int = 5  # optimizer steps between epochs (densify publishes at once)

    def __post_init__(self):
        positives = (
            self.kf_translation_m,
            self.kf_rotation_deg,
            self.tau_alpha,
            self.uncovered_trigger,
            self.init_opacity,
            self.init_scale_factor,
            self.prune_opacity,
            self.scene_extent,
        )
        if any(v <= 0 for v in positives):
            raise ValueError("mapper thresholds must be positive")
        if self.densify_stride < 1:
            raise ValueError("densify stride must be >= 1")


def should_add_keyframe(
    last_kf_pose: Optional[PoseSE3],
    new_pose: PoseSE3,
    coverage_fraction: float,
    config: MapperConfig,
) -> bool:
    """Keyframe when the camera moved enough or sees enough uncovered area.

    `coverage_fraction` is the fraction of pixels whose accumulated alpha
    under the new pose falls below tau_alpha.
    """
    if last_kf_pose is None:
        return True
    if coverage_fraction > config.uncovered_trigger:
        return True
    dt = last_kf_pose.translation
    nt = new_pose.translation
    translation = math.dist((dt.x, dt.y, dt.z), (nt.x, nt.y, nt.z))
    if translation > config.kf_translation_m:
        return True
    rotation = last_kf_pose.rotation.angle_to(new_pose.rotation)
    return rotation > math.radians(config.kf_rotation_deg)


class Mapper:
    """Single-writer mapping loop over a GaussianMap."""

    def __init__(
        self,
        config: MapperConfig = MapperConfig(),
        shared_map: Optional[SharedMap] = None,
        seed: int = 0,
    ):
        self.config = config
        self.map = GaussianMap()
        self.keyframes: list[Keyframe] = []
        self.shared = shared_map
        self.rng = np.random.default_rng(seed)
        self.total_iterations = 0
        self.epoch = 0
        self._steps_since_publish = 0
        self._last_timestamp_us: Optional[int] = None
        self._last_loss: Optional[float] = None

    # -- coverage and keyframe decisions ------------------------------------

    def uncovered_fraction(self, pose: PoseSE3, intrinsics: CameraIntrinsics) -> float:
        rendered = raster.render(self.map.views(), pose, intrinsics)
        return float((rendered.alpha < self.config.tau_alpha).mean())

    def should_add_keyframe(self, frame: Frame) -> bool:
        last_pose = self.keyframes[-1].pose if self.keyframes else None
        coverage = self.uncovered_fraction(frame.pose, frame.intrinsics)
        return should_add_keyframe(last_pose, frame.pose, coverage, self.config)

    # -- map growth ----------------------------------------------------------

    def densify(self, keyframe: Keyframe) -> int:
        """Back-project uncovered, valid-depth sampled pixels as new gaussians.

        Returns the number inserted, which stops short of the candidate count
        when the map hits max_gaussians.
        """
        cfg = self.config
        frame = keyframe.frame
        cam = keyframe.intrinsics
        alpha = raster.render(self.map.views(), keyframe.pose, cam).alpha

        stride = cfg.densify_stride
        ys, xs = np.mgrid[0 : cam.height : stride, 0 : cam.width : stride]
        ys = ys.ravel()
        xs = xs.ravel()
        depth = frame.depth[ys, xs].astype(np.float64)
        wanted = (depth > 0) & (alpha[ys, xs] < cfg.tau_alpha)
        if not wanted.any():
            return 0

        room = cfg.max_gaussians - self.map.count
        if room <= 0:
            return 0
        idx = np.nonzero(wanted)[0][:room]
        d = depth[idx]

        x_cam = (xs[idx] - cam.cx) * d / cam.fx
        y_cam = (ys[idx] - cam.cy) * d / cam.fy
        pts_cam = np.stack([x_cam, y_cam, d], axis=1)
        r = keyframe.pose.rotation.to_matrix()
        t = keyframe.pose.translation
        positions = pts_cam @ r.T + np.array([t.x, t.y, t.z])

        n = positions.shape[0]
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
        log_scales = np.repeat(
            np.log(cfg.init_scale_factor * d / cam.fx)[:, None], 3, axis=1
        )
        logits = np.full(n, logit(cfg.init_opacity))
        colors = frame.rgb[ys[idx], xs[idx]].astype(np.float64) / 255.0

        return self.map.append_batch(
            positions, rotations, log_scales, logits, colors,
            iteration=self.total_iterations,
        )

    # -- optimization ----------------------------------------------------------

    def optimize_step(self) -> float:
        """One SGD step against a uniformly sampled keyframe; returns its loss."""
        if not self.keyframes:
            raise RuntimeError("optimize_step needs at least one keyframe")
        kf = self.keyframes[int(self.rng.integers(len(self.keyframes)))]
        view = self.map.views()
        loss, grads = raster.loss_and_gradients(view, kf)
        if loss != 0.0 and view.n:
            cfg = self.config
            np.subtract(view.positions, (cfg.lr_position * cfg.scene_extent) * grads["position"], out=view.positions)
            np.subtract(view.rotations, cfg.lr_rotation * grads["rotation"], out=view.rotations)
            np.subtract(view.log_scales, cfg.lr_log_scale * grads["log_scale"], out=view.log_scales)
            np.subtract(view.opacity_logits, cfg.lr_opacity_logit * grads["opacity_logit"], out=view.opacity_logits)
            np.subtract(view.colors, cfg.lr_color * grads["color"], out=view.colors)
            self.map.clamp_parameters()
        self.total_iterations += 1
        self._last_loss = loss
        return loss

    def total_loss(self) -> float:
        """Mean photometric loss over the whole keyframe set (no update)."""
        view = self.map.views()
        losses = [raster.loss_and_gradients(view, kf)[0] for kf in self.keyframes]
        return float(np.mean(losses)) if losses else 0.0

    def prune(self) -> int:
        """Drop near-transparent gaussians that have outlived their grace period."""
        n = self.map.count
        if n == 0:
            return 0
        logit_floor = logit(self.config.prune_opacity)
        age = self.total_iterations - self.map.created_iter[:n]
        mask = (self.map.opacity_logits[:n] < logit_floor) & (
            age > self.config.prune_grace_iters
        )
        return self.map.remove_mask(mask)

    # -- publication -----------------------------------------------------------

    def publish(self) -> int:
        self._steps_since_publish = 0
        if self.shared is None:
            return self.epoch
        info = self.shared.writer_publish(self.map)
        self.epoch = info.epoch
        return self.epoch

    def _maybe_publish_after_step(self) -> None:
        self._steps_since_publish += 1
        if self._steps_since_publish >= self.config.publish_every:
            self.publish()

    # -- frame loop --------------------------------------------------------------

    def process_frame(self, frame: Frame) -> dict:
        """Ingest one posed frame; returns the per-frame statistics record."""
        if self._last_timestamp_us is not None and frame.timestamp_us <= self._last_timestamp_us:
            return self._stats(frame.timestamp_us, warning="out_of_order_frame_dropped")
        self._last_timestamp_us = frame.timestamp_us

        if self.should_add_keyframe(frame):
            kf = Keyframe(frame=frame, keyframe_id=len(self.keyframes))
            self.keyframes.append(kf)
            self.densify(kf)
            self.publish()

        if self.keyframes:
            for _ in range(self.config.iters_per_frame):
                self.optimize_step()
                self._maybe_publish_after_step()
            self.prune()

        return self._stats(frame.timestamp_us)

    def run(self, frame_source: Iterable[Frame]) -> Iterator[dict]:
        """Drive the loop over a frame stream, yielding one stats record each."""
        for frame in frame_source:
            yield self.process_frame(frame)

    def _stats(self, ts_us: int, warning: Optional[str] = None) -> dict:
        record = {
            "ts": ts_us,
            "n_gaussians": self.map.count,
            "loss": self._last_loss,
            "epoch": self.epoch,
            "kf_count": len(self.keyframes),
        }
        if warning:
            record["warning"] = warning
        return record
