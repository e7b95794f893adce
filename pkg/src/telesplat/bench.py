"""Evaluation harness: image quality metrics, map-speed and viewer-FPS runs.

Three layers live here. Pure metric functions (psnr, ssim) at the bottom;
QualityReport construction over a replayed frame log in the middle
(measure_map_speed); and the render-scheduling benchmarks at the top
(measure_viewer_fps, measure_optimizer_rate) which drive the viewer-side
render path against a continuously running optimizer in either coupled or
decoupled mode and report frame-time distributions.

All CSV output uses fixed, documented headers so downstream tooling can rely
on the schema.
"""

from __future__ import annotations

import csv
import math
import threading
import time
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from . import raster
from .core import CameraIntrinsics, Frame, Keyframe, PoseSE3, Quat, Vec3
from .mapper import Mapper, MapperConfig
from .shared_map import SharedMap

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_SSIM_MARGIN = SSIM_WINDOW // 2

MAP_SPEED_CSV_HEADER = [
    "keyframe_id",
    "wall_clock_s",
    "psnr_db",
    "ssim",
    "final_psnr_db",
    "final_ssim",
    "time_to_95pct_s",
    "time_to_psnr20_s",
    "plateaued",
]

FPS_CSV_HEADER = [
    "mode",
    "n_gaussians",
    "optimizer_active",
    "frame_index",
    "frame_time_ms",
    "median_frame_time_ms",
    "p95_frame_time_ms",
    "viewer_fps",
    "optimizer_iters_per_s",
]


# ---------------------------------------------------------------------------
# image quality metrics


def _as_float_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected HxW or HxWxC image, got shape {arr.shape}")
    return arr


def psnr(reference, test, max_value: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB over all pixels and channels.

    Identical (or near-identical) inputs are capped at 99 dB so report
    series stay finite.
    """
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(max_value * max_value / mse))


def _ssim_kernel() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2.0
    coords = np.arange(SSIM_WINDOW) - half
    g = np.exp(-(coords**2) / (2.0 * SSIM_SIGMA**2))
    return g / g.sum()


_SSIM_KERNEL = _ssim_kernel()


def _windowed_mean(img: np.ndarray) -> np.ndarray:
    # Border values are garbage under mode="constant" but the valid-window
    # crop below removes every pixel the padding can reach.
    out = correlate1d(img, _SSIM_KERNEL, axis=0, mode="constant")
    out = correlate1d(out, _SSIM_KERNEL, axis=1, mode="constant")
    return out[_SSIM_MARGIN:-_SSIM_MARGIN, _SSIM_MARGIN:-_SSIM_MARGIN]


def ssim(reference, test, max_value: float = 255.0) -> float:
    """Single-scale SSIM: 11x11 gaussian window (sigma 1.5), valid-window
    crop, per-channel computation averaged across channels."""
    a = _as_float_image(reference)
    b = _as_float_image(test)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    h, w, channels = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image must be at least {SSIM_WINDOW}px on each side")
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    values = []
    for ch in range(channels):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mu_x = _windowed_mean(x)
        mu_y = _windowed_mean(y)
        var_x = _windowed_mean(x * x) - mu_x * mu_x
        var_y = _windowed_mean(y * y) - mu_y * mu_y
        cov = _windowed_mean(x * y) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        values.append(float(np.mean(num / den)))
    return float(np.mean(values))


def load_image(path) -> np.ndarray:
    """Read an image file as an (h, w, 3) uint8 array."""
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


# ---------------------------------------------------------------------------
# map generation speed


class QualitySample(NamedTuple):
    wall_clock_s: float  # since this keyframe was added
    psnr_db: float
    ssim: float


@dataclass(frozen=True)
class QualityReport:
    """Convergence record for one keyframe.

    Times are wall-clock seconds measured from the moment the keyframe
    entered the map. `time_to_psnr20_s` is None when 20 dB was never
    reached. Either time is reported as 0.0 when the very first sample
    already met the bar: the quality was there before the sampling grid
    could resolve it.
    """

    keyframe_id: int
    samples: tuple[QualitySample, ...]
    final_psnr_db: float
    final_ssim: float
    time_to_95pct_final_psnr_s: float
    time_to_psnr20_s: Optional[float]
    plateaued: bool


def _first_time_at(samples: Sequence[QualitySample], threshold_db: float) -> Optional[float]:
    for i, s in enumerate(samples):
        if s.psnr_db >= threshold_db:
            return 0.0 if i == 0 else s.wall_clock_s
    return None


def _has_plateaued(psnrs: Sequence[float], window: int, tol_db: float) -> bool:
    if len(psnrs) < window:
        return False
    tail = psnrs[-window:]
    return max(tail) - min(tail) < tol_db


def _build_report(kf_id: int, samples: list[QualitySample], window: int, tol_db: float) -> QualityReport:
    if not samples:
        raise ValueError(f"keyframe {kf_id} was never sampled")
    psnrs = [s.psnr_db for s in samples]
    final_psnr = psnrs[-1]
    t95 = _first_time_at(samples, 0.95 * final_psnr)
    assert t95 is not None  # the final sample always qualifies
    return QualityReport(
        keyframe_id=kf_id,
        samples=tuple(samples),
        final_psnr_db=final_psnr,
        final_ssim=samples[-1].ssim,
        time_to_95pct_final_psnr_s=t95,
        time_to_psnr20_s=_first_time_at(samples, 20.0),
        plateaued=_has_plateaued(psnrs, window, tol_db),
    )


def keyframe_quality(mapper: Mapper, kf: Keyframe) -> tuple[float, float]:
    """PSNR/SSIM of the current map rendered at one keyframe's pose."""
    out = raster.render(mapper.map.views(), kf.pose, kf.intrinsics)
    rendered = out.rgb * 255.0
    return psnr(kf.frame.rgb, rendered), ssim(kf.frame.rgb, rendered)


def measure_map_speed(
    frames: Iterable[Frame],
    config: Optional[MapperConfig] = None,
    *,
    seed: int = 0,
    sample_period_s: float = 0.5,
    plateau_window: int = 10,
    plateau_db: float = 0.05,
    max_wall_s: float = 900.0,
    shared_map: Optional[SharedMap] = None,
) -> list[QualityReport]:
    """Run the mapper over a frame log and track per-keyframe quality.

    Every keyframe's render is scored against its reference image on a
    fixed wall-clock sampling grid; after the log is exhausted the
    optimizer keeps running until every keyframe's PSNR has plateaued
    (spread below `plateau_db` across the last `plateau_window` samples)
    or `max_wall_s` is hit. With a zero per-frame iteration budget the
    map can no longer change, so the plateau samples are taken
    back-to-back instead of on the grid.

    Samples are also appended to each keyframe's quality_history.
    """
    cfg = config if config is not None else MapperConfig()
    mapper = Mapper(config=cfg, shared_map=shared_map, seed=seed)
    t0 = time.perf_counter()
    kf_added_at: list[float] = []
    series: list[list[QualitySample]] = []

    def now() -> float:
        return time.perf_counter() - t0

    def sample_all() -> None:
        for i, kf in enumerate(mapper.keyframes):
            p, s = keyframe_quality(mapper, kf)
            entry = QualitySample(max(0.0, now() - kf_added_at[i]), p, s)
            series[i].append(entry)
            kf.quality_history.append(entry)

    def all_plateaued() -> bool:
        return all(
            _has_plateaued([s.psnr_db for s in sam], plateau_window, plateau_db)
            for sam in series
        )

    next_sample = sample_period_s
    for frame in frames:
        arrived = now()
        mapper.process_frame(frame)
        while len(kf_added_at) < len(mapper.keyframes):
            kf_added_at.append(arrived)
            series.append([])
        if now() >= next_sample:
            sample_all()
            next_sample = now() + sample_period_s

    if not mapper.keyframes:
        return []

    optimizing = cfg.iters_per_frame > 0
    sample_all()
    while not all_plateaued() and now() < max_wall_s:
        if optimizing:
            target = now() + sample_period_s
            while now() < target:
                mapper.optimize_step()
        sample_all()

    return [
        _build_report(i, sam, plateau_window, plateau_db)
        for i, sam in enumerate(series)
    ]


def write_map_speed_csv(reports: Sequence[QualityReport], path) -> None:
    """One row per quality sample; per-keyframe summary columns repeated."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MAP_SPEED_CSV_HEADER)
        for rep in reports:
            t20 = "" if rep.time_to_psnr20_s is None else f"{rep.time_to_psnr20_s:.6f}"
            for s in rep.samples:
                writer.writerow(
                    [
                        rep.keyframe_id,
                        f"{s.wall_clock_s:.6f}",
                        f"{s.psnr_db:.6f}",
                        f"{s.ssim:.8f}",
                        f"{rep.final_psnr_db:.6f}",
                        f"{rep.final_ssim:.8f}",
                        f"{rep.time_to_95pct_final_psnr_s:.6f}",
                        t20,
                        int(rep.plateaued),
                    ]
                )


# ---------------------------------------------------------------------------
# viewer FPS / scheduling modes


@dataclass(frozen=True)
class FpsReport:
    mode: str
    n_gaussians: int
    optimizer_active: bool
    duration_s: float
    frame_times_s: tuple[float, ...]
    median_frame_time_s: float
    p95_frame_time_s: float
    viewer_fps: float
    optimizer_iters_per_s: float


def look_at_pose(eye: Vec3, target: Vec3, up: Vec3 = Vec3(0.0, 0.0, 1.0)) -> PoseSE3:
    """Camera-to-world pose with the optical axis pointed at `target`.

    Camera frame is z-forward / x-right / y-down, so with a world-up hint
    the image keeps the horizon level.
    """
    fwd = np.array([target.x - eye.x, target.y - eye.y, target.z - eye.z])
    norm = np.linalg.norm(fwd)
    if norm == 0.0:
        raise ValueError("eye and target coincide")
    z = fwd / norm
    upv = np.array([up.x, up.y, up.z], dtype=float)
    x = np.cross(z, upv)
    xn = np.linalg.norm(x)
    if xn < 1e-12:  # looking straight along up: pick any horizontal right
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        xn = np.linalg.norm(x)
    x = x / xn
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=1)
    return PoseSE3(rotation=Quat.from_matrix(rot), translation=eye)


def orbit_pose(
    index: int,
    *,
    radius: float = 6.0,
    height: float = 1.5,
    target: Vec3 = Vec3(0.0, 0.0, 0.0),
    step_rad: float = 0.05,
) -> PoseSE3:
    """Camera stepped around a circle, always looking at the target."""
    theta = index * step_rad
    eye = Vec3(
        target.x + radius * math.cos(theta),
        target.y + radius * math.sin(theta),
        target.z + height,
    )
    return look_at_pose(eye, target)


def synthetic_cloud(n: int, seed: int = 0, extent: float = 2.0):
    """Random gaussian-parameter arrays for load benchmarks."""
    rng = np.random.default_rng(seed)
    positions = rng.uniform(-extent, extent, size=(n, 3))
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    half = rng.uniform(0.0, math.pi, size=n) / 2.0
    rotations = np.column_stack(
        [np.cos(half), axes * np.sin(half)[:, None]]
    )
    log_scales = rng.uniform(math.log(0.02), math.log(0.08), size=(n, 3))
    opacity_logits = rng.uniform(0.0, 2.0, size=n)
    colors = rng.uniform(0.0, 1.0, size=(n, 3))
    return positions, rotations, log_scales, opacity_logits, colors


def _bench_camera(width: int, height: int) -> CameraIntrinsics:
    f = 0.9 * width
    return CameraIntrinsics(
        fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height
    )


def _bench_scene(
    n_gaussians: int, width: int, height: int, seed: int
) -> tuple[Mapper, SharedMap, CameraIntrinsics]:
    """A populated mapper with one supervision keyframe and a published epoch."""
    shared = SharedMap()
    cfg = MapperConfig(max_gaussians=max(200_000, n_gaussians))
    mapper = Mapper(config=cfg, shared_map=shared, seed=seed)
    mapper.map.append_batch(*synthetic_cloud(n_gaussians, seed=seed))
    cam = _bench_camera(width, height)
    pose = orbit_pose(0)
    reference = raster.render(mapper.map.views(), pose, cam)
    rgb = np.clip(np.rint(reference.rgb * 255.0), 0, 255).astype(np.uint8)
    depth = np.zeros((height, width), dtype=np.float32)
    frame = Frame(timestamp_us=0, pose=pose, intrinsics=cam, rgb=rgb, depth=depth)
    mapper.keyframes.append(Keyframe(frame=frame, keyframe_id=0))
    mapper.publish()
    return mapper, shared, cam


def _viewer_frame(shared: SharedMap, cam: CameraIntrinsics, index: int) -> float:
    """One full viewer-path pass (snapshot -> arrays -> render); returns seconds."""
    t0 = time.perf_counter()
    snap = shared.reader_acquire()
    view = snap.arrays()
    raster.render(view, orbit_pose(index), cam)
    return time.perf_counter() - t0


class _FrameClock:
    """Completion-to-completion viewer frame intervals.

    This is what a person watching the viewer experiences: in coupled mode
    the optimizer step sitting between two renders lands in the interval,
    which is exactly the contention the benchmark exists to expose.
    """

    def __init__(self):
        self._last = time.perf_counter()
        self.intervals: list[float] = []

    def tick(self) -> None:
        t = time.perf_counter()
        self.intervals.append(t - self._last)
        self._last = t


def _optimizer_tick(mapper: Mapper, counter: list) -> None:
    mapper.optimize_step()
    counter[0] += 1
    if counter[0] % mapper.config.publish_every == 0:
        mapper.publish()


def measure_viewer_fps(
    mode: str,
    n_gaussians: int = 50_000,
    seconds: float = 5.0,
    *,
    optimizer_active: bool = True,
    width: int = 336,
    height: int = 188,
    seed: int = 0,
    min_frames: int = 3,
) -> FpsReport:
    """Drive the viewer render path from a moving camera and time every frame.

    decoupled: the optimizer runs in its own thread over the shared map
    while the caller's thread renders continuously. coupled: a single
    thread alternates one optimizer step with one viewer frame. With
    optimizer_active=False both modes degenerate to a plain render loop
    over a static published snapshot.
    """
    if mode not in ("coupled", "decoupled"):
        raise ValueError(f"unknown mode {mode!r}")
    mapper, shared, cam = _bench_scene(n_gaussians, width, height, seed)
    iters = [0]
    t0 = time.perf_counter()
    deadline = t0 + seconds
    clock = _FrameClock()

    def keep_going() -> bool:
        return time.perf_counter() < deadline or len(clock.intervals) < min_frames

    if optimizer_active and mode == "decoupled":
        stop = threading.Event()

        def optimizer_lane():
            while not stop.is_set():
                _optimizer_tick(mapper, iters)

        lane = threading.Thread(target=optimizer_lane, daemon=True)
        lane.start()
        try:
            while keep_going():
                _viewer_frame(shared, cam, len(clock.intervals))
                clock.tick()
        finally:
            stop.set()
            lane.join()
    elif optimizer_active:  # coupled: strict alternation on one thread
        while keep_going():
            _optimizer_tick(mapper, iters)
            _viewer_frame(shared, cam, len(clock.intervals))
            clock.tick()
    else:
        while keep_going():
            _viewer_frame(shared, cam, len(clock.intervals))
            clock.tick()

    duration = time.perf_counter() - t0
    frame_times = clock.intervals
    arr = np.array(frame_times)
    return FpsReport(
        mode=mode,
        n_gaussians=n_gaussians,
        optimizer_active=optimizer_active,
        duration_s=duration,
        frame_times_s=tuple(frame_times),
        median_frame_time_s=float(np.median(arr)),
        p95_frame_time_s=float(np.percentile(arr, 95)),
        viewer_fps=len(frame_times) / duration,
        optimizer_iters_per_s=iters[0] / duration,
    )


def measure_optimizer_rate(
    n_readers: int,
    n_gaussians: int = 50_000,
    seconds: float = 5.0,
    *,
    width: int = 336,
    height: int = 188,
    seed: int = 0,
    min_iters: int = 3,
) -> float:
    """Optimizer iterations/sec while n_readers viewer threads render freely."""
    mapper, shared, cam = _bench_scene(n_gaussians, width, height, seed)
    stop = threading.Event()

    def reader_lane():
        i = 0
        while not stop.is_set():
            _viewer_frame(shared, cam, i)
            i += 1

    lanes = [threading.Thread(target=reader_lane, daemon=True) for _ in range(n_readers)]
    for lane in lanes:
        lane.start()
    iters = [0]
    t0 = time.perf_counter()
    deadline = t0 + seconds
    try:
        while time.perf_counter() < deadline or iters[0] < min_iters:
            _optimizer_tick(mapper, iters)
    finally:
        stop.set()
        for lane in lanes:
            lane.join()
    return iters[0] / (time.perf_counter() - t0)


def write_fps_csv(reports: Sequence[FpsReport], path) -> None:
    """One row per timed viewer frame; run-level summary columns repeated."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FPS_CSV_HEADER)
        for rep in reports:
            for i, ft in enumerate(rep.frame_times_s):
                writer.writerow(
                    [
                        rep.mode,
                        rep.n_gaussians,
                        int(rep.optimizer_active),
                        i,
                        f"{ft * 1e3:.3f}",
                        f"{rep.median_frame_time_s * 1e3:.3f}",
                        f"{rep.p95_frame_time_s * 1e3:.3f}",
                        f"{rep.viewer_fps:.3f}",
                        f"{rep.optimizer_iters_per_s:.3f}",
                    ]
                )
