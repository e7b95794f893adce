"""Differentiable gaussian-splat renderer.

Projects 3D gaussians through a pinhole camera, composites them front to
back into RGB / depth / alpha buffers, and computes analytic gradients of an
L1 photometric loss with respect to every gaussian parameter. All functions
are pure and reentrant: they read immutable array views and write only to
buffers they allocate, so any number of threads may render concurrently.

Camera poses are camera-to-world transforms (the pose of the camera body in
the world frame); the renderer inverts them internally.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import CameraIntrinsics, Gaussian, Keyframe, PoseSE3
from .gaussian_map import MapArrays

NEAR_PLANE = _kernels.NEAR_PLANE


@dataclass(frozen=True)
class RenderedView:
    """Output buffers of one render pass.

    depth is the alpha-weighted mean splat depth in metres, 0 where nothing
    accumulated; contrib counts splats that actually blended into the pixel.
    """

    rgb: np.ndarray       # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray     # (H, W) float32 metres
    alpha: np.ndarray     # (H, W) float32 in [0, 1]
    contrib: np.ndarray   # (H, W) uint16


@dataclass(frozen=True)
class ProjectedSplat:
    mean2d: np.ndarray      # (2,) pixel coordinates
    cov2d: np.ndarray       # (2, 2) symmetric, px^2, regularized
    view_depth: float       # metres along camera z
    color: np.ndarray       # (3,)
    opacity: float


def _world_to_camera(cam_pose: PoseSE3) -> tuple[np.ndarray, np.ndarray]:
    r_cw = cam_pose.rotation.to_matrix()
    r_wc = np.ascontiguousarray(r_cw.T)
    t_wc = -r_wc @ cam_pose.translation.to_array()
    return r_wc, t_wc


def _project_arrays(view: MapArrays, cam_pose: PoseSE3, intrinsics: CameraIntrinsics):
    r_wc, t_wc = _world_to_camera(cam_pose)
    return _kernels.project_gaussians(
        view.positions, view.rotations, view.log_scales, view.opacity_logits,
        r_wc, t_wc,
        intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy,
        intrinsics.width, intrinsics.height,
    )


def _depth_order(valid, depth, ids) -> np.ndarray:
    idx = np.nonzero(valid)[0]
    if idx.size == 0:
        return idx
    # primary key view depth, ties broken by insertion id
    return idx[np.lexsort((ids[idx], depth[idx]))]


def project_gaussian(g: Gaussian, cam_pose: PoseSE3,
                     intrinsics: CameraIntrinsics) -> ProjectedSplat | None:
    """Project a single gaussian; returns None when culled.

    Culling happens when the view depth is at or below the 0.05 m near
    plane or the 3-sigma extent of the projected ellipse misses the image.
    """
    view = MapArrays(
        g.position.to_array()[None],
        np.array([[g.rotation.w, g.rotation.x, g.rotation.y, g.rotation.z]]),
        g.log_scale.to_array()[None],
        np.array([g.opacity_logit]),
        g.color.to_array()[None],
        np.zeros(1, dtype=np.int64),
    )
    valid, mean2d, cov2d, _, _, depth, opacity = _project_arrays(view, cam_pose, intrinsics)
    if not valid[0]:
        return None
    va, vb, vc = cov2d[0]
    return ProjectedSplat(
        mean2d=mean2d[0].copy(),
        cov2d=np.array([[va, vb], [vb, vc]]),
        view_depth=float(depth[0]),
        color=g.color.to_array(),
        opacity=float(opacity[0]),
    )


def _empty_view(intrinsics: CameraIntrinsics) -> RenderedView:
    h, w = intrinsics.height, intrinsics.width
    return RenderedView(
        rgb=np.zeros((h, w, 3), dtype=np.float32),
        depth=np.zeros((h, w), dtype=np.float32),
        alpha=np.zeros((h, w), dtype=np.float32),
        contrib=np.zeros((h, w), dtype=np.uint16),
    )


def _composite(view: MapArrays, cam_pose: PoseSE3, intrinsics: CameraIntrinsics):
    """Shared forward pass; returns raw f64 buffers plus replay state."""
    valid, mean2d, _, conic, bbox, depth, opacity = _project_arrays(view, cam_pose, intrinsics)
    order = _depth_order(valid, depth, view.ids)
    tile_start, items = _kernels.bin_tiles(order, bbox, intrinsics.width, intrinsics.height)
    out = _kernels.composite_forward(
        tile_start, items, mean2d, conic, bbox, depth, opacity, view.colors,
        intrinsics.width, intrinsics.height,
    )
    projected = (valid, mean2d, conic, bbox, depth, opacity)
    return out, projected, (tile_start, items)


def render(view: MapArrays, cam_pose: PoseSE3, intrinsics: CameraIntrinsics) -> RenderedView:
    """Render the map into RGB, depth, alpha, and contributor-count buffers."""
    if view.n == 0:
        return _empty_view(intrinsics)
    (rgb, depth_buf, alpha, ncontrib, _, _), _, _ = _composite(view, cam_pose, intrinsics)
    return RenderedView(
        rgb=rgb.astype(np.float32),
        depth=depth_buf.astype(np.float32),
        alpha=alpha.astype(np.float32),
        contrib=ncontrib,
    )


def render_depth_for_occlusion(view: MapArrays, cam_pose: PoseSE3,
                               intrinsics: CameraIntrinsics) -> np.ndarray:
    """Depth channel only, for compositing meshes against the splat map.

    Zero means "no occluder along this ray".
    """
    return render(view, cam_pose, intrinsics).depth


def loss_and_gradients(view: MapArrays, keyframe: Keyframe):
    """L1 photometric loss against a keyframe and its analytic gradients.

    The loss is the mean absolute difference over all pixels and channels;
    reference depth never enters it, so frames with sparse depth still
    supervise color everywhere. Returns (loss, grads) where grads maps
    parameter name to a dense (n, ...) float64 array aligned with `view`.
    """
    intrinsics = keyframe.intrinsics
    n = view.n
    grads = {
        "position": np.zeros((n, 3)),
        "rotation": np.zeros((n, 4)),
        "log_scale": np.zeros((n, 3)),
        "opacity_logit": np.zeros(n),
        "color": np.zeros((n, 3)),
    }
    reference = keyframe.frame.rgb.astype(np.float64) / 255.0
    if n == 0:
        return float(np.mean(np.abs(reference))), grads

    out, projected, bins = _composite(view, keyframe.pose, intrinsics)
    rgb, _, _, ncontrib, stop_at, final_t = out
    valid, mean2d, conic, bbox, depth, opacity = projected
    tile_start, items = bins

    diff = rgb - reference
    loss = float(np.mean(np.abs(diff)))
    dl_drgb = np.sign(diff) / diff.size

    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opacity = np.zeros(n)
    _kernels.composite_backward(
        tile_start, items, mean2d, conic, bbox, depth, opacity, view.colors,
        stop_at, final_t, ncontrib, dl_drgb, intrinsics.width, intrinsics.height,
        d_mean2d, d_conic, d_opacity, grads["color"],
    )

    r_wc, t_wc = _world_to_camera(keyframe.pose)
    _kernels.chain_gradients(
        valid, view.positions, view.rotations, view.log_scales, view.opacity_logits,
        r_wc, t_wc, intrinsics.fx, intrinsics.fy,
        d_mean2d, d_conic, d_opacity,
        grads["position"], grads["rotation"], grads["log_scale"], grads["opacity_logit"],
    )
    return loss, grads
