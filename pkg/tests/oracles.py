"""Independent reference implementations used to verify the fast paths.

Everything here is deliberately naive and shares no code with the package:
whole-image numpy expressions, numeric differentiation, third-party rotation
math, and explicit windowed loops. Slow is fine; these only run in tests.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from telesplat import raster
from telesplat.core import CameraIntrinsics, Keyframe, PoseSE3
from telesplat.gaussian_map import GaussianMap, MapArrays

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0


def numeric_projection_jacobian(p_cam, fx, fy, cx, cy, h=1e-5):
    """Central-difference Jacobian of the pinhole projection, 2x3."""
    def proj(p):
        return np.array([fx * p[0] / p[2] + cx, fy * p[1] / p[2] + cy])

    jac = np.zeros((2, 3))
    for k in range(3):
        dp = np.zeros(3)
        dp[k] = h
        jac[:, k] = (proj(p_cam + dp) - proj(p_cam - dp)) / (2 * h)
    return jac


def project_reference(position, quat_wxyz, log_scale, opacity_logit,
                      cam_pose: PoseSE3, intrinsics: CameraIntrinsics):
    """EWA projection of one gaussian built from numpy matrix expressions
    and a numerically differentiated Jacobian. None when culled."""
    rot_cw = Rotation.from_quat([cam_pose.rotation.x, cam_pose.rotation.y,
                                 cam_pose.rotation.z, cam_pose.rotation.w]).as_matrix()
    t_cw = cam_pose.translation.to_array()
    p_cam = rot_cw.T @ (np.asarray(position) - t_cw)
    if p_cam[2] <= 0.05:
        return None
    w, x, y, z = quat_wxyz
    r_g = Rotation.from_quat([x, y, z, w]).as_matrix()
    cov_world = r_g @ np.diag(np.exp(2.0 * np.asarray(log_scale))) @ r_g.T
    cov_cam = rot_cw.T @ cov_world @ rot_cw
    jac = numeric_projection_jacobian(p_cam, intrinsics.fx, intrinsics.fy,
                                      intrinsics.cx, intrinsics.cy)
    cov2d = jac @ cov_cam @ jac.T + 0.3 * np.eye(2)
    mean2d = np.array([
        intrinsics.fx * p_cam[0] / p_cam[2] + intrinsics.cx,
        intrinsics.fy * p_cam[1] / p_cam[2] + intrinsics.cy,
    ])
    rx = 3.0 * np.sqrt(cov2d[0, 0])
    ry = 3.0 * np.sqrt(cov2d[1, 1])
    if (mean2d[0] + rx < 0 or mean2d[0] - rx > intrinsics.width - 1
            or mean2d[1] + ry < 0 or mean2d[1] - ry > intrinsics.height - 1):
        return None
    return {
        "mean2d": mean2d,
        "cov2d": cov2d,
        "depth": float(p_cam[2]),
        "opacity": 1.0 / (1.0 + np.exp(-opacity_logit)),
    }


def render_reference(view: MapArrays, cam_pose: PoseSE3, intrinsics: CameraIntrinsics):
    """Brute-force compositing: every projected splat visits the whole image
    in depth order with no tiling and no transmittance early-stop.

    Returns float64 (rgb, depth, alpha) buffers.
    """
    h, w = intrinsics.height, intrinsics.width
    projected = []
    for i in range(view.n):
        p = project_reference(view.positions[i], view.rotations[i], view.log_scales[i],
                              view.opacity_logits[i], cam_pose, intrinsics)
        if p is not None:
            projected.append((p["depth"], int(view.ids[i]), p, view.colors[i]))
    projected.sort(key=lambda rec: (rec[0], rec[1]))

    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    transmittance = np.ones((h, w))
    rgb = np.zeros((h, w, 3))
    depth_acc = np.zeros((h, w))
    alpha_acc = np.zeros((h, w))
    for view_depth, _, p, color in projected:
        conic = np.linalg.inv(p["cov2d"])
        dx = us - p["mean2d"][0]
        dy = vs - p["mean2d"][1]
        sigma = 0.5 * (conic[0, 0] * dx * dx + conic[1, 1] * dy * dy) + conic[0, 1] * dx * dy
        alpha = np.minimum(p["opacity"] * np.exp(-sigma), ALPHA_CLAMP)
        active = (sigma >= 0) & (alpha >= ALPHA_SKIP)
        weight = np.where(active, transmittance * alpha, 0.0)
        rgb += weight[:, :, None] * np.asarray(color)[None, None, :]
        depth_acc += weight * view_depth
        alpha_acc += weight
        transmittance = np.where(active, transmittance * (1.0 - alpha), transmittance)
    depth = np.where(alpha_acc > 0, depth_acc / np.maximum(alpha_acc, 1e-300), 0.0)
    return rgb, depth, alpha_acc


def finite_difference_gradients(gmap: GaussianMap, keyframe: Keyframe, h=1e-5):
    """Central-difference gradients of the production loss value.

    Perturbs each parameter of each gaussian in place and re-evaluates the
    loss; verifies that the analytic gradients differentiate exactly the
    loss the package computes.
    """
    def loss():
        return raster.loss_and_gradients(gmap.views(), keyframe)[0]

    n = gmap.count
    out = {
        "position": np.zeros((n, 3)),
        "rotation": np.zeros((n, 4)),
        "log_scale": np.zeros((n, 3)),
        "opacity_logit": np.zeros(n),
        "color": np.zeros((n, 3)),
    }
    arrays = {
        "position": gmap.positions,
        "rotation": gmap.rotations,
        "log_scale": gmap.log_scales,
        "opacity_logit": gmap.opacity_logits,
        "color": gmap.colors,
    }
    for name, arr in arrays.items():
        grad = out[name]
        flat_shape = grad.shape
        for idx in np.ndindex(*flat_shape):
            saved = arr[idx]
            arr[idx] = saved + h
            lp = loss()
            arr[idx] = saved - h
            lm = loss()
            arr[idx] = saved
            grad[idx] = (lp - lm) / (2.0 * h)
    return out


def gaussian_window(size=11, sigma=1.5):
    """Normalized 2D gaussian weighting window."""
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def mse_naive(a, b):
    """Mean squared error via an explicit element loop."""
    af = np.asarray(a, dtype=np.float64).ravel()
    bf = np.asarray(b, dtype=np.float64).ravel()
    total = 0.0
    for i in range(af.size):
        d = af[i] - bf[i]
        total += d * d
    return total / af.size


def psnr_naive(a, b, max_value=255.0):
    mse = mse_naive(a, b)
    if mse == 0:
        return 99.0
    return 10.0 * np.log10(max_value * max_value / mse)


def ssim_naive(a, b, max_value=255.0):
    """Windowed SSIM computed window by window with explicit loops.

    Matches the production definition: 11x11 gaussian window sigma 1.5,
    C1=(0.01 L)^2, C2=(0.03 L)^2, border cropped to valid windows, channels
    averaged. Only suitable for small images.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    win = gaussian_window()
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    h, w, channels = a.shape
    values = []
    for ch in range(channels):
        x = a[:, :, ch]
        y = b[:, :, ch]
        total = 0.0
        count = 0
        for cy in range(5, h - 5):
            for cx in range(5, w - 5):
                wx = x[cy - 5:cy + 6, cx - 5:cx + 6]
                wy = y[cy - 5:cy + 6, cx - 5:cx + 6]
                mu_x = (win * wx).sum()
                mu_y = (win * wy).sum()
                var_x = (win * wx * wx).sum() - mu_x * mu_x
                var_y = (win * wy * wy).sum() - mu_y * mu_y
                cov = (win * wx * wy).sum() - mu_x * mu_y
                num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
                den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
                total += num / den
                count += 1
        values.append(total / count)
    return float(np.mean(values))
