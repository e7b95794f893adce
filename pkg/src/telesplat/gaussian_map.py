"""Struct-of-arrays container for the writer-owned gaussian map.

The optimizer mutates this container in place; immutable snapshots of it are
published through `shared_map`. Parameter arrays are float64 so the analytic
gradients stay finite-difference checkable.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .core import LOG_SCALE_MAX, LOG_SCALE_MIN, Gaussian, Quat, Vec3

_INITIAL_CAPACITY = 1024


class MapArrays(NamedTuple):
    """Read-only view bundle consumed by the renderer. All float64 except ids."""

    positions: np.ndarray      # (n, 3) world metres
    rotations: np.ndarray      # (n, 4) quaternion wxyz, unit
    log_scales: np.ndarray     # (n, 3) log-metres per local axis
    opacity_logits: np.ndarray  # (n,)
    colors: np.ndarray         # (n, 3) in [0, 1]
    ids: np.ndarray            # (n,) insertion ids, int64

    @property
    def n(self) -> int:
        return self.positions.shape[0]


class GaussianMap:
    """Mutable gaussian set with amortized append and mask-based removal."""

    def __init__(self, capacity: int = _INITIAL_CAPACITY):
        self.count = 0
        self._next_id = 0
        self._alloc(max(capacity, 16))

    def _alloc(self, capacity: int):
        self.positions = np.zeros((capacity, 3))
        self.rotations = np.zeros((capacity, 4))
        self.rotations[:, 0] = 1.0
        self.log_scales = np.zeros((capacity, 3))
        self.opacity_logits = np.zeros(capacity)
        self.colors = np.zeros((capacity, 3))
        self.ids = np.zeros(capacity, dtype=np.int64)
        self.created_iter = np.zeros(capacity, dtype=np.int64)

    @property
    def capacity(self) -> int:
        return self.positions.shape[0]

    def _grow(self, needed: int):
        cap = self.capacity
        while cap < needed:
            cap *= 2
        for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors", "ids", "created_iter"):
            old = getattr(self, name)
            new = np.zeros((cap,) + old.shape[1:], dtype=old.dtype)
            new[: self.count] = old[: self.count]
            setattr(self, name, new)

    def append_batch(
        self,
        positions: np.ndarray,
        rotations: np.ndarray,
        log_scales: np.ndarray,
        opacity_logits: np.ndarray,
        colors: np.ndarray,
        iteration: int = 0,
    ) -> int:
        """Append n gaussians; returns the number actually added."""
        n = len(positions)
        if n == 0:
            return 0
        if self.count + n > self.capacity:
            self._grow(self.count + n)
        s = slice(self.count, self.count + n)
        self.positions[s] = positions
        self.rotations[s] = rotations / np.linalg.norm(rotations, axis=1, keepdims=True)
        self.log_scales[s] = np.clip(log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX)
        self.opacity_logits[s] = opacity_logits
        self.colors[s] = np.clip(colors, 0.0, 1.0)
        self.ids[s] = np.arange(self._next_id, self._next_id + n)
        self.created_iter[s] = iteration
        self._next_id += n
        self.count += n
        return n

    def append(self, g: Gaussian, iteration: int = 0) -> None:
        self.append_batch(
            g.position.to_array()[None],
            np.array([[g.rotation.w, g.rotation.x, g.rotation.y, g.rotation.z]]),
            g.log_scale.to_array()[None],
            np.array([g.opacity_logit]),
            g.color.to_array()[None],
            iteration,
        )

    def remove_mask(self, mask: np.ndarray) -> int:
        """Remove gaussians where mask is True; returns removal count."""
        n = self.count
        keep = ~mask[:n]
        removed = int(n - keep.sum())
        if removed == 0:
            return 0
        for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors", "ids", "created_iter"):
            arr = getattr(self, name)
            arr[: n - removed] = arr[:n][keep]
        self.count = n - removed
        return removed

    def gaussian(self, i: int) -> Gaussian:
        """Materialize entry i as a value-type Gaussian."""
        if not 0 <= i < self.count:
            raise IndexError(i)
        return Gaussian(
            position=Vec3.from_array(self.positions[i]),
            rotation=Quat(*self.rotations[i]),
            log_scale=Vec3.from_array(self.log_scales[i]),
            opacity_logit=float(self.opacity_logits[i]),
            color=Vec3.from_array(self.colors[i]),
        )

    def clamp_parameters(self):
        """Re-impose construction invariants after a gradient step."""
        n = self.count
        np.clip(self.log_scales[:n], LOG_SCALE_MIN, LOG_SCALE_MAX, out=self.log_scales[:n])
        np.clip(self.colors[:n], 0.0, 1.0, out=self.colors[:n])
        np.clip(self.opacity_logits[:n], -15.0, 15.0, out=self.opacity_logits[:n])
        norms = np.linalg.norm(self.rotations[:n], axis=1, keepdims=True)
        self.rotations[:n] /= norms

    def views(self) -> MapArrays:
        """Read views (not copies) of the live prefix of each parameter array."""
        n = self.count
        return MapArrays(
            self.positions[:n],
            self.rotations[:n],
            self.log_scales[:n],
            self.opacity_logits[:n],
            self.colors[:n],
            self.ids[:n],
        )
