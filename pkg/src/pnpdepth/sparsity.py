"""Sparse depth observations from dense ground truth.

Two generators: seeded uniform sampling without replacement, and synthetic
rotating-LiDAR scanline masks.  The LiDAR model is a pure image-space
elevation projection: each channel's elevation angle is traced across the
image columns and the nearest pixel row is marked.  No 3-d re-casting is
performed; dense ground truth already encodes occlusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError


@dataclass
class SparseDepth:
    """Masked depth observations: values = mask * dense depth, exactly."""

    values: Tensor   # (1, H, W), zero where invalid
    mask: Tensor     # (1, H, W), elements in {0, 1}

    @property
    def count(self) -> int:
        return int(self.mask.data.sum())


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float


@dataclass(frozen=True)
class LidarSpec:
    """Scan geometry of a rotating LiDAR.

    ``mount_height_m`` is carried for completeness but does not enter the
    image-space projection (there is no 3-d scene to re-cast against).
    """

    fov_deg: float
    vres_deg: float
    rot_noise_deg: float = 0.05
    mount_height_m: float = 0.0
    pitch_center_deg: float = 0.0

    @property
    def channels(self) -> int:
        return int(np.floor(self.fov_deg / self.vres_deg)) + 1

    def elevations_deg(self) -> np.ndarray:
        """Channel elevation angles: pitch_center +/- fov/2 stepped by vres."""
        start = self.pitch_center_deg - self.fov_deg / 2.0
        return start + np.arange(self.channels) * self.vres_deg

    def validate(self) -> None:
        if self.fov_deg <= 0 or self.vres_deg <= 0:
            raise ConfigError(
                f"LiDAR spec needs positive fov and vres, got "
                f"fov={self.fov_deg}, vres={self.vres_deg}")
        if self.rot_noise_deg < 0:
            raise ConfigError("rot_noise_deg must be non-negative")


LIDAR_PRESETS: dict[str, LidarSpec] = {
    "vlp16": LidarSpec(fov_deg=30.0, vres_deg=2.0),
    "vlp32c": LidarSpec(fov_deg=40.0, vres_deg=0.3),
    "hdl32e": LidarSpec(fov_deg=41.0, vres_deg=1.3),
    "hdl64e": LidarSpec(fov_deg=27.0, vres_deg=0.4),
}


def default_intrinsics(height: int, width: int) -> CameraIntrinsics:
    """Pinhole with fx = fy = image height, principal point at the center."""
    return CameraIntrinsics(fx=float(height), fy=float(height),
                            cx=width / 2.0, cy=height / 2.0)


def _as_depth_array(depth) -> np.ndarray:
    arr = depth.data if isinstance(depth, Tensor) else np.asarray(depth, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] != 1:
        raise ConfigError(f"expected (1, H, W) depth, got shape {arr.shape}")
    return arr


def sample_uniform(depth, n: int, seed: int) -> SparseDepth:
    """Pick exactly n distinct pixels uniformly without replacement."""
    d = _as_depth_array(depth)
    _, h, w = d.shape
    if not (0 <= n <= h * w):
        raise ConfigError(f"sample count {n} out of range for {h}x{w} image")
    rng = np.random.default_rng(seed)
    mask = np.zeros(h * w)
    if n:
        mask[rng.choice(h * w, size=n, replace=False)] = 1.0
    mask = mask.reshape(1, h, w)
    return SparseDepth(values=Tensor(mask * d), mask=Tensor(mask))


def sample_lidar(depth, spec: LidarSpec, camera: CameraIntrinsics | None = None,
                 seed: int = 0) -> SparseDepth:
    """Mark the pixels each LiDAR channel sweeps across the image.

    Per channel, per column: elevation angle (jittered by the rotation
    noise) maps to row v = cy - fy * tan(theta); the nearest in-bounds
    pixel is marked.  Duplicate hits collapse.
    """
    d = _as_depth_array(depth)
    _, h, w = d.shape
    spec.validate()
    camera = camera or default_intrinsics(h, w)
    if camera.fy == 0 or camera.fx == 0:
        raise ConfigError("degenerate intrinsics: fx and fy must be nonzero")

    rng = np.random.default_rng(seed)
    mask = np.zeros((1, h, w))
    cols = np.arange(w)
    for theta in spec.elevations_deg():
        jitter = (rng.normal(0.0, spec.rot_noise_deg, size=w)
                  if spec.rot_noise_deg else np.zeros(w))
        theta_u = np.radians(theta + jitter)
        v = np.rint(camera.cy - camera.fy * np.tan(theta_u)).astype(int)
        ok = (v >= 0) & (v < h)
        mask[0, v[ok], cols[ok]] = 1.0
    return SparseDepth(values=Tensor(mask * d), mask=Tensor(mask))
