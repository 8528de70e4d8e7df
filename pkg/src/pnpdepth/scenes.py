"""Procedural synthetic RGB-D scenes with dense ground-truth depth.

A scene is a far-to-near ground ramp plus a handful of boxes and spheres
rendered by per-pixel z-buffer.  RGB is a deterministic shading of depth
(per-surface albedo times inverse normalized depth, plus small seeded
noise), so depth is partially inferable from color the way it is in real
imagery.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pnm
from .autodiff import Tensor
from .errors import ConfigError


@dataclass(frozen=True)
class SceneParams:
    height: int = 48
    width: int = 64
    d_min: float = 0.5
    d_max: float = 10.0
    n_objects: int = 6

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"scene extents must be >= 16, got {self.height}x{self.width}")
        if not (0 < self.d_min < self.d_max):
            raise ConfigError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if self.n_objects < 0:
            raise ConfigError("n_objects must be non-negative")


@dataclass
class Scene:
    rgb: Tensor      # (3, H, W), values in [0, 1]
    depth: Tensor    # (1, H, W), meters, strictly positive
    seed: int


@dataclass(frozen=True)
class GroundPlane:
    near: float   # depth at the bottom image row
    far: float    # depth at the top image row
    albedo: tuple[float, float, float]

    def depth_at(self, v: int, u: int, height: int) -> float:
        t = v / (height - 1)
        return self.far + (self.near - self.far) * t


@dataclass(frozen=True)
class BoxPrim:
    v0: int
    v1: int
    u0: int
    u1: int
    depth: float
    albedo: tuple[float, float, float]

    def depth_at(self, v: int, u: int) -> float | None:
        if self.v0 <= v < self.v1 and self.u0 <= u < self.u1:
            return self.depth
        return None


@dataclass(frozen=True)
class SpherePrim:
    cv: float
    cu: float
    radius: float   # pixels
    depth: float    # depth at the limb; center bulges nearer
    bulge: float    # meters

    albedo: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def depth_at(self, v: int, u: int) -> float | None:
        rr = (v - self.cv) ** 2 + (u - self.cu) ** 2
        if rr <= self.radius ** 2:
            return self.depth - self.bulge * np.sqrt(1.0 - rr / self.radius ** 2)
        return None


def scene_primitives(seed: int, params: SceneParams):
    """The deterministic primitive set a given (seed, params) renders."""
    params.validate()
    rng = np.random.default_rng(seed)
    span = params.d_max - params.d_min
    plane = GroundPlane(
        near=params.d_min + 0.55 * span,
        far=params.d_max,
        albedo=tuple(rng.uniform(0.4, 0.9, 3)),
    )
    prims: list[BoxPrim | SpherePrim] = []
    h, w = params.height, params.width
    for _ in range(params.n_objects):
        albedo = tuple(rng.uniform(0.2, 1.0, 3))
        depth = params.d_min + span * rng.uniform(0.05, 0.35)
        if rng.random() < 0.5:
            bh = int(rng.integers(h // 8, h // 3 + 1))
            bw = int(rng.integers(w // 8, w // 3 + 1))
            v0 = int(rng.integers(0, h - bh))
            u0 = int(rng.integers(0, w - bw))
            prims.append(BoxPrim(v0, v0 + bh, u0, u0 + bw, depth, albedo))
        else:
            radius = float(rng.uniform(min(h, w) / 10, min(h, w) / 4))
            cv = float(rng.uniform(0, h - 1))
            cu = float(rng.uniform(0, w - 1))
            bulge = float(rng.uniform(0.1, 0.5))
            prims.append(SpherePrim(cv, cu, radius, depth, bulge, albedo))
    return plane, prims


def _prim_depth_map(prim, h: int, w: int) -> np.ndarray:
    """Vectorized depth map of one primitive, +inf where it has no surface."""
    vv, uu = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    out = np.full((h, w), np.inf)
    if isinstance(prim, BoxPrim):
        inside = (vv >= prim.v0) & (vv < prim.v1) & (uu >= prim.u0) & (uu < prim.u1)
        out[inside] = prim.depth
    else:
        rr = (vv - prim.cv) ** 2 + (uu - prim.cu) ** 2
        inside = rr <= prim.radius ** 2
        out[inside] = prim.depth - prim.bulge * np.sqrt(
            1.0 - rr[inside] / prim.radius ** 2)
    return out


def generate(seed: int, params: SceneParams | None = None) -> Scene:
    """Render the scene for (seed, params); bit-identical across calls."""
    params = params or SceneParams()
    plane, prims = scene_primitives(seed, params)
    h, w = params.height, params.width

    vv = np.arange(h, dtype=float)[:, None]
    t = vv / (h - 1)
    depth = np.broadcast_to(plane.far + (plane.near - plane.far) * t, (h, w)).copy()
    albedo = np.empty((3, h, w))
    albedo[:] = np.asarray(plane.albedo)[:, None, None]

    for prim in prims:
        d = _prim_depth_map(prim, h, w)
        closer = d < depth
        depth = np.where(closer, d, depth)
        for c in range(3):
            albedo[c] = np.where(closer, prim.albedo[c], albedo[c])

    depth = np.clip(depth, params.d_min, params.d_max)

    # shading noise on its own seed stream so the primitive draws stay
    # independent of it
    rng = np.random.default_rng([seed, 0x5caded])
    norm = (depth - params.d_min) / (params.d_max - params.d_min)
    rgb = albedo * (1.0 - norm)[None] + rng.normal(0.0, 0.01, (3, h, w))
    rgb = np.clip(rgb, 0.0, 1.0)

    return Scene(rgb=Tensor(rgb), depth=Tensor(depth[None]), seed=seed)


def generate_batch(base_seed: int, count: int,
                   params: SceneParams | None = None) -> list[Scene]:
    return [generate(base_seed + i, params) for i in range(count)]


def save_scene(scene: Scene, stem) -> tuple[Path, Path]:
    """Write {stem}.ppm (rgb) and {stem}_depth.pgm (millimeter depth)."""
    stem = Path(stem)
    rgb_path = stem.with_suffix(".ppm")
    depth_path = stem.parent / (stem.name + "_depth.pgm")
    pnm.write_ppm8(rgb_path, scene.rgb.data)
    pnm.write_pgm16(depth_path, pnm.depth_to_u16mm(scene.depth.data[0]))
    return rgb_path, depth_path


def load_scene(stem) -> Scene:
    """Read a scene pair written by save_scene; seed is not recoverable."""
    stem = Path(stem)
    rgb = pnm.read_ppm8(stem.with_suffix(".ppm"))
    depth = pnm.u16mm_to_depth(pnm.read_pgm16(stem.parent / (stem.name + "_depth.pgm")))
    if depth.shape != rgb.shape[1:]:
        raise ConfigError(f"scene pair shape mismatch at {stem}")
    return Scene(rgb=Tensor(rgb), depth=Tensor(depth[None]), seed=-1)
