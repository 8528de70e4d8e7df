"""Scene generator and PNM round-trip tests."""

import numpy as np
import pytest

from pnpdepth import pnm, scenes
from pnpdepth.errors import ConfigError
from pnpdepth.scenes import BoxPrim, SceneParams


class TestGenerate:
    def test_same_seed_bit_identical(self):
        a = scenes.generate(7)
        b = scenes.generate(7)
        assert a.rgb.data.tobytes() == b.rgb.data.tobytes()
        assert a.depth.data.tobytes() == b.depth.data.tobytes()

    def test_different_seeds_differ(self):
        a = scenes.generate(1)
        b = scenes.generate(2)
        assert a.depth.data.tobytes() != b.depth.data.tobytes()

    def test_depth_within_bounds(self):
        for seed in range(10):
            s = scenes.generate(seed)
            assert s.depth.data.min() >= SceneParams().d_min
            assert s.depth.data.max() <= SceneParams().d_max
            assert np.all(np.isfinite(s.depth.data))
            assert np.all(s.depth.data > 0)

    def test_rgb_in_unit_range(self):
        s = scenes.generate(3)
        assert s.rgb.data.min() >= 0.0 and s.rgb.data.max() <= 1.0
        assert s.rgb.shape == (3, 48, 64)
        assert s.depth.shape == (1, 48, 64)

    def test_empty_scene_is_monotone_ramp(self):
        params = SceneParams(n_objects=0)
        s = scenes.generate(5, params)
        depth = s.depth.data[0]
        # depth decreases from the top row (far) to the bottom row (near)
        assert np.all(np.diff(depth, axis=0) <= 0)
        # constant along each row
        assert np.all(depth == depth[:, :1])

    def test_occlusion_edges_exist(self):
        params = SceneParams()
        span = params.d_max - params.d_min
        for seed in range(20):
            depth = scenes.generate(seed, params).depth.data[0]
            jump = max(np.abs(np.diff(depth, axis=0)).max(),
                       np.abs(np.diff(depth, axis=1)).max())
            assert jump > 0.1 * span

    def test_invalid_bounds_rejected(self):
        with pytest.raises(ConfigError):
            scenes.generate(0, SceneParams(d_min=2.0, d_max=1.0))
        with pytest.raises(ConfigError):
            scenes.generate(0, SceneParams(d_min=0.0))
        with pytest.raises(ConfigError):
            scenes.generate(0, SceneParams(height=8))

    def test_zbuffer_matches_per_pixel_oracle(self):
        # brute-force scalar re-rendering from the primitive parameters
        params = SceneParams(height=32, width=32, n_objects=5)
        for seed in (0, 11, 42):
            scene = scenes.generate(seed, params)
            plane, prims = scenes.scene_primitives(seed, params)
            for v in range(params.height):
                for u in range(params.width):
                    best = plane.far + (plane.near - plane.far) * v / (params.height - 1)
                    for prim in prims:
                        if isinstance(prim, BoxPrim):
                            if prim.v0 <= v < prim.v1 and prim.u0 <= u < prim.u1:
                                best = min(best, prim.depth)
                        else:
                            rr = (v - prim.cv) ** 2 + (u - prim.cu) ** 2
                            if rr <= prim.radius ** 2:
                                cand = prim.depth - prim.bulge * (
                                    1.0 - rr / prim.radius ** 2) ** 0.5
                                best = min(best, cand)
                    best = min(max(best, params.d_min), params.d_max)
                    assert scene.depth.data[0, v, u] == pytest.approx(best, abs=1e-12)


class TestPnmRoundTrip:
    def test_pgm16_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.integers(0, 65536, (13, 17)).astype(np.uint16)
        path = tmp_path / "x.pgm"
        pnm.write_pgm16(path, arr)
        back = pnm.read_pgm16(path)
        np.testing.assert_array_equal(arr, back)

    def test_ppm8_round_trip_quantized(self, tmp_path):
        rng = np.random.default_rng(1)
        rgb = rng.random((3, 9, 11))
        path = tmp_path / "x.ppm"
        pnm.write_ppm8(path, rgb)
        back = pnm.read_ppm8(path)
        assert np.abs(back - rgb).max() <= 0.5 / 255 + 1e-12

    def test_scene_save_load(self, tmp_path):
        scene = scenes.generate(9)
        scenes.save_scene(scene, tmp_path / "scene_0009")
        back = scenes.load_scene(tmp_path / "scene_0009")
        # depth quantized to millimeters
        assert np.abs(back.depth.data - scene.depth.data).max() <= 0.5e-3 + 1e-12
        assert np.abs(back.rgb.data - scene.rgb.data).max() <= 0.5 / 255 + 1e-12

    def test_save_is_byte_stable(self, tmp_path):
        scene = scenes.generate(4)
        p1, _ = scenes.save_scene(scene, tmp_path / "a")
        p2, _ = scenes.save_scene(scene, tmp_path / "b")
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupt_header_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P5\nnot numbers\n")
        with pytest.raises(ConfigError, match="bad.pgm"):
            pnm.read_pgm16(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "short.pgm"
        path.write_bytes(b"P5\n4 4\n65535\n\x00\x01")
        with pytest.raises(ConfigError, match="short.pgm"):
            pnm.read_pgm16(path)

    def test_improvement_map_round_trip(self):
        rng = np.random.default_rng(2)
        delta = rng.normal(0, 0.2, (16, 16))
        enc, scale = pnm.encode_improvement_map(delta)
        back = pnm.decode_improvement_map(enc, scale)
        assert np.abs(back - delta).max() <= scale / 2 + 1e-12
        assert enc.dtype == np.uint16
