import json
import os
import shutil
import tempfile
import unittest

import numpy as np
import torch

from mafnet.cube import (
    BINOMIAL_KERNEL,
    HSICube,
    NormalizationMode,
    build_pyramid,
    denormalize,
    load_cube,
    meta_path,
    normalize,
    pyramid_down,
    save_cube,
    smooth_random_cube,
)
from mafnet.errors import DataError, DegenerateRangeError, FormatError, IoError, ParamError, ShapeError


def _pyramid_oracle(x):
    # reflect-pad by 2, 5-tap binomial along rows then columns, keep even samples
    padded = np.pad(x, ((0, 0), (2, 2), (2, 2)), mode="reflect")
    bands, height, width = x.shape
    rows = np.zeros((bands, (height + 1) // 2, width + 4))
    for i in range(rows.shape[1]):
        for k in range(5):
            rows[:, i] += BINOMIAL_KERNEL[k] * padded[:, 2 * i + k]
    out = np.zeros((bands, rows.shape[1], (width + 1) // 2))
    for j in range(out.shape[2]):
        for k in range(5):
            out[:, :, j] += BINOMIAL_KERNEL[k] * rows[:, :, 2 * j + k]
    return out


class CubeTestCase(unittest.TestCase):
    def test_rejects_bad_data(self):
        with self.assertRaises(ShapeError):
            HSICube(np.zeros((4, 4)))
        with self.assertRaises(ShapeError):
            HSICube(np.zeros((0, 4, 4)))
        bad = np.zeros((2, 4, 4))
        bad[1, 2, 3] = np.nan
        with self.assertRaises(DataError):
            HSICube(bad)
        with self.assertRaises(ParamError):
            HSICube(np.zeros((1, 2, 2)), value_range=(1.0, 1.0))

    def test_data_is_read_only(self):
        cube = HSICube(np.ones((2, 3, 4)))
        assert cube.shape == (2, 3, 4)
        assert cube.data.dtype == np.float32
        with self.assertRaises(ValueError):
            cube.data[0, 0, 0] = 2.0

    def test_tensor_conversion(self):
        data = np.random.default_rng(0).random((3, 4, 5)).astype(np.float32)
        cube = HSICube(data)
        tensor = cube.to_tensor()
        assert tuple(tensor.shape) == (1, 3, 4, 5)
        back = HSICube.from_tensor(tensor)
        np.testing.assert_array_equal(back.data, data)


class NormalizeTestCase(unittest.TestCase):
    def test_global_minmax_and_inverse(self):
        data = np.random.default_rng(1).uniform(2.0, 6.0, size=(3, 8, 8))
        cube = HSICube(data, value_range=(2.0, 6.0))
        scaled, record = normalize(cube)
        assert record.mode is NormalizationMode.GLOBAL_MINMAX
        self.assertAlmostEqual(float(scaled.data.min()), 0.0, places=6)
        self.assertAlmostEqual(float(scaled.data.max()), 1.0, places=6)
        restored = denormalize(scaled, record)
        np.testing.assert_allclose(restored.data, cube.data, atol=1e-5)

    def test_monotone(self):
        cube = HSICube(np.random.default_rng(6).uniform(-3.0, 9.0, size=(4, 10, 10)), value_range=(-3.0, 9.0))
        scaled, _ = normalize(cube)
        order = np.argsort(cube.data, axis=None, kind="stable")
        assert (np.diff(scaled.data.ravel()[order]) >= 0).all()

    def test_constant_cube_is_degenerate(self):
        with self.assertRaises(DegenerateRangeError):
            normalize(HSICube.constant(0.3, 2, 4, 4))

    def test_fixed_range(self):
        cube = HSICube(np.full((1, 2, 2), 512.0), value_range=(0.0, 1024.0))
        scaled, record = normalize(cube, "fixed_range", (0.0, 1024.0))
        np.testing.assert_allclose(scaled.data, 0.5)
        assert (record.lo, record.hi) == (0.0, 1024.0)
        with self.assertRaises(DataError):
            normalize(cube, NormalizationMode.FIXED_RANGE, (0.0, 100.0))


class HSDFileTestCase(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, self.tmpdir)

    def test_save_load_is_bit_exact(self):
        rng = np.random.default_rng(2)
        for i in range(100):
            shape = tuple(int(s) for s in rng.integers(1, 12, size=3))
            data = rng.standard_normal(shape).astype(np.float32)
            path = os.path.join(self.tmpdir, "c%d.hsd" % i)
            save_cube(data, path)
            loaded = load_cube(path)
            assert loaded.data.tobytes() == data.tobytes()

    def test_meta_sidecar(self):
        path = os.path.join(self.tmpdir, "scene.hsd")
        save_cube(HSICube.constant(0.5, 2, 3, 3), path, meta={"sensor": "test", "bands": 2})
        with open(meta_path(path)) as f:
            assert json.load(f) == {"sensor": "test", "bands": 2}

    def test_refuses_non_finite(self):
        path = os.path.join(self.tmpdir, "bad.hsd")
        data = np.zeros((2, 3, 3), dtype=np.float32)
        data[0, 0, 0] = np.inf
        with self.assertRaises(DataError):
            save_cube(data, path)
        assert not os.path.exists(path)

    def test_truncated_file(self):
        path = os.path.join(self.tmpdir, "short.hsd")
        save_cube(HSICube.constant(0.5, 2, 3, 3), path)
        with open(path, "rb") as f:
            raw = f.read()
        with open(path, "wb") as f:
            f.write(raw[:-4])
        with self.assertRaises(FormatError):
            load_cube(path)

    def test_nan_payload(self):
        path = os.path.join(self.tmpdir, "nan.hsd")
        save_cube(HSICube.constant(0.5, 1, 2, 2), path)
        with open(path, "r+b") as f:
            f.seek(-4, os.SEEK_END)
            f.write(np.array([np.nan], dtype="<f4").tobytes())
        with self.assertRaises(DataError):
            load_cube(path)

    def test_missing_file(self):
        with self.assertRaises(IoError) as cm:
            load_cube(os.path.join(self.tmpdir, "nope.hsd"))
        assert isinstance(cm.exception, OSError)


class PyramidTestCase(unittest.TestCase):
    def test_level_shapes(self):
        pyramid = build_pyramid(HSICube(np.random.default_rng(3).random((3, 16, 12))))
        assert len(pyramid) == 3
        assert [level.shape for level in pyramid.levels] == [(3, 16, 12), (3, 8, 6), (3, 4, 3)]

    def test_odd_sizes_round_up(self):
        out = pyramid_down(torch.zeros(2, 5, 7))
        assert tuple(out.shape) == (2, 3, 4)

    def test_constant_cube_stays_constant(self):
        pyramid = build_pyramid(HSICube.constant(0.25, 2, 8, 8))
        for level in pyramid.levels:
            np.testing.assert_allclose(level.data, 0.25, atol=1e-7)

    def test_matches_direct_convolution(self):
        data = np.random.default_rng(4).random((2, 12, 10))
        pyramid = build_pyramid(HSICube(data))
        level1 = _pyramid_oracle(pyramid[0].data.astype(np.float64))
        np.testing.assert_allclose(pyramid[1].data, level1, atol=1e-6)
        level2 = _pyramid_oracle(level1)
        np.testing.assert_allclose(pyramid[2].data, level2, atol=1e-6)

    def test_smooth_cube_keeps_its_mean(self):
        cube = smooth_random_cube(2, 512, 512, seed=5)
        pyramid = build_pyramid(cube)
        means = cube.data.astype(np.float64).mean(axis=(1, 2))
        for level in pyramid.levels[1:]:
            np.testing.assert_allclose(level.data.astype(np.float64).mean(axis=(1, 2)), means, atol=1e-3)

    def test_too_small(self):
        with self.assertRaises(ShapeError):
            build_pyramid(HSICube.constant(0.5, 2, 3, 8))


class SmoothCubeTestCase(unittest.TestCase):
    def test_range_and_determinism(self):
        a = smooth_random_cube(6, 20, 24, seed=9)
        b = smooth_random_cube(6, 20, 24, seed=9)
        assert a.shape == (6, 20, 24)
        np.testing.assert_array_equal(a.data, b.data)
        self.assertAlmostEqual(float(a.data.min()), 0.0, places=6)
        self.assertAlmostEqual(float(a.data.max()), 1.0, places=6)
        c = smooth_random_cube(6, 20, 24, seed=10)
        assert not np.array_equal(a.data, c.data)
