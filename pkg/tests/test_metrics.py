import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from rblb.imageio import save_image
from rblb.metrics import PSNR_CAP, MetricResult, evaluate_dirs, psnr, ssim

images = arrays(np.float64, (3, 16, 16), elements=st.floats(0, 1))


class TestPsnr:
    def test_identical_is_sentinel(self, rng):
        x = rng.random((1, 3, 8, 8))
        assert psnr(x, x) == PSNR_CAP == 100.0

    def test_constant_difference(self):
        a = np.full((3, 8, 8), 0.3)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_eight_bit_scale(self):
        a = np.zeros((3, 10, 10))
        assert psnr(a, a + 10.0, peak=255.0) == pytest.approx(28.1308, abs=0.01)

    @given(a=images, b=images)
    def test_symmetric_and_non_negative(self, a, b):
        assert psnr(a, b) == psnr(b, a)
        assert psnr(a, b) >= 0.0

    def test_decreases_with_noise_amplitude(self, rng):
        x = rng.random((3, 32, 32))
        u = rng.uniform(-1, 1, x.shape)
        values = [psnr(x, x + amp * u) for amp in (0.01, 0.02, 0.05, 0.1, 0.2)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((3, 8, 8)), np.zeros((3, 8, 9)))


class TestSsim:
    def test_self_similarity(self, rng):
        x = rng.random((1, 3, 16, 16))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-6)

    def test_inverted_pattern(self):
        yy, xx = np.mgrid[0:16, 0:16]
        x = np.stack([0.5 + 0.25 * np.sin(xx / 2.0 + c) * np.cos(yy / 3.0) for c in range(3)])
        assert ssim(x, 1.0 - x) < 0.5

    @given(a=images, b=images)
    def test_symmetric_and_bounded(self, a, b):
        s = ssim(a, b)
        assert s == pytest.approx(ssim(b, a), abs=1e-9)
        assert -1.0 <= s <= 1.0

    def test_block_oracle(self, rng):
        a, b = rng.random((8, 8)), rng.random((8, 8))
        ma, mb = a.mean(), b.mean()
        va, vb = a.var(), b.var()
        cov = ((a - ma) * (b - mb)).mean()
        c1, c2 = 0.01**2, 0.03**2
        expected = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
        assert ssim(a, b) == pytest.approx(expected, abs=1e-12)

    def test_partial_blocks_ignored(self, rng):
        a, b = rng.random((3, 19, 17)), rng.random((3, 19, 17))
        assert ssim(a, b) == ssim(a[:, :16, :16], b[:, :16, :16])

    def test_too_small(self):
        with pytest.raises(ValueError, match="smaller than window"):
            ssim(np.zeros((3, 7, 16)), np.zeros((3, 7, 16)))


class TestEvaluateDirs:
    def _write(self, d, arrays_):
        for i, a in enumerate(arrays_):
            save_image(a, d / f"im{i}.png")

    def test_identical_dirs(self, tmp_path, rng):
        ims = [rng.random((3, 16, 16)) for _ in range(3)]
        self._write(tmp_path / "a", ims)
        self._write(tmp_path / "b", ims)
        r = evaluate_dirs(tmp_path / "a", tmp_path / "b")
        assert (r.psnr_db, r.ssim) == (100.0, 1.0)

    def test_csv_mean_row(self, tmp_path, rng):
        self._write(tmp_path / "a", [rng.random((3, 16, 16)) for _ in range(4)])
        self._write(tmp_path / "b", [rng.random((3, 16, 16)) for _ in range(4)])
        r = evaluate_dirs(tmp_path / "a", tmp_path / "b")
        lines = r.write_csv(tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "image,psnr_db,ssim"
        rows = [line.split(",") for line in lines[1:]]
        assert [row[0] for row in rows] == ["im0.png", "im1.png", "im2.png", "im3.png", "mean"]
        body = np.array([[float(v) for v in row[1:]] for row in rows[:-1]])
        mean = [float(v) for v in rows[-1][1:]]
        np.testing.assert_allclose(mean, body.mean(axis=0), atol=1e-9)

    def test_peak_255_matches_unit_scale_psnr(self, tmp_path, rng):
        self._write(tmp_path / "a", [rng.random((3, 16, 16))])
        self._write(tmp_path / "b", [rng.random((3, 16, 16))])
        unit = evaluate_dirs(tmp_path / "a", tmp_path / "b")
        byte = evaluate_dirs(tmp_path / "a", tmp_path / "b", peak_255=True)
        assert byte.psnr_db == pytest.approx(unit.psnr_db, abs=1e-9)
        assert byte.ssim == pytest.approx(unit.ssim, abs=1e-9)

    def test_unmatched_names(self, tmp_path, rng):
        self._write(tmp_path / "a", [rng.random((3, 16, 16))] * 2)
        self._write(tmp_path / "b", [rng.random((3, 16, 16))])
        with pytest.raises(ValueError, match="unmatched"):
            evaluate_dirs(tmp_path / "a", tmp_path / "b")

    def test_empty(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        with pytest.raises(ValueError, match="no PNG"):
            evaluate_dirs(tmp_path / "a", tmp_path / "b")

    def test_empty_result_is_nan(self):
        assert math.isnan(MetricResult().psnr_db)
