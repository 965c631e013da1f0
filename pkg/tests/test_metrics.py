import csv
import math

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from rayprior.metrics import PSNR_CAP, MetricInputError, MetricReport, psnr, ssim


def two_pass_psnr(a, b):
    total, n = 0.0, 0
    for x, y in zip(np.ravel(a).tolist(), np.ravel(b).tolist()):
        total += (x - y) ** 2
        n += 1
    return 10 * math.log10(1.0 / (total / n))


def reference_ssim(a, b):
    # skimage crops the border half-window, leaving the same window positions as a valid convolution
    return structural_similarity(a.mean(axis=2), b.mean(axis=2), gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False, data_range=1.0)


@pytest.fixture
def pair():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(32, 40, 3))
    b = np.clip(a + rng.normal(scale=0.05, size=a.shape), 0, 1)
    return a, b


class TestPsnr:
    def test_identical_capped(self, pair):
        a, _ = pair
        assert psnr(a, a.copy()) == PSNR_CAP
        r = MetricReport()
        r.add("x", "test-far", a, a.copy())
        assert r.frames[0].identical and r.frames[0].psnr == PSNR_CAP

    def test_uniform_error(self):
        ref = np.full((8, 8, 3), 0.5)
        assert psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-9)

    def test_matches_two_pass(self, pair):
        assert psnr(*pair) == pytest.approx(two_pass_psnr(*pair), abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(MetricInputError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_deterministic(self, pair):
        assert psnr(*pair) == psnr(*pair)


class TestSsim:
    def test_identical(self, pair):
        assert ssim(pair[0], pair[0]) == pytest.approx(1.0, abs=1e-12)

    def test_matches_reference(self, pair):
        assert ssim(*pair) == pytest.approx(reference_ssim(*pair), abs=1e-9)

    def test_inverted_pattern(self):
        yy, xx = np.mgrid[:32, :32]
        checker = (((yy // 4) + (xx // 4)) % 2) * 0.8 + 0.1
        img = np.repeat(checker[..., None], 3, axis=2)
        score = ssim(1 - img, img)
        assert score < 0.5
        assert score == pytest.approx(reference_ssim(1 - img, img), abs=1e-9)

    @pytest.mark.parametrize("a", [0.2, 0.5, 0.85])
    def test_constant_shift_closed_form(self, a):
        b = a + 0.1
        c1 = 0.01**2
        expected = (2 * a * b + c1) / (a * a + b * b + c1)
        got = ssim(np.full((16, 16, 3), a), np.full((16, 16, 3), b))
        assert got == pytest.approx(expected, abs=1e-9)

    def test_too_small(self):
        with pytest.raises(MetricInputError):
            ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


class TestReport:
    def test_aggregate_is_mean_of_frames(self, pair):
        rng = np.random.default_rng(1)
        r = MetricReport()
        ref = pair[0]
        for i in range(6):
            pred = np.clip(ref + rng.normal(scale=0.02 * (i + 1), size=ref.shape), 0, 1)
            r.add(f"f{i}", "test-close" if i < 3 else "test-far", pred, ref, group="extrap")
        agg = r.aggregate()
        for tag in ("test-close", "test-far"):
            sel = [f for f in r.frames if f.split == tag]
            assert agg[tag]["psnr"] == pytest.approx(np.mean([f.psnr for f in sel]), abs=1e-9)
            assert agg[tag]["ssim"] == pytest.approx(np.mean([f.ssim for f in sel]), abs=1e-9)
            assert agg[tag]["n"] == 3
        assert r.aggregate("group")["extrap"]["n"] == 6

    def test_csv_layout(self, pair, tmp_path):
        r = MetricReport()
        r.add("a", "test-middle", pair[1], pair[0], group="interp", d_y=0.25)
        path = tmp_path / "m.csv"
        r.write_csv(path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["frame", "split", "group", "d_y", "psnr", "ssim", "lpips", "identical"]
        assert rows[1][0] == "a" and rows[1][6] == "n/a"
        assert float(rows[1][4]) == pytest.approx(psnr(pair[1], pair[0]), abs=1e-5)
        assert any(row[0] == "mean:split" and row[1] == "test-middle" for row in rows)
