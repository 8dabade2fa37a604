import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from restoreflow.degradations import degrade_noise, procedural_image
from restoreflow.metrics import (PSNR_CAP, FeatureExtractor, MetricReport, frechet_distance, frechet_from_moments,
                                 median_bandwidth, mmd_rbf, psnr, score_images, ssim)


def test_psnr_closed_forms():
    a = np.full((4, 4, 3), 0.2)
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-12)
    assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 0.0


def test_psnr_decreases_with_noise(rng):
    img = procedural_image(32, rng)
    vals = [psnr(degrade_noise(img, s, np.random.default_rng(0)), img) for s in (5, 15, 25, 50)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_examples(rng):
    a = procedural_image(32, rng)
    b = procedural_image(32, rng)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, 1.0 - a) < 0.1
    assert ssim(a, b) == ssim(b, a)


def test_frechet_closed_forms():
    assert frechet_from_moments([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(1.0, abs=1e-6)
    assert frechet_from_moments([0.0], [[1.0]], [0.0], [[9.0]]) == pytest.approx(4.0, abs=1e-6)
    for mu1, s1, mu2, s2 in [(0.3, 0.5, -1.2, 2.0), (5.0, 3.0, 5.0, 3.0), (0.0, 1e-3, 0.0, 4.0)]:
        got = frechet_from_moments([mu1], [[s1**2]], [mu2], [[s2**2]])
        assert got == pytest.approx((mu1 - mu2) ** 2 + (s1 - s2) ** 2, abs=1e-6)


def test_frechet_matches_scipy_sqrtm_oracle(rng):
    x = rng.standard_normal((200, 6)) @ rng.standard_normal((6, 6))
    y = rng.standard_normal((150, 6)) * 2 + 0.5
    ca, cb = np.cov(x, rowvar=False), np.cov(y, rowvar=False)
    oracle = (np.sum((x.mean(0) - y.mean(0)) ** 2) + np.trace(ca + cb)
              - 2 * np.real(np.trace(scipy.linalg.sqrtm(ca @ cb))))
    assert frechet_distance(x, y) == pytest.approx(oracle, rel=1e-8)
    assert frechet_distance(x, y) == pytest.approx(frechet_distance(y, x), abs=1e-8)
    assert abs(frechet_distance(x, x)) < 1e-8


def test_frechet_warns_when_underdetermined(rng):
    with pytest.warns(RuntimeWarning):
        frechet_distance(rng.standard_normal((5, 8)), rng.standard_normal((5, 8)))


def test_mmd_closed_forms(rng):
    x = rng.standard_normal((20, 5))
    assert abs(mmd_rbf(x, x)) < 1e-10
    d = 1.7
    a, b = np.array([[0.0, 0.0]]), np.array([[d, 0.0]])
    assert mmd_rbf(a, b, bandwidth=d) == pytest.approx(2 - 2 * np.exp(-0.5), abs=1e-10)
    with pytest.raises(ValueError):
        mmd_rbf(a, b, bandwidth=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 5.0))
def test_mmd_nonnegative_and_symmetric(seed, bw):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((7, 3)), r.standard_normal((9, 3)) + 0.5
    assert mmd_rbf(x, y, bw) >= 0
    assert mmd_rbf(x, y, bw) == pytest.approx(mmd_rbf(y, x, bw), abs=1e-12)


def test_mmd_monotone_along_interpolation(rng):
    x = rng.standard_normal((40, 4))
    y = rng.standard_normal((40, 4)) + 3.0
    bw = median_bandwidth(x, y)
    vals = [mmd_rbf(x, (1 - s) * y + s * x, bw) for s in np.linspace(0, 1, 5)]
    assert all(p > q for p, q in zip(vals, vals[1:]))
    assert vals[-1] < 1e-10


def test_feature_extractor_deterministic(rng):
    imgs = rng.uniform(size=(3, 32, 32, 3))
    f1, f2 = FeatureExtractor(0)(imgs), FeatureExtractor(0)(imgs)
    assert f1.shape == (3, 64) and np.array_equal(f1, f2)
    assert not np.array_equal(FeatureExtractor(1)(imgs), f1)


def test_score_ground_truth_against_itself(rng):
    clean = np.stack([procedural_image(32, rng) for _ in range(9)])
    tasks = ["noise"] * 6 + ["rain"] * 3
    sigmas = [15, 25, 50, 15, 25, 50, None, None, None]
    rows, _ = score_images(clean, clean, tasks, sigmas, "gt", FeatureExtractor())
    assert [(r.task, r.sigma) for r in rows] == [("noise", None), ("noise", 15.0), ("noise", 25.0),
                                                 ("noise", 50.0), ("rain", None)]
    for r in rows:
        assert abs(r.fid) < 1e-8 and abs(r.mmd) < 1e-10 and r.psnr == PSNR_CAP and r.ssim == pytest.approx(1.0)


def test_report_csv_roundtrip(tmp_path, rng):
    clean = np.stack([procedural_image(32, rng) for _ in range(4)])
    noisy = np.clip(clean + 0.1 * rng.standard_normal(clean.shape), 0, 1)
    rows, _ = score_images(noisy, clean, ["haze"] * 4, [None] * 4, "x", FeatureExtractor())
    rep = MetricReport(rows, {"k": 1})
    rep.write(tmp_path / "r.csv")
    back = MetricReport.read_csv(tmp_path / "r.csv")
    assert back.rows == rows
    assert (tmp_path / "r.json").exists()
    assert rep.get("x", "haze").n == 4
