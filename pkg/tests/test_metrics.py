import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affmap import metrics as M
from affmap.linops import AffineProjector, apply_pinv, closed_form_pseudoinverse, project, toy_average


def psnr_reference(a, b, peak=1.0):
    se = sum((float(u) - float(v)) ** 2 for u, v in zip(np.ravel(a), np.ravel(b)))
    return 10 * math.log10(peak * peak * np.size(a) / se)


def ssim_reference(a, b, win=8, peak=1.0):
    """Explicit loop over every window position."""
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            p, q = a[i:i + win, j:j + win].ravel(), b[i:i + win, j:j + win].ravel()
            mp, mq = p.mean(), q.mean()
            vp, vq = ((p - mp) ** 2).mean(), ((q - mq) ** 2).mean()
            cv = ((p - mp) * (q - mq)).mean()
            vals.append((2 * mp * mq + c1) * (2 * cv + c2) / ((mp * mp + mq * mq + c1) * (vp + vq + c2)))
    return float(np.mean(vals))


def test_psnr_cases(rng):
    y = rng.uniform(0, 1, (16, 16))
    assert M.psnr(y, y) == M.PSNR_CAP
    assert M.psnr(np.full((4, 4), 0.5), np.full((4, 4), 0.4)) == pytest.approx(20.0)
    a, b = rng.uniform(0, 1, (2, 12, 12))
    assert abs(M.psnr(a, b) - psnr_reference(a, b)) <= 1e-9
    with pytest.raises(ValueError):
        M.psnr(a, b[:3])


def test_ssim_identical_and_constant():
    y = np.random.default_rng(0).uniform(0, 1, (10, 10))
    assert M.ssim(y, y) == pytest.approx(1.0, abs=1e-12)
    c1 = 0.01 ** 2
    mu1, mu2 = 0.4, 0.5
    expected = (2 * mu1 * mu2 + c1) / (mu1 ** 2 + mu2 ** 2 + c1)
    assert M.ssim(np.full((9, 11), mu2), np.full((9, 11), mu1)) == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("shape", [(8, 8), (12, 10), (17, 9)])
def test_ssim_matches_window_loop(rng, shape):
    a, b = rng.uniform(0, 1, (2,) + shape)
    assert M.ssim(a, b) == pytest.approx(ssim_reference(a, b), abs=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_ssim_symmetric_and_bounded(seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(0, 1, (2, 2, 1, 10, 10))
    s = M.ssim(a, b)
    assert s == M.ssim(b, a) and -1 <= s <= 1
    assert M.psnr(a, b) == M.psnr(b, a)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError, match="window"):
        M.ssim(np.zeros((4, 4)), np.zeros((4, 4)))


def test_lr_consistency_cases(rng):
    op = toy_average()
    proj = AffineProjector(op, closed_form_pseudoinverse(op), tolerance=1e-10)
    x = rng.uniform(-5, 5, (50, 1))
    f = rng.standard_normal((50, 2))
    assert M.lr_consistency(x, project(proj, f, x), op) <= 1e-12
    assert M.lr_consistency(x, apply_pinv(proj.up, x), op) <= proj.tolerance ** 2
    assert M.lr_consistency(x, f, op) > 0


def test_metrics_csv_roundtrip(tmp_path):
    rows = [M.MetricsRow("run/seed0", i, 20.0 + i, 0.5, 1e-13, 0.01) for i in range(3)]
    M.write_metrics_csv(tmp_path / "m.csv", rows, {"variant": "x"})
    text = (tmp_path / "m.csv").read_text()
    assert text.splitlines()[0].startswith("# affmap-metrics/1 ssim_window=8x8")
    assert M.read_metrics_csv(tmp_path / "m.csv") == rows
    (tmp_path / "bad.csv").write_text(text.replace("affmap-metrics/1", "other/9"))
    with pytest.raises(ValueError):
        M.read_metrics_csv(tmp_path / "bad.csv")
