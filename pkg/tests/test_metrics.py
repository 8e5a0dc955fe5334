import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from devinr.metrics import (
    EvalRecord,
    MeasurementError,
    ellipse_circumference,
    fit_regression,
    hc_error_stats,
    mae,
    measure_bc,
    measure_bc_ellipse,
    pearson,
    prediction_mask,
    psnr,
    select_axial_slice,
    ssim,
    summarize,
    write_report,
)
from devinr.phantom import SubjectParams, generate_subject, render_phantom, true_hull_circumference
from devinr.volume import VolumeImage


def img(a):
    return VolumeImage(np.asarray(a, dtype=np.float64), (1.0,) * np.ndim(a))


def test_psnr_identical_is_inf():
    a = np.random.default_rng(0).uniform(size=(8, 8))
    assert psnr(a, a) == math.inf


def test_psnr_constant_offset():
    a = np.full((16, 16), 0.3)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_half_wrong():
    a = np.zeros((4, 4))
    b = a.copy()
    b[:2] = 1.0
    assert psnr(a, b) == pytest.approx(10 * math.log10(2), abs=1e-12)
    assert psnr(a, b) == pytest.approx(3.0103, abs=1e-4)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_mae_examples():
    a = np.random.default_rng(1).uniform(size=(10, 10))
    assert mae(a, a) == 0
    assert mae(a, a + 0.1) == pytest.approx(0.1)
    b = a.copy()
    b[3, 4] += 1
    assert mae(a, b) == pytest.approx(1 / 100)


def test_ssim_identical_is_one():
    a = np.random.default_rng(2).uniform(size=(20, 20))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images():
    expected = (2 * 0.24 + 1e-4) / (0.52 + 1e-4)
    assert ssim(np.full((16, 16), 0.4), np.full((16, 16), 0.6)) == pytest.approx(expected, abs=1e-10)
    assert expected == pytest.approx(0.923092, abs=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_ssim_symmetric_and_matches_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(24, 21))
    b = np.clip(a + rng.normal(0, 0.1, size=a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_3d_matches_reference():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(14, 15, 16))
    b = np.clip(a + rng.normal(0, 0.2, size=a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_rejects_tiny_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 30)), np.zeros((8, 30)))


def disk(radius_cm, spacing, n):
    c = (np.arange(n) + 0.5 - n / 2) * spacing
    x, y = np.meshgrid(c, c, indexing="ij")
    return x**2 + y**2 <= radius_cm**2


def test_measure_bc_circle():
    mask = disk(3.0, 0.02, 400)
    assert measure_bc(mask, (0.02, 0.02)) == pytest.approx(18.85, rel=0.02)
    assert measure_bc(mask, (0.02, 0.02), method="centers") == pytest.approx(18.85, rel=0.02)


def test_measure_bc_empty_and_single_voxel():
    with pytest.raises(MeasurementError):
        measure_bc(np.zeros((10, 10), bool), (1, 1))
    one = np.zeros((10, 10), bool)
    one[4, 4] = True
    with pytest.raises(MeasurementError):
        measure_bc(one, (1, 1))


@pytest.mark.parametrize("index", range(8))
def test_measure_bc_matches_hull_oracle_at_64(index):
    p = generate_subject(2, index)
    for t in (0.27, 0.36, 0.44):
        _, mask = render_phantom(p, t, (64, 64), (0.3, 0.3))
        assert measure_bc(mask, (0.3, 0.3)) == pytest.approx(true_hull_circumference(p, t), rel=0.03)


def test_measure_bc_ignores_intensity():
    image, mask = render_phantom(generate_subject(0, 1), 0.35, (64, 64), (0.3, 0.3))
    scaled = VolumeImage(image.data * 0.5, image.spacing)
    assert measure_bc(prediction_mask(image), (0.3, 0.3)) == measure_bc(prediction_mask(scaled, 0.01), (0.3, 0.3))


def test_prediction_mask_keeps_largest_component():
    data = np.zeros((20, 20))
    data[2:10, 2:10] = 0.5
    data[15, 15] = 0.9
    data[0, 19] = 0.04
    mask = prediction_mask(img(data))
    assert mask.sum() == 64 and not mask[15, 15]


def test_select_axial_slice_prefers_largest_ap_extent():
    m = np.zeros((10, 10, 3), bool)
    m[2:8, 3:5, 0] = True  # AP extent 2
    m[4:5, 1:9, 1] = True  # AP extent 8
    m[3:6, 2:8, 2] = True  # AP extent 6
    np.testing.assert_array_equal(select_axial_slice(m), m[:, :, 1])


def test_ellipse_circumference_examples():
    assert ellipse_circumference(2.5, 2.5) == pytest.approx(2 * math.pi * 2.5, rel=1e-15)
    assert ellipse_circumference(4, 3) == pytest.approx(22.1034, abs=1e-4)
    with pytest.raises(MeasurementError):
        ellipse_circumference(4, 0)


def test_ellipse_and_hull_methods_agree_on_fold_free_phantoms():
    for i in range(5):
        base = generate_subject(0, i)
        p = SubjectParams(0, i, base.semi_axes, base.growth, (0,) * 5, base.fold_phases, base.texture_freq, 0.0)
        _, mask = render_phantom(p, 0.26, (64, 64), (0.3, 0.3))
        assert measure_bc_ellipse(mask, (0.3, 0.3)) == pytest.approx(measure_bc(mask, (0.3, 0.3)), rel=0.05)


def test_regression_exact_line():
    bc = np.linspace(20, 35, 12)
    m = fit_regression(bc, 1.090 * bc + 1.758)
    assert m.slope == pytest.approx(1.090, abs=1e-9)
    assert m.intercept == pytest.approx(1.758, abs=1e-8)
    assert m.r == pytest.approx(1.0) and m.sigma == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=30)
@given(st.floats(-5, 5), st.floats(-50, 50), st.integers(0, 2**31))
def test_regression_recovers_any_affine_relation(slope, intercept, seed):
    bc = np.random.default_rng(seed).uniform(10, 40, 20)
    m = fit_regression(bc, slope * bc + intercept)
    assert m.slope == pytest.approx(slope, abs=1e-9)
    assert m.intercept == pytest.approx(intercept, abs=1e-7)


def test_regression_degenerate():
    with pytest.raises(ValueError):
        fit_regression([25.0] * 5, [30, 31, 32, 33, 34])
    with pytest.raises(ValueError):
        fit_regression([1.0, 2.0], [1.0, 2.0])


def rec(pred, true, psnr_=30.0):
    return EvalRecord("s", "a", "b", 0.3, 0.4, psnr_, 0.9, 0.01, pred, true)


def test_hc_stats_exact_and_biased():
    true = [30.0, 32.0, 35.0, 36.5]
    sigma, r = hc_error_stats([rec(t, t) for t in true])
    assert sigma == 0 and r == pytest.approx(1.0)
    sigma, r = hc_error_stats([rec(t + 1, t) for t in true])
    assert sigma == pytest.approx(0, abs=1e-12) and r == pytest.approx(1.0)


def test_pearson_constant_guard():
    assert math.isnan(pearson([1, 1, 1], [1, 2, 3]))


def test_summary_and_report(tmp_path):
    records = [rec(30 + i, 30.5 + i, 25 + i) for i in range(4)]
    s = summarize(records)
    assert s["psnr"][0] == pytest.approx(26.5)
    assert s["psnr"][1] == pytest.approx(np.std([25, 26, 27, 28], ddof=1))
    write_report(records, tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0][:3] == ["subject_id", "scan_id_in", "scan_id_target"]
    assert len(rows) == 6
    assert rows[-1][0] == "summary" and "±" in rows[-1][5]
    assert rows[-1][-2].startswith("sigma=") and rows[-1][-1].startswith("r=")
