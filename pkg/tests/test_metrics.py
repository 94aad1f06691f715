import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st
from hypothesis.extra.numpy import arrays

from src.core.errors import DomainError
from src.services.metrics import (
    RoiMask,
    diaphragm_position,
    dice,
    global_mask,
    image_domain_report,
    lung_mask,
    ncc,
    projection_domain_eval,
    rmse_hu,
    ssim,
    ssim_roi,
    structure_positions,
    tumor_mask_from_phantom,
)
from src.services.phantom4d import (
    GridSpec,
    Volume3D,
    label_volume,
    make_thorax_phantom,
    sample_ground_truth_4d,
    sample_volume,
)
from src.services.respiration import phase_amplitudes, synth_breathing
from src.services.scanner import simulate_4d_scan
from src.services.storage import read_csv

MU = 0.02
floats = st.floats(min_value=-1000.0, max_value=1000.0, allow_nan=False)


def _gaussian_weights(window: int) -> np.ndarray:
    sigma = window / 6.0
    r = (window - 1) // 2
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    return np.outer(k, k)


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a = rng.uniform(-1000, 500, (12, 12))
    b = a + rng.normal(0, 50, a.shape)
    assert ssim(a, a, window=7)[0] == pytest.approx(1.0)
    s_ab, valid = ssim(a, b, window=7)
    assert s_ab == pytest.approx(ssim(b, a, window=7)[0])
    assert valid.shape == (6, 6)
    assert np.all(valid <= 1.0) and np.all(valid >= -1.0)


def test_ssim_matches_direct_window_formula():
    rng = np.random.default_rng(1)
    a = rng.uniform(-1000, 500, (8, 8))
    b = rng.uniform(-1000, 500, (8, 8))
    w = _gaussian_weights(7)
    _, valid = ssim(a, b, window=7, dynamic_range=1500.0)
    pa, pb = a[0:7, 0:7], b[0:7, 0:7]
    mu_a, mu_b = (w * pa).sum(), (w * pb).sum()
    var_a = (w * pa * pa).sum() - mu_a**2
    var_b = (w * pb * pb).sum() - mu_b**2
    cov = (w * pa * pb).sum() - mu_a * mu_b
    c1, c2 = (0.01 * 1500.0) ** 2, (0.03 * 1500.0) ** 2
    expected = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    assert valid[0, 0] == pytest.approx(expected, rel=1e-6)


def test_ssim_validation():
    with pytest.raises(DomainError):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(DomainError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)), window=4)
    with pytest.raises(DomainError):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)), window=7)


def test_ssim_roi():
    rng = np.random.default_rng(2)
    a = rng.uniform(-1000, 0, (3, 10, 10))
    mask = np.zeros(a.shape, dtype=bool)
    mask[1, 3:7, 3:7] = True
    assert ssim_roi(a, a, RoiMask(mask, "box"), window=5) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        ssim_roi(a, a, RoiMask(np.zeros_like(mask), "empty"))


def test_rmse_constant_offset():
    a = np.zeros((4, 4, 4))
    assert rmse_hu(a, a) == 0.0
    assert rmse_hu(a + 10.0, a) == pytest.approx(10.0)
    mask = np.zeros(a.shape, dtype=bool)
    mask[0] = True
    b = a.copy()
    b[1:] = 99.0
    assert rmse_hu(a, b, RoiMask(mask, "slice")) == 0.0
    with pytest.raises(DomainError):
        rmse_hu(a, b, RoiMask(np.zeros_like(mask), "empty"))


@hsettings(max_examples=50, deadline=None)
@given(
    a=arrays(np.float64, 16, elements=floats),
    b=arrays(np.float64, 16, elements=floats),
    c=arrays(np.float64, 16, elements=floats),
)
def test_rmse_triangle_inequality(a, b, c):
    assert rmse_hu(a, c) <= rmse_hu(a, b) + rmse_hu(b, c) + 1e-9


def test_ncc_affine_invariance():
    rng = np.random.default_rng(3)
    a = rng.standard_normal(100)
    assert ncc(a, a) == pytest.approx(1.0)
    assert ncc(a, 2.0 * a + 5.0) == pytest.approx(1.0)
    assert ncc(a, -a) == pytest.approx(-1.0)
    with pytest.raises(DomainError):
        ncc(a, np.ones(100))


def test_dice():
    a = np.array([1, 1, 0, 0], dtype=bool)
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros(3), np.zeros(3)) == 1.0


@pytest.fixture(scope="module")
def thorax_grid():
    return GridSpec(shape=(32, 64, 64), spacing=(8.0, 6.0, 6.0))


def test_lung_mask_matches_phantom_lungs(thorax_grid):
    phantom = make_thorax_phantom(0)
    vol = sample_volume(phantom, 0.0, thorax_grid)
    labels = label_volume(phantom, 0.0, thorax_grid)
    truth = np.isin(labels, [phantom.index_of("lung_r"), phantom.index_of("lung_l")])
    roi = lung_mask(vol)
    assert roi.label == "lung"
    assert dice(roi.mask, truth) > 0.9


def test_lung_mask_all_air_is_empty(caplog):
    vol = Volume3D(data=np.full((4, 8, 8), -1000.0, dtype=np.float32), spacing=(1, 1, 1), origin=(0, 0, 0))
    roi = lung_mask(vol)
    assert roi.empty
    assert "no se encontró pulmón" in caplog.text


def test_tumor_mask_volume_and_motion():
    phantom = make_thorax_phantom(0)
    grid = GridSpec(shape=(60, 40, 40), spacing=(1.0, 1.0, 1.0), origin=(0.0, -15.0, -80.0))
    rest = tumor_mask_from_phantom(phantom, 0.0, grid)
    moved = tumor_mask_from_phantom(phantom, 1.0, grid)
    expected = 4.0 / 3.0 * np.pi * 12.0**3
    assert rest.mask.sum() == pytest.approx(expected, rel=0.05)
    c0 = np.argwhere(rest.mask).mean(axis=0)
    c1 = np.argwhere(moved.mask).mean(axis=0)
    np.testing.assert_allclose(c1 - c0, [-10.0, 2.0, 0.0], atol=1.0)


def test_image_domain_report_self_comparison(tmp_path):
    grid = GridSpec(shape=(8, 16, 16), spacing=(20.0, 20.0, 20.0))
    truth = sample_ground_truth_4d(make_thorax_phantom(0), phase_amplitudes(2), grid, n_phases=2)
    rois = [{"global": global_mask(v)} for v in truth.phases]
    rows = image_domain_report(truth, truth, rois, tmp_path / "img.csv")
    assert len(rows) == 2
    assert all(r["ssim"] == pytest.approx(1.0) and r["rmse_hu"] == 0.0 for r in rows)
    assert len(read_csv(tmp_path / "img.csv")) == 2
    with pytest.raises(DomainError):
        image_domain_report(truth, truth, rois[:1])


def test_projection_domain_of_truth_is_perfect(tmp_path, small_geometry, small_grid):
    phantom = make_thorax_phantom(0)
    signal = synth_breathing(60.0, 4.0, 0.0, 0.0, 25.0, seed=0)
    scan = simulate_4d_scan(phantom, signal, small_geometry, n_phases=4, quantize=True, noise_sd=0.0,
                            grid=small_grid, sorting="phase", mu_water=MU)
    truth = sample_ground_truth_4d(phantom, phase_amplitudes(4), small_grid, n_phases=4)
    rows = projection_domain_eval(truth, signal, small_geometry, scan, tmp_path / "proj.csv", mu_water=MU, window=7)
    assert len(rows) == scan.n_views
    assert all(r["ncc"] == pytest.approx(1.0, abs=1e-6) for r in rows)
    assert all(r["ssim"] == pytest.approx(1.0, abs=1e-6) for r in rows)
    assert [r["phase"] for r in rows] == scan.phases.tolist()


def test_diaphragm_rises_with_exhalation():
    phantom = make_thorax_phantom(0)
    grid = GridSpec(shape=(96, 24, 24), spacing=(2.0, 16.0, 16.0))
    column = phantom.by_name("lung_r").center[:2]
    heights = [diaphragm_position(sample_volume(phantom, a, grid), column) for a in (1.0, 0.5, 0.0)]
    assert heights[0] < heights[1] < heights[2]


def test_structure_positions_rows(thorax_grid):
    phantom = make_thorax_phantom(0)
    truth = sample_ground_truth_4d(phantom, phase_amplitudes(4), thorax_grid, n_phases=4)
    roi = np.any([tumor_mask_from_phantom(phantom, float(a), thorax_grid).mask for a in phase_amplitudes(4)], axis=0)
    rows = structure_positions(truth, phantom.by_name("lung_r").center[:2], roi, tumor_threshold=0.0)
    assert [r["phase"] for r in rows] == [0, 1, 2, 3]
    assert all(np.isfinite(r["tumor_z_mm"]) for r in rows)
    # Fase 2 (fin de espiración) con el tumor más alto que la fase 0
    assert rows[2]["tumor_z_mm"] > rows[0]["tumor_z_mm"]
