import numpy as np
import pytest

from src.core.errors import DomainError
from src.services.phantom4d import Ellipsoid, GridSpec, Phantom4D, Volume3D, sample_volume
from src.services.recon import (
    FilterSpec,
    cosine_weight,
    fdk,
    gated_fdk,
    halffan_weights,
    hu_convert,
    ramp_filter,
    ramp_kernel,
    reconstruct_4d,
)
from src.services.respiration import PhaseMap
from src.services.scanner import ProjectionSet, ScanGeometry, hu_to_mu, project_views

MU = 0.02


def _geometry(offset: float = 0.0, views: int = 180) -> ScanGeometry:
    return ScanGeometry(
        sad=1000.0, sdd=1500.0, detector_size=(256.0, 48.0), detector_channels=(128, 24),
        detector_offset_u=offset, views_per_turn=views, rotation_time=60.0,
    )


def _static_scan(volume: Volume3D, geometry: ScanGeometry) -> ProjectionSet:
    angles = geometry.view_angles()
    data = project_views(hu_to_mu(volume, MU), geometry, angles)
    return ProjectionSet(geometry, angles, geometry.view_times(), data)


@pytest.fixture(scope="module")
def cylinder_scan():
    body = (Ellipsoid(name="water", center=(0.0, 0.0, 0.0), semi_axes=(60.0, 60.0, 500.0), value=0.0),)
    fine = GridSpec(shape=(16, 128, 128), spacing=(2.0, 2.0, 2.0))
    return _static_scan(sample_volume(Phantom4D(name="cyl", body=body), 0.0, fine), _geometry())


def test_filter_spec_padding():
    assert FilterSpec.for_channels(100, "ram-lak").zero_pad_to == 256
    with pytest.raises(DomainError):
        FilterSpec("hann", 256)
    with pytest.raises(DomainError):
        FilterSpec("ram-lak", 300)


def test_ramp_kernel_values():
    h = ramp_kernel(16, 0.5)
    assert h[0] == pytest.approx(1.0)
    assert h[1] == pytest.approx(-1.0 / (np.pi * 0.5) ** 2)
    assert h[2] == 0.0
    assert h[-1] == pytest.approx(h[1])


def test_ramp_filter_of_constant_row_vanishes_inside():
    row = np.ones((1, 2048))
    out = ramp_filter(row, FilterSpec("ram-lak", 4096), du=1.0)
    assert np.abs(out[0, 512:1536]).max() < 1e-3


def test_cosine_weight():
    assert cosine_weight(np.array([1000.0]), np.array([0.0]), 1000.0)[0] == pytest.approx(1 / np.sqrt(2))
    assert cosine_weight(np.array([0.0]), np.array([0.0]), 1000.0)[0] == 1.0


def test_halffan_weights_complement():
    geometry = ScanGeometry(
        sad=1000.0, sdd=1500.0, detector_size=(64.0, 8.0), detector_channels=(64, 8),
        detector_offset_u=16.0, views_per_turn=4, rotation_time=1.0,
    )
    u = geometry.u_coords()
    w = halffan_weights(geometry)
    lookup = dict(zip(np.round(u, 6), w))
    for value in np.arange(0.5, 16.0, 1.0):
        assert lookup[value] + lookup[-value] == pytest.approx(1.0)
    assert np.all(w[u >= 16.0] == 1.0)
    assert np.all((w >= 0.0) & (w <= 1.0))


def test_halffan_offset_too_large():
    geometry = _geometry(offset=200.0)
    with pytest.raises(DomainError):
        halffan_weights(geometry)


def test_hu_convert_water_is_zero():
    vol = Volume3D(data=np.full((2, 2, 2), MU, dtype=np.float32), spacing=(1, 1, 1), origin=(0, 0, 0))
    np.testing.assert_allclose(hu_convert(vol, MU).data, 0.0, atol=1e-3)


def test_fdk_water_cylinder(cylinder_scan):
    grid = GridSpec(shape=(8, 64, 64), spacing=(4.0, 4.0, 4.0))
    vol = fdk(cylinder_scan, grid, kernel="ram-lak", mu_water=MU)
    zs, ys, xs = grid.axes()
    inner = (ys[:, None] ** 2 + xs[None, :] ** 2) <= 40.0**2
    center = vol.data[4][inner]
    assert abs(float(center.mean())) < 30.0
    outside = (ys[:, None] ** 2 + xs[None, :] ** 2) >= 80.0**2
    assert float(vol.data[4][outside].mean()) < -900.0


def test_fdk_needs_two_views(cylinder_scan):
    with pytest.raises(DomainError):
        fdk(cylinder_scan.subset([0]), GridSpec(shape=(2, 4, 4), spacing=(4.0, 4.0, 4.0)))


def test_single_phase_gating_equals_fdk(cylinder_scan):
    grid = GridSpec(shape=(2, 16, 16), spacing=(8.0, 8.0, 8.0))
    pm = PhaseMap(np.zeros(cylinder_scan.n_views, dtype=np.int64), 1)
    gated = gated_fdk(cylinder_scan, pm, 0, grid, kernel="ram-lak", halffan=True, return_mu=True)
    full = fdk(cylinder_scan, grid, kernel="ram-lak", halffan=True, return_mu=True)
    np.testing.assert_allclose(gated.data, full.data, rtol=1e-6, atol=1e-9)


def test_average_equals_mean_of_equal_count_phases(cylinder_scan):
    grid = GridSpec(shape=(2, 16, 16), spacing=(8.0, 8.0, 8.0))
    pm = PhaseMap(np.arange(cylinder_scan.n_views) % 4, 4)
    f_ave, phases = reconstruct_4d(cylinder_scan, pm, grid, kernel="ram-lak", return_mu=True)
    mean = phases.as_array().astype(np.float64).mean(axis=0)
    scale = np.abs(f_ave.data).max()
    np.testing.assert_allclose(mean, f_ave.data, atol=1e-4 * scale)


def test_empty_phase_is_rejected(cylinder_scan):
    grid = GridSpec(shape=(2, 8, 8), spacing=(8.0, 8.0, 8.0))
    pm = PhaseMap(np.zeros(cylinder_scan.n_views, dtype=np.int64), 2)
    with pytest.raises(DomainError):
        gated_fdk(cylinder_scan, pm, 1, grid)
    with pytest.raises(DomainError):
        reconstruct_4d(cylinder_scan, pm, grid)


def test_halffan_reconstruction_matches_full_fan():
    body = (Ellipsoid(name="water", center=(0.0, 0.0, 0.0), semi_axes=(60.0, 60.0, 500.0), value=0.0),)
    fine = GridSpec(shape=(16, 128, 128), spacing=(2.0, 2.0, 2.0))
    volume = sample_volume(Phantom4D(name="cyl", body=body), 0.0, fine)
    scan = _static_scan(volume, _geometry(offset=32.0))
    grid = GridSpec(shape=(4, 32, 32), spacing=(8.0, 8.0, 8.0))
    vol = fdk(scan, grid, kernel="ram-lak", halffan=True, mu_water=MU)
    zs, ys, xs = grid.axes()
    inner = (ys[:, None] ** 2 + xs[None, :] ** 2) <= 40.0**2
    assert abs(float(vol.data[2][inner].mean())) < 50.0


def test_fdk_is_linear(cylinder_scan):
    grid = GridSpec(shape=(2, 16, 16), spacing=(8.0, 8.0, 8.0))
    other = cylinder_scan.with_data(np.roll(cylinder_scan.data, 7, axis=0))
    mixed = cylinder_scan.with_data(2.5 * cylinder_scan.data - 0.75 * other.data)
    kw = dict(kernel="ram-lak", halffan=False, return_mu=True)
    lhs = fdk(mixed, grid, **kw).data.astype(np.float64)
    rhs = 2.5 * fdk(cylinder_scan, grid, **kw).data.astype(np.float64) - 0.75 * fdk(other, grid, **kw).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-5 * np.abs(rhs).max())


def test_fdk_is_stable_under_one_view_rotation(cylinder_scan):
    body = (Ellipsoid(name="water", center=(0.0, 0.0, 0.0), semi_axes=(60.0, 60.0, 500.0), value=0.0),)
    fine = GridSpec(shape=(16, 128, 128), spacing=(2.0, 2.0, 2.0))
    geometry = cylinder_scan.geometry
    turned = geometry.model_copy(update={"start_angle": 2.0 * np.pi / geometry.views_per_turn})
    rotated_scan = _static_scan(sample_volume(Phantom4D(name="cyl", body=body), 0.0, fine), turned)
    grid = GridSpec(shape=(4, 48, 48), spacing=(4.0, 4.0, 4.0))
    kw = dict(kernel="ram-lak", halffan=False, return_mu=True)
    ref = fdk(cylinder_scan, grid, **kw).data[1:3].astype(np.float64)
    moved = fdk(rotated_scan, grid, **kw).data[1:3].astype(np.float64)
    zs, ys, xs = grid.axes()
    inner = (ys[:, None] ** 2 + xs[None, :] ** 2) <= 50.0**2
    rms_ref = np.sqrt(np.mean(ref[:, inner] ** 2))
    rms_diff = np.sqrt(np.mean((moved - ref)[:, inner] ** 2))
    assert rms_diff < 0.01 * rms_ref
