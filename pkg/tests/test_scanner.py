import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings as hsettings, strategies as st

from src.core.errors import DomainError
from src.services.phantom4d import GridSpec, Volume3D, make_thorax_phantom, sample_ground_truth_4d
from src.services.respiration import phase_amplitudes, synth_breathing
from src.services.scanner import (
    ProjectionSet,
    ScanGeometry,
    forward_project,
    hu_to_mu,
    project_views,
    simulate_4d_scan,
    source_position,
)

MU = 0.02


def _volume(data: np.ndarray, spacing: float) -> Volume3D:
    grid = GridSpec(shape=data.shape, spacing=(spacing,) * 3)
    return Volume3D(data=data.astype(np.float32), spacing=grid.spacing, origin=grid.origin)


def test_zero_volume_projects_to_zero(small_geometry):
    vol = _volume(np.zeros((8, 16, 16)), 10.0)
    assert not forward_project(vol, small_geometry, 0.7).any()


def test_sphere_chords():
    # Disco ecuatorial de una esfera de 40 mm; la fila central del detector queda en z = 0
    grid = GridSpec(shape=(3, 352, 352), spacing=(0.25, 0.25, 0.25))
    zs, ys, xs = grid.axes()
    r2 = zs[:, None, None] ** 2 + ys[None, :, None] ** 2 + xs[None, None, :] ** 2
    vol = Volume3D(data=np.where(r2 <= 40.0**2, MU, 0.0).astype(np.float32), spacing=grid.spacing, origin=grid.origin)
    geometry = ScanGeometry(
        sad=1000.0, sdd=1500.0, detector_size=(82.0, 0.3), detector_channels=(41, 3),
        views_per_turn=4, rotation_time=1.0,
    )
    proj = forward_project(vol, geometry, 0.0)[1]
    u = geometry.u_coords()
    d = 1000.0 * np.abs(u) / np.sqrt(1500.0**2 + u**2)
    sel = d <= 24.5
    expected = 2.0 * MU * np.sqrt(40.0**2 - d[sel] ** 2)
    np.testing.assert_allclose(proj[sel], expected, rtol=0.01)
    assert proj[20] == pytest.approx(2.0 * MU * 40.0, rel=0.01)


def test_source_inside_volume_is_rejected(small_geometry):
    vol = _volume(np.zeros((2, 2, 2)), 1200.0)
    with pytest.raises(DomainError):
        forward_project(vol, small_geometry, 0.0)


def test_source_position_and_angles(small_geometry):
    np.testing.assert_allclose(source_position(small_geometry, np.pi / 2), [0.0, 1000.0, 0.0], atol=1e-9)
    angles = small_geometry.view_angles()
    assert angles.size == 40 and angles[0] == 0.0
    reverse = small_geometry.model_copy(update={"direction": -1}).view_angles()
    np.testing.assert_allclose(reverse, -angles)
    np.testing.assert_allclose(small_geometry.view_times()[1], 1.5)


@hsettings(max_examples=10, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(scale=st.floats(min_value=-3.0, max_value=3.0), angle=st.floats(min_value=0.0, max_value=2 * np.pi))
def test_projection_is_linear(small_geometry, scale, angle):
    rng = np.random.default_rng(0)
    a = _volume(rng.uniform(0, 0.02, (6, 8, 8)), 20.0)
    b = _volume(rng.uniform(0, 0.02, (6, 8, 8)), 20.0)
    mixed = a.with_data((scale * a.data + b.data).astype(np.float32))
    lhs = forward_project(mixed, small_geometry, angle)
    rhs = scale * forward_project(a, small_geometry, angle) + forward_project(b, small_geometry, angle)
    np.testing.assert_allclose(lhs, rhs, atol=1e-4)


def test_geometry_validation():
    with pytest.raises(ValueError):
        ScanGeometry(sad=1000.0, sdd=900.0, detector_size=(10.0, 10.0), detector_channels=(8, 8),
                     views_per_turn=4, rotation_time=1.0)
    with pytest.raises(ValueError):
        ScanGeometry(sad=1000.0, sdd=1500.0, detector_size=(10.0, 10.0), detector_channels=(1, 8),
                     views_per_turn=4, rotation_time=1.0)


def test_geometry_from_settings_defaults_to_quarter_offset(settings):
    geometry = ScanGeometry.from_settings(settings.geometry)
    assert geometry.detector_offset_u == pytest.approx(0.25 * geometry.detector_size[0])
    assert ScanGeometry.from_settings(settings.geometry, detector_offset_u=0.0).detector_offset_u == 0.0


def test_projection_set_validation(small_geometry):
    angles = small_geometry.view_angles()
    times = small_geometry.view_times()
    with pytest.raises(DomainError):
        ProjectionSet(small_geometry, angles, times, np.zeros((40, 64, 32)))
    scan = ProjectionSet(small_geometry, angles, times, np.zeros((40, 32, 64)))
    assert scan.n_views == 40
    with pytest.raises(DomainError):
        scan.phase_map(4)
    sub = scan.subset([0, 5])
    assert sub.n_views == 2 and sub.angles[1] == angles[5]


def test_hu_to_mu():
    vol = _volume(np.array([[[-1000.0, 0.0], [1000.0, 0.0]]]), 1.0)
    np.testing.assert_allclose(hu_to_mu(vol, 0.02).data.ravel(), [0.0, 0.02, 0.04, 0.02])


def test_quantized_scan_projects_phase_volumes(small_geometry, small_grid):
    phantom = make_thorax_phantom(0)
    signal = synth_breathing(60.0, 4.0, 0.0, 0.0, 25.0, seed=0)
    scan = simulate_4d_scan(phantom, signal, small_geometry, n_phases=4, quantize=True, noise_sd=0.0,
                            grid=small_grid, seed=0, sorting="phase", mu_water=MU)
    assert scan.data.shape == (40, 32, 64)
    assert np.all(scan.phases >= 0)
    truth = sample_ground_truth_4d(phantom, phase_amplitudes(4), small_grid, n_phases=4)
    for k in (0, 7, 13):
        mu = hu_to_mu(truth.phases[scan.phases[k]], MU)
        np.testing.assert_array_equal(scan.data[k], forward_project(mu, small_geometry, float(scan.angles[k])))


def test_scan_noise_is_seeded(small_geometry, small_grid):
    phantom = make_thorax_phantom(0)
    signal = synth_breathing(60.0, 4.0, 0.0, 0.0, 25.0, seed=0)
    kw = dict(n_phases=4, quantize=True, noise_sd=0.01, grid=small_grid, sorting="phase", mu_water=MU)
    a = simulate_4d_scan(phantom, signal, small_geometry, seed=1, **kw)
    b = simulate_4d_scan(phantom, signal, small_geometry, seed=1, **kw)
    c = simulate_4d_scan(phantom, signal, small_geometry, seed=2, **kw)
    assert a.data.tobytes() == b.data.tobytes()
    assert not np.array_equal(a.data, c.data)


def test_scan_requires_signal_coverage(small_geometry, small_grid):
    signal = synth_breathing(30.0, 4.0, 0.0, 0.0, 25.0, seed=0)
    with pytest.raises(DomainError):
        simulate_4d_scan(make_thorax_phantom(0), signal, small_geometry, n_phases=4, grid=small_grid)


def test_project_views_stacks(small_geometry):
    vol = _volume(np.full((4, 8, 8), 0.01), 10.0)
    stack = project_views(vol, small_geometry, [0.0, 1.0])
    assert stack.shape == (2, 32, 64)
    np.testing.assert_array_equal(stack[1], forward_project(vol, small_geometry, 1.0))


@pytest.mark.parametrize("angle", [0.0, np.pi / 4, np.pi / 2])
def test_centered_sphere_projects_symmetrically(small_geometry, angle):
    grid = GridSpec(shape=(8, 16, 16), spacing=(10.0, 10.0, 10.0))
    zs, ys, xs = grid.axes()
    r2 = zs[:, None, None] ** 2 + ys[None, :, None] ** 2 + xs[None, None, :] ** 2
    vol = Volume3D(data=np.where(r2 <= 50.0**2, MU, 0.0).astype(np.float32), spacing=grid.spacing, origin=grid.origin)
    proj = forward_project(vol, small_geometry, angle)
    assert proj.max() > 0.0
    np.testing.assert_allclose(proj, proj[:, ::-1], rtol=1e-4, atol=1e-7)


def test_line_integrals_scale_with_the_scene(small_geometry):
    rng = np.random.default_rng(3)
    data = rng.uniform(0, 0.02, (6, 8, 8))
    scaled = small_geometry.model_copy(
        update={"sad": 2000.0, "sdd": 3000.0, "detector_size": (1200.0, 600.0)}
    )
    base = forward_project(_volume(data, 20.0), small_geometry, 0.9)
    double = forward_project(_volume(data, 40.0), scaled, 0.9)
    np.testing.assert_allclose(double, 2.0 * base, rtol=1e-4, atol=1e-6)
